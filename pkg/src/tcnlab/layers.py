"""Forward and backward passes for the network primitives.

All sequence tensors are laid out ``[batch, channels, time]``. Each
``*_forward`` returns its output together with whatever the matching
``*_backward`` needs; nothing is stored on module-level state.

Convolution kernels use cross-correlation storage order: for a kernel of
size ``k`` and dilation ``d``, ``weight[..., j]`` multiplies the input
``(k - 1 - j) * d`` steps in the past, so ``weight[..., k - 1]`` is the
current-time tap.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, ShapeError
from .tensor import DTYPE, check_shape

TRAIN = "train"
EVAL = "eval"


def _check_mode(mode):
    if mode not in (TRAIN, EVAL):
        raise ConfigError(f"mode must be 'train' or 'eval', got {mode!r}")


# ---------------------------------------------------------------------------
# Causal dilated convolution
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ConvSpec:
    in_channels: int
    out_channels: int
    kernel_size: int = 2
    dilation: int = 1

    def __post_init__(self):
        for name in ("in_channels", "out_channels", "kernel_size", "dilation"):
            value = getattr(self, name)
            if int(value) != value or value < 1:
                raise ConfigError(f"ConvSpec.{name} must be a positive integer, got {value!r}")

    @property
    def padding(self) -> int:
        """Left zero padding that keeps length and causality."""
        return (self.kernel_size - 1) * self.dilation

    @property
    def weight_shape(self):
        return (self.out_channels, self.in_channels, self.kernel_size)


def _check_conv_args(x, spec, weight, bias=None):
    if x.ndim != 3 or x.shape[2] < 1:
        raise ShapeError(f"conv1d: input must be [batch, channels, time>=1], got {x.shape}")
    check_shape(x, (None, spec.in_channels, None), "conv1d input")
    check_shape(weight, spec.weight_shape, "conv1d weight")
    if bias is not None:
        check_shape(bias, (spec.out_channels,), "conv1d bias")


def conv1d_causal_forward(x, spec: ConvSpec, weight, bias):
    """Causal dilated 1-D convolution; output length equals input length."""
    _check_conv_args(x, spec, weight, bias)
    batch, _, T = x.shape
    k, d = spec.kernel_size, spec.dilation
    out = np.empty((batch, spec.out_channels, T), dtype=DTYPE)
    out[...] = bias[None, :, None]
    for j in range(k):
        lag = (k - 1 - j) * d
        if lag >= T:
            continue  # tap only ever sees left padding
        out[:, :, lag:] += np.matmul(weight[:, :, j], x[:, :, : T - lag])
    return out


def conv1d_causal_backward(grad_out, x, spec: ConvSpec, weight):
    """Return ``(grad_input, grad_weight, grad_bias)``."""
    _check_conv_args(x, spec, weight)
    check_shape(grad_out, (x.shape[0], spec.out_channels, x.shape[2]), "conv1d grad_out")
    T = x.shape[2]
    k, d = spec.kernel_size, spec.dilation
    grad_x = np.zeros_like(x)
    grad_w = np.zeros_like(weight)
    for j in range(k):
        lag = (k - 1 - j) * d
        if lag >= T:
            continue
        g = grad_out[:, :, lag:]
        grad_w[:, :, j] = np.tensordot(g, x[:, :, : T - lag], axes=([0, 2], [0, 2]))
        grad_x[:, :, : T - lag] += np.matmul(weight[:, :, j].T, g)
    grad_b = grad_out.sum(axis=(0, 2))
    return grad_x, grad_w, grad_b


# ---------------------------------------------------------------------------
# Pointwise layers
# ---------------------------------------------------------------------------


def relu_forward(x):
    return np.maximum(x, 0.0)


def relu_backward(grad_out, x):
    # subgradient 0 at exactly 0
    return np.where(x > 0.0, grad_out, 0.0)


def dropout_forward(x, p: float, mode: str, rng: np.random.Generator | None = None):
    """Inverted dropout. Returns ``(y, mask)``; ``mask`` already holds the 1/(1-p) scale."""
    _check_mode(mode)
    if not 0.0 <= p < 1.0:
        raise ConfigError(f"dropout probability must be in [0, 1), got {p}")
    if mode == EVAL or p == 0.0:
        return x.copy(), np.ones_like(x)
    if rng is None:
        raise ConfigError("train-mode dropout needs an rng")
    keep = rng.random(x.shape) >= p
    mask = keep.astype(DTYPE) / (1.0 - p)
    return x * mask, mask


def dropout_backward(grad_out, mask):
    return grad_out * mask


# ---------------------------------------------------------------------------
# Batch normalization
# ---------------------------------------------------------------------------


@dataclass
class BatchNormState:
    """Per-channel affine parameters and running statistics.

    The arrays are updated in place during train-mode forward passes, so a
    state built from views into a model's parameter dicts keeps them in sync.
    """

    gamma: np.ndarray
    beta: np.ndarray
    running_mean: np.ndarray
    running_var: np.ndarray
    momentum: float = 0.1
    eps: float = 1e-5

    @classmethod
    def fresh(cls, channels: int, momentum=0.1, eps=1e-5):
        return cls(
            gamma=np.ones(channels),
            beta=np.zeros(channels),
            running_mean=np.zeros(channels),
            running_var=np.ones(channels),
            momentum=momentum,
            eps=eps,
        )

    @property
    def channels(self):
        return self.gamma.shape[0]


def batchnorm_forward(x, state: BatchNormState, mode: str):
    """Normalize ``[batch, C, time]`` per channel over batch and time."""
    _check_mode(mode)
    C = state.channels
    if x.ndim != 3 or x.shape[1] != C:
        raise ShapeError(f"batchnorm: expected [batch, {C}, time], got {x.shape}")
    for name in ("beta", "running_mean", "running_var"):
        check_shape(getattr(state, name), (C,), f"batchnorm {name}")
    if mode == TRAIN:
        n = x.shape[0] * x.shape[2]
        if n < 2:
            raise ConfigError("batchnorm in train mode needs at least 2 values per channel")
        mean = x.mean(axis=(0, 2))
        var = x.var(axis=(0, 2))
        m = state.momentum
        state.running_mean *= 1.0 - m
        state.running_mean += m * mean
        state.running_var *= 1.0 - m
        state.running_var += m * var * (n / (n - 1))
    else:
        mean = state.running_mean
        var = state.running_var
    inv_std = 1.0 / np.sqrt(var + state.eps)
    xhat = (x - mean[None, :, None]) * inv_std[None, :, None]
    y = xhat * state.gamma[None, :, None] + state.beta[None, :, None]
    cache = (xhat, inv_std, mode)
    return y, cache


def batchnorm_backward(grad_out, cache, state: BatchNormState):
    """Return ``(grad_x, grad_gamma, grad_beta)``."""
    xhat, inv_std, mode = cache
    grad_gamma = (grad_out * xhat).sum(axis=(0, 2))
    grad_beta = grad_out.sum(axis=(0, 2))
    dxhat = grad_out * state.gamma[None, :, None]
    if mode == EVAL:
        return dxhat * inv_std[None, :, None], grad_gamma, grad_beta
    n = grad_out.shape[0] * grad_out.shape[2]
    sum_d = dxhat.sum(axis=(0, 2))[None, :, None]
    sum_dx = (dxhat * xhat).sum(axis=(0, 2))[None, :, None]
    grad_x = (inv_std[None, :, None] / n) * (n * dxhat - sum_d - xhat * sum_dx)
    return grad_x, grad_gamma, grad_beta


# ---------------------------------------------------------------------------
# Residual block
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ResidualBlockSpec:
    conv1: ConvSpec
    conv2: ConvSpec
    dropout: float = 0.2
    projection: ConvSpec | None = None

    def __post_init__(self):
        if self.conv1.dilation != self.conv2.dilation:
            raise ConfigError("both convolutions in a residual block share one dilation")
        if self.conv1.out_channels != self.conv2.in_channels:
            raise ConfigError("conv1 output channels must feed conv2")
        mismatch = self.conv1.in_channels != self.conv2.out_channels
        if mismatch != (self.projection is not None):
            raise ConfigError("a 1x1 projection is required exactly when block channels change")
        if self.projection is not None:
            p = self.projection
            if (p.in_channels, p.out_channels, p.kernel_size) != (
                self.conv1.in_channels,
                self.conv2.out_channels,
                1,
            ):
                raise ConfigError("projection must be a 1x1 conv from block input to block output channels")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError(f"dropout probability must be in [0, 1), got {self.dropout}")

    @classmethod
    def make(cls, in_channels, out_channels, kernel_size=2, dilation=1, dropout=0.2):
        proj = ConvSpec(in_channels, out_channels, 1, 1) if in_channels != out_channels else None
        return cls(
            conv1=ConvSpec(in_channels, out_channels, kernel_size, dilation),
            conv2=ConvSpec(out_channels, out_channels, kernel_size, dilation),
            dropout=dropout,
            projection=proj,
        )

    @property
    def in_channels(self):
        return self.conv1.in_channels

    @property
    def out_channels(self):
        return self.conv2.out_channels

    def param_shapes(self):
        """Trainable tensors of the block, keyed by local name."""
        c1, c2 = self.conv1, self.conv2
        shapes = {
            "conv1.weight": c1.weight_shape,
            "conv1.bias": (c1.out_channels,),
            "bn1.gamma": (c1.out_channels,),
            "bn1.beta": (c1.out_channels,),
            "conv2.weight": c2.weight_shape,
            "conv2.bias": (c2.out_channels,),
            "bn2.gamma": (c2.out_channels,),
            "bn2.beta": (c2.out_channels,),
        }
        if self.projection is not None:
            shapes["proj.weight"] = self.projection.weight_shape
            shapes["proj.bias"] = (self.projection.out_channels,)
        return shapes

    def buffer_shapes(self):
        c = self.conv1.out_channels
        return {
            "bn1.running_mean": (c,),
            "bn1.running_var": (c,),
            "bn2.running_mean": (c,),
            "bn2.running_var": (c,),
        }


def _bn_state(params, buffers, name):
    return BatchNormState(
        gamma=params[f"{name}.gamma"],
        beta=params[f"{name}.beta"],
        running_mean=buffers[f"{name}.running_mean"],
        running_var=buffers[f"{name}.running_var"],
    )


def residual_block_forward(x, spec: ResidualBlockSpec, params, buffers, mode, rng=None):
    """``relu(F(x) + skip(x))`` with F = conv, dropout, bn, relu, conv, dropout, bn.

    ``params`` and ``buffers`` are dicts keyed by the local names from
    ``spec.param_shapes()`` / ``spec.buffer_shapes()``.
    """
    check_shape(x, (None, spec.in_channels, None), "residual block input")
    bn1 = _bn_state(params, buffers, "bn1")
    bn2 = _bn_state(params, buffers, "bn2")

    a1 = conv1d_causal_forward(x, spec.conv1, params["conv1.weight"], params["conv1.bias"])
    d1, m1 = dropout_forward(a1, spec.dropout, mode, rng)
    b1, bn1_cache = batchnorm_forward(d1, bn1, mode)
    r1 = relu_forward(b1)
    a2 = conv1d_causal_forward(r1, spec.conv2, params["conv2.weight"], params["conv2.bias"])
    d2, m2 = dropout_forward(a2, spec.dropout, mode, rng)
    b2, bn2_cache = batchnorm_forward(d2, bn2, mode)
    if spec.projection is None:
        skip = x
    else:
        skip = conv1d_causal_forward(x, spec.projection, params["proj.weight"], params["proj.bias"])
    s = b2 + skip
    y = relu_forward(s)
    cache = dict(x=x, m1=m1, bn1=bn1_cache, b1=b1, r1=r1, m2=m2, bn2=bn2_cache, s=s)
    return y, cache


def residual_block_backward(grad_out, cache, spec: ResidualBlockSpec, params):
    """Return ``(grad_x, grads)`` with ``grads`` keyed like ``spec.param_shapes()``."""
    grads = {}
    gs = relu_backward(grad_out, cache["s"])
    # BN backward only reads gamma from the state; buffers are not needed
    bn1 = BatchNormState(params["bn1.gamma"], params["bn1.beta"], None, None)
    bn2 = BatchNormState(params["bn2.gamma"], params["bn2.beta"], None, None)

    gd2, grads["bn2.gamma"], grads["bn2.beta"] = batchnorm_backward(gs, cache["bn2"], bn2)
    ga2 = dropout_backward(gd2, cache["m2"])
    gr1, grads["conv2.weight"], grads["conv2.bias"] = conv1d_causal_backward(
        ga2, cache["r1"], spec.conv2, params["conv2.weight"]
    )
    gb1 = relu_backward(gr1, cache["b1"])
    gd1, grads["bn1.gamma"], grads["bn1.beta"] = batchnorm_backward(gb1, cache["bn1"], bn1)
    ga1 = dropout_backward(gd1, cache["m1"])
    gx, grads["conv1.weight"], grads["conv1.bias"] = conv1d_causal_backward(
        ga1, cache["x"], spec.conv1, params["conv1.weight"]
    )
    if spec.projection is None:
        gx = gx + gs
    else:
        gskip, grads["proj.weight"], grads["proj.bias"] = conv1d_causal_backward(
            gs, cache["x"], spec.projection, params["proj.weight"]
        )
        gx = gx + gskip
    return gx, grads


# ---------------------------------------------------------------------------
# Fully connected
# ---------------------------------------------------------------------------


def linear_forward(x, weight, bias):
    if x.ndim != 2 or weight.ndim != 2 or x.shape[1] != weight.shape[1]:
        raise ShapeError(f"linear: input {x.shape} incompatible with weight {weight.shape}")
    check_shape(bias, (weight.shape[0],), "linear bias")
    # einsum keeps each row's result independent of the batch size (BLAS does not)
    return np.einsum("bi,oi->bo", x, weight) + bias


def linear_backward(grad_out, x, weight):
    """Return ``(grad_x, grad_weight, grad_bias)``."""
    check_shape(grad_out, (x.shape[0], weight.shape[0]), "linear grad_out")
    return grad_out @ weight, grad_out.T @ x, grad_out.sum(axis=0)


# ---------------------------------------------------------------------------
# LSTM
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class LstmSpec:
    """Shapes of one LSTM layer.

    Gate parameters are stacked in the order input, forget, cell, output:
    ``W`` is ``[4H, input_size]``, ``U`` is ``[4H, H]`` and ``b`` is ``[4H]``.
    """

    input_size: int
    hidden_size: int
    gate_order: tuple = field(default=("i", "f", "g", "o"), repr=False)

    def __post_init__(self):
        if self.input_size < 1 or self.hidden_size < 1:
            raise ConfigError("LSTM sizes must be positive")

    def param_shapes(self):
        H = self.hidden_size
        return {"W": (4 * H, self.input_size), "U": (4 * H, H), "b": (4 * H,)}


def sigmoid(x):
    # tanh form avoids overflow warnings for large |x|
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def lstm_step(x_t, h_prev, c_prev, spec: LstmSpec, W, U, b):
    """One LSTM update. Returns ``(h_t, c_t, cache)``."""
    H = spec.hidden_size
    check_shape(x_t, (None, spec.input_size), "lstm x_t")
    check_shape(h_prev, (x_t.shape[0], H), "lstm h_prev")
    check_shape(c_prev, (x_t.shape[0], H), "lstm c_prev")
    for name, arr in zip(("W", "U", "b"), (W, U, b)):
        check_shape(arr, spec.param_shapes()[name], f"lstm {name}")
    z = np.einsum("bi,gi->bg", x_t, W) + np.einsum("bh,gh->bg", h_prev, U) + b
    i = sigmoid(z[:, :H])
    f = sigmoid(z[:, H : 2 * H])
    g = np.tanh(z[:, 2 * H : 3 * H])
    o = sigmoid(z[:, 3 * H :])
    c_t = f * c_prev + i * g
    tc = np.tanh(c_t)
    h_t = o * tc
    cache = (x_t, h_prev, c_prev, i, f, g, o, tc)
    return h_t, c_t, cache


def lstm_step_backward(dh, dc, cache, W, U):
    """Backprop one step. Returns ``(dx, dh_prev, dc_prev, dW, dU, db)``."""
    x_t, h_prev, c_prev, i, f, g, o, tc = cache
    do = dh * tc
    dc = dc + dh * o * (1.0 - tc * tc)
    di = dc * g
    dg = dc * i
    df = dc * c_prev
    dc_prev = dc * f
    dz = np.concatenate(
        [di * i * (1.0 - i), df * f * (1.0 - f), dg * (1.0 - g * g), do * o * (1.0 - o)],
        axis=1,
    )
    dx = dz @ W
    dh_prev = dz @ U
    return dx, dh_prev, dc_prev, dz.T @ x_t, dz.T @ h_prev, dz.sum(axis=0)


def lstm_forward(x, spec: LstmSpec, W, U, b):
    """Run a layer over ``x`` of shape ``[batch, time, input_size]`` from zero state.

    Returns the hidden sequence ``[batch, time, hidden]`` and a cache.
    """
    if x.ndim != 3:
        raise ShapeError(f"lstm: expected [batch, time, features], got {x.shape}")
    B, T, _ = x.shape
    H = spec.hidden_size
    h = np.zeros((B, H))
    c = np.zeros((B, H))
    hs = np.empty((B, T, H))
    caches = []
    for t in range(T):
        h, c, cache = lstm_step(x[:, t, :], h, c, spec, W, U, b)
        hs[:, t, :] = h
        caches.append(cache)
    return hs, caches


def lstm_backward(grad_hs, caches, W, U):
    """Backprop through time. Returns ``(grad_x, {"W", "U", "b"})``."""
    B, T, H = grad_hs.shape
    grad_x = np.empty((B, T, W.shape[1]))
    dW = np.zeros_like(W)
    dU = np.zeros_like(U)
    db = np.zeros(W.shape[0])
    dh_next = np.zeros((B, H))
    dc_next = np.zeros((B, H))
    for t in reversed(range(T)):
        dx, dh_next, dc_next, gW, gU, gb = lstm_step_backward(
            grad_hs[:, t, :] + dh_next, dc_next, caches[t], W, U
        )
        grad_x[:, t, :] = dx
        dW += gW
        dU += gU
        db += gb
    return grad_x, {"W": dW, "U": dU, "b": db}
