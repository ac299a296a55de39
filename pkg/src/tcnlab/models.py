"""TCN classifier, LSTM baseline and logistic floor model.

Models are plain data: a :class:`ModelSpec` describing the architecture and
a :class:`ModelParams` holding named arrays. ``forward`` / ``backward``
dispatch on ``spec.kind``.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import layers as L
from .errors import ConfigError, FormatError, ShapeError
from .tensor import DTYPE, check_shape

KINDS = ("tcn", "lstm", "logistic")
INIT_SCHEME = "kaiming_uniform_fan_in"
CHECKPOINT_FORMAT = "tcnlab-checkpoint"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class ModelSpec:
    kind: str = "tcn"
    n_channels_in: int = 9
    n_filters: int = 16
    kernel_size: int = 2
    n_residual_blocks: int = 8
    dilations: tuple | None = None
    dropout: float = 0.2
    feature_map_size: int = 4
    n_outputs: int = 2
    lstm_layers: int = 2
    lstm_hidden: int = 4
    lookback: int = 13

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ConfigError(f"unknown model kind {self.kind!r}; expected one of {KINDS}")
        if self.dilations is None:
            object.__setattr__(self, "dilations", tuple(2**j for j in range(self.n_residual_blocks)))
        else:
            object.__setattr__(self, "dilations", tuple(int(d) for d in self.dilations))
        counts = (
            "n_channels_in", "n_filters", "kernel_size", "n_residual_blocks",
            "feature_map_size", "n_outputs", "lstm_layers", "lstm_hidden", "lookback",
        )
        for name in counts:
            value = getattr(self, name)
            if isinstance(value, bool) or int(value) != value or value < 1:
                raise ConfigError(f"ModelSpec.{name} must be a positive integer, got {value!r}")
        if len(self.dilations) != self.n_residual_blocks:
            raise ConfigError(
                f"dilation schedule has {len(self.dilations)} entries for "
                f"{self.n_residual_blocks} residual blocks"
            )
        if any(d < 1 for d in self.dilations):
            raise ConfigError("dilations must be positive")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError(f"dropout must be in [0, 1), got {self.dropout}")

    def block_specs(self):
        specs = []
        c_in = self.n_channels_in
        for d in self.dilations:
            specs.append(
                L.ResidualBlockSpec.make(c_in, self.n_filters, self.kernel_size, d, self.dropout)
            )
            c_in = self.n_filters
        return specs

    def lstm_specs(self):
        sizes = [self.n_channels_in] + [self.lstm_hidden] * self.lstm_layers
        return [L.LstmSpec(sizes[i], sizes[i + 1]) for i in range(self.lstm_layers)]

    @property
    def feature_conv(self):
        return L.ConvSpec(self.n_filters, self.feature_map_size, 1, 1)

    def to_dict(self):
        d = asdict(self)
        d["dilations"] = list(self.dilations)
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        if d.get("dilations") is not None:
            d["dilations"] = tuple(d["dilations"])
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown ModelSpec fields: {sorted(unknown)}")
        return cls(**d)

    def param_shapes(self):
        """Ordered map of trainable parameter names to shapes."""
        shapes = {}
        if self.kind == "tcn":
            for j, bs in enumerate(self.block_specs()):
                for name, shape in bs.param_shapes().items():
                    shapes[f"block{j}.{name}"] = shape
            shapes["feature.weight"] = self.feature_conv.weight_shape
            shapes["feature.bias"] = (self.feature_map_size,)
        elif self.kind == "lstm":
            for l, ls in enumerate(self.lstm_specs()):
                for name, shape in ls.param_shapes().items():
                    shapes[f"lstm{l}.{name}"] = shape
            shapes["feature.weight"] = (self.feature_map_size, self.lstm_hidden)
            shapes["feature.bias"] = (self.feature_map_size,)
        if self.kind == "logistic":
            shapes["head.weight"] = (self.n_outputs, self.n_channels_in * self.lookback)
        else:
            shapes["head.weight"] = (self.n_outputs, self.feature_map_size)
        shapes["head.bias"] = (self.n_outputs,)
        return shapes

    def buffer_shapes(self):
        shapes = {}
        if self.kind == "tcn":
            for j, bs in enumerate(self.block_specs()):
                for name, shape in bs.buffer_shapes().items():
                    shapes[f"block{j}.{name}"] = shape
        return shapes


@dataclass
class ModelParams:
    """Named trainable tensors plus batch-norm running statistics."""

    weights: dict = field(default_factory=dict)
    buffers: dict = field(default_factory=dict)

    def copy(self):
        return ModelParams(
            {k: v.copy() for k, v in self.weights.items()},
            {k: v.copy() for k, v in self.buffers.items()},
        )

    def n_parameters(self):
        return int(sum(v.size for v in self.weights.values()))


def build_model(spec: ModelSpec, seed: int = 0) -> ModelParams:
    """Initialize parameters deterministically from ``seed``.

    Conv and linear weights are Kaiming-uniform on fan-in, LSTM gate
    matrices uniform on ``1/sqrt(hidden)``; biases and beta start at zero,
    gamma at one.
    """
    rng = np.random.default_rng(seed)
    weights = {}
    for name, shape in spec.param_shapes().items():
        leaf = name.rsplit(".", 1)[1]
        if leaf == "gamma":
            arr = np.ones(shape)
        elif leaf in ("bias", "beta", "b"):
            arr = np.zeros(shape)
        elif leaf in ("W", "U"):
            bound = 1.0 / np.sqrt(spec.lstm_hidden)
            arr = rng.uniform(-bound, bound, size=shape)
        else:
            fan_in = int(np.prod(shape[1:]))
            bound = np.sqrt(6.0 / fan_in)
            arr = rng.uniform(-bound, bound, size=shape)
        weights[name] = np.ascontiguousarray(arr, dtype=DTYPE)
    buffers = {}
    for name, shape in spec.buffer_shapes().items():
        buffers[name] = np.zeros(shape) if name.endswith("running_mean") else np.ones(shape)
    return ModelParams(weights, buffers)


def receptive_field(spec: ModelSpec) -> int:
    """Number of input steps that can influence the final output step."""
    if spec.kind != "tcn":
        raise ConfigError("receptive field is defined for TCN specs only")
    return 1 + sum(2 * (spec.kernel_size - 1) * d for d in spec.dilations)


def _block_view(d, j):
    prefix = f"block{j}."
    return {k[len(prefix):]: v for k, v in d.items() if k.startswith(prefix)}


def _check_input(spec, x):
    if x.ndim != 3:
        raise ShapeError(f"model input must be [batch, channels, time], got {x.shape}")
    check_shape(x, (None, spec.n_channels_in, spec.lookback), "model input")


def _tcn_stack(params, spec, x, mode, rng):
    w = params.weights
    h = x
    block_caches = []
    for j, bs in enumerate(spec.block_specs()):
        h, c = L.residual_block_forward(h, bs, _block_view(w, j), _block_view(params.buffers, j), mode, rng)
        block_caches.append(c)
    fmap = L.conv1d_causal_forward(h, spec.feature_conv, w["feature.weight"], w["feature.bias"])
    return fmap, h, block_caches


def tcn_feature_map(params: ModelParams, spec: ModelSpec, x):
    """Eval-mode feature map ``[batch, feature_map_size, time]`` at every hour.

    The classifier reads only the last column; the other columns are what it
    would read had the window ended at that hour.
    """
    if spec.kind != "tcn":
        raise ConfigError("feature maps exist only for the tcn kind")
    if x.ndim != 3:
        raise ShapeError(f"model input must be [batch, channels, time], got {x.shape}")
    check_shape(x, (None, spec.n_channels_in, None), "model input")
    return _tcn_stack(params, spec, x, L.EVAL, None)[0]


def forward(params: ModelParams, spec: ModelSpec, x, mode="eval", rng=None):
    """Compute logits ``[batch, n_outputs]``; returns ``(logits, cache)``.

    Train mode updates batch-norm running statistics in ``params.buffers``.
    """
    _check_input(spec, x)
    w = params.weights
    if spec.kind == "tcn":
        fmap, h, block_caches = _tcn_stack(params, spec, x, mode, rng)
        feat = L.relu_forward(fmap[:, :, -1])
        logits = L.linear_forward(feat, w["head.weight"], w["head.bias"])
        cache = dict(blocks=block_caches, h=h, fmap_last=fmap[:, :, -1], feat=feat)
    elif spec.kind == "lstm":
        seq = np.ascontiguousarray(x.transpose(0, 2, 1))
        layer_caches = []
        for l, ls in enumerate(spec.lstm_specs()):
            seq, c = L.lstm_forward(seq, ls, w[f"lstm{l}.W"], w[f"lstm{l}.U"], w[f"lstm{l}.b"])
            layer_caches.append(c)
        last = seq[:, -1, :]
        pre = L.linear_forward(last, w["feature.weight"], w["feature.bias"])
        feat = L.relu_forward(pre)
        logits = L.linear_forward(feat, w["head.weight"], w["head.bias"])
        cache = dict(layers=layer_caches, last=last, pre=pre, feat=feat, T=x.shape[2])
    else:
        flat = x.reshape(x.shape[0], -1)
        logits = L.linear_forward(flat, w["head.weight"], w["head.bias"])
        cache = dict(flat=flat, shape=x.shape)
    return logits, cache


def backward(params: ModelParams, spec: ModelSpec, cache, grad_logits, return_input_grad=False):
    """Gradients of the loss w.r.t. every trainable tensor, keyed like ``params.weights``."""
    w = params.weights
    grads = {}
    if spec.kind == "logistic":
        gflat, grads["head.weight"], grads["head.bias"] = L.linear_backward(
            grad_logits, cache["flat"], w["head.weight"]
        )
        gx = gflat.reshape(cache["shape"])
    elif spec.kind == "lstm":
        gfeat, grads["head.weight"], grads["head.bias"] = L.linear_backward(
            grad_logits, cache["feat"], w["head.weight"]
        )
        gpre = L.relu_backward(gfeat, cache["pre"])
        glast, grads["feature.weight"], grads["feature.bias"] = L.linear_backward(
            gpre, cache["last"], w["feature.weight"]
        )
        B, H = glast.shape
        gseq = np.zeros((B, cache["T"], H))
        gseq[:, -1, :] = glast
        for l in reversed(range(spec.lstm_layers)):
            gseq, g = L.lstm_backward(gseq, cache["layers"][l], w[f"lstm{l}.W"], w[f"lstm{l}.U"])
            for k, v in g.items():
                grads[f"lstm{l}.{k}"] = v
        gx = gseq.transpose(0, 2, 1)
    else:
        gfeat, grads["head.weight"], grads["head.bias"] = L.linear_backward(
            grad_logits, cache["feat"], w["head.weight"]
        )
        gf_last = L.relu_backward(gfeat, cache["fmap_last"])
        h = cache["h"]
        gfmap = np.zeros((h.shape[0], spec.feature_map_size, h.shape[2]))
        gfmap[:, :, -1] = gf_last
        gh, grads["feature.weight"], grads["feature.bias"] = L.conv1d_causal_backward(
            gfmap, h, spec.feature_conv, w["feature.weight"]
        )
        block_specs = spec.block_specs()
        for j in reversed(range(spec.n_residual_blocks)):
            bs = block_specs[j]
            gh, g = L.residual_block_backward(gh, cache["blocks"][j], bs, _block_view(w, j))
            for k, v in g.items():
                grads[f"block{j}.{k}"] = v
        gx = gh
    grads = {name: grads[name] for name in w}
    if return_input_grad:
        return grads, gx
    return grads


def softmax(logits):
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def predict_proba(params: ModelParams, spec: ModelSpec, x, batch_size=2048):
    """Eval-mode class probabilities ``[batch, n_outputs]``."""
    out = []
    for start in range(0, max(len(x), 1), batch_size):
        chunk = x[start : start + batch_size]
        if len(chunk) == 0:
            break
        logits, _ = forward(params, spec, chunk, mode=L.EVAL)
        out.append(softmax(logits))
    if not out:
        return np.zeros((0, spec.n_outputs))
    return np.concatenate(out, axis=0)


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------


@dataclass
class Checkpoint:
    spec: ModelSpec
    params: ModelParams
    seed: int
    metadata: dict = field(default_factory=dict)


def _encode_arrays(d):
    return [
        {"name": k, "shape": list(v.shape), "data": [float(x) for x in v.reshape(-1)]}
        for k, v in d.items()
    ]


def checkpoint_to_text(ckpt: Checkpoint) -> str:
    doc = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "init": INIT_SCHEME,
        "seed": int(ckpt.seed),
        "spec": ckpt.spec.to_dict(),
        "metadata": ckpt.metadata,
        "parameters": _encode_arrays(ckpt.params.weights),
        "buffers": _encode_arrays(ckpt.params.buffers),
    }
    # json writes floats with repr(), which round-trips float64 exactly
    return json.dumps(doc, indent=1, allow_nan=False) + "\n"


def _decode_arrays(entries, expected, what):
    if not isinstance(entries, list):
        raise FormatError(f"checkpoint {what} must be a list")
    names = [e.get("name") for e in entries]
    if names != list(expected):
        missing = set(expected) - set(names)
        extra = set(names) - set(expected)
        raise FormatError(
            f"checkpoint {what} do not match the model spec "
            f"(missing {sorted(missing)}, unexpected {sorted(extra)})"
        )
    out = {}
    for e in entries:
        name, shape, data = e["name"], tuple(e["shape"]), e["data"]
        if shape != tuple(expected[name]):
            raise FormatError(f"checkpoint {what[:-1]} {name}: shape {shape} but spec requires {expected[name]}")
        if len(data) != int(np.prod(shape)):
            raise FormatError(f"checkpoint {what[:-1]} {name}: {len(data)} values for shape {shape}")
        arr = np.array(data, dtype=DTYPE).reshape(shape)
        if not np.all(np.isfinite(arr)):
            raise FormatError(f"checkpoint {what[:-1]} {name} contains non-finite values")
        out[name] = arr
    return out


def checkpoint_from_text(text: str) -> Checkpoint:
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise FormatError(f"checkpoint is not valid JSON: {exc}") from exc
    if not isinstance(doc, dict) or doc.get("format") != CHECKPOINT_FORMAT:
        raise FormatError("not a tcnlab checkpoint")
    if doc.get("version") != CHECKPOINT_VERSION:
        raise FormatError(
            f"unsupported checkpoint version {doc.get('version')!r} (expected {CHECKPOINT_VERSION})"
        )
    try:
        spec = ModelSpec.from_dict(doc["spec"])
        weights = _decode_arrays(doc["parameters"], spec.param_shapes(), "parameters")
        buffers = _decode_arrays(doc["buffers"], spec.buffer_shapes(), "buffers")
        seed = int(doc["seed"])
    except (KeyError, TypeError, ConfigError) as exc:
        raise FormatError(f"malformed checkpoint: {exc}") from exc
    return Checkpoint(spec, ModelParams(weights, buffers), seed, doc.get("metadata") or {})


def save_checkpoint(path, ckpt: Checkpoint) -> None:
    Path(path).write_text(checkpoint_to_text(ckpt))


def load_checkpoint(path) -> Checkpoint:
    return checkpoint_from_text(Path(path).read_text())
