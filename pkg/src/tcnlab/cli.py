"""Command-line entry point: ``tcnlab {generate,train,evaluate,predict}``.

A run is described by an optional JSON config file::

    {"seed": 3,
     "cohort": {"n_patients": 300, "septic_fraction": 0.5},
     "model": {"kind": "tcn", "n_residual_blocks": 8},
     "train": {"epochs": 10, "lr": 0.005, "batch_size": 64},
     "split_ratio": 0.8, "baseline": "running_min", "threshold": 0.5}

Command-line flags override the file. The seed comes from ``--seed``, then
the file, then the ``TCNLAB_SEED`` environment variable, then 0.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .data import (
    BASELINE_MODES,
    HORIZON_HOURS,
    N_CHANNELS,
    CohortConfig,
    Standardizer,
    generate_cohort,
    load_cohort_csv,
    save_cohort_csv,
)
from .errors import ConfigError, DataError, FormatError, TcnLabError
from .metrics import evaluate, write_metrics_csv, write_roc_csv
from .models import Checkpoint, ModelSpec, load_checkpoint, predict_proba, save_checkpoint
from .optim import TrainConfig, write_history_csv
from .pipeline import VAL_RATIO, make_splits, train_on_splits

log = logging.getLogger("tcnlab")

SEED_ENV = "TCNLAB_SEED"
CONFIG_KEYS = {"seed", "cohort", "model", "train", "split_ratio", "baseline", "threshold", "horizon"}


@dataclasses.dataclass
class RunConfig:
    seed: int = 0
    cohort: CohortConfig = dataclasses.field(default_factory=CohortConfig)
    model: ModelSpec = dataclasses.field(default_factory=ModelSpec)
    train: TrainConfig = dataclasses.field(default_factory=TrainConfig)
    split_ratio: float = 0.8
    horizon: int = HORIZON_HOURS
    baseline: str = "running_min"
    threshold: float = 0.5

    def __post_init__(self):
        if not 0.0 < self.split_ratio < 1.0:
            raise ConfigError(f"split_ratio must be in (0, 1), got {self.split_ratio}")
        if self.baseline not in BASELINE_MODES:
            raise ConfigError(f"baseline must be one of {BASELINE_MODES}")
        if not 0.0 <= self.threshold <= 1.0:
            raise ConfigError(f"threshold must be in [0, 1], got {self.threshold}")


def _build(cls, values, section):
    if not isinstance(values, dict):
        raise ConfigError(f"config section {section!r} must be an object")
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = set(values) - names
    if unknown:
        raise ConfigError(f"unknown keys in config section {section!r}: {sorted(unknown)}")
    values = {k: tuple(v) if isinstance(v, list) else v for k, v in values.items()}
    try:
        return cls(**values)
    except TypeError as exc:
        raise ConfigError(f"bad config section {section!r}: {exc}") from exc


def _env_seed():
    raw = os.environ.get(SEED_ENV)
    if raw is None or raw == "":
        return None
    try:
        return int(raw)
    except ValueError:
        raise ConfigError(f"{SEED_ENV} must be an integer, got {raw!r}") from None


def load_run_config(args) -> RunConfig:
    """Merge config file, environment and flags (flags win)."""
    doc = {}
    if getattr(args, "config", None):
        try:
            doc = json.loads(Path(args.config).read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{args.config}: not valid JSON ({exc})") from exc
        if not isinstance(doc, dict):
            raise ConfigError(f"{args.config}: top level must be an object")
        unknown = set(doc) - CONFIG_KEYS
        if unknown:
            raise ConfigError(f"{args.config}: unknown keys {sorted(unknown)}")

    seed = args.seed
    if seed is None:
        seed = doc.get("seed")
    if seed is None:
        seed = _env_seed()
    if seed is None:
        seed = 0
    if int(seed) != seed or seed < 0:
        raise ConfigError(f"seed must be a non-negative integer, got {seed!r}")
    seed = int(seed)

    cohort = dict(doc.get("cohort", {}))
    cohort.setdefault("seed", seed)
    model = dict(doc.get("model", {}))
    train = dict(doc.get("train", {}))
    train.setdefault("seed", seed)
    if getattr(args, "model", None):
        model["kind"] = args.model
    for flag, key in (("epochs", "epochs"), ("lr", "lr"), ("batch_size", "batch_size")):
        value = getattr(args, flag, None)
        if value is not None:
            train[key] = value
    if args.seed is not None:
        cohort["seed"] = train["seed"] = seed

    threshold = getattr(args, "threshold", None)
    return RunConfig(
        seed=seed,
        cohort=_build(CohortConfig, cohort, "cohort"),
        model=_build(ModelSpec, model, "model"),
        train=_build(TrainConfig, train, "train"),
        split_ratio=float(doc.get("split_ratio", 0.8)),
        horizon=int(doc.get("horizon", HORIZON_HOURS)),
        baseline=doc.get("baseline", "running_min"),
        threshold=float(threshold if threshold is not None else doc.get("threshold", 0.5)),
    )


def _require(args, *names):
    for name in names:
        if not getattr(args, name, None):
            raise ConfigError(f"--{name.replace('_', '-')} is required for '{args.command}'")


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------


def cmd_generate(args) -> int:
    _require(args, "out")
    run = load_run_config(args)
    records = generate_cohort(run.cohort)
    save_cohort_csv(records, args.out)
    log.info("wrote %d stays to %s", len(records), args.out)
    return 0


def _split_meta(run, spec):
    return dict(
        split_seed=run.seed,
        split_ratio=run.split_ratio,
        val_ratio=VAL_RATIO,
        lookback=spec.lookback,
        horizon=run.horizon,
        baseline=run.baseline,
        threshold=run.threshold,
    )


def cmd_train(args) -> int:
    _require(args, "cohort", "checkpoint")
    run = load_run_config(args)
    records = load_cohort_csv(args.cohort)
    meta = _split_meta(run, run.model)
    splits = make_splits(records, run.model.lookback, run.horizon, run.baseline, run.split_ratio, run.seed)
    if len(splits.fit) == 0:
        raise DataError("training split is empty")
    model = train_on_splits(run.model, splits, run.train, init_seed=run.seed)
    meta.update(
        standardization=dict(mean=model.standardizer.mean.tolist(), std=model.standardizer.std.tolist()),
        train=dataclasses.asdict(run.train),
        n_fit_samples=len(splits.fit),
        n_val_samples=len(splits.val),
    )
    save_checkpoint(args.checkpoint, Checkpoint(run.model, model.params, run.seed, meta))
    if args.out:
        write_history_csv(model.result.history, args.out)
    log.info("saved checkpoint to %s", args.checkpoint)
    return 0


def _standardizer(ckpt) -> Standardizer:
    try:
        st = ckpt.metadata["standardization"]
        mean = np.array(st["mean"], dtype=np.float64)
        std = np.array(st["std"], dtype=np.float64)
    except (KeyError, TypeError) as exc:
        raise FormatError(f"checkpoint has no standardization statistics: {exc}") from exc
    if mean.shape != (ckpt.spec.n_channels_in,) or std.shape != mean.shape or np.any(std <= 0):
        raise FormatError("checkpoint standardization statistics do not match the model spec")
    return Standardizer(mean, std)


def _meta(ckpt, key):
    try:
        return ckpt.metadata[key]
    except KeyError:
        raise FormatError(f"checkpoint metadata lacks {key!r}") from None


def cmd_evaluate(args) -> int:
    _require(args, "checkpoint", "cohort", "out")
    ckpt = load_checkpoint(args.checkpoint)
    st = _standardizer(ckpt)
    if _meta(ckpt, "lookback") != ckpt.spec.lookback:
        raise FormatError("checkpoint lookback metadata disagrees with its model spec")
    records = load_cohort_csv(args.cohort)
    splits = make_splits(
        records, ckpt.spec.lookback, int(_meta(ckpt, "horizon")), _meta(ckpt, "baseline"),
        float(_meta(ckpt, "split_ratio")), int(_meta(ckpt, "split_seed")),
    )
    threshold = args.threshold if args.threshold is not None else float(ckpt.metadata.get("threshold", 0.5))
    scores = predict_proba(ckpt.params, ckpt.spec, st.transform(splits.test.X))[:, 1]
    report = evaluate(scores, splits.test.y, threshold)
    write_metrics_csv({ckpt.spec.kind: report}, args.out)
    roc_out = args.roc_out or str(Path(args.out).with_name(Path(args.out).stem + "_roc.csv"))
    write_roc_csv(report.roc_points, roc_out)
    log.info("test AUC %.4f on %d windows; wrote %s and %s", report.auc, len(splits.test), args.out, roc_out)
    return 0


def read_window(path, channels, lookback):
    """A window CSV holds one row per channel and one column per hour, oldest first."""
    try:
        X = np.loadtxt(path, delimiter=",", ndmin=2, dtype=np.float64)
    except ValueError as exc:
        raise DataError(f"{path}: window must be numeric CSV ({exc})") from exc
    if X.shape != (channels, lookback):
        raise DataError(f"{path}: window has shape {X.shape}, expected ({channels}, {lookback})")
    if not np.all(np.isfinite(X)):
        raise DataError(f"{path}: window contains non-finite values")
    return X


def cmd_predict(args) -> int:
    _require(args, "checkpoint", "window")
    ckpt = load_checkpoint(args.checkpoint)
    st = _standardizer(ckpt)
    X = read_window(args.window, ckpt.spec.n_channels_in, ckpt.spec.lookback)
    p = predict_proba(ckpt.params, ckpt.spec, st.transform(X[None]))[0, 1]
    print(f"{p:.6f}")
    return 0


COMMANDS = {"generate": cmd_generate, "train": cmd_train, "evaluate": cmd_evaluate, "predict": cmd_predict}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="tcnlab", description="Sepsis-onset prediction with temporal convolutional networks.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="JSON run configuration")
        p.add_argument("--seed", type=int, help=f"master seed (default: config, then ${SEED_ENV}, then 0)")

    g = sub.add_parser("generate", help="write a synthetic cohort CSV")
    common(g)
    g.add_argument("--out", help="cohort CSV to write")

    t = sub.add_parser("train", help="train a model on a cohort CSV")
    common(t)
    t.add_argument("--cohort", help="cohort CSV")
    t.add_argument("--checkpoint", help="checkpoint file to write")
    t.add_argument("--out", help="per-epoch history CSV to write")
    t.add_argument("--model", choices=("tcn", "lstm", "logistic"))
    t.add_argument("--epochs", type=int)
    t.add_argument("--lr", type=float)
    t.add_argument("--batch-size", type=int, dest="batch_size")
    t.add_argument("--threshold", type=float, help="decision threshold stored for later evaluation")

    e = sub.add_parser("evaluate", help="score the held-out patients of a cohort")
    e.add_argument("--checkpoint", help="trained checkpoint")
    e.add_argument("--cohort", help="cohort CSV the checkpoint was trained on")
    e.add_argument("--out", help="metrics CSV to write")
    e.add_argument("--roc-out", dest="roc_out", help="ROC CSV (default: <out stem>_roc.csv)")
    e.add_argument("--threshold", type=float, help="decision threshold (default: stored in checkpoint)")

    p = sub.add_parser("predict", help="probability of onset within the horizon for one window")
    p.add_argument("window", help=f"CSV with {N_CHANNELS} rows (channels) and one column per lookback hour")
    p.add_argument("--checkpoint", help="trained checkpoint")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
        stream=sys.stderr,
    )
    try:
        return COMMANDS[args.command](args)
    except (TcnLabError, OSError) as exc:
        print(f"tcnlab {args.command}: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
