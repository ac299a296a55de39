"""End-to-end glue: cohort records to split, standardized arrays and a trained model."""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .data import (
    HORIZON_HOURS,
    Standardizer,
    build_samples,
    fit_standardizer,
    samples_to_arrays,
    split_patients,
    split_train_test,
)
from .errors import DataError
from .models import ModelParams, ModelSpec, build_model, predict_proba
from .optim import FitResult, TrainConfig, fit

log = logging.getLogger(__name__)

VAL_RATIO = 0.75  # share of training patients used for fitting; the rest validate


@dataclass
class Arrays:
    X: np.ndarray
    y: np.ndarray
    patient_ids: list

    def __len__(self):
        return len(self.y)


@dataclass
class Splits:
    fit: Arrays
    val: Arrays
    test: Arrays


def _arrays(samples, lookback):
    X, y, ids = samples_to_arrays(samples, lookback)
    return Arrays(X, y, ids)


def make_splits(records, lookback, horizon=HORIZON_HOURS, baseline="running_min",
                ratio=0.8, seed=0, val_ratio=VAL_RATIO) -> Splits:
    """Label, window and split by patient into fit / validation / test arrays.

    The test split depends only on ``(ratio, seed)``, so it can be rebuilt
    from a checkpoint's metadata. Validation patients come out of the
    training side only.
    """
    samples = build_samples(records, lookback, horizon, baseline)
    if not samples:
        raise DataError(f"no {lookback}h windows with a {horizon}h horizon fit in the cohort")
    train, test = split_train_test(samples, ratio, seed)
    train_ids = sorted({s.patient_id for s in train})
    if len(train_ids) >= 2:
        fit_ids, _ = split_patients(train_ids, val_ratio, seed)
    else:
        fit_ids = set(train_ids)
    fit_s = [s for s in train if s.patient_id in fit_ids]
    val_s = [s for s in train if s.patient_id not in fit_ids]
    log.info(
        "split: %d fit / %d validation / %d test patients",
        len(fit_ids), len(train_ids) - len(fit_ids), len({s.patient_id for s in test}),
    )
    return Splits(_arrays(fit_s, lookback), _arrays(val_s, lookback), _arrays(test, lookback))


@dataclass
class TrainedModel:
    spec: ModelSpec
    params: ModelParams
    standardizer: Standardizer
    result: FitResult


def train_on_splits(spec: ModelSpec, splits: Splits, config: TrainConfig, init_seed=None) -> TrainedModel:
    """Fit standardization on the fit split, then train a freshly initialized model."""
    st = fit_standardizer(splits.fit.X)
    params = build_model(spec, config.seed if init_seed is None else init_seed)
    val = (st.transform(splits.val.X), splits.val.y) if len(splits.val) else None
    result = fit(spec, params, (st.transform(splits.fit.X), splits.fit.y), val, config)
    return TrainedModel(spec, params, st, result)


def score(model: TrainedModel, X) -> np.ndarray:
    """Positive-class probability for raw (unstandardized) windows."""
    return predict_proba(model.params, model.spec, model.standardizer.transform(X))[:, 1]
