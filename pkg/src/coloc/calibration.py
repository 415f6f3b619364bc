"""Per-couple linear range calibration.

A campaign places a tag/anchor couple at known reference distances, averages
many ranges at each, and fits ``measured ~ slope * reference + intercept``.
Later ranges are corrected with ``(measured - intercept) / slope``.
"""
from __future__ import annotations

import csv
import math
import warnings
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from ._validation import as_2d_float, check_consistent_columns
from .geometry import RangingPair
from .twr import RangingEngine

RESIDUAL_WARN_THRESHOLD = 0.05  # m
DEFAULT_REFERENCES = (1.0, 2.0, 3.0, 4.0)
DEFAULT_SAMPLES_PER_POINT = 1200
CALIBRATION_STREAM = 1


class CalibrationError(ValueError):
    pass


class CalibrationQualityWarning(UserWarning):
    pass


@dataclass(frozen=True)
class CalibrationSample:
    pair: RangingPair
    reference_distance: float
    mean_measured: float
    sample_count: int = 1

    def __post_init__(self):
        if self.sample_count < 1:
            raise CalibrationError("sample_count must be >= 1")
        if not self.reference_distance > 0:
            raise CalibrationError("reference distance must be > 0")


@dataclass(frozen=True)
class CalibrationModel:
    pair: RangingPair
    slope: float
    intercept: float
    residual_rms: float = 0.0
    n_points: int = 2

    def __post_init__(self):
        if not self.slope > 0:
            raise CalibrationError(f"calibration slope must be > 0, got {self.slope}")

    @classmethod
    def identity(cls, pair: RangingPair) -> "CalibrationModel":
        return cls(pair, 1.0, 0.0, 0.0, 2)

    def apply(self, measured):
        return apply_calibration(self, measured)


def _ols(x: np.ndarray, y: np.ndarray) -> tuple[float, float, float]:
    """Slope, intercept and RMS vertical residual of ``y`` on ``x``."""
    xm, ym = x.mean(), y.mean()
    dx = x - xm
    sxx = float(dx @ dx)
    if sxx == 0.0:
        raise CalibrationError("need at least 2 distinct reference distances")
    slope = float(dx @ (y - ym)) / sxx
    intercept = float(ym - slope * xm)
    resid = y - (slope * x + intercept)
    return slope, intercept, math.sqrt(float(resid @ resid) / len(x))


def fit_linear(samples: Sequence[CalibrationSample]) -> CalibrationModel:
    if len(samples) < 2:
        raise CalibrationError("need at least 2 calibration samples")
    pairs = {s.pair for s in samples}
    if len(pairs) != 1:
        raise CalibrationError(f"samples mix several pairs: {sorted(map(str, pairs))}")
    # sorted so the result is bitwise independent of input order
    ordered = sorted(samples, key=lambda s: (s.reference_distance, s.mean_measured))
    x = np.array([s.reference_distance for s in ordered], dtype=float)
    y = np.array([s.mean_measured for s in ordered], dtype=float)
    slope, intercept, rms = _ols(x, y)
    if not slope > 0:
        raise CalibrationError(f"fitted slope {slope} is not positive")
    model = CalibrationModel(pairs.pop(), slope, intercept, rms, len(ordered))
    if rms > RESIDUAL_WARN_THRESHOLD:
        warnings.warn(
            f"{model.pair}: calibration residual {rms:.3f} m exceeds {RESIDUAL_WARN_THRESHOLD} m",
            CalibrationQualityWarning,
            stacklevel=2,
        )
    return model


def apply_calibration(model: CalibrationModel, measured):
    """Corrected distance ``(measured - intercept) / slope`` (scalar or array)."""
    if isinstance(measured, (int, float)):
        return (measured - model.intercept) / model.slope
    return (np.asarray(measured, dtype=float) - model.intercept) / model.slope


def run_calibration_campaign(
    pair: RangingPair,
    engine: RangingEngine,
    reference_distances: Iterable[float] = DEFAULT_REFERENCES,
    samples_per_point: int = DEFAULT_SAMPLES_PER_POINT,
) -> CalibrationModel:
    refs = list(reference_distances)
    if not refs:
        raise CalibrationError("reference distance list is empty")
    if samples_per_point < 1:
        raise CalibrationError("samples_per_point must be >= 1")
    engine = engine.with_stream(CALIBRATION_STREAM)
    samples = []
    for j, ref in enumerate(refs):
        seq = np.arange(samples_per_point) + j * samples_per_point
        d, _q = engine.measure_batch(pair, ref, seq, seq * 1e-3)
        samples.append(CalibrationSample(pair, float(ref), float(np.mean(d)), samples_per_point))
    return fit_linear(samples)


# -- persistence ---------------------------------------------------------------

CALIBRATION_HEADER = ("tag", "anchor", "m_c", "q_c", "residual_rms", "n_points")


def write_calibration_csv(path: str | Path, models: Iterable[CalibrationModel]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(CALIBRATION_HEADER)
        for m in models:
            w.writerow([m.pair.tag, m.pair.anchor, repr(m.slope), repr(m.intercept),
                        repr(m.residual_rms), m.n_points])


def read_calibration_csv(path: str | Path) -> dict[RangingPair, CalibrationModel]:
    out = {}
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            pair = RangingPair(int(row["tag"]), int(row["anchor"]))
            out[pair] = CalibrationModel(
                pair, float(row["m_c"]), float(row["q_c"]),
                float(row["residual_rms"]), int(row["n_points"]),
            )
    return out


# -- estimator -----------------------------------------------------------------


class LinearRangeCalibrator(TransformerMixin, BaseEstimator):
    """Column-wise linear calibration of range matrices.

    ``fit(X, y)`` takes measured (averaged) ranges ``X`` of shape
    ``(n_points, n_pairs)`` and reference distances ``y`` of shape
    ``(n_points,)`` or ``(n_points, n_pairs)``; each column gets its own
    slope/intercept. ``transform`` applies the inverse correction and
    ``inverse_transform`` the forward bias model.

    Parameters
    ----------
    pairs : sequence of RangingPair, optional
        Column labels; defaults to ``RangingPair(-1, j)`` placeholders.
    """

    def __init__(self, pairs=None):
        self.pairs = pairs

    def fit(self, X, y=None):
        """Fit one line per column; with ``y=None`` keep models set by :meth:`from_models`."""
        X = as_2d_float(X, "X")
        if y is None:
            if not hasattr(self, "models_"):
                raise ValueError("reference distances y are required to fit a calibrator")
            check_consistent_columns(X, self.n_features_in_)
            return self
        y = np.asarray(y, dtype=float)
        if y.ndim == 1:
            y = np.repeat(y[:, None], X.shape[1], axis=1)
        if y.shape != X.shape:
            raise ValueError(f"y shape {y.shape} does not match X shape {X.shape}")
        labels = self._labels(X.shape[1])
        models = [
            fit_linear([CalibrationSample(p, float(r), float(m)) for r, m in zip(y[:, j], X[:, j])])
            for j, p in enumerate(labels)
        ]
        self._set_models(models)
        return self

    @classmethod
    def from_models(cls, models: Sequence[CalibrationModel] | Mapping[RangingPair, CalibrationModel]):
        if isinstance(models, Mapping):
            models = list(models.values())
        est = cls(pairs=[m.pair for m in models])
        est._set_models(list(models))
        return est

    def _labels(self, n):
        if self.pairs is None:
            return [RangingPair(-1, j) for j in range(n)]
        if len(self.pairs) != n:
            raise ValueError(f"{len(self.pairs)} pair labels for {n} columns")
        return list(self.pairs)

    def _set_models(self, models):
        self.models_ = list(models)
        self.slope_ = np.array([m.slope for m in models])
        self.intercept_ = np.array([m.intercept for m in models])
        self.residual_rms_ = np.array([m.residual_rms for m in models])
        self.n_features_in_ = len(models)

    def transform(self, X):
        check_is_fitted(self, "models_")
        X = as_2d_float(X, "X")
        check_consistent_columns(X, self.n_features_in_)
        return (X - self.intercept_) / self.slope_

    def inverse_transform(self, X):
        check_is_fitted(self, "models_")
        X = as_2d_float(X, "X")
        check_consistent_columns(X, self.n_features_in_)
        return X * self.slope_ + self.intercept_
