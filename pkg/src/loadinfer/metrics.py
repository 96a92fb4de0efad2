"""Evaluation metrics and the simple reference estimators used for comparison."""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from sklearn.metrics import adjusted_rand_score

from .amigen import DAYS_PER_MONTH, HOURS_PER_MONTH


@dataclass(frozen=True)
class MapeResult:
    percent: float
    n_used: int
    n_excluded: int   # zero-actual samples left out (MAPE undefined there)

    def __float__(self) -> float:
        return self.percent


def mape(actual: np.ndarray, estimated: np.ndarray) -> MapeResult:
    """Mean absolute percentage error; zero-actual samples are excluded."""
    a = np.asarray(actual, dtype=float)
    e = np.asarray(estimated, dtype=float)
    if a.shape != e.shape:
        raise ValueError("series length mismatch")
    mask = a != 0
    n_excluded = int(np.sum(~mask))
    if not np.any(mask):
        raise ValueError("all actual samples are zero: MAPE undefined")
    value = float(100.0 * np.mean(np.abs((a[mask] - e[mask]) / a[mask])))
    return MapeResult(percent=value, n_used=int(mask.sum()), n_excluded=n_excluded)


def goodness_r(actual: np.ndarray, estimated: np.ndarray) -> float:
    """Pearson correlation between estimated and actual series (R = 1 is perfect)."""
    a = np.asarray(actual, dtype=float)
    e = np.asarray(estimated, dtype=float)
    if a.shape != e.shape or len(a) < 2:
        raise ValueError("need >= 2 paired samples of equal length")
    if a.std() == 0 or e.std() == 0:
        raise ValueError("zero variance series: R undefined")
    return float(np.corrcoef(a, e)[0, 1])


def adjusted_rand(labels_true, labels_pred) -> float:
    return float(adjusted_rand_score(labels_true, labels_pred))


def baseline_uniform(bill_kwh: float) -> np.ndarray:
    """Uniform energy allocation: bill spread evenly over the 672 hours."""
    if bill_kwh < 0:
        raise ValueError("bill must be nonnegative")
    return np.full(HOURS_PER_MONTH, bill_kwh / HOURS_PER_MONTH)


def baseline_profile_scaling(bill_kwh: float, profile: np.ndarray) -> np.ndarray:
    """Average-profile scaling: every day gets bill/28 shaped by a unit-sum profile."""
    if bill_kwh < 0:
        raise ValueError("bill must be nonnegative")
    p = np.asarray(profile, dtype=float)
    if p.shape != (24,) or np.any(p < 0):
        raise ValueError("profile must be a nonnegative 24-vector")
    if abs(p.sum() - 1.0) > 1e-9:
        raise ValueError("profile must be normalized to unit daily sum")
    daily = bill_kwh / DAYS_PER_MONTH
    return np.tile(p * daily, DAYS_PER_MONTH)


def voltage_errors(true_v: np.ndarray, est_v: np.ndarray) -> tuple[float, float]:
    """Mean voltage magnitude error (%) and mean phase error (degrees).

    Inputs are complex node-voltage arrays (any matching shape); the first
    entry per row may be the slack node and is fine to include since its
    error is zero by construction.
    """
    tv = np.asarray(true_v, dtype=complex).ravel()
    ev = np.asarray(est_v, dtype=complex).ravel()
    if tv.shape != ev.shape:
        raise ValueError("voltage array shape mismatch")
    mag_err = float(np.mean(np.abs(np.abs(ev) - np.abs(tv)) / np.abs(tv)) * 100.0)
    dtheta = np.angle(ev) - np.angle(tv)
    dtheta = (dtheta + np.pi) % (2 * np.pi) - np.pi
    phase_err = float(np.mean(np.abs(np.degrees(dtheta))))
    return mag_err, phase_err


@dataclass
class MetricsReport:
    scopes: dict[str, dict[str, float | int | str]] = field(default_factory=dict)

    def set(self, scope: str, **values) -> None:
        self.scopes.setdefault(scope, {}).update(values)

    def to_dict(self) -> dict:
        return {"schema_version": 1,
                "scopes": {k: dict(sorted(v.items())) for k, v in sorted(self.scopes.items())}}

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=1, sort_keys=True))

    @classmethod
    def load(cls, path: str | Path) -> "MetricsReport":
        raw = json.loads(Path(path).read_text())
        rep = cls()
        rep.scopes = {k: dict(v) for k, v in raw["scopes"].items()}
        return rep
