"""Positive-sample repair: missing/anomaly detection, linear interpolation
and trailing moving-average smoothing."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np


class CleaningError(ValueError):
    pass


@dataclass(frozen=True)
class CleanConfig:
    z_threshold: float = 3.0
    iqr_factor: float = 1.5
    smooth_window: int = 5

    def __post_init__(self):
        if not self.z_threshold > 0:
            raise CleaningError("z_threshold must be positive")
        if not self.iqr_factor > 0:
            raise CleaningError("iqr_factor must be positive")
        if int(self.smooth_window) != self.smooth_window or self.smooth_window < 1:
            raise CleaningError("smooth_window must be a positive integer")


@dataclass(frozen=True)
class CleanStats:
    """Location/spread statistics the anomaly fences are built from."""
    mean: float
    std: float
    q1: float
    q3: float

    @property
    def iqr(self) -> float:
        return self.q3 - self.q1


@dataclass
class CleanReport:
    missing_indices: list[int]
    anomaly_indices: list[int]
    q1: float
    q3: float
    iqr: float
    mean: float
    std: float
    zscore_skipped: bool = False
    notes: list[str] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "missing_indices": list(self.missing_indices),
            "anomaly_indices": list(self.anomaly_indices),
            "q1": self.q1, "q3": self.q3, "iqr": self.iqr,
            "mean": self.mean, "std": self.std,
            "zscore_skipped": self.zscore_skipped,
        }


def _observed(x, mask):
    x = np.asarray(x, dtype=np.float64)
    if mask is None:
        mask = np.isfinite(x)
    else:
        mask = np.asarray(mask, dtype=bool) & np.isfinite(x)
    return x, mask


def detect_missing(x, mask=None) -> list[int]:
    _, mask = _observed(x, mask)
    return np.flatnonzero(~mask).tolist()


def fit_clean_stats(x, mask=None) -> CleanStats:
    """Sample mean/std (ddof=1) and linear-interpolation quartiles of observed points."""
    x, mask = _observed(x, mask)
    obs = x[mask]
    if obs.size < 4:
        raise CleaningError(f"need at least 4 observed points, got {obs.size}")
    q1, q3 = np.quantile(obs, [0.25, 0.75], method="linear")
    return CleanStats(float(obs.mean()), float(obs.std(ddof=1)), float(q1), float(q3))


def detect_anomalies(x, cfg: CleanConfig = CleanConfig(), mask=None,
                     stats: Optional[CleanStats] = None) -> CleanReport:
    """Flag observed points by |z| > threshold or outside the IQR fences.

    ``stats`` lets a caller supply statistics fitted elsewhere (e.g. on a
    training split); otherwise they are fitted on ``x`` itself. With zero
    spread the z-score criterion is skipped and only the fences apply.
    """
    x, mask = _observed(x, mask)
    if stats is None:
        stats = fit_clean_stats(x, mask)
    flagged = np.zeros(x.shape, dtype=bool)
    skipped = not stats.std > 0
    with np.errstate(invalid="ignore"):
        if not skipped:
            flagged |= np.abs((x - stats.mean) / stats.std) > cfg.z_threshold
        flagged |= x < stats.q1 - cfg.iqr_factor * stats.iqr
        flagged |= x > stats.q3 + cfg.iqr_factor * stats.iqr
    flagged &= mask
    return CleanReport(
        missing_indices=np.flatnonzero(~mask).tolist(),
        anomaly_indices=np.flatnonzero(flagged).tolist(),
        q1=stats.q1, q3=stats.q3, iqr=stats.iqr, mean=stats.mean, std=stats.std,
        zscore_skipped=skipped,
        notes=["zero spread: z-score criterion skipped"] if skipped else [],
    )


def interpolate_linear(x, repair_set) -> np.ndarray:
    """Replace indices in ``repair_set`` by linear interpolation between the
    nearest kept neighbours; edge runs copy the nearest kept value."""
    x = np.array(x, dtype=np.float64, copy=True)
    n = x.shape[0]
    repair = np.zeros(n, dtype=bool)
    idx = np.asarray(sorted(repair_set), dtype=int)
    if idx.size and (idx.min() < 0 or idx.max() >= n):
        raise CleaningError("repair index out of range")
    repair[idx] = True
    keep = np.flatnonzero(~repair)
    if keep.size == 0:
        raise CleaningError("every index is marked for repair; nothing to interpolate from")
    if idx.size:
        # np.interp holds the edge values constant outside [keep[0], keep[-1]]
        x[repair] = np.interp(np.flatnonzero(repair), keep, x[keep])
    return x


def smooth_moving_average(x, window: int) -> np.ndarray:
    """Trailing mean over ``[max(0, t-W+1), t]``."""
    if window < 1:
        raise CleaningError("window must be >= 1")
    x = np.asarray(x, dtype=np.float64)
    if window == 1:
        return x.copy()
    csum = np.concatenate([[0.0], np.cumsum(x)])
    t = np.arange(x.shape[0])
    lo = np.maximum(0, t - window + 1)
    return (csum[t + 1] - csum[lo]) / (t + 1 - lo)


def make_positive(x, cfg: CleanConfig = CleanConfig(), mask=None,
                  stats: Optional[CleanStats] = None) -> tuple[np.ndarray, CleanReport]:
    report = detect_anomalies(x, cfg, mask=mask, stats=stats)
    repair = set(report.missing_indices) | set(report.anomaly_indices)
    filled = interpolate_linear(np.nan_to_num(np.asarray(x, dtype=np.float64)), repair)
    return smooth_moving_average(filled, cfg.smooth_window), report
