"""Series ingestion, windowing, normalization and forecast metrics."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Optional

import numpy as np

STD_FLOOR = 1e-8
DEFAULT_MISSING = frozenset({"", "NaN", "nan"})


class SeriesError(ValueError):
    """Raised for malformed input series or impossible windowing requests."""


@dataclass
class TimeSeries:
    values: np.ndarray  # [C, T], NaN where unobserved
    mask: np.ndarray  # [C, T], True = observed
    channel_names: list[str] = field(default_factory=list)
    step_seconds: Optional[float] = None

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        self.mask = np.asarray(self.mask, dtype=bool)
        if self.values.ndim != 2 or self.values.shape != self.mask.shape:
            raise SeriesError(
                f"values {self.values.shape} and mask {self.mask.shape} must be equal 2-D shapes")
        if not self.channel_names:
            self.channel_names = [f"ch{i}" for i in range(self.values.shape[0])]
        if len(self.channel_names) != self.values.shape[0]:
            raise SeriesError("one channel name per row required")
        if not np.all(np.isnan(self.values[~self.mask])):
            raise SeriesError("unobserved cells must hold NaN")
        if not np.all(np.isfinite(self.values[self.mask])):
            raise SeriesError("observed cells must be finite")

    @classmethod
    def from_array(cls, values, channel_names=None, step_seconds=None) -> "TimeSeries":
        """Build from a [C, T] array, treating NaN cells as missing."""
        values = np.array(values, dtype=np.float64, copy=True)
        if values.ndim == 1:
            values = values[None, :]
        return cls(values, np.isfinite(values), list(channel_names or []), step_seconds)

    @property
    def n_channels(self) -> int:
        return self.values.shape[0]

    @property
    def length(self) -> int:
        return self.values.shape[1]

    def slice(self, start: int, stop: int) -> "TimeSeries":
        return TimeSeries(self.values[:, start:stop].copy(), self.mask[:, start:stop].copy(),
                          list(self.channel_names), self.step_seconds)


@dataclass
class WindowBatch:
    inputs: np.ndarray  # [B, C, L]
    targets: np.ndarray  # [B, C, H]
    origin_indices: list[int]

    def __post_init__(self):
        if self.inputs.ndim != 3 or self.targets.ndim != 3:
            raise SeriesError("inputs and targets must be 3-D")
        if self.inputs.shape[:2] != self.targets.shape[:2]:
            raise SeriesError("inputs and targets disagree on batch/channel dims")
        if len(self.origin_indices) != self.inputs.shape[0]:
            raise SeriesError("one origin index per window required")

    @property
    def lookback(self) -> int:
        return self.inputs.shape[2]

    @property
    def horizon(self) -> int:
        return self.targets.shape[2]

    def __len__(self):
        return self.inputs.shape[0]

    def take(self, idx) -> "WindowBatch":
        idx = np.asarray(idx, dtype=int)
        return WindowBatch(self.inputs[idx], self.targets[idx],
                           [self.origin_indices[i] for i in idx])


@dataclass(frozen=True)
class NormStats:
    mean: np.ndarray
    std: np.ndarray

    def apply(self, values: np.ndarray, channel_axis: int = 0) -> np.ndarray:
        shape = [1] * values.ndim
        shape[channel_axis] = -1
        return (values - self.mean.reshape(shape)) / self.std.reshape(shape)

    def invert(self, values: np.ndarray, channel_axis: int = 0) -> np.ndarray:
        shape = [1] * values.ndim
        shape[channel_axis] = -1
        return values * self.std.reshape(shape) + self.mean.reshape(shape)

    def to_dict(self) -> dict:
        return {"mean": self.mean.tolist(), "std": self.std.tolist()}


def load_csv(path, has_header: bool = True,
             missing_tokens: Iterable[str] = DEFAULT_MISSING) -> TimeSeries:
    """Read a comma-separated file with one column per channel.

    Cells matching any of ``missing_tokens`` (after stripping whitespace)
    become unobserved. Ragged rows and unparseable cells raise
    :class:`SeriesError` naming the 1-based file row and column.
    """
    missing = {tok.strip() for tok in missing_tokens}
    path = Path(path)
    try:
        with path.open(newline="", encoding="utf-8") as fh:
            rows = list(csv.reader(fh))
    except OSError as exc:
        raise SeriesError(f"cannot read {path}: {exc}") from exc

    names: list[str] = []
    first_data_row = 1
    if has_header and rows:
        names = [c.strip() for c in rows[0]]
        rows = rows[1:]
        first_data_row = 2
    rows = [r for r in rows if r]  # trailing blank lines
    if not rows:
        raise SeriesError(f"{path}: no data rows")

    width = len(names) if names else len(rows[0])
    values = np.full((len(rows), width), np.nan)
    for i, row in enumerate(rows):
        if len(row) != width:
            raise SeriesError(
                f"{path}: ragged row {i + first_data_row}: expected {width} columns, got {len(row)}")
        for j, cell in enumerate(row):
            cell = cell.strip()
            if cell in missing:
                continue
            try:
                v = float(cell)
            except ValueError:
                raise SeriesError(
                    f"{path}: unparseable cell {cell!r} at row {i + first_data_row}, column {j + 1}"
                ) from None
            if not math.isfinite(v):
                raise SeriesError(
                    f"{path}: non-finite value {cell!r} at row {i + first_data_row}, column {j + 1}")
            values[i, j] = v
    values = values.T.copy()
    return TimeSeries(values, np.isfinite(values), names)


def save_csv(series: TimeSeries, path, float_format: str = "%.10g") -> None:
    """Write a series back out; unobserved cells are left empty."""
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(series.channel_names)
        for t in range(series.length):
            w.writerow([float_format % series.values[c, t] if series.mask[c, t] else ""
                        for c in range(series.n_channels)])


def fit_norm(series: TimeSeries) -> NormStats:
    counts = series.mask.sum(axis=1)
    if np.any(counts < 2):
        bad = [series.channel_names[i] for i in np.flatnonzero(counts < 2)]
        raise SeriesError(f"channels with fewer than 2 observed points: {bad}")
    mean = np.array([series.values[c, series.mask[c]].mean() for c in range(series.n_channels)])
    std = np.array([series.values[c, series.mask[c]].std(ddof=1) for c in range(series.n_channels)])
    return NormStats(mean, np.maximum(std, STD_FLOOR))


def apply_norm(series: TimeSeries, stats: NormStats) -> TimeSeries:
    values = stats.apply(series.values)  # NaN stays NaN
    return TimeSeries(values, series.mask.copy(), list(series.channel_names), series.step_seconds)


def denormalize(series: TimeSeries, stats: NormStats) -> TimeSeries:
    values = stats.invert(series.values)
    return TimeSeries(values, series.mask.copy(), list(series.channel_names), series.step_seconds)


def zscore_normalize(series: TimeSeries) -> tuple[TimeSeries, NormStats]:
    """Per-channel standardization with sample std (ddof=1) and a 1e-8 floor."""
    stats = fit_norm(series)
    return apply_norm(series, stats), stats


def n_windows(length: int, lookback: int, horizon: int, stride: int = 1) -> int:
    if lookback < 1 or horizon < 1 or stride < 1:
        raise SeriesError("lookback, horizon and stride must be positive")
    if length < lookback + horizon:
        raise SeriesError(
            f"series of length {length} too short for lookback {lookback} + horizon {horizon}")
    return (length - lookback - horizon) // stride + 1


def make_windows(series: TimeSeries, lookback: int, horizon: int, stride: int = 1) -> WindowBatch:
    """Slice contiguous (input, target) windows in source order.

    Targets start exactly where inputs end. Unobserved cells are carried as
    NaN; use :func:`drop_incomplete_targets` before supervised training.
    """
    count = n_windows(series.length, lookback, horizon, stride)
    origins = [i * stride for i in range(count)]
    span = lookback + horizon
    stack = np.stack([series.values[:, o:o + span] for o in origins])
    return WindowBatch(stack[:, :, :lookback].copy(), stack[:, :, lookback:].copy(), origins)


def drop_incomplete_targets(batch: WindowBatch) -> WindowBatch:
    keep = np.flatnonzero(np.all(np.isfinite(batch.targets), axis=(1, 2)))
    return batch.take(keep)


def _naive_scale(truth: np.ndarray) -> float:
    if truth.shape[-1] < 2:
        return 0.0
    return float(np.mean(np.abs(np.diff(truth, axis=-1))))


def metric_suite(pred, truth) -> dict:
    """MSE, MAE, SMAPE (percent, 0/0 terms skipped) and MASE.

    MASE divides MAE by the mean absolute one-step difference of ``truth``
    along its last axis; when that scale is zero the value is ``None``.
    """
    pred = np.asarray(pred, dtype=np.float64)
    truth = np.asarray(truth, dtype=np.float64)
    if pred.shape != truth.shape:
        raise SeriesError(f"shape mismatch: pred {pred.shape} vs truth {truth.shape}")
    if pred.size == 0:
        raise SeriesError("empty arrays")
    resid = pred - truth
    mse = float(np.mean(resid ** 2))
    mae = float(np.mean(np.abs(resid)))
    denom = np.abs(pred) + np.abs(truth)
    ok = denom > 0
    smape = float(200.0 * np.mean(np.abs(resid[ok]) / denom[ok])) if ok.any() else 0.0
    scale = _naive_scale(truth)
    mase = mae / scale if scale > 0 else None
    return {"mse": mse, "mae": mae, "smape": smape, "mase": mase}
