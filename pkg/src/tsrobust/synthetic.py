"""Synthetic multichannel fixtures: sinusoid mixtures with injected spikes
and missing runs."""

from __future__ import annotations

import numpy as np

from .series_io import TimeSeries


def sinusoid_mixture(length: int, channels: int, rng: np.random.Generator,
                     periods=(24.0, 96.0, 168.0), noise: float = 0.05) -> np.ndarray:
    t = np.arange(length)
    out = np.empty((channels, length))
    for c in range(channels):
        amps = rng.uniform(0.5, 1.5, size=len(periods))
        phases = rng.uniform(0, 2 * np.pi, size=len(periods))
        wave = sum(a * np.sin(2 * np.pi * t / p + ph) for a, p, ph in zip(amps, periods, phases))
        out[c] = 10.0 + 2.0 * c + wave + noise * rng.standard_normal(length)
    return out


def inject_spikes(values: np.ndarray, rate: float, magnitude: float,
                  rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """Add +-``magnitude`` * channel std at a ``rate`` fraction of cells."""
    out = values.copy()
    hit = rng.random(values.shape) < rate
    sign = rng.choice([-1.0, 1.0], size=values.shape)
    scale = values.std(axis=1, keepdims=True)
    out[hit] += (sign * magnitude * scale)[hit]
    return out, hit


def inject_missing_runs(values: np.ndarray, rate: float, rng: np.random.Generator,
                        run_length=(3, 12)) -> np.ndarray:
    """Blank contiguous runs until roughly ``rate`` of each channel is missing."""
    out = values.copy()
    C, T = values.shape
    for c in range(C):
        budget = int(round(rate * T))
        while budget > 0:
            n = min(budget, int(rng.integers(run_length[0], run_length[1], endpoint=True)))
            start = int(rng.integers(0, T - n, endpoint=True))
            out[c, start:start + n] = np.nan
            budget -= n
    return out


def make_fixture(length: int = 2000, channels: int = 3, spike_rate: float = 0.01,
                 missing_rate: float = 0.02, spike_magnitude: float = 6.0,
                 seed: int = 0) -> TimeSeries:
    rng = np.random.default_rng(seed)
    clean = sinusoid_mixture(length, channels, rng)
    spiked, _ = inject_spikes(clean, spike_rate, spike_magnitude, rng)
    values = inject_missing_runs(spiked, missing_rate, rng)
    return TimeSeries.from_array(values, [f"s{c}" for c in range(channels)])
