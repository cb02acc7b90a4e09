"""Negative-sample synthesis: polar stable-law jumps, multi-scale moving-average
noise and structured segment deletion."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .series_io import WindowBatch


class AugConfigError(ValueError):
    pass


@dataclass(frozen=True)
class StableParams:
    alpha: float = 1.5
    gamma: float = 0.1
    mu: float = 0.0  # carried, unused by the polar recipe
    beta: float = 0.0  # carried, unused by the polar recipe

    def __post_init__(self):
        if not 0.0 < self.alpha <= 2.0:
            raise AugConfigError(f"alpha must lie in (0, 2], got {self.alpha}")
        if self.alpha == 1.0:
            raise AugConfigError("alpha = 1 makes the magnitude formula singular")
        if not self.gamma > 0.0:
            raise AugConfigError(f"gamma must be positive, got {self.gamma}")
        if not -1.0 <= self.beta <= 1.0:
            raise AugConfigError(f"beta must lie in [-1, 1], got {self.beta}")

    @property
    def magnitude(self) -> float:
        """Deterministic increment radius ``((gamma/2) |Gamma(a)| / |1-a|) ** (1/a)``."""
        a = self.alpha
        base = 0.5 * self.gamma * abs(math.gamma(a)) / abs(1.0 - a)
        return base ** (1.0 / a)


@dataclass(frozen=True)
class NoiseScaleSpec:
    scales: tuple[tuple[int, float], ...] = ()

    def __post_init__(self):
        windows = [w for w, _ in self.scales]
        sigmas = [s for _, s in self.scales]
        if any(int(w) != w or w < 1 for w in windows):
            raise AugConfigError("noise windows must be positive integers")
        if any(s < 0 for s in sigmas):
            raise AugConfigError("noise intensities must be non-negative")
        if any(b <= a for a, b in zip(windows, windows[1:])):
            raise AugConfigError("noise windows must be strictly increasing")
        if any(b < a for a, b in zip(sigmas, sigmas[1:])):
            raise AugConfigError("longer windows must not carry lower intensity")

    @classmethod
    def from_table(cls, noise: float, n_scales: int) -> "NoiseScaleSpec":
        """``n_scales`` windows 1, 4, 16, ... with sigma_i = noise * w_i / max(w)."""
        windows = [4 ** i for i in range(n_scales)]
        top = windows[-1] if windows else 1
        return cls(tuple((w, noise * w / top) for w in windows))


@dataclass(frozen=True)
class DeletionSpec:
    l_min: int = 4
    l_max: int = 300
    probability: float = 0.3

    def __post_init__(self):
        if self.l_min < 1 or self.l_max < self.l_min:
            raise AugConfigError(f"need 1 <= l_min <= l_max, got {self.l_min}, {self.l_max}")
        if not 0.0 <= self.probability <= 1.0:
            raise AugConfigError("deletion probability must lie in [0, 1]")

    def clamped(self, length: int) -> "DeletionSpec":
        """Clamp the upper length bound to ``length`` (and the lower bound with it)."""
        l_max = min(self.l_max, length)
        return DeletionSpec(min(self.l_min, l_max), l_max, self.probability)


@dataclass(frozen=True)
class AugConfig:
    stable: StableParams = field(default_factory=StableParams)
    noise: NoiseScaleSpec = field(default_factory=lambda: NoiseScaleSpec.from_table(0.03, 3))
    deletion: DeletionSpec = field(default_factory=DeletionSpec)
    seed: int = 0

    # Flat JSON mirror: noise, erase_l_min, erase_l_max, erase_p, noise_sc, alpha, gamma, seed.
    def to_dict(self) -> dict:
        top_sigma = self.noise.scales[-1][1] if self.noise.scales else 0.0
        return {
            "noise": top_sigma,
            "noise_sc": len(self.noise.scales),
            "erase_l_min": self.deletion.l_min,
            "erase_l_max": self.deletion.l_max,
            "erase_p": self.deletion.probability,
            "alpha": self.stable.alpha,
            "gamma": self.stable.gamma,
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "AugConfig":
        known = {"noise", "noise_sc", "erase_l_min", "erase_l_max", "erase_p", "alpha", "gamma",
                 "seed", "mu", "beta"}
        unknown = set(d) - known
        if unknown:
            raise AugConfigError(f"unknown augmentation fields: {sorted(unknown)}")
        return cls(
            stable=StableParams(alpha=float(d.get("alpha", 1.5)), gamma=float(d.get("gamma", 0.1)),
                                mu=float(d.get("mu", 0.0)), beta=float(d.get("beta", 0.0))),
            noise=NoiseScaleSpec.from_table(float(d.get("noise", 0.03)), int(d.get("noise_sc", 3))),
            deletion=DeletionSpec(int(d.get("erase_l_min", 4)), int(d.get("erase_l_max", 300)),
                                  float(d.get("erase_p", 0.3))),
            seed=int(d.get("seed", 0)),
        )


def sample_increment(params: StableParams, rng: np.random.Generator, size=None,
                     theta: Optional[np.ndarray] = None):
    """Draw ``R cos(theta)`` with ``theta ~ U(0, 2 pi)``.

    ``theta`` may be forced for testing; otherwise it is drawn from ``rng``.
    Returns a float when ``size`` is None.
    """
    if theta is None:
        theta = rng.uniform(0.0, 2.0 * math.pi, size=size)
    out = params.magnitude * np.cos(theta)
    return float(out) if np.ndim(out) == 0 else out


def apply_jumps(x, params: StableParams, rng: np.random.Generator) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    return x + sample_increment(params, rng, size=x.shape)


def moving_average_noise(length: int, window: int, sigma: float,
                         rng: np.random.Generator) -> np.ndarray:
    """Trailing moving average of i.i.d. N(0, sigma^2) draws.

    The first ``window - 1`` steps average over the available prefix.
    """
    g = rng.normal(0.0, sigma, size=length) if sigma > 0 else np.zeros(length)
    csum = np.concatenate([[0.0], np.cumsum(g)])
    t = np.arange(length)
    lo = np.maximum(0, t - window + 1)
    return (csum[t + 1] - csum[lo]) / (t + 1 - lo)


def apply_multiscale_noise(x, spec: NoiseScaleSpec, rng: np.random.Generator) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    out = x.copy()
    for w, sigma in spec.scales:
        if w > x.shape[-1]:
            raise AugConfigError(f"noise window {w} exceeds sequence length {x.shape[-1]}")
        if sigma == 0:
            continue
        out += moving_average_noise(x.shape[-1], w, sigma, rng)
    return out


def apply_structured_deletion(x, spec: DeletionSpec, rng: np.random.Generator,
                              forced: Optional[tuple[int, int]] = None):
    """Zero one contiguous run of ``L_d`` cells with probability ``spec.probability``.

    ``forced=(t_s, L_d)`` bypasses the draws. Returns the new sequence and the
    half-open deleted range ``(start, end)`` or None.
    """
    x = np.array(x, dtype=np.float64, copy=True)
    n = x.shape[-1]
    if spec.l_max > n:
        raise AugConfigError(f"l_max {spec.l_max} exceeds sequence length {n}")
    if forced is not None:
        start, length = forced
    else:
        if rng.random() >= spec.probability:
            return x, None
        length = int(rng.integers(spec.l_min, spec.l_max, endpoint=True))
        start = int(rng.integers(0, n - length, endpoint=True))
    x[start:start + length] = 0.0
    return x, (start, start + length)


def sequence_rng(seed: int, window_index: int, channel_index: int) -> np.random.Generator:
    """Independent stream for one (window, channel) sequence; order-independent."""
    return np.random.default_rng(np.random.SeedSequence([seed & 0xFFFFFFFFFFFFFFFF,
                                                         window_index, channel_index]))


def augment_sequence(x, cfg: AugConfig, rng: np.random.Generator) -> tuple[np.ndarray, Optional[tuple]]:
    """jumps -> multi-scale noise -> deletion, on one 1-D sequence."""
    y = apply_jumps(x, cfg.stable, rng)
    y = apply_multiscale_noise(y, cfg.noise, rng)
    return apply_structured_deletion(y, cfg.deletion.clamped(len(y)), rng)


def make_negative_batch(batch: WindowBatch, cfg: AugConfig) -> WindowBatch:
    """Augment every (window, channel) input independently; targets pass through.

    Each sequence's stream is keyed by (cfg.seed, origin index, channel), so the
    result does not depend on batch composition or processing order.
    """
    out = np.empty_like(batch.inputs)
    for b, origin in enumerate(batch.origin_indices):
        for c in range(batch.inputs.shape[1]):
            rng = sequence_rng(cfg.seed, origin, c)
            out[b, c], _ = augment_sequence(batch.inputs[b, c], cfg, rng)
    return WindowBatch(out, batch.targets.copy(), list(batch.origin_indices))
