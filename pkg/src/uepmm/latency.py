"""Worker completion-time models and the number of results in by a deadline."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Protocol

import numpy as np
from scipy.stats import binom


class LatencyModel(Protocol):
    def cdf(self, t): ...

    def sample(self, size, rng) -> np.ndarray: ...


@dataclass(frozen=True)
class ExponentialLatency:
    """Exponential completion time with CDF ``F(s t) = 1 - exp(-rate * s * t)``.

    ``scale`` is the per-worker rate multiplier ``s`` (1 means unscaled).
    """

    rate: float
    scale: float = 1.0

    def __post_init__(self):
        if not self.rate > 0 or not self.scale > 0:
            raise ValueError("rate and scale must be positive")

    @property
    def effective_rate(self) -> float:
        return self.rate * self.scale

    def cdf(self, t):
        t = np.asarray(t, dtype=float)
        with np.errstate(invalid="ignore"):
            out = -np.expm1(-self.effective_rate * np.maximum(t, 0.0))
        return np.where(np.isposinf(t), 1.0, out)

    def sample(self, size, rng) -> np.ndarray:
        return rng.exponential(1.0 / self.effective_rate, size=size)

    def scaled(self, scale: float) -> "ExponentialLatency":
        return ExponentialLatency(self.rate, scale)


def sample_arrivals(model: LatencyModel, W: int, rng) -> np.ndarray:
    if W < 1:
        raise ValueError("need at least one worker")
    return model.sample(W, rng)


def arrival_pmf(model: LatencyModel, W: int, t: float) -> np.ndarray:
    """``P(N(t) = w)`` for ``w = 0..W``: binomial in the per-worker completion probability."""
    if t < 0:
        raise ValueError("t must be non-negative")
    F = float(model.cdf(t))
    return binom.pmf(np.arange(W + 1), W, F)
