"""Conformalized prediction intervals with per-cell calibration."""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass

import numpy as np
from scipy import stats

SIGMA_FLOOR = 1e-6
# guards ceil/floor of products such as 0.9 * 101 against representation error
_ROUND_TOL = 1e-9


def floor_sigma(sigma, floor: float = SIGMA_FLOOR) -> np.ndarray:
    return np.maximum(np.asarray(sigma, dtype=np.float64), floor)


def conformity_scores(y, mu, sigma) -> np.ndarray:
    """Normalized residuals ``|y - mu| / sigma`` with sigma floored."""
    y, mu, sigma = (np.asarray(a, dtype=np.float64) for a in (y, mu, sigma))
    for name, a in (("y", y), ("mu", mu), ("sigma", sigma)):
        if not np.all(np.isfinite(a)):
            raise ValueError(f"{name} contains non-finite values")
    return np.abs(y - mu) / floor_sigma(sigma)


def quantile_rank(c: int, alpha: float) -> int:
    """1-based order statistic used as q-hat: ceil((1 - alpha)(C + 1))."""
    if c < 1:
        raise ValueError("calibration set is empty")
    if not 0 < alpha < 1:
        raise ValueError(f"alpha must lie in (0, 1), got {alpha}")
    return math.ceil((1 - alpha) * (c + 1) - _ROUND_TOL)


def calibrate_qhat(scores, alpha: float = 0.1, pooled: bool = False) -> np.ndarray:
    """Per-cell q-hat from calibration scores of shape (C, ...).

    Returns the order statistic at rank ``ceil((1 - alpha)(C + 1))``.  When
    that rank exceeds C the guarantee is vacuous and +inf is returned with a
    warning.  ``pooled=True`` computes one q-hat over all cells (with C taken
    as the total score count) and broadcasts it.
    """
    scores = np.asarray(scores, dtype=np.float64)
    if scores.ndim == 0 or len(scores) == 0:
        raise ValueError("calibration set is empty")
    if np.any(scores < 0) or not np.all(np.isfinite(scores)):
        raise ValueError("scores must be finite and non-negative")
    if pooled:
        q = calibrate_qhat(scores.reshape(-1), alpha)
        return np.full(scores.shape[1:], float(q))
    c = len(scores)
    k = quantile_rank(c, alpha)
    if k > c:
        warnings.warn(f"rank {k} exceeds C={c}; q-hat is infinite", RuntimeWarning, stacklevel=2)
        return np.full(scores.shape[1:], np.inf)
    return np.sort(scores, axis=0, kind="stable")[k - 1]


@dataclass(frozen=True)
class PredictionInterval:
    lower: np.ndarray
    upper: np.ndarray
    alpha: float
    qhat: np.ndarray

    @property
    def width(self) -> np.ndarray:
        return self.upper - self.lower


def build_interval(mu, sigma, qhat, alpha: float = 0.1) -> PredictionInterval:
    mu = np.asarray(mu, dtype=np.float64)
    qhat = np.asarray(qhat, dtype=np.float64)
    if np.any(qhat < 0):
        raise ValueError("qhat must be non-negative")
    half = floor_sigma(sigma) * qhat
    if half.shape != np.broadcast_shapes(mu.shape, half.shape):
        raise ValueError(f"shapes do not match: mu {mu.shape}, sigma*qhat {half.shape}")
    return PredictionInterval(mu - half, mu + half, alpha, qhat)


def empirical_coverage(interval: PredictionInterval, truths, mask=None) -> np.ndarray:
    """Fraction of (masked) cells covered, one value per leading-axis sample."""
    truths = np.asarray(truths, dtype=np.float64)
    inside = (truths >= interval.lower) & (truths <= interval.upper)
    if inside.ndim == 3:
        inside = inside[None]
    if mask is None:
        mask = np.ones(inside.shape[1:], dtype=bool)
    mask = np.asarray(mask, dtype=bool)
    if not mask.any():
        raise ValueError("coverage mask selects no cells")
    return inside[:, mask].mean(axis=1)


@dataclass(frozen=True)
class BetaLaw:
    a: float
    b: float
    degenerate: bool = False

    @property
    def mean(self) -> float:
        return self.a / (self.a + self.b) if not self.degenerate else 1.0

    def interval(self, mass: float) -> tuple[float, float]:
        return tuple(stats.beta.interval(mass, self.a, self.b))

    def cdf(self, x):
        return stats.beta.cdf(x, self.a, self.b)


def nominal_coverage_law(c: int, alpha: float) -> BetaLaw:
    """Distribution of conditional coverage: Beta(C + 1 - l, l), l = floor((C + 1) alpha).

    When ``l == 0`` the interval is infinite and coverage is 1 surely; a
    degenerate marker is returned.
    """
    if c < 1 or not 0 < alpha < 1:
        raise ValueError(f"need C >= 1 and alpha in (0, 1), got C={c}, alpha={alpha}")
    l = math.floor((c + 1) * alpha + _ROUND_TOL)
    if l == 0:
        return BetaLaw(float(c + 1), 0.0, degenerate=True)
    return BetaLaw(float(c + 1 - l), float(l))


def coverage_rows(coverage: np.ndarray, group: str) -> list[tuple[int, str, float]]:
    return [(i, group, float(v)) for i, v in enumerate(coverage)]
