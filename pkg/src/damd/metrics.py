"""Discrepancies between two distributions on the same grid."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .dist import PDF_FLOOR, DiscretizedDistribution, _quantile_segments, trapezoid
from .errors import ShapeError

QUANTILE_NODES = 512
KINDS = ("L1", "L2", "KL", "W2")


@dataclass(frozen=True)
class Discrepancy:
    kind: str
    value: float

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown discrepancy kind {self.kind!r}")
        if not self.value >= 0:
            raise ValueError("discrepancies are nonnegative")


def _same_grid(f1: DiscretizedDistribution, f2: DiscretizedDistribution):
    if not f1.grid.same_as(f2.grid):
        raise ShapeError("distributions live on different grids")


def l1(f1: DiscretizedDistribution, f2: DiscretizedDistribution) -> float:
    _same_grid(f1, f2)
    return float(trapezoid(np.abs(f1.pdf - f2.pdf), f1.grid))


def l2(f1: DiscretizedDistribution, f2: DiscretizedDistribution) -> float:
    _same_grid(f1, f2)
    return float(np.sqrt(trapezoid((f1.pdf - f2.pdf) ** 2, f1.grid)))


def l2_cdf(f1: DiscretizedDistribution, f2: DiscretizedDistribution) -> float:
    """L2 distance between the CDFs rather than the densities."""
    _same_grid(f1, f2)
    return float(np.sqrt(trapezoid((f1.cdf - f2.cdf) ** 2, f1.grid)))


def kl_integrand(p: np.ndarray, q: np.ndarray) -> np.ndarray:
    """``p ln(p/q)`` with ``0 ln 0 = 0`` below the floor and ``q`` floored."""
    live = p >= PDF_FLOOR
    safe_p = np.where(live, p, 1.0)
    return np.where(live, p * np.log(safe_p / np.maximum(q, PDF_FLOOR)), 0.0)


def kl(f1: DiscretizedDistribution, f2: DiscretizedDistribution) -> float:
    """Relative entropy of ``f1`` with respect to ``f2``."""
    _same_grid(f1, f2)
    return float(max(trapezoid(kl_integrand(f1.pdf, f2.pdf), f1.grid), 0.0))


def quantile_levels(m: int = QUANTILE_NODES) -> np.ndarray:
    return (np.arange(m) + 0.5) / m


def wasserstein(f1: DiscretizedDistribution, f2: DiscretizedDistribution, p: int = 2) -> float:
    """``W_p`` from the quantile functions, midpoint rule on ``QUANTILE_NODES`` levels."""
    if p < 1:
        raise ValueError(f"p must be >= 1, got {p}")
    y = quantile_levels()
    q1, _, _ = _quantile_segments(f1.cdf, f1.x, y)
    q2, _, _ = _quantile_segments(f2.cdf, f2.x, y)
    return float(np.mean(np.abs(q1 - q2) ** p) ** (1.0 / p))


def discrepancy(kind: str, f1: DiscretizedDistribution, f2: DiscretizedDistribution) -> Discrepancy:
    fn = {"L1": l1, "L2": l2, "KL": kl, "W2": lambda a, b: wasserstein(a, b, 2)}[kind]
    return Discrepancy(kind, fn(f1, f2))
