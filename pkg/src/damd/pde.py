"""Implicit finite-volume solver for the 1D CDF equation

    dF/dt + U(X, t) dF/dX = d/dX ( D(X, t) dF/dX ),   F(x_min) = 0,  F(x_max) = 1.

Backward Euler in time, first-order upwinding for the advective term and a
conservative central flux for diffusion.  Several independent solves (e.g.
the parameter perturbations of a finite-difference gradient) can be marched
together; their tridiagonal systems are stacked into one LAPACK call.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np
from scipy.linalg.lapack import dgtsv

from .dist import DiscretizedDistribution, Grid, from_cdf, truncated_gaussian_cdf
from .errors import NumericalError

log = logging.getLogger(__name__)

MONOTONE_ABORT = 1e-8
MIN_NODES = 11

Coefficient = Callable[[np.ndarray, float], np.ndarray]


@dataclass(frozen=True)
class CoefficientField:
    """Drift U(X, t) and diffusion D(X, t) for a fixed parameter vector.

    ``diffusion_dx`` (dD/dX) is only needed by the surrogate's residual.
    """

    drift: Coefficient
    diffusion: Coefficient
    diffusion_dx: Coefficient | None = None


@dataclass(frozen=True)
class SolverConfig:
    dt: float = 1e-3
    times: tuple[float, ...] = ()

    def __post_init__(self):
        if not self.dt > 0:
            raise ValueError("dt must be positive")
        times = tuple(float(t) for t in self.times)
        if any(t < 0 for t in times) or any(b < a for a, b in zip(times, times[1:])):
            raise ValueError("snapshot times must be sorted and nonnegative")
        object.__setattr__(self, "times", times)


def smoothed_heaviside(x0: float, grid: Grid) -> np.ndarray:
    """Step at ``x0`` realized as a truncated Gaussian CDF two cells wide."""
    if not grid.x_min < x0 < grid.x_max:
        raise ValueError(f"initial state {x0} outside the support [{grid.x_min}, {grid.x_max}]")
    cdf, _, _ = truncated_gaussian_cdf(grid.nodes, x0, 2.0 * grid.median_spacing, grid.x_min, grid.x_max)
    cdf[0], cdf[-1] = 0.0, 1.0
    return cdf


def initial_condition(problem, grid: Grid, phi=None) -> DiscretizedDistribution:
    if grid.n < MIN_NODES:
        raise ValueError(f"grid has {grid.n} nodes; the solver needs at least {MIN_NODES}")
    if grid.x_min > problem.support[0] + 1e-12 or grid.x_max < problem.support[1] - 1e-12:
        raise ValueError("grid does not span the problem support")
    return from_cdf(grid, problem.initial_cdf(phi, grid))


def _assemble(grid: Grid, fields: Sequence[CoefficientField], t: float, dt: float):
    """Tridiagonal bands (lower, diag, upper), each of shape (B, N)."""
    x = grid.nodes
    h = grid.spacing
    faces = 0.5 * (x[1:] + x[:-1])
    vol = 0.5 * (h[1:] + h[:-1])
    b = len(fields)
    n = x.size
    lower = np.zeros((b, n))
    upper = np.zeros((b, n))
    diag = np.ones((b, n))
    u = np.empty((b, n - 2))
    d = np.empty((b, n - 1))
    for i, f in enumerate(fields):
        u[i] = f.drift(x[1:-1], t)
        d[i] = f.diffusion(faces, t)
    up, um = np.maximum(u, 0.0), np.minimum(u, 0.0)
    flux_w = dt * d[:, :-1] / (vol * h[:-1])
    flux_e = dt * d[:, 1:] / (vol * h[1:])
    adv_w = dt * up / h[:-1]
    adv_e = dt * um / h[1:]
    lower[:, 1:-1] = -adv_w - flux_w
    upper[:, 1:-1] = adv_e - flux_e
    diag[:, 1:-1] = 1.0 + adv_w - adv_e + flux_w + flux_e
    return lower, diag, upper


def _solve_bands(lower, diag, upper, rhs):
    b, n = diag.shape
    dl = lower.ravel()[1:].copy()
    du = upper.ravel()[:-1].copy()
    # block junctions are Dirichlet rows, so no coupling leaks across systems
    _, _, _, sol, info = dgtsv(dl, diag.ravel().copy(), du, rhs.ravel().copy())
    if info != 0:
        raise NumericalError(f"tridiagonal solve failed (LAPACK info={info})")
    return sol.reshape(b, n)


def _enforce_cdf(cdf: np.ndarray, t: float) -> np.ndarray:
    if not np.all(np.isfinite(cdf)):
        raise NumericalError(f"non-finite CDF values at t={t:.6g}")
    drop = float(np.max(-np.diff(cdf, axis=-1), initial=0.0))
    over = float(max(np.max(cdf - 1.0), np.max(-cdf), 0.0))
    worst = max(drop, over)
    if worst > MONOTONE_ABORT:
        raise NumericalError(
            f"CDF monotonicity violated by {worst:.3e} at t={t:.6g} (abort threshold {MONOTONE_ABORT:.0e})"
        )
    if worst > 0:
        log.debug("clamped CDF overshoot of %.2e at t=%.6g", worst, t)
    cdf = np.maximum.accumulate(np.clip(cdf, 0.0, 1.0), axis=-1)
    cdf[..., 0], cdf[..., -1] = 0.0, 1.0
    return cdf


def step(F: DiscretizedDistribution, t: float, dt: float, coeffs: CoefficientField) -> DiscretizedDistribution:
    """Advance one backward-Euler step from ``t`` to ``t + dt``."""
    cdf = _step_batch(F.grid, F.cdf[None, :], [coeffs], t, dt)[0]
    if np.array_equal(cdf, F.cdf) and F.pdf is not None:
        return F
    return from_cdf(F.grid, cdf)


def _step_batch(grid, cdf, fields, t, dt):
    lower, diag, upper = _assemble(grid, fields, t + dt, dt)
    rhs = cdf.copy()
    rhs[:, 0], rhs[:, -1] = 0.0, 1.0
    return _enforce_cdf(_solve_bands(lower, diag, upper, rhs), t + dt)


def march(
    grid: Grid,
    cdf0: np.ndarray,
    fields: Sequence[CoefficientField],
    times: Sequence[float],
    dt: float,
) -> np.ndarray:
    """March a batch of CDFs (shape (B, N)) and return snapshots of shape (T, B, N).

    Each interval between snapshots is split into equal substeps no longer
    than ``dt`` so that snapshots land exactly on the requested times.
    """
    cdf = np.array(cdf0, dtype=float, ndmin=2)
    out = np.empty((len(times),) + cdf.shape)
    t = 0.0
    for k, t_snap in enumerate(times):
        span = t_snap - t
        if span < -1e-12:
            raise ValueError("snapshot times must be sorted")
        if span > 1e-14:
            nsub = max(1, math.ceil(span / dt - 1e-9))
            h = span / nsub
            for j in range(nsub):
                cdf = _step_batch(grid, cdf, fields, t + j * h, h)
            t = t_snap
        out[k] = cdf
    return out


def solve(problem, phi, grid: Grid, config: SolverConfig) -> list[DiscretizedDistribution]:
    """Snapshots of the CDF equation solution at ``config.times``."""
    if not config.times:
        return []
    init = initial_condition(problem, grid, phi)
    snaps = march(grid, init.cdf, [problem.coefficients(phi)], config.times, config.dt)
    return [from_cdf(grid, s[0]) for s in snaps]
