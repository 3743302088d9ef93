"""Parameter sensitivities of the forecast and the two metric tensors.

The Fisher tensor weighs products of density sensitivities by ``1/f``; the
Wasserstein tensor does the same with CDF sensitivities.  Both are Gram
matrices and hence positive semidefinite.

Forecast providers (``FVForecaster``, ``AnalyticForecaster`` and the
surrogate-backed one in :mod:`damd.surrogate`) share one small interface:
``grid_at(t)`` and ``forecast(phi, t, grads)``.
"""

from __future__ import annotations

import json
from collections import OrderedDict
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .dist import PDF_FLOOR, DiscretizedDistribution, Grid, make_grid, trapezoid
from .errors import NumericalError
from .pde import SolverConfig, initial_condition, march

REG_SCALE = 1e-8


@dataclass(frozen=True)
class ParamGradientField:
    """``dF`` and ``df`` with shape (nodes, parameters)."""

    dF: np.ndarray
    df: np.ndarray
    source: str = "finite-difference"

    @property
    def n_par(self) -> int:
        return self.dF.shape[1]


@dataclass(frozen=True)
class MetricTensor:
    kind: str
    matrix: np.ndarray
    inverse: np.ndarray | None = None
    reg: float = 0.0

    def to_json(self, path=None) -> str:
        text = json.dumps({"kind": self.kind, "matrix": self.matrix.tolist(), "lambda_reg": self.reg})
        if path is not None:
            Path(path).write_text(text)
        return text


def pdf_and_sensitivity(grid: Grid, cdf: np.ndarray, dF: np.ndarray | None = None):
    """Density as in :func:`damd.dist.pdf_from_cdf` plus its exact linearization.

    Returns ``(f, df)`` where ``df`` differentiates the clamp-and-renormalize
    map applied to ``dF``; ``df`` integrates to zero by construction.
    """
    op = grid.derivative_operator
    raw = op @ cdf
    live = raw > 0
    g = np.where(live, raw, 0.0)
    mass = trapezoid(g, grid)
    if not mass > 0:
        raise NumericalError("forecast CDF carries no mass")
    f = g / mass
    if dF is None:
        return f, None
    dg = np.where(live[:, None], op @ dF, 0.0)
    dmass = trapezoid(dg.T, grid)
    return f, dg / mass - f[:, None] * dmass[None, :] / mass


def gradient_field(grid: Grid, cdf, dF, source: str) -> tuple[np.ndarray, ParamGradientField]:
    dF = np.array(dF, dtype=float)
    dF[[0, -1]] = 0.0
    f, df = pdf_and_sensitivity(grid, cdf, dF)
    return f, ParamGradientField(dF, df, source)


def _gram(kind: str, f: DiscretizedDistribution, sens: np.ndarray) -> MetricTensor:
    w = 1.0 / np.maximum(f.pdf, PDF_FLOOR)
    integrand = sens[:, :, None] * sens[:, None, :] * w[:, None, None]
    g = trapezoid(np.moveaxis(integrand, 0, -1), f.grid)
    if not np.all(np.isfinite(g)):
        raise NumericalError(f"non-finite {kind} tensor entries")
    return MetricTensor(kind, 0.5 * (g + g.T))


def fisher_matrix(f: DiscretizedDistribution, grads: ParamGradientField) -> MetricTensor:
    return _gram("Fisher", f, grads.df)


def wasserstein_matrix(f: DiscretizedDistribution, grads: ParamGradientField) -> MetricTensor:
    return _gram("Wasserstein", f, grads.dF)


def _adjugate_inverse(a: np.ndarray) -> np.ndarray:
    n = a.shape[0]
    if n == 1:
        return np.array([[1.0 / a[0, 0]]])
    if n == 2:
        det = a[0, 0] * a[1, 1] - a[0, 1] * a[1, 0]
        return np.array([[a[1, 1], -a[0, 1]], [-a[1, 0], a[0, 0]]]) / det
    c = np.empty((3, 3))
    for i in range(3):
        for j in range(3):
            minor = np.delete(np.delete(a, i, 0), j, 1)
            c[i, j] = (-1) ** (i + j) * (minor[0, 0] * minor[1, 1] - minor[0, 1] * minor[1, 0])
    det = a[0] @ c[0]
    return c.T / det


def _refine(a: np.ndarray, inv: np.ndarray, sweeps: int = 8) -> np.ndarray:
    """Newton-Schulz refinement with residuals in extended precision.

    Refining in working precision cannot beat ``eps * cond`` and, for the
    conditioning left after regularization, can even make things worse.
    """
    a_ext = a.astype(np.longdouble)
    x = inv.astype(np.longdouble)
    eye = np.eye(a.shape[0], dtype=np.longdouble)
    best, best_res = x, np.inf
    for _ in range(sweeps):
        r = eye - a_ext @ x
        res = float(np.max(np.abs(r)))
        if not res < best_res:
            break
        best, best_res = x, res
        if res < 1e-3 * np.finfo(np.longdouble).eps ** 0.5:
            break
        x = x + x @ r
    return best.astype(float)


def invert_metric(g: MetricTensor) -> MetricTensor:
    """Inverse of ``G + lambda I`` with ``lambda = 1e-8 trace(G) / N``."""
    a = np.asarray(g.matrix, dtype=float)
    n = a.shape[0]
    tr = float(np.trace(a))
    if not tr > 0:
        raise NumericalError(f"metric tensor trace {tr:.3e} is not positive")
    reg = REG_SCALE * tr / n
    shifted = a + reg * np.eye(n)
    inv = _adjugate_inverse(shifted) if n <= 3 else np.linalg.inv(shifted)
    # symmetrize first: the refinement map 2X - XAX preserves symmetry, whereas
    # symmetrizing afterwards would move error into the stiff directions
    inv = _refine(shifted, 0.5 * (inv + inv.T))
    if not np.all(np.isfinite(inv)):
        raise NumericalError("metric inversion produced non-finite entries")
    return MetricTensor(g.kind, a, inv, reg)


# ---------------------------------------------------------------------------
# forecast providers


class _Cache:
    def __init__(self, size=64):
        self.size = size
        self.data = OrderedDict()

    def get(self, key):
        if key in self.data:
            self.data.move_to_end(key)
            return self.data[key]
        return None

    def put(self, key, value):
        self.data[key] = value
        if len(self.data) > self.size:
            self.data.popitem(last=False)


def fd_steps(phi) -> np.ndarray:
    return np.maximum(1e-4, 1e-3 * np.abs(np.asarray(phi, dtype=float)))


def fd_stencil(problem, phi):
    """Perturbed parameter sets and the weights turning their CDFs into dF/dphi.

    Central differences where both neighbours are feasible, one-sided
    otherwise.  Returns ``(points, plan)`` with ``plan[i] = (i_plus, i_minus, h)``
    indexing into ``points`` (index 0 is ``phi`` itself).
    """
    phi = np.asarray(phi, dtype=float)
    steps = fd_steps(phi)
    points = [phi]
    plan = []
    for i, h in enumerate(steps):
        e = np.zeros_like(phi)
        e[i] = h
        up, down = problem.feasible(phi + e), problem.feasible(phi - e)
        if up and down:
            points += [phi + e, phi - e]
            plan.append((len(points) - 2, len(points) - 1, 2 * h))
        elif up:
            points.append(phi + e)
            plan.append((len(points) - 1, 0, h))
        elif down:
            points.append(phi - e)
            plan.append((0, len(points) - 1, h))
        else:
            raise ValueError(f"no feasible finite-difference step for parameter {i} at {phi}")
    return points, plan


def _fd_batch(problem, phi, grid: Grid, times, dt):
    points, plan = fd_stencil(problem, phi)
    cdf0 = np.stack([initial_condition(problem, grid, p).cdf for p in points])
    fields = [problem.coefficients(p) for p in points]
    snaps = march(grid, cdf0, fields, times, dt)
    dF = np.stack([np.stack([(s[i] - s[j]) / h for i, j, h in plan], axis=1) for s in snaps])
    return snaps[:, 0], dF


def param_gradients_fd(problem, phi, t: float, grid: Grid, config: SolverConfig | None = None) -> ParamGradientField:
    """Finite differences of the FV solution at time ``t``."""
    dt = problem.dt_pde if config is None else config.dt
    cdf, dF = _fd_batch(problem, phi, grid, [t], dt)
    return gradient_field(grid, cdf[0], dF[0], "finite-difference")[1]


class FVForecaster:
    """Forecasts from the finite-volume solver; gradients by batched finite differences."""

    source = "finite-difference"

    def __init__(self, problem, grid: Grid | None = None, dt: float | None = None):
        self.problem = problem
        self.grid = grid if grid is not None else problem.grid()
        self.dt = dt if dt is not None else problem.dt_pde
        self._cache = _Cache()
        self.n_solves = 0

    def grid_at(self, t: float) -> Grid:
        return self.grid

    def forecast(self, phi, t: float, grads: bool = False):
        phi = np.asarray(phi, dtype=float)
        key = (tuple(phi), float(t), grads)
        hit = self._cache.get(key) or (self._cache.get((tuple(phi), float(t), True)) if not grads else None)
        if hit is not None:
            return hit if grads else (hit[0], None)
        if grads:
            cdf, dF = _fd_batch(self.problem, phi, self.grid, [t], self.dt)
            f, field = gradient_field(self.grid, cdf[0], dF[0], self.source)
            out = (DiscretizedDistribution(self.grid, cdf[0], f), field)
            self.n_solves += 1 + 2 * phi.size
        else:
            init = initial_condition(self.problem, self.grid, phi)
            cdf = march(self.grid, init.cdf, [self.problem.coefficients(phi)], [t], self.dt)[0, 0]
            f, _ = pdf_and_sensitivity(self.grid, cdf)
            out = (DiscretizedDistribution(self.grid, cdf, f), None)
            self.n_solves += 1
        self._cache.put(key, out)
        return out


class AnalyticForecaster:
    """Closed-form forecasts for the random-initial-state problem.

    The state grid at time ``t`` spans the image of the initial support, so
    resolution follows the contracting distribution.
    """

    source = "analytic"

    def __init__(self, problem, n: int | None = None):
        from .models import RandomInitProblem

        if not isinstance(problem, RandomInitProblem):
            raise ValueError("analytic forecasts exist only for the RandomInit problem")
        self.problem = problem
        self.n = n if n is not None else problem.n_grid
        self._grids: dict[float, Grid] = {}
        self._cache = _Cache()

    def grid_at(self, t: float) -> Grid:
        t = float(t)
        if t not in self._grids:
            self._grids[t] = make_grid(*self.problem.state_support(t), self.n)
        return self._grids[t]

    def forecast(self, phi, t: float, grads: bool = False):
        from .models import case1_analytic_cdf

        key = (tuple(np.asarray(phi, dtype=float)), float(t))
        hit = self._cache.get(key)
        if hit is None:
            grid = self.grid_at(t)
            cdf, dF = case1_analytic_cdf(self.problem, phi, t, grid, with_grads=True)
            f, field = gradient_field(grid, cdf, dF, self.source)
            hit = (DiscretizedDistribution(grid, cdf, f), field)
            self._cache.put(key, hit)
        return hit if grads else (hit[0], None)
