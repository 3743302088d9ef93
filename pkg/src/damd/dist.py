"""Discretized univariate distributions on a 1D state grid.

The CDF is the primary quantity; PDFs are always obtained by differentiating
it on the grid (see :func:`pdf_from_cdf`).
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path

import numpy as np
from scipy import sparse
from scipy.integrate import cumulative_trapezoid
from scipy.special import ndtr

from .errors import ShapeError

PDF_FLOOR = 1e-12
MONOTONE_TOL = 1e-6


@dataclass(frozen=True, eq=False)
class Grid:
    """Strictly increasing nodes spanning the compact support ``[x_min, x_max]``."""

    nodes: np.ndarray

    def __post_init__(self):
        nodes = np.asarray(self.nodes, dtype=float)
        if nodes.ndim != 1 or nodes.size < 3:
            raise ValueError("a grid needs at least 3 nodes")
        if not np.all(np.isfinite(nodes)) or np.any(np.diff(nodes) <= 0):
            raise ValueError("grid nodes must be finite and strictly increasing")
        nodes.setflags(write=False)
        object.__setattr__(self, "nodes", nodes)

    @property
    def x_min(self) -> float:
        return float(self.nodes[0])

    @property
    def x_max(self) -> float:
        return float(self.nodes[-1])

    @property
    def n(self) -> int:
        return self.nodes.size

    @cached_property
    def spacing(self) -> np.ndarray:
        return np.diff(self.nodes)

    @cached_property
    def median_spacing(self) -> float:
        return float(np.median(self.spacing))

    @cached_property
    def derivative_operator(self) -> sparse.csr_matrix:
        """Sparse first-derivative matrix.

        Fourth-order centered 5-point stencils in the interior, 3-point
        centered stencils next to the boundary and second-order one-sided
        stencils on the boundary nodes.  Weights follow from small Vandermonde
        solves, so non-uniform grids are handled.
        """
        x = self.nodes
        n = x.size
        rows, cols, vals = [], [], []

        def add(centers, offsets):
            idx = centers[:, None] + np.asarray(offsets)[None, :]
            local = x[idx] - x[centers][:, None]
            scale = np.max(np.abs(local), axis=1, keepdims=True)
            s = local / scale
            k = len(offsets)
            vander = s[:, None, :] ** np.arange(k)[None, :, None]
            rhs = np.zeros((centers.size, k))
            rhs[:, 1] = 1.0
            w = np.linalg.solve(vander, rhs[..., None])[..., 0] / scale
            rows.append(np.repeat(centers, k))
            cols.append(idx.ravel())
            vals.append(w.ravel())

        add(np.array([0]), [0, 1, 2])
        add(np.array([n - 1]), [-2, -1, 0])
        if n >= 5:
            add(np.array([1, n - 2]), [-1, 0, 1])
            if n > 5:
                add(np.arange(2, n - 2), [-2, -1, 0, 1, 2])
        else:
            add(np.arange(1, n - 1), [-1, 0, 1])
        return sparse.csr_matrix(
            (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))), shape=(n, n)
        )

    def same_as(self, other: Grid) -> bool:
        return self is other or (
            self.n == other.n and np.allclose(self.nodes, other.nodes, rtol=0, atol=1e-12)
        )


def make_grid(
    x_min: float, x_max: float, n: int, focus: float | None = None, clustering: float = 0.9
) -> Grid:
    """Uniform grid, or a cosine-mapped grid refined around ``focus``.

    With ``focus`` given, ``focus`` is itself a node and the spacing grows
    smoothly towards both ends of the support.  ``clustering`` in ``[0, 1)``
    blends the cosine map with a uniform one (0 gives a uniform grid).
    """
    if not (np.isfinite(x_min) and np.isfinite(x_max)) or x_min >= x_max:
        raise ValueError(f"invalid support [{x_min}, {x_max}]")
    if int(n) != n or n < 3:
        raise ValueError(f"need an integer n >= 3, got {n}")
    n = int(n)
    if focus is None:
        return Grid(np.linspace(x_min, x_max, n))
    if not x_min <= focus <= x_max:
        raise ValueError(f"focus {focus} outside [{x_min}, {x_max}]")
    if not 0.0 <= clustering < 1.0:
        raise ValueError("clustering must lie in [0, 1)")

    def side(length, m):
        s = np.linspace(0.0, 1.0, m)
        return length * ((1.0 - clustering) * s + clustering * (1.0 - np.cos(0.5 * np.pi * s)))

    left, right = focus - x_min, x_max - focus
    n_left = int(round((n - 1) * left / (x_max - x_min)))
    n_right = n - 1 - n_left
    parts = [np.array([focus])]
    if n_left > 0:
        parts.insert(0, (focus - side(left, n_left + 1))[::-1][:-1])
    if n_right > 0:
        parts.append((focus + side(right, n_right + 1))[1:])
    nodes = np.concatenate(parts)
    nodes[0], nodes[-1] = x_min, x_max
    return Grid(nodes)


def trapezoid(values, grid: Grid) -> float:
    """Trapezoid rule over a (possibly non-uniform) grid; integrates along the last axis."""
    values = np.asarray(values, dtype=float)
    h = grid.spacing
    return 0.5 * np.sum(h * (values[..., 1:] + values[..., :-1]), axis=-1)


def cumulative(values, grid: Grid) -> np.ndarray:
    return cumulative_trapezoid(values, grid.nodes, initial=0.0, axis=-1)


@dataclass(frozen=True, eq=False)
class DiscretizedDistribution:
    """CDF and PDF sampled on a grid."""

    grid: Grid
    cdf: np.ndarray
    pdf: np.ndarray = field(default=None)

    def __post_init__(self):
        cdf = np.array(self.cdf, dtype=float)
        if cdf.shape != (self.grid.n,):
            raise ShapeError(f"cdf has shape {cdf.shape}, grid has {self.grid.n} nodes")
        cdf.setflags(write=False)
        object.__setattr__(self, "cdf", cdf)
        if self.pdf is not None:
            pdf = np.array(self.pdf, dtype=float)
            if pdf.shape != cdf.shape:
                raise ShapeError("pdf and cdf shapes differ")
            pdf.setflags(write=False)
            object.__setattr__(self, "pdf", pdf)

    @property
    def x(self) -> np.ndarray:
        return self.grid.nodes

    def mean(self) -> float:
        return float(trapezoid(self.x * self.pdf, self.grid))

    def std(self) -> float:
        mu = self.mean()
        return float(np.sqrt(max(trapezoid((self.x - mu) ** 2 * self.pdf, self.grid), 0.0)))

    def to_csv(self, path) -> None:
        write_distribution_csv(self, path)


def check_monotone(cdf: np.ndarray, tol: float = MONOTONE_TOL) -> None:
    drop = -np.min(np.diff(cdf), initial=0.0)
    if drop > tol:
        raise ShapeError(f"CDF decreases by {drop:.3e} (tolerance {tol:.0e})")


def pdf_from_cdf(d: DiscretizedDistribution) -> DiscretizedDistribution:
    """Differentiate the CDF on the grid, clamp at zero and renormalize to unit mass."""
    check_monotone(d.cdf)
    pdf = np.maximum(d.grid.derivative_operator @ d.cdf, 0.0)
    mass = trapezoid(pdf, d.grid)
    if not mass > 0:
        raise ShapeError("CDF carries no mass on the grid")
    return DiscretizedDistribution(d.grid, d.cdf, pdf / mass)


def from_cdf(grid: Grid, cdf) -> DiscretizedDistribution:
    return pdf_from_cdf(DiscretizedDistribution(grid, cdf))


def from_pdf(grid: Grid, pdf) -> DiscretizedDistribution:
    """Normalize a nonnegative density and integrate it to a CDF pinned to [0, 1]."""
    pdf = np.maximum(np.asarray(pdf, dtype=float), 0.0)
    mass = trapezoid(pdf, grid)
    if not mass > 0:
        raise ShapeError("density has no mass on the grid")
    pdf = pdf / mass
    cdf = np.clip(cumulative(pdf, grid), 0.0, 1.0)
    cdf[0], cdf[-1] = 0.0, 1.0
    return DiscretizedDistribution(grid, cdf, pdf)


def quantile(d: DiscretizedDistribution, y):
    """Inverse of the piecewise-linear CDF interpolant, ``inf {X : F(X) >= y}``."""
    y_arr = np.asarray(y, dtype=float)
    if np.any((y_arr <= 0.0) | (y_arr >= 1.0)):
        raise ValueError("quantile levels must lie in (0, 1)")
    x, _, _ = _quantile_segments(d.cdf, d.grid.nodes, y_arr)
    return float(x) if np.ndim(y) == 0 else x


def _quantile_segments(cdf, nodes, y):
    """Quantiles plus the bracketing segment index and interpolation weight.

    Returns ``(x, k, s)`` with ``x = nodes[k-1] + s * (nodes[k] - nodes[k-1])``.
    """
    k = np.searchsorted(cdf, y, side="left")
    k = np.clip(k, 1, cdf.size - 1)
    f_lo, f_hi = cdf[k - 1], cdf[k]
    width = f_hi - f_lo
    s = np.where(width > 0, (y - f_lo) / np.where(width > 0, width, 1.0), 1.0)
    s = np.clip(s, 0.0, 1.0)
    x = nodes[k - 1] + s * (nodes[k] - nodes[k - 1])
    return x, k, s


def truncated_gaussian_cdf(x, mu: float, sigma: float, x_min: float, x_max: float):
    """Gaussian CDF affinely rescaled to run from 0 at ``x_min`` to 1 at ``x_max``.

    Returns the CDF together with its derivatives with respect to ``mu`` and
    ``sigma``.
    """
    if not sigma > 0:
        raise ValueError(f"sigma must be positive, got {sigma}")
    x = np.asarray(x, dtype=float)
    z, za, zb = (x - mu) / sigma, (x_min - mu) / sigma, (x_max - mu) / sigma
    phi = lambda u: np.exp(-0.5 * u * u) / np.sqrt(2.0 * np.pi)  # noqa: E731
    cz, ca, cb = ndtr(z), ndtr(za), ndtr(zb)
    norm = cb - ca
    cdf = np.clip((cz - ca) / norm, 0.0, 1.0)
    # d/dmu ndtr((x-mu)/sigma) = -phi(z)/sigma ; d/dsigma = -z phi(z)/sigma
    dn_mu = (-phi(z) + phi(za)) / sigma
    dd_mu = (-phi(zb) + phi(za)) / sigma
    dn_sig = (-z * phi(z) + za * phi(za)) / sigma
    dd_sig = (-zb * phi(zb) + za * phi(za)) / sigma
    d_mu = (dn_mu - cdf * dd_mu) / norm
    d_sig = (dn_sig - cdf * dd_sig) / norm
    return cdf, d_mu, d_sig


def gaussian_cdf_on_grid(mu: float, sigma: float, grid: Grid) -> DiscretizedDistribution:
    if not sigma > 0:
        raise ValueError(f"sigma must be positive, got {sigma}")
    cdf, _, _ = truncated_gaussian_cdf(grid.nodes, mu, sigma, grid.x_min, grid.x_max)
    cdf[0], cdf[-1] = 0.0, 1.0
    return from_cdf(grid, cdf)


def write_distribution_csv(d: DiscretizedDistribution, path) -> None:
    pdf = d.pdf if d.pdf is not None else pdf_from_cdf(d).pdf
    with Path(path).open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["X", "F", "f"])
        for row in zip(d.x, d.cdf, pdf):
            writer.writerow([repr(float(v)) for v in row])


def read_distribution_csv(path) -> DiscretizedDistribution:
    data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    return DiscretizedDistribution(Grid(data[:, 0]), data[:, 1], data[:, 2])
