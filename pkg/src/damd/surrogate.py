"""Physics-informed network surrogate of the CDF-equation solution.

The network maps ``(X, t, phi)`` to ``(Y, t, phi)`` where ``Y`` approximates
``F(X; t, phi)``; the pass-through outputs are fitted, not wired.  Input
derivatives (``dY/dX``, ``d2Y/dX2``, ``dY/dt`` and the full Jacobian) are
propagated in forward mode through the tanh layers, so the PDE residual costs
a handful of extra matrix products instead of nested reverse passes.

Typical use::

    ts = sample_training_set(problem, phi_box, TrainingCounts.small(), seed=0)
    net = SurrogateNet(problem.n_par, *ts.box, seed=0)
    history = train(net, ts, TrainConfig())
    fc = SurrogateForecaster(net, problem, base=FVForecaster(problem))
"""

from __future__ import annotations

import csv
import json
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from scipy.stats import qmc

from .dist import DiscretizedDistribution, Grid, make_grid
from .errors import NumericalError
from .geometry import FVForecaster, fisher_matrix, gradient_field, pdf_and_sensitivity, wasserstein_matrix
from .pde import initial_condition, march

log = logging.getLogger(__name__)

HIDDEN_LAYERS = 7
WIDTH = 20
HISTORY_FIELDS = ("iter", "mse_ts", "mse_r", "mse_aux", "smr", "total")
DTYPE = torch.float64


class TrainingError(NumericalError):
    """Training diverged; ``net`` holds the last finite parameters."""

    def __init__(self, message, net=None, history=None):
        super().__init__(message)
        self.net = net
        self.history = history


# ---------------------------------------------------------------------------
# network


class SurrogateNet(torch.nn.Module):
    """Fully connected tanh network with equal input and output width ``N_par + 2``.

    Inputs are mapped affinely from the training box to ``[-1, 1]`` before the
    first layer; the map is part of the network and included in all
    derivatives.
    """

    def __init__(self, n_par: int, lo, hi, seed: int = 0, hidden: int = HIDDEN_LAYERS, width: int = WIDTH):
        super().__init__()
        dim = n_par + 2
        lo = torch.as_tensor(np.asarray(lo, dtype=float), dtype=DTYPE)
        hi = torch.as_tensor(np.asarray(hi, dtype=float), dtype=DTYPE)
        if lo.shape != (dim,) or hi.shape != (dim,) or not torch.all(hi > lo):
            raise ValueError(f"training box must have {dim} increasing bounds")
        self.register_buffer("lo", lo)
        self.register_buffer("hi", hi)
        self.register_buffer("center", 0.5 * (lo + hi))
        self.register_buffer("radius", 0.5 * (hi - lo))
        self.seed = int(seed)
        sizes = [dim] + [width] * hidden + [dim]
        gen = torch.Generator().manual_seed(self.seed)
        self.layers = torch.nn.ModuleList()
        for a, b in zip(sizes[:-1], sizes[1:]):
            layer = torch.nn.Linear(a, b, dtype=DTYPE)
            std = (2.0 / (a + b)) ** 0.5
            with torch.no_grad():
                layer.weight.copy_(torch.randn(b, a, generator=gen, dtype=DTYPE) * std)
                layer.bias.zero_()
            self.layers.append(layer)

    @property
    def dim(self) -> int:
        return self.layers[0].in_features

    @property
    def sizes(self) -> list[int]:
        return [self.layers[0].in_features] + [layer.out_features for layer in self.layers]

    @property
    def box(self) -> tuple[np.ndarray, np.ndarray]:
        return self.lo.numpy().copy(), self.hi.numpy().copy()

    def forward(self, inp: torch.Tensor) -> torch.Tensor:
        h = (inp - self.center) / self.radius
        for layer in self.layers[:-1]:
            h = torch.tanh(layer(h))
        return self.layers[-1](h)

    def jet(self, inp: torch.Tensor, dirs: torch.Tensor, second: bool = False):
        """Outputs, directional derivatives along ``dirs`` (k, d) and, if asked,
        the second derivative along ``dirs[0]``.

        Returns ``(out (n, d), dout (n, k, d), ddout (n, d) or None)``.
        """
        n = inp.shape[0]
        h = (inp - self.center) / self.radius
        dh = (dirs / self.radius).unsqueeze(0).expand(n, -1, -1)
        ddh = torch.zeros_like(h) if second else None
        for layer in self.layers[:-1]:
            w = layer.weight
            a = torch.tanh(layer(h))
            s = 1.0 - a * a
            dz = dh @ w.T
            if second:
                ddh = s * (ddh @ w.T) - 2.0 * a * s * dz[:, 0] ** 2
            h, dh = a, s.unsqueeze(1) * dz
        w = self.layers[-1].weight
        out = self.layers[-1](h)
        return out, dh @ w.T, (ddh @ w.T if second else None)

    def all_finite(self) -> bool:
        return all(bool(torch.all(torch.isfinite(p))) for p in self.parameters())


def _tensor(a) -> torch.Tensor:
    return torch.as_tensor(np.asarray(a, dtype=float), dtype=DTYPE)


def forward(net: SurrogateNet, inp) -> np.ndarray:
    """Evaluate the network on rows ``(X, t, phi...)``; returns ``(Y, t, phi...)``."""
    inp = np.atleast_2d(np.asarray(inp, dtype=float))
    lo, hi = net.box
    if np.any(inp < lo - 1e-12) or np.any(inp > hi + 1e-12):
        log.debug("surrogate evaluated outside its training box")
    with torch.no_grad():
        return net(_tensor(inp)).numpy()


def input_jacobian(net: SurrogateNet, inp) -> np.ndarray:
    """Exact Jacobian ``d(outputs)/d(inputs)``, shape (n, d_out, d_in)."""
    inp = np.atleast_2d(np.asarray(inp, dtype=float))
    with torch.no_grad():
        _, dout, _ = net.jet(_tensor(inp), torch.eye(net.dim, dtype=DTYPE))
    return dout.numpy().transpose(0, 2, 1)


def invertibility_fraction(net: SurrogateNet, probes, threshold: float = 1e-6) -> float:
    """Fraction of probe points where ``|det J| >= threshold``."""
    jac = input_jacobian(net, probes)
    return float(np.mean(np.abs(np.linalg.det(jac)) >= threshold))


# ---------------------------------------------------------------------------
# residual


def coefficient_table(problem, pts: np.ndarray) -> np.ndarray:
    """Columns ``U, D, dD/dX`` at rows ``(X, t, phi...)``, grouped by unique phi."""
    pts = np.atleast_2d(np.asarray(pts, dtype=float))
    out = np.empty((pts.shape[0], 3))
    phis, inverse = np.unique(pts[:, 2:], axis=0, return_inverse=True)
    inverse = inverse.ravel()
    for k, phi in enumerate(phis):
        rows = np.flatnonzero(inverse == k)
        coeffs = problem.coefficients(phi)
        for t in np.unique(pts[rows, 1]):
            sel = rows[pts[rows, 1] == t]
            xs = pts[sel, 0]
            out[sel, 0] = coeffs.drift(xs, t)
            out[sel, 1] = coeffs.diffusion(xs, t)
            out[sel, 2] = coeffs.diffusion_dx(xs, t) if coeffs.diffusion_dx is not None else 0.0
    return out


def _residual_tensor(net, pts: torch.Tensor, coef: torch.Tensor):
    dirs = torch.zeros(2, net.dim, dtype=DTYPE)
    dirs[0, 0] = 1.0
    dirs[1, 1] = 1.0
    out, dout, ddout = net.jet(pts, dirs, second=True)
    y_x, y_t, y_xx = dout[:, 0, 0], dout[:, 1, 0], ddout[:, 0]
    return y_t + (coef[:, 0] - coef[:, 2]) * y_x - coef[:, 1] * y_xx, out, y_x


def residual(net: SurrogateNet, problem, pts) -> np.ndarray:
    """``R = Y_t + (U - dD/dX) Y_X - D Y_XX`` at rows ``(X, t, phi...)``."""
    pts = np.atleast_2d(np.asarray(pts, dtype=float))
    with torch.no_grad():
        r, _, _ = _residual_tensor(net, _tensor(pts), _tensor(coefficient_table(problem, pts)))
    return r.numpy()


# ---------------------------------------------------------------------------
# training data


@dataclass(frozen=True)
class TrainingCounts:
    """Factorized point counts.

    ``N_ts = n_phi * n_t * n_x`` fitting pairs from FV solves,
    ``N_R = r_t * r_x * r_phi**P`` residual points,
    ``N_aux = aux_x * aux_phi**P`` initial plus ``2 * aux_t * aux_phi**P``
    boundary points.
    """

    n_phi: int = 29
    n_t: int = 26
    n_x: int = 25
    r_t: int = 22
    r_x: int = 34
    r_phi: int = 8
    aux_t: int = 44
    aux_x: int = 20
    aux_phi: int = 8
    holdout: float = 0.1

    def __post_init__(self):
        for name in ("n_phi", "n_t", "n_x", "aux_t", "aux_x", "aux_phi"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if min(self.r_t, self.r_x, self.r_phi) < 0:
            raise ValueError("residual counts must be nonnegative")
        if not 0 <= self.holdout < 1:
            raise ValueError("holdout fraction must lie in [0, 1)")

    @classmethod
    def small(cls) -> TrainingCounts:
        return cls(n_phi=12, n_t=12, n_x=25, r_t=10, r_x=24, r_phi=4, aux_t=12, aux_x=20, aux_phi=4)

    def totals(self, n_par: int) -> dict[str, int]:
        return {
            "N_ts": self.n_phi * self.n_t * self.n_x,
            "N_R": self.r_t * self.r_x * self.r_phi**n_par,
            "N_I": self.aux_x * self.aux_phi**n_par,
            "N_B": 2 * self.aux_t * self.aux_phi**n_par,
        }


@dataclass
class TrainingSet:
    box: tuple[np.ndarray, np.ndarray]
    x_ts: np.ndarray
    y_ts: np.ndarray
    x_r: np.ndarray
    coef_r: np.ndarray
    x_aux: np.ndarray
    y_aux: np.ndarray
    x_test: np.ndarray
    y_test: np.ndarray
    flags: list[str] = field(default_factory=list)

    @property
    def lam(self) -> np.ndarray:
        return 1.0 / np.max(np.abs(self.y_ts), axis=0)

    @property
    def x_smr(self) -> np.ndarray:
        return np.vstack([self.x_ts, self.x_r, self.x_aux])

    @property
    def sizes(self) -> dict[str, int]:
        return {
            "N_ts": len(self.x_ts) + len(self.x_test),
            "N_R": len(self.x_r),
            "N_aux": len(self.x_aux),
            "N_SMR": len(self.x_ts) + len(self.x_r) + len(self.x_aux),
        }


def _lattice(lo, hi, per_axis: int) -> np.ndarray:
    axes = [np.linspace(a, b, per_axis) for a, b in zip(lo, hi)]
    return np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, len(axes))


def _cap(problem, pts: np.ndarray) -> np.ndarray:
    """Largest feasible second component given the others (``inf`` if unbounded)."""
    a, b = problem.constraints()
    rest = pts.copy()
    rest[:, 1] = 0.0
    slack = rest @ a.T - b
    with np.errstate(divide="ignore", invalid="ignore"):
        caps = np.where(a[:, 1] < 0, slack / -a[:, 1], np.inf)
    return np.min(caps, axis=1)


def _warp(problem, u: np.ndarray, lo, hi) -> np.ndarray:
    """Map unit-cube points onto the feasible part of the box ``[lo, hi]``.

    All components scale linearly except the second, whose upper end is
    lowered to the feasibility cap implied by the others.  This keeps the
    point counts and the per-axis regularity of the unit-cube design.
    """
    pts = lo + u * (hi - lo)
    if pts.shape[1] > 1:
        top = np.minimum(hi[1], _cap(problem, pts))
        pts[:, 1] = lo[1] + u[:, 1] * (top - lo[1])
    return pts


def _box_usable(problem, lo, hi) -> bool:
    # constraints are linear, so the corners of the warped box decide
    corners = _warp(problem, _lattice(np.zeros(len(lo)), np.ones(len(lo)), 2), lo, hi)
    if not all(problem.feasible(c) for c in corners):
        return False
    return len(lo) == 1 or bool(np.all(_cap(problem, corners) > lo[1]))


def _median(cdf: np.ndarray, x: np.ndarray) -> float:
    return float(np.interp(0.5, cdf, x))


def _refined(grid: Grid, n: int, focus: float) -> np.ndarray:
    span = grid.x_max - grid.x_min
    focus = min(max(focus, grid.x_min + 1e-3 * span), grid.x_max - 1e-3 * span)
    return make_grid(grid.x_min, grid.x_max, n, focus=focus).nodes


def sample_training_set(problem, phi_box, counts: TrainingCounts | None = None, seed: int = 0, grid: Grid | None = None, dt: float | None = None) -> TrainingSet:
    """Fitting, residual and auxiliary points over ``support x [0, t_final] x phi_box``.

    Fitting pairs come from FV solves at Latin-hypercube parameter samples,
    read at regular time slices and at X locations clustered around the
    median of the mean-parameter solution.
    """
    counts = TrainingCounts() if counts is None else counts
    lo_phi, hi_phi = (np.asarray(v, dtype=float) for v in phi_box)
    p = problem.n_par
    if lo_phi.shape != (p,) or hi_phi.shape != (p,) or np.any(hi_phi <= lo_phi):
        raise ValueError(f"parameter box must have {p} increasing bounds")
    if not _box_usable(problem, lo_phi, hi_phi):
        raise ValueError(f"parameter box [{lo_phi}, {hi_phi}] has no feasible interior at its lower edge")
    grid = problem.grid() if grid is None else grid
    dt = problem.dt_pde if dt is None else dt
    t_end = problem.truth.t_final
    box = (np.r_[grid.x_min, 0.0, lo_phi], np.r_[grid.x_max, t_end, hi_phi])
    flags = []

    phis = _warp(problem, qmc.LatinHypercube(d=p, seed=seed).random(counts.n_phi), lo_phi, hi_phi)
    center = _warp(problem, np.full((1, p), 0.5), lo_phi, hi_phi)[0]
    fit_t = np.linspace(0.0, t_end, counts.n_t + 1)[1:]
    res_t = np.linspace(0.0, t_end, counts.r_t + 1)[1:] if counts.r_t else np.empty(0)
    all_t = np.union1d(fit_t, res_t)

    pts = np.vstack([center, phis])
    cdf0 = np.stack([initial_condition(problem, grid, q).cdf for q in pts])
    snaps = march(grid, cdf0, [problem.coefficients(q) for q in pts], all_t, dt)
    focus = {float(t): _median(snaps[k, 0], grid.nodes) for k, t in enumerate(all_t)}

    rows_x, rows_y = [], []
    for k, t in enumerate(all_t):
        if t not in fit_t:
            continue
        xs = _refined(grid, counts.n_x, focus[float(t)])
        for j, phi in enumerate(phis, start=1):
            y = np.interp(xs, grid.nodes, snaps[k, j])
            block = np.column_stack([xs, np.full_like(xs, t), np.tile(phi, (xs.size, 1))])
            rows_x.append(block)
            rows_y.append(np.column_stack([y, block[:, 1:]]))
    x_fit, y_fit = np.vstack(rows_x), np.vstack(rows_y)
    perm = np.random.default_rng([seed, 2]).permutation(len(x_fit))
    n_test = int(round(counts.holdout * len(x_fit)))
    test, keep = np.sort(perm[:n_test]), np.sort(perm[n_test:])

    if counts.r_t and counts.r_x and counts.r_phi:
        lattice = _warp(problem, _lattice(np.zeros(p), np.ones(p), counts.r_phi), lo_phi, hi_phi)
        blocks = []
        for t in res_t:
            xs = _refined(grid, counts.r_x, focus[float(t)])
            tx = np.column_stack([np.repeat(xs, len(lattice)), np.full(xs.size * len(lattice), t)])
            blocks.append(np.column_stack([tx, np.tile(lattice, (xs.size, 1))]))
        x_r = np.vstack(blocks)
        coef_r = coefficient_table(problem, x_r)
    else:
        x_r, coef_r = np.empty((0, p + 2)), np.empty((0, 3))
        flags.append("no residual points: pure regression")
        log.warning("training set has no residual points; the residual term is omitted")

    lattice = _warp(problem, _lattice(np.zeros(p), np.ones(p), counts.aux_phi), lo_phi, hi_phi)
    xs = np.linspace(grid.x_min, grid.x_max, counts.aux_x)
    init_rows, init_y = [], []
    for phi in lattice:
        f0 = np.interp(xs, grid.nodes, problem.initial_cdf(phi, grid))
        init_rows.append(np.column_stack([xs, np.zeros_like(xs), np.tile(phi, (xs.size, 1))]))
        init_y.append(f0)
    ts = np.linspace(0.0, t_end, counts.aux_t)
    bnd_rows, bnd_y = [], []
    for x_edge, value in ((grid.x_min, 0.0), (grid.x_max, 1.0)):
        tp = np.column_stack([np.repeat(ts, len(lattice)), np.tile(lattice, (ts.size, 1))])
        bnd_rows.append(np.column_stack([np.full(len(tp), x_edge), tp]))
        bnd_y.append(np.full(len(tp), value))
    x_aux = np.vstack(init_rows + bnd_rows)
    y_aux = np.concatenate(init_y + bnd_y)

    return TrainingSet(box, x_fit[keep], y_fit[keep], x_r, coef_r, x_aux, y_aux, x_fit[test], y_fit[test], flags)


# ---------------------------------------------------------------------------
# training


@dataclass(frozen=True)
class TrainConfig:
    """Adam on seeded minibatches (cosine-decayed rate), then full-batch L-BFGS."""

    adam_iters: int = 4000
    lbfgs_iters: int = 300
    lr: float = 1e-2
    lr_min: float = 1e-4
    batch: int = 8192
    rescue_iters: int = 20
    seed: int = 0


def loss_terms(net: SurrogateNet, ts: TrainingSet, tensors=None, smr_scale: float = 1.0) -> dict[str, torch.Tensor]:
    """The four loss terms: weighted fit, residual, auxiliary and the monotonicity hinge.

    ``smr_scale`` rescales the hinge sum when ``tensors`` is a minibatch.
    """
    t = tensors or _training_tensors(ts)
    dirs = torch.zeros(2, net.dim, dtype=DTYPE)
    dirs[0, 0] = 1.0
    dirs[1, 1] = 1.0
    n_ts = len(t["x_ts"])
    out, dout, _ = net.jet(torch.cat([t["x_ts"], t["x_aux"]]), dirs[:1])
    slopes = [dout[:, 0, 0]]
    mse_ts = torch.sum(t["lam"] * torch.mean((out[:n_ts] - t["y_ts"]) ** 2, dim=0))
    if len(t["x_r"]):
        c = t["coef_r"]
        _, dr, ddr = net.jet(t["x_r"], dirs, second=True)
        r = dr[:, 1, 0] + (c[:, 0] - c[:, 2]) * dr[:, 0, 0] - c[:, 1] * ddr[:, 0]
        mse_r = torch.mean(r**2)
        slopes.append(dr[:, 0, 0])
    else:
        mse_r = torch.zeros((), dtype=DTYPE)
    y_x = torch.cat(slopes)
    mse_aux = torch.mean((out[n_ts:, 0] - t["y_aux"]) ** 2)
    smr = smr_scale * torch.sum(torch.relu(-y_x)) / torch.max(torch.abs(y_x)).clamp_min(1e-300)
    return {"mse_ts": mse_ts, "mse_r": mse_r, "mse_aux": mse_aux, "smr": smr, "total": mse_ts + mse_r + mse_aux + smr}


def _training_tensors(ts: TrainingSet) -> dict[str, torch.Tensor]:
    return {
        "x_ts": _tensor(ts.x_ts),
        "y_ts": _tensor(ts.y_ts),
        "x_r": _tensor(ts.x_r).reshape(-1, ts.x_ts.shape[1]),
        "coef_r": _tensor(ts.coef_r).reshape(-1, 3),
        "x_aux": _tensor(ts.x_aux),
        "y_aux": _tensor(ts.y_aux),
        "lam": _tensor(ts.lam),
    }


def _minibatch(tensors, size: int, gen: torch.Generator):
    """Same fraction of every point group; returns the batch and the SMR scale."""
    total = sum(len(tensors[k]) for k in ("x_ts", "x_r", "x_aux"))
    if size >= total:
        return tensors, 1.0
    frac = size / total
    out = dict(tensors)
    picked = 0
    for xs, extra in (("x_ts", "y_ts"), ("x_r", "coef_r"), ("x_aux", "y_aux")):
        n = len(tensors[xs])
        if n == 0:
            continue
        k = max(1, int(round(frac * n)))
        idx = torch.randperm(n, generator=gen)[:k]
        out[xs], out[extra] = tensors[xs][idx], tensors[extra][idx]
        picked += k
    return out, total / picked


def train(net: SurrogateNet, ts: TrainingSet, config: TrainConfig | None = None) -> list[dict]:
    """Minibatch Adam followed by full-batch L-BFGS; the best full-set state is kept.

    Returns the loss history, one row per optimizer iteration (Adam rows
    hold minibatch estimates).  Raises
    :class:`TrainingError` (with the net restored to its last finite state)
    if the loss becomes NaN.
    """
    config = TrainConfig() if config is None else config
    tensors = _training_tensors(ts)
    history: list[dict] = []
    best = {"total": np.inf, "state": {k: v.clone() for k, v in net.state_dict().items()}}

    def record(terms, full=True):
        values = {k: float(v.detach()) for k, v in terms.items()}
        if not np.isfinite(values["total"]):
            net.load_state_dict(best["state"])
            raise TrainingError(f"training loss became non-finite at iteration {len(history)}", net, history)
        history.append({"iter": len(history), **values})
        if full and values["total"] < best["total"]:
            best["total"] = values["total"]
            best["state"] = {k: v.clone() for k, v in net.state_dict().items()}

    gen = torch.Generator().manual_seed(config.seed)

    def adam_steps(opt, n, sched=None):
        for _ in range(n):
            batch, scale = _minibatch(tensors, config.batch, gen)
            opt.zero_grad()
            terms = loss_terms(net, ts, batch, scale)
            record(terms, full=batch is tensors)
            terms["total"].backward()
            opt.step()
            if sched is not None:
                sched.step()

    def closure():
        lbfgs.zero_grad()
        total = loss_terms(net, ts, tensors)["total"]
        total.backward()
        return total

    def new_lbfgs():
        return torch.optim.LBFGS(
            net.parameters(), lr=1.0, max_iter=1, history_size=50, line_search_fn="strong_wolfe",
            tolerance_grad=1e-12, tolerance_change=1e-15,
        )

    start = time.perf_counter()
    adam = torch.optim.Adam(net.parameters(), lr=config.lr)
    if config.adam_iters:
        sched = torch.optim.lr_scheduler.CosineAnnealingLR(adam, config.adam_iters, eta_min=config.lr_min)
        adam_steps(adam, config.adam_iters, sched)
        # minibatch losses are noisy; judge the end state on the full set
        with torch.no_grad():
            record(loss_terms(net, ts, tensors))
        best["total"] = history[-1]["total"]
        best["state"] = {k: v.clone() for k, v in net.state_dict().items()}
    lbfgs = new_lbfgs()
    done = 0
    last = best["total"]
    while done < config.lbfgs_iters:
        lbfgs.step(closure)
        with torch.no_grad():
            record(loss_terms(net, ts, tensors))
        done += 1
        stalled = not history[-1]["total"] < last
        last = history[-1]["total"]
        if stalled:
            # the monotonicity hinge is not smooth; a stalled line search gets
            # a short first-order burst and a fresh curvature history
            for group in adam.param_groups:
                group["lr"] = config.lr_min
            adam_steps(adam, config.rescue_iters)
            done += config.rescue_iters
            with torch.no_grad():
                record(loss_terms(net, ts, tensors))
            last = history[-1]["total"]
            lbfgs = new_lbfgs()
    net.load_state_dict(best["state"])
    log.info("surrogate trained: best total loss %.3e in %.1fs", best["total"], time.perf_counter() - start)
    return history


def write_history(history: list[dict], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=HISTORY_FIELDS, extrasaction="ignore")
        w.writeheader()
        for row in history:
            w.writerow({k: (row[k] if k == "iter" else repr(float(row[k]))) for k in HISTORY_FIELDS})


def save_checkpoint(net: SurrogateNet, path, **meta) -> None:
    lo, hi = net.box
    payload = {
        "sizes": net.sizes,
        "activation": "tanh",
        "weights": [layer.weight.detach().numpy().tolist() for layer in net.layers],
        "biases": [layer.bias.detach().numpy().tolist() for layer in net.layers],
        "box": {"lo": lo.tolist(), "hi": hi.tolist()},
        "seed": net.seed,
        **meta,
    }
    Path(path).write_text(json.dumps(payload))


def load_checkpoint(path) -> tuple[SurrogateNet, dict]:
    payload = json.loads(Path(path).read_text())
    sizes = payload["sizes"]
    if sizes[0] != sizes[-1] or len(set(sizes[1:-1])) != 1:
        raise ValueError("checkpoint does not describe a supported architecture")
    net = SurrogateNet(sizes[0] - 2, payload["box"]["lo"], payload["box"]["hi"], payload["seed"], len(sizes) - 2, sizes[1])
    with torch.no_grad():
        for layer, w, b in zip(net.layers, payload["weights"], payload["biases"]):
            layer.weight.copy_(_tensor(w))
            layer.bias.copy_(_tensor(b))
    if not net.all_finite():
        raise ValueError("checkpoint contains non-finite weights")
    meta = {k: v for k, v in payload.items() if k not in ("sizes", "weights", "biases", "box", "seed", "activation")}
    return net, meta


# ---------------------------------------------------------------------------
# forecasting and admission


class SurrogateForecaster:
    """Forecasts whose parameter sensitivities come from the network Jacobian.

    With ``base`` (typically an :class:`FVForecaster`) the distribution itself
    comes from ``base`` and only the gradients from the network; without it
    the network output, clamped to a CDF, is the forecast too.  Sensitivities
    are zeroed where the forecast density is below ``tail`` times its peak.
    """

    source = "surrogate"

    def __init__(self, net: SurrogateNet, problem, grid: Grid | None = None, base=None, tail: float = 1e-3):
        self.net = net
        self.problem = problem
        self.base = base
        self.tail = tail
        self.grid = grid if grid is not None else (base.grid_at(0.0) if base is not None else problem.grid())

    def grid_at(self, t: float) -> Grid:
        return self.grid

    def _inputs(self, phi, t):
        x = self.grid.nodes
        return np.column_stack([x, np.full_like(x, t), np.tile(np.asarray(phi, dtype=float), (x.size, 1))])

    def network_cdf(self, phi, t: float) -> np.ndarray:
        y = forward(self.net, self._inputs(phi, t))[:, 0]
        cdf = np.maximum.accumulate(np.clip(y, 0.0, 1.0))
        cdf[0], cdf[-1] = 0.0, 1.0
        return cdf

    def forecast(self, phi, t: float, grads: bool = False):
        if self.base is not None:
            dist, _ = self.base.forecast(phi, t)
        else:
            cdf = self.network_cdf(phi, t)
            f, _ = pdf_and_sensitivity(self.grid, cdf)
            dist = DiscretizedDistribution(self.grid, cdf, f)
        if not grads:
            return dist, None
        jac = input_jacobian(self.net, self._inputs(phi, t))
        # where the forecast carries no mass F is pinned at 0 or 1 and its
        # sensitivity vanishes; network noise there would dominate 1/f weights
        dF = np.where((dist.pdf >= self.tail * np.max(dist.pdf))[:, None], jac[:, 0, 2:], 0.0)
        _, field_ = gradient_field(self.grid, dist.cdf, dF, self.source)
        return dist, field_


@dataclass
class GateReport:
    phi: list[float]
    times: list[float]
    fisher_errors: list[float]
    wasserstein_errors: list[float]
    tol: float

    @property
    def passed(self) -> bool:
        return max(self.fisher_errors + self.wasserstein_errors) <= self.tol

    def to_dict(self) -> dict:
        return {**self.__dict__, "passed": self.passed}


def _rel_frobenius(a, b) -> float:
    return float(np.linalg.norm(a - b) / max(np.linalg.norm(b), 1e-300))


def geometry_gate(net: SurrogateNet, problem, phi, times=(0.5, 1.0, 2.0), tol: float = 0.05, fv: FVForecaster | None = None) -> GateReport:
    """Compare metric tensors from surrogate gradients with FD-on-FV tensors."""
    fv = FVForecaster(problem) if fv is None else fv
    sur = SurrogateForecaster(net, problem, base=fv)
    ef, ew = [], []
    for t in times:
        ref, ref_g = fv.forecast(phi, t, grads=True)
        dist, g = sur.forecast(phi, t, grads=True)
        ef.append(_rel_frobenius(fisher_matrix(dist, g).matrix, fisher_matrix(ref, ref_g).matrix))
        ew.append(_rel_frobenius(wasserstein_matrix(dist, g).matrix, wasserstein_matrix(ref, ref_g).matrix))
    return GateReport([float(v) for v in phi], [float(t) for t in times], ef, ew, tol)


def accuracy_audit(net: SurrogateNet, ts: TrainingSet) -> dict:
    """Held-out fit, pass-through fidelity, monotonicity and invertibility checks."""
    out = forward(net, ts.x_test) if len(ts.x_test) else np.empty((0, net.dim))
    lo, hi = net.box
    report = {
        "heldout_sup_error": float(np.max(np.abs(out[:, 0] - ts.y_test[:, 0]))) if len(out) else float("nan"),
        "passthrough_t_error": float(np.max(np.abs(out[:, 1] - ts.x_test[:, 1])) / (hi[1] - lo[1])) if len(out) else float("nan"),
    }
    probes = ts.x_smr
    jac = input_jacobian(net, probes)
    y_x = jac[:, 0, 0]
    report["negative_slope_fraction"] = float(np.mean(y_x < -1e-3))
    report["invertible_fraction"] = float(np.mean(np.abs(np.linalg.det(jac)) >= 1e-6))
    return report
