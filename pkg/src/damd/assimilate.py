"""Sequential analysis loop: observational posteriors, losses, (natural) gradient descent."""

from __future__ import annotations

import csv
import logging
import time
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.optimize import line_search
from scipy.optimize._linesearch import LineSearchWarning

from .dist import PDF_FLOOR, DiscretizedDistribution, _quantile_segments, from_pdf, trapezoid
from .errors import NumericalError
from .geometry import AnalyticForecaster, FVForecaster, ParamGradientField, fisher_matrix, invert_metric, wasserstein_matrix
from .metrics import kl, quantile_levels, wasserstein
from .models import ObservationSet, Problem, RandomInitProblem

log = logging.getLogger(__name__)

LOSS_KINDS = ("KL", "W2")
METHODS = ("GD", "NGD")


@dataclass(frozen=True)
class LossSpec:
    """``KL``: relative entropy of forecast w.r.t. target; ``W2``: half squared W2."""

    kind: str

    def __post_init__(self):
        kind = self.kind.upper()
        if kind not in LOSS_KINDS:
            raise ValueError(f"loss must be one of {LOSS_KINDS}, got {self.kind!r}")
        object.__setattr__(self, "kind", kind)


@dataclass(frozen=True)
class OptimizerConfig:
    method: str = "NGD"
    c1: float = 1e-4
    c2: float = 0.9
    max_trials: int = 40
    max_iter: int = 200
    eps: float | None = None  # gradient threshold; None -> problem default (paired for W2)

    def __post_init__(self):
        method = self.method.upper()
        if method not in METHODS:
            raise ValueError(f"method must be one of {METHODS}, got {self.method!r}")
        object.__setattr__(self, "method", method)
        if self.eps is not None and not self.eps > 0:
            raise ValueError("eps must be positive")


def observational_posterior(prior: DiscretizedDistribution, xhat: float, sigma: float) -> DiscretizedDistribution:
    """Bayes' rule at one time: Gaussian likelihood times the forecast density."""
    if not sigma > 0:
        raise ValueError("observation noise must be positive")
    lik = np.exp(-0.5 * ((xhat - prior.x) / sigma) ** 2)
    weighted = lik * prior.pdf
    z = trapezoid(weighted, prior.grid)
    if not z >= 1e-300:
        raise NumericalError("observation incompatible with prior support")
    return from_pdf(prior.grid, weighted / z)


def loss_value(spec: LossSpec, forecast: DiscretizedDistribution, target: DiscretizedDistribution) -> float:
    if spec.kind == "KL":
        return kl(forecast, target)
    return 0.5 * wasserstein(forecast, target, 2) ** 2


def loss_gradient_from(
    spec: LossSpec, forecast: DiscretizedDistribution, target: DiscretizedDistribution, grads: ParamGradientField
) -> np.ndarray:
    """Exact gradient of the discretized loss given CDF/PDF sensitivities."""
    if spec.kind == "KL":
        f, q = forecast.pdf, target.pdf
        live = f >= PDF_FLOOR
        w = np.where(live, np.log(np.where(live, f, 1.0) / np.maximum(q, PDF_FLOOR)) + 1.0, 0.0)
        return trapezoid(grads.df.T * w, forecast.grid)
    y = quantile_levels()
    x = forecast.x
    qf, k, s = _quantile_segments(forecast.cdf, x, y)
    qt, _, _ = _quantile_segments(target.cdf, target.x, y)
    slope = (forecast.cdf[k] - forecast.cdf[k - 1]) / (x[k] - x[k - 1])
    dF_at = (1.0 - s)[:, None] * grads.dF[k - 1] + s[:, None] * grads.dF[k]
    dq = -dF_at / slope[:, None]
    return np.mean((qf - qt)[:, None] * dq, axis=0)


class Objective:
    """Loss ``C(phi)`` for one assimilation step, with caching and counters."""

    def __init__(self, forecaster, t: float, target: DiscretizedDistribution, spec: LossSpec):
        self.forecaster = forecaster
        self.t = t
        self.target = target
        self.spec = spec
        self.n_value = 0
        self.n_grad = 0

    def value(self, phi) -> float:
        self.n_value += 1
        fc, _ = self.forecaster.forecast(phi, self.t, grads=False)
        return loss_value(self.spec, fc, self.target)

    def evaluate(self, phi):
        """Value, gradient, forecast and sensitivities at ``phi``."""
        self.n_grad += 1
        fc, grads = self.forecaster.forecast(phi, self.t, grads=True)
        return loss_value(self.spec, fc, self.target), loss_gradient_from(self.spec, fc, self.target, grads), fc, grads

    def grad(self, phi) -> np.ndarray:
        return self.evaluate(phi)[1]


def loss(phi, spec: LossSpec, forecaster, t_m: float, target: DiscretizedDistribution) -> float:
    return Objective(forecaster, t_m, target, spec).value(phi)


def loss_gradient(phi, spec: LossSpec, forecaster, t_m: float, target: DiscretizedDistribution) -> np.ndarray:
    return Objective(forecaster, t_m, target, spec).grad(phi)


def metric_for(spec: LossSpec, forecast: DiscretizedDistribution, grads: ParamGradientField):
    g = fisher_matrix(forecast, grads) if spec.kind == "KL" else wasserstein_matrix(forecast, grads)
    return invert_metric(g)


@dataclass
class StepOutcome:
    phi: np.ndarray
    value: float
    grad: np.ndarray
    success: bool
    alpha: float = 0.0
    projected: bool = False


def descent_direction(method: str, spec: LossSpec, grad, forecast, grads) -> np.ndarray:
    if method == "GD":
        return -grad
    return -metric_for(spec, forecast, grads).inverse @ grad


def update_step(
    phi,
    objective: Objective,
    problem: Problem,
    method: str = "NGD",
    config: OptimizerConfig = OptimizerConfig(),
    state: dict | None = None,
) -> StepOutcome:
    """One (natural) gradient step with a strong-Wolfe line search.

    ``state`` carries the previous loss values between iterations so the
    line search can guess its first trial step; pass a fresh dict per
    assimilation step.
    """
    state = {} if state is None else state
    phi = np.asarray(phi, dtype=float)
    value, grad, fc, grads = objective.evaluate(phi)
    if not np.any(grad):
        return StepOutcome(phi, value, grad, True)
    direction = descent_direction(method.upper(), objective.spec, grad, fc, grads)
    slope = float(grad @ direction)
    if not slope < 0:
        log.warning("non-descent direction (slope %.3e); falling back to steepest descent", slope)
        direction, slope = -grad, -float(grad @ grad)
    amax = 0.999 * problem.max_step(phi, direction)
    if not amax > 0:
        return StepOutcome(phi, value, grad, False)

    def f(x):
        return objective.value(x) if problem.feasible(x) else np.inf

    def fprime(x):
        return objective.grad(x)

    with warnings.catch_warnings():
        warnings.simplefilter("ignore", LineSearchWarning)
        warnings.simplefilter("ignore", RuntimeWarning)
        alpha, _, _, new_val, _, _ = line_search(
            f,
            fprime,
            phi,
            direction,
            gfk=grad,
            old_fval=value,
            old_old_fval=state.get("old_old_fval"),
            c1=config.c1,
            c2=config.c2,
            amax=amax,
            maxiter=config.max_trials,
        )
    if alpha is None or not np.isfinite(new_val) or new_val > value:
        return StepOutcome(phi, value, grad, False)
    state["old_old_fval"] = value
    new_phi = phi + alpha * direction
    projected = False
    if not problem.feasible(new_phi):
        new_phi = problem.project(new_phi)
        projected = True
        log.info("projected iterate onto the feasible set: %s", new_phi)
    new_value, new_grad, _, _ = objective.evaluate(new_phi)
    return StepOutcome(new_phi, new_value, new_grad, True, float(alpha), projected)


@dataclass
class StepRecord:
    m: int
    t: float
    phi: np.ndarray
    n_iter: int
    loss: float
    grad_norm: float
    converged: bool
    line_search_failed: bool
    n_value_evals: int
    n_grad_evals: int
    projections: int
    wall_time: float


@dataclass
class AssimilationTrace:
    problem_id: str
    names: tuple[str, ...]
    spec: str
    method: str
    phi0: np.ndarray
    eps: float
    steps: list[StepRecord] = field(default_factory=list)
    error: str | None = None

    def __len__(self):
        return len(self.steps)

    @property
    def phi(self) -> np.ndarray:
        return self.steps[-1].phi if self.steps else np.asarray(self.phi0)

    @property
    def phis(self) -> np.ndarray:
        return np.array([self.phi0] + [s.phi for s in self.steps])

    @property
    def total_iterations(self) -> int:
        return sum(s.n_iter for s in self.steps)

    @property
    def converged(self) -> bool:
        return self.error is None and all(s.converged for s in self.steps)

    def to_csv(self, path) -> None:
        with Path(path).open("w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["m", *self.names, "n_iter", "loss", "method", "spec", "converged"])
            for s in self.steps:
                w.writerow([s.m, *(repr(float(v)) for v in s.phi), s.n_iter, repr(float(s.loss)), self.method, self.spec, int(s.converged)])

    def summary(self) -> dict:
        return {
            "problem": self.problem_id,
            "method": self.method,
            "spec": self.spec,
            "eps": self.eps,
            "phi0": dict(zip(self.names, map(float, self.phi0))),
            "phi_final": dict(zip(self.names, map(float, self.phi))),
            "n_steps": len(self.steps),
            "total_iterations": self.total_iterations,
            "converged": self.converged,
            "non_converged_steps": [s.m for s in self.steps if not s.converged],
            "wall_time": sum(s.wall_time for s in self.steps),
            "error": self.error,
        }


def default_forecaster(problem: Problem, source: str = "auto"):
    if source == "auto":
        source = "analytic" if isinstance(problem, RandomInitProblem) else "fd"
    if source == "analytic":
        return AnalyticForecaster(problem)
    if source == "fd":
        return FVForecaster(problem)
    raise ValueError(f"unknown gradient source {source!r}")


def pair_thresholds(eps_kl: float, forecaster, phi0, t1: float, xhat1: float, sigma: float) -> float:
    """W2 threshold with the same ratio to the initial loss as the KL threshold."""
    prior, _ = forecaster.forecast(phi0, t1)
    target = observational_posterior(prior, xhat1, sigma)
    c_kl = loss_value(LossSpec("KL"), prior, target)
    c_w2 = loss_value(LossSpec("W2"), prior, target)
    eps = paired_eps(eps_kl, c_kl, c_w2)
    log.info("paired thresholds: C_KL=%.4e C_W2=%.4e eps_W2=%.4e", c_kl, c_w2, eps)
    return eps


def paired_eps(eps_kl: float, c_kl: float, c_w2: float) -> float:
    if c_kl <= 0:
        log.warning("zero KL loss at the prior; using eps_W2 = eps_KL")
        return eps_kl
    return eps_kl * c_w2 / c_kl


def minimize_step(phi, objective: Objective, problem: Problem, config: OptimizerConfig, eps: float):
    """Iterate update steps until ``max|grad| <= eps`` or the iteration cap.

    A failed update leaves the iterate and the line-search state untouched,
    so every later attempt would fail identically; the remaining budget is
    charged at once and the step ends at the cap.
    """
    phi = np.asarray(phi, dtype=float)
    state: dict = {}
    value, grad, _, _ = objective.evaluate(phi)
    n_iter = projections = 0
    converged = np.max(np.abs(grad)) <= eps
    failed = False
    while not converged and n_iter < config.max_iter:
        out = update_step(phi, objective, problem, config.method, config, state)
        if not out.success:
            failed = True
            n_iter = config.max_iter
            break
        n_iter += 1
        projections += out.projected
        phi, value, grad = out.phi, out.value, out.grad
        converged = np.max(np.abs(grad)) <= eps
    return phi, value, grad, n_iter, bool(converged), failed, projections


def assimilate_window(
    problem: Problem,
    observations: ObservationSet,
    phi0=None,
    spec: LossSpec | str = "KL",
    method: str = "NGD",
    forecaster=None,
    config: OptimizerConfig | None = None,
) -> AssimilationTrace:
    """Assimilate observations one at a time, warm-starting each step from the last."""
    spec = spec if isinstance(spec, LossSpec) else LossSpec(spec)
    config = OptimizerConfig(method=method) if config is None else config
    forecaster = default_forecaster(problem) if forecaster is None else forecaster
    phi = np.asarray(problem.prior if phi0 is None else phi0, dtype=float)
    if not problem.feasible(phi):
        raise ValueError(f"prior {phi} is infeasible")
    eps = config.eps
    if eps is None:
        eps = problem.eps_kl
        if spec.kind == "W2" and len(observations):
            eps = pair_thresholds(eps, forecaster, phi, observations.times[0], observations.values[0], observations.sigma)
    trace = AssimilationTrace(problem.id, problem.names, spec.kind, config.method, phi.copy(), eps)
    for m, (t, xhat) in enumerate(zip(observations.times, observations.values), start=1):
        start = time.perf_counter()
        try:
            prior, _ = forecaster.forecast(phi, t)
            target = observational_posterior(prior, xhat, observations.sigma)
            objective = Objective(forecaster, t, target, spec)
            phi, value, grad, n_iter, converged, failed, proj = minimize_step(phi, objective, problem, config, eps)
        except (NumericalError, ValueError) as exc:
            trace.error = f"step {m}: {exc}"
            log.error("assimilation aborted at step %d: %s", m, exc)
            break
        trace.steps.append(
            StepRecord(
                m, float(t), phi.copy(), n_iter, float(value), float(np.max(np.abs(grad))), converged, failed,
                objective.n_value, objective.n_grad, proj, time.perf_counter() - start,
            )
        )
        log.info("m=%d t=%.4f phi=%s iters=%d loss=%.3e converged=%s", m, t, np.round(phi, 5), n_iter, value, converged)
    return trace


def loss_surface(problem: Problem, forecaster, phi_prior, t: float, xhat: float, sigma: float, axes, fixed=None):
    """KL and W2 losses on a 2D parameter grid.

    ``axes`` is a pair of 1D arrays for the first two free parameters;
    ``fixed`` supplies values for any remaining ones.  Infeasible cells get
    NaN losses.
    """
    prior, _ = forecaster.forecast(phi_prior, t)
    target = observational_posterior(prior, xhat, sigma)
    rows = []
    for a in axes[0]:
        for b in axes[1]:
            phi = np.array([a, b, *(fixed or ())], dtype=float)
            if problem.feasible(phi):
                fc, _ = forecaster.forecast(phi, t)
                rows.append((a, b, loss_value(LossSpec("KL"), fc, target), loss_value(LossSpec("W2"), fc, target), True))
            else:
                rows.append((a, b, np.nan, np.nan, False))
    return rows
