"""Benchmark problems: coefficients, feasibility, synthetic truth and observations.

Three problems are shipped:

* ``RandomInit`` -- ``dx/dt = -2 x^2`` with a truncated-Gaussian initial state
  ``(mu0, sigma0)``; the CDF equation is pure advection and has a closed-form
  solution.
* ``WhiteNoise`` -- ``dx = -mu_a x dt - sigma_a x dW`` (Ito), deterministic
  ``x0``; the CDF equation is exact.
* ``ColoredNoise`` -- ``dx/dt = -(mu_a + w(t)) x`` with ``w`` an
  Ornstein-Uhlenbeck process; the CDF equation uses a semi-local closure
  whose coefficients involve the time-integrated noise covariance.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np
from scipy.integrate import quad

from .dist import DiscretizedDistribution, Grid, from_pdf, make_grid, truncated_gaussian_cdf
from .errors import NumericalError
from .pde import CoefficientField, smoothed_heaviside

FEASIBILITY_SIGMAS = 3.0
POSITIVE_MARGIN = 1e-8


@dataclass(frozen=True)
class MetaParams:
    names: tuple[str, ...]
    values: np.ndarray

    def __post_init__(self):
        values = np.array(self.values, dtype=float)
        if values.shape != (len(self.names),):
            raise ValueError(f"expected {len(self.names)} values, got {values.shape}")
        object.__setattr__(self, "values", values)

    def as_dict(self) -> dict[str, float]:
        return {k: float(v) for k, v in zip(self.names, self.values)}


@dataclass(frozen=True)
class TruthConfig:
    """Synthetic-truth settings.

    ``truth`` holds ``(x0*,)`` for ``RandomInit`` and the true meta-parameters
    for the Langevin problems (whose initial state is ``x0``).
    """

    truth: tuple[float, ...]
    n_meas: int
    t_final: float
    sigma_eps: float
    seed: int = 0
    x0: float = 1.0

    def __post_init__(self):
        if self.n_meas < 0 or self.t_final <= 0:
            raise ValueError("need n_meas >= 0 and t_final > 0")
        if self.sigma_eps < 0:
            raise ValueError("sigma_eps must be nonnegative")

    @property
    def dt_obs(self) -> float:
        return self.t_final / (self.n_meas + 1)

    @property
    def obs_times(self) -> np.ndarray:
        return self.dt_obs * np.arange(1, self.n_meas + 1)


@dataclass(frozen=True)
class ObservationSet:
    times: np.ndarray
    values: np.ndarray
    sigma: float

    def __post_init__(self):
        times = np.asarray(self.times, dtype=float)
        values = np.asarray(self.values, dtype=float)
        if times.shape != values.shape or times.ndim != 1:
            raise ValueError("times and values must be 1D arrays of equal length")
        if np.any(np.diff(times) <= 0) or not np.all(np.isfinite(values)):
            raise ValueError("observation times must increase strictly and values be finite")
        object.__setattr__(self, "times", times)
        object.__setattr__(self, "values", values)

    def __len__(self):
        return self.times.size

    def head(self, m: int) -> ObservationSet:
        return ObservationSet(self.times[:m], self.values[:m], self.sigma)

    def to_csv(self, path) -> None:
        with Path(path).open("w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["m", "t", "xhat"])
            for m, (t, x) in enumerate(zip(self.times, self.values), start=1):
                w.writerow([m, repr(float(t)), repr(float(x))])

    @classmethod
    def from_csv(cls, path, sigma: float) -> ObservationSet:
        data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
        return cls(data[:, 1], data[:, 2], sigma)


@dataclass(frozen=True)
class Trajectory:
    times: np.ndarray
    values: np.ndarray  # (n_paths, n_times)

    def at(self, t) -> np.ndarray:
        """First path interpolated at ``t``."""
        return np.interp(t, self.times, self.values[0])

    def to_csv(self, path) -> None:
        with Path(path).open("w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["t", "x"])
            for t, x in zip(self.times, self.values[0]):
                w.writerow([repr(float(t)), repr(float(x))])


# ---------------------------------------------------------------------------
# coefficient functions


def case1_coefficients(phi=None) -> CoefficientField:
    return CoefficientField(
        drift=lambda x, t: -2.0 * np.asarray(x) ** 2,
        diffusion=lambda x, t: np.zeros_like(np.asarray(x, dtype=float)),
        diffusion_dx=lambda x, t: np.zeros_like(np.asarray(x, dtype=float)),
    )


def case2_coefficients(phi) -> CoefficientField:
    mu, sigma = (float(v) for v in phi)
    if not (mu > 0 and sigma > 0):
        raise ValueError(f"infeasible white-noise parameters {tuple(phi)}")
    half_var = 0.5 * sigma * sigma
    return CoefficientField(
        drift=lambda x, t: -mu * np.asarray(x),
        diffusion=lambda x, t: half_var * np.asarray(x) ** 2,
        diffusion_dx=lambda x, t: 2.0 * half_var * np.asarray(x),
    )


def colored_covariance(phi, t, tau):
    """Auto-covariance of the colored noise, including its initial transient."""
    _, sigma, theta = (float(v) for v in phi)
    return sigma**2 / (2.0 * theta) * (np.exp(-theta * np.abs(t - tau)) + np.exp(-theta * (t + tau)))


def case3_colored_integral(phi, t: float) -> float:
    """Integral of the noise covariance over ``[0, t]``."""
    _, sigma, theta = (float(v) for v in phi)
    if not theta > 0:
        raise ValueError("theta_a must be positive")
    if t < 0:
        raise ValueError("t must be nonnegative")
    return sigma**2 / (2.0 * theta**2) * -math.expm1(-2.0 * theta * t)


def case3_colored_integral_quad(phi, t: float) -> float:
    """Adaptive-quadrature oracle for :func:`case3_colored_integral`."""
    if t == 0:
        return 0.0
    val, _ = quad(lambda tau: colored_covariance(phi, t, tau), 0.0, t, epsabs=1e-14, epsrel=1e-13)
    return val


def case3_coefficients(phi) -> CoefficientField:
    mu, sigma, theta = (float(v) for v in phi)
    if not (mu > 0 and sigma > 0 and theta > 0):
        raise ValueError(f"infeasible colored-noise parameters {tuple(phi)}")
    scale = sigma**2 / (2.0 * theta**2)

    def integral(t):
        return scale * -math.expm1(-2.0 * theta * t)

    return CoefficientField(
        drift=lambda x, t: (integral(t) - mu) * np.asarray(x),
        diffusion=lambda x, t: integral(t) * np.asarray(x) ** 2,
        diffusion_dx=lambda x, t: 2.0 * integral(t) * np.asarray(x),
    )


# ---------------------------------------------------------------------------
# problems


@dataclass(frozen=True)
class Problem:
    """Base class; subclasses define the dynamics and the meta-parameter family."""

    truth: TruthConfig
    prior: tuple[float, ...]
    eps_kl: float
    support: tuple[float, float]
    n_grid: int = 401
    dt_pde: float = 1e-3

    id = "Problem"
    names: tuple[str, ...] = ()

    def __post_init__(self):
        lo, hi = self.support
        if not 0 <= lo < hi:
            raise ValueError("support must be a compact subset of the nonnegative reals")

    @property
    def n_par(self) -> int:
        return len(self.names)

    def params(self, phi) -> MetaParams:
        return MetaParams(self.names, phi)

    def grid(self) -> Grid:
        return make_grid(*self.support, self.n_grid)

    def coefficients(self, phi) -> CoefficientField:
        raise NotImplementedError

    def initial_cdf(self, phi, grid: Grid) -> np.ndarray:
        raise NotImplementedError

    def constraints(self) -> tuple[np.ndarray, np.ndarray]:
        """Linear feasibility constraints ``A @ phi >= b``."""
        raise NotImplementedError

    def feasible(self, phi) -> bool:
        phi = np.asarray(phi, dtype=float)
        if phi.shape != (self.n_par,) or not np.all(np.isfinite(phi)):
            return False
        a, b = self.constraints()
        return bool(np.all(a @ phi >= b - 1e-12))

    def project(self, phi) -> np.ndarray:
        """Nearest feasible point (Euclidean) via cyclic half-space projections."""
        phi = np.array(phi, dtype=float)
        a, b = self.constraints()
        for _ in range(100):
            viol = a @ phi - b
            if np.all(viol >= -1e-12):
                break
            for ai, bi in zip(a, b):
                gap = ai @ phi - bi
                if gap < 0:
                    phi = phi - gap * ai / (ai @ ai)
        return phi

    def max_step(self, phi, direction) -> float:
        """Largest ``alpha`` keeping ``phi + alpha * direction`` feasible."""
        a, b = self.constraints()
        rate = a @ direction
        slack = a @ phi - b
        with np.errstate(divide="ignore", invalid="ignore"):
            limits = np.where(rate < 0, slack / -rate, np.inf)
        return float(max(np.min(limits), 0.0))

    def simulate(self, rng, n_paths: int, times: np.ndarray, dt: float) -> np.ndarray:
        raise NotImplementedError

    def true_params(self) -> np.ndarray:
        return np.asarray(self.truth.truth, dtype=float)


def _positivity(n_par: int) -> tuple[np.ndarray, np.ndarray]:
    return np.eye(n_par), np.full(n_par, POSITIVE_MARGIN)


@dataclass(frozen=True)
class RandomInitProblem(Problem):
    id = "RandomInit"
    names: tuple[str, ...] = ("mu0", "sigma0")

    def coefficients(self, phi=None) -> CoefficientField:
        return case1_coefficients(phi)

    def initial_cdf(self, phi, grid: Grid) -> np.ndarray:
        mu, sigma = (float(v) for v in phi)
        cdf, _, _ = truncated_gaussian_cdf(grid.nodes, mu, sigma, *self.support)
        cdf[0], cdf[-1] = 0.0, 1.0
        return cdf

    def constraints(self):
        a, b = _positivity(2)
        lo, hi = self.support
        # mu0 - 3 sigma0 >= x_min keeps x0 inside the support almost surely
        a = np.vstack([a, [1.0, -FEASIBILITY_SIGMAS], [-1.0, 0.0]])
        b = np.concatenate([b, [lo, -hi]])
        return a, b

    def state_support(self, t: float) -> tuple[float, float]:
        lo, hi = self.support
        return lo / (1.0 + 2.0 * lo * t), hi / (1.0 + 2.0 * hi * t)

    def simulate(self, rng, n_paths, times, dt):
        x0 = self.truth.truth[0]
        return np.broadcast_to(x0 / (1.0 + 2.0 * x0 * times), (n_paths, times.size)).copy()


@dataclass(frozen=True)
class WhiteNoiseProblem(Problem):
    id = "WhiteNoise"
    names: tuple[str, ...] = ("mu_a", "sigma_a")

    def coefficients(self, phi) -> CoefficientField:
        return case2_coefficients(phi)

    def initial_cdf(self, phi, grid: Grid) -> np.ndarray:
        return smoothed_heaviside(self.truth.x0, grid)

    def constraints(self):
        a, b = _positivity(2)
        a = np.vstack([a, [1.0, -FEASIBILITY_SIGMAS]])
        return a, np.concatenate([b, [0.0]])

    def simulate(self, rng, n_paths, times, dt):
        mu, sigma = self.true_params()
        x = np.full(n_paths, self.truth.x0, dtype=float)
        out = np.empty((n_paths, times.size))
        t = 0.0
        for k, t_rec in enumerate(times):
            nsub = max(1, math.ceil((t_rec - t) / dt - 1e-9)) if t_rec > t else 0
            if nsub:
                h = (t_rec - t) / nsub
                # exact Ito log-normal transition over each substep
                drift = -(mu + 0.5 * sigma * sigma) * h
                kick = sigma * math.sqrt(h)
                for _ in range(nsub):
                    x = x * np.exp(drift - kick * rng.standard_normal(n_paths))
                t = t_rec
            out[:, k] = x
        return out


@dataclass(frozen=True)
class ColoredNoiseProblem(Problem):
    id = "ColoredNoise"
    names: tuple[str, ...] = ("mu_a", "sigma_a", "theta_a")

    def coefficients(self, phi) -> CoefficientField:
        return case3_coefficients(phi)

    def initial_cdf(self, phi, grid: Grid) -> np.ndarray:
        return smoothed_heaviside(self.truth.x0, grid)

    def constraints(self):
        a, b = _positivity(3)
        a = np.vstack([a, [1.0, -FEASIBILITY_SIGMAS, 0.0]])
        return a, np.concatenate([b, [0.0]])

    def simulate(self, rng, n_paths, times, dt):
        return simulate_ou_state(self.true_params(), self.truth.x0, rng, n_paths, times, dt)[1]


def simulate_ou_state(phi, x0, rng, n_paths, times, dt):
    """Exact OU updates for ``w`` and trapezoidal path-wise integration of x.

    ``w(0) ~ N(0, sigma^2 / theta)`` so that the covariance of ``w`` carries the
    ``exp(-theta (t + tau))`` transient.  Returns ``(w, x)`` at ``times``.
    """
    mu, sigma, theta = (float(v) for v in phi)
    w = rng.standard_normal(n_paths) * sigma / math.sqrt(theta)
    logx = np.full(n_paths, math.log(x0))
    w_out = np.empty((n_paths, times.size))
    x_out = np.empty((n_paths, times.size))
    t = 0.0
    for k, t_rec in enumerate(times):
        if t_rec > t:
            nsub = max(1, math.ceil((t_rec - t) / dt - 1e-9))
            h = (t_rec - t) / nsub
            decay = math.exp(-theta * h)
            kick = sigma * math.sqrt(-math.expm1(-2.0 * theta * h) / (2.0 * theta))
            for _ in range(nsub):
                w_next = w * decay + kick * rng.standard_normal(n_paths)
                logx -= h * (mu + 0.5 * (w + w_next))
                w = w_next
            t = t_rec
        w_out[:, k] = w
        x_out[:, k] = np.exp(logx)
    return w_out, x_out


PROBLEMS = {
    "RandomInit": RandomInitProblem,
    "WhiteNoise": WhiteNoiseProblem,
    "ColoredNoise": ColoredNoiseProblem,
}
ALIASES = {"case1": "RandomInit", "case2": "WhiteNoise", "case3": "ColoredNoise"}

# reference experiment settings per problem
DEFAULTS = {
    "RandomInit": dict(
        truth=TruthConfig(truth=(0.954,), n_meas=10, t_final=2.0, sigma_eps=0.1),
        prior=(0.5, 0.15),
        eps_kl=1e-3,
        support=(0.0, 2.0),
        n_grid=1001,
    ),
    "WhiteNoise": dict(
        truth=TruthConfig(truth=(0.44, 0.088), n_meas=10, t_final=2.0, sigma_eps=0.1, x0=1.0),
        prior=(1.25, 0.2),
        eps_kl=1e-2,
        support=(0.0, 2.0),
        n_grid=801,
    ),
    "ColoredNoise": dict(
        truth=TruthConfig(truth=(0.5, 0.1, 0.05), n_meas=41, t_final=2.2, sigma_eps=0.05, x0=1.0),
        prior=(1.5, 0.4, 0.14),
        eps_kl=1e-2,
        support=(0.0, 4.0),
        n_grid=801,
    ),
}


def make_problem(problem_id: str, seed: int | None = None, **overrides) -> Problem:
    """Build a problem with the reference settings, optionally overridden.

    Truth fields (``n_meas``, ``t_final``, ``sigma_eps``, ``x0``, ``truth``)
    may be passed directly and are folded into the :class:`TruthConfig`.
    """
    key = ALIASES.get(problem_id, problem_id)
    if key not in PROBLEMS:
        raise ValueError(f"unknown problem {problem_id!r}; choose from {sorted(PROBLEMS)}")
    kw = dict(DEFAULTS[key])
    truth_fields = {k: overrides.pop(k) for k in list(overrides) if k in TruthConfig.__dataclass_fields__}
    if seed is not None:
        truth_fields["seed"] = seed
    if "truth" in truth_fields:
        truth_fields["truth"] = tuple(float(v) for v in truth_fields["truth"])
    kw["truth"] = replace(kw["truth"], **truth_fields)
    kw.update(overrides)
    if "prior" in kw:
        kw["prior"] = tuple(float(v) for v in kw["prior"])
    return PROBLEMS[key](**kw)


def feasibility(problem: Problem, phi) -> bool:
    return problem.feasible(phi)


# ---------------------------------------------------------------------------
# truth and data


def simulate_truth(
    problem: Problem,
    seed: int | None = None,
    n_paths: int = 1,
    dt: float = 1e-4,
    times=None,
) -> Trajectory:
    """Sample paths of the physical model under the true parameters.

    By default the path is recorded on a 201-point uniform grid over
    ``[0, t_final]`` merged with the observation times.
    """
    cfg = problem.truth
    seed = cfg.seed if seed is None else seed
    if times is None:
        times = np.union1d(np.linspace(0.0, cfg.t_final, 201), cfg.obs_times)
    times = np.asarray(times, dtype=float)
    rng = np.random.default_rng([seed, 0])
    return Trajectory(times, problem.simulate(rng, n_paths, times, dt))


def generate_observations(trajectory: Trajectory, config: TruthConfig, seed: int | None = None) -> ObservationSet:
    """Noisy samples ``x(t_m) + eps_m`` at ``t_m = m * t_final / (n_meas + 1)``."""
    seed = config.seed if seed is None else seed
    times = config.obs_times
    if times.size and times[-1] > trajectory.times[-1] + 1e-12:
        raise ValueError("trajectory does not cover the observation window")
    clean = trajectory.at(times)
    noise = np.random.default_rng([seed, 1]).standard_normal(times.size) * config.sigma_eps
    return ObservationSet(times, clean + noise, config.sigma_eps)


# ---------------------------------------------------------------------------
# closed-form results for RandomInit


def case1_characteristic(x0, t):
    return x0 / (1.0 + 2.0 * x0 * t)


def _case1_backtrack(x, t, hi):
    """Initial state reaching ``x`` at time ``t``; ``inf`` past the horizon."""
    den = 1.0 - 2.0 * x * t
    with np.errstate(divide="ignore", invalid="ignore"):
        x0 = np.where(den > 0, x / np.where(den > 0, den, 1.0), np.inf)
    return np.where(x0 > hi, np.inf, x0), den


def case1_analytic_cdf(problem: RandomInitProblem, phi, t: float, grid: Grid, with_grads: bool = False):
    """CDF of ``x(t)`` by the method of characteristics, ``F(X; t) = F0(X / (1 - 2 X t))``."""
    mu, sigma = (float(v) for v in phi)
    lo, hi = problem.support
    x0, _ = _case1_backtrack(grid.nodes, t, hi)
    inside = np.isfinite(x0)
    cdf = np.ones(grid.n)
    d_mu = np.zeros(grid.n)
    d_sig = np.zeros(grid.n)
    c, dm, ds = truncated_gaussian_cdf(x0[inside], mu, sigma, lo, hi)
    cdf[inside], d_mu[inside], d_sig[inside] = c, dm, ds
    below = grid.nodes <= lo
    cdf[below], d_mu[below], d_sig[below] = 0.0, 0.0, 0.0
    cdf[0], cdf[-1] = 0.0, 1.0
    d_mu[[0, -1]] = 0.0
    d_sig[[0, -1]] = 0.0
    if with_grads:
        return cdf, np.stack([d_mu, d_sig], axis=1)
    return cdf


def case1_exact_posterior(prior: DiscretizedDistribution, observations: ObservationSet) -> DiscretizedDistribution:
    """Posterior over the initial state given all observations at once."""
    x0 = prior.x
    with np.errstate(divide="ignore"):
        log_post = np.log(prior.pdf)
    for t, xh in zip(observations.times, observations.values):
        pred = case1_characteristic(x0, t)
        log_post = log_post - 0.5 * ((xh - pred) / observations.sigma) ** 2
    finite = np.isfinite(log_post)
    if not np.any(finite):
        raise NumericalError("posterior normalization vanished: observations incompatible with the prior")
    weights = np.where(finite, np.exp(log_post - np.max(log_post[finite])), 0.0)
    return from_pdf(prior.grid, weights)
