import numpy as np
import pytest
from scipy.stats import norm

from damd.assimilate import (
    LossSpec,
    Objective,
    OptimizerConfig,
    assimilate_window,
    descent_direction,
    loss,
    loss_gradient,
    loss_value,
    minimize_step,
    observational_posterior,
    pair_thresholds,
    paired_eps,
    update_step,
)
from damd.dist import DiscretizedDistribution, from_pdf, gaussian_cdf_on_grid, make_grid, trapezoid
from damd.errors import NumericalError
from damd.geometry import AnalyticForecaster, FVForecaster, gradient_field
from damd.models import generate_observations, make_problem, simulate_truth


def moments(d):
    m = trapezoid(d.x * d.pdf, d.grid)
    return m, np.sqrt(trapezoid((d.x - m) ** 2 * d.pdf, d.grid))


class GaussianForecaster:
    """Untruncated Gaussian family in (mu, sigma) with exact sensitivities."""

    source = "analytic"

    def __init__(self, grid):
        self.grid = grid

    def forecast(self, phi, t, grads=False):
        mu, sigma = phi
        z = (self.grid.nodes - mu) / sigma
        cdf = norm.cdf(z)
        cdf[0], cdf[-1] = 0.0, 1.0
        dF = np.stack([-norm.pdf(z) / sigma, -z * norm.pdf(z) / sigma], axis=1)
        f, field = gradient_field(self.grid, cdf, dF, self.source)
        return DiscretizedDistribution(self.grid, cdf, f), (field if grads else None)


@pytest.fixture(scope="module")
def case1():
    p = make_problem("case1", seed=0)
    obs = generate_observations(simulate_truth(p), p.truth)
    return p, obs, AnalyticForecaster(p)


def first_target(p, obs, fc):
    prior, _ = fc.forecast(p.prior, obs.times[0])
    return observational_posterior(prior, obs.values[0], obs.sigma)


def test_observational_posterior_examples():
    g = make_grid(0, 2, 801)
    prior = gaussian_cdf_on_grid(1.0, 0.2, g)
    wide = observational_posterior(prior, 1.2, 1e6)
    assert np.max(np.abs(wide.pdf - prior.pdf)) <= 1e-6
    flat = from_pdf(g, np.ones(g.n))
    post = observational_posterior(flat, 1.2, 0.1)
    lik = norm.pdf(g.nodes, 1.2, 0.1)
    assert np.max(np.abs(post.pdf - lik / trapezoid(lik, g))) <= 1e-6
    conj = observational_posterior(prior, 1.2, 0.1)
    m, s = moments(conj)
    assert m == pytest.approx(1.16, abs=1e-3)
    assert s == pytest.approx(0.08944, abs=1e-3)
    assert conj.cdf[0] == 0.0 and conj.cdf[-1] == 1.0
    narrow = from_pdf(g, np.where(g.nodes < 0.4, 1.0, 0.0))
    with pytest.raises(NumericalError):
        observational_posterior(narrow, 1.9, 0.01)
    with pytest.raises(ValueError):
        observational_posterior(prior, 1.0, 0.0)


def test_loss_examples(case1):
    p, obs, fc = case1
    target = first_target(p, obs, fc)
    t = obs.times[0]
    for kind in ("KL", "W2"):
        v = loss(p.prior, LossSpec(kind), fc, t, target)
        assert np.isfinite(v) and v > 0
    same, _ = fc.forecast(p.prior, t)
    assert loss_value(LossSpec("KL"), same, same) == pytest.approx(0.0, abs=1e-12)
    assert loss_value(LossSpec("W2"), same, same) == pytest.approx(0.0, abs=1e-12)
    with pytest.raises(ValueError):
        LossSpec("L1")


def test_w2_loss_grid_convergence():
    p = make_problem("case1", seed=0)
    obs = generate_observations(simulate_truth(p), p.truth)
    vals = []
    for n in (401, 801):
        fc = AnalyticForecaster(p, n=n)
        vals.append(loss((0.7, 0.12), LossSpec("W2"), fc, obs.times[0], first_target(p, obs, fc)))
    assert abs(vals[0] - vals[1]) <= 1e-3


def test_loss_landscape_single_basin(case1):
    p, obs, fc = case1
    target = first_target(p, obs, fc)
    t = obs.times[0]
    mus = np.linspace(0.3, 1.2, 21)
    sigmas = np.linspace(0.02, 0.3, 21)
    for kind in ("KL", "W2"):
        spec = LossSpec(kind)
        grid = np.full((21, 21), np.nan)
        for i, mu in enumerate(mus):
            for j, s in enumerate(sigmas):
                if p.feasible((mu, s)):
                    grid[i, j] = loss((mu, s), spec, fc, t, target)
        # a single interior basin: exactly one strict local minimum among feasible cells
        minima = 0
        for i in range(21):
            for j in range(21):
                v = grid[i, j]
                if np.isnan(v):
                    continue
                nb = grid[max(i - 1, 0) : i + 2, max(j - 1, 0) : j + 2]
                if v <= np.nanmin(nb):
                    minima += 1
        assert minima == 1, kind


@pytest.mark.parametrize("kind", ["KL", "W2"])
@pytest.mark.parametrize("phi", [(0.5, 0.15), (0.8, 0.1)])
def test_gradient_matches_finite_differences(case1, kind, phi):
    p, obs, fc = case1
    target = first_target(p, obs, fc)
    t = obs.times[0]
    spec = LossSpec(kind)
    g = loss_gradient(phi, spec, fc, t, target)
    for i in range(2):
        h = 1e-6 * max(1.0, abs(phi[i]))
        e = np.zeros(2)
        e[i] = h
        fd = (loss(np.add(phi, e), spec, fc, t, target) - loss(np.subtract(phi, e), spec, fc, t, target)) / (2 * h)
        assert g[i] == pytest.approx(fd, rel=1e-3)


def test_gradient_vanishes_at_minimum(case1):
    p, obs, fc = case1
    t = obs.times[0]
    phi = (0.7, 0.12)
    target, _ = fc.forecast(phi, t)
    for kind in ("KL", "W2"):
        assert np.max(np.abs(loss_gradient(phi, LossSpec(kind), fc, t, target))) <= 1e-6


def test_location_family_w2_gradient():
    g = make_grid(0, 2, 1601)
    fc = GaussianForecaster(g)
    target, _ = fc.forecast((1.1, 0.1), 0.0)
    grad = loss_gradient((0.95, 0.1), LossSpec("W2"), fc, 0.0, target)
    assert grad[0] == pytest.approx(0.95 - 1.1, abs=1e-3)


def test_paired_thresholds():
    assert paired_eps(1e-3, 1.0, 0.01) == pytest.approx(1e-5)
    assert paired_eps(1e-3, 0.3, 0.3) == pytest.approx(1e-3)
    assert paired_eps(1e-3, 0.0, 0.3) == 1e-3


def test_pair_thresholds_reference_run(case1):
    p, obs, fc = case1
    eps_w2 = pair_thresholds(p.eps_kl, fc, p.prior, obs.times[0], obs.values[0], obs.sigma)
    assert np.isfinite(eps_w2) and eps_w2 > 0
    tr = assimilate_window(p, obs.head(3), spec="W2", method="NGD", forecaster=fc)
    assert tr.eps == pytest.approx(eps_w2)
    assert tr.converged


def test_update_step_zero_gradient(case1):
    p, obs, fc = case1
    t = obs.times[0]
    target, _ = fc.forecast((0.7, 0.12), t)
    obj = Objective(fc, t, target, LossSpec("KL"))
    obj.evaluate = lambda phi: (0.0, np.zeros(2), *fc.forecast(phi, t, grads=True))
    out = update_step((0.7, 0.12), obj, p, "NGD")
    assert out.success and np.array_equal(out.phi, [0.7, 0.12])


def test_failed_line_search_charges_the_cap(case1):
    p, obs, fc = case1
    t = obs.times[0]
    obj = Objective(fc, t, first_target(p, obs, fc), LossSpec("KL"))
    true_eval = obj.evaluate

    def flipped(phi):
        value, grad, f, grads = true_eval(phi)
        return value, -grad, f, grads

    obj.evaluate = flipped
    phi, _, _, n_iter, converged, failed, _ = minimize_step(p.prior, obj, p, OptimizerConfig(method="GD", max_iter=50), 1e-6)
    assert failed and not converged and n_iter == 50
    assert np.array_equal(phi, p.prior)


def test_ngd_direction_is_descent(case1):
    p, obs, fc = case1
    target = first_target(p, obs, fc)
    t = obs.times[0]
    for kind in ("KL", "W2"):
        spec = LossSpec(kind)
        for phi in [(0.5, 0.15), (0.7, 0.05), (1.0, 0.3)]:
            value, grad, f, grads = Objective(fc, t, target, spec).evaluate(phi)
            d = descent_direction("NGD", spec, grad, f, grads)
            assert grad @ d < 0


def test_ngd_equals_gd_under_euclidean_w2_geometry():
    g = make_grid(0, 2, 1601)
    fc = GaussianForecaster(g)
    p = make_problem("case1")
    target, _ = fc.forecast((1.1, 0.12), 0.0)
    spec = LossSpec("W2")
    phi = np.array([0.95, 0.1])
    value, grad, f, grads = Objective(fc, 0.0, target, spec).evaluate(phi)
    d_gd = descent_direction("GD", spec, grad, f, grads)
    d_ngd = descent_direction("NGD", spec, grad, f, grads)
    assert np.linalg.norm(d_ngd - d_gd) <= 0.01 * np.linalg.norm(d_gd)
    gd = update_step(phi, Objective(fc, 0.0, target, spec), p, "GD")
    ngd = update_step(phi, Objective(fc, 0.0, target, spec), p, "NGD")
    assert np.linalg.norm(ngd.phi - gd.phi) <= 0.01 * np.linalg.norm(gd.phi - phi)


def test_accepted_steps_never_increase_loss(case1):
    p, obs, fc = case1
    target = first_target(p, obs, fc)
    t = obs.times[0]
    for kind in ("KL", "W2"):
        for method in ("GD", "NGD"):
            obj = Objective(fc, t, target, LossSpec(kind))
            phi = np.array(p.prior)
            value = obj.value(phi)
            state = {}
            for _ in range(5):
                out = update_step(phi, obj, p, method, state=state)
                assert out.value <= value + 1e-15
                assert p.feasible(out.phi)
                phi, value = out.phi, out.value


def test_empty_window(case1):
    p, obs, fc = case1
    tr = assimilate_window(p, obs.head(0), forecaster=fc)
    assert len(tr) == 0 and np.array_equal(tr.phi, p.prior)
    with pytest.raises(ValueError):
        assimilate_window(p, obs, phi0=(0.3, 0.15), forecaster=fc)


def test_bayes_consistency(case1):
    p, obs, fc = case1
    target = first_target(p, obs, fc)
    before = loss(p.prior, LossSpec("KL"), fc, obs.times[0], target)
    tr = assimilate_window(p, obs.head(1), spec="KL", method="NGD", forecaster=fc)
    after = loss(tr.phi, LossSpec("KL"), fc, obs.times[0], target)
    assert after <= 0.5 * before


def test_uncertainty_contracts(case1):
    p, obs, fc = case1
    tr = assimilate_window(p, obs, spec="KL", method="NGD", forecaster=fc)
    sig = tr.phis[:, 1]
    assert np.sum(np.diff(sig) <= 0) >= 8


class SquaredScale:
    """The random-initial-state problem in (mu0, sigma0^2) coordinates."""

    def __init__(self, problem, forecaster):
        self.base = problem
        self.fc = forecaster

    @staticmethod
    def to_phi(psi):
        return np.array([psi[0], np.sqrt(psi[1])]) if psi[1] > 0 else np.array([psi[0], -1.0])

    def feasible(self, psi):
        return self.base.feasible(self.to_phi(psi))

    def project(self, psi):
        raise AssertionError("iterates should stay feasible")

    def max_step(self, psi, d):
        hi = 10.0
        if self.feasible(psi + hi * d):
            return hi
        lo = 0.0
        for _ in range(60):
            mid = 0.5 * (lo + hi)
            lo, hi = (mid, hi) if self.feasible(psi + mid * d) else (lo, mid)
        return lo

    def forecast(self, psi, t, grads=False):
        phi = self.to_phi(psi)
        dist, field = self.fc.forecast(phi, t, grads=grads)
        if not grads:
            return dist, None
        chain = np.array([1.0, 0.5 / phi[1]])
        _, out = gradient_field(dist.grid, dist.cdf, field.dF * chain, "analytic")
        return dist, out


def test_ngd_kl_reparameterization_invariance(case1):
    p, obs, fc = case1
    target = first_target(p, obs, fc)
    t = obs.times[0]
    sq = SquaredScale(p, fc)
    psi0 = np.array([p.prior[0], p.prior[1] ** 2])
    gaps = {}
    for method in ("NGD", "GD"):
        cfg = OptimizerConfig(method=method, max_iter=3)
        phi, v_phi, *_ = minimize_step(p.prior, Objective(fc, t, target, LossSpec("KL")), p, cfg, 1e-12)
        psi, v_psi, *_ = minimize_step(psi0, Objective(sq, t, target, LossSpec("KL")), sq, cfg, 1e-12)
        gaps[method] = abs(v_phi - v_psi)
    assert gaps["NGD"] <= 1e-3
    assert gaps["GD"] > gaps["NGD"]


def test_trace_csv(case1, tmp_path):
    p, obs, fc = case1
    tr = assimilate_window(p, obs.head(2), spec="KL", method="NGD", forecaster=fc)
    tr.to_csv(tmp_path / "trace.csv")
    lines = (tmp_path / "trace.csv").read_text().splitlines()
    assert lines[0] == "m,mu0,sigma0,n_iter,loss,method,spec,converged"
    assert len(lines) == 3
    s = tr.summary()
    assert s["n_steps"] == 2 and s["total_iterations"] == tr.total_iterations


def test_fv_and_analytic_sources_agree(case1):
    p, obs, _ = case1
    small = obs.head(2)
    fa = assimilate_window(p, small, spec="KL", method="NGD", forecaster=AnalyticForecaster(p))
    fv = assimilate_window(p, small, spec="KL", method="NGD", forecaster=FVForecaster(make_problem("case1", n_grid=4001), dt=1e-3))
    assert np.allclose(fa.phi, fv.phi, rtol=0.05)
