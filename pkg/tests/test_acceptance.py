"""End-to-end acceptance checks, one test per criterion.

Each test prints a single ``CRITERION <n> PASS|FAIL: ...`` line to the
terminal (run with ``pytest -v tests/test_acceptance.py``).  Stochastic
experiments use seed 0 unless the criterion is itself statistical.
"""

import json
from pathlib import Path

import numpy as np
import pytest

from damd.assimilate import LossSpec, Objective, assimilate_window, loss, observational_posterior
from damd.cli import oracle_report
from damd.dist import from_cdf, gaussian_cdf_on_grid, make_grid
from damd.geometry import AnalyticForecaster, FVForecaster, fisher_matrix, gradient_field, param_gradients_fd, wasserstein_matrix
from damd.metrics import kl, l2_cdf, wasserstein
from damd.models import (
    case1_analytic_cdf,
    case3_colored_integral,
    case3_colored_integral_quad,
    generate_observations,
    make_problem,
    simulate_truth,
)
from damd.pde import SolverConfig, solve

DATA = Path(__file__).parent / "data"
SEED = 0


@pytest.fixture
def report(capsys):
    def emit(n, ok, detail):
        with capsys.disabled():
            print(f"\nCRITERION {n} {'PASS' if ok else 'FAIL'}: {detail}")
        assert ok, detail

    return emit


def window(problem_id, seed=SEED, **kw):
    p = make_problem(problem_id, seed=seed, **kw)
    return p, generate_observations(simulate_truth(p), p.truth)


def test_criterion_1_metric_closed_forms(report):
    rng = np.random.default_rng(SEED)
    g = make_grid(0, 2, 401)
    worst_kl = worst_w2 = 0.0
    for _ in range(50):
        m1, s1 = rng.uniform(0.8, 1.2), rng.uniform(0.05, 0.16)
        m2 = np.clip(m1 + rng.uniform(-0.15, 0.15), 0.8, 1.2)
        s2 = min(s1 * rng.uniform(0.75, 1.33), 0.16)
        a, b = gaussian_cdf_on_grid(m1, s1, g), gaussian_cdf_on_grid(m2, s2, g)
        exact_kl = np.log(s2 / s1) + (s1**2 + (m1 - m2) ** 2) / (2 * s2**2) - 0.5
        worst_kl = max(worst_kl, abs(kl(a, b) - exact_kl))
        worst_w2 = max(worst_w2, abs(wasserstein(a, b) - np.hypot(m1 - m2, s1 - s2)))
    report(1, max(worst_kl, worst_w2) <= 1e-3, f"50 pairs, max |KL err| {worst_kl:.2e}, max |W2 err| {worst_w2:.2e} (tol 1e-3)")


def _gaussian(mu, sigma, g):
    from scipy.stats import norm

    z = (g.nodes - mu) / sigma
    cdf = norm.cdf(z)
    cdf[0], cdf[-1] = 0.0, 1.0
    dF = np.stack([-norm.pdf(z) / sigma, -z * norm.pdf(z) / sigma], axis=1)
    f, field = gradient_field(g, cdf, dF, "analytic")
    return from_cdf(g, cdf), field


def test_criterion_2_geometry_closed_forms(report):
    rng = np.random.default_rng(SEED)
    p = make_problem("case1", n_grid=801)
    g = p.grid()
    worst_an = worst_fd = 0.0
    for _ in range(10):
        mu, sigma = rng.uniform(0.8, 1.2), rng.uniform(0.05, 0.15)
        expect_f = np.diag([1 / sigma**2, 2 / sigma**2])
        dist, field = _gaussian(mu, sigma, g)
        fd = param_gradients_fd(p, (mu, sigma), 0.0, g)
        for grads, kind in ((field, "an"), (fd, "fd")):
            ef = np.max(np.abs(fisher_matrix(dist, grads).matrix - expect_f) / np.diag(expect_f)[:, None])
            ew = np.max(np.abs(wasserstein_matrix(dist, grads).matrix - np.eye(2)))
            if kind == "an":
                worst_an = max(worst_an, ef, ew)
            else:
                worst_fd = max(worst_fd, ef, ew)
    ok = worst_an <= 0.01 and worst_fd <= 0.03
    report(2, ok, f"10 Gaussians, analytic rel err {worst_an:.2e} (tol 1%), FD rel err {worst_fd:.2e} (tol 3%)")


def test_criterion_3_gradient_oracle(report):
    p, obs = window("case1")
    fc = AnalyticForecaster(p)
    t = obs.times[0]
    prior, _ = fc.forecast(p.prior, t)
    target = observational_posterior(prior, obs.values[0], obs.sigma)
    worst = 0.0
    for kind in ("KL", "W2"):
        spec = LossSpec(kind)
        grad = Objective(fc, t, target, spec).grad(p.prior)
        for i in range(2):
            h = 1e-6
            e = np.zeros(2)
            e[i] = h
            fd = (loss(np.add(p.prior, e), spec, fc, t, target) - loss(np.subtract(p.prior, e), spec, fc, t, target)) / (2 * h)
            worst = max(worst, abs(grad[i] - fd) / abs(fd))
    report(3, worst <= 1e-3, f"case 1, m=1, KL and W2, max rel err {worst:.2e} (tol 1e-3)")


def test_criterion_4_forward_models(report):
    p1 = make_problem("case1", n_grid=12801)
    g1 = p1.grid()
    phi = p1.prior
    fv = solve(p1, phi, g1, SolverConfig(dt=2.5e-4, times=(2.0,)))[-1]
    e1 = float(np.max(np.abs(fv.cdf - case1_analytic_cdf(p1, phi, 2.0, g1))))

    p2 = make_problem("case2")
    g2 = p2.grid()
    fv2 = solve(p2, p2.true_params(), g2, SolverConfig(dt=p2.dt_pde, times=(2.0,)))[-1]
    paths = simulate_truth(p2, seed=SEED, n_paths=100_000, times=np.array([2.0])).values[:, 0]
    emp = np.searchsorted(np.sort(paths), g2.nodes, side="right") / paths.size
    emp[0], emp[-1] = 0.0, 1.0
    e2 = l2_cdf(fv2, from_cdf(g2, np.maximum.accumulate(emp)))

    phi3 = (0.5, 0.1, 0.05)
    e3 = max(abs(case3_colored_integral(phi3, t) - case3_colored_integral_quad(phi3, t)) for t in np.linspace(0, 2.2, 23))
    ok = e1 <= 1e-2 and e2 <= 2e-2 and e3 <= 1e-10
    report(4, ok, f"case1 sup {e1:.2e} (1e-2), case2 d2 vs 1e5-path MC {e2:.2e} (2e-2), case3 I_w {e3:.1e} (1e-10)")


def test_criterion_5_case1_posterior(report, tmp_path):
    p, obs = window("case1")
    rep = oracle_report({}, p, obs, tmp_path)
    lines, ok = [], True
    for name, v in rep["variants"].items():
        good = 0.8 <= v["mean"] <= 1.1 and v["std"] <= 0.12
        ok &= good
        lines.append(f"{name} mean {v['mean']:.3f} sd {v['std']:.3f}")
    ngd = rep["variants"]["KL-NGD"]
    close = ngd["rel_err_mean"] <= 0.05 and ngd["rel_err_std"] <= 0.05
    ok &= close
    o = rep["oracle"]
    detail = "; ".join(lines) + f"; oracle mean {o['mean']:.3f} sd {o['std']:.3f}; NGD-KL rel err {ngd['rel_err_mean']:.3f}/{ngd['rel_err_std']:.3f}"
    report(5, ok, detail)


def test_criterion_6_iteration_counts(report):
    wins = []
    for seed in range(10):
        p, obs = window("case1", seed=seed)
        fc = AnalyticForecaster(p)
        ngd = assimilate_window(p, obs, spec="KL", method="NGD", forecaster=fc).total_iterations
        gd = assimilate_window(p, obs, spec="KL", method="GD", forecaster=fc).total_iterations
        wins.append((ngd, gd))
    n = sum(a < b for a, b in wins)
    report(6, n >= 8, f"NGD-KL < GD-KL summed iterations on {n}/10 seeds: {wins}")


def test_criterion_7_case2(report):
    p, obs = window("case2")
    fc = FVForecaster(p)
    ok, parts = True, []
    for spec in ("KL", "W2"):
        for method in ("GD", "NGD"):
            tr = assimilate_window(p, obs, spec=spec, method=method, forecaster=fc)
            mu, sig = tr.phi
            good = abs(mu - 0.44) <= 0.2 * 0.44 and 0 < sig < 0.2
            ok &= good
            parts.append(f"{spec}-{method} ({mu:.3f}, {sig:.4f})")
    report(7, ok, "; ".join(parts) + " vs mu_a* 0.44 (+-20%), 0 < sigma_a < 0.2")


def test_criterion_8_case3(report):
    p, obs = window("case3")
    fc = FVForecaster(p)
    target = np.sqrt(0.1**2 / (2 * 0.05))
    ok, parts = True, []
    for method in ("GD", "NGD"):
        tr = assimilate_window(p, obs, spec="W2", method=method, forecaster=fc)
        mu, sig, th = tr.phi
        sig_t = np.sqrt(sig**2 / (2 * th))
        mus = tr.phis[20:, 0]
        ok &= abs(mu - 0.5) <= 0.1 and abs(sig_t - target) <= 0.4 * target and bool(np.all(np.abs(mus - 0.5) <= 0.1))
        parts.append(f"W2-{method} phi_41 = ({mu:.3f}, {sig:.3f}, {th:.3f}), sigma~ {sig_t:.3f}, mu_a after step 20 in [{mus.min():.3f}, {mus.max():.3f}]")
    report(8, ok, "; ".join(parts) + f" vs mu_a* 0.5 (+-20%), sigma~* {target:.3f} (+-40%)")


def test_criterion_9_surrogate(report):
    from damd.surrogate import (
        SurrogateForecaster,
        TrainingCounts,
        geometry_gate,
        load_checkpoint,
        loss_terms,
        sample_training_set,
    )

    cfg = json.loads((DATA / "case2_surrogate.json").read_text())
    sc = cfg["surrogate"]
    ckpt = DATA.parent.parent / sc["checkpoint"]
    if not ckpt.exists():
        report(9, False, f"no trained network at {ckpt}; train one with `damd surrogate train --config tests/data/case2_surrogate.json`")
    net, _ = load_checkpoint(ckpt)
    p, obs = window("case2", seed=cfg["seed"])
    counts = TrainingCounts(**sc["counts"]) if "counts" in sc else TrainingCounts()
    ts = sample_training_set(p, sc["phi_box"], counts, seed=cfg["seed"])
    total = float(loss_terms(net, ts)["total"].detach())
    fv = FVForecaster(p)
    gate = geometry_gate(net, p, sc["gate_phi"], tuple(sc["gate_times"]), fv=fv)
    fd = assimilate_window(p, obs, spec="W2", method="NGD", forecaster=fv)
    sur = assimilate_window(p, obs, spec="W2", method="NGD", forecaster=SurrogateForecaster(net, p, base=fv))
    rel = float(np.max(np.abs(sur.phi - fd.phi) / np.abs(fd.phi)))
    worst_gate = max(gate.fisher_errors + gate.wasserstein_errors)
    ok = total <= 4e-3 and gate.passed and rel <= 0.05
    report(9, ok, f"total loss {total:.2e} (<= 4e-3), gate worst rel Frobenius {worst_gate:.3f} (<= 0.05), surrogate vs FD phi rel diff {rel:.3f} (<= 0.05)")


def test_criterion_10_robustness_asymmetry(report):
    fixture = json.loads((DATA / "robustness_case2.json").read_text())
    p, obs = window("case2", seed=fixture["seed"], prior=fixture["prior"])
    fc = FVForecaster(p)
    kl_tr = assimilate_window(p, obs, spec="KL", method=fixture["method"], forecaster=fc)
    w2_tr = assimilate_window(p, obs, spec="W2", method=fixture["method"], forecaster=fc)
    capped = [s.m for s in kl_tr.steps if s.n_iter >= 200 and not s.converged]
    ok = bool(capped) and w2_tr.converged
    report(10, ok, f"prior {fixture['prior']}: KL-{fixture['method']} hits the 200-iteration cap at steps {capped}; W2 converged={w2_tr.converged}")
