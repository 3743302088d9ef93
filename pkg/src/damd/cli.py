"""Command-line experiment runner.

    damd generate   --config exp.json [--seed N] [--out DIR]
    damd assimilate --config exp.json [--method ngd] [--spec w2] [--grad fd]
                    (without --method/--spec, every entry of "variants" runs)
    damd sweep      --config exp.json
    damd oracle     --config exp.json
    damd surrogate  {train,eval} --config exp.json

Exit codes: 0 success, 1 I/O error, 2 invalid configuration or arguments,
3 numerical failure, 4 non-convergence (including a surrogate that fails its
admission gate).
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from pathlib import Path

import jsonschema
import numpy as np

from . import assimilate as asm
from .dist import from_cdf, write_distribution_csv
from .errors import NonConvergenceError, NumericalError
from .geometry import FVForecaster
from .metrics import kl
from .models import (
    ALIASES,
    PROBLEMS,
    ObservationSet,
    RandomInitProblem,
    case1_exact_posterior,
    generate_observations,
    make_problem,
    simulate_truth,
)

log = logging.getLogger("damd")

EXIT_OK, EXIT_IO, EXIT_INVALID, EXIT_NUMERICAL, EXIT_NONCONVERGED = 0, 1, 2, 3, 4

_vector = {"type": "array", "items": {"type": "number"}, "minItems": 1}
_counts = {
    "type": "object",
    "properties": {k: {"type": "integer", "minimum": 0} for k in ("n_phi", "n_t", "n_x", "r_t", "r_x", "r_phi", "aux_t", "aux_x", "aux_phi")}
    | {"holdout": {"type": "number", "minimum": 0, "exclusiveMaximum": 1}},
    "additionalProperties": False,
}

CONFIG_SCHEMA = {
    "type": "object",
    "required": ["problem"],
    "additionalProperties": False,
    "properties": {
        "problem": {"enum": sorted(PROBLEMS) + sorted(ALIASES)},
        "truth": _vector,
        "prior": _vector,
        "x0": {"type": "number", "exclusiveMinimum": 0},
        "sigma_eps": {"type": "number", "minimum": 0},
        "n_meas": {"type": "integer", "minimum": 0},
        "t_final": {"type": "number", "exclusiveMinimum": 0},
        "eps_kl": {"type": "number", "exclusiveMinimum": 0},
        "eps": {"type": "number", "exclusiveMinimum": 0},
        "max_iter": {"type": "integer", "minimum": 1},
        "spec": {"enum": ["KL", "W2", "kl", "w2"]},
        "method": {"enum": ["GD", "NGD", "gd", "ngd"]},
        "grad": {"enum": ["fd", "surrogate", "analytic", "auto"]},
        "seed": {"type": "integer", "minimum": 0},
        "out": {"type": "string"},
        "observations": {"type": "string"},
        "grid": {
            "type": "object",
            "properties": {
                "n": {"type": "integer", "minimum": 11},
                "support": {"type": "array", "items": {"type": "number"}, "minItems": 2, "maxItems": 2},
                "dt": {"type": "number", "exclusiveMinimum": 0},
            },
            "additionalProperties": False,
        },
        "variants": {
            "type": "array",
            "items": {"type": "array", "prefixItems": [{"enum": ["KL", "W2"]}, {"enum": ["GD", "NGD"]}], "minItems": 2, "maxItems": 2},
        },
        "sweep": {
            "type": "object",
            "required": ["axes"],
            "properties": {
                "axes": {
                    "type": "array",
                    "minItems": 2,
                    "maxItems": 2,
                    "items": {"type": "array", "prefixItems": [{"type": "number"}, {"type": "number"}, {"type": "integer", "minimum": 1}], "minItems": 3, "maxItems": 3},
                },
                "fixed": _vector,
                "step": {"type": "integer", "minimum": 1},
            },
            "additionalProperties": False,
        },
        "surrogate": {
            "type": "object",
            "properties": {
                "checkpoint": {"type": "string"},
                "phi_box": {"type": "array", "items": _vector, "minItems": 2, "maxItems": 2},
                "counts": _counts,
                "adam_iters": {"type": "integer", "minimum": 0},
                "lbfgs_iters": {"type": "integer", "minimum": 0},
                "gate_phi": _vector,
                "gate_times": _vector,
            },
            "additionalProperties": False,
        },
    },
}


class ConfigError(ValueError):
    pass


def validate_config(cfg) -> dict:
    """Schema check; every violation is reported with its JSON path."""
    validator = jsonschema.Draft202012Validator(CONFIG_SCHEMA)
    errors = sorted(validator.iter_errors(cfg), key=lambda e: list(e.absolute_path))
    if errors:
        lines = [f"$.{'.'.join(map(str, e.absolute_path)) or '<root>'}: {e.message}" for e in errors]
        raise ConfigError("invalid configuration:\n  " + "\n  ".join(lines))
    return cfg


def load_config(path) -> dict:
    try:
        cfg = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read configuration {path}: {exc}") from exc
    return validate_config(cfg)


def build_problem(cfg: dict):
    kw = {k: cfg[k] for k in ("truth", "prior", "x0", "sigma_eps", "n_meas", "t_final", "eps_kl") if k in cfg}
    grid = cfg.get("grid", {})
    if "n" in grid:
        kw["n_grid"] = grid["n"]
    if "support" in grid:
        kw["support"] = tuple(grid["support"])
    if "dt" in grid:
        kw["dt_pde"] = grid["dt"]
    try:
        problem = make_problem(cfg["problem"], seed=cfg.get("seed", 0), **kw)
    except (ValueError, TypeError) as exc:
        raise ConfigError(f"$.problem: {exc}") from exc
    n_truth = 1 if isinstance(problem, RandomInitProblem) else problem.n_par
    if len(problem.truth.truth) != n_truth:
        raise ConfigError(f"$.truth: expected {n_truth} values, got {len(problem.truth.truth)}")
    if len(problem.prior) != problem.n_par:
        raise ConfigError(f"$.prior: expected {problem.n_par} values, got {len(problem.prior)}")
    if not problem.feasible(problem.prior):
        raise ConfigError(f"$.prior: {problem.prior} is outside the feasible region")
    return problem


def _write_json(path, payload) -> None:
    Path(path).write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")


def _observations(cfg, problem, out: Path) -> ObservationSet:
    path = Path(cfg["observations"]) if "observations" in cfg else out / "observations.csv"
    if path.exists():
        return ObservationSet.from_csv(path, problem.truth.sigma_eps)
    log.info("no observations at %s; generating them", path)
    return _generate(problem, out)


def _generate(problem, out: Path) -> ObservationSet:
    traj = simulate_truth(problem)
    obs = generate_observations(traj, problem.truth)
    traj.to_csv(out / "truth.csv")
    obs.to_csv(out / "observations.csv")
    return obs


def _forecaster(cfg, problem, source: str):
    if source == "surrogate":
        from .surrogate import SurrogateForecaster, load_checkpoint

        ckpt = cfg.get("surrogate", {}).get("checkpoint")
        if not ckpt:
            raise ConfigError("$.surrogate.checkpoint: required for --grad surrogate")
        net, _ = load_checkpoint(ckpt)
        return SurrogateForecaster(net, problem, base=FVForecaster(problem))
    if source == "analytic" and not isinstance(problem, RandomInitProblem):
        raise ConfigError("$.grad: analytic gradients exist only for the RandomInit problem")
    return asm.default_forecaster(problem, source)


def _optimizer(cfg, method):
    return asm.OptimizerConfig(method=method, max_iter=cfg.get("max_iter", 200), eps=cfg.get("eps"))


def _run_variant(cfg, problem, obs, spec, method, source, out: Path, tag=None):
    forecaster = _forecaster(cfg, problem, source)
    start = time.perf_counter()
    trace = asm.assimilate_window(problem, obs, spec=spec, method=method, forecaster=forecaster, config=_optimizer(cfg, method))
    wall = time.perf_counter() - start
    tag = tag or f"{spec.lower()}_{method.lower()}"
    trace.to_csv(out / f"trace_{tag}.csv")
    if len(obs):
        dist, _ = forecaster.forecast(trace.phi, obs.times[-1])
        write_distribution_csv(dist, out / f"posterior_{tag}.csv")
    summary = trace.summary() | {"wall_time": wall, "gradient_source": source}
    _write_json(out / f"summary_{tag}.json", summary)
    return trace


def cmd_generate(cfg, args) -> int:
    problem = build_problem(cfg)
    obs = _generate(problem, args.out)
    log.info("wrote %d observations to %s", len(obs), args.out)
    return EXIT_OK


def cmd_assimilate(cfg, args) -> int:
    problem = build_problem(cfg)
    obs = _observations(cfg, problem, args.out)
    variants = [(args.spec, args.method)] if args.explicit or "variants" not in cfg else cfg["variants"]
    traces = [_run_variant(cfg, problem, obs, spec, method, args.grad, args.out) for spec, method in variants]
    for trace in traces:
        if trace.error:
            raise NumericalError(f"{trace.spec}-{trace.method}: {trace.error}")
    stuck = {f"{t.spec}-{t.method}": [s.m for s in t.steps if not s.converged] for t in traces if not t.converged}
    if stuck:
        raise NonConvergenceError(f"steps did not converge: {stuck}")
    return EXIT_OK


def cmd_sweep(cfg, args) -> int:
    problem = build_problem(cfg)
    if "sweep" not in cfg:
        raise ConfigError("$.sweep: required for the sweep command")
    sweep = cfg["sweep"]
    obs = _observations(cfg, problem, args.out)
    m = sweep.get("step", 1)
    if m > len(obs):
        raise ConfigError(f"$.sweep.step: only {len(obs)} observations available")
    axes = [np.linspace(lo, hi, n) for lo, hi, n in sweep["axes"]]
    fixed = sweep.get("fixed", list(problem.prior[2:]))
    if len(fixed) != problem.n_par - 2:
        raise ConfigError(f"$.sweep.fixed: expected {problem.n_par - 2} values")
    forecaster = _forecaster(cfg, problem, args.grad)
    rows = asm.loss_surface(problem, forecaster, problem.prior, obs.times[m - 1], obs.values[m - 1], obs.sigma, axes, fixed)
    names = problem.names
    with (args.out / "sweep.csv").open("w") as fh:
        fh.write(f"{names[0]},{names[1]},kl,w2,feasible\n")
        for a, b, lk, lw, ok in rows:
            fh.write(f"{a!r},{b!r},{lk!r},{lw!r},{int(ok)}\n")
    return EXIT_OK


def oracle_report(cfg, problem, obs, out: Path) -> dict:
    """Exact posterior over the initial state against each variant's final estimate."""
    grid = problem.grid()
    prior = from_cdf(grid, problem.initial_cdf(problem.prior, grid))
    exact = case1_exact_posterior(prior, obs)
    write_distribution_csv(exact, out / "oracle_posterior.csv")
    report = {"oracle": {"mean": exact.mean(), "std": exact.std()}, "variants": {}}
    for spec, method in cfg.get("variants", [["KL", "GD"], ["KL", "NGD"], ["W2", "GD"], ["W2", "NGD"]]):
        trace = _run_variant(cfg, problem, obs, spec, method, "analytic", out)
        est = from_cdf(grid, problem.initial_cdf(trace.phi, grid))
        report["variants"][f"{spec}-{method}"] = {
            "mean": est.mean(),
            "std": est.std(),
            "rel_err_mean": abs(est.mean() - exact.mean()) / exact.mean(),
            "rel_err_std": abs(est.std() - exact.std()) / exact.std(),
            "kl_to_oracle": kl(est, exact),
            "total_iterations": trace.total_iterations,
            "converged": trace.converged,
        }
    return report


def cmd_oracle(cfg, args) -> int:
    problem = build_problem(cfg)
    if not isinstance(problem, RandomInitProblem):
        raise ConfigError("$.problem: the exact posterior exists only for the RandomInit problem")
    obs = _observations(cfg, problem, args.out)
    _write_json(args.out / "oracle.json", oracle_report(cfg, problem, obs, args.out))
    return EXIT_OK


def _training_set(cfg, problem):
    from .surrogate import TrainingCounts, sample_training_set

    sc = cfg.get("surrogate", {})
    if "phi_box" not in sc:
        raise ConfigError("$.surrogate.phi_box: required")
    counts = TrainingCounts(**sc["counts"]) if "counts" in sc else TrainingCounts()
    return sample_training_set(problem, sc["phi_box"], counts, seed=cfg.get("seed", 0))


def cmd_surrogate(cfg, args) -> int:
    from .surrogate import (
        SurrogateNet,
        TrainConfig,
        accuracy_audit,
        geometry_gate,
        load_checkpoint,
        save_checkpoint,
        train,
        write_history,
    )

    problem = build_problem(cfg)
    sc = cfg.get("surrogate", {})
    ckpt = Path(sc.get("checkpoint", args.out / "checkpoint.json"))
    if args.mode == "train":
        ts = _training_set(cfg, problem)
        net = SurrogateNet(problem.n_par, *ts.box, seed=cfg.get("seed", 0))
        tc = TrainConfig(**{k: sc[k] for k in ("adam_iters", "lbfgs_iters") if k in sc})
        history = train(net, ts, tc)
        save_checkpoint(net, ckpt, problem=problem.id, names=list(problem.names))
        write_history(history, args.out / "loss_history.csv")
        _write_json(args.out / "training.json", {"sizes": ts.sizes, "flags": ts.flags, "final": history[-1] if history else None, "best_total": min(h["total"] for h in history) if history else None})
        return EXIT_OK
    if not ckpt.exists():
        raise ConfigError(f"$.surrogate.checkpoint: {ckpt} does not exist")
    net, _ = load_checkpoint(ckpt)
    ts = _training_set(cfg, problem)
    phi = sc.get("gate_phi", list(problem.prior))
    gate = geometry_gate(net, problem, phi, tuple(sc.get("gate_times", (0.5, 1.0, 2.0))))
    report = {"gate": gate.to_dict(), "audit": accuracy_audit(net, ts)}
    _write_json(args.out / "surrogate_eval.json", report)
    if not gate.passed:
        log.error("surrogate failed the geometry gate; not admitted")
        return EXIT_NONCONVERGED
    return EXIT_OK


COMMANDS = {
    "generate": cmd_generate,
    "assimilate": cmd_assimilate,
    "sweep": cmd_sweep,
    "oracle": cmd_oracle,
    "surrogate": cmd_surrogate,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="damd", description="Distribution-based data assimilation experiments.")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", required=True, help="JSON experiment configuration")
    common.add_argument("--seed", type=int, help="overrides the configuration seed")
    common.add_argument("--out", help="output directory (default: configuration 'out' or ./out)")
    common.add_argument("--method", type=str.upper, choices=["GD", "NGD"], help="optimizer")
    common.add_argument("--spec", type=str.upper, choices=["KL", "W2"], help="loss")
    common.add_argument("--grad", choices=["fd", "surrogate", "analytic", "auto"], help="gradient source")
    common.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name, parents=[common])
        if name == "surrogate":
            p.add_argument("mode", choices=["train", "eval"])
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args.config)
        if args.seed is not None:
            if args.seed < 0 or args.seed >= 2**64:
                raise ConfigError("--seed must be an unsigned 64-bit integer")
            cfg["seed"] = args.seed
        args.explicit = args.method is not None or args.spec is not None
        args.out = Path(args.out or cfg.get("out", "out"))
        args.method = args.method or cfg.get("method", "NGD").upper()
        args.spec = args.spec or cfg.get("spec", "KL").upper()
        args.grad = args.grad or cfg.get("grad", "auto")
        args.out.mkdir(parents=True, exist_ok=True)
        _write_json(args.out / "config.resolved.json", cfg)
        return COMMANDS[args.command](cfg, args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except NonConvergenceError as exc:
        print(f"non-convergence: {exc}", file=sys.stderr)
        return EXIT_NONCONVERGED
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except OSError as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
