"""Command-line runner: ``mfturnpike constants|solve|verify|study CONFIG``.

Exit codes: 0 success, 2 bad config or constants, 3 solver/study cell did
not converge, 4 divergent rollout, 5 a requested check failed.
"""
from __future__ import annotations

import argparse
import json
import math
import sys
from importlib import resources
from pathlib import Path

import jsonschema
import numpy as np

from .dynamics import CheapFeedback, ConstantControl, DivergenceError, ZeroControl, integrate
from .model import sample_initial, spec_from_dict, validate_spec
from .ocp import SolverOptions, solve_ocp, verify_dpp
from .turnpike import (ConstantsError, check_cheap_control, check_control_decay, check_cost_decay,
                       check_exponential_turnpike, check_flow_map_stability, check_iteration_lemma,
                       check_moment_growth, check_w2_stability, ledger_for, meanfield_convergence_study)

EXIT_OK, EXIT_CONFIG, EXIT_NOT_CONVERGED, EXIT_DIVERGED, EXIT_CHECK_FAILED = 0, 2, 3, 4, 5

CHECKS = ("cheap_control", "moment_growth", "exponential_turnpike", "iteration_lemma", "control_decay",
          "cost_decay", "w2_stability", "flow_map_stability", "dpp")


class ConfigError(ValueError):
    pass


def load_schema() -> dict:
    return json.loads(resources.files("mfturnpike").joinpath("data/config.schema.json").read_text())


def load_config(path) -> dict:
    try:
        cfg = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    try:
        jsonschema.validate(cfg, load_schema())
    except jsonschema.ValidationError as exc:
        where = "/".join(str(p) for p in exc.absolute_path) or "<root>"
        raise ConfigError(f"config invalid at {where}: {exc.message}") from exc
    return cfg


def _dump(obj, path: Path) -> None:
    path.write_text(json.dumps(obj, indent=2) + "\n")


def _ledger(cfg, spec):
    opts = cfg.get("ledger", {})
    beta = opts.get("beta", "optimal")
    return ledger_for(spec, None if beta == "optimal" else float(beta), opts.get("tau", "optimal"))


def _spec(cfg, seed):
    try:
        spec = spec_from_dict(cfg, seed)
    except (ValueError, KeyError) as exc:
        raise ConfigError(str(exc)) from exc
    return spec


def _validated_spec(cfg, seed):
    spec = _spec(cfg, seed)
    problems = validate_spec(spec)
    if problems:
        raise ConfigError("assumption check failed:\n  " + "\n  ".join(str(v) for v in problems))
    return spec


def _outdir(args, cfg) -> Path:
    out = Path(args.out or cfg.get("output", "mfturnpike_out"))
    out.mkdir(parents=True, exist_ok=True)
    return out


# --------------------------------------------------------------------------
# commands


def cmd_constants(args, cfg) -> int:
    spec = _spec(cfg, args.seed)
    ledger = _ledger(cfg, spec)
    print(ledger.table())
    if ledger.tau_policy == "optimal":
        print(f"alpha = 1/(e C0 C1) = {ledger.alpha!r}")
    if args.out or "output" in cfg:
        _dump(ledger.to_dict(), _outdir(args, cfg) / "constants.json")
    return EXIT_OK


def cmd_solve(args, cfg) -> int:
    spec = _validated_spec(cfg, args.seed)
    out = _outdir(args, cfg)
    result = solve_ocp(spec, SolverOptions.from_dict(cfg.get("solver")))
    result.trajectory.to_csv(out / "trajectory.csv", spec.target)
    result.trajectory.summary_csv(out / "trajectory_summary.csv", spec.target)
    _dump(result.summary(), out / "summary.json")
    print(f"cost {result.cost!r} after {result.iterations} iterations, grad norm {result.grad_norm:.3e}")
    if result.clipped:
        print(f"warm start clipped at {result.clipped} control entries")
    if not result.converged:
        why = "line search failed" if result.line_search_failed else "max_iters reached"
        print(f"not converged: {why}", file=sys.stderr)
        return EXIT_NOT_CONVERGED
    return EXIT_OK


def _trajectory(cfg, spec, ledger):
    src = cfg.get("trajectory", {"source": "solve"})
    kind = src.get("source", "solve")
    if kind == "solve":
        res = solve_ocp(spec, SolverOptions.from_dict(cfg.get("solver")))
        return res.trajectory, res
    if kind == "cheap_feedback":
        return integrate(spec, CheapFeedback(ledger.beta, spec.target, spec.kernel)), None
    if kind == "zero":
        return integrate(spec, ZeroControl()), None
    if kind == "constant":
        value = np.broadcast_to(np.asarray(src.get("value", 0.0), dtype=float), (spec.dimension,))
        return integrate(spec, ConstantControl(value)), None
    raise ConfigError(f"unknown trajectory source {kind!r}")


def _run_check(name, cfg, spec, ledger, traj, res):
    target = spec.target
    vopts = cfg.get("verify", {})
    if name == "cheap_control":
        return check_cheap_control(traj, ledger, target, vopts.get("cheap_control_a"))
    if name == "moment_growth":
        return check_moment_growth(traj, ledger, target)
    if name == "exponential_turnpike":
        return check_exponential_turnpike(traj, ledger, target)
    if name == "iteration_lemma":
        return check_iteration_lemma(traj, ledger, target)
    if name == "control_decay":
        return check_control_decay(traj, ledger, target)
    if name == "cost_decay":
        return check_cost_decay(traj, ledger, spec.cost)
    if name in ("w2_stability", "flow_map_stability"):
        other = sample_initial(cfg.get("initial", {}).get("kind", "uniform_ball"), spec.particle_count,
                               spec.dimension, spec.support_radius, seed=int(vopts.get("pair_seed", 1)))
        law = CheapFeedback(ledger.beta, target, spec.kernel, reference=spec.initial_positions)
        fn = check_w2_stability if name == "w2_stability" else check_flow_map_stability
        return fn(spec, law, spec.initial_positions, other)
    if name == "dpp":
        if res is None:
            raise ConfigError("the dpp check needs trajectory source 'solve'")
        a = float(vopts.get("dpp_a", spec.horizon / 4))
        a = spec.dt * round(a / spec.dt)
        return verify_dpp(spec, res, a, SolverOptions.from_dict(cfg.get("solver")))
    raise ConfigError(f"unknown check {name!r}")


def cmd_verify(args, cfg) -> int:
    names = cfg.get("checks", list(CHECKS))
    if not names:
        print("no checks requested")
        return EXIT_OK
    spec = _validated_spec(cfg, args.seed)
    ledger = _ledger(cfg, spec)
    out = _outdir(args, cfg)
    traj, res = _trajectory(cfg, spec, ledger)
    first_fail = None
    for name in names:
        try:
            rep = _run_check(name, cfg, spec, ledger, traj, res)
            payload, ok, line = rep.to_json(), rep.passed, rep.line()
        except ValueError as exc:
            if isinstance(exc, ConfigError):
                raise
            payload = {"name": name, "pass": False, "error": str(exc), "samples": []}
            ok, line = False, f"{name}: FAIL ({exc})"
        _dump(payload, out / f"check_{name}.json")
        print(line)
        if not ok and first_fail is None:
            first_fail = name
    if first_fail is not None:
        print(f"first failing check: check_{first_fail}", file=sys.stderr)
        return EXIT_CHECK_FAILED
    return EXIT_OK


def cmd_study(args, cfg) -> int:
    spec = _validated_spec(cfg, args.seed)
    st = cfg.get("study", {})
    n_list = st.get("n_list", [8, 16, 32, 64])
    seeds = st.get("seeds", list(range(10)))
    if args.seed is not None:
        seeds = [args.seed + s for s in seeds]
    ledger = _ledger(cfg, spec)
    result = meanfield_convergence_study(
        spec, n_list, st.get("mode", "cheap_feedback"), seeds=seeds, initial=cfg.get("initial"),
        beta=ledger.beta, solver_options=SolverOptions.from_dict(cfg.get("solver")),
        time_stride=int(st.get("time_stride", 1)),
    )
    out = _outdir(args, cfg)
    result.to_csv(out / "study.csv")
    med = result.median_gaps(0)
    print("median W2 gap at t=0: " + ", ".join(f"N={n}: {g:.6g}" for n, g in med.items()))
    ns = sorted(med)
    by_seed = []
    for s in seeds:
        gaps = [next(r.w2_gap for r in result.rows if r.n == n and r.seed == s) for n in ns]
        pairs = list(zip(gaps, gaps[1:]))
        if pairs:
            by_seed.append(sum(b < a for a, b in pairs) / len(pairs))
    if by_seed:
        print(f"monotone fraction across seeds: {float(np.mean(by_seed)):.3f}")
    for (n, s), gap in result.cauchy_gaps().items():
        print(f"N={n} seed={s}: |V_N - V_2N| / V_N = {gap:.6g}")
    if result.failed:
        print(f"failed cells: {result.failed}", file=sys.stderr)
        return EXIT_NOT_CONVERGED
    return EXIT_OK


COMMANDS = {"constants": cmd_constants, "solve": cmd_solve, "verify": cmd_verify, "study": cmd_study}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="mfturnpike", description=__doc__.splitlines()[0])
    p.add_argument("command", choices=sorted(COMMANDS))
    p.add_argument("config", help="experiment config (JSON)")
    p.add_argument("--out", help="output directory (overrides the config)")
    p.add_argument("--seed", type=int, help="override the sampling seed")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = load_config(args.config)
        return COMMANDS[args.command](args, cfg)
    except ConstantsError as exc:
        label = f" [item {exc.item}]" if exc.item else ""
        print(f"invalid constants{label}: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except ConfigError as exc:
        print(str(exc), file=sys.stderr)
        return EXIT_CONFIG
    except DivergenceError as exc:
        print(f"divergent rollout: {exc}", file=sys.stderr)
        return EXIT_DIVERGED


if __name__ == "__main__":
    sys.exit(main())
