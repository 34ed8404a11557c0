"""Command-line entry point: ``impulse-qvi <subcommand> --config FILE``.

Exit codes: 0 success, 1 a check failed (validation violations or compare
tolerances), 2 config error, 3 numerical divergence, 4 I/O error.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys
import time

import numpy as np

from . import __version__
from .expr import ExpressionError
from .fdoracle import FdError, FDSolver, fd_reference
from .fixedpoint import DivergenceError, LSMCSolver, SolverConfig, derive_seed
from .impulse import NeverRule, ThresholdRule, optimal_strategy, rule_from_config
from .model import ConfigError, load_config, load_spec, validate_spec
from .rbsde import CompatibilityError, RegressionExpectation, evaluate_impulse_value
from .report import RunReport, write_atomic, write_surface
from .sde import THREADS_ENV, SimulationError, TimeGrid, simulate_controlled

__all__ = ["main", "build_parser", "parse_probes", "EXIT_OK", "EXIT_CHECK", "EXIT_CONFIG", "EXIT_DIVERGED", "EXIT_IO"]

EXIT_OK, EXIT_CHECK, EXIT_CONFIG, EXIT_DIVERGED, EXIT_IO = 0, 1, 2, 3, 4
SIMULATE_STREAM = 101


def parse_probes(text: str, n: int) -> np.ndarray:
    """``"0.6;0.8"`` or ``"1,2;3,4"``: points split by ``;``, coordinates by ``,``."""
    try:
        pts = [[float(c) for c in p.split(",")] for p in text.split(";") if p.strip()]
    except ValueError as err:
        raise ConfigError(f"bad --probes value {text!r}") from err
    if not pts or any(len(p) != n for p in pts):
        raise ConfigError(f"--probes needs points with {n} coordinate(s)")
    return np.array(pts)


def _solver_config(sections: dict, args) -> SolverConfig:
    table = dict(sections.get("solver", {}))
    table.update(sections.get("norm", {}))
    for flag, key in (("seed", "seed"), ("paths", "n_paths"), ("steps", "n_steps"), ("kmax", "k_max"), ("tol", "tol")):
        val = getattr(args, flag, None)
        if val is not None:
            table[key] = val
    if getattr(args, "kmax", None) is not None:
        table["outer_k_max"] = args.kmax
    if getattr(args, "tol", None) is not None:
        table["outer_tol"] = args.tol
    try:
        return SolverConfig.from_dict(table)
    except (TypeError, ValueError) as err:
        raise ConfigError(str(err)) from err


def _fd_solver(sections: dict, args) -> tuple:
    table = dict(sections.get("fd", {}))
    richardson = bool(table.pop("richardson", True))
    if getattr(args, "steps", None) is not None and "n_steps" not in table:
        table["n_steps"] = args.steps
    try:
        return FDSolver(**table), richardson
    except TypeError as err:
        raise ConfigError(f"bad [fd] option: {err}") from err


def _probes(sections: dict, args, spec) -> np.ndarray:
    if getattr(args, "probes", None):
        return parse_probes(args.probes, spec.n)
    pts = sections.get("probes", {}).get("points")
    if pts is not None:
        return np.asarray(pts, dtype=float).reshape(-1, spec.n)
    box = np.asarray(spec.box, dtype=float)
    return np.linspace(box[:, 0], box[:, 1], 5)


def _config_digest(path) -> str:
    with open(path, "rb") as fh:
        return hashlib.sha256(fh.read()).hexdigest()


def _base_report(cmd: str, args, spec, sections) -> RunReport:
    rep = RunReport()
    rep.set(
        "run",
        subcommand=cmd,
        version=__version__,
        config_name=os.path.basename(args.config),
        config_sha256=_config_digest(args.config),
    )
    rep.set("problem", **spec.describe())
    return rep


def _validation_section(rep: RunReport, spec, seed: int, n_samples: int):
    val = validate_spec(spec, n_samples=n_samples, seed=seed)
    rep.set("validation", ok=val.ok, n_samples=val.n_samples, seed=val.seed, failures=val.failures)
    rows = [[name, c.status, c.n_checked, len(c.witnesses)] for name, c in val.checks.items()]
    rep.table("validation", ["check", "status", "n_checked", "n_witnesses"], rows)
    return val


def _timings(out: str, entries: dict) -> None:
    write_atomic(os.path.join(out, "timings.txt"), "".join(f"{k} = {v:.6f}\n" for k, v in entries.items()))


def _mc(spec, cfg: SolverConfig) -> LSMCSolver:
    return LSMCSolver(**{k: getattr(cfg, k) for k in LSMCSolver().get_params()}).fit(spec)


def _mc_sections(rep: RunReport, est: LSMCSolver, cfg: SolverConfig, probes) -> None:
    rep.set("solver", method="mc", **{k: getattr(cfg, k) for k in LSMCSolver().get_params()})
    conv = est.report_.to_dict()
    rep.set("convergence", kind=conv["kind"], status=conv["status"], tol=conv["tol"], k_max=conv["k_max"], flags=conv["flags"])
    cols = ["iteration", "sup_increment", "stderr", "weighted_increment", "weighted_stderr", "value_at_probe0", "inner_iterations"]
    rows = [[r[c] if r[c] is not None else "" for c in cols] for r in conv["records"]]
    rep.table("convergence", cols, rows)
    vals, ses = est.predict(probes), est.predict_stderr(probes)
    rep.table("estimates", [*[f"x{i + 1}" for i in range(probes.shape[1])], "value", "stderr"], [[*p, v, s] for p, v, s in zip(probes, vals, ses)])


def cmd_validate(args, spec, sections) -> int:
    rep = _base_report("validate", args, spec, sections)
    n_samples = int(args.samples or sections.get("validate", {}).get("n_samples", 1000))
    seed = int(args.seed if args.seed is not None else sections.get("validate", {}).get("seed", 0))
    val = _validation_section(rep, spec, seed, n_samples)
    wit = []
    for name, c in val.checks.items():
        for w in c.witnesses:
            wit.append([name, c.status, json.dumps(w, sort_keys=True)])
    rep.table("witnesses", ["check", "status", "point"], wit)
    rep.write(os.path.join(args.out, "validation.txt"))
    print(f"validation {'passed' if val.ok else 'FAILED: ' + ', '.join(val.failures)}")
    return EXIT_OK if val.ok else EXIT_CHECK


def cmd_solve(args, spec, sections) -> int:
    if args.method == "fd":
        return cmd_oracle(args, spec, sections)
    cfg = _solver_config(sections, args)
    probes = _probes(sections, args, spec)
    rep = _base_report("solve", args, spec, sections)
    _validation_section(rep, spec, cfg.seed, 1000)
    start = time.perf_counter()
    est = _mc(spec, cfg)
    elapsed = time.perf_counter() - start
    _mc_sections(rep, est, cfg, probes)
    write_surface(os.path.join(args.out, "surface.csv"), est.value_function_)
    rep.write(os.path.join(args.out, "report.txt"))
    _timings(args.out, {"solve": elapsed, **{f"iteration_{r.iteration}": r.wall_time for r in est.report_.records}})
    print(f"solve {est.report_.status} after {est.report_.iterations} iteration(s)")
    return EXIT_OK


def _fd_run(spec, sections, args, probes):
    fd, richardson = _fd_solver(sections, args)
    if not richardson:
        return fd.fit(spec), None
    grid = fd.grid_for(spec)
    kw = {"max_sweeps": fd.max_sweeps}
    if spec.is_nonlocal:
        kw.update(k_max=fd.k_max, tol=fd.tol)
    ref = fd_reference(spec, grid, probes, fd.theta, levels=2, **kw)
    # the coarse level of the reference is exactly what fit() would compute
    fd.spec_, fd.grid_, fd.value_function_ = spec, grid, ref["surfaces"][0]
    return fd, ref


def cmd_oracle(args, spec, sections) -> int:
    probes = _probes(sections, args, spec)
    rep = _base_report("oracle", args, spec, sections)
    start = time.perf_counter()
    fd, ref = _fd_run(spec, sections, args, probes)
    elapsed = time.perf_counter() - start
    rep.set("solver", method="fd", **fd.get_params(), grid=fd.grid_.to_dict())
    meta = fd.value_function_.meta
    rep.set("fd", **{k: v for k, v in meta.items() if k != "grid"})
    vals = fd.predict(probes)
    err = ref["error"] if ref is not None else np.full(len(probes), np.nan)
    rep.table("estimates", [*[f"x{i + 1}" for i in range(spec.n)], "value", "richardson_error"], [[*p, v, e] for p, v, e in zip(probes, vals, err)])
    write_surface(os.path.join(args.out, "surface.csv"), fd.value_function_)
    rep.write(os.path.join(args.out, "report.txt"))
    _timings(args.out, {"oracle": elapsed})
    print("oracle done")
    return EXIT_OK


def compare_rows(probes, mc_v, mc_se, fd_v, fd_err) -> list:
    rows = []
    for p, a, s, b, e in zip(probes, mc_v, mc_se, fd_v, fd_err):
        tol = max(0.02 * (1.0 + abs(b)), 3.0 * s + e)
        rows.append([*p, a, s, b, e, abs(a - b), tol, bool(abs(a - b) <= tol)])
    return rows


def cmd_compare(args, spec, sections) -> int:
    cfg = _solver_config(sections, args)
    probes = _probes(sections, args, spec)
    rep = _base_report("compare", args, spec, sections)
    t0 = time.perf_counter()
    est = _mc(spec, cfg)
    t1 = time.perf_counter()
    fd, ref = _fd_run(spec, sections, args, probes)
    t2 = time.perf_counter()
    _mc_sections(rep, est, cfg, probes)
    rep.set("fd", **fd.get_params(), grid=fd.grid_.to_dict())
    err = ref["error"] if ref is not None else np.zeros(len(probes))
    rows = compare_rows(probes, est.predict(probes), est.predict_stderr(probes), fd.predict(probes), err)
    cols = [*[f"x{i + 1}" for i in range(spec.n)], "mc", "mc_stderr", "fd", "fd_error", "diff", "tol", "pass"]
    rep.table("compare", cols, rows)
    ok = all(r[-1] for r in rows)
    rep.set("verdict", all_pass=ok)
    rep.write(os.path.join(args.out, "report.txt"))
    write_surface(os.path.join(args.out, "surface_mc.csv"), est.value_function_)
    write_surface(os.path.join(args.out, "surface_fd.csv"), fd.value_function_)
    _timings(args.out, {"mc": t1 - t0, "fd": t2 - t1})
    print(f"compare: {sum(r[-1] for r in rows)}/{len(rows)} probes within tolerance")
    return EXIT_OK if ok else EXIT_CHECK


def _strategy(args, spec, sections, v):
    name = args.strategy
    if name == "optimal":
        return optimal_strategy(v, spec)
    if name == "never":
        return NeverRule()
    if name == "config":
        if "strategy" not in sections:
            raise ConfigError("--strategy config needs a [strategy] section")
        try:
            return rule_from_config(sections["strategy"], spec)
        except ValueError as err:
            raise ConfigError(str(err)) from err
    if name.startswith("threshold:"):
        parts = name.split(":")[1:]
        try:
            upper = float(parts[0])
            action = int(parts[1]) if len(parts) > 1 else 0
        except (ValueError, IndexError) as err:
            raise ConfigError(f"bad strategy {name!r}; expected threshold:UPPER[:ACTION]") from err
        return ThresholdRule(upper=upper, action=action, T=spec.T)
    raise ConfigError(f"unknown strategy {name!r}")


def random_thresholds(spec, count: int, seed: int) -> list:
    """Threshold rules on the first axis with a random action and an upper
    trigger level drawn uniformly between that action's level and the box top."""
    rng = np.random.default_rng(derive_seed(seed, SIMULATE_STREAM, 1))
    lo, hi = np.asarray(spec.box, dtype=float)[0]
    out = []
    for _ in range(count):
        action = int(rng.integers(len(spec.actions)))
        floor = min(max(lo, float(spec.actions[action][0])), hi)
        out.append(ThresholdRule(upper=float(rng.uniform(floor, hi)), action=action, T=spec.T))
    return out


def evaluate_rule(spec, rule, x0, cfg: SolverConfig, seed: int):
    grid = TimeGrid(0.0, spec.T, cfg.n_steps)
    controlled = simulate_controlled(spec, rule, 0.0, x0, grid, cfg.n_paths, seed)
    E = RegressionExpectation(basis=cfg.basis, box=cfg.resolved_box(spec), n_knots=cfg.grid_nodes, degree=cfg.degree, stderr_steps=set())
    return evaluate_impulse_value(spec, controlled, expectation=E), controlled


def cmd_simulate(args, spec, sections) -> int:
    cfg = _solver_config(sections, args)
    probes = _probes(sections, args, spec)
    rep = _base_report("simulate", args, spec, sections)
    t0 = time.perf_counter()
    est = _mc(spec, cfg) if (args.strategy == "optimal" or args.random) else None
    v = est.value_function_ if est is not None else None
    rule = _strategy(args, spec, sections, v)
    sim_seed = derive_seed(cfg.seed, SIMULATE_STREAM)
    rep.set("simulate", strategy=rule.to_dict(), seed=sim_seed, n_paths=cfg.n_paths, n_steps=cfg.n_steps)
    rules = [("chosen", rule)] + [(f"random{i}", r) for i, r in enumerate(random_thresholds(spec, args.random or 0, cfg.seed))]
    cols = [*[f"x{i + 1}" for i in range(spec.n)], "rule", "P_hat", "stderr", "mean_N", "max_N", "mean_Xi_T", "capped", "v_hat", "v_stderr"]
    rows = []
    for p in probes:
        for label, r in rules:
            sol, (ens, ctl, xi) = evaluate_rule(spec, r, p, cfg, sim_seed)
            vh = float(v(0.0, p[None])[0]) if v is not None else float("nan")
            vs = float(v.stderr_at(0.0, p[None])[0]) if v is not None else float("nan")
            rows.append([*p, label, sol.value, sol.stderr, float(ctl.counts.mean()), int(ctl.counts.max()), float(xi[-1].mean()), int(ctl.capped.sum()), vh, vs])
    rep.table("strategies", cols, rows)
    rep.table("rules", ["rule", "definition"], [[label, json.dumps(r.to_dict(), sort_keys=True)] for label, r in rules])
    rep.write(os.path.join(args.out, "report.txt"))
    _timings(args.out, {"simulate": time.perf_counter() - t0})
    print(f"simulate: {len(rows)} strategy evaluation(s)")
    return EXIT_OK


COMMANDS = {
    "validate": cmd_validate,
    "solve": cmd_solve,
    "oracle": cmd_oracle,
    "compare": cmd_compare,
    "simulate": cmd_simulate,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="impulse-qvi",
        description="Impulse-control QVI solver: regression Monte Carlo and a finite-difference oracle.",
        epilog=f"Thread count for path simulation: environment variable {THREADS_ENV}.",
    )
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", required=True, help="problem config file")
        p.add_argument("--out", default=None, help="output directory (default runs/<config name>)")
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--paths", type=int, default=None)
        p.add_argument("--steps", type=int, default=None)
        p.add_argument("--kmax", type=int, default=None)
        p.add_argument("--tol", type=float, default=None)
        p.add_argument("--probes", default=None, help='probe points, e.g. "0.6;1.0" or "1,2;3,4"')
        p.add_argument("--method", choices=("mc", "fd"), default="mc")
        if name == "validate":
            p.add_argument("--samples", type=int, default=None)
        if name == "simulate":
            p.add_argument("--strategy", default="optimal", help="optimal | never | config | threshold:UPPER[:ACTION]")
            p.add_argument("--random", type=int, default=0, help="also evaluate this many random threshold rules")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if args.seed is not None and not 0 <= args.seed < 2**64:
        print("error: --seed must be an unsigned 64-bit integer", file=sys.stderr)
        return EXIT_CONFIG
    try:
        sections = load_config(args.config)
        spec = load_spec(sections)
    except (ConfigError, ExpressionError) as err:
        print(f"config error: {err}", file=sys.stderr)
        return EXIT_CONFIG
    except OSError as err:
        print(f"i/o error: {err}", file=sys.stderr)
        return EXIT_IO
    if args.out is None:
        args.out = os.path.join("runs", spec.name)
    try:
        return COMMANDS[args.command](args, spec, sections)
    except (ConfigError, ExpressionError, CompatibilityError) as err:
        print(f"config error: {err}", file=sys.stderr)
        return EXIT_CONFIG
    except (DivergenceError, FdError, SimulationError, FloatingPointError) as err:
        print(f"numerical failure: {err}", file=sys.stderr)
        return EXIT_DIVERGED
    except OSError as err:
        print(f"i/o error: {err}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
