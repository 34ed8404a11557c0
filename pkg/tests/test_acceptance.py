"""Acceptance criteria P1-P10, each printing one PASS/FAIL line.

These run at the stated scale (2e4 paths, 100 steps, a 400x200 FD grid) and
take a few minutes in total.
"""

import dataclasses
import time

import numpy as np
import pytest

from impulse_qvi.cli import main
from impulse_qvi.fdoracle import FdGrid, fd_solve_local_qvi, transform_lambda
from impulse_qvi.fixedpoint import CONVERGED, SolverConfig, probe_set, solve_local, solve_nonlocal
from impulse_qvi.impulse import optimal_strategy
from impulse_qvi.model import load_config, validate_spec
from impulse_qvi.report import parse_report
from impulse_qvi.rbsde import TabularExpectation, solve_reflected
from impulse_qvi.sde import THREADS_ENV, TimeGrid, simulate_controlled, simulate_dominating

from conftest import catalog_path, catalog_variant, make_spec
from oracles import binomial_lattice, lattice_snell

pytestmark = pytest.mark.slow


@pytest.fixture
def verdict(capsys):
    def say(name, ok, detail):
        with capsys.disabled():
            print(f"\n{name} {'PASS' if ok else 'FAIL'}: {detail}")
        assert ok, detail

    return say


@pytest.fixture(scope="module")
def catalog_cfg():
    sections = load_config(catalog_path("reset1d.cfg"))
    return SolverConfig.from_dict({**sections["solver"], **sections["norm"]})


@pytest.fixture(scope="module")
def reset_value(reset_spec, catalog_cfg):
    v, report = solve_local(reset_spec, catalog_cfg)
    assert report.status == CONVERGED
    return v


def _table(path, name):
    with open(path) as fh:
        tab = parse_report(fh.read())["tables"][name]
    return tab["columns"], tab["rows"]


def test_p1_mc_fd_agreement(tmp_path, verdict):
    start = time.perf_counter()
    code = main(["compare", "--config", catalog_path("reset1d.cfg"), "--out", str(tmp_path)])
    elapsed = time.perf_counter() - start
    cols, rows = _table(tmp_path / "report.txt", "compare")
    worst = max(float(r[cols.index("diff")]) / float(r[cols.index("tol")]) for r in rows)
    ok = code == 0 and len(rows) == 5 and all(r[-1] == "true" for r in rows) and elapsed <= 300
    verdict("P1", ok, f"{sum(r[-1] == 'true' for r in rows)}/5 probes, worst diff/tol {worst:.2f}, {elapsed:.0f}s")


def test_p2_ladder_monotone_and_decaying(reset_spec, catalog_cfg, verdict):
    cfg = dataclasses.replace(catalog_cfg, k_max=7, tol=0.0)
    _, report, history = solve_local(reset_spec, cfg, keep_history=True)
    times, pts = probe_set(reset_spec, cfg)
    worst = np.inf
    for a, b in zip(history[:7], history[1:8]):
        for t in times:
            se = np.sqrt(a.stderr_at(t, pts) ** 2 + b.stderr_at(t, pts) ** 2)
            worst = min(worst, float(np.min(b(t, pts) - a(t, pts) + 3 * se)))
    inc, rec = report.increments, report.records
    decay = inc[3] <= 0.75 * inc[1] + 3 * rec[3].stderr
    verdict("P2", worst >= 0 and decay, f"min slack {worst:.2e}; increments k=2 {inc[1]:.4f}, k=4 {inc[3]:.4f}")


def test_p3_nonlocal_contraction(reset_nonlocal_spec, verdict):
    sections = load_config(catalog_path("reset1d_nonlocal.cfg"))
    cfg = SolverConfig.from_dict({**sections["solver"], **sections["norm"]})
    cfg = dataclasses.replace(cfg, outer_tol=1e-6, outer_k_max=8)
    _, report = solve_nonlocal(reset_nonlocal_spec, cfg)
    inc = report.increments
    ratios = report.weighted_ratios
    ok = len(inc) >= 3 and np.all(np.diff(inc[1:]) <= 0) and np.all(ratios[1:] <= 0.9)
    verdict("P3", bool(ok), f"sup increments {np.array2string(inc, precision=2)}, weighted ratios {np.array2string(ratios, precision=3)}")


def test_p4_lattice_exactness(verdict):
    ens, labels, nodes = binomial_lattice(1.0, 0.3, 1.0, 10)
    spec = make_spec(driver="-0.05*y", terminal="max(1 - x1, 0)")
    put = lambda x: np.maximum(1 - x, 0.0)  # noqa: E731
    sol = solve_reflected(spec, ens, lambda t, X: put(X[:, 0]), expectation=TabularExpectation(labels))
    V = lattice_snell(nodes, put, put, 0.05, ens.grid.dt)
    err = max(np.max(np.abs(sol.Y[k] - V[k][labels[k]])) for k in range(11))
    contact = np.isclose(sol.Y[:-1], sol.H[:-1], rtol=0, atol=0)
    first = np.where(contact.any(axis=0), contact.argmax(axis=0), 10)
    flat = all(np.all(sol.K[: first[p] + 1, p] == 0) for p in range(sol.K.shape[1]))
    verdict("P4", err <= 1e-12 and flat and sol.K[-1].max() > 0, f"max |Y - DP| {err:.1e}, K flat before first contact: {flat}")


def test_p5_pathwise_domination(reset_spec, reset_value, verdict):
    grid = TimeGrid(0.0, reset_spec.T, 100)
    rule = optimal_strategy(reset_value, reset_spec)
    ens, ctl, _ = simulate_controlled(reset_spec, rule, 0.0, [1.0], grid, 10000, 5)
    dom = simulate_dominating(reset_spec, 1.0, "matched", 0.0, grid, 10000, 5, controlled=ens)
    bad = np.sum(np.abs(ens.X[:, :, 0]) > dom.R + 1e-12) + np.sum(np.abs(ens.X_pre[:, :, 0]) > dom.R + 1e-12)
    verdict("P5", bad == 0 and ctl.counts.sum() > 0, f"{bad} violations over 10000 paths x 101 nodes, {int(ctl.counts.sum())} impulses")


def test_p6_lambda_invariance(reset_spec, verdict):
    grid = FdGrid([[0.0, 6.0]], 400, 200, 1.0, "ode")
    tr = transform_lambda(reset_spec, 0.5)
    v, vt = fd_solve_local_qvi(reset_spec, grid), fd_solve_local_qvi(tr, grid)
    fine = grid.refined()
    selfconv = max(
        np.max(np.abs(fd_solve_local_qvi(s, fine).values[::2, ::2] - w.values)) for s, w in ((reset_spec, v), (tr, vt))
    )
    err = np.max(np.abs(vt.values - np.exp(0.5 * v.times)[:, None] * v.values))
    verdict("P6", err <= 2 * selfconv, f"max |v_lambda - e^(t/2) v| {err:.2e} vs tolerance {2 * selfconv:.2e}")


def test_p7_strategy_optimality(tmp_path, verdict):
    code = main(["simulate", "--config", catalog_path("reset1d.cfg"), "--out", str(tmp_path), "--probes", "1.0", "--random", "20"])
    cols, rows = _table(tmp_path / "report.txt", "strategies")
    col = {c: cols.index(c) for c in ("P_hat", "stderr", "v_hat", "v_stderr")}
    opt = rows[0]
    P, s = float(opt[col["P_hat"]]), float(opt[col["stderr"]])
    slack = min(P - float(r[col["P_hat"]]) + 3 * np.hypot(s, float(r[col["stderr"]])) for r in rows[1:])
    vh, vs = float(opt[col["v_hat"]]), float(opt[col["v_stderr"]])
    gap = abs(P - vh) / (3 * np.hypot(s, vs))
    ok = code == 0 and len(rows) == 21 and slack >= 0 and gap <= 1
    verdict("P7", ok, f"optimal P {P:.4f} +- {s:.4f}, v {vh:.4f}; min slack {slack:.4f}; |P - v| / 3se {gap:.2f}")


def test_p8_impulse_counts(reset_spec, reset_value, verdict):
    grid = TimeGrid(0.0, reset_spec.T, 100)
    rule = optimal_strategy(reset_value, reset_spec)
    x0s = np.array([0.6, 1.0, 2.0])
    means, capped, finite = [], 0, True
    for i, x0 in enumerate(x0s):
        _, ctl, _ = simulate_controlled(reset_spec, rule, 0.0, [x0], grid, 20000, 99 + i)
        means.append(ctl.counts.mean())
        capped += int(ctl.capped.sum())
        finite &= bool(np.all(np.isfinite(ctl.counts)))
    means = np.array(means)
    g = 1 + np.abs(x0s) ** reset_spec.constants()["rho"]
    C = float(means @ g / (g @ g))  # least squares through the origin
    ok = finite and capped == 0 and np.all(means <= 2 * C * g) and C > 0
    verdict("P8", ok, f"mean N {np.array2string(means, precision=3)}, fitted C {C:.3f}, capped {capped}")


@pytest.mark.parametrize(
    "check,edit",
    [
        ("cost_floor", dict(cost="0.05")),
        ("impulse_growth", dict(impulse=["x1 + 2*b1"])),
        ("terminal_gap", dict(terminal="max(2 - x1, 0)", C_psi=2.0)),
    ],
)
def test_p9_validator_sensitivity(check, edit, verdict):
    report = validate_spec(catalog_variant(**edit))
    wit = report[check].witnesses if check in report.checks else []
    ok = check in report.failures and len(wit) > 0 and validate_spec(catalog_variant()).ok
    verdict(f"P9[{check}]", ok, f"failures {report.failures}, witness {wit[0] if wit else None}")


def test_p10_determinism(tmp_path, monkeypatch, verdict):
    cfg = catalog_path("reset1d.cfg")
    outs = []
    for i, threads in enumerate(("1", "1", "4")):
        monkeypatch.setenv(THREADS_ENV, threads)
        out = tmp_path / f"run{i}"
        assert main(["solve", "--config", cfg, "--seed", "7", "--out", str(out)]) == 0
        outs.append(tuple((out / f).read_bytes() for f in ("surface.csv", "report.txt")))
    same = outs[0] == outs[1] == outs[2]
    verdict("P10", same, "surface.csv and report.txt identical across 2 runs and thread counts 1/4")
