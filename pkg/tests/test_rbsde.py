import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from impulse_qvi.fdoracle import FdGrid, fd_solve_local_qvi
from impulse_qvi.impulse import NeverRule, ScheduleRule, ThresholdRule
from impulse_qvi.rbsde import (
    CompatibilityError,
    RegressionExpectation,
    TabularExpectation,
    evaluate_impulse_value,
    solve_bsde,
    solve_reflected,
)
from impulse_qvi.sde import TimeGrid, simulate_controlled, simulate_paths

from conftest import make_spec
from oracles import binomial_lattice, crr_american_put, lattice_snell

GRID = TimeGrid(0.0, 1.0, 20)


def _brownian(spec, x0=0.3, n_paths=20000, seed=5, grid=GRID):
    return simulate_paths(spec, 0.0, [x0], grid, n_paths, seed)


def test_martingale_terminal():
    spec = make_spec()
    sol = solve_bsde(spec, _brownian(spec))
    assert abs(sol.value - 0.3) <= 4 * sol.stderr
    assert np.all(sol.K == 0)


def test_constant_driver_integrates():
    spec = make_spec(driver="0.7", terminal="0")
    sol = solve_bsde(spec, _brownian(spec, n_paths=500))
    assert sol.value == pytest.approx(0.7, abs=max(4 * sol.stderr, 1e-12))


def test_linear_driver_discounts():
    spec = make_spec(driver="-0.1*y")
    grid = TimeGrid(0.0, 1.0, 100)
    sol = solve_bsde(spec, _brownian(spec, x0=1.0, grid=grid))
    # explicit Euler in y gives (1 - 0.1 dt)^N; both are within MC noise
    assert abs(sol.value - math.exp(-0.1)) <= 4 * sol.stderr + 1e-3


def test_z_regression_through_driver():
    # Y = psi + int Z dt with Z = sigma = 1, so Y_0 = x0 + T
    spec = make_spec(driver="z1")
    sol = solve_bsde(spec, _brownian(spec, x0=0.3))
    assert abs(sol.value - 1.3) <= 4 * sol.stderr + 0.02
    assert np.mean(sol.Z[5]) == pytest.approx(1.0, abs=0.05)


def test_inactive_obstacle_is_bitwise_bsde():
    spec = make_spec(driver="-0.05*y + 0.1*x1", terminal="max(x1, 0)")
    ens = _brownian(spec, n_paths=3000)
    a = solve_bsde(spec, ens)
    b = solve_reflected(spec, ens, lambda t, X: np.full(X.shape[0], -1e9))
    assert np.array_equal(a.Y, b.Y) and np.array_equal(a.payoff, b.payoff)
    assert not np.any(b.K)


def test_martingale_obstacle_gives_no_premium():
    spec = make_spec()
    sol = solve_reflected(spec, _brownian(spec), lambda t, X: X[:, 0])
    assert abs(sol.value - 0.3) <= 4 * sol.stderr + 0.01
    assert sol.K[-1].mean() < 0.02


def test_compatibility_error_at_maturity():
    spec = make_spec(terminal="0")
    with pytest.raises(CompatibilityError) as info:
        solve_reflected(spec, _brownian(spec, n_paths=50), lambda t, X: np.ones(X.shape[0]))
    assert info.value.witness["h"] == 1.0 and info.value.witness["psi"] == 0.0


def test_american_put_matches_binomial_tree():
    spec = make_spec(drift=["0.05*x1"], vol=[["0.4*x1"]], driver="-0.05*y", terminal="max(1 - x1, 0)", box=[[0, 3]])
    grid = TimeGrid(0.0, 1.0, 50)
    ens = simulate_paths(spec, 0.0, [1.0], grid, 20000, seed=7)
    E = RegressionExpectation(basis="hat", box=[[0.0, 3.0]], n_knots=31)
    sol = solve_reflected(spec, ens, lambda t, X: np.maximum(1 - X[:, 0], 0.0), expectation=E)
    tree = crr_american_put(1.0, 1.0, 0.05, 0.4, 1.0, 500)
    assert abs(sol.value - tree) <= max(0.01, 4 * sol.stderr)


def test_lattice_matches_dynamic_programming():
    ens, labels, nodes = binomial_lattice(1.0, 0.3, 1.0, 8)
    spec = make_spec(driver="-0.05*y", terminal="max(1 - x1, 0)")
    put = lambda x: np.maximum(1 - x, 0.0)  # noqa: E731
    sol = solve_reflected(spec, ens, lambda t, X: put(X[:, 0]), expectation=TabularExpectation(labels))
    V = lattice_snell(nodes, put, put, 0.05, ens.grid.dt)
    for k in range(9):
        np.testing.assert_allclose(sol.Y[k], V[k][labels[k]], rtol=0, atol=1e-12)


@given(level=st.floats(-0.5, 1.5), slope=st.floats(-1, 1), seed=st.integers(0, 2**32))
def test_skorokhod_conditions(level, slope, seed):
    spec = make_spec(terminal="abs(x1) + 1")
    ens = simulate_paths(spec, 0.0, [0.2], TimeGrid(0.0, 1.0, 10), 400, seed)
    h = lambda t, X: level + slope * X[:, 0] - t  # noqa: E731
    sol = solve_reflected(spec, ens, h, expectation=RegressionExpectation(box=[[-3, 3]], n_knots=9))
    assert np.all(sol.K[0] == 0)
    assert np.all(sol.dK >= 0)
    assert np.all(sol.Y[:-1] >= sol.H[:-1])
    push = sol.dK > 0
    assert np.array_equal(sol.Y[:-1][push], sol.H[:-1][push])


def test_empty_control_is_bitwise_bsde(reset_spec):
    grid = TimeGrid(0.0, 1.0, 20)
    controlled = simulate_controlled(reset_spec, NeverRule(), 0.0, [1.0], grid, 2000, 3)
    ref = solve_bsde(reset_spec, simulate_paths(reset_spec, 0.0, [1.0], grid, 2000, 3))
    got = evaluate_impulse_value(reset_spec, controlled)
    assert np.array_equal(got.Y, ref.Y) and got.value == ref.value


def test_forced_impulse_to_origin_pays_cost():
    spec = make_spec(impulse=["0"], cost="1")
    controlled = simulate_controlled(spec, ScheduleRule(steps=(0,)), 0.0, [0.8], GRID, 5000, 4)
    sol = evaluate_impulse_value(spec, controlled)
    assert abs(sol.value - (-1.0)) <= 4 * sol.stderr + 1e-12


def test_strategy_payoffs_below_qvi_value(reset_spec):
    # any strategy, including never intervening, is dominated by the value
    grid = TimeGrid(0.0, 1.0, 50)
    E = RegressionExpectation(box=[[0.0, 3.0]], n_knots=31)
    v = fd_solve_local_qvi(reset_spec, FdGrid([[0.0, 6.0]], 201, 100, 1.0, "ode"))(0.0, [[1.0]])[0]
    for rule in (NeverRule(), ThresholdRule(upper=1.05, action=0, T=1.0), ThresholdRule(upper=1.6, action=1, T=1.0)):
        P = evaluate_impulse_value(reset_spec, simulate_controlled(reset_spec, rule, 0.0, [1.0], grid, 20000, 6), expectation=E)
        assert P.value <= v + 3 * P.stderr + 0.003
