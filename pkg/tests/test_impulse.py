import itertools

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from impulse_qvi.impulse import (
    NeverRule,
    ScheduleRule,
    StrategyRule,
    ThresholdRule,
    ValueFunction,
    default_tie_band,
    intervention_op,
    obstacle_from,
    optimal_strategy,
    rule_from_config,
)
from impulse_qvi.sde import TimeGrid, simulate_controlled

from conftest import catalog_variant, make_spec

TIMES = np.linspace(0.0, 1.0, 5)


def _const(c, box=((-2.0, 2.0),), nodes=9):
    return ValueFunction.constant(TIMES, box, nodes, c)


def _from_fn(fn, box=((-2.0, 2.0),), nodes=21):
    axes = [np.linspace(lo, hi, nodes) for lo, hi in box]
    G = np.array(list(itertools.product(*axes)))
    vals = np.stack([fn(t, G).reshape([nodes] * len(box)) for t in TIMES])
    return ValueFunction(TIMES, axes, vals)


def test_single_action_constant_value():
    spec = make_spec(impulse=["0"], cost="1")
    assert intervention_op(_const(5.0), 0.0, np.array([1.3]), spec) == (4.0, 0)


def test_constant_value_picks_cheapest_action():
    spec = make_spec(actions=((-2.0,), (0.5,), (1.0,)), impulse=["x1 + b1"], cost="1 + abs(b1)", K_Gamma=3.0)
    val, arg = intervention_op(_const(2.0), 0.3, np.array([[0.1], [-0.4]]), spec)
    np.testing.assert_allclose(val, 2.0 - 1.5)
    np.testing.assert_array_equal(arg, [1, 1])


def test_ties_go_to_lowest_index():
    spec = make_spec(actions=((1.0,), (2.0,)), impulse=["0*b1"], cost="1")
    assert intervention_op(_const(0.0), 0.0, np.array([0.0]), spec)[1] == 0


@given(x=st.floats(-1.0, 1.0))
def test_matches_exhaustive_scan(x):
    spec = make_spec(actions=((-1.0,), (0.0,), (1.0,)), impulse=["x1 + b1"], cost="1", K_Gamma=3.0)
    v = lambda t, P: np.asarray(P)[:, 0] ** 2  # noqa: E731
    scan = [(x + b) ** 2 - 1.0 for b in (-1.0, 0.0, 1.0)]
    val, arg = intervention_op(v, 0.0, np.array([x]), spec)
    assert val == max(scan) and arg == int(np.argmax(scan))


grids = arrays(np.float64, (5, 9), elements=st.floats(-10, 10))


@given(values=grids, bump=arrays(np.float64, (5, 9), elements=st.floats(0, 5)), seed=st.integers(0, 2**32))
def test_intervention_is_monotone(values, bump, seed):
    spec = make_spec(actions=((-0.5,), (0.7,)), impulse=["x1 + b1"], cost="0.2 + x1*x1", delta=0.2, K_Gamma=3.0)
    axes = [np.linspace(-2, 2, 9)]
    v = ValueFunction(TIMES, axes, values)
    w = ValueFunction(TIMES, axes, values + bump)
    pts = np.random.default_rng(seed).uniform(-2, 2, size=(100, 1))
    for t in (0.0, 0.6):
        assert np.all(obstacle_from(v, spec)(t, pts) <= obstacle_from(w, spec)(t, pts) + 1e-12)


def test_constant_obstacle():
    spec = make_spec(actions=((0.0,), (1.0,)), impulse=["b1"], cost="2 - b1", delta=1.0)
    out = obstacle_from(_const(3.0), spec)(0.5, np.linspace(-1, 1, 7)[:, None])
    np.testing.assert_allclose(out, 3.0 - 1.0)


# -- value functions ------------------------------------------------------------


def test_value_function_multilinear_exact(rng):
    fn = lambda t, G: 1 + t + 2 * G[:, 0] - G[:, 1] + 0.5 * G[:, 0] * G[:, 1]  # noqa: E731
    vf = _from_fn(fn, box=((-1.0, 1.0), (0.0, 3.0)), nodes=6)
    P = rng.uniform([-1, 0], [1, 3], size=(50, 2))
    np.testing.assert_allclose(vf(0.5, P), fn(0.5, P), atol=1e-12)
    assert vf.n == 2 and vf.nodes.shape == (36, 2)
    np.testing.assert_array_equal(vf.values[2].reshape(-1), fn(0.5, vf.nodes))


def test_value_function_time_lookup_and_clamp():
    vf = _from_fn(lambda t, G: t + 0 * G[:, 0])
    assert vf(0.3, [[0.0]])[0] == 0.25
    assert vf(0.25, [[0.0]])[0] == 0.25
    assert vf(5.0, [[0.0]])[0] == 1.0
    lin = _from_fn(lambda t, G: G[:, 0])
    assert lin(0.0, [[7.0]])[0] == 2.0


def test_value_function_rejects_bad_input():
    with pytest.raises(ValueError):
        ValueFunction(TIMES, [np.linspace(0, 1, 3)], np.full((5, 3), np.nan))
    with pytest.raises(ValueError):
        ValueFunction(TIMES[::-1], [np.linspace(0, 1, 3)], np.zeros((5, 3)))


def test_difference_and_norm():
    a = _from_fn(lambda t, G: G[:, 0] ** 2)
    b = _from_fn(lambda t, G: G[:, 0])
    assert (a - b).sup_norm() == pytest.approx(6.0)


def test_tie_band_vanishes_for_linear_surfaces():
    vf = _from_fn(lambda t, G: 3 * G[:, 0] - t)
    assert np.allclose(default_tie_band(vf), 0.0)
    curved = _from_fn(lambda t, G: G[:, 0] ** 2)
    h = 0.2
    np.testing.assert_allclose(default_tie_band(curved), 2 * h**2 * 2 / 8)


# -- feedback rules -------------------------------------------------------------


def test_prohibitive_cost_never_intervenes():
    spec = catalog_variant(cost="1e6", delta=1e6)
    vf = _from_fn(lambda t, G: np.maximum(1 - G[:, 0], 0), box=((0.0, 3.0),))
    rule = optimal_strategy(vf, spec)
    _, control, _ = simulate_controlled(spec, rule, 0.0, [1.0], TimeGrid(0.0, 1.0, 20), 2000, 1)
    assert not control.counts.any()


def test_cost_floor_prevents_null_impulses():
    spec = make_spec(impulse=["x1"], cost="0.5", delta=0.5)
    rule = StrategyRule(_const(0.0), spec)
    assert np.all(rule(0, 0.0, np.linspace(-2, 2, 11)[:, None]) == -1)


def test_no_impulse_at_maturity():
    spec = make_spec(impulse=["0"], cost="1")
    rule = StrategyRule(_from_fn(lambda t, G: -(G[:, 0] ** 2)), spec)
    X = np.array([[1.9]])
    assert rule(0, 0.0, X)[0] == 0
    assert rule(4, 1.0, X)[0] == -1


def test_threshold_rule():
    rule = ThresholdRule(lower=-1.0, upper=1.0, action=2, T=1.0)
    np.testing.assert_array_equal(rule(0, 0.0, np.array([[-2.0], [0.0], [3.0]])), [2, -1, 2])
    assert np.all(rule(0, 1.0, np.array([[-2.0]])) == -1)


def test_rule_from_config():
    spec = make_spec(actions=((0.0,), (1.0,)))
    assert rule_from_config({"type": "threshold", "upper": 1.5, "action": 1}, spec) == ThresholdRule(upper=1.5, action=1, T=1.0)
    assert isinstance(rule_from_config({"type": "never"}, spec), NeverRule)
    assert rule_from_config({"type": "schedule", "steps": [0, 3]}, spec) == ScheduleRule(steps=(0, 3))
    with pytest.raises(ValueError):
        rule_from_config({"type": "threshold", "action": 5}, spec)
    with pytest.raises(ValueError):
        rule_from_config({"type": "oracle"}, spec)
