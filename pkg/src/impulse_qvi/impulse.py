"""Value-function grids, the intervention operator and feedback impulse rules."""

from __future__ import annotations

import itertools
from dataclasses import dataclass

import numpy as np

from .model import ProblemSpec
from .regression import HatBasis

__all__ = [
    "ValueFunction",
    "intervention_op",
    "obstacle_from",
    "StrategyRule",
    "optimal_strategy",
    "default_tie_band",
    "ThresholdRule",
    "NeverRule",
    "ScheduleRule",
    "rule_from_config",
]

TIME_EPS = 1e-12


class ValueFunction:
    """Surface ``v(t, x)`` on a time grid times a rectilinear spatial grid.

    Evaluation is multilinear in ``x`` with states clamped to the box, and
    piecewise constant in ``t``: the slice used is the latest grid time not
    after ``t``.  ``values`` has shape ``(len(times), *shape)``.
    """

    def __init__(self, times, axes, values, stderr=None):
        self.times = np.asarray(times, dtype=float)
        self.axes = [np.asarray(a, dtype=float) for a in axes]
        self.shape = tuple(len(a) for a in self.axes)
        self.values = np.asarray(values, dtype=float).reshape((len(self.times),) + self.shape)
        self.stderr = None if stderr is None else np.asarray(stderr, dtype=float).reshape(self.values.shape)
        self.meta: dict = {}
        if not np.all(np.isfinite(self.values)):
            raise ValueError("value function has non-finite entries")
        if np.any(np.diff(self.times) <= 0):
            raise ValueError("value function times must increase")
        box = [[a[0], a[-1]] for a in self.axes]
        self._basis = HatBasis(box, self.shape)
        self._basis.axes = self.axes

    @classmethod
    def on_box(cls, times, box, nodes, values, stderr=None):
        box = np.asarray(box, dtype=float).reshape(-1, 2)
        counts = np.broadcast_to(np.asarray(nodes, dtype=int), (box.shape[0],))
        axes = [np.linspace(lo, hi, c) for (lo, hi), c in zip(box, counts)]
        return cls(times, axes, values, stderr)

    @classmethod
    def constant(cls, times, box, nodes, c=0.0):
        box = np.asarray(box, dtype=float).reshape(-1, 2)
        counts = np.broadcast_to(np.asarray(nodes, dtype=int), (box.shape[0],))
        shape = (len(times),) + tuple(int(k) for k in counts)
        return cls.on_box(times, box, nodes, np.full(shape, float(c)))

    @property
    def n(self) -> int:
        return len(self.axes)

    @property
    def box(self) -> list:
        return [[float(a[0]), float(a[-1])] for a in self.axes]

    @property
    def nodes(self) -> np.ndarray:
        """Grid states in row-major order, shape ``(prod(shape), n)``."""
        return np.array(list(itertools.product(*self.axes)), dtype=float).reshape(-1, self.n)

    @property
    def spacing(self) -> np.ndarray:
        return np.array([a[1] - a[0] for a in self.axes])

    def time_index(self, t: float) -> int:
        span = self.times[-1] - self.times[0]
        k = int(np.searchsorted(self.times, t + TIME_EPS * max(span, 1.0), side="right")) - 1
        return min(max(k, 0), len(self.times) - 1)

    def slice(self, k: int) -> np.ndarray:
        return self.values[k]

    def _interp(self, grid_values, X):
        X = np.asarray(X, dtype=float).reshape(-1, self.n)
        idx, w = self._basis.features(X)
        return np.sum(grid_values.reshape(-1)[idx] * w, axis=1)

    def __call__(self, t: float, X) -> np.ndarray:
        return self._interp(self.values[self.time_index(t)], X)

    def stderr_at(self, t: float, X) -> np.ndarray:
        if self.stderr is None:
            return np.zeros(np.asarray(X).reshape(-1, self.n).shape[0])
        se = np.nan_to_num(self.stderr[self.time_index(t)], nan=0.0)
        return self._interp(se, X)

    def interpolation_error(self) -> np.ndarray:
        """Per-node bound ``h^2/8 |second difference / h^2|`` of linear interpolation."""
        err = np.zeros(self.values.shape)
        for j, ax in enumerate(self.axes):
            if len(ax) < 3:
                continue
            v = np.moveaxis(self.values, j + 1, -1)
            d2 = np.abs(v[..., 2:] - 2.0 * v[..., 1:-1] + v[..., :-2])
            d2 = np.concatenate([d2[..., :1], d2, d2[..., -1:]], axis=-1) / 8.0
            err = np.maximum(err, np.moveaxis(d2, -1, j + 1))
        return err

    def with_values(self, values, stderr=None) -> "ValueFunction":
        return ValueFunction(self.times, self.axes, values, stderr)

    def __sub__(self, other: "ValueFunction") -> "ValueFunction":
        return self.with_values(self.values - other.values)

    def sup_norm(self) -> float:
        return float(np.max(np.abs(self.values)))


def intervention_op(v, t: float, x, spec: ProblemSpec):
    """``Mv(t, x) = max_b v(t, Gamma(t, x, b)) - l(t, x, b)`` over the action list.

    ``v`` is any callable ``(t, points) -> values``.  Accepts one state or a
    batch; returns ``(value, action index)`` of matching shape.  Ties go to
    the lowest action index.
    """
    x = np.asarray(x, dtype=float)
    single = x.ndim == 1
    X = x.reshape(-1, spec.n)
    best = np.full(X.shape[0], -np.inf)
    arg = np.zeros(X.shape[0], dtype=np.int64)
    for i, b in enumerate(spec.actions):
        B = np.broadcast_to(b, (X.shape[0], spec.m))
        cand = np.asarray(v(t, spec.impulse_at(t, X, B)), dtype=float) - spec.cost_at(t, X, B)
        better = cand > best
        best = np.where(better, cand, best)
        arg = np.where(better, i, arg)
    if single:
        return float(best[0]), int(arg[0])
    return best, arg


def obstacle_from(v, spec: ProblemSpec):
    """The closure ``(t, X) -> Mv(t, X)``."""

    def h(t, X):
        return intervention_op(v, t, np.asarray(X, dtype=float).reshape(-1, spec.n), spec)[0]

    return h


def default_tie_band(v: ValueFunction) -> np.ndarray:
    """``2 (stderr + interpolation error)`` per node."""
    se = np.zeros(v.values.shape) if v.stderr is None else np.nan_to_num(v.stderr, nan=0.0)
    return 2.0 * (se + v.interpolation_error())


class StrategyRule:
    """Feedback rule: impulse at the first node where ``v <= Mv + tie``.

    ``tie_tol`` is a scalar or an array on the grid of ``v``.  Called as
    ``rule(k, t, X)`` it returns an action index per state, or ``-1``.
    """

    def __init__(self, v: ValueFunction, spec: ProblemSpec, tie_tol=0.0, cap: int | None = None):
        self.v = v
        self.spec = spec
        tie = np.asarray(tie_tol, dtype=float)
        self.tie = tie if tie.ndim else float(tie)
        self.cap = cap

    def tie_at(self, t, X) -> np.ndarray:
        if isinstance(self.tie, float):
            return np.full(X.shape[0], self.tie)
        return self.v._interp(self.tie[self.v.time_index(t)], X)

    def decide(self, t, X):
        """Return ``(intervene mask, action index, v, Mv)`` at states ``X``."""
        X = np.asarray(X, dtype=float).reshape(-1, self.spec.n)
        vx = self.v(t, X)
        mv, arg = intervention_op(self.v, t, X, self.spec)
        go = vx <= mv + self.tie_at(t, X)
        if t >= self.spec.T - TIME_EPS * max(self.spec.T, 1.0):
            go[:] = False
        return go, arg, vx, mv

    def __call__(self, k, t, X):
        go, arg, _, _ = self.decide(t, X)
        return np.where(go, arg, -1)

    def to_dict(self) -> dict:
        tie = self.tie if isinstance(self.tie, float) else {"max": float(self.tie.max()), "mean": float(self.tie.mean())}
        return {"type": "optimal", "tie_tol": tie, "cap": self.cap, "grid": {"box": self.v.box, "nodes": list(self.v.shape)}}


def optimal_strategy(v: ValueFunction, spec: ProblemSpec, tie_tol=None, cap: int | None = None) -> StrategyRule:
    """Rule realizing the first-contact impulse times of ``v``."""
    tie = default_tie_band(v) if tie_tol is None else tie_tol
    return StrategyRule(v, spec, tie, cap)


@dataclass(frozen=True)
class ThresholdRule:
    """Impulse with a fixed action whenever ``x[axis]`` leaves ``[lower, upper]``."""

    lower: float = -np.inf
    upper: float = np.inf
    action: int = 0
    axis: int = 0
    T: float = np.inf

    def __call__(self, k, t, X):
        x = np.asarray(X)[:, self.axis]
        go = (x < self.lower) | (x > self.upper)
        if t >= self.T - TIME_EPS * max(self.T, 1.0):
            go[:] = False
        return np.where(go, self.action, -1)

    def to_dict(self) -> dict:
        return {"type": "threshold", "lower": self.lower, "upper": self.upper, "action": self.action, "axis": self.axis}


@dataclass(frozen=True)
class NeverRule:
    def __call__(self, k, t, X):
        return np.full(np.asarray(X).shape[0], -1, dtype=np.int64)

    def to_dict(self) -> dict:
        return {"type": "never"}


@dataclass(frozen=True)
class ScheduleRule:
    """Impulse with ``action`` on every path at each listed step index."""

    steps: tuple = (0,)
    action: int = 0

    def __call__(self, k, t, X):
        a = self.action if k in self.steps else -1
        return np.full(np.asarray(X).shape[0], a, dtype=np.int64)

    def to_dict(self) -> dict:
        return {"type": "schedule", "steps": list(self.steps), "action": self.action}


def rule_from_config(section: dict, spec: ProblemSpec):
    """Build a user rule from a ``[strategy]`` table (types: threshold, never, schedule)."""
    kind = str(section.get("type", "threshold"))
    action = int(section.get("action", 0))
    if not 0 <= action < len(spec.actions):
        raise ValueError(f"strategy action {action} is not an index into U")
    if kind == "threshold":
        return ThresholdRule(
            lower=float(section.get("lower", -np.inf)),
            upper=float(section.get("upper", np.inf)),
            action=action,
            axis=int(section.get("axis", 0)),
            T=spec.T,
        )
    if kind == "never":
        return NeverRule()
    if kind == "schedule":
        steps = section.get("steps", [0])
        return ScheduleRule(steps=tuple(int(s) for s in np.atleast_1d(steps)), action=action)
    raise ValueError(f"unknown strategy type {kind!r}")
