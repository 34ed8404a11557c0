"""Problem specification, config loading and sampled assumption checks."""

from __future__ import annotations

import configparser
import itertools
import json
import os
from dataclasses import dataclass, field
from typing import Any

import numpy as np

from . import expr as ex

__all__ = [
    "ProblemSpec",
    "ConfigError",
    "AssumptionCheck",
    "ValidationReport",
    "DEFAULT_CONSTANTS",
    "load_spec",
    "load_config",
    "parse_config",
    "spec_from_dict",
    "validate_spec",
]

# Documented defaults for constants that a config may omit.
DEFAULT_CONSTANTS = {
    "K_Gamma": 1.0,
    "k_f": 1.0,
    "rho": 2.0,
    "C_f": 1.0,
    "C_psi": 1.0,
    "C_a_sigma": 1.0,
    "k_a_sigma": 1.0,
}

GROWTH_SLACK = 1e-9
PROBLEM_KEYS = frozenset(
    ["n", "d", "T", "drift", "vol", "driver", "terminal", "impulse", "cost", "delta", "box", "name", *DEFAULT_CONSTANTS]
)


class ConfigError(ValueError):
    """Raised for missing fields, bad values and expression errors in a config."""


def _names(prefix: str, count: int) -> list:
    return [f"{prefix}{i + 1}" for i in range(count)]


@dataclass(frozen=True, eq=False)
class ProblemSpec:
    """An impulse-control QVI problem with all coefficients parsed.

    Array conventions for the vectorized evaluators: states ``X`` have shape
    ``(P, n)``, actions are rows of :attr:`actions` (shape ``(|U|, m)``) and
    results have a leading path axis.
    """

    n: int
    d: int
    T: float
    drift: tuple
    vol: tuple  # n rows of d expressions
    driver: ex.Expression
    terminal: ex.Expression
    impulse: tuple
    cost: ex.Expression
    actions: np.ndarray
    delta: float
    K_Gamma: float = DEFAULT_CONSTANTS["K_Gamma"]
    k_f: float = DEFAULT_CONSTANTS["k_f"]
    rho: float = DEFAULT_CONSTANTS["rho"]
    C_f: float = DEFAULT_CONSTANTS["C_f"]
    C_psi: float = DEFAULT_CONSTANTS["C_psi"]
    C_a_sigma: float = DEFAULT_CONSTANTS["C_a_sigma"]
    k_a_sigma: float = DEFAULT_CONSTANTS["k_a_sigma"]
    box: np.ndarray = None
    name: str = "problem"

    def __post_init__(self):
        if self.n < 1 or self.d < 1:
            raise ConfigError("state and Brownian dimensions must be at least 1")
        if not self.T > 0:
            raise ConfigError("horizon T must be positive")
        if not self.delta > 0:
            raise ConfigError("cost floor must be positive")
        if len(self.actions) == 0:
            raise ConfigError("action set must be non-empty")
        actions = np.atleast_2d(np.asarray(self.actions, dtype=float))
        actions.setflags(write=False)
        object.__setattr__(self, "actions", actions)
        box = self.box
        if box is None:
            box = [[-2.0, 2.0]] * self.n
        box = np.asarray(box, dtype=float).reshape(self.n, 2)
        if np.any(box[:, 1] <= box[:, 0]):
            raise ConfigError("box bounds must satisfy lo < hi")
        box.setflags(write=False)
        object.__setattr__(self, "box", box)

    # -- structure -------------------------------------------------------

    @property
    def m(self) -> int:
        return self.actions.shape[1]

    @property
    def state_names(self) -> list:
        return _names("x", self.n)

    @property
    def is_nonlocal(self) -> bool:
        return self.driver.has_vterms

    @property
    def driver_uses_z(self) -> bool:
        return any(self.driver.uses(z) for z in _names("z", self.d))

    @property
    def driver_uses_y(self) -> bool:
        return self.driver.uses("y")

    @property
    def time_dependent_coefficients(self) -> bool:
        return any(e.uses("t") for e in self.drift) or any(e.uses("t") for row in self.vol for e in row)

    def constants(self) -> dict:
        return {k: getattr(self, k) for k in ("delta", *DEFAULT_CONSTANTS)}

    def replace(self, **changes) -> "ProblemSpec":
        fields = {
            k: getattr(self, k)
            for k in (
                "n d T drift vol driver terminal impulse cost actions delta K_Gamma k_f rho "
                "C_f C_psi C_a_sigma k_a_sigma box name"
            ).split()
        }
        fields.update(changes)
        return ProblemSpec(**fields)

    # -- vectorized evaluation --------------------------------------------

    def _env(self, t, X, **extra) -> dict:
        X = np.asarray(X, dtype=float)
        env = {"t": t}
        for i in range(self.n):
            env[f"x{i + 1}"] = X[..., i]
        env.update(extra)
        return env

    @staticmethod
    def _full(value, shape) -> np.ndarray:
        return np.broadcast_to(np.asarray(value, dtype=float), shape).astype(float, copy=True)

    def drift_at(self, t, X) -> np.ndarray:
        X = np.asarray(X, dtype=float)
        env = self._env(t, X)
        return np.stack([self._full(e(env), X.shape[:-1]) for e in self.drift], axis=-1)

    def vol_at(self, t, X) -> np.ndarray:
        X = np.asarray(X, dtype=float)
        env = self._env(t, X)
        rows = [np.stack([self._full(e(env), X.shape[:-1]) for e in row], axis=-1) for row in self.vol]
        return np.stack(rows, axis=-2)

    def terminal_at(self, X) -> np.ndarray:
        X = np.asarray(X, dtype=float)
        return self._full(self.terminal(self._env(self.T, X)), X.shape[:-1])

    def driver_at(self, t, X, y, Z=None, value_fn=None) -> np.ndarray:
        """Driver ``f(t, x, y, z)``; ``value_fn(t, points)`` backs V-terms."""
        X = np.asarray(X, dtype=float)
        extra = {"y": y}
        for j in range(self.d):
            extra[f"z{j + 1}"] = 0.0 if Z is None else np.asarray(Z)[..., j]
        adapter = None
        if value_fn is not None:
            shape = X.shape[:-1]

            def adapter(tt, args):
                pts = np.stack([self._full(a, shape) for a in args], axis=-1)
                return value_fn(tt, pts)

        return self._full(self.driver(self._env(t, X, **extra), adapter), X.shape[:-1])

    def _action_env(self, t, X, b) -> dict:
        b = np.asarray(b, dtype=float)
        extra = {f"b{j + 1}": b[..., j] for j in range(self.m)}
        return self._env(t, X, **extra)

    def impulse_at(self, t, X, b) -> np.ndarray:
        X = np.asarray(X, dtype=float)
        env = self._action_env(t, X, b)
        return np.stack([self._full(e(env), X.shape[:-1]) for e in self.impulse], axis=-1)

    def cost_at(self, t, X, b) -> np.ndarray:
        X = np.asarray(X, dtype=float)
        return self._full(self.cost(self._action_env(t, X, b)), X.shape[:-1])

    # -- reporting ----------------------------------------------------------

    def describe(self) -> dict:
        return {
            "name": self.name,
            "n": self.n,
            "d": self.d,
            "T": self.T,
            "drift": [e.text for e in self.drift],
            "vol": [[e.text for e in row] for row in self.vol],
            "driver": self.driver.text,
            "terminal": self.terminal.text,
            "impulse": [e.text for e in self.impulse],
            "cost": self.cost.text,
            "actions": self.actions.tolist(),
            "box": self.box.tolist(),
            "nonlocal": self.is_nonlocal,
            **self.constants(),
        }


# ---------------------------------------------------------------------------
# Loading
# ---------------------------------------------------------------------------


def _parse_value(raw: str) -> Any:
    raw = raw.strip()
    try:
        return json.loads(raw)
    except json.JSONDecodeError:
        return raw


def _expr(text, allowed, what, v_arity=None) -> ex.Expression:
    if not isinstance(text, str):
        raise ConfigError(f"{what}: expected an expression string, got {text!r}")
    try:
        return ex.parse(text, allowed, v_arity)
    except ex.ExpressionError as err:
        raise ConfigError(f"{what}: {err}") from err


def _discretize_box(box, counts) -> np.ndarray:
    box = np.asarray(box, dtype=float).reshape(-1, 2)
    counts = np.broadcast_to(np.asarray(counts, dtype=int), (len(box),))
    if np.any(counts < 1):
        raise ConfigError("action grid counts must be at least 1")
    axes = [
        np.array([0.5 * (lo + hi)]) if c == 1 else np.linspace(lo, hi, c) for (lo, hi), c in zip(box, counts)
    ]
    return np.array(list(itertools.product(*axes)), dtype=float)


def spec_from_dict(problem: dict, actions: dict, name: str = "problem") -> ProblemSpec:
    """Build a :class:`ProblemSpec` from the ``[problem]`` and ``[actions]`` tables."""
    problem = dict(problem)
    unknown = set(problem) - PROBLEM_KEYS
    if unknown:
        raise ConfigError(f"unknown field(s) in [problem]: {', '.join(sorted(unknown))}")

    def need(key):
        if key not in problem:
            raise ConfigError(f"missing field {key!r} in [problem]")
        return problem[key]

    try:
        n = int(problem.get("n", 1))
        d = int(problem.get("d", 1))
        T = float(need("T"))
    except (TypeError, ValueError) as err:
        raise ConfigError(f"bad dimension or horizon: {err}") from err

    if "points" in actions:
        pts = np.asarray(actions["points"], dtype=float)
        if pts.ndim == 1:
            pts = pts[:, None]
    elif "box" in actions:
        pts = _discretize_box(actions["box"], actions.get("counts", 3))
    else:
        raise ConfigError("missing field 'points' or 'box' in [actions]")
    m = pts.shape[1]

    xs, zs, bs = _names("x", n), _names("z", d), _names("b", m)
    coeff_vars = ["t", *xs]
    drift = need("drift")
    vol = need("vol")
    if isinstance(drift, str):
        drift = [drift]
    if isinstance(vol, str):
        vol = [[vol]]
    if len(drift) != n:
        raise ConfigError(f"drift must have {n} entries")
    if len(vol) != n or any(len(row) != d for row in vol):
        raise ConfigError(f"vol must be a {n}x{d} matrix of expressions")
    impulse = need("impulse")
    if isinstance(impulse, str):
        impulse = [impulse]
    if len(impulse) != n:
        raise ConfigError(f"impulse map must have {n} entries")

    if "delta" not in problem:
        raise ConfigError("missing field 'delta' in [problem]")
    consts = {}
    for key in ("delta", *DEFAULT_CONSTANTS):
        raw = problem.get(key, DEFAULT_CONSTANTS.get(key))
        try:
            consts[key] = float(raw)
        except (TypeError, ValueError) as err:
            raise ConfigError(f"constant {key} must be a number") from err
    if not consts["delta"] > 0:
        raise ConfigError("cost floor must be positive")
    if not T > 0:
        raise ConfigError("horizon T must be positive")

    return ProblemSpec(
        n=n,
        d=d,
        T=T,
        drift=tuple(_expr(e, coeff_vars, f"drift[{i}]") for i, e in enumerate(drift)),
        vol=tuple(
            tuple(_expr(e, coeff_vars, f"vol[{i}][{j}]") for j, e in enumerate(row)) for i, row in enumerate(vol)
        ),
        driver=_expr(need("driver"), ["t", *xs, "y", *zs, "V"], "driver", v_arity=n),
        terminal=_expr(need("terminal"), xs, "terminal"),
        impulse=tuple(_expr(e, ["t", *xs, *bs], f"impulse[{i}]") for i, e in enumerate(impulse)),
        cost=_expr(need("cost"), ["t", *xs, *bs], "cost"),
        actions=pts,
        box=problem.get("box"),
        name=str(problem.get("name", name)),
        **consts,
    )


def parse_config(text: str) -> dict:
    """Parse sectioned key-value text into ``{section: {key: value}}``.

    Values are JSON literals (numbers, quoted strings, lists); anything that
    is not valid JSON is kept as a bare string.
    """
    cp = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#", ";"))
    cp.optionxform = str
    try:
        cp.read_string(text)
    except configparser.Error as err:
        raise ConfigError(f"config does not parse: {err}") from err
    return {sec: {k: _parse_value(v) for k, v in cp.items(sec)} for sec in cp.sections()}


def _read_text(config) -> tuple:
    if isinstance(config, (str, os.PathLike)) and os.path.exists(config):
        with open(config, encoding="utf-8") as fh:
            return fh.read(), os.path.splitext(os.path.basename(str(config)))[0]
    if isinstance(config, str) and "[" in config:
        return config, "problem"
    raise ConfigError(f"config file not found: {config}")


def load_config(config) -> dict:
    """Read a config path (or its text) into a section dict."""
    text, name = _read_text(config)
    sections = parse_config(text)
    sections.setdefault("problem", {}).setdefault("name", name)
    return sections


def load_spec(config) -> ProblemSpec:
    """Load the problem from a config file path or config text."""
    sections = config if isinstance(config, dict) else load_config(config)
    if "problem" not in sections:
        raise ConfigError("missing section [problem]")
    return spec_from_dict(sections["problem"], sections.get("actions", {}))


# ---------------------------------------------------------------------------
# Validation
# ---------------------------------------------------------------------------


@dataclass
class AssumptionCheck:
    name: str
    description: str
    status: str = "pass"  # pass | fail | warn
    n_checked: int = 0
    witnesses: list = field(default_factory=list)

    def record(self, witness: dict, status: str = "fail", keep: int = 5):
        if self.status != "fail":
            self.status = status
        if len(self.witnesses) < keep:
            self.witnesses.append(witness)


@dataclass
class ValidationReport:
    checks: dict
    n_samples: int
    seed: int

    @property
    def ok(self) -> bool:
        return all(c.status != "fail" for c in self.checks.values())

    @property
    def failures(self) -> list:
        return [name for name, c in self.checks.items() if c.status == "fail"]

    def __getitem__(self, name) -> AssumptionCheck:
        return self.checks[name]

    def to_dict(self) -> dict:
        return {
            "ok": self.ok,
            "n_samples": self.n_samples,
            "seed": self.seed,
            "checks": {
                name: {
                    "description": c.description,
                    "status": c.status,
                    "n_checked": c.n_checked,
                    "witnesses": c.witnesses,
                }
                for name, c in self.checks.items()
            },
        }


def _point(t, x, b=None, **vals) -> dict:
    out = {"t": float(t), "x": [float(v) for v in np.atleast_1d(x)]}
    if b is not None:
        out["b"] = [float(v) for v in np.atleast_1d(b)]
    out.update({k: float(v) for k, v in vals.items()})
    return out


def _norm(A, axes) -> np.ndarray:
    return np.sqrt(np.sum(A * A, axis=axes))


def _vterm_points(spec: ProblemSpec, t, X):
    """Collect the state arguments of every V-term evaluated at ``(t, X)``."""
    seen = []

    def probe(tt, pts):
        seen.append(np.asarray(pts, dtype=float))
        return np.zeros(pts.shape[:-1])

    zeros = np.zeros(X.shape[0])
    spec.driver_at(t, X, zeros, np.zeros((X.shape[0], spec.d)), value_fn=probe)
    return seen


def validate_spec(spec: ProblemSpec, n_samples: int = 1000, seed: int = 0) -> ValidationReport:
    """Check the sampled-point assumptions on ``n_samples`` random points.

    Points ``(t, x, b)`` are drawn uniformly from ``[0, T] x box x U``.
    Failures are recorded with witness points, never raised.
    """
    if n_samples < 1:
        raise ValueError("n_samples must be at least 1")
    rng = np.random.default_rng(seed)
    P = int(n_samples)
    lo, hi = spec.box[:, 0], spec.box[:, 1]
    t = rng.uniform(0.0, spec.T, P)
    X = rng.uniform(lo, hi, (P, spec.n))
    X2 = np.clip(X + rng.normal(0.0, 0.05 * (hi - lo), (P, spec.n)), lo, hi)
    bi = rng.integers(0, len(spec.actions), P)
    B = spec.actions[bi]

    checks = {
        "cost_floor": AssumptionCheck("cost_floor", "l(t,x,b) >= delta"),
        "impulse_growth": AssumptionCheck("impulse_growth", "|Gamma(t,x,b)| <= K_Gamma v |x|"),
        "terminal_gap": AssumptionCheck("terminal_gap", "psi(x) > psi(Gamma(T,x,b)) - l(T,x,b)"),
        "coefficient_growth": AssumptionCheck("coefficient_growth", "|a|+|sigma| <= C_a_sigma (1+|x|)"),
        "coefficient_lipschitz": AssumptionCheck(
            "coefficient_lipschitz", "|a-a'|+|sigma-sigma'| <= k_a_sigma |x-x'|"
        ),
        "terminal_growth": AssumptionCheck("terminal_growth", "|psi(x)| <= C_psi (1+|x|^rho)"),
        "driver_growth": AssumptionCheck("driver_growth", "|f(t,x,0,0)| <= C_f (1+|x|^rho)"),
        "driver_lipschitz": AssumptionCheck("driver_lipschitz", "|f(y,z)-f(y',z')| <= k_f (|y-y'|+|z-z'|)"),
        "nonlocal_ball": AssumptionCheck("nonlocal_ball", "V-term points lie in the ball of radius |x| v K_Gamma"),
    }
    for c in checks.values():
        c.n_checked = P

    xnorm = _norm(X, -1)

    ell = spec.cost_at(t, X, B)
    for i in np.flatnonzero(ell < spec.delta):
        checks["cost_floor"].record(_point(t[i], X[i], B[i], cost=ell[i], delta=spec.delta))

    G = spec.impulse_at(t, X, B)
    gnorm = _norm(G, -1)
    bound = np.maximum(spec.K_Gamma, xnorm)
    for i in np.flatnonzero(gnorm > bound + GROWTH_SLACK):
        checks["impulse_growth"].record(_point(t[i], X[i], B[i], impulse_norm=gnorm[i], bound=bound[i]))

    GT = spec.impulse_at(spec.T, X, B)
    psi = spec.terminal_at(X)
    lhs_gap = spec.terminal_at(GT) - spec.cost_at(spec.T, X, B)
    for i in np.flatnonzero(~(psi > lhs_gap)):
        checks["terminal_gap"].record(_point(spec.T, X[i], B[i], terminal=psi[i], after_impulse=lhs_gap[i]))

    a = spec.drift_at(t, X)
    s = spec.vol_at(t, X)
    size = _norm(a, -1) + _norm(s, (-2, -1))
    gbound = spec.C_a_sigma * (1.0 + xnorm)
    for i in np.flatnonzero(size > gbound + GROWTH_SLACK):
        checks["coefficient_growth"].record(_point(t[i], X[i], size=size[i], bound=gbound[i]))

    a2 = spec.drift_at(t, X2)
    s2 = spec.vol_at(t, X2)
    dist = _norm(X - X2, -1)
    diff = _norm(a - a2, -1) + _norm(s - s2, (-2, -1))
    lip_bound = spec.k_a_sigma * dist
    for i in np.flatnonzero(diff > lip_bound + GROWTH_SLACK):
        witness = _point(t[i], X[i], change=diff[i], bound=lip_bound[i])
        witness["x_pair"] = [float(v) for v in X2[i]]
        checks["coefficient_lipschitz"].record(witness)

    pbound = spec.C_psi * (1.0 + xnorm**spec.rho)
    for i in np.flatnonzero(np.abs(psi) > pbound + GROWTH_SLACK):
        checks["terminal_growth"].record(_point(spec.T, X[i], terminal=psi[i], bound=pbound[i]))

    zero_fn = (lambda tt, pts: np.zeros(pts.shape[:-1])) if spec.is_nonlocal else None
    zeros = np.zeros(P)
    f0 = spec.driver_at(t, X, zeros, np.zeros((P, spec.d)), value_fn=zero_fn)
    fbound = spec.C_f * (1.0 + xnorm**spec.rho)
    for i in np.flatnonzero(np.abs(f0) > fbound + GROWTH_SLACK):
        checks["driver_growth"].record(_point(t[i], X[i], driver=f0[i], bound=fbound[i]))

    y1, y2 = rng.normal(0, 1, P), rng.normal(0, 1, P)
    z1, z2 = rng.normal(0, 1, (P, spec.d)), rng.normal(0, 1, (P, spec.d))
    fa = spec.driver_at(t, X, y1, z1, value_fn=zero_fn)
    fb = spec.driver_at(t, X, y2, z2, value_fn=zero_fn)
    lb = spec.k_f * (np.abs(y1 - y2) + _norm(z1 - z2, -1))
    for i in np.flatnonzero(np.abs(fa - fb) > lb + GROWTH_SLACK):
        checks["driver_lipschitz"].record(_point(t[i], X[i], change=abs(fa[i] - fb[i]), bound=lb[i]))

    if spec.is_nonlocal:
        radius = np.maximum(xnorm, spec.K_Gamma)
        for pts in _vterm_points(spec, t, X):
            pn = _norm(pts, -1)
            for i in np.flatnonzero(pn > radius + GROWTH_SLACK):
                checks["nonlocal_ball"].record(
                    _point(t[i], X[i], point_norm=pn[i], radius=radius[i]), status="warn"
                )

    return ValidationReport(checks=checks, n_samples=P, seed=seed)
