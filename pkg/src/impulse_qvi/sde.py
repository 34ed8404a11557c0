"""Forward simulation: uncontrolled, impulsively controlled and dominating paths.

Noise is counter-based.  The standard normal increment for ``(seed, step,
path, component)`` is a pure function of those four integers: each step and
block of :data:`BLOCK` paths gets its own Philox key, so any split of the
path range into chunks (or threads) reproduces the same bits.
"""

from __future__ import annotations

import math
import os
import struct
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from scipy.special import ndtri

from .model import ProblemSpec

__all__ = [
    "BLOCK",
    "TimeGrid",
    "PathEnsemble",
    "ImpulseControl",
    "DominatingPaths",
    "SimulationError",
    "ImpulseGrowthWarning",
    "standard_normals",
    "brownian_increments",
    "simulate_paths",
    "apply_impulse",
    "simulate_controlled",
    "simulate_dominating",
    "matched_alpha",
    "dump_ensemble",
    "load_ensemble",
    "thread_count",
]

BLOCK = 1024
THREADS_ENV = "IMPULSE_QVI_THREADS"
_MAGIC = b"QVIENS01"


class SimulationError(RuntimeError):
    def __init__(self, message: str, step: int | None = None):
        self.step = step
        super().__init__(message if step is None else f"{message} at step {step}")


class ImpulseGrowthWarning(UserWarning):
    """An impulse moved a state outside the ball of radius K_Gamma v |x|."""


def thread_count() -> int:
    try:
        return max(1, int(os.environ.get(THREADS_ENV, "1")))
    except ValueError:
        return 1


@dataclass(frozen=True)
class TimeGrid:
    t0: float
    T: float
    n_steps: int

    def __post_init__(self):
        if self.n_steps < 1:
            raise ValueError("time grid needs at least one step")
        if not self.T > self.t0:
            raise ValueError("time grid needs T > t0")

    @property
    def dt(self) -> float:
        return (self.T - self.t0) / self.n_steps

    @property
    def times(self) -> np.ndarray:
        t = self.t0 + self.dt * np.arange(self.n_steps + 1)
        t[-1] = self.T
        return t

    def index_of(self, t: float) -> int:
        k = int(round((t - self.t0) / self.dt))
        return min(max(k, 0), self.n_steps)


# ---------------------------------------------------------------------------
# Noise
# ---------------------------------------------------------------------------


def _block_normals(seed: int, step: int, block: int, count: int) -> np.ndarray:
    key = np.array([seed & 0xFFFFFFFFFFFFFFFF, (step << 32) | block], dtype=np.uint64)
    raw = np.random.Philox(key=key).random_raw(count)
    u = ((raw >> np.uint64(11)).astype(np.float64) + 0.5) * 2.0**-53
    return ndtri(u)


def standard_normals(seed: int, step: int, start: int, stop: int, d: int) -> np.ndarray:
    """N(0,1) draws of shape ``(stop - start, d)`` for paths ``start..stop-1``."""
    if stop <= start:
        return np.zeros((0, d))
    b0, b1 = start // BLOCK, (stop - 1) // BLOCK
    parts = [_block_normals(seed, step, b, BLOCK * d) for b in range(b0, b1 + 1)]
    flat = np.concatenate(parts).reshape(-1, d)
    off = start - b0 * BLOCK
    return flat[off : off + (stop - start)]


def brownian_increments(seed: int, grid: TimeGrid, start: int, stop: int, d: int) -> np.ndarray:
    """Increments ``dW`` of shape ``(n_steps, stop - start, d)``."""
    s = math.sqrt(grid.dt)
    return np.stack([s * standard_normals(seed, k, start, stop, d) for k in range(grid.n_steps)])


def _chunks(n_paths: int, threads: int) -> list:
    if threads <= 1 or n_paths <= BLOCK:
        return [(0, n_paths)]
    per = -(-n_paths // threads)
    per = -(-per // BLOCK) * BLOCK
    return [(a, min(a + per, n_paths)) for a in range(0, n_paths, per)]


def _parallel(fn, n_paths: int):
    chunks = _chunks(n_paths, thread_count())
    if len(chunks) == 1:
        return [fn(*chunks[0])]
    with ThreadPoolExecutor(max_workers=len(chunks)) as pool:
        return list(pool.map(lambda c: fn(*c), chunks))


# ---------------------------------------------------------------------------
# Ensembles
# ---------------------------------------------------------------------------


@dataclass
class PathEnsemble:
    """Simulated states on a time grid.

    ``X[k]`` is the state from which the diffusion step ``k`` starts (the
    post-impulse state for controlled ensembles); ``X_pre[k]`` is the state
    just before a possible impulse at ``t_k``.  ``start_index`` labels the
    seed node of every path when bundles are started from several points.
    """

    X: np.ndarray  # (n_steps + 1, P, n)
    dW: np.ndarray  # (n_steps, P, d)
    grid: TimeGrid
    seed: int
    X_pre: np.ndarray | None = None
    start_index: np.ndarray | None = None

    @property
    def n_paths(self) -> int:
        return self.X.shape[1]

    @property
    def n(self) -> int:
        return self.X.shape[2]

    @property
    def d(self) -> int:
        return self.dW.shape[2]

    @property
    def pre_states(self) -> np.ndarray:
        return self.X if self.X_pre is None else self.X_pre


@dataclass
class ImpulseControl:
    """Realized impulses, one record per event, sorted by (path, step)."""

    path: np.ndarray
    step: np.ndarray
    action: np.ndarray
    cost: np.ndarray
    counts: np.ndarray  # (P,)
    xi: np.ndarray  # (n_steps + 1, P) cumulative cost of impulses strictly before t_k
    capped: np.ndarray  # (P,) bool

    @property
    def step_costs(self) -> np.ndarray:
        return np.diff(self.xi, axis=0)

    def impulses_of(self, i: int) -> list:
        sel = self.path == i
        return list(zip(self.step[sel].tolist(), self.action[sel].tolist()))


def _start_states(x0, n_paths: int, n: int) -> np.ndarray:
    x0 = np.asarray(x0, dtype=float)
    if x0.ndim == 1:
        if x0.shape[0] != n:
            raise ValueError(f"start state must have {n} components")
        return np.broadcast_to(x0, (n_paths, n)).copy()
    if x0.shape != (n_paths, n):
        raise ValueError(f"start states must have shape ({n_paths}, {n})")
    return x0.copy()


def _euler(spec: ProblemSpec, t: float, x: np.ndarray, dw: np.ndarray, dt: float) -> np.ndarray:
    drift = spec.drift_at(t, x)
    vol = spec.vol_at(t, x)
    return x + drift * dt + np.einsum("pij,pj->pi", vol, dw)


def simulate_paths(spec: ProblemSpec, t0: float, x0, grid: TimeGrid, n_paths: int, seed: int) -> PathEnsemble:
    """Euler-Maruyama paths of the uncontrolled SDE.

    ``x0`` is one start state ``(n,)`` or one per path ``(n_paths, n)``.
    """
    if abs(grid.t0 - t0) > 1e-12:
        raise ValueError("grid must start at t0")
    X0 = _start_states(x0, n_paths, spec.n)
    if not np.all(np.isfinite(X0)):
        raise SimulationError("non-finite start state", 0)
    times = grid.times

    def run(a, b):
        dW = brownian_increments(seed, grid, a, b, spec.d)
        X = np.empty((grid.n_steps + 1, b - a, spec.n))
        X[0] = X0[a:b]
        for k in range(grid.n_steps):
            X[k + 1] = _euler(spec, times[k], X[k], dW[k], grid.dt)
            if not np.all(np.isfinite(X[k + 1])):
                raise SimulationError("non-finite state", k + 1)
        return X, dW

    parts = _parallel(run, n_paths)
    X = np.concatenate([p[0] for p in parts], axis=1)
    dW = np.concatenate([p[1] for p in parts], axis=1)
    return PathEnsemble(X=X, dW=dW, grid=grid, seed=seed)


def _impulse_check(spec: ProblemSpec, x: np.ndarray, g: np.ndarray) -> None:
    bound = np.maximum(spec.K_Gamma, np.linalg.norm(x, axis=-1))
    if np.any(np.linalg.norm(g, axis=-1) > bound + 1e-9):
        warnings.warn("impulse exceeds the growth bound K_Gamma v |x|", ImpulseGrowthWarning, stacklevel=3)


def apply_impulse(spec: ProblemSpec, t: float, x, b) -> np.ndarray:
    """Post-impulse state ``Gamma(t, x, b)``; warns when the growth bound fails."""
    x = np.asarray(x, dtype=float)
    b = np.asarray(b, dtype=float)
    squeeze = x.ndim == 1
    X = np.atleast_2d(x)
    B = np.broadcast_to(np.atleast_2d(b), (X.shape[0], spec.m))
    g = spec.impulse_at(t, X, B)
    _impulse_check(spec, X, g)
    return g[0] if squeeze else g


def _default_cap(spec: ProblemSpec) -> int:
    return 10 * math.ceil(spec.T) * len(spec.actions)


def simulate_controlled(
    spec: ProblemSpec,
    rule,
    t0: float,
    x0,
    grid: TimeGrid,
    n_paths: int,
    seed: int,
    cap: int | None = None,
) -> tuple:
    """Simulate under a feedback impulse rule.

    ``rule(k, t, X)`` returns an action index per path, ``-1`` meaning no
    impulse.  At most one impulse happens per grid node and none at ``T``.
    Returns ``(ensemble, control, xi)`` where ``xi`` is the cumulative cost
    trajectory of shape ``(n_steps + 1, n_paths)``.
    """
    if abs(grid.t0 - t0) > 1e-12:
        raise ValueError("grid must start at t0")
    cap = _default_cap(spec) if cap is None else int(cap)
    X0 = _start_states(x0, n_paths, spec.n)
    times = grid.times
    n_actions = len(spec.actions)

    def run(a, b):
        P = b - a
        dW = brownian_increments(seed, grid, a, b, spec.d)
        X = np.empty((grid.n_steps + 1, P, spec.n))
        X_pre = np.empty_like(X)
        xi = np.zeros((grid.n_steps + 1, P))
        counts = np.zeros(P, dtype=np.int64)
        capped = np.zeros(P, dtype=bool)
        events = []
        x = X0[a:b].copy()
        for k in range(grid.n_steps):
            X_pre[k] = x
            choice = np.asarray(rule(k, times[k], x), dtype=np.int64).reshape(P)
            act = choice >= 0
            if np.any(choice >= n_actions) or np.any(choice < -1):
                raise ValueError(f"rule proposed an action outside U at step {k}")
            at_cap = act & (counts >= cap)
            capped |= at_cap
            act &= ~at_cap
            step_cost = np.zeros(P)
            if np.any(act):
                idx = np.flatnonzero(act)
                B = spec.actions[choice[idx]]
                g = spec.impulse_at(times[k], x[idx], B)
                _impulse_check(spec, x[idx], g)
                c = spec.cost_at(times[k], x[idx], B)
                x = x.copy()
                x[idx] = g
                step_cost[idx] = c
                counts[idx] += 1
                events.append((idx + a, np.full(idx.size, k), choice[idx], c))
            X[k] = x
            xi[k + 1] = xi[k] + step_cost
            x = _euler(spec, times[k], x, dW[k], grid.dt)
            if not np.all(np.isfinite(x)):
                raise SimulationError("non-finite state", k + 1)
        X[-1] = x
        X_pre[-1] = x
        return X, X_pre, dW, xi, counts, capped, events

    parts = _parallel(run, n_paths)
    X = np.concatenate([p[0] for p in parts], axis=1)
    X_pre = np.concatenate([p[1] for p in parts], axis=1)
    dW = np.concatenate([p[2] for p in parts], axis=1)
    xi = np.concatenate([p[3] for p in parts], axis=1)
    counts = np.concatenate([p[4] for p in parts])
    capped = np.concatenate([p[5] for p in parts])
    events = [e for p in parts for e in p[6]]
    if events:
        path = np.concatenate([e[0] for e in events])
        step = np.concatenate([e[1] for e in events])
        action = np.concatenate([e[2] for e in events])
        cost = np.concatenate([e[3] for e in events])
        order = np.lexsort((step, path))
        path, step, action, cost = path[order], step[order], action[order], cost[order]
    else:
        path = step = action = np.zeros(0, dtype=np.int64)
        cost = np.zeros(0)
    ens = PathEnsemble(X=X, dW=dW, grid=grid, seed=seed, X_pre=X_pre)
    control = ImpulseControl(path=path, step=step, action=action, cost=cost, counts=counts, xi=xi, capped=capped)
    return ens, control, xi


# ---------------------------------------------------------------------------
# Dominating reflected SDE
# ---------------------------------------------------------------------------


@dataclass
class DominatingPaths:
    psi: np.ndarray  # (n_steps + 1, P), squared radius
    theta: np.ndarray  # (n_steps + 1, P), cumulative reflection
    alpha: np.ndarray  # (n_steps, P, d)
    grid: TimeGrid
    floor: float
    active: np.ndarray = field(default=None)  # (n_steps, P) reflection fired on step k

    @property
    def R(self) -> np.ndarray:
        return np.sqrt(self.psi)


def matched_alpha(spec: ProblemSpec, t: float, x: np.ndarray, psi: np.ndarray, coef: float) -> np.ndarray:
    """Per-path control whose diffusion term reproduces that of ``|X|^2``.

    Solves ``coef * C (1 + Psi) alpha = 2 X^T sigma(X)`` and clips to [-1, 1].
    """
    vol = spec.vol_at(t, x)
    xs = np.einsum("pi,pij->pj", x, vol)
    scale = coef * spec.C_a_sigma * (1.0 + psi)
    with np.errstate(divide="ignore", invalid="ignore"):
        alpha = np.where(scale[:, None] > 0, 2.0 * xs / scale[:, None], 0.0)
    return np.clip(alpha, -1.0, 1.0)


def simulate_dominating(
    spec: ProblemSpec,
    gamma: float,
    alpha,
    t0: float,
    grid: TimeGrid,
    n_paths: int,
    seed: int,
    coef: float = 4.0,
    controlled: PathEnsemble | None = None,
) -> DominatingPaths:
    """Euler scheme with projection for the dominating squared-radius process.

    ``alpha`` is a constant ``(d,)`` vector, a schedule ``(n_steps, d)`` or
    ``(n_steps, P, d)``, or the string ``"matched"``, which needs the
    ``controlled`` ensemble simulated with the same seed.
    """
    if gamma < 0:
        raise ValueError("gamma must be non-negative")
    floor = max(gamma**2, spec.K_Gamma**2)
    C = spec.C_a_sigma
    drift_c = 4.0 * C + 2.0 * C**2
    diff_c = coef * C
    N, dt = grid.n_steps, grid.dt
    times = grid.times
    matched = isinstance(alpha, str)
    if matched:
        if alpha != "matched":
            raise ValueError(f"unknown alpha mode {alpha!r}")
        if controlled is None or controlled.n_paths != n_paths or controlled.seed != seed:
            raise ValueError("matched alpha needs the controlled ensemble with the same seed and size")
        dW = controlled.dW
    else:
        dW = brownian_increments(seed, grid, 0, n_paths, spec.d)
        a = np.asarray(alpha, dtype=float)
        if a.ndim <= 1:
            a = np.broadcast_to(a.reshape(-1), (N, n_paths, spec.d))
        elif a.ndim == 2:
            a = np.broadcast_to(a[:, None, :], (N, n_paths, spec.d))
        if a.shape != (N, n_paths, spec.d) or np.any(np.abs(a) > 1.0):
            raise ValueError("alpha must take values in [-1, 1]^d on every step")
    psi = np.empty((N + 1, n_paths))
    theta = np.zeros((N + 1, n_paths))
    alphas = np.empty((N, n_paths, spec.d))
    active = np.zeros((N, n_paths), dtype=bool)
    psi[0] = floor
    for k in range(N):
        p = psi[k]
        ak = matched_alpha(spec, times[k], controlled.X[k], p, coef) if matched else a[k]
        alphas[k] = ak
        pre = p + drift_c * (1.0 + p) * dt + diff_c * (1.0 + p) * np.einsum("pj,pj->p", ak, dW[k])
        nxt = np.maximum(pre, floor)
        psi[k + 1] = nxt
        active[k] = nxt > pre
        theta[k + 1] = theta[k] + (nxt - pre)
        if not np.all(np.isfinite(nxt)):
            raise SimulationError("non-finite dominating process", k + 1)
    return DominatingPaths(psi=psi, theta=theta, alpha=alphas, grid=grid, floor=floor, active=active)


# ---------------------------------------------------------------------------
# Binary dump
# ---------------------------------------------------------------------------


def dump_ensemble(ens: PathEnsemble, path) -> None:
    """Write ``X`` then ``dW`` as little-endian float64 after a fixed header.

    Header: 8-byte magic, then ``n_paths, n_steps, n, d, seed`` as uint64 and
    ``t0, T`` as float64.
    """
    header = _MAGIC + struct.pack(
        "<5Q2d", ens.n_paths, ens.grid.n_steps, ens.n, ens.d, ens.seed & 0xFFFFFFFFFFFFFFFF, ens.grid.t0, ens.grid.T
    )
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(header)
        fh.write(np.ascontiguousarray(ens.X, dtype="<f8").tobytes())
        fh.write(np.ascontiguousarray(ens.dW, dtype="<f8").tobytes())
    os.replace(tmp, path)


def load_ensemble(path) -> PathEnsemble:
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:8] != _MAGIC:
        raise ValueError(f"{path}: not an ensemble dump")
    P, N, n, d, seed, t0, T = struct.unpack_from("<5Q2d", blob, 8)
    off = 8 + struct.calcsize("<5Q2d")
    nx = (N + 1) * P * n
    X = np.frombuffer(blob, dtype="<f8", count=nx, offset=off).reshape(N + 1, P, n).copy()
    dW = np.frombuffer(blob, dtype="<f8", count=N * P * d, offset=off + 8 * nx).reshape(N, P, d).copy()
    return PathEnsemble(X=X, dW=dW, grid=TimeGrid(t0, T, int(N)), seed=int(seed))
