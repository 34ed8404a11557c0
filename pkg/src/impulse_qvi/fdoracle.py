"""Finite-difference oracle for the QVI on one- and two-dimensional boxes.

Each backward step solves the discrete obstacle problem

    min(A v - b, v - M v) = 0,    A = I - theta dt L,

by Howard policy iteration for a frozen obstacle, inside a sweep that
recomputes the obstacle ``M v`` from the same time slice until the contact
set settles.  The driver is evaluated explicitly at the previous slice.
"""

from __future__ import annotations

import itertools

import numpy as np
from scipy import sparse
from scipy.sparse.linalg import spsolve
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_array, check_is_fitted

from . import expr as ex
from .impulse import ValueFunction
from .model import ProblemSpec
from .regression import HatBasis

__all__ = [
    "FdGrid",
    "FdError",
    "BOUNDARY_MODES",
    "fd_solve_local_qvi",
    "fd_solve_nonlocal_qvi",
    "fd_reference",
    "transform_lambda",
    "FDSolver",
]

BOUNDARY_MODES = ("dirichlet", "ode")
PECLET_MAX = 2.0
SWEEP_TOL = 1e-12


class FdError(RuntimeError):
    """Stability violation or a sweep that failed to settle."""

    def __init__(self, message: str, diagnostics: dict | None = None):
        self.diagnostics = diagnostics or {}
        super().__init__(f"{message} {self.diagnostics}" if diagnostics else message)


class FdGrid:
    """Rectilinear node grid on a box with a uniform time grid on ``[0, T]``.

    ``boundary="dirichlet"`` freezes boundary nodes at ``psi``;
    ``boundary="ode"`` drops the spatial operator there, so boundary nodes
    follow ``v_t + f = 0``.
    """

    def __init__(self, box, nodes, n_steps: int, T: float, boundary: str = "dirichlet"):
        self.box = np.asarray(box, dtype=float).reshape(-1, 2)
        counts = np.broadcast_to(np.asarray(nodes, dtype=int), (self.box.shape[0],))
        if np.any(counts < 3):
            raise ValueError("need at least 3 nodes per axis")
        if n_steps < 1 or not T > 0:
            raise ValueError("need n_steps >= 1 and T > 0")
        if boundary not in BOUNDARY_MODES:
            raise ValueError(f"unknown boundary mode {boundary!r}")
        self.axes = [np.linspace(lo, hi, c) for (lo, hi), c in zip(self.box, counts)]
        self.shape = tuple(int(c) for c in counts)
        self.n_steps = int(n_steps)
        self.T = float(T)
        self.boundary = boundary

    @property
    def n(self) -> int:
        return len(self.axes)

    @property
    def h(self) -> np.ndarray:
        return np.array([a[1] - a[0] for a in self.axes])

    @property
    def dt(self) -> float:
        return self.T / self.n_steps

    @property
    def times(self) -> np.ndarray:
        t = self.dt * np.arange(self.n_steps + 1)
        t[-1] = self.T
        return t

    @property
    def size(self) -> int:
        return int(np.prod(self.shape))

    @property
    def nodes(self) -> np.ndarray:
        return np.array(list(itertools.product(*self.axes)), dtype=float).reshape(-1, self.n)

    def boundary_mask(self) -> np.ndarray:
        mask = np.zeros(self.shape, dtype=bool)
        for j in range(self.n):
            sl = [slice(None)] * self.n
            sl[j] = 0
            mask[tuple(sl)] = True
            sl[j] = -1
            mask[tuple(sl)] = True
        return mask.reshape(-1)

    def refined(self) -> "FdGrid":
        """Halve the spacing (nested nodes) and the time step."""
        return FdGrid(self.box, [2 * (s - 1) + 1 for s in self.shape], 2 * self.n_steps, self.T, self.boundary)

    def to_dict(self) -> dict:
        return {"box": self.box.tolist(), "nodes": list(self.shape), "n_steps": self.n_steps, "boundary": self.boundary}


def _generator(spec: ProblemSpec, t: float, grid: FdGrid, X: np.ndarray, interior: np.ndarray):
    """Sparse generator ``L`` with zero rows on the boundary, and its max explicit rate."""
    G = grid.size
    h = grid.h
    a = spec.drift_at(t, X)
    sig = spec.vol_at(t, X)
    D = 0.5 * np.einsum("pik,pjk->pij", sig, sig)
    strides = np.cumprod((1,) + grid.shape[::-1])[:-1][::-1]
    rows, cols, vals = [], [], []
    ids = np.flatnonzero(interior)
    diag = np.zeros(G)

    def put(r, c, v):
        rows.append(r)
        cols.append(c)
        vals.append(v)

    for j in range(grid.n):
        s = strides[j]
        dj = D[ids, j, j]
        aj = a[ids, j]
        second = dj / h[j] ** 2
        with np.errstate(divide="ignore", invalid="ignore"):
            upwind = (dj <= 0) | (np.abs(aj) * h[j] / np.where(dj > 0, dj, 1.0) > PECLET_MAX)
        up = np.where(upwind, np.maximum(aj, 0.0) / h[j], aj / (2 * h[j]))
        dn = np.where(upwind, np.maximum(-aj, 0.0) / h[j], -aj / (2 * h[j]))
        centre = -np.where(upwind, np.abs(aj) / h[j], 0.0)
        put(ids, ids + s, second + up)
        put(ids, ids - s, second + dn)
        diag[ids] += -2.0 * second + centre
    for j, l in itertools.combinations(range(grid.n), 2):
        c = 2.0 * D[ids, j, l] / (4.0 * h[j] * h[l])
        sj, sl = strides[j], strides[l]
        put(ids, ids + sj + sl, c)
        put(ids, ids - sj - sl, c)
        put(ids, ids + sj - sl, -c)
        put(ids, ids - sj + sl, -c)
    rows.append(np.arange(G))
    cols.append(np.arange(G))
    vals.append(diag)
    L = sparse.csr_matrix(
        (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))), shape=(G, G)
    )
    rate = float(np.max(-diag)) if G else 0.0
    return L, rate


def _gradient_z(spec, t, grid: FdGrid, X, v):
    """``sigma^T grad v`` with central differences (one-sided on the boundary)."""
    V = v.reshape(grid.shape)
    grads = np.gradient(V, *grid.axes) if grid.n > 1 else [np.gradient(V, grid.axes[0])]
    grad = np.stack([g.reshape(-1) for g in grads], axis=1)
    return np.einsum("pij,pi->pj", spec.vol_at(t, X), grad)


class _Intervention:
    """``M`` on the node grid via multilinear interpolation of the slice."""

    def __init__(self, spec: ProblemSpec, grid: FdGrid, X: np.ndarray):
        self.spec = spec
        self.X = X
        self.basis = HatBasis(grid.box, grid.shape)
        self._t = None

    def _prepare(self, t):
        if self._t == t:
            return
        spec, X = self.spec, self.X
        self._feat = []
        for b in spec.actions:
            B = np.broadcast_to(b, (X.shape[0], spec.m))
            idx, w = self.basis.features(spec.impulse_at(t, X, B))
            self._feat.append((idx, w, spec.cost_at(t, X, B)))
        self._t = t

    def __call__(self, t, v):
        self._prepare(t)
        best = np.full(v.shape[0], -np.inf)
        arg = np.zeros(v.shape[0], dtype=np.int64)
        for i, (idx, w, cost) in enumerate(self._feat):
            cand = np.sum(v[idx] * w, axis=1) - cost
            better = cand > best
            best = np.where(better, cand, best)
            arg = np.where(better, i, arg)
        return best, arg


def _howard(A, b, ob, max_iter=200):
    """Solve ``min(A v - b, v - ob) = 0`` by policy iteration."""
    G = b.shape[0]
    contact = np.zeros(G, dtype=bool)
    for it in range(max_iter):
        keep = sparse.diags((~contact).astype(float))
        M = (keep @ A + sparse.diags(contact.astype(float))).tocsc()
        v = spsolve(M, np.where(contact, ob, b))
        new = (v - ob) < (A @ v - b)
        if np.array_equal(new, contact):
            return v, contact, it + 1
        contact = new
    raise FdError("policy iteration did not settle", {"iterations": max_iter})


def _solve(spec: ProblemSpec, grid: FdGrid, theta: float, frozen_value=None, max_sweeps: int = 50):
    if spec.n > 2:
        raise ValueError("finite-difference oracle supports n <= 2")
    if not 0.0 <= theta <= 1.0:
        raise ValueError("theta must lie in [0, 1]")
    if spec.is_nonlocal and frozen_value is None:
        raise ValueError("non-local driver needs a frozen value function")
    X = grid.nodes
    G = grid.size
    bmask = grid.boundary_mask()
    interior = ~bmask
    times, dt = grid.times, grid.dt
    value_fn = None if frozen_value is None else (lambda t, pts: frozen_value(t, pts))
    M = _Intervention(spec, grid, X)
    psi = spec.terminal_at(X)
    V = np.empty((grid.n_steps + 1, G))
    V[-1] = psi
    cache = None
    sweeps, residual = [], 0.0
    for k in range(grid.n_steps - 1, -1, -1):
        t = times[k]
        if cache is None or spec.time_dependent_coefficients:
            L, rate = _generator(spec, t, grid, X, interior)
            if theta < 1.0 and (1.0 - theta) * dt * rate > 1.0:
                raise FdError("explicit part violates the stability bound", {"dt": dt, "limit": 1.0 / ((1.0 - theta) * rate)})
            A = (sparse.identity(G, format="csr") - theta * dt * L).tocsr()
            cache = (L, A)
        L, A = cache
        vn = V[k + 1]
        Z = _gradient_z(spec, t, grid, X, vn) if spec.driver_uses_z else None
        b = vn + dt * spec.driver_at(t, X, vn, Z, value_fn)
        if theta < 1.0:
            b = b + (1.0 - theta) * dt * (L @ vn)
        if grid.boundary == "dirichlet":
            b = np.where(bmask, psi, b)
        v_cur, prev = vn, None
        for s in range(1, max_sweeps + 1):
            ob, _ = M(t, v_cur)
            v_new, contact, _ = _howard(A, b, ob)
            change = float(np.max(np.abs(v_new - v_cur)))
            v_cur = v_new
            if prev is not None and np.array_equal(contact, prev) and change <= SWEEP_TOL * (1.0 + np.max(np.abs(v_cur))):
                break
            prev = contact
        else:
            raise FdError("obstacle sweep did not settle", {"step": k, "sweeps": max_sweeps, "last_change": change})
        sweeps.append(s)
        ob, _ = M(t, v_cur)
        v_cur = np.maximum(v_cur, ob)
        free = v_cur > ob
        if np.any(free):
            residual = max(residual, float(np.max(np.abs((A @ v_cur - b)[free]))))
        V[k] = v_cur
    vf = ValueFunction(times, grid.axes, V.reshape((grid.n_steps + 1,) + grid.shape))
    vf.meta = {"grid": grid.to_dict(), "theta": theta, "max_sweeps": int(max(sweeps)), "pde_residual": residual}
    return vf


def fd_solve_local_qvi(spec: ProblemSpec, grid: FdGrid, theta: float = 1.0, frozen_value=None, max_sweeps: int = 50) -> ValueFunction:
    """Backward theta-scheme for the local QVI; ``frozen_value`` feeds any V-terms."""
    return _solve(spec, grid, theta, frozen_value, max_sweeps)


def fd_solve_nonlocal_qvi(
    spec: ProblemSpec, grid: FdGrid, theta: float = 1.0, k_max: int = 30, tol: float = 1e-10, max_sweeps: int = 50
) -> ValueFunction:
    """Outer Picard iteration from ``v^0 = 0`` with V-terms frozen at the last solve."""
    shape = (grid.n_steps + 1,) + grid.shape
    v = ValueFunction(grid.times, grid.axes, np.zeros(shape))
    incs, status = [], "max-iterations"
    for _ in range(k_max):
        v_new = _solve(spec, grid, theta, v, max_sweeps)
        inc = float(np.max(np.abs(v_new.values - v.values)))
        incs.append(inc)
        v = v_new
        if inc <= tol:
            status = "converged"
            break
        if len(incs) >= 4 and incs[-1] > incs[-2] > incs[-3] > incs[-4]:
            status = "diverged"
            break
    v.meta["outer_increments"] = incs
    v.meta["outer_status"] = status
    return v


def fd_reference(spec: ProblemSpec, grid: FdGrid, probes, theta: float = 1.0, levels: int = 2, **kw) -> dict:
    """Probe values at ``levels`` nested resolutions with self-convergence data.

    ``error`` is ``|v_h - v_{h/2}|`` per probe, the error estimate of the
    coarse solution for a first-order scheme; ``ratios`` are successive
    change ratios when ``levels >= 3``.
    """
    probes = np.asarray(probes, dtype=float).reshape(-1, spec.n)
    solve = fd_solve_nonlocal_qvi if spec.is_nonlocal else fd_solve_local_qvi
    values, g, surfaces = [], grid, []
    for _ in range(levels):
        vf = solve(spec, g, theta, **kw)
        surfaces.append(vf)
        values.append(vf(0.0, probes))
        g = g.refined()
    values = np.array(values)
    changes = np.abs(np.diff(values, axis=0))
    with np.errstate(divide="ignore", invalid="ignore"):
        ratios = changes[1:] / changes[:-1] if levels >= 3 else np.zeros((0, probes.shape[0]))
    return {
        "probes": probes,
        "values": values,
        "value": values[0],
        "error": changes[0] if levels >= 2 else np.zeros(probes.shape[0]),
        "changes": changes,
        "ratios": ratios,
        "surfaces": surfaces,
    }


def transform_lambda(spec: ProblemSpec, lam: float) -> ProblemSpec:
    """Exponentially rescaled problem whose solution is ``e^{lam t} v``.

    ``l -> e^{lam t} l``, ``psi -> e^{lam T} psi`` and
    ``f(t,x,y,z) -> -lam y + e^{lam t} f(t, x, e^{-lam t} y, e^{-lam t} z)``.
    """
    if spec.is_nonlocal:
        raise ValueError("transform_lambda is defined for local drivers")
    if lam == 0:
        return spec
    t = ex.var("t")
    grow = ex.call("exp", ex.mul(ex.num(lam), t))
    shrink = ex.call("exp", ex.mul(ex.num(-lam), t))
    zs = [f"z{j + 1}" for j in range(spec.d)]
    mapping = {name: ex.mul(shrink, ex.var(name)) for name in ["y", *zs]}
    f_new = ex.add(ex.mul(ex.num(-lam), ex.var("y")), ex.mul(grow, ex.substitute(spec.driver, mapping)))
    xs = spec.state_names
    bs = [f"b{j + 1}" for j in range(spec.m)]
    return spec.replace(
        driver=ex.from_node(f_new, ["t", *xs, "y", *zs, "V"], v_arity=spec.n),
        terminal=ex.from_node(ex.mul(ex.num(np.exp(lam * spec.T)), spec.terminal.root), xs),
        cost=ex.from_node(ex.mul(grow, spec.cost.root), ["t", *xs, *bs]),
        name=f"{spec.name}+lambda{lam:g}",
    )


class FDSolver(BaseEstimator):
    """Estimator wrapper for the finite-difference oracle."""

    def __init__(self, box=None, nodes=400, n_steps=200, theta=1.0, boundary="dirichlet", k_max=30, tol=1e-10, max_sweeps=50):
        self.box = box
        self.nodes = nodes
        self.n_steps = n_steps
        self.theta = theta
        self.boundary = boundary
        self.k_max = k_max
        self.tol = tol
        self.max_sweeps = max_sweeps

    def grid_for(self, spec: ProblemSpec) -> FdGrid:
        box = self.box if self.box is not None else spec.box
        return FdGrid(box, self.nodes, self.n_steps, spec.T, self.boundary)

    def fit(self, spec: ProblemSpec, y=None):
        grid = self.grid_for(spec)
        if spec.is_nonlocal:
            vf = fd_solve_nonlocal_qvi(spec, grid, self.theta, self.k_max, self.tol, self.max_sweeps)
        else:
            vf = fd_solve_local_qvi(spec, grid, self.theta, max_sweeps=self.max_sweeps)
        self.spec_ = spec
        self.grid_ = grid
        self.value_function_ = vf
        return self

    def predict(self, X, t=0.0):
        check_is_fitted(self, "value_function_")
        X = check_array(X, dtype=np.float64)
        return self.value_function_(t, X)
