"""Iteration ladders for the QVI: the local k-impulse scheme, the outer
Picard iteration for non-local drivers, and the weighted monitoring norm.
"""

from __future__ import annotations

import itertools
import time
import warnings
from dataclasses import asdict, dataclass, field, fields

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_array, check_is_fitted

from .impulse import ValueFunction, obstacle_from
from .model import ProblemSpec
from .rbsde import RegressionExpectation, solve_bsde, solve_reflected
from .sde import PathEnsemble, TimeGrid, simulate_dominating, simulate_paths

__all__ = [
    "SolverConfig",
    "IterationRecord",
    "ConvergenceReport",
    "DivergenceError",
    "NormWarning",
    "derive_seed",
    "seed_ensemble",
    "probe_set",
    "solve_local",
    "solve_nonlocal",
    "weighted_norm",
    "weighted_norm_stats",
    "default_alphas",
    "LSMCSolver",
]

CONVERGED, MAX_ITER, DIVERGED = "converged", "max-iterations", "diverged"
DIVERGENCE_RUN = 3
# beyond this many basis columns, standard errors are only computed on the
# probe time slices
FULL_STDERR_MAX = 64


class DivergenceError(RuntimeError):
    pass


class NormWarning(UserWarning):
    """Dominating radius left the value grid; the inner sup was clamped."""


@dataclass
class SolverConfig:
    n_paths: int = 20000
    n_steps: int = 100
    seed: int = 0
    basis: str = "hat"
    grid_nodes: int = 31
    box: list | None = None
    degree: int = 3
    k_max: int = 20
    tol: float = 1e-2
    picard: int = 0
    common_noise: bool = True
    probes: int = 33
    probe_times: int = 9
    outer_k_max: int = 20
    outer_tol: float = 1e-2
    weighted: bool = True
    kappa: float = 0.0
    norm_gamma: float | None = None
    norm_paths: int = 2000
    norm_seed: int = 1
    alphas: list | None = None
    rsde_coef: float = 4.0

    @classmethod
    def from_dict(cls, table: dict) -> "SolverConfig":
        known = {f.name for f in fields(cls)}
        bad = set(table) - known
        if bad:
            raise ValueError(f"unknown solver option(s): {', '.join(sorted(bad))}")
        defaults = cls()
        for key, val in table.items():
            ref = getattr(defaults, key)
            if val is not None and ref is not None and not _same_kind(val, ref):
                raise ValueError(f"solver option {key} must be {type(ref).__name__}, got {val!r}")
        return cls(**table)

    def resolved_box(self, spec: ProblemSpec) -> list:
        box = self.box if self.box is not None else spec.box
        return np.asarray(box, dtype=float).reshape(spec.n, 2).tolist()


def _same_kind(val, ref) -> bool:
    if isinstance(ref, bool) or isinstance(val, bool):
        return isinstance(val, bool) and isinstance(ref, bool)
    if isinstance(ref, float):
        return isinstance(val, (int, float))
    return isinstance(val, type(ref))


@dataclass
class IterationRecord:
    iteration: int
    sup_increment: float
    stderr: float
    weighted_increment: float | None = None
    weighted_stderr: float | None = None
    value_at_probe0: float | None = None
    wall_time: float = 0.0
    inner_iterations: int | None = None


@dataclass
class ConvergenceReport:
    kind: str
    tol: float
    k_max: int
    records: list = field(default_factory=list)
    status: str = MAX_ITER
    flags: list = field(default_factory=list)

    @property
    def iterations(self) -> int:
        return len(self.records)

    @property
    def increments(self) -> np.ndarray:
        return np.array([r.sup_increment for r in self.records])

    @property
    def weighted_increments(self) -> np.ndarray:
        return np.array([np.nan if r.weighted_increment is None else r.weighted_increment for r in self.records])

    @property
    def contraction_ratios(self) -> np.ndarray:
        """``increment_k / increment_{k-1}`` from the second record on."""
        inc = self.increments
        with np.errstate(divide="ignore", invalid="ignore"):
            return inc[1:] / inc[:-1]

    @property
    def weighted_ratios(self) -> np.ndarray:
        """Ratios of the weighted norms (square roots of the estimated squares)."""
        w = np.sqrt(self.weighted_increments)
        with np.errstate(divide="ignore", invalid="ignore"):
            return w[1:] / w[:-1]

    def to_dict(self, timings: bool = False) -> dict:
        recs = []
        for r in self.records:
            d = asdict(r)
            if not timings:
                d.pop("wall_time")
            recs.append(d)
        return {"kind": self.kind, "tol": self.tol, "k_max": self.k_max, "status": self.status, "flags": list(self.flags), "records": recs}


def derive_seed(seed: int, *path: int) -> int:
    """Stable 64-bit child seed of ``(seed, *path)``."""
    ss = np.random.SeedSequence([int(seed) & 0xFFFFFFFFFFFFFFFF, *[int(p) for p in path]])
    return int(ss.generate_state(1, dtype=np.uint64)[0])


def _axes(box, nodes):
    return [np.linspace(lo, hi, nodes) for lo, hi in box]


def seed_ensemble(spec: ProblemSpec, cfg: SolverConfig, seed: int | None = None) -> PathEnsemble:
    """Paths started round-robin from every spatial grid node at ``t = 0``."""
    box = cfg.resolved_box(spec)
    G = np.array(list(itertools.product(*_axes(box, cfg.grid_nodes)))).reshape(-1, spec.n)
    start = np.arange(cfg.n_paths) % G.shape[0]
    grid = TimeGrid(0.0, spec.T, cfg.n_steps)
    ens = simulate_paths(spec, 0.0, G[start], grid, cfg.n_paths, cfg.seed if seed is None else seed)
    ens.start_index = start
    return ens


def probe_set(spec: ProblemSpec, cfg: SolverConfig):
    """``(times, states)`` of the convergence probes."""
    box = cfg.resolved_box(spec)
    pts = np.array(list(itertools.product(*_axes(box, cfg.probes)))).reshape(-1, spec.n)
    times = np.linspace(0.0, spec.T, cfg.probe_times + 1)[:-1]
    return times, pts


def _expectation(spec, cfg, grid: TimeGrid):
    box = cfg.resolved_box(spec)
    size = cfg.grid_nodes**spec.n if cfg.basis == "hat" else None
    steps = None
    if size is None or size > FULL_STDERR_MAX:
        steps = {grid.index_of(t) for t in probe_set(spec, cfg)[0]}
    return RegressionExpectation(basis=cfg.basis, box=box, n_knots=cfg.grid_nodes, degree=cfg.degree, stderr_steps=steps)


def _to_value_function(sol, grid, box, nodes) -> ValueFunction:
    return ValueFunction(grid.times, _axes(box, nodes), sol.node_values, sol.node_stderr)


def _probe_increment(v_new, v_old, times, pts) -> tuple:
    diff, se = 0.0, 0.0
    for t in times:
        d = np.abs(v_new(t, pts) - v_old(t, pts))
        j = int(np.argmax(d))
        if d[j] >= diff:
            diff = float(d[j])
        s = np.sqrt(v_new.stderr_at(t, pts) ** 2 + v_old.stderr_at(t, pts) ** 2)
        se = max(se, float(s.max()))
    return diff, se


def _diverging(incs: list) -> bool:
    if len(incs) <= DIVERGENCE_RUN:
        return False
    tail = incs[-(DIVERGENCE_RUN + 1) :]
    return all(b > a for a, b in zip(tail[:-1], tail[1:])) and tail[-1] > 0


def solve_local(
    spec: ProblemSpec,
    config: SolverConfig | None = None,
    frozen_value=None,
    ensemble: PathEnsemble | None = None,
    keep_history: bool = False,
):
    """Local QVI by the k-impulse ladder.

    ``v_0`` solves the plain BSDE and ``v_k`` the BSDE reflected above
    ``M v_{k-1}``, until the probe sup-norm increment drops to ``tol``.
    Returns ``(value_function, report)``, plus the list of iterates when
    ``keep_history`` is set.
    """
    cfg = config or SolverConfig()
    if spec.is_nonlocal and frozen_value is None:
        raise ValueError("non-local driver: supply frozen_value or call solve_nonlocal")
    box = cfg.resolved_box(spec)
    ens = ensemble if ensemble is not None else seed_ensemble(spec, cfg)
    grid = ens.grid
    G = np.array(list(itertools.product(*_axes(box, cfg.grid_nodes)))).reshape(-1, spec.n)
    E = _expectation(spec, cfg, grid)
    times, pts = probe_set(spec, cfg)
    report = ConvergenceReport(kind="local", tol=cfg.tol, k_max=cfg.k_max)

    sol = solve_bsde(spec, ens, frozen_value, E, cfg.picard, nodes=G)
    v = _to_value_function(sol, grid, box, cfg.grid_nodes)
    report.flags.extend(f"k0:{f}" for f in sol.flags)
    history = [v]
    incs: list = []
    for k in range(1, cfg.k_max + 1):
        start = time.perf_counter()
        if not cfg.common_noise:
            ens = seed_ensemble(spec, cfg, derive_seed(cfg.seed, k))
        sol = solve_reflected(spec, ens, obstacle_from(v, spec), frozen_value, E, cfg.picard, nodes=G)
        v_new = _to_value_function(sol, grid, box, cfg.grid_nodes)
        report.flags.extend(f"k{k}:{f}" for f in sol.flags)
        inc, se = _probe_increment(v_new, v, times, pts)
        report.records.append(
            IterationRecord(
                iteration=k,
                sup_increment=inc,
                stderr=se,
                value_at_probe0=float(v_new(times[0], pts[:1])[0]),
                wall_time=time.perf_counter() - start,
            )
        )
        v = v_new
        if keep_history:
            history.append(v)
        incs.append(inc)
        if inc <= cfg.tol:
            report.status = CONVERGED
            break
        if _diverging(incs):
            report.status = DIVERGED
            break
    if keep_history:
        return v, report, history
    return v, report


def solve_nonlocal(spec: ProblemSpec, config: SolverConfig | None = None, keep_history: bool = False):
    """Outer Picard iteration with V-terms frozen at the previous iterate.

    Starts from ``Ybar^0 = 0``; each outer step runs :func:`solve_local`.
    The weighted norm of each increment is recorded when ``config.weighted``.
    """
    cfg = config or SolverConfig()
    if not spec.is_nonlocal:
        raise ValueError("driver has no V-terms; use solve_local")
    box = cfg.resolved_box(spec)
    ens = seed_ensemble(spec, cfg)
    grid = ens.grid
    times, pts = probe_set(spec, cfg)
    v = ValueFunction.constant(grid.times, box, cfg.grid_nodes, 0.0)
    report = ConvergenceReport(kind="nonlocal", tol=cfg.outer_tol, k_max=cfg.outer_k_max)
    history = [v]
    incs: list = []
    gamma = spec.K_Gamma if cfg.norm_gamma is None else cfg.norm_gamma
    for k in range(1, cfg.outer_k_max + 1):
        start = time.perf_counter()
        if not cfg.common_noise:
            ens = seed_ensemble(spec, cfg, derive_seed(cfg.seed, 0, k))
        v_new, inner = solve_local(spec, cfg, frozen_value=v, ensemble=ens)
        report.flags.extend(f"outer{k}:{f}" for f in inner.flags)
        inc, se = _probe_increment(v_new, v, times, pts)
        rec = IterationRecord(
            iteration=k,
            sup_increment=inc,
            stderr=se,
            value_at_probe0=float(v_new(times[0], pts[:1])[0]),
            inner_iterations=inner.iterations,
        )
        if inner.status == DIVERGED:
            report.flags.append(f"outer{k}:inner-diverged")
        if cfg.weighted:
            with warnings.catch_warnings(record=True) as caught:
                warnings.simplefilter("always", NormWarning)
                stats = weighted_norm_stats(
                    v_new - v, gamma, spec, cfg.alphas, n_paths=cfg.norm_paths, seed=cfg.norm_seed,
                    kappa=cfg.kappa, coef=cfg.rsde_coef,
                )
            if caught and f"outer{k}:norm-clamped" not in report.flags:
                report.flags.append(f"outer{k}:norm-clamped")
            rec.weighted_increment, rec.weighted_stderr = stats["value"], stats["stderr"]
        rec.wall_time = time.perf_counter() - start
        report.records.append(rec)
        v = v_new
        if keep_history:
            history.append(v)
        incs.append(inc)
        if inc <= cfg.outer_tol:
            report.status = CONVERGED
            break
        if _diverging(incs):
            report.status = DIVERGED
            break
    if keep_history:
        return v, report, history
    return v, report


def default_alphas(d: int) -> list:
    """Constant schedules with entries in ``{-1, 0, 1}``."""
    return [np.array(a, dtype=float) for a in itertools.product((-1.0, 0.0, 1.0), repeat=d)]


def weighted_norm_stats(
    phi: ValueFunction,
    gamma: float,
    spec: ProblemSpec,
    alphas=None,
    n_paths: int = 2000,
    seed: int = 1,
    kappa: float = 0.0,
    coef: float = 4.0,
) -> dict:
    """Monte Carlo estimate of the squared weighted norm of ``phi``.

    For each constant schedule the dominating radius ``R`` is simulated on
    the time grid of ``phi`` and ``sum_k e^{kappa t_k} sup phi^2(t_k, .) dt``
    is averaged over paths, with the sup over grid nodes in the ball of
    radius ``R_{t_k} v K_Gamma``.  The largest schedule estimate wins.
    """
    alphas = default_alphas(spec.d) if alphas is None else [np.atleast_1d(np.asarray(a, dtype=float)) for a in alphas]
    times = phi.times
    grid = TimeGrid(float(times[0]), float(times[-1]), len(times) - 1)
    nodes = phi.nodes
    radius = np.linalg.norm(nodes, axis=1)
    order = np.argsort(radius, kind="stable")
    r_sorted = radius[order]
    inner_limit = r_sorted[-1]
    best = {"value": -np.inf}
    for ai, a in enumerate(alphas):
        dom = simulate_dominating(spec, gamma, a, grid.t0, grid, n_paths, seed, coef=coef)
        acc = np.zeros(n_paths)
        clamped = False
        for k in range(grid.n_steps):
            phi2 = phi.values[k].reshape(-1)[order] ** 2
            prefix = np.maximum.accumulate(phi2)
            ball = np.maximum(dom.R[k], spec.K_Gamma)
            clamped |= bool(np.any(ball > inner_limit))
            j = np.searchsorted(r_sorted, ball * (1 + 1e-12), side="right") - 1
            sup = np.where(j >= 0, prefix[np.clip(j, 0, None)], 0.0)
            acc += np.exp(kappa * times[k]) * sup * grid.dt
        if clamped:
            warnings.warn("dominating radius exceeds the value grid; sup clamped to the grid", NormWarning, stacklevel=2)
        est = float(acc.mean())
        se = float(acc.std(ddof=1) / np.sqrt(n_paths)) if n_paths > 1 else 0.0
        if est > best["value"]:
            best = {"value": est, "stderr": se, "alpha_index": ai}
    return best


def weighted_norm(phi: ValueFunction, gamma: float, spec: ProblemSpec, alphas=None, **mc) -> float:
    """Squared weighted norm of ``phi``; see :func:`weighted_norm_stats`."""
    return weighted_norm_stats(phi, gamma, spec, alphas, **mc)["value"]


class LSMCSolver(BaseEstimator):
    """Estimator wrapper around the regression Monte Carlo pipeline.

    ``fit(spec)`` chooses the local ladder or the non-local Picard iteration
    from the driver; ``predict(X, t)`` evaluates the fitted surface.
    """

    def __init__(
        self,
        n_paths=20000,
        n_steps=100,
        seed=0,
        basis="hat",
        grid_nodes=31,
        box=None,
        degree=3,
        k_max=20,
        tol=1e-2,
        picard=0,
        common_noise=True,
        probes=33,
        probe_times=9,
        outer_k_max=20,
        outer_tol=1e-2,
        weighted=True,
        kappa=0.0,
        norm_gamma=None,
        norm_paths=2000,
        norm_seed=1,
        alphas=None,
        rsde_coef=4.0,
    ):
        self.n_paths = n_paths
        self.n_steps = n_steps
        self.seed = seed
        self.basis = basis
        self.grid_nodes = grid_nodes
        self.box = box
        self.degree = degree
        self.k_max = k_max
        self.tol = tol
        self.picard = picard
        self.common_noise = common_noise
        self.probes = probes
        self.probe_times = probe_times
        self.outer_k_max = outer_k_max
        self.outer_tol = outer_tol
        self.weighted = weighted
        self.kappa = kappa
        self.norm_gamma = norm_gamma
        self.norm_paths = norm_paths
        self.norm_seed = norm_seed
        self.alphas = alphas
        self.rsde_coef = rsde_coef

    def config(self) -> SolverConfig:
        return SolverConfig(**self.get_params())

    def fit(self, spec: ProblemSpec, y=None):
        cfg = self.config()
        if cfg.n_paths < 2 or cfg.n_steps < 1:
            raise ValueError("need at least 2 paths and 1 step")
        if spec.is_nonlocal:
            v, rep, hist = solve_nonlocal(spec, cfg, keep_history=True)
        else:
            v, rep, hist = solve_local(spec, cfg, keep_history=True)
        if rep.status == DIVERGED:
            self.report_ = rep
            raise DivergenceError(f"{rep.kind} iteration diverged after {rep.iterations} iterations")
        self.spec_ = spec
        self.value_function_ = v
        self.report_ = rep
        self.history_ = hist
        return self

    def predict(self, X, t=0.0):
        check_is_fitted(self, "value_function_")
        X = check_array(X, dtype=np.float64)
        return self.value_function_(t, X)

    def predict_stderr(self, X, t=0.0):
        check_is_fitted(self, "value_function_")
        X = check_array(X, dtype=np.float64)
        return self.value_function_.stderr_at(t, X)
