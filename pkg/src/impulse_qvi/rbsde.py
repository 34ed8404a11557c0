"""Backward regression schemes for plain, reflected and controlled-payoff BSDEs.

One backward step reads

    C_k = E[Y_{k+1} | X_k],   Z_k = E[Y_{k+1} dW_k | X_k] / dt,
    Ytilde_k = C_k + f(t_k, X_k, C_k, Z_k) dt,
    Y_k = max(Ytilde_k, h(t_k, X_k)),   dK_k = Y_k - Ytilde_k,

with the conditional expectations supplied by a pluggable provider:
least-squares regression for simulated ensembles, exact group means for
lattices.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

from .model import ProblemSpec
from .regression import LeastSquaresRegressor, RegressionWarning
from .sde import ImpulseControl, PathEnsemble

__all__ = [
    "BsdeSolution",
    "CompatibilityError",
    "RegressionExpectation",
    "TabularExpectation",
    "solve_bsde",
    "solve_reflected",
    "evaluate_impulse_value",
]

TERMINAL_TOL = 1e-9


class CompatibilityError(ValueError):
    """The obstacle exceeds the terminal payoff at T."""

    def __init__(self, message: str, witness: dict):
        self.witness = witness
        super().__init__(f"{message}; witness {witness}")


class RegressionExpectation:
    """Conditional expectation by least squares, one fit per time step.

    Fits at steps listed in ``stderr_steps`` (``None`` means all) also carry
    coefficient covariances so the surfaces report standard errors.
    """

    def __init__(self, basis="hat", box=None, n_knots=31, degree=3, n_bins=None, stderr_steps=None):
        self.params = dict(basis=basis, box=box, n_knots=n_knots, degree=degree, n_bins=n_bins)
        self.stderr_steps = stderr_steps

    def wants_stderr(self, k: int) -> bool:
        return self.stderr_steps is None or k in self.stderr_steps

    def project(self, k: int, X: np.ndarray, targets: np.ndarray, error_targets=None):
        """Return fitted values at ``X`` of shape ``targets.shape`` and the predictor.

        ``error_targets`` is an unbiased proxy of ``targets`` whose spread
        drives the reported standard errors.
        """
        if np.all(X == X[0]):
            # single start point: the conditional expectation is a plain mean
            return _ConstantFit.fit(targets, error_targets)
        reg = LeastSquaresRegressor(**self.params)
        reg.fit(X, targets, cov=self.wants_stderr(k), cov_targets=error_targets)
        return reg.predict(X), reg


@dataclass
class _ConstantFit:
    mean: np.ndarray
    se: np.ndarray

    @classmethod
    def fit(cls, targets, error_targets=None):
        P = targets.shape[0]
        mean = targets.mean(axis=0)
        src = targets if error_targets is None else error_targets
        se = src.std(axis=0, ddof=1) / np.sqrt(P) if P > 1 else np.zeros_like(mean)
        obj = cls(mean, se)
        return np.broadcast_to(mean, targets.shape).copy(), obj

    fallback_ = False

    def predict(self, X):
        return np.broadcast_to(self.mean, (len(X),) + self.mean.shape).copy()

    def predict_stderr(self, X):
        return np.broadcast_to(self.se, (len(X),) + self.se.shape).copy()


class TabularExpectation:
    """Exact conditional expectations on an enumerated lattice.

    ``labels[k, p]`` is the lattice node of path ``p`` at step ``k``.  When
    the ensemble lists every path of a recombining lattice with equal
    weights, the group mean over paths sharing a node is the exact
    conditional expectation given that node.
    """

    def __init__(self, labels):
        self.labels = np.asarray(labels, dtype=np.int64)

    def project(self, k: int, X: np.ndarray, targets: np.ndarray, error_targets=None):
        lab = self.labels[k]
        counts = np.bincount(lab).astype(float)
        fitted = np.empty_like(targets)
        for q in range(targets.shape[1]):
            means = np.bincount(lab, weights=targets[:, q]) / np.where(counts > 0, counts, 1.0)
            fitted[:, q] = means[lab]
        return fitted, None


@dataclass
class BsdeSolution:
    """Per-path solution arrays and the point estimate at the start time.

    ``Y[k]`` is the value at ``t_k`` (before any impulse at ``t_k`` for
    controlled payoffs), ``K`` the cumulative reflection with ``K[0] = 0``
    and ``C`` the continuation values.  ``node_values`` holds the surface at
    the requested grid nodes, one row per time step.
    """

    Y: np.ndarray
    Z: np.ndarray | None
    K: np.ndarray
    payoff: np.ndarray
    C: np.ndarray
    value: float
    stderr: float
    kind: str = "bsde"
    H: np.ndarray | None = None
    flags: list = field(default_factory=list)
    predictors: list | None = None
    node_values: np.ndarray | None = None
    node_stderr: np.ndarray | None = None

    @property
    def dK(self) -> np.ndarray:
        return np.diff(self.K, axis=0)


def _value_fn(frozen):
    if frozen is None:
        return None
    return lambda t, pts: frozen(t, pts)


def _driver(spec, t, X, y, Z, value_fn, dt, C, picard):
    f = spec.driver_at(t, X, y, Z, value_fn)
    out = C + f * dt
    for _ in range(picard):
        out = C + spec.driver_at(t, X, out, Z, value_fn) * dt
    return out


def _backward(
    spec: ProblemSpec,
    ens: PathEnsemble,
    obstacle=None,
    frozen_value=None,
    expectation=None,
    costs=None,
    picard: int = 0,
    nodes=None,
    kind="bsde",
) -> BsdeSolution:
    if spec.is_nonlocal and frozen_value is None:
        raise ValueError("non-local driver needs a frozen value function for its V-terms")
    expectation = expectation if expectation is not None else RegressionExpectation()
    value_fn = _value_fn(frozen_value)
    grid = ens.grid
    N, dt, times = grid.n_steps, grid.dt, grid.times
    P = ens.n_paths
    use_z = spec.driver_uses_z
    X = ens.X
    Xh = ens.pre_states
    Y = np.empty((N + 1, P))
    # realized payoff along each path: follows the path until the reflection
    # binds, as in Longstaff-Schwartz; its spread measures the MC error
    Yp = np.empty((N + 1, P))
    C = np.zeros((N + 1, P))
    Z = np.zeros((N, P, spec.d)) if use_z else None
    dK = np.zeros((N, P))
    H = np.full((N + 1, P), -np.inf) if obstacle is not None else None
    flags: list = []
    predictors: list = [None] * (N + 1)

    Y[N] = spec.terminal_at(X[N])
    Yp[N] = Y[N]
    C[N] = Y[N]
    if obstacle is not None:
        hT = np.asarray(obstacle(times[N], X[N]), dtype=float)
        H[N] = hT
        bad = np.flatnonzero(hT > Y[N] + TERMINAL_TOL)
        if bad.size:
            p = int(bad[0])
            raise CompatibilityError(
                "obstacle exceeds terminal payoff at T",
                {"x": X[N, p].tolist(), "h": float(hT[p]), "psi": float(Y[N, p])},
            )

    G = None if nodes is None else np.asarray(nodes, dtype=float)
    node_values = node_stderr = None
    if G is not None:
        node_values = np.empty((N + 1, G.shape[0]))
        node_stderr = np.full((N + 1, G.shape[0]), np.nan)
        node_values[N] = spec.terminal_at(G)
        node_stderr[N] = 0.0

    for k in range(N - 1, -1, -1):
        t = times[k]
        targets = Y[k + 1][:, None]
        proxy = Yp[k + 1][:, None]
        if use_z:
            targets = np.concatenate([targets, Y[k + 1][:, None] * ens.dW[k]], axis=1)
            proxy = np.concatenate([proxy, Yp[k + 1][:, None] * ens.dW[k]], axis=1)
        with warnings.catch_warnings(record=True) as caught:
            warnings.simplefilter("always", RegressionWarning)
            fitted, pred = expectation.project(k, X[k], targets, proxy)
        if any(issubclass(w.category, RegressionWarning) for w in caught):
            flags.append(f"fallback@{k}")
        predictors[k] = pred
        ck = fitted[:, 0]
        zk = fitted[:, 1:] / dt if use_z else None
        C[k] = ck
        if use_z:
            Z[k] = zk
        yt = _driver(spec, t, X[k], ck, zk, value_fn, dt, ck, picard)
        yp = Yp[k + 1] + (yt - ck)
        if obstacle is not None:
            hk = np.asarray(obstacle(t, Xh[k]), dtype=float)
            H[k] = hk
            yk = np.maximum(yt, hk)
            dK[k] = yk - yt
            yp = np.where(dK[k] > 0, yk, yp)
        else:
            yk = yt
        if costs is not None:
            yk = yk - costs[k]
            yp = yp - costs[k]
        Y[k] = yk
        Yp[k] = yp

        if G is not None and pred is not None:
            out = pred.predict(G).reshape(G.shape[0], -1)
            cg = out[:, 0]
            zg = out[:, 1:] / dt if use_z else None
            yg = _driver(spec, t, G, cg, zg, value_fn, dt, cg, picard)
            if obstacle is not None:
                yg = np.maximum(yg, np.asarray(obstacle(t, G), dtype=float))
            node_values[k] = yg
            if hasattr(pred, "coef_cov_") or isinstance(pred, _ConstantFit):
                node_stderr[k] = pred.predict_stderr(G).reshape(G.shape[0], -1)[:, 0]

    K = np.zeros((N + 1, P))
    np.cumsum(dK, axis=0, out=K[1:])
    value = float(Y[0].mean())
    stderr = float(Yp[0].std(ddof=1) / np.sqrt(P)) if P > 1 else 0.0
    return BsdeSolution(
        Y=Y,
        Z=Z,
        K=K,
        payoff=Yp,
        C=C,
        value=value,
        stderr=stderr,
        kind=kind,
        H=H,
        flags=flags,
        predictors=predictors,
        node_values=node_values,
        node_stderr=node_stderr,
    )


def solve_bsde(
    spec: ProblemSpec,
    ensemble: PathEnsemble,
    frozen_value=None,
    expectation=None,
    picard: int = 0,
    nodes=None,
) -> BsdeSolution:
    """Plain BSDE with terminal ``psi(X_N)`` and no reflection (``K = 0``).

    ``frozen_value`` is a callable ``(t, points) -> values`` evaluated by the
    driver's V-terms.  ``nodes`` requests the surface at fixed grid states.
    """
    return _backward(spec, ensemble, None, frozen_value, expectation, None, picard, nodes, "bsde")


def solve_reflected(
    spec: ProblemSpec,
    ensemble: PathEnsemble,
    obstacle,
    frozen_value=None,
    expectation=None,
    picard: int = 0,
    nodes=None,
) -> BsdeSolution:
    """Reflected BSDE above ``obstacle(t, X) -> (P,)``.

    Raises :class:`CompatibilityError` when ``h(T, X_N) > psi(X_N)``.
    """
    return _backward(spec, ensemble, obstacle, frozen_value, expectation, None, picard, nodes, "reflected")


def evaluate_impulse_value(
    spec: ProblemSpec,
    controlled,
    frozen_value=None,
    expectation=None,
    picard: int = 0,
) -> BsdeSolution:
    """Payoff of a realized impulse strategy.

    ``controlled`` is the ``(ensemble, control, xi)`` triple from
    :func:`~impulse_qvi.sde.simulate_controlled`.  Regression conditions on
    the post-impulse state, and the cost paid at ``t_k`` is subtracted at
    that step, so ``Y[0]`` already includes impulses at the start time.
    """
    ens, control, xi = controlled
    if not isinstance(control, ImpulseControl):
        raise TypeError("expected an ImpulseControl")
    costs = np.diff(np.asarray(xi), axis=0)
    if not np.any(costs):
        costs = None
    return _backward(spec, ens, None, frozen_value, expectation, costs, picard, None, "impulse")
