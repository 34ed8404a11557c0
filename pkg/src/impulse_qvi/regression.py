"""Least-squares regression onto a fixed basis, used as the conditional
expectation operator of the backward schemes.

Every basis maps a sample to a short list of (column index, weight) pairs.
Normal equations are then assembled with ``np.bincount``, whose summation
runs in sample order, so fitted surfaces are bitwise reproducible.
"""

from __future__ import annotations

import functools
import itertools
import warnings

import numpy as np
from scipy import linalg
from sklearn.base import BaseEstimator, RegressorMixin
from sklearn.utils.validation import check_array, check_is_fitted

__all__ = [
    "FAMILIES",
    "HatBasis",
    "BinBasis",
    "PolyBasis",
    "make_basis",
    "LeastSquaresRegressor",
    "RegressionWarning",
]

FAMILIES = ("hat", "bins", "poly")


class RegressionWarning(UserWarning):
    pass


def _axes(box, counts) -> list:
    box = np.asarray(box, dtype=float).reshape(-1, 2)
    counts = np.broadcast_to(np.asarray(counts, dtype=int), (box.shape[0],))
    if np.any(counts < 2):
        raise ValueError("need at least 2 knots or bins per axis")
    return [np.linspace(lo, hi, c) for (lo, hi), c in zip(box, counts)]


@functools.lru_cache(maxsize=16)
def _grid_laplacian(shape, order: int = 1) -> np.ndarray:
    """Sum of squared ``order``-th differences along every axis, as a quadratic form."""
    K = int(np.prod(shape))
    ids = np.arange(K).reshape(shape)
    stencil = np.diff(np.eye(order + 1), n=order, axis=0)[0]
    L = np.zeros((K, K))
    for ax in range(len(shape)):
        if shape[ax] <= order:
            continue
        cols = [np.take(ids, range(j, shape[ax] - order + j), axis=ax).reshape(-1) for j in range(order + 1)]
        for i in range(order + 1):
            for j in range(order + 1):
                np.add.at(L, (cols[i], cols[j]), stencil[i] * stencil[j])
    L.setflags(write=False)
    return L


class HatBasis:
    """Tensor piecewise-linear functions on a rectilinear knot grid.

    Outside the grid the state is clamped to the boundary, so the fit
    extrapolates flat.
    """

    def __init__(self, box, counts):
        self.axes = _axes(box, counts)
        self.shape = tuple(len(a) for a in self.axes)
        self.size = int(np.prod(self.shape))

    def features(self, X):
        P = X.shape[0]
        lo_idx, frac = [], []
        for j, ax in enumerate(self.axes):
            x = np.clip(X[:, j], ax[0], ax[-1])
            i = np.clip(np.searchsorted(ax, x, side="right") - 1, 0, len(ax) - 2)
            lo_idx.append(i)
            frac.append((x - ax[i]) / (ax[i + 1] - ax[i]))
        strides = np.cumprod((1,) + self.shape[::-1])[:-1][::-1]
        corners = list(itertools.product((0, 1), repeat=len(self.axes)))
        idx = np.zeros((P, len(corners)), dtype=np.int64)
        w = np.ones((P, len(corners)))
        for c, bits in enumerate(corners):
            for j, bit in enumerate(bits):
                idx[:, c] += (lo_idx[j] + bit) * strides[j]
                w[:, c] *= frac[j] if bit else 1.0 - frac[j]
        return idx, w

    def roughness(self) -> np.ndarray:
        # second differences: multilinear functions are not penalized
        return _grid_laplacian(self.shape, 2)


class BinBasis:
    """Indicators of a rectilinear partition of the box (states clamp in)."""

    def __init__(self, box, counts):
        box = np.asarray(box, dtype=float).reshape(-1, 2)
        self.shape = tuple(np.broadcast_to(np.asarray(counts, dtype=int), (box.shape[0],)))
        self.edges = [np.linspace(lo, hi, c + 1) for (lo, hi), c in zip(box, self.shape)]
        self.size = int(np.prod(self.shape))

    def features(self, X):
        idx = np.zeros(X.shape[0], dtype=np.int64)
        for j, e in enumerate(self.edges):
            i = np.clip(np.searchsorted(e, X[:, j], side="right") - 1, 0, len(e) - 2)
            idx = idx * (len(e) - 1) + i
        return idx[:, None], np.ones((X.shape[0], 1))

    def roughness(self) -> np.ndarray:
        return _grid_laplacian(self.shape)


class PolyBasis:
    """Monomials of total degree <= ``degree`` in box-scaled coordinates."""

    def __init__(self, box, degree):
        box = np.asarray(box, dtype=float).reshape(-1, 2)
        self.center = box.mean(axis=1)
        self.half = 0.5 * (box[:, 1] - box[:, 0])
        n = box.shape[0]
        self.powers = [p for p in itertools.product(range(degree + 1), repeat=n) if sum(p) <= degree]
        self.powers.sort(key=lambda p: (sum(p), tuple(-q for q in p)))
        self.size = len(self.powers)

    def features(self, X):
        U = (X - self.center) / self.half
        w = np.stack([np.prod(U**np.array(p), axis=1) for p in self.powers], axis=1)
        idx = np.broadcast_to(np.arange(self.size), w.shape)
        return idx, w

    def roughness(self):
        return None


def make_basis(family: str, box, n_knots=31, degree=3, n_bins=None):
    if family == "hat":
        return HatBasis(box, n_knots)
    if family == "bins":
        return BinBasis(box, n_bins if n_bins is not None else n_knots)
    if family == "poly":
        return PolyBasis(box, degree)
    raise ValueError(f"unknown basis family {family!r}; expected one of {FAMILIES}")


def _gram(idx, w, K, weights=None):
    s = idx.shape[1]
    pair = (idx[:, :, None] * K + idx[:, None, :]).reshape(-1)
    ww = (w[:, :, None] * w[:, None, :]).reshape(idx.shape[0], s * s)
    if weights is not None:
        ww = ww * weights[:, None]
    return np.bincount(pair, weights=ww.reshape(-1), minlength=K * K).reshape(K, K)


def _rhs(idx, w, Y, K):
    flat = idx.reshape(-1)
    out = np.empty((K, Y.shape[1]))
    for q in range(Y.shape[1]):
        out[:, q] = np.bincount(flat, weights=(w * Y[:, q : q + 1]).reshape(-1), minlength=K)
    return out


class LeastSquaresRegressor(BaseEstimator, RegressorMixin):
    """Projection of targets onto a basis by ordinary least squares.

    Parameters
    ----------
    basis : {"hat", "bins", "poly"}
    box : array of shape (n, 2)
        Domain of the basis; states outside are clamped for ``hat``/``bins``.
    n_knots : int or tuple
        Knots per axis for ``hat`` (bins per axis for ``bins`` unless
        ``n_bins`` is given).
    degree : int
        Total degree for ``poly``.
    smoothing : float
        Weight of the roughness penalty, relative to the mean Gram diagonal:
        squared second differences for ``hat`` (multilinear functions go
        unpenalized), first differences for ``bins``.
    cond_max : float
        Condition threshold on the scaled normal matrix.  Above it the fit
        falls back to bin means and sets ``fallback_``.
    """

    def __init__(self, basis="hat", box=None, n_knots=31, degree=3, n_bins=None, smoothing=1e-6, cond_max=1e10):
        self.basis = basis
        self.box = box
        self.n_knots = n_knots
        self.degree = degree
        self.n_bins = n_bins
        self.smoothing = smoothing
        self.cond_max = cond_max

    def _box(self, X):
        if self.box is not None:
            return np.asarray(self.box, dtype=float).reshape(-1, 2)
        lo, hi = X.min(axis=0), X.max(axis=0)
        hi = np.where(hi > lo, hi, lo + 1.0)
        return np.stack([lo, hi], axis=1)

    def fit(self, X, y, cov=False, cov_targets=None):
        """Fit the projection.

        With ``cov`` the coefficient covariance is estimated from the
        residuals of ``cov_targets`` (default ``y``) around the fit, which
        lets a noisier unbiased proxy of ``y`` carry the error estimate.
        """
        X = check_array(X, dtype=np.float64)
        y = np.asarray(y, dtype=np.float64)
        self.multi_output_ = y.ndim == 2
        Y = y.reshape(X.shape[0], -1)
        box = self._box(X)
        self.basis_ = make_basis(self.basis, box, self.n_knots, self.degree, self.n_bins)
        self.fallback_ = False
        try:
            self._solve(X, Y, self.basis_, strict=True)
        except np.linalg.LinAlgError:
            # degenerate ensembles (e.g. no diffusion) collapse many samples
            # onto few states; cell averages are still well defined
            warnings.warn("ill-conditioned regression, falling back to bin means", RegressionWarning, stacklevel=2)
            self.fallback_ = True
            counts = self.n_bins if self.n_bins is not None else self.n_knots
            self.basis_ = BinBasis(box, counts)
            self._solve(X, Y, self.basis_, strict=False)
        if cov:
            Yc = Y if cov_targets is None else np.asarray(cov_targets, dtype=np.float64).reshape(Y.shape)
            self._covariance(X, Yc)
        del self._gram
        self.n_features_in_ = X.shape[1]
        return self

    def _solve(self, X, Y, basis, strict):
        K = basis.size
        idx, w = basis.features(X)
        A = _gram(idx, w, K)
        b = _rhs(idx, w, Y, K)
        L = basis.roughness()
        if L is not None and self.smoothing > 0:
            # a light difference penalty ties sparsely visited columns to
            # their neighbours and keeps the system definite
            A = A + self.smoothing * max(np.diag(A).mean(), 1e-300) * L
        diag = np.diag(A)
        if np.any(diag <= 0):
            if strict:
                raise np.linalg.LinAlgError("basis column without samples")
            diag = np.where(diag > 0, diag, 1.0)
        scale = 1.0 / np.sqrt(diag)
        S = A * scale[:, None] * scale[None, :]
        if strict:
            cond = np.linalg.cond(S)
            if not np.isfinite(cond) or cond > self.cond_max:
                raise np.linalg.LinAlgError(f"condition number {cond:.3g}")
            self.cond_ = float(cond)
        else:
            self.cond_ = float("nan")
        self.coef_ = scale[:, None] * linalg.solve(S, scale[:, None] * b, assume_a="pos")
        self._gram = A

    def _covariance(self, X, Y):
        """Heteroscedasticity-robust covariance of the coefficients."""
        basis = self.basis_
        K = basis.size
        idx, w = basis.features(X)
        R = Y - np.einsum("ps,psq->pq", w, self.coef_[idx])
        Ainv = np.linalg.pinv(self._gram)
        covs = []
        for q in range(Y.shape[1]):
            B = _gram(idx, w, K, weights=R[:, q] ** 2)
            covs.append(Ainv @ B @ Ainv)
        self.coef_cov_ = np.stack(covs)

    def predict(self, X):
        check_is_fitted(self, "coef_")
        X = check_array(X, dtype=np.float64)
        idx, w = self.basis_.features(X)
        out = np.einsum("ps,psq->pq", w, self.coef_[idx])
        return out if self.multi_output_ else out[:, 0]

    def predict_stderr(self, X):
        """Standard error of the fitted conditional mean at ``X``."""
        check_is_fitted(self, "coef_cov_")
        X = check_array(X, dtype=np.float64)
        idx, w = self.basis_.features(X)
        out = np.empty((X.shape[0], self.coef_cov_.shape[0]))
        for q, C in enumerate(self.coef_cov_):
            sub = C[idx[:, :, None], idx[:, None, :]]
            out[:, q] = np.sqrt(np.maximum(np.einsum("pa,pab,pb->p", w, sub, w), 0.0))
        return out if self.multi_output_ else out[:, 0]
