import itertools

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from impulse_qvi.regression import BinBasis, HatBasis, LeastSquaresRegressor, PolyBasis, RegressionWarning, _gram


def _dense(basis, X):
    idx, w = basis.features(X)
    Phi = np.zeros((X.shape[0], basis.size))
    np.add.at(Phi, (np.repeat(np.arange(X.shape[0]), idx.shape[1]), idx.reshape(-1)), w.reshape(-1))
    return Phi


def test_hat_partition_of_unity(rng):
    basis = HatBasis([[0, 1], [-2, 3]], (5, 7))
    X = rng.uniform([-0.5, -3], [1.5, 4], size=(200, 2))
    _, w = basis.features(X)
    np.testing.assert_allclose(w.sum(axis=1), 1.0, rtol=1e-14)
    assert np.all(w >= 0)


def test_sparse_gram_matches_dense(rng):
    basis = HatBasis([[0, 1], [0, 1]], (4, 6))
    X = rng.uniform(size=(300, 2))
    idx, w = basis.features(X)
    Phi = _dense(basis, X)
    np.testing.assert_allclose(_gram(idx, w, basis.size), Phi.T @ Phi, rtol=1e-12, atol=1e-12)


@given(coef=st.lists(st.floats(-3, 3), min_size=4, max_size=4), seed=st.integers(0, 1000))
def test_hat_reproduces_multilinear(coef, seed):
    a, b, c, d = coef
    X = np.random.default_rng(seed).uniform(-1, 1, size=(400, 2))
    y = a + b * X[:, 0] + c * X[:, 1] + d * X[:, 0] * X[:, 1]
    fit = LeastSquaresRegressor(basis="hat", box=[[-1, 1], [-1, 1]], n_knots=6).fit(X, y)
    G = np.array(list(itertools.product(np.linspace(-1, 1, 9), repeat=2)))
    want = a + b * G[:, 0] + c * G[:, 1] + d * G[:, 0] * G[:, 1]
    np.testing.assert_allclose(fit.predict(G), want, atol=1e-9 * (1 + np.abs(coef).sum()))


def test_poly_reproduces_cubic(rng):
    X = rng.uniform(-2, 2, size=(100, 1))
    y = 1 - X[:, 0] + 0.5 * X[:, 0] ** 3
    fit = LeastSquaresRegressor(basis="poly", box=[[-2, 2]], degree=3).fit(X, y)
    np.testing.assert_allclose(fit.predict(X), y, atol=1e-10)
    assert PolyBasis([[-2, 2]], 3).roughness() is None


def test_bin_means_and_hc0_stderr(rng):
    X = rng.uniform(0, 1, size=(1000, 1))
    y = rng.normal(size=1000) + (X[:, 0] > 0.5)
    fit = LeastSquaresRegressor(basis="bins", box=[[0, 1]], n_bins=2, smoothing=0.0).fit(X, y, cov=True)
    for lo, hi, centre in ((0, 0.5, 0.25), (0.5, 1, 0.75)):
        sel = (X[:, 0] >= lo) & (X[:, 0] < hi)
        mean = y[sel].mean()
        # heteroscedasticity-robust variance of a cell mean: sum r^2 / n^2
        se = np.sqrt(np.sum((y[sel] - mean) ** 2)) / sel.sum()
        assert fit.predict([[centre]])[0] == pytest.approx(mean, rel=1e-12)
        assert fit.predict_stderr([[centre]])[0] == pytest.approx(se, rel=1e-10)


def test_bins_clamp_outside_box():
    basis = BinBasis([[0, 1]], 4)
    idx, _ = basis.features(np.array([[-5.0], [0.1], [0.99], [7.0]]))
    np.testing.assert_array_equal(idx[:, 0], [0, 0, 3, 3])


def test_degenerate_samples_fall_back_to_bins():
    X = np.full((50, 1), 0.37)
    y = np.arange(50.0)
    with pytest.warns(RegressionWarning):
        fit = LeastSquaresRegressor(basis="hat", box=[[0, 1]], n_knots=31).fit(X, y)
    assert fit.fallback_
    assert fit.predict([[0.37]])[0] == pytest.approx(y.mean())


def test_well_posed_fit_has_no_fallback(rng):
    X = rng.uniform(size=(2000, 1))
    fit = LeastSquaresRegressor(box=[[0, 1]], n_knots=11).fit(X, np.sin(X[:, 0]))
    assert not fit.fallback_ and fit.cond_ < 1e10


def test_multi_output_shapes(rng):
    X = rng.uniform(size=(300, 1))
    Y = np.stack([X[:, 0], 2 * X[:, 0]], axis=1)
    fit = LeastSquaresRegressor(box=[[0, 1]], n_knots=5).fit(X, Y, cov=True)
    assert fit.predict(X[:3]).shape == (3, 2)
    assert fit.predict_stderr(X[:3]).shape == (3, 2)


def test_estimator_api(rng):
    est = LeastSquaresRegressor(n_knots=7)
    with pytest.raises(NotFittedError):
        est.predict([[0.0]])
    assert clone(est).get_params()["n_knots"] == 7
    X = rng.uniform(size=(100, 1))
    est.fit(X, X[:, 0])
    assert est.score(X, X[:, 0]) > 0.999
    with pytest.raises(ValueError):
        LeastSquaresRegressor(basis="splines").fit(X, X[:, 0])


def test_fit_is_deterministic(rng):
    X = rng.uniform(size=(5000, 2))
    y = np.cos(3 * X[:, 0]) * X[:, 1] + rng.normal(size=5000)
    a = LeastSquaresRegressor(box=[[0, 1], [0, 1]], n_knots=8).fit(X, y, cov=True)
    b = LeastSquaresRegressor(box=[[0, 1], [0, 1]], n_knots=8).fit(X, y, cov=True)
    assert np.array_equal(a.coef_, b.coef_) and np.array_equal(a.coef_cov_, b.coef_cov_)
