import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import integrate
from scipy.stats import invgamma, multivariate_normal

from occamlme.conjugate import (Scorer, WorkingData, log_marginal, model_core,
                                normalize_log_weights, posterior_moments, sufficient_stats,
                                truncate_weights, window_posterior)
from occamlme.model import GlobalParams, IndividualData, ModelIndicator, NumericalError


def _instance(seed, n=12, p=4, q=2):
    rng = np.random.default_rng(seed)
    X = np.column_stack([np.ones(n), rng.normal(size=(n, q - 1))])
    S = rng.normal(size=(n, p))
    y = X @ rng.normal(size=q) + S @ (rng.normal(size=p) * (rng.random(p) < 0.5)) \
        + rng.normal(scale=0.7, size=n)
    g = GlobalParams(zeta_star=rng.normal(size=q), psi=float(rng.uniform(0.3, 3)),
                     g2=float(rng.uniform(0.3, 3)), a=float(rng.uniform(1, 4)),
                     b=float(rng.uniform(0.2, 2)), a1=1.3, b1=2.2)
    return IndividualData(seed, y, X, S), g


def _dense_stats(data, gamma, g):
    idx = np.concatenate([[0], gamma.indices + 1])
    Sg = data.S1[:, idx]
    Lam = np.diag(np.concatenate([[1 / g.psi], np.full(gamma.count, 1 / g.g2)]))
    r = data.y - data.X @ g.zeta_star
    B = np.linalg.inv(Sg.T @ Sg + Lam)
    A = B @ Sg.T @ r
    C = r @ r - A @ np.linalg.solve(B, A)
    return A, B, C


@pytest.mark.parametrize("seed", range(5))
def test_sufficient_stats_match_dense_algebra(seed):
    data, g = _instance(seed)
    for bits in itertools.product([False, True], repeat=data.p):
        gamma = ModelIndicator(bits)
        st_ = sufficient_stats(data, gamma, g)
        A, B, C = _dense_stats(data, gamma, g)
        np.testing.assert_allclose(st_.A, A, rtol=1e-9, atol=1e-12)
        np.testing.assert_allclose(st_.B, B, rtol=1e-9, atol=1e-12)
        assert st_.C == pytest.approx(C, rel=1e-9, abs=1e-10)
        assert st_.logdet_B == pytest.approx(np.linalg.slogdet(B)[1], rel=1e-10)
        assert st_.C >= 0
        np.testing.assert_allclose(st_.B, st_.B.T)
        assert st_.m_scalar == st_.A[0] and st_.Q_mat.shape == (gamma.count, gamma.count)


def test_batched_core_equals_single_models():
    data, g = _instance(7, p=5)
    wd = WorkingData.from_individual(data)
    models = np.array(list(itertools.product([False, True], repeat=5)))
    batch = model_core(wd, g.zeta_star, models, g)
    for k in range(0, 32, 5):
        one = model_core(wd, g.zeta_star, models[k:k + 1], g)
        np.testing.assert_allclose(batch["C"][k], one["C"][0], rtol=1e-12)
        np.testing.assert_allclose(batch["A"][k], one["A"][0], rtol=1e-12, atol=1e-14)


def _quadrature_log_marginal(data, gamma, g):
    """Integrate beta out through the marginal covariance of y, then sigma^2 numerically."""
    idx = np.concatenate([[0], gamma.indices + 1])
    Sg = data.S1[:, idx]
    D = np.diag(np.concatenate([[g.psi], np.full(gamma.count, g.g2)]))
    cov0 = np.eye(data.n) + Sg @ D @ Sg.T
    mean = data.X @ g.zeta_star
    prior = invgamma(g.a, scale=g.b)

    def log_f(u):  # integrand over u = log sigma^2
        s2 = math.exp(u)
        return multivariate_normal.logpdf(data.y, mean, s2 * cov0) + prior.logpdf(s2) + u

    grid = np.linspace(-30, 30, 601)
    vals = np.array([log_f(u) for u in grid])
    top = vals.max()
    centre = grid[np.argmax(vals)]
    val, _ = integrate.quad(lambda u: math.exp(log_f(u) - top), centre - 25, centre + 25,
                            points=[centre], limit=400, epsabs=0, epsrel=1e-12)
    return math.log(val) + top


@pytest.mark.parametrize("seed", range(4))
def test_log_marginal_quadrature_oracle(seed):
    data, g = _instance(100 + seed, n=3, p=2)
    for bits in itertools.product([False, True], repeat=2):
        gamma = ModelIndicator(bits)
        exact = log_marginal(data, gamma, g, full=True)
        assert exact == pytest.approx(_quadrature_log_marginal(data, gamma, g), abs=1e-6)


def test_full_exponent_disagrees_with_quadrature():
    data, g = _instance(3, n=3, p=2)
    gamma = ModelIndicator((True, False))
    oracle = _quadrature_log_marginal(data, gamma, g)
    other = log_marginal(data, gamma, g, convention="full", full=True)
    assert abs(other - oracle) > 1e-2


def test_posterior_moments_monte_carlo():
    data, g = _instance(11, n=8, p=3)
    gamma = ModelIndicator((True, False, True))
    st_ = sufficient_stats(data, gamma, g)
    mom = posterior_moments(st_, data.n, g)
    rng = np.random.default_rng(0)
    shape, rate = g.a + data.n / 2, g.b + st_.C / 2
    s2 = invgamma(shape, scale=rate).rvs(size=200_000, random_state=rng)
    L = np.linalg.cholesky(st_.B)
    beta = st_.A + np.sqrt(s2)[:, None] * (rng.standard_normal((s2.size, 3)) @ L.T)
    np.testing.assert_allclose(np.mean(beta / s2[:, None], axis=0), mom.e_beta_over_sig2,
                               rtol=2e-2, atol=2e-2)
    assert np.mean(1 / s2) == pytest.approx(mom.e_inv_sig2, rel=1e-2)
    assert np.mean(-np.log(s2)) == pytest.approx(mom.e_neg_log_sig2, rel=1e-2)
    assert np.mean(beta[:, 0] ** 2 / s2) == pytest.approx(mom.e_b1sq_over_sig2, rel=2e-2)
    assert np.mean((beta[:, 1:] ** 2).sum(1) / s2) == pytest.approx(
        mom.e_brest_sq_over_sig2, rel=2e-2)


def test_window_posterior_consistent_with_singles():
    data, g = _instance(5, p=3)
    wd = WorkingData.from_individual(data)
    models = np.array(list(itertools.product([False, True], repeat=3)))
    post = window_posterior(Scorer(wd, g), models)
    singles = [log_marginal(data, ModelIndicator(tuple(m)), g) for m in models]
    np.testing.assert_allclose(post.log_marginal, singles, rtol=1e-12)
    assert post.weights.sum() == pytest.approx(1.0)
    assert np.all((post.inclusion() >= 0) & (post.inclusion() <= 1))


def test_non_pd_raises_numerical_error():
    data, g = _instance(2)
    wd = WorkingData.from_individual(data)
    wd.StS = -10.0 * np.eye(wd.P)
    with pytest.raises(NumericalError):
        sufficient_stats(wd, ModelIndicator((True,) * 4), g)


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-800, 800), min_size=1, max_size=20))
def test_normalize_log_weights(scores):
    s = np.array(scores)
    w = normalize_log_weights(s)
    assert w.sum() == pytest.approx(1.0) and np.all(w >= 0)
    np.testing.assert_allclose(w[s == s.max()], w.max())
    np.testing.assert_allclose(np.log(w[w > 1e-300]) - s[w > 1e-300],
                               np.log(w.max()) - s.max(), atol=1e-9)


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(0, 1), min_size=1, max_size=20), st.floats(0, 0.5))
def test_truncate_weights(raw, eps):
    w = np.array(raw)
    if w.sum() == 0:
        w[0] = 1.0
    w = w / w.sum()
    t = truncate_weights(w, eps)
    assert t.sum() == pytest.approx(1.0)
    kept = w > eps
    if kept.any():
        assert np.all(t[~kept] == 0)
        np.testing.assert_allclose(t[kept], w[kept] / w[kept].sum())
