import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.special import gammaln

from plnnet.core import (
    CountDataset,
    ModelParams,
    VariationalParams,
    count_edges,
    elbo,
    expected_counts,
    grad_B,
    grad_M,
    grad_S,
    latent_covariance,
    offdiag_l1,
    partial_correlations,
    penalized_elbo,
    pln_moments,
)
from plnnet.exceptions import DimensionError, InputError, NotPositiveDefiniteError, NumericalError


def random_instance(rng, n, p, d):
    X = rng.standard_normal((n, d))
    X[:, 0] = 1.0
    B = 0.3 * rng.standard_normal((d, p))
    O = 0.2 * rng.standard_normal((n, p))
    Y = rng.poisson(3.0, size=(n, p))
    A = rng.standard_normal((p, p))
    Omega = A @ A.T / p + np.eye(p)
    M = 0.5 * rng.standard_normal((n, p))
    S = rng.uniform(0.1, 1.0, size=(n, p))
    return CountDataset(Y, X, O), ModelParams(B, Omega), VariationalParams(M, S)


def elbo_loops(data, params, vparams):
    """Entry-by-entry evaluation of the bound, independent of the matrix code."""
    n, p = data.Y.shape
    total = 0.0
    for i in range(n):
        for j in range(p):
            eta = data.O[i, j] + sum(data.X[i, l] * params.B[l, j] for l in range(data.d)) + vparams.M[i, j]
            a = math.exp(eta + vparams.S[i, j] / 2)
            total += data.Y[i, j] * eta - a + 0.5 * math.log(vparams.S[i, j]) - math.lgamma(data.Y[i, j] + 1)
    Om = params.Omega
    sign, logdet = np.linalg.slogdet(Om)
    quad = 0.0
    for i in range(n):
        m = vparams.M[i]
        quad += m @ Om @ m + sum(vparams.S[i, j] * Om[j, j] for j in range(p))
    return total + n / 2 * logdet - 0.5 * quad + n * p / 2


# --- dataset -------------------------------------------------------------


def test_dataset_validation():
    Y = np.array([[1, 2], [3, 4]])
    X = np.ones((2, 1))
    O = np.zeros((2, 2))
    with pytest.raises(InputError):
        CountDataset(np.array([[1, -1], [0, 0]]), X, O)
    with pytest.raises(InputError):
        CountDataset(np.array([[1.5, 1], [0, 0]]), X, O)
    with pytest.raises(DimensionError):
        CountDataset(Y, np.ones((3, 1)), O)
    with pytest.raises(DimensionError):
        CountDataset(Y, X, np.zeros((2, 3)))
    with pytest.raises(InputError):
        CountDataset(Y, X, np.array([[0, np.nan], [0, 0]]))


def test_dataset_is_immutable():
    data = CountDataset(np.ones((2, 2)), np.ones((2, 1)), np.zeros((2, 2)))
    with pytest.raises(ValueError):
        data.Y[0, 0] = 5
    assert data.log_factorial_sum == 0.0


def test_log_factorial_sum():
    Y = np.array([[0, 1, 5], [2, 3, 10]])
    data = CountDataset(Y, np.ones((2, 1)), np.zeros((2, 3)))
    assert data.log_factorial_sum == pytest.approx(sum(math.lgamma(v + 1) for v in Y.ravel()))


# --- expected counts, covariance ------------------------------------------


def _scalar(Y=0, O=0.0, B=0.0, Om=1.0, M=0.0, S=1.0):
    data = CountDataset([[Y]], [[1.0]], [[O]])
    return data, ModelParams([[B]], [[Om]]), VariationalParams([[M]], [[S]])


def test_expected_counts_scalar_cases():
    assert expected_counts(*_scalar(S=2.0))[0, 0] == pytest.approx(math.e)
    # 2 exp(0.005), evaluated separately
    assert expected_counts(*_scalar(O=math.log(2), S=0.01))[0, 0] == pytest.approx(2.01002504171880, rel=1e-12)


def test_expected_counts_overflow_names_cell():
    data = CountDataset(np.zeros((2, 2)), np.ones((2, 1)), [[0.0, 0.0], [0.0, 800.0]])
    params = ModelParams(np.zeros((1, 2)), np.eye(2))
    vp = VariationalParams(np.zeros((2, 2)), np.ones((2, 2)))
    with pytest.raises(NumericalError, match=r"1, 1"):
        expected_counts(data, params, vp)


def test_latent_covariance_examples():
    vp = VariationalParams(np.zeros((4, 3)), np.ones((4, 3)))
    np.testing.assert_array_equal(latent_covariance(vp), np.eye(3))
    vp = VariationalParams([[1.0], [-1.0]], [[0.5], [0.5]])
    assert latent_covariance(vp)[0, 0] == pytest.approx(1.5)


def test_latent_covariance_loop_oracle():
    rng = np.random.default_rng(4)
    M = rng.standard_normal((7, 4))
    S = rng.uniform(0.1, 2, (7, 4))
    expect = sum(np.outer(M[i], M[i]) + np.diag(S[i]) for i in range(7)) / 7
    np.testing.assert_allclose(latent_covariance(VariationalParams(M, S)), expect, rtol=1e-13)


# --- ELBO ---------------------------------------------------------------


def test_elbo_scalar_hand_value():
    assert elbo(*_scalar()) == pytest.approx(-math.exp(0.5), rel=1e-14)


@pytest.mark.parametrize("seed", range(5))
def test_elbo_matches_loop_oracle(seed):
    rng = np.random.default_rng(seed)
    args = random_instance(rng, 6, 4, 2)
    assert elbo(*args) == pytest.approx(elbo_loops(*args), rel=1e-12)


def test_elbo_binary_counts_have_no_factorial_term():
    Y = np.array([[0, 1], [1, 1]])
    data = CountDataset(Y, np.ones((2, 1)), np.zeros((2, 2)))
    assert data.log_factorial_sum == 0.0


def test_elbo_rejects_non_pd_precision():
    data, params, vp = _scalar()
    params = ModelParams([[0.0]], [[-1.0]])
    with pytest.raises(NotPositiveDefiniteError, match="precision not PD"):
        elbo(data, params, vp)


def test_elbo_monte_carlo_oracle():
    # E_q[log p(Y, Z)] - E_q[log q(Z)] by sampling Z ~ q, with Z = XB + M + noise
    rng = np.random.default_rng(11)
    data, params, vp = random_instance(rng, 2, 2, 1)
    draws = 10**6
    Sigma = np.linalg.inv(params.Omega)
    total = np.zeros(draws)
    for i in range(data.n):
        mean = vp.M[i]
        sd = np.sqrt(vp.S[i])
        Z = mean + sd * rng.standard_normal((draws, 2))
        eta = data.O[i] + data.X[i] @ params.B + Z
        log_pois = (data.Y[i] * eta - np.exp(eta) - gammaln(data.Y[i] + 1)).sum(axis=1)
        quad = np.einsum("ij,jk,ik->i", Z, params.Omega, Z)
        log_prior = -0.5 * quad - 0.5 * np.linalg.slogdet(2 * np.pi * Sigma)[1]
        log_q = (-0.5 * ((Z - mean) / sd) ** 2 - np.log(sd) - 0.5 * np.log(2 * np.pi)).sum(axis=1)
        total += log_pois + log_prior - log_q
    est = total.mean()
    se = total.std(ddof=1) / math.sqrt(draws)
    assert abs(elbo(data, params, vp) - est) < 3 * se


def test_penalized_elbo_examples():
    rng = np.random.default_rng(0)
    data, params, vp = random_instance(rng, 5, 2, 1)
    J = elbo(data, params, vp)
    assert penalized_elbo(data, params, vp, 0.0) == J
    Om = np.array([[1.0, 0.3], [0.3, 1.0]])
    p2 = ModelParams(params.B, Om)
    assert penalized_elbo(data, p2, vp, 1.0) == pytest.approx(elbo(data, p2, vp) - 0.6, rel=1e-14)
    diag = ModelParams(params.B, np.diag([1.0, 2.0]))
    assert penalized_elbo(data, diag, vp, 7.0) == elbo(data, diag, vp)
    assert offdiag_l1(Om) == pytest.approx(0.6)


@settings(max_examples=30, deadline=None)
@given(lam1=st.floats(0, 50), lam2=st.floats(0, 50))
def test_penalized_elbo_non_increasing_in_lambda(lam1, lam2):
    rng = np.random.default_rng(3)
    args = random_instance(rng, 4, 3, 1)
    lo, hi = sorted((lam1, lam2))
    assert penalized_elbo(*args, hi) <= penalized_elbo(*args, lo)


# --- gradients ------------------------------------------------------------


def _fd(f, x, h=1e-5):
    g = np.zeros_like(x)
    for idx in np.ndindex(x.shape):
        xp, xm = x.copy(), x.copy()
        xp[idx] += h
        xm[idx] -= h
        g[idx] = (f(xp) - f(xm)) / (2 * h)
    return g


def _rel_err(a, b):
    return np.max(np.abs(a - b)) / max(np.max(np.abs(b)), 1.0)


@pytest.mark.parametrize("seed", range(4))
def test_gradients_match_finite_differences(seed):
    rng = np.random.default_rng(100 + seed)
    data, params, vp = random_instance(rng, 6, 4, 2)
    gB = _fd(lambda B: elbo(data, ModelParams(B, params.Omega), vp), params.B)
    gM = _fd(lambda M: elbo(data, params, VariationalParams(M, vp.S)), vp.M)
    gS = _fd(lambda S: elbo(data, params, VariationalParams(vp.M, S)), vp.S, h=1e-6)
    assert _rel_err(grad_B(data, params, vp), gB) < 1e-6
    assert _rel_err(grad_M(data, params, vp), gM) < 1e-6
    assert _rel_err(grad_S(data, params, vp), gS) < 1e-6


def test_gradient_closed_forms():
    # A == Y makes grad_B vanish; Omega = I makes grad_M = Y - A - M
    n, p = 3, 2
    S = np.full((n, p), 2 * math.log(2.0))  # exp(S/2) = 2
    data = CountDataset(np.full((n, p), 2), np.ones((n, 1)), np.zeros((n, p)))
    params = ModelParams(np.zeros((1, p)), np.eye(p))
    vp = VariationalParams(np.zeros((n, p)), S)
    np.testing.assert_allclose(grad_B(data, params, vp), 0.0, atol=1e-12)
    np.testing.assert_allclose(grad_M(data, params, vp), 0.0, atol=1e-12)
    M = np.arange(6.0).reshape(3, 2) / 10
    vp = VariationalParams(M, S)
    A = expected_counts(data, params, vp)
    np.testing.assert_allclose(grad_M(data, params, vp), data.Y - A - M)
    np.testing.assert_allclose(grad_B(data, params, vp), (data.Y - A).sum(axis=0, keepdims=True))


def test_grad_S_arithmetic_case():
    # A = 0.5 everywhere, S = 1, diag(Omega) = 0.5 -> zero gradient
    n, p = 2, 2
    O = np.full((n, p), math.log(0.5) - 0.5)
    data = CountDataset(np.zeros((n, p)), np.ones((n, 1)), O)
    params = ModelParams(np.zeros((1, p)), 0.5 * np.eye(p))
    vp = VariationalParams(np.zeros((n, p)), np.ones((n, p)))
    np.testing.assert_allclose(grad_S(data, params, vp), 0.0, atol=1e-14)


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 10**6), t=st.floats(1e-3, 0.2))
def test_directional_concavity_in_variational_block(seed, t):
    rng = np.random.default_rng(seed)
    data, params, vp = random_instance(rng, 5, 3, 2)
    dB = rng.standard_normal(params.B.shape)
    dM = rng.standard_normal(vp.M.shape)
    dS = rng.standard_normal(vp.S.shape) * 0.05

    def J(s):
        return elbo(data, ModelParams(params.B + s * dB, params.Omega), VariationalParams(vp.M + s * dM, vp.S + s * dS))

    second = J(t) - 2 * J(0) + J(-t)
    assert second <= 1e-8 * (1 + abs(J(0)))


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 10**6))
def test_directional_concavity_in_precision(seed):
    rng = np.random.default_rng(seed)
    data, params, vp = random_instance(rng, 5, 3, 1)
    D = rng.standard_normal((3, 3))
    D = (D + D.T) / 2
    t = 0.5 * np.linalg.eigvalsh(params.Omega).min() / np.abs(np.linalg.eigvalsh(D)).max()

    def J(s):
        return elbo(data, ModelParams(params.B, params.Omega + s * D), vp)

    assert J(t) - 2 * J(0) + J(-t) <= 1e-8 * (1 + abs(J(0)))


# --- partial correlations, moments ---------------------------------------


def test_partial_correlations_examples():
    g = partial_correlations(ModelParams(np.zeros((1, 2)), [[0.4, 0.3], [0.3, 0.4]]))
    assert len(g.edges) == 1
    j, k, rho = g.edges[0]
    assert (j, k) == (0, 1) and rho == pytest.approx(-0.75)
    assert partial_correlations(ModelParams(np.zeros((1, 3)), np.diag([1.0, 2, 3]))).edges == []


def test_partial_correlations_sign_threshold_and_noise():
    rng = np.random.default_rng(2)
    A = rng.standard_normal((5, 5))
    Om = A @ A.T + 5 * np.eye(5)
    Om[0, 1] = Om[1, 0] = 0.0
    params = ModelParams(np.zeros((1, 5)), Om)
    g = partial_correlations(params)
    for j, k, rho in g.edges:
        assert np.sign(rho) == -np.sign(Om[j, k])
        assert abs(rho) <= 1
    assert (0, 1) not in {(j, k) for j, k, _ in g.edges}
    assert len(g) == count_edges(Om)
    noise = rng.standard_normal((5, 5)) * 1e-11
    g2 = partial_correlations(ModelParams(params.B, Om + noise))
    assert [(j, k) for j, k, _ in g2.edges] == [(j, k) for j, k, _ in g.edges]
    big = max(abs(Om[j, k]) for j, k, _ in g.edges)
    assert len(partial_correlations(params, threshold=big)) == 0


def test_pln_moments_examples():
    mean, var, cov = pln_moments([1.0], [[1.0]])
    assert mean[0] == pytest.approx(4.4816890703, rel=1e-10)
    assert var[0] == pytest.approx(4.4816890703 + (math.e - 1) * 4.4816890703**2, rel=1e-10)
    assert var[0] == pytest.approx(38.99, abs=0.01)
    mean, var, _ = pln_moments([0.0], [[1e-12]])
    assert mean[0] == pytest.approx(1.0) and var[0] == pytest.approx(1.0)
    with pytest.raises(NotPositiveDefiniteError):
        pln_moments([0.0], [[0.0]])


def test_pln_moments_quadrature_oracle():
    # bivariate Gauss-Hermite integration of E[Y], Var[Y], Cov via the latent layer
    mu = np.array([0.3, -0.2])
    Sigma = np.array([[0.5, 0.2], [0.2, 0.8]])
    x, w = np.polynomial.hermite_e.hermegauss(60)
    w = w / w.sum()
    L = np.linalg.cholesky(Sigma)
    g1, g2 = np.meshgrid(x, x, indexing="ij")
    W = np.outer(w, w)
    Z = mu[:, None, None] + np.einsum("ij,jab->iab", L, np.stack([g1, g2]))
    lam = np.exp(Z)
    m = (W * lam).sum(axis=(1, 2))
    second = (W * lam**2).sum(axis=(1, 2))
    v = m + second - m**2  # law of total variance with Poisson layer
    c = (W * lam[0] * lam[1]).sum() - m[0] * m[1]
    mean, var, cov = pln_moments(mu, Sigma)
    np.testing.assert_allclose(mean, m, rtol=1e-10)
    np.testing.assert_allclose(var, v, rtol=1e-10)
    assert cov[0, 1] == pytest.approx(c, rel=1e-10)
    assert np.all(var >= mean)
