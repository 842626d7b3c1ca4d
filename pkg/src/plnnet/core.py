"""Poisson log-normal network model: data containers, variational bound and gradients.

Counts follow

    Z_i ~ N(0, Omega^{-1}),   Y_ij | Z_ij ~ Poisson(exp(o_ij + x_i' beta_j + Z_ij))

and the posterior of each Z_i is approximated by N(m_i, diag(s2_i)).  The
intercept, when wanted, is a column of ones in the design ``X``.

Variational variances are stored directly (not standard deviations), so all
gradients below are taken with respect to variances.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property
from typing import Sequence

import numpy as np
from scipy.special import gammaln

from .exceptions import DimensionError, InputError, NotPositiveDefiniteError, NumericalError

#: Lower box bound on variational variances.
VAR_FLOOR = 1e-8

#: Partial correlations with absolute value at or below this are treated as zero.
RHO_ZERO_TOL = 1e-9

# exp() overflows float64 just above this.
_MAX_EXPONENT = np.log(np.finfo(float).max)


def _frozen(a, dtype=float) -> np.ndarray:
    out = np.array(a, dtype=dtype, copy=True)
    out.setflags(write=False)
    return out


@dataclass(frozen=True)
class CountDataset:
    """Observed counts ``Y`` (n x p), design ``X`` (n x d) and offsets ``O`` (n x p).

    Arrays are copied and made read-only on construction.
    """

    Y: np.ndarray
    X: np.ndarray
    O: np.ndarray
    row_names: tuple[str, ...] = ()
    col_names: tuple[str, ...] = ()
    covariate_names: tuple[str, ...] = ()

    def __post_init__(self):
        Y = np.asarray(self.Y, dtype=float)
        X = np.asarray(self.X, dtype=float)
        O = np.asarray(self.O, dtype=float)
        if Y.ndim != 2 or X.ndim != 2 or O.ndim != 2:
            raise DimensionError("Y, X and O must be two-dimensional")
        n, p = Y.shape
        if X.shape[0] != n or O.shape[0] != n:
            raise DimensionError(
                f"row mismatch: Y has {n} rows, X has {X.shape[0]}, O has {O.shape[0]}"
            )
        if O.shape[1] != p:
            raise DimensionError(f"O has {O.shape[1]} columns, Y has {p}")
        for name, arr in (("Y", Y), ("X", X), ("O", O)):
            if not np.all(np.isfinite(arr)):
                raise InputError(f"{name} contains NaN or Inf")
        if np.any(Y < 0) or np.any(Y != np.round(Y)):
            raise InputError("counts must be non-negative integers")
        rows = tuple(self.row_names) or tuple(f"S{i + 1}" for i in range(n))
        cols = tuple(self.col_names) or tuple(f"V{j + 1}" for j in range(p))
        covs = tuple(self.covariate_names) or tuple(f"X{l + 1}" for l in range(X.shape[1]))
        if len(rows) != n or len(cols) != p or len(covs) != X.shape[1]:
            raise DimensionError("identifier lists do not match matrix dimensions")
        object.__setattr__(self, "Y", _frozen(Y))
        object.__setattr__(self, "X", _frozen(X))
        object.__setattr__(self, "O", _frozen(O))
        object.__setattr__(self, "row_names", tuple(str(r) for r in rows))
        object.__setattr__(self, "col_names", tuple(str(c) for c in cols))
        object.__setattr__(self, "covariate_names", tuple(str(c) for c in covs))

    @property
    def n(self) -> int:
        return self.Y.shape[0]

    @property
    def p(self) -> int:
        return self.Y.shape[1]

    @property
    def d(self) -> int:
        return self.X.shape[1]

    @cached_property
    def log_factorial_sum(self) -> float:
        """K(Y) = sum_ij log(Y_ij!), constant across every optimization."""
        return float(gammaln(self.Y + 1.0).sum())

    def subset(self, rows: Sequence[int]) -> "CountDataset":
        rows = np.asarray(rows, dtype=int)
        return CountDataset(
            self.Y[rows],
            self.X[rows],
            self.O[rows],
            row_names=tuple(self.row_names[i] for i in rows),
            col_names=self.col_names,
            covariate_names=self.covariate_names,
        )

    def with_design(self, X, covariate_names: Sequence[str] = ()) -> "CountDataset":
        return CountDataset(self.Y, X, self.O, self.row_names, self.col_names, tuple(covariate_names))

    def with_offsets(self, O) -> "CountDataset":
        O = np.broadcast_to(np.asarray(O, dtype=float), self.Y.shape)
        return CountDataset(self.Y, self.X, O, self.row_names, self.col_names, self.covariate_names)


@dataclass
class ModelParams:
    """Regression coefficients ``B`` (d x p) and precision matrix ``Omega`` (p x p)."""

    B: np.ndarray
    Omega: np.ndarray

    def __post_init__(self):
        self.B = np.asarray(self.B, dtype=float)
        self.Omega = np.asarray(self.Omega, dtype=float)
        if self.Omega.ndim != 2 or self.Omega.shape[0] != self.Omega.shape[1]:
            raise DimensionError("Omega must be square")
        if self.B.ndim != 2 or self.B.shape[1] != self.Omega.shape[0]:
            raise DimensionError(f"B has shape {self.B.shape}, Omega {self.Omega.shape}")

    def copy(self) -> "ModelParams":
        return ModelParams(self.B.copy(), self.Omega.copy())

    @property
    def n_edges(self) -> int:
        return count_edges(self.Omega)


@dataclass
class VariationalParams:
    """Variational means ``M`` and variances ``S`` (both n x p)."""

    M: np.ndarray
    S: np.ndarray

    def __post_init__(self):
        self.M = np.asarray(self.M, dtype=float)
        self.S = np.asarray(self.S, dtype=float)
        if self.M.shape != self.S.shape or self.M.ndim != 2:
            raise DimensionError(f"M has shape {self.M.shape}, S {self.S.shape}")

    def copy(self) -> "VariationalParams":
        return VariationalParams(self.M.copy(), self.S.copy())


@dataclass(frozen=True)
class PartialCorrelationGraph:
    """Edges ``(j, k, rho_jk)`` with ``j < k`` and the node identifiers."""

    edges: list[tuple[int, int, float]]
    nodes: tuple[str, ...] = field(default=())

    def __len__(self) -> int:
        return len(self.edges)

    def adjacency(self) -> np.ndarray:
        p = len(self.nodes)
        G = np.zeros((p, p), dtype=int)
        for j, k, _ in self.edges:
            G[j, k] = G[k, j] = 1
        return G


def count_edges(Omega: np.ndarray) -> int:
    """Number of undirected edges in the off-diagonal support of ``Omega``."""
    off = np.triu(np.asarray(Omega), k=1)
    return int(np.count_nonzero(off))


def _check_dims(data: CountDataset, params: ModelParams, vparams: VariationalParams):
    n, p, d = data.n, data.p, data.d
    if params.B.shape != (d, p):
        raise DimensionError(f"B has shape {params.B.shape}, expected {(d, p)}")
    if params.Omega.shape != (p, p):
        raise DimensionError(f"Omega has shape {params.Omega.shape}, expected {(p, p)}")
    if vparams.M.shape != (n, p):
        raise DimensionError(f"M has shape {vparams.M.shape}, expected {(n, p)}")


def _check_variances(S: np.ndarray):
    if not np.all(S > 0):
        i, j = np.argwhere(~(S > 0))[0]
        raise NumericalError(f"variational variance S[{i}, {j}] = {S[i, j]!r} is not positive")


def log_rate(data: CountDataset, B: np.ndarray) -> np.ndarray:
    """Fixed part of the Poisson log-rate, ``O + X B``."""
    return data.O + data.X @ B


def expected_counts(data: CountDataset, params: ModelParams, vparams: VariationalParams) -> np.ndarray:
    """Variational expectation of the Poisson rates.

    ``A_ij = exp(o_ij + x_i' beta_j + m_ij + s2_ij / 2)``.

    Raises
    ------
    DimensionError
        If the shapes of the data and parameters disagree.
    NumericalError
        If a variance is not positive, or an exponent is not finite or would
        overflow; the message names the offending cell.
    """
    _check_dims(data, params, vparams)
    _check_variances(vparams.S)
    expo = log_rate(data, params.B) + vparams.M + 0.5 * vparams.S
    bad = ~np.isfinite(expo) | (expo > _MAX_EXPONENT)
    if bad.any():
        i, j = np.argwhere(bad)[0]
        raise NumericalError(f"expected count overflows at cell ({i}, {j}): exponent {expo[i, j]!r}")
    return np.exp(expo)


def latent_covariance(vparams: VariationalParams) -> np.ndarray:
    """Estimated latent covariance ``(M'M + diag(sum_i s2_i)) / n``."""
    M, S = vparams.M, vparams.S
    n = M.shape[0]
    if n < 1:
        raise DimensionError("latent_covariance needs at least one row")
    sigma = M.T @ M
    sigma[np.diag_indices_from(sigma)] += S.sum(axis=0)
    sigma /= n
    # M'M is symmetric in exact arithmetic only
    return 0.5 * (sigma + sigma.T)


def logdet_pd(Omega: np.ndarray) -> float:
    """Log-determinant through Cholesky; raises if ``Omega`` is not positive definite."""
    try:
        L = np.linalg.cholesky(Omega)
    except np.linalg.LinAlgError:
        raise NotPositiveDefiniteError("precision not PD: Cholesky factorization failed") from None
    return 2.0 * float(np.log(np.diag(L)).sum())


def elbo(data: CountDataset, params: ModelParams, vparams: VariationalParams) -> float:
    """Variational lower bound J of the observed-data log-likelihood."""
    A = expected_counts(data, params, vparams)
    n, p = data.n, data.p
    Omega = params.Omega
    Sigma = latent_covariance(vparams)
    fixed = log_rate(data, params.B)
    obs = float(np.sum(data.Y * (fixed + vparams.M) - A + 0.5 * np.log(vparams.S)))
    latent = 0.5 * n * logdet_pd(Omega) - 0.5 * n * float(np.sum(Sigma * Omega))
    return obs + latent + 0.5 * n * p - data.log_factorial_sum


def offdiag_l1(Omega: np.ndarray) -> float:
    """Off-diagonal l1 norm, both triangles counted."""
    Omega = np.asarray(Omega)
    return float(np.abs(Omega).sum() - np.abs(np.diag(Omega)).sum())


def penalized_elbo(data: CountDataset, params: ModelParams, vparams: VariationalParams, lam: float) -> float:
    """J minus ``lam`` times the off-diagonal l1 norm of Omega."""
    if lam < 0:
        raise ValueError(f"lambda must be non-negative, got {lam}")
    J = elbo(data, params, vparams)
    norm = offdiag_l1(params.Omega)
    # also keeps lam = inf finite on diagonal precisions
    if lam == 0 or norm == 0:
        return J
    return J - lam * norm


def grad_B(data: CountDataset, params: ModelParams, vparams: VariationalParams) -> np.ndarray:
    A = expected_counts(data, params, vparams)
    return data.X.T @ (data.Y - A)


def grad_M(data: CountDataset, params: ModelParams, vparams: VariationalParams) -> np.ndarray:
    A = expected_counts(data, params, vparams)
    return data.Y - A - vparams.M @ params.Omega


def grad_S(data: CountDataset, params: ModelParams, vparams: VariationalParams) -> np.ndarray:
    """Gradient of J with respect to the variances: ``(1/S - A - 1 diag(Omega)') / 2``."""
    A = expected_counts(data, params, vparams)
    return 0.5 * (1.0 / vparams.S - A - np.diag(params.Omega)[None, :])


def partial_correlations(
    params: ModelParams,
    threshold: float = 0.0,
    nodes: Sequence[str] = (),
) -> PartialCorrelationGraph:
    """Edges of the network encoded by ``params.Omega``.

    A pair ``(j, k)`` is an edge when ``|Omega_jk| > threshold``; its weight is
    the partial correlation ``-Omega_jk / sqrt(Omega_jj Omega_kk)``.  Omega is
    symmetrized first and partial correlations below ``RHO_ZERO_TOL`` in
    magnitude count as structural zeros.
    """
    if threshold < 0:
        raise ValueError("threshold must be non-negative")
    Omega = np.asarray(params.Omega, dtype=float)
    Omega = 0.5 * (Omega + Omega.T)
    diag = np.diag(Omega)
    if np.any(diag <= 0):
        raise NotPositiveDefiniteError("precision not PD: non-positive diagonal entry")
    scale = np.sqrt(np.outer(diag, diag))
    rho = -Omega / scale
    p = Omega.shape[0]
    nodes = tuple(nodes) or tuple(f"V{j + 1}" for j in range(p))
    jj, kk = np.triu_indices(p, k=1)
    keep = (np.abs(Omega[jj, kk]) > threshold) & (np.abs(rho[jj, kk]) > RHO_ZERO_TOL)
    edges = [(int(j), int(k), float(rho[j, k])) for j, k in zip(jj[keep], kk[keep])]
    return PartialCorrelationGraph(edges=edges, nodes=nodes)


def pln_moments(mu, Sigma):
    """Marginal moments of a PLN vector with latent mean ``mu`` and covariance ``Sigma``.

    Returns
    -------
    mean : ndarray, shape (p,)
        ``exp(mu_j + sigma_jj / 2)``.
    var : ndarray, shape (p,)
        ``mean_j + (exp(sigma_jj) - 1) mean_j^2``; never below ``mean_j``.
    cov : ndarray, shape (p, p)
        ``(exp(sigma_jk) - 1) mean_j mean_k`` off the diagonal and ``var`` on it.
    """
    mu = np.atleast_1d(np.asarray(mu, dtype=float))
    Sigma = np.atleast_2d(np.asarray(Sigma, dtype=float))
    if Sigma.shape != (mu.size, mu.size):
        raise DimensionError(f"Sigma has shape {Sigma.shape}, mu has {mu.size} entries")
    try:
        np.linalg.cholesky(Sigma)
    except np.linalg.LinAlgError:
        raise NotPositiveDefiniteError("Sigma is not positive definite") from None
    sdiag = np.diag(Sigma)
    mean = np.exp(mu + 0.5 * sdiag)
    var = mean + np.expm1(sdiag) * mean**2
    cov = np.expm1(Sigma) * np.outer(mean, mean)
    cov[np.diag_indices_from(cov)] = var
    return mean, var, cov
