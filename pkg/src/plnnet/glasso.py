"""Graphical lasso with the n/2 scaling of the variational M-step.

Solves, over positive-definite ``Omega``,

    minimize  -(n/2) log det Omega + (n/2) tr(Sigma Omega) + lam * sum_{j != k} |Omega_jk|

which is the classical graphical lasso with an unpenalized diagonal and
per-entry penalty ``rho = 2 lam / n``.  The solver is block coordinate
descent over the columns of the covariance estimate ``W``; each block is a
lasso problem solved by cyclic coordinate descent.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numba
import numpy as np

from .core import logdet_pd, offdiag_l1
from .exceptions import NotPositiveDefiniteError, NumericalError

INNER_MAX_ITER = 1000


@dataclass(frozen=True)
class GlassoProblem:
    Sigma: np.ndarray
    lam: float
    n: int

    def __post_init__(self):
        Sigma = np.asarray(self.Sigma, dtype=float)
        if Sigma.ndim != 2 or Sigma.shape[0] != Sigma.shape[1]:
            raise ValueError("Sigma must be a square matrix")
        if not np.allclose(Sigma, Sigma.T, rtol=1e-10, atol=1e-12):
            raise ValueError("Sigma must be symmetric")
        if np.any(np.diag(Sigma) <= 0):
            raise ValueError("Sigma must have a positive diagonal")
        if self.lam < 0:
            raise ValueError(f"lambda must be non-negative, got {self.lam}")
        if self.n < 1:
            raise ValueError("n must be a positive integer")
        object.__setattr__(self, "Sigma", 0.5 * (Sigma + Sigma.T))

    @property
    def rho(self) -> float:
        """Penalty per off-diagonal entry in the unit-scaled problem."""
        return 2.0 * self.lam / self.n


@dataclass
class GlassoSolution:
    Omega: np.ndarray
    W: np.ndarray
    objective: float
    iterations: int
    converged: bool
    # primal objective after each sweep (inf while the iterate is not PD)
    trace: list[float] = field(default_factory=list)


def lambda_max(Sigma: np.ndarray, n: int) -> float:
    """Smallest penalty at which the solution is diagonal: ``(n/2) max_{j!=k} |Sigma_jk|``."""
    Sigma = np.asarray(Sigma, dtype=float)
    p = Sigma.shape[0]
    if p < 2:
        return 0.0
    off = np.abs(Sigma[~np.eye(p, dtype=bool)])
    return 0.5 * n * float(off.max())


def objective(problem: GlassoProblem, Omega: np.ndarray) -> float:
    half_n = 0.5 * problem.n
    return (
        -half_n * logdet_pd(Omega)
        + half_n * float(np.sum(problem.Sigma * Omega))
        + problem.lam * offdiag_l1(Omega)
    )


@numba.njit(cache=True)
def _soft(x, t):
    if x > t:
        return x - t
    if x < -t:
        return x + t
    return 0.0


@numba.njit(cache=True)
def _lasso_column(W, S, beta, j, rho, inner_tol, inner_max):
    """Coordinate descent for min_b 0.5 b'W11 b - b's12 + rho |b|_1 (column j removed).

    ``beta`` has length p with ``beta[j] == 0`` and is updated in place.
    """
    p = W.shape[0]
    for it in range(inner_max):
        delta = 0.0
        for k in range(p):
            if k == j:
                continue
            acc = 0.0
            for l in range(p):
                if l != j and l != k:
                    acc += W[k, l] * beta[l]
            new = _soft(S[k, j] - acc, rho) / W[k, k]
            change = abs(new - beta[k]) * W[k, k]
            if change > delta:
                delta = change
            beta[k] = new
        if delta < inner_tol:
            return it + 1
    return inner_max


@numba.njit(cache=True)
def _sweep(S, W, Beta, rho, inner_tol, inner_max):
    """One pass over all columns; returns the total absolute change of W off-diagonals."""
    p = S.shape[0]
    total_change = 0.0
    for j in range(p):
        beta = Beta[:, j]
        _lasso_column(W, S, beta, j, rho, inner_tol, inner_max)
        for k in range(p):
            if k == j:
                continue
            w = 0.0
            for l in range(p):
                if l != j:
                    w += W[k, l] * beta[l]
            total_change += 2.0 * abs(w - W[k, j])
            W[k, j] = w
            W[j, k] = w
    return total_change


def _precision_from_blocks(W: np.ndarray, Beta: np.ndarray) -> np.ndarray:
    p = W.shape[0]
    Omega = np.zeros_like(W)
    for j in range(p):
        beta = Beta[:, j].copy()
        beta[j] = 0.0
        w12 = W[:, j].copy()
        w12[j] = 0.0
        theta_jj = 1.0 / (W[j, j] - w12 @ beta)
        Omega[:, j] = -beta * theta_jj
        Omega[j, j] = theta_jj
    # glasso columns agree only at convergence; keep the zero pattern symmetric
    sym = 0.5 * (Omega + Omega.T)
    sym[(Omega == 0) & (Omega.T == 0)] = 0.0
    return sym


def _diagonal_solution(problem: GlassoProblem) -> GlassoSolution:
    d = np.diag(problem.Sigma).copy()
    Omega = np.diag(1.0 / d)
    W = np.diag(d)
    obj = objective(problem, Omega)
    return GlassoSolution(Omega, W, obj, 0, True, [obj])


def solve(
    problem: GlassoProblem,
    tol: float = 1e-4,
    max_iter: int = 100,
    warm: GlassoSolution | None = None,
) -> GlassoSolution:
    """Minimize the penalized Gaussian likelihood of ``problem``.

    Parameters
    ----------
    problem : GlassoProblem
    tol : float
        Convergence threshold on the mean absolute change of the off-diagonal
        entries of ``W`` per sweep, relative to the mean absolute off-diagonal
        entry of ``Sigma``.  The inner lasso problems use ``tol / 10``.
    max_iter : int
        Maximum number of sweeps over the columns.
    warm : GlassoSolution, optional
        Previous solution (same dimension) to start from.

    Returns
    -------
    GlassoSolution
        ``converged`` is False when ``max_iter`` sweeps were not enough; that
        is not treated as an error.
    """
    if tol <= 0:
        raise ValueError("tol must be positive")
    Sigma = problem.Sigma
    p = Sigma.shape[0]

    if problem.lam == 0:
        try:
            L = np.linalg.cholesky(Sigma)
        except np.linalg.LinAlgError:
            raise NotPositiveDefiniteError("singular covariance, positive lambda required") from None
        Linv = np.linalg.inv(L)
        Omega = Linv.T @ Linv
        Omega = 0.5 * (Omega + Omega.T)
        obj = objective(problem, Omega)
        return GlassoSolution(Omega, Sigma.copy(), obj, 0, True, [obj])

    if p < 2:
        return _diagonal_solution(problem)
    off_abs = np.abs(Sigma[~np.eye(p, dtype=bool)])
    rho = problem.rho
    # soft-thresholding zeroes everything; exact at the boundary up to rounding
    if rho >= off_abs.max() * (1.0 - 1e-12):
        return _diagonal_solution(problem)

    if warm is not None and warm.W.shape == Sigma.shape:
        W = np.array(warm.W, dtype=float, copy=True)
        W[np.diag_indices(p)] = np.diag(Sigma)
        Om = warm.Omega
        Beta = -Om / np.diag(Om)[None, :]
        Beta[np.diag_indices(p)] = 0.0
        Beta = np.ascontiguousarray(Beta)
    else:
        W = Sigma.copy()
        Beta = np.zeros((p, p))

    scale = off_abs.mean()
    n_off = p * (p - 1)
    trace: list[float] = []
    converged = False
    sweeps = 0
    Omega = None
    while sweeps < max_iter:
        change = _sweep(Sigma, W, Beta, rho, 0.1 * tol * scale, INNER_MAX_ITER)
        sweeps += 1
        Omega = _precision_from_blocks(W, Beta)
        try:
            trace.append(objective(problem, Omega))
        except NotPositiveDefiniteError:
            trace.append(np.inf)
        if change / n_off < tol * scale:
            converged = True
            break
    obj = trace[-1]
    if not np.isfinite(obj):
        if converged:
            raise NumericalError("graphical lasso returned a non positive-definite precision")
        # unconverged iterate; fall back to the dense inverse of the feasible W
        Omega = np.linalg.inv(W)
        Omega = 0.5 * (Omega + Omega.T)
        obj = objective(problem, Omega)
    return GlassoSolution(Omega, W, obj, sweeps, converged, trace)


def kkt_residual(problem: GlassoProblem, Omega: np.ndarray) -> float:
    """Largest violation of the subgradient optimality conditions at ``Omega``.

    Zero (up to rounding) exactly when ``Omega`` minimizes the objective.
    """
    half_n = 0.5 * problem.n
    grad = half_n * (problem.Sigma - np.linalg.inv(Omega))
    p = Omega.shape[0]
    off = ~np.eye(p, dtype=bool)
    res = np.abs(np.diag(grad)).max() if p else 0.0
    nz = off & (Omega != 0)
    zero = off & (Omega == 0)
    if nz.any():
        res = max(res, np.abs(grad[nz] + problem.lam * np.sign(Omega[nz])).max())
    if zero.any():
        res = max(res, np.maximum(np.abs(grad[zero]) - problem.lam, 0.0).max())
    return float(res)
