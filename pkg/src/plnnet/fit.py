"""Alternating maximization of the penalized variational bound.

Each outer iteration runs

* a V-step: maximize J over (B, M, S) for fixed Omega, a smooth concave
  problem with the box constraint ``S >= var_floor``;
* an M-step: maximize J_sp over Omega for fixed (B, M, S), which is a
  graphical lasso on the latent covariance estimate.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np
from scipy.sparse.linalg import LinearOperator, cg

from . import glasso
from .core import (
    VAR_FLOOR,
    CountDataset,
    ModelParams,
    VariationalParams,
    count_edges,
    elbo,
    latent_covariance,
    offdiag_l1,
)
from .exceptions import InputError, NumericalError

logger = logging.getLogger(__name__)

# line-search trial points whose log-rates exceed this are rejected outright
_EXP_CLIP = 600.0

NULL_FIT_TOL = 1e-8
LAMBDA_MAX_MARGIN = 1e-3


@dataclass(frozen=True)
class FitConfig:
    lam: float = 0.0
    outer_tol: float = 1e-4
    outer_max_iter: int = 50
    vstep_tol: float = 1e-6
    vstep_max_iter: int = 500
    var_floor: float = VAR_FLOOR
    glasso_tol: float = 1e-5
    glasso_max_iter: int = 100

    def __post_init__(self):
        if self.lam < 0:
            raise ValueError(f"lambda must be non-negative, got {self.lam}")
        for name in ("outer_tol", "vstep_tol", "var_floor", "glasso_tol"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        for name in ("outer_max_iter", "vstep_max_iter", "glasso_max_iter"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be at least 1")


@dataclass
class FitResult:
    params: ModelParams
    vparams: VariationalParams
    elbo_trace: list[float]
    n_edges: int
    converged: bool
    lam: float
    elbo: float = float("nan")
    vstep_converged: bool = True

    @property
    def Omega(self) -> np.ndarray:
        return self.params.Omega

    @property
    def penalized_elbo(self) -> float:
        return self.elbo_trace[-1] if self.elbo_trace else float("nan")


@dataclass
class PathResult:
    grid: list[float]
    fits: list[FitResult]
    criteria: list[dict] = field(default_factory=list)

    @property
    def omegas(self) -> list[np.ndarray]:
        return [f.params.Omega for f in self.fits]

    @property
    def edge_counts(self) -> list[int]:
        return [f.n_edges for f in self.fits]


# ---------------------------------------------------------------------------
# initialization


def _check_full_rank(X: np.ndarray, names: Sequence[str]):
    rank = np.linalg.matrix_rank(X)
    if rank == X.shape[1]:
        return
    # greedily find columns that add nothing to the span of earlier ones
    dependent = []
    kept: list[int] = []
    for l in range(X.shape[1]):
        if np.linalg.matrix_rank(X[:, kept + [l]]) == len(kept) + 1:
            kept.append(l)
        else:
            dependent.append(names[l])
    raise InputError(f"design matrix is rank deficient; dependent columns: {', '.join(dependent)}")


def pearson_residuals(data: CountDataset) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """OLS of ``log(1 + Y) - O`` on ``X``; returns (coefficients, standardized residuals, scale).

    Residuals of each column are divided by that column's residual standard
    error.  Columns with (numerically) zero residual variance get scale 1 and
    therefore zero residuals.
    """
    _check_full_rank(data.X, data.covariate_names)
    target = np.log1p(data.Y) - data.O
    coef, *_ = np.linalg.lstsq(data.X, target, rcond=None)
    resid = target - data.X @ coef
    dof = max(data.n - data.d, 1)
    se = np.sqrt((resid**2).sum(axis=0) / dof)
    degenerate = se <= 1e-12 * max(1.0, float(np.abs(target).max()))
    se = np.where(degenerate, 1.0, se)
    resid = np.where(degenerate[None, :], 0.0, resid / se)
    return coef, resid, se


def residual_covariance(resid: np.ndarray) -> np.ndarray:
    """Covariance (divisor n) of standardized residuals with degenerate columns set to unit variance."""
    n = resid.shape[0]
    cov = resid.T @ resid / n
    cov = 0.5 * (cov + cov.T)
    diag = np.diag(cov).copy()
    dead = diag <= 1e-12
    if dead.any():
        cov[dead, :] = 0.0
        cov[:, dead] = 0.0
        diag[dead] = 1.0
        cov[np.diag_indices_from(cov)] = diag
    return cov


def initialize(data: CountDataset, lam: float = 0.0, glasso_tol: float = 1e-5):
    """Starting point from Pearson residuals of a linear model of ``log(1 + Y)``.

    Returns ``(ModelParams, VariationalParams)`` with ``S = 0.1`` everywhere
    and Omega the graphical-lasso estimate at ``lam`` on the residual
    covariance (``lam = inf`` gives a diagonal precision).
    """
    coef, resid, _ = pearson_residuals(data)
    cov = residual_covariance(resid)
    Omega = _mstep_from_cov(cov, data.n, lam, glasso_tol, 100).Omega
    M = resid.copy()
    S = np.full_like(M, 0.1)
    return ModelParams(coef, Omega), VariationalParams(M, S)


# ---------------------------------------------------------------------------
# V-step


class _ProfiledBound:
    """The V-step objective with B and S maximized out.

    Writing ``U = X B + M``, the bound depends on ``B`` only through the
    prior term ``-tr(M Omega M') / 2``, which is maximized by the OLS
    projection ``B = (X'X)^{-1} X'U``; the optimal ``M`` is then the residual
    ``(I - H) U``.  Given ``U`` each variance solves a scalar concave problem,
    so what remains is a smooth unconstrained concave problem in ``U``.
    """

    def __init__(self, data: CountDataset, Omega: np.ndarray, var_floor: float):
        self.data = data
        self.Omega = Omega
        self.w = np.diag(Omega).copy()
        self.var_floor = var_floor
        self.Q, self.R = np.linalg.qr(data.X)
        self.resid_leverage = 1.0 - np.sum(self.Q**2, axis=1)

    def residual(self, V: np.ndarray) -> np.ndarray:
        return V - self.Q @ (self.Q.T @ V)

    def coefficients(self, U: np.ndarray) -> np.ndarray:
        return np.linalg.solve(self.R, self.Q.T @ U)

    def variances(self, C: np.ndarray, S0: np.ndarray) -> np.ndarray:
        """Root of ``1/s = exp(C + s/2) + omega_jj`` per cell (safeguarded Newton)."""
        w = self.w[None, :]
        a = np.exp(C)
        hi = np.broadcast_to(1.0 / w, C.shape).copy()
        lo = 1.0 / (a * np.exp(0.5 * hi) + w)
        s = np.clip(S0, lo, hi)
        for _ in range(100):
            A = a * np.exp(0.5 * s)
            h = 1.0 / s - A - w
            lo = np.where(h > 0, s, lo)
            hi = np.where(h < 0, s, hi)
            step = h / (1.0 / s**2 + 0.5 * A)
            new = s + step
            outside = ~((new > lo) & (new < hi))
            new[outside] = 0.5 * (lo[outside] + hi[outside])
            done = np.max(np.abs(new - s) / s) < 1e-13
            s = new
            if done:
                break
        return np.maximum(s, self.var_floor)

    def evaluate(self, U: np.ndarray, S_guess: np.ndarray):
        """Return ``(J_part, grad_U, S, A)``, or ``None`` if a rate overflows."""
        data = self.data
        C = data.O + U
        if not np.all(C < _EXP_CLIP):
            return None
        S = self.variances(C, S_guess)
        A = np.exp(C + 0.5 * S)
        M = self.residual(U)
        MO = M @ self.Omega
        J = (
            float(np.sum(data.Y * C - A + 0.5 * np.log(S)))
            - 0.5 * float(np.sum(MO * M))
            - 0.5 * float(np.sum(S * self.w[None, :]))
        )
        g = data.Y - A - self.residual(MO)
        return J, g, S, A

    def newton_direction(self, g, S, A, rtol):
        n, p = g.shape
        at_floor = S <= self.var_floor
        curv = np.where(at_floor, A, A - 0.25 * A**2 / (0.25 * A + 0.5 / S**2))
        diag = (curv + np.outer(self.resid_leverage, self.w)).ravel()
        Omega = self.Omega

        def hess(v):
            V = v.reshape(n, p)
            return (curv * V + self.residual(V @ Omega)).ravel()

        op = LinearOperator((n * p, n * p), matvec=hess, dtype=float)
        pre = LinearOperator((n * p, n * p), matvec=lambda v: v / diag, dtype=float)
        delta, _ = cg(op, g.ravel(), rtol=rtol, M=pre, maxiter=max(50, 2 * p))
        return delta.reshape(n, p)


def _vstep_gradients(data, Omega, B, M, S):
    """Ascent gradients of J in (B, M, S) at an arbitrary point (unclipped)."""
    A = np.exp(np.minimum(data.O + data.X @ B + M + 0.5 * S, _EXP_CLIP))
    R = data.Y - A
    gM = R - M @ Omega
    gS = 0.5 * (1.0 / S - A - np.diag(Omega)[None, :])
    return data.X.T @ R, gM, gS


def projected_gradient_norm(gB, gM, gS, S, var_floor) -> float:
    """Sup-norm of the gradient with components pushing S below its floor removed."""
    gS = np.where((S <= var_floor) & (gS < 0), 0.0, gS)
    return float(max(np.abs(gB).max(initial=0.0), np.abs(gM).max(initial=0.0), np.abs(gS).max(initial=0.0)))


@dataclass
class VStepResult:
    B: np.ndarray
    M: np.ndarray
    S: np.ndarray
    converged: bool
    iterations: int
    pg_norm: float


def vstep(
    data: CountDataset,
    Omega: np.ndarray,
    start: tuple[np.ndarray, np.ndarray, np.ndarray],
    cfg: FitConfig,
) -> VStepResult:
    """Maximize J over (B, M, S) with Omega held fixed.

    Truncated Newton ascent in ``U = X B + M`` with B and S maximized out
    exactly (see ``_ProfiledBound``) and a backtracking Armijo line search.
    Variances never go below ``cfg.var_floor``.  Stops once the sup-norm of
    the projected gradient in (B, M, S) is below ``cfg.vstep_tol`` or after
    ``cfg.vstep_max_iter`` iterations; the returned point never has a lower
    J than the start (up to floating-point noise in J itself).
    """
    B0, M0, S0 = (np.asarray(a, dtype=float) for a in start)
    S0 = np.maximum(S0, cfg.var_floor)
    Omega = np.asarray(Omega, dtype=float)
    pg0 = projected_gradient_norm(*_vstep_gradients(data, Omega, B0, M0, S0), S0, cfg.var_floor)
    if pg0 < cfg.vstep_tol:
        return VStepResult(B0, M0, S0, True, 0, pg0)

    bound = _ProfiledBound(data, Omega, cfg.var_floor)
    U = data.X @ B0 + M0
    state = bound.evaluate(U, S0)
    if state is None:
        raise NumericalError("expected counts overflow at the V-step starting point")
    J, g, S, A = state
    # rounding level of J: below it, only the gradient can tell steps apart
    noise = 1e-13 * (np.sum(np.abs(data.Y * (data.O + U))) + np.sum(A)) + 1e-12
    pg = np.inf
    it = 0
    for it in range(1, cfg.vstep_max_iter + 1):
        pg = max(np.abs(g).max(), np.abs(data.X.T @ g).max())
        if pg < cfg.vstep_tol:
            it -= 1
            break
        gnorm = float(np.linalg.norm(g))
        delta = bound.newton_direction(g, S, A, rtol=min(0.1, np.sqrt(gnorm)))
        slope = float(np.sum(g * delta))
        if slope <= 0:
            delta, slope = g, float(np.sum(g * g))
        step = 1.0
        accepted = None
        while step > 1e-12:
            trial = bound.evaluate(U + step * delta, S)
            if trial is not None:
                Jt, gt, St, At = trial
                if Jt >= J + 1e-4 * step * slope:
                    accepted = trial
                    break
                if step * slope < noise and Jt >= J - noise and np.linalg.norm(gt) < gnorm:
                    accepted = trial
                    break
            step *= 0.5
        if accepted is None:
            logger.debug("V-step line search failed at |grad| = %g", pg)
            break
        U = U + step * delta
        J, g, S, A = accepted

    B = bound.coefficients(U)
    M = bound.residual(U)
    pg = projected_gradient_norm(*_vstep_gradients(data, Omega, B, M, S), S, cfg.var_floor)
    return VStepResult(B, M, S, pg < cfg.vstep_tol, it, pg)


# ---------------------------------------------------------------------------
# M-step


def _mstep_from_cov(cov, n, lam, tol, max_iter, warm=None) -> glasso.GlassoSolution:
    if np.isinf(lam):
        return glasso._diagonal_solution(glasso.GlassoProblem(cov, 0.0, n))
    return glasso.solve(glasso.GlassoProblem(cov, lam, n), tol=tol, max_iter=max_iter, warm=warm)


def mstep(
    vparams: VariationalParams,
    n: int,
    lam: float,
    tol: float = 1e-5,
    max_iter: int = 100,
    warm: glasso.GlassoSolution | None = None,
) -> np.ndarray:
    """Maximize J_sp over Omega: a graphical lasso on the latent covariance estimate."""
    return _mstep_solution(vparams, n, lam, tol, max_iter, warm).Omega


def _mstep_solution(vparams, n, lam, tol=1e-5, max_iter=100, warm=None) -> glasso.GlassoSolution:
    return _mstep_from_cov(latent_covariance(vparams), n, lam, tol, max_iter, warm)


# ---------------------------------------------------------------------------
# outer loop


def _penalty(lam: float, Omega: np.ndarray) -> float:
    norm = offdiag_l1(Omega)
    return lam * norm if norm > 0 else 0.0


def fit(
    data: CountDataset,
    cfg: FitConfig,
    warm: FitResult | tuple[ModelParams, VariationalParams] | None = None,
) -> FitResult:
    """Alternate V-steps and M-steps until the relative change of J_sp is below ``cfg.outer_tol``.

    ``warm`` may be a previous ``FitResult`` (for instance at a neighbouring
    penalty) or a ``(ModelParams, VariationalParams)`` pair; otherwise the
    Pearson-residual initialization is used.
    """
    lam = cfg.lam
    if warm is None:
        params, vparams = initialize(data, lam, cfg.glasso_tol)
    elif isinstance(warm, FitResult):
        params, vparams = warm.params.copy(), warm.vparams.copy()
    else:
        params, vparams = warm[0].copy(), warm[1].copy()
    vparams.S = np.maximum(vparams.S, cfg.var_floor)

    n = data.n
    B, M, S = params.B, vparams.M, vparams.S
    Omega = params.Omega
    J_prev = elbo(data, ModelParams(B, Omega), VariationalParams(M, S)) - _penalty(lam, Omega)
    trace: list[float] = []
    converged = False
    v_ok = True
    gl_warm = None
    for it in range(cfg.outer_max_iter):
        vres = vstep(data, Omega, (B, M, S), cfg)
        B, M, S = vres.B, vres.M, vres.S
        v_ok = vres.converged
        vp = VariationalParams(M, S)
        sol = _mstep_solution(vp, n, lam, cfg.glasso_tol, cfg.glasso_max_iter, gl_warm)
        # keep the previous precision if an inexact solve would lower J_sp
        prob = glasso.GlassoProblem(latent_covariance(vp), 0.0 if np.isinf(lam) else lam, n)
        if np.isinf(lam) or glasso.objective(prob, sol.Omega) <= glasso.objective(prob, Omega):
            Omega = sol.Omega
            gl_warm = sol
        J = elbo(data, ModelParams(B, Omega), vp) - _penalty(lam, Omega)
        trace.append(J)
        if abs(J - J_prev) / (1.0 + abs(J)) < cfg.outer_tol:
            converged = True
            break
        J_prev = J
    params = ModelParams(B, Omega)
    vparams = VariationalParams(M, S)
    J_plain = elbo(data, params, vparams)
    if not converged:
        logger.info("fit at lambda=%g stopped after %d outer iterations", lam, cfg.outer_max_iter)
    return FitResult(
        params=params,
        vparams=vparams,
        elbo_trace=trace,
        n_edges=count_edges(Omega),
        converged=converged,
        lam=lam,
        elbo=J_plain,
        vstep_converged=v_ok,
    )


def null_fit(data: CountDataset, cfg: FitConfig) -> FitResult:
    """Fit with a diagonal precision (infinite penalty): independent PLN columns.

    Converged more tightly than ``cfg`` asks, since paths start from it.
    """
    return fit(data, replace(cfg, lam=np.inf, outer_tol=min(cfg.outer_tol, NULL_FIT_TOL)))


def default_grid(data: CountDataset, null: FitResult, n_lambda: int = 30, min_ratio: float = 1e-3) -> list[float]:
    """Geometric grid from just above the empty-network penalty down by ``min_ratio``.

    The top value covers both the Pearson-residual covariance used for
    initialization and the latent covariance of the diagonal-precision fit.
    A small relative margin keeps the empty network a stable fixed point of
    the alternating scheme at the first penalty.
    """
    _, resid, _ = pearson_residuals(data)
    lmax = max(
        glasso.lambda_max(residual_covariance(resid), data.n),
        glasso.lambda_max(latent_covariance(null.vparams), data.n),
    )
    if lmax <= 0:
        lmax = 1.0
    lmax *= 1.0 + LAMBDA_MAX_MARGIN
    return [float(v) for v in np.geomspace(lmax, lmax * min_ratio, n_lambda)]


def fit_path(
    data: CountDataset,
    grid: Sequence[float] | None = None,
    n_lambda: int = 30,
    min_ratio: float = 1e-3,
    cfg: FitConfig | None = None,
    gamma: float = 0.0,
) -> PathResult:
    """Warm-started fits along a decreasing penalty grid.

    The path starts from the diagonal-precision fit, and each subsequent
    penalty starts from the previous solution.  A per-penalty record with
    the edge count, J, J_sp and EBIC (``gamma``) is stored in ``criteria``.
    """
    from .selection import ebic

    cfg = cfg or FitConfig()
    null = null_fit(data, cfg)
    if grid is None:
        grid = default_grid(data, null, n_lambda, min_ratio)
    grid = [float(g) for g in grid]
    if any(g < 0 for g in grid):
        raise ValueError("penalties must be non-negative")
    if any(b >= a for a, b in zip(grid, grid[1:])):
        raise ValueError("grid must be strictly decreasing")
    fits: list[FitResult] = []
    criteria: list[dict] = []
    prev: FitResult = null
    for lam in grid:
        res = fit(data, replace(cfg, lam=lam), warm=prev)
        fits.append(res)
        criteria.append(
            {
                "lambda": lam,
                "n_edges": res.n_edges,
                "elbo": res.elbo,
                "penalized_elbo": res.penalized_elbo,
                "ebic": ebic(res, data, gamma),
                "converged": res.converged,
            }
        )
        prev = res
    return PathResult(grid=grid, fits=fits, criteria=criteria)
