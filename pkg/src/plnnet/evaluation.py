"""Scoring inferred networks against a known graph, and the log-transform baseline."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Protocol, Sequence

import numpy as np

from . import glasso
from .core import CountDataset, partial_correlations, ModelParams
from .exceptions import InputError
from .simulation import GroundTruthGraph


class _HasPath(Protocol):
    grid: list[float]

    @property
    def omegas(self) -> list[np.ndarray]: ...


@dataclass(frozen=True)
class EdgeRanking:
    """Candidate edges ordered by reliability; higher score means more reliable.

    Pairs absent from the ranking are treated as tied below every ranked pair.
    """

    p: int
    pairs: tuple[tuple[int, int], ...]
    scores: np.ndarray
    entry_lambda: np.ndarray | None = None

    def __post_init__(self):
        pairs = tuple((min(j, k), max(j, k)) for j, k in self.pairs)
        if len(set(pairs)) != len(pairs):
            raise ValueError("duplicate pairs in ranking")
        if any(j == k or not 0 <= j < self.p or not 0 <= k < self.p for j, k in pairs):
            raise ValueError("invalid pair in ranking")
        scores = np.asarray(self.scores, dtype=float)
        if scores.shape != (len(pairs),) or not np.all(np.isfinite(scores)):
            raise ValueError("scores must be finite, one per pair")
        object.__setattr__(self, "pairs", pairs)
        object.__setattr__(self, "scores", scores)

    @property
    def n_candidates(self) -> int:
        return self.p * (self.p - 1) // 2

    def __len__(self) -> int:
        return len(self.pairs)

    def reversed(self) -> "EdgeRanking":
        return EdgeRanking(self.p, self.pairs, -self.scores)


@dataclass(frozen=True)
class CurveSummary:
    fpr: np.ndarray
    tpr: np.ndarray
    recall: np.ndarray
    precision: np.ndarray
    auc: float
    aupr: float


@dataclass
class BaselinePath:
    grid: list[float]
    omegas: list[np.ndarray]


def _dense_rank(keys: np.ndarray) -> np.ndarray:
    """Dense ranks (1 = smallest) of rows of ``keys`` compared lexicographically."""
    if len(keys) == 0:
        return np.zeros(0)
    uniq, inv = np.unique(keys, axis=0, return_inverse=True)
    return inv.ravel().astype(float) + 1.0


def path_to_ranking(path: _HasPath) -> EdgeRanking:
    """Rank edges by the largest penalty at which they enter the support.

    Ties at the same entry penalty are broken by the absolute partial
    correlation at that penalty; exact ties remain ties.
    """
    omegas = list(path.omegas)
    grid = list(path.grid)
    if not omegas:
        return EdgeRanking(0, (), np.zeros(0))
    order = np.argsort(-np.asarray(grid), kind="stable")
    p = omegas[0].shape[0]
    entry_lam = np.full((p, p), np.nan)
    entry_rho = np.zeros((p, p))
    for t in order:
        om = omegas[t]
        d = np.sqrt(np.diag(om))
        rho = np.abs(om) / np.outer(d, d)
        new = (om != 0) & np.isnan(entry_lam)
        entry_lam[new] = grid[t]
        entry_rho[new] = rho[new]
    jj, kk = np.triu_indices(p, k=1)
    seen = ~np.isnan(entry_lam[jj, kk])
    jj, kk = jj[seen], kk[seen]
    keys = np.column_stack([entry_lam[jj, kk], entry_rho[jj, kk]])
    scores = _dense_rank(keys)
    pairs = tuple(zip(jj.tolist(), kk.tolist()))
    return EdgeRanking(p, pairs, scores, entry_lambda=keys[:, 0])


def _truth_labels(truth: GroundTruthGraph | np.ndarray) -> np.ndarray:
    G = np.asarray(getattr(truth, "adjacency", truth))
    return G


def roc_pr(ranking: EdgeRanking, truth: GroundTruthGraph | np.ndarray) -> CurveSummary:
    """ROC and precision-recall curves of ``ranking`` with trapezoidal areas.

    Thresholds run over the distinct scores; pairs not in the ranking enter
    last, so the ROC curve ends at (1, 1).  The PR curve starts at
    (recall 0, precision 1).
    """
    G = _truth_labels(truth)
    p = G.shape[0]
    if ranking.p not in (0, p):
        raise InputError(f"ranking is over {ranking.p} nodes, truth over {p}")
    jj, kk = np.triu_indices(p, k=1)
    labels_all = G[jj, kk].astype(bool)
    n_pos = int(labels_all.sum())
    n_neg = labels_all.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise InputError("truth must contain at least one edge and one non-edge")

    index = {pair: i for i, pair in enumerate(zip(jj.tolist(), kk.tolist()))}
    score = np.full(labels_all.size, -np.inf)
    for (j, k), s in zip(ranking.pairs, ranking.scores):
        score[index[(j, k)]] = s

    levels = np.unique(score)[::-1]
    tp = np.array([np.sum(labels_all & (score >= t)) for t in levels], dtype=float)
    fp = np.array([np.sum(~labels_all & (score >= t)) for t in levels], dtype=float)
    tpr = np.concatenate([[0.0], tp / n_pos])
    fpr = np.concatenate([[0.0], fp / n_neg])
    recall = tpr
    precision = np.concatenate([[1.0], tp / (tp + fp)])
    auc = float(np.trapezoid(tpr, fpr))
    aupr = float(np.trapezoid(precision, recall))
    return CurveSummary(fpr, tpr, recall, precision, auc, aupr)


def confusion_at(
    estimate: np.ndarray | ModelParams | object,
    truth: GroundTruthGraph | np.ndarray,
) -> tuple[float, float, float]:
    """Precision, recall and fall-out of one estimated network.

    ``estimate`` is a precision matrix, or anything with an ``Omega``
    attribute (fit results, model parameters).  Precision is 1 when no edge
    is predicted.
    """
    Omega = np.asarray(getattr(estimate, "Omega", estimate))
    G = _truth_labels(truth)
    p = G.shape[0]
    jj, kk = np.triu_indices(p, k=1)
    pred = Omega[jj, kk] != 0
    true = G[jj, kk].astype(bool)
    tp = int(np.sum(pred & true))
    fp = int(np.sum(pred & ~true))
    n_pos = int(true.sum())
    n_neg = true.size - n_pos
    precision = tp / (tp + fp) if tp + fp else 1.0
    recall = tp / n_pos if n_pos else 0.0
    fallout = fp / n_neg if n_neg else 0.0
    return precision, recall, fallout


def f1_score(estimate, truth) -> float:
    precision, recall, _ = confusion_at(estimate, truth)
    if precision + recall == 0:
        return 0.0
    return 2 * precision * recall / (precision + recall)


def log_residual_covariance(data: CountDataset) -> np.ndarray:
    """Covariance of column-standardized OLS residuals of ``log(1 + Y)`` on ``X`` (offsets ignored)."""
    target = np.log1p(data.Y)
    coef, *_ = np.linalg.lstsq(data.X, target, rcond=None)
    resid = target - data.X @ coef
    sd = resid.std(axis=0)
    sd = np.where(sd > 0, sd, 1.0)
    z = resid / sd
    cov = z.T @ z / data.n
    cov = 0.5 * (cov + cov.T)
    diag = np.diag(cov).copy()
    diag[diag <= 0] = 1.0
    cov[np.diag_indices_from(cov)] = diag
    return cov


def baseline_glasso_log(
    data: CountDataset,
    grid: Sequence[float] | None = None,
    n_lambda: int = 30,
    min_ratio: float = 1e-3,
    tol: float = 1e-5,
) -> BaselinePath:
    """Graphical lasso path on log-transformed counts, the usual two-step baseline."""
    cov = log_residual_covariance(data)
    if grid is None:
        lmax = glasso.lambda_max(cov, data.n) or 1.0
        grid = np.geomspace(lmax, lmax * min_ratio, n_lambda)
    grid = [float(g) for g in grid]
    omegas = []
    warm = None
    for lam in grid:
        sol = glasso.solve(glasso.GlassoProblem(cov, lam, data.n), tol=tol, warm=warm)
        omegas.append(sol.Omega)
        warm = sol
    return BaselinePath(grid, omegas)


def network_edges(Omega: np.ndarray, nodes: Sequence[str] = ()):
    """Partial-correlation edge list of a precision matrix."""
    return partial_correlations(ModelParams(np.zeros((0, Omega.shape[0])), Omega), nodes=nodes)
