"""Choice of the penalty on a fitted path: StARS resampling or (E)BIC."""

from __future__ import annotations

import logging
import math
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy.special import gammaln

from .core import CountDataset
from .fit import FitConfig, FitResult, PathResult, fit_path

logger = logging.getLogger(__name__)


class StarsWarning(UserWarning):
    """StARS could not make an informed choice (e.g. every network was empty)."""


def default_subsample_size(n: int) -> int:
    """``floor(10 sqrt(n))``, or ``floor(0.8 n)`` when that would not be smaller than ``n``."""
    m = int(math.floor(10.0 * math.sqrt(n)))
    if m >= n:
        m = int(math.floor(0.8 * n))
    return max(m, 1)


@dataclass(frozen=True)
class StarsConfig:
    n_subsamples: int = 50
    subsample_size: int | None = None
    beta2: float = 0.05
    seed: int = 0

    def __post_init__(self):
        if self.n_subsamples < 2:
            raise ValueError("StARS needs at least two subsamples")
        if not 0 < self.beta2 < 1:
            raise ValueError("beta2 must lie in (0, 1)")

    def size_for(self, n: int) -> int:
        m = self.subsample_size if self.subsample_size is not None else default_subsample_size(n)
        if not 1 <= m < n:
            raise ValueError(f"subsample size {m} must be smaller than n = {n}")
        return m


@dataclass(frozen=True)
class StabilityProfile:
    grid: tuple[float, ...]
    frequencies: np.ndarray  # (n_lambda, p, p) edge inclusion frequencies
    stability: np.ndarray  # (n_lambda,)
    selected_index: int
    warning: bool = False

    @property
    def selected_lambda(self) -> float:
        return self.grid[self.selected_index]

    @property
    def variances(self) -> np.ndarray:
        return self.frequencies * (1.0 - self.frequencies)


def stability(frequencies: np.ndarray) -> float:
    """``1 - 2 * mean(p_e (1 - p_e))`` over all unordered pairs."""
    freq = np.asarray(frequencies, dtype=float)
    p = freq.shape[0]
    iu = np.triu_indices(p, k=1)
    pe = freq[iu]
    if pe.size == 0:
        return 1.0
    return float(1.0 - 2.0 * np.mean(pe * (1.0 - pe)))


def select_stars_index(stab: Sequence[float], threshold: float) -> int:
    """Index of the densest penalty kept by the monotonized StARS scan.

    ``stab`` is ordered by decreasing penalty.  The scan starts at the
    sparse end and stops at the first value below ``threshold``; the last
    index that passed is returned (index 0 if none did).
    """
    chosen = 0
    for k, s in enumerate(stab):
        if s < threshold:
            break
        chosen = k
    return chosen


def _subsample_path(args):
    data, rows, grid, fit_cfg = args
    path = fit_path(data.subset(rows), grid=grid, cfg=fit_cfg)
    return np.stack([(om != 0) for om in path.omegas]).astype(float)


def stars(
    data: CountDataset,
    grid: Sequence[float],
    cfg: StarsConfig | None = None,
    fit_cfg: FitConfig | None = None,
    n_jobs: int = 1,
) -> StabilityProfile:
    """Stability Approach to Regularization Selection.

    Fits a warm-started path on each of ``cfg.n_subsamples`` row subsamples
    drawn without replacement, and selects the smallest penalty whose
    network stability stays at or above ``1 - cfg.beta2``.
    """
    cfg = cfg or StarsConfig()
    fit_cfg = fit_cfg or FitConfig()
    grid = [float(g) for g in grid]
    if any(b >= a for a, b in zip(grid, grid[1:])):
        raise ValueError("grid must be strictly decreasing")
    n = data.n
    m = cfg.size_for(n)
    rng = np.random.default_rng(cfg.seed)
    subsamples = [np.sort(rng.choice(n, size=m, replace=False)) for _ in range(cfg.n_subsamples)]
    tasks = [(data, rows, grid, fit_cfg) for rows in subsamples]
    if n_jobs > 1:
        with ProcessPoolExecutor(max_workers=n_jobs) as pool:
            supports = list(pool.map(_subsample_path, tasks))
    else:
        supports = [_subsample_path(t) for t in tasks]
    freq = np.mean(supports, axis=0)
    for k in range(freq.shape[0]):
        np.fill_diagonal(freq[k], 0.0)
    stab = np.array([stability(f) for f in freq])

    all_empty = not np.any(freq)
    if all_empty:
        warnings.warn("every subsample network is empty; returning the largest penalty", StarsWarning)
        idx = 0
    else:
        idx = select_stars_index(stab, 1.0 - cfg.beta2)
        if stab[0] < 1.0 - cfg.beta2:
            warnings.warn("stability threshold violated at the largest penalty", StarsWarning)
    return StabilityProfile(tuple(grid), freq, stab, idx, warning=all_empty or stab[0] < 1.0 - cfg.beta2)


def log_binomial(a: float, b: float) -> float:
    return float(gammaln(a + 1.0) - gammaln(b + 1.0) - gammaln(a - b + 1.0))


def ebic(fit: FitResult, data: CountDataset, gamma: float = 0.0) -> float:
    """Extended BIC with the variational bound J in place of the log-likelihood.

    ``-2 J + log(n) (|E| + p d) + gamma log C(p (p + 1) / 2, |E|)``
    """
    if not 0.0 <= gamma <= 1.0:
        raise ValueError("gamma must lie in [0, 1]")
    n, p, d = data.n, data.p, data.d
    n_edges = fit.n_edges
    value = -2.0 * fit.elbo + math.log(n) * (n_edges + p * d)
    if gamma > 0:
        value += gamma * log_binomial(p * (p + 1) / 2.0, n_edges)
    return value


def select_ebic_index(values: Sequence[float]) -> int:
    """Argmin over a decreasing-penalty grid; ties go to the larger penalty (earlier index)."""
    values = np.asarray(values, dtype=float)
    return int(np.flatnonzero(values == values.min())[0])


def select(
    path: PathResult,
    method: str = "stars",
    data: CountDataset | None = None,
    gamma: float = 0.0,
    stars_cfg: StarsConfig | None = None,
    fit_cfg: FitConfig | None = None,
    profile: StabilityProfile | None = None,
    n_jobs: int = 1,
) -> tuple[float, FitResult]:
    """Pick one fit on ``path`` by StARS or EBIC; returns ``(lambda, fit)``."""
    if len(path.grid) == 1:
        return path.grid[0], path.fits[0]
    if method == "ebic":
        if data is not None:
            values = [ebic(f, data, gamma) for f in path.fits]
        else:
            values = [c["ebic"] for c in path.criteria]
        k = select_ebic_index(values)
    elif method == "stars":
        if profile is None:
            if data is None:
                raise ValueError("StARS needs the data to resample")
            profile = stars(data, path.grid, stars_cfg, fit_cfg, n_jobs=n_jobs)
        k = profile.selected_index
    else:
        raise ValueError(f"unknown selection method {method!r}")
    return path.grid[k], path.fits[k]
