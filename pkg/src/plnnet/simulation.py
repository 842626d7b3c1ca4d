"""Synthetic benchmark data: random graphs, precision matrices and count samplers."""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import networkx as nx
import numpy as np

from .core import CountDataset
from .exceptions import InputError

TOPOLOGIES = ("erdos_renyi", "preferential_attachment", "affiliation")


@dataclass(frozen=True)
class GroundTruthGraph:
    adjacency: np.ndarray
    topology: str

    def __post_init__(self):
        G = np.asarray(self.adjacency, dtype=int)
        if G.ndim != 2 or G.shape[0] != G.shape[1]:
            raise ValueError("adjacency must be square")
        if not np.array_equal(G, G.T) or np.any(np.diag(G) != 0) or not np.isin(G, (0, 1)).all():
            raise ValueError("adjacency must be binary, symmetric and hollow")
        G.setflags(write=False)
        object.__setattr__(self, "adjacency", G)

    @property
    def p(self) -> int:
        return self.adjacency.shape[0]

    @property
    def n_edges(self) -> int:
        return int(np.triu(self.adjacency, 1).sum())

    def edge_list(self) -> list[tuple[int, int]]:
        jj, kk = np.nonzero(np.triu(self.adjacency, 1))
        return list(zip(jj.tolist(), kk.tolist()))


@dataclass(frozen=True)
class BenchmarkInstance:
    truth: GroundTruthGraph
    Omega: np.ndarray
    counts: CountDataset
    depths: np.ndarray
    B: np.ndarray
    knobs: dict


def _seed_int(seed) -> int:
    return int(np.random.default_rng(seed).integers(2**31 - 1))


def gen_graph(topology: str, p: int, params: dict | None = None, seed=None) -> GroundTruthGraph:
    """Random ground-truth graph.

    * ``erdos_renyi``: edge probability ``prob`` (default ``2 / p``).
    * ``preferential_attachment``: Barabasi-Albert growth with ``m``
      edges per new node (default 1, a tree).
    * ``affiliation``: ``k`` balanced blocks (default 3) with within-block
      probability ``p_in`` (0.25) and between-block ``p_out`` (0.01).
    """
    params = dict(params or {})
    if p < 1:
        raise InputError("p must be positive")
    s = _seed_int(seed)
    if topology == "erdos_renyi":
        prob = params.get("prob", min(1.0, 2.0 / p) if p > 1 else 0.0)
        if not 0.0 <= prob <= 1.0:
            raise InputError(f"edge probability {prob} outside [0, 1]")
        g = nx.gnp_random_graph(p, prob, seed=s)
    elif topology == "preferential_attachment":
        m = params.get("m", 1)
        if not 1 <= m < max(p, 2):
            raise InputError(f"attachment count {m} must be in [1, p)")
        g = nx.barabasi_albert_graph(p, m, seed=s) if p > 1 else nx.empty_graph(1)
    elif topology == "affiliation":
        k = params.get("k", 3)
        p_in = params.get("p_in", 0.25)
        p_out = params.get("p_out", 0.01)
        if k < 1 or not (0 <= p_in <= 1 and 0 <= p_out <= 1):
            raise InputError("affiliation needs k >= 1 and probabilities in [0, 1]")
        sizes = [p // k + (1 if b < p % k else 0) for b in range(k)]
        probs = [[p_in if a == b else p_out for b in range(k)] for a in range(k)]
        g = nx.stochastic_block_model(sizes, probs, seed=s)
    else:
        raise InputError(f"unknown topology {topology!r}; expected one of {TOPOLOGIES}")
    G = nx.to_numpy_array(g, nodelist=range(p), dtype=int)
    return GroundTruthGraph(G, topology)


def graph_to_precision(G, u: float = 0.1, v: float = 0.3) -> np.ndarray:
    """``v G`` shifted by ``|lambda_min(v G)| + u`` on the diagonal; smallest eigenvalue ``u``."""
    if u <= 0 or v <= 0:
        raise InputError("u and v must be positive")
    G = np.asarray(getattr(G, "adjacency", G), dtype=float)
    base = G * v
    shift = abs(np.linalg.eigvalsh(base).min()) + u
    return base + shift * np.eye(G.shape[0])


def _latent_gaussian(rng, n: int, Omega: np.ndarray) -> np.ndarray:
    """Rows ~ N(0, Omega^{-1}) via the Cholesky factor of Omega."""
    L = np.linalg.cholesky(Omega)
    eps = rng.standard_normal((n, Omega.shape[0]))
    # Omega = L L'  =>  L'^{-1} eps has covariance Omega^{-1}
    return np.linalg.solve(L.T, eps.T).T


def sample_pln(n: int, X, B, O, Omega, seed=None) -> CountDataset:
    """Counts from the PLN network model with design ``X``, coefficients ``B`` and offsets ``O``."""
    rng = np.random.default_rng(seed)
    X = np.asarray(X, dtype=float)
    B = np.asarray(B, dtype=float)
    Omega = np.asarray(Omega, dtype=float)
    p = Omega.shape[0]
    O = np.broadcast_to(np.asarray(O, dtype=float), (n, p))
    Z = _latent_gaussian(rng, n, Omega)
    Y = rng.poisson(np.exp(O + X @ B + Z))
    return CountDataset(Y, X, O)


def softmax_rows(log_abundance) -> np.ndarray:
    """Proportions ``exp(b_ij) / sum_j exp(b_ij)`` per row."""
    b = np.atleast_2d(np.asarray(log_abundance, dtype=float))
    b = b - b.max(axis=1, keepdims=True)
    e = np.exp(b)
    return e / e.sum(axis=1, keepdims=True)


def sample_depths(rng, n: int, mean: float, nu: float) -> np.ndarray:
    """Negative binomial depths with mean ``mean`` and variance ``mean + mean**2 / nu``.

    Zero draws are redrawn once and then floored at 1.
    """
    if nu <= 0:
        raise InputError(f"dispersion nu must be positive, got {nu}")
    prob = nu / (nu + mean)
    N = rng.negative_binomial(nu, prob, size=n)
    zero = N == 0
    if zero.any():
        N[zero] = rng.negative_binomial(nu, prob, size=int(zero.sum()))
    return np.maximum(N, 1)


def anova_design(n: int, groups: int = 3) -> np.ndarray:
    """Cell-means indicator design of a balanced one-way ANOVA."""
    if n < groups:
        raise InputError(f"need at least {groups} rows for {groups} groups")
    if n % groups:
        warnings.warn(f"n={n} is not divisible by {groups}; groups differ in size by one", stacklevel=2)
    labels = np.repeat(np.arange(groups), int(np.ceil(n / groups)))[:n]
    X = np.zeros((n, groups))
    X[np.arange(n), labels] = 1.0
    return X


def sample_coefficients(d: int, p: int, b: float, seed=None) -> np.ndarray:
    """IID ``Uniform(-b, b)`` regression coefficients."""
    if b < 0:
        raise InputError("b must be non-negative")
    rng = np.random.default_rng(seed)
    if b == 0:
        return np.zeros((d, p))
    return rng.uniform(-b, b, size=(d, p))


def sample_compositional(
    n: int,
    Omega,
    X,
    B,
    depth_mu: float = 1000.0,
    depth_nu: float = 10.0,
    seed=None,
    truth: GroundTruthGraph | None = None,
    knobs: dict | None = None,
) -> BenchmarkInstance:
    """Compositional counts: Gaussian log-abundances, softmax proportions, multinomial draws.

    The returned dataset uses offsets ``log N_i`` (the row totals).
    """
    if depth_nu <= 0:
        raise InputError(f"dispersion nu must be positive, got {depth_nu}")
    rng = np.random.default_rng(seed)
    Omega = np.asarray(Omega, dtype=float)
    X = np.asarray(X, dtype=float)
    B = np.asarray(B, dtype=float)
    p = Omega.shape[0]
    log_a = X @ B + _latent_gaussian(rng, n, Omega)
    pi = softmax_rows(log_a)
    N = sample_depths(rng, n, depth_mu, depth_nu)
    Y = np.vstack([rng.multinomial(N[i], pi[i]) for i in range(n)])
    O = np.repeat(np.log(np.maximum(N, 1))[:, None], p, axis=1)
    counts = CountDataset(Y, X, O)
    if truth is None:
        truth = GroundTruthGraph((np.abs(Omega) > 0).astype(int) - np.eye(p, dtype=int), "custom")
    return BenchmarkInstance(truth, Omega, counts, N, B, dict(knobs or {}))


def benchmark_instance(
    n: int,
    p: int,
    nu: float = 10.0,
    b: float = 1.0,
    topology: str = "erdos_renyi",
    u: float = 0.1,
    v: float = 0.3,
    depth_mu: float = 1000.0,
    seed: int = 0,
    graph_params: dict | None = None,
) -> BenchmarkInstance:
    """One replicate of the compositional simulation protocol (ANOVA design, 3 groups)."""
    ss = np.random.SeedSequence(seed)
    s_graph, s_coef, s_data = ss.spawn(3)
    truth = gen_graph(topology, p, graph_params, s_graph)
    Omega = graph_to_precision(truth, u, v)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        X = anova_design(n, 3)
    B = sample_coefficients(3, p, b, s_coef)
    knobs = {"n": n, "p": p, "nu": nu, "b": b, "u": u, "v": v, "topology": topology, "seed": seed}
    return sample_compositional(n, Omega, X, B, depth_mu, nu, s_data, truth=truth, knobs=knobs)
