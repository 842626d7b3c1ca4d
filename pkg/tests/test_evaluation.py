import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from plnnet.evaluation import (
    EdgeRanking,
    baseline_glasso_log,
    confusion_at,
    log_residual_covariance,
    path_to_ranking,
    roc_pr,
)
from plnnet.exceptions import InputError
from plnnet.fit import fit_path
from plnnet.simulation import GroundTruthGraph, benchmark_instance


def brute_force_curves(p, pairs, scores, G):
    """Confusion table at every threshold, then trapezoids by explicit loops."""
    candidates = [(j, k) for j in range(p) for k in range(j + 1, p)]
    score = {c: -np.inf for c in candidates}
    for pair, s in zip(pairs, scores):
        score[pair] = s
    levels = sorted(set(score.values()), reverse=True)
    P = sum(G[j][k] for j, k in candidates)
    N = len(candidates) - P
    roc = [(0.0, 0.0)]
    pr = [(0.0, 1.0)]
    for t in levels:
        tp = fp = 0
        for c in candidates:
            if score[c] >= t:
                if G[c[0]][c[1]]:
                    tp += 1
                else:
                    fp += 1
        roc.append((fp / N, tp / P))
        pr.append((tp / P, tp / (tp + fp)))
    auc = sum((x1 - x0) * (y0 + y1) / 2 for (x0, y0), (x1, y1) in zip(roc, roc[1:]))
    aupr = sum((x1 - x0) * (y0 + y1) / 2 for (x0, y0), (x1, y1) in zip(pr, pr[1:]))
    return auc, aupr


class _Path:
    def __init__(self, grid, omegas):
        self.grid = grid
        self.omegas = omegas


def _ranking_case(draw_seed, p, n_ranked, tie_levels):
    rng = np.random.default_rng(draw_seed)
    cand = [(j, k) for j in range(p) for k in range(j + 1, p)]
    G = np.zeros((p, p), dtype=int)
    labels = rng.permutation([1] + [0] + list(rng.integers(0, 2, len(cand) - 2)))
    for (j, k), lab in zip(cand, labels):
        G[j, k] = G[k, j] = lab
    order = rng.permutation(len(cand))[:n_ranked]
    pairs = [cand[i] for i in order]
    scores = rng.integers(0, tie_levels, len(pairs)).astype(float)
    return G, pairs, scores


def test_three_candidate_example():
    # truth {e1}; ranking e2 > e1 > e3, with e1=(0,1), e2=(0,2), e3=(1,2)
    G = np.zeros((3, 3), dtype=int)
    G[0, 1] = G[1, 0] = 1
    ranking = EdgeRanking(3, ((0, 2), (0, 1), (1, 2)), np.array([3.0, 2.0, 1.0]))
    curve = roc_pr(ranking, G)
    # frozen from brute-force enumeration
    assert curve.auc == pytest.approx(0.5)
    assert curve.aupr == pytest.approx(0.25)
    assert (curve.auc, curve.aupr) == pytest.approx(brute_force_curves(3, ranking.pairs, ranking.scores, G))


def test_perfect_and_worst_rankings():
    G = np.zeros((5, 5), dtype=int)
    true = [(0, 1), (2, 3)]
    for j, k in true:
        G[j, k] = G[k, j] = 1
    others = [(j, k) for j in range(5) for k in range(j + 1, 5) if (j, k) not in true]
    good = EdgeRanking(5, tuple(true + others), np.arange(10, 0, -1.0))
    c = roc_pr(good, G)
    assert c.auc == 1.0 and c.aupr == 1.0
    bad = EdgeRanking(5, tuple(others), np.arange(8, 0, -1.0))
    assert roc_pr(bad, G).auc == 0.0
    assert c.fpr[0] == 0 and c.tpr[0] == 0 and c.fpr[-1] == 1 and c.tpr[-1] == 1


def test_roc_requires_both_classes():
    ranking = EdgeRanking(3, (), np.zeros(0))
    with pytest.raises(InputError):
        roc_pr(ranking, np.zeros((3, 3), dtype=int))
    with pytest.raises(InputError):
        roc_pr(ranking, np.ones((3, 3), dtype=int) - np.eye(3, dtype=int))


def test_ranking_validation():
    with pytest.raises(ValueError):
        EdgeRanking(3, ((0, 1), (1, 0)), np.array([1.0, 2.0]))
    with pytest.raises(ValueError):
        EdgeRanking(3, ((0, 1),), np.array([np.inf]))
    with pytest.raises(ValueError):
        EdgeRanking(3, ((0, 3),), np.array([1.0]))


@settings(max_examples=200, deadline=None)
@given(
    seed=st.integers(0, 2**32 - 1),
    p=st.integers(2, 5),
    frac=st.floats(0, 1),
    tie_levels=st.integers(1, 12),
)
def test_roc_pr_equals_brute_force(seed, p, frac, tie_levels):
    n_cand = p * (p - 1) // 2
    if n_cand < 2:
        p, n_cand = 3, 3
    G, pairs, scores = _ranking_case(seed, p, int(round(frac * n_cand)), tie_levels)
    curve = roc_pr(EdgeRanking(p, tuple(pairs), scores), G)
    auc, aupr = brute_force_curves(p, pairs, scores, G)
    assert curve.auc == pytest.approx(auc, abs=1e-12)
    assert curve.aupr == pytest.approx(aupr, abs=1e-12)
    assert 0 <= curve.auc <= 1 and 0 <= curve.aupr <= 1


@settings(max_examples=50, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), p=st.integers(3, 6))
def test_reversal_complements_auc(seed, p):
    rng = np.random.default_rng(seed)
    cand = [(j, k) for j in range(p) for k in range(j + 1, p)]
    G, _, _ = _ranking_case(seed, p, 0, 1)
    scores = rng.permutation(len(cand)).astype(float)
    r = EdgeRanking(p, tuple(cand), scores)
    assert roc_pr(r, G).auc + roc_pr(r.reversed(), G).auc == pytest.approx(1.0)


@settings(max_examples=50, deadline=None)
@given(seed=st.integers(0, 2**32 - 1))
def test_monotone_rescaling_invariance(seed):
    G, pairs, scores = _ranking_case(seed, 5, 7, 4)
    a = roc_pr(EdgeRanking(5, tuple(pairs), scores), G)
    b = roc_pr(EdgeRanking(5, tuple(pairs), np.exp(scores / 3) * 7 - 2), G)
    assert (a.auc, a.aupr) == (b.auc, b.aupr)


def test_confusion_examples():
    G = np.zeros((5, 5), dtype=int)
    for j, k in [(0, 1), (1, 2), (3, 4)]:
        G[j, k] = G[k, j] = 1
    assert confusion_at(np.eye(5), G) == (1.0, 0.0, 0.0)
    full = np.ones((5, 5)) + 5 * np.eye(5)
    assert confusion_at(full, G) == (0.3, 1.0, 1.0)
    est = np.eye(5)
    for j, k in [(0, 1), (0, 2), (3, 4), (2, 4)]:
        est[j, k] = est[k, j] = -0.1
    # hand count: TP {01, 34}, FP {02, 24}, 3 positives, 7 negatives
    assert confusion_at(est, G) == pytest.approx((0.5, 2 / 3, 2 / 7))
    assert confusion_at(est, GroundTruthGraph(G, "x")) == pytest.approx((0.5, 2 / 3, 2 / 7))


def test_path_to_ranking_rules():
    assert len(path_to_ranking(_Path([], []))) == 0
    base = np.eye(3) * 2
    om1 = base.copy()
    om1[0, 1] = om1[1, 0] = -0.5
    om2 = om1.copy()
    om2[1, 2] = om2[2, 1] = -0.2
    om2[0, 2] = om2[2, 0] = 0.8
    r = path_to_ranking(_Path([3.0, 2.0, 1.0], [base, om1, om2]))
    score = dict(zip(r.pairs, r.scores))
    # (0,1) entered first; among the late pair, larger |rho| wins
    assert score[(0, 1)] > score[(0, 2)] > score[(1, 2)]
    assert dict(zip(r.pairs, r.entry_lambda)) == {(0, 1): 2.0, (0, 2): 1.0, (1, 2): 1.0}
    # reordering equal-lambda input does not matter
    r2 = path_to_ranking(_Path([1.0, 2.0, 3.0], [om2, om1, base]))
    assert dict(zip(r2.pairs, r2.scores)) == score


def test_log_residual_covariance_is_correlation():
    inst = benchmark_instance(30, 6, seed=1)
    C = log_residual_covariance(inst.counts)
    np.testing.assert_allclose(np.diag(C), 1.0)
    np.testing.assert_allclose(C, C.T)


def test_baseline_path():
    inst = benchmark_instance(30, 8, seed=3)
    path = baseline_glasso_log(inst.counts, n_lambda=10)
    first = path.omegas[0]
    assert np.count_nonzero(first - np.diag(np.diag(first))) == 0
    again = baseline_glasso_log(inst.counts, n_lambda=10)
    for a, b in zip(path.omegas, again.omegas):
        np.testing.assert_array_equal(a, b)
    curve = roc_pr(path_to_ranking(path), inst.truth)
    assert 0 <= curve.auc <= 1


def test_baseline_ignores_offsets():
    inst = benchmark_instance(30, 6, seed=2)
    moved = inst.counts.with_offsets(inst.counts.O * 0)
    np.testing.assert_array_equal(log_residual_covariance(moved), log_residual_covariance(inst.counts))


def test_plnnet_path_ranking_scores_truth():
    inst = benchmark_instance(40, 10, nu=100, b=0.0, seed=6)
    curve = roc_pr(path_to_ranking(fit_path(inst.counts, n_lambda=15)), inst.truth)
    assert curve.auc > 0.5
