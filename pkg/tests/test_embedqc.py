import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from pkinject.embedqc import hd_neighbors, ld_neighbors, np_score
from pkinject.nmf import factorize


def random_adj(n, p, rng):
    U = np.triu(rng.uniform(size=(n, n)) < p, 1).astype(float)
    return U + U.T


def brute_hd(M, i, k):
    rows = [j for j in range(len(M)) if j != i and M[j].any()]
    cos = {j: M[i] @ M[j] / np.sqrt((M[i] @ M[i]) * (M[j] @ M[j])) for j in rows}
    return set(sorted(rows, key=lambda j: (-cos[j], j))[:k])


def brute_ld(G, i, k, cand):
    rows = [j for j in range(len(G)) if j != i and cand[j]]
    dist = {j: float(np.sum((G[i] - G[j]) ** 2)) for j in rows}
    return set(sorted(rows, key=lambda j: (dist[j], j))[:k])


class TestHD:
    def test_identical_rows(self):
        M = np.array([[0, 0, 1, 1], [0, 0, 1, 1], [1, 1, 0, 0], [1, 1, 0, 0]], float)
        assert hd_neighbors(M, 0, 1) == {1}

    def test_star_graph(self):
        M = np.zeros((6, 6))
        M[0, 1:] = M[1:, 0] = 1
        assert hd_neighbors(M, 1, 4) == {2, 3, 4, 5}

    def test_brute_force(self, rng):
        M = random_adj(40, 0.15, rng)
        for i in np.flatnonzero(M.any(axis=1))[:15]:
            assert hd_neighbors(M, i, 5) == brute_hd(M, i, 5)

    def test_isolated_gene(self):
        M = np.zeros((4, 4))
        M[1, 2] = M[2, 1] = 1
        with pytest.raises(ValueError):
            hd_neighbors(M, 0, 1)


class TestLD:
    def test_duplicate_rows(self):
        G = np.array([[1.0, 2.0], [3.0, 0.5], [1.0, 2.0]])
        assert ld_neighbors(G, 0, 1) == {2}

    def test_line(self):
        assert ld_neighbors(np.array([[0.0], [1.0], [10.0]]) + 1, 0, 1) == {1}

    def test_brute_force(self, rng):
        G = rng.uniform(size=(100, 8))
        cand = np.ones(100, bool)
        for i in range(0, 100, 7):
            assert ld_neighbors(G, i, 6, tie_tol=0) == brute_ld(G, i, 6, cand)

    def test_zero_row(self):
        with pytest.raises(ValueError):
            ld_neighbors(np.zeros((3, 2)), 0, 1)


class TestNP:
    def test_adjacency_as_embedding_cosine(self, rng):
        M = random_adj(60, 0.1, rng)
        assert np_score(M, M, k=5, ld_metric="cosine").np_score == 1.0

    def test_regular_graph_euclidean(self):
        M = np.kron(np.eye(5), np.ones((8, 8)))
        np.fill_diagonal(M, 0)
        assert np_score(M, M, k=7).np_score == 1.0

    def test_disjoint_neighbors_give_zero(self):
        # HD pairs (0,1) (2,3); LD places 0 next to 2 and 1 next to 3
        M_hd = np.array([[0, 0, 1, 1], [0, 0, 1, 1], [1, 1, 0, 0], [1, 1, 0, 0]], float)
        G = np.array([[0.0], [10.0], [0.1], [10.1]]) + 1
        assert np_score(M_hd, G, k=1).np_score == 0.0

    def test_matches_brute_force(self, rng):
        M = random_adj(80, 0.08, rng)
        G = rng.uniform(size=(80, 6))
        G[~M.any(axis=1)] = 0
        rep = np_score(M, G, k=4, tie_tol=0)
        ev = np.flatnonzero(M.any(axis=1))
        cand = M.any(axis=1)
        vals = [len(brute_hd(M, i, 4) & brute_ld(G, i, 4, cand)) / 4 for i in ev]
        assert rep.genes_evaluated == len(ev)
        assert rep.np_score == pytest.approx(np.mean(vals), abs=1e-15)

    def test_too_few_genes(self):
        M = np.zeros((5, 5))
        M[0, 1] = M[1, 0] = 1
        with pytest.raises(ValueError):
            np_score(M, np.ones((5, 2)), k=2)

    def test_factorized_cliques(self):
        M = np.kron(np.eye(10), np.ones((20, 20)))
        np.fill_diagonal(M, 0)
        scores = [np_score(M, factorize(M, 10, seed=s), k=10).np_score for s in range(3)]
        assert np.median(scores) >= 0.8

    @settings(max_examples=15, deadline=None)
    @given(st.integers(0, 100_000))
    def test_isometry_and_permutation_invariance(self, seed):
        rng = np.random.default_rng(seed)
        M = random_adj(40, 0.15, rng)
        G = rng.uniform(size=(40, 5)) + 0.1
        base = np_score(M, G, k=3, tie_tol=0)
        Q, _ = np.linalg.qr(rng.normal(size=(5, 5)))
        moved = G @ Q + rng.normal(size=5) + 10.0
        assert abs(np_score(M, moved, k=3, tie_tol=0).np_score - base.np_score) < 1e-12
        assert 0.0 <= base.np_score <= 1.0

    @settings(max_examples=15, deadline=None)
    @given(st.integers(0, 100_000))
    def test_permutation_invariance_without_ties(self, seed):
        # continuous weights keep both rankings free of ties
        rng = np.random.default_rng(seed)
        W = np.triu(rng.uniform(size=(40, 40)), 1)
        W = W + W.T
        G = rng.uniform(size=(40, 5)) + 0.1
        p = rng.permutation(40)
        a = np_score(W, G, k=4, tie_tol=0).np_score
        assert np_score(W[p][:, p], G[p], k=4, tie_tol=0).np_score == pytest.approx(a, abs=1e-12)
