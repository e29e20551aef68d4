import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from pkinject.coexpr import (CoexpressionGraph, build_graph, graph_stats, naive_graph,
                             pearson_corr, union_graphs)
from pkinject.dataio import ExpressionMatrix

from conftest import random_expression, random_graph

finite = st.floats(-1e3, 1e3, allow_nan=False, allow_infinity=False)


class TestPearson:
    def test_perfect_positive(self):
        assert pearson_corr([1, 2, 3], [2, 4, 6]) == pytest.approx(1.0, abs=1e-15)

    def test_perfect_negative(self):
        assert pearson_corr([1, 2, 3], [3, 2, 1]) == pytest.approx(-1.0, abs=1e-15)

    def test_hand_value(self):
        # centered: (-1.5,-.5,.5,1.5) and (-1.5,.5,-.5,1.5): cov 4, norms sqrt(5) each
        assert pearson_corr([1, 2, 3, 4], [1, 3, 2, 4]) == pytest.approx(0.8, abs=1e-15)

    def test_constant_is_degenerate(self):
        assert pearson_corr([0.1, 0.1, 0.1], [1, 2, 3], with_flag=True) == (0.0, True)

    def test_errors(self):
        with pytest.raises(ValueError):
            pearson_corr([1, 2, 3], [1, 2])
        with pytest.raises(ValueError):
            pearson_corr([1], [1])

    @settings(max_examples=100, deadline=None)
    @given(arrays(np.float64, 12, elements=finite), arrays(np.float64, 12, elements=finite))
    def test_symmetry_exact(self, x, y):
        assert pearson_corr(x, y) == pearson_corr(y, x)

    @settings(max_examples=100, deadline=None)
    @given(st.integers(0, 2**32 - 1), st.floats(0.01, 100), st.floats(-100, 100))
    def test_affine_invariance(self, seed, a, c):
        rng = np.random.default_rng(seed)
        x, y = rng.normal(size=30), rng.normal(size=30)
        assert abs(pearson_corr(a * x + c, y) - pearson_corr(x, y)) < 1e-12


class TestBuildGraph:
    def test_three_gene_example(self):
        expr = ExpressionMatrix(["s1", "s2", "s3"], ["p1", "p2", "p3"], ["g1", "g2", "g3"],
                                np.array([[1, 2, 3], [2, 4, 2], [3, 6, 1]], dtype=float))
        g = build_graph(expr, 0.85)
        assert g.edge_set() == {("g1", "g2")}

    def test_constant_gene_isolated(self, rng):
        expr = random_expression(20, 5, rng)
        vals = expr.values.copy()
        vals[:, 2] = 0.3
        vals[:, 3] = vals[:, 0] * 2 + 1
        g = build_graph(ExpressionMatrix(expr.sample_ids, expr.patient_ids, expr.gene_ids, vals), 0.5)
        assert g.degree()[g.index_of("G0002")] == 0
        assert ("G0000", "G0003") in g.edge_set()

    def test_tau_range(self, rng):
        expr = random_expression(5, 4, rng)
        for tau in (0.0, 1.0, -0.2, 1.5):
            with pytest.raises(ValueError):
                build_graph(expr, tau)

    @pytest.mark.parametrize("seed", range(3))
    def test_matches_naive_oracle(self, seed):
        rng = np.random.default_rng(seed)
        base = rng.normal(size=(40, 6))
        vals = np.abs(base @ rng.normal(size=(6, 80)) + 0.5 * rng.normal(size=(40, 80))) + 0.1
        expr = ExpressionMatrix([f"s{k}" for k in range(40)], [f"p{k}" for k in range(40)],
                                [f"G{k:03d}" for k in range(80)], vals)
        for tau in (0.3, 0.6):
            fast = build_graph(expr, tau, block=7)
            slow = naive_graph(expr, tau)
            assert fast.edge_set() == slow.edge_set()
            np.testing.assert_allclose(fast.weights, slow.weights, atol=1e-10)

    def test_block_and_threads_bitwise(self, rng):
        expr = random_expression(25, 70, rng)
        ref = build_graph(expr, 0.3)
        for block, threads in ((1, 1), (5, 2), (33, 4), (70, 1)):
            g = build_graph(expr, 0.3, block=block, threads=threads)
            assert g == ref
            assert g.weights.tobytes() == ref.weights.tobytes()

    def test_absolute_option(self):
        x = np.array([[1, 3], [2, 2], [3, 1]], dtype=float)
        expr = ExpressionMatrix(["a", "b", "c"], ["a", "b", "c"], ["A", "B"], x)
        assert build_graph(expr, 0.85).n_edges == 0
        assert build_graph(expr, 0.85, absolute=True).n_edges == 1

    def test_gene_order_is_canonical(self, rng):
        expr = random_expression(15, 6, rng)
        perm = rng.permutation(6)
        shuffled = ExpressionMatrix(expr.sample_ids, expr.patient_ids,
                                    [expr.gene_ids[k] for k in perm], expr.values[:, perm])
        assert build_graph(expr, 0.2).edge_set() == build_graph(shuffled, 0.2).edge_set()

    def test_monotone_in_tau(self, rng):
        expr = random_expression(12, 30, rng)
        prev = None
        for tau in (0.2, 0.4, 0.6, 0.8):
            cur = build_graph(expr, tau).edge_set()
            if prev is not None:
                assert cur <= prev
            prev = cur

    def test_row_subset(self, rng):
        expr = random_expression(30, 20, rng)
        rows = np.arange(0, 30, 2)
        assert build_graph(expr, 0.3, rows=rows) == build_graph(expr.subset(rows), 0.3)


class TestUnionAndStats:
    def test_union_examples(self):
        ab = CoexpressionGraph.from_named_edges([("A", "B")])
        bc = CoexpressionGraph.from_named_edges([("B", "C")])
        assert union_graphs(ab, bc).edge_set() == {("A", "B"), ("B", "C")}
        assert union_graphs(ab, ab).edge_set() == {("A", "B")}

    def test_union_keeps_larger_weight(self):
        a = CoexpressionGraph.from_named_edges([("A", "B")], [0.9])
        b = CoexpressionGraph.from_named_edges([("A", "B"), ("B", "C")], [0.95, 0.88])
        u = union_graphs(a, b)
        assert u.weights.tolist() == [0.95, 0.88]

    @settings(max_examples=30, deadline=None)
    @given(st.integers(0, 10_000))
    def test_union_algebra(self, seed):
        rng = np.random.default_rng(seed)
        a, b, c = (random_graph(int(rng.integers(2, 15)), 0.3, rng, prefix=p) for p in "xxy")
        assert union_graphs(a, b) == union_graphs(b, a)
        assert union_graphs(union_graphs(a, b), c) == union_graphs(a, union_graphs(b, c))
        assert union_graphs(a, a) == a

    def test_stats(self):
        assert graph_stats(CoexpressionGraph((), np.zeros((0, 2)))) == (0, 0)
        g = CoexpressionGraph.from_named_edges([("A", "B"), ("B", "C")], gene_ids=["Z"])
        assert graph_stats(g) == (3, 2)

    def test_graph_rejects_bad_edges(self):
        with pytest.raises(ValueError):
            CoexpressionGraph(("a", "b"), np.array([[1, 0]]))
        with pytest.raises(ValueError):
            CoexpressionGraph(("a", "b"), np.array([[0, 0]]))
        with pytest.raises(ValueError):
            CoexpressionGraph(("b", "a"), np.zeros((0, 2)))
        with pytest.raises(ValueError):
            CoexpressionGraph(("a", "b"), np.array([[0, 1]]), np.array([0.5]), tau=0.85)
