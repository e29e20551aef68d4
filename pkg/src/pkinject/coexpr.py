"""Pearson co-expression graphs.

Correlations are computed on standardized gene columns in square tiles so
that the full ``N_genes x N_genes`` correlation matrix is never held in
memory. Edges are emitted per tile and merged in ``(i, j)`` order, which
makes the output independent of the tile size and of the worker count.
"""
from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import TYPE_CHECKING, Iterable, Optional, Sequence

import numpy as np

if TYPE_CHECKING:
    from .dataio import ExpressionMatrix

DEFAULT_TAU = 0.85
DEFAULT_BLOCK = 1024


@dataclass(frozen=True)
class CoexpressionGraph:
    """Undirected gene-gene graph.

    ``edges`` is an ``(E, 2)`` integer array of indices into ``gene_ids``
    with ``i < j`` on every row, rows sorted lexicographically.
    ``weights`` optionally carries the correlation of each edge.
    """

    gene_ids: tuple[str, ...]
    edges: np.ndarray
    weights: Optional[np.ndarray] = None
    tau: Optional[float] = None
    absolute: bool = False
    _index: dict = field(default=None, init=False, repr=False, compare=False)

    def __post_init__(self):
        gene_ids = tuple(self.gene_ids)
        if list(gene_ids) != sorted(set(gene_ids)):
            raise ValueError("gene_ids must be sorted and unique")
        edges = np.asarray(self.edges, dtype=np.int64).reshape(-1, 2)
        if len(edges):
            if np.any(edges[:, 0] == edges[:, 1]):
                raise ValueError("self-loops are not allowed")
            if np.any(edges[:, 0] > edges[:, 1]):
                raise ValueError("edges must satisfy i < j")
            if edges.min() < 0 or edges.max() >= len(gene_ids):
                raise ValueError("edge index out of range")
            order = np.lexsort((edges[:, 1], edges[:, 0]))
            edges = edges[order]
            dup = np.all(edges[1:] == edges[:-1], axis=1)
            if dup.any():
                raise ValueError("duplicate edges")
        else:
            order = np.zeros(0, dtype=np.int64)
        weights = self.weights
        if weights is not None:
            weights = np.asarray(weights, dtype=np.float64).reshape(-1)
            if len(weights) != len(order):
                raise ValueError("weights must align with edges")
            weights = weights[order]
            if self.tau is not None and len(weights):
                w = np.abs(weights) if self.absolute else weights
                if np.any(w <= self.tau):
                    raise ValueError("edge weight does not exceed tau")
        edges.setflags(write=False)
        if weights is not None:
            weights.setflags(write=False)
        object.__setattr__(self, "gene_ids", gene_ids)
        object.__setattr__(self, "edges", edges)
        object.__setattr__(self, "weights", weights)
        object.__setattr__(self, "_index", {g: k for k, g in enumerate(gene_ids)})

    @classmethod
    def from_named_edges(cls, pairs: Iterable[tuple[str, str]], weights=None,
                         gene_ids: Optional[Iterable[str]] = None, **kw) -> "CoexpressionGraph":
        """Build from gene-name pairs, collapsing duplicates and orientation.

        When the same pair occurs several times with weights, the weight of
        largest magnitude is kept.
        """
        pairs = list(pairs)
        names = set(gene_ids or ())
        for a, b in pairs:
            if a == b:
                raise ValueError(f"self-loop on gene {a!r}")
            names.update((a, b))
        genes = sorted(names)
        index = {g: k for k, g in enumerate(genes)}
        best: dict[tuple[int, int], float] = {}
        ws = list(weights) if weights is not None else [None] * len(pairs)
        for (a, b), w in zip(pairs, ws):
            i, j = sorted((index[a], index[b]))
            prev = best.get((i, j))
            if (i, j) not in best or (w is not None and (prev is None or abs(w) > abs(prev))):
                best[(i, j)] = w
        keys = sorted(best)
        edges = np.array(keys, dtype=np.int64).reshape(-1, 2)
        out_w = None
        if weights is not None:
            out_w = np.array([best[k] for k in keys], dtype=np.float64)
        return cls(tuple(genes), edges, out_w, **kw)

    @property
    def n_edges(self) -> int:
        return len(self.edges)

    def index_of(self, gene: str) -> int:
        return self._index[gene]

    def named_edges(self) -> list[tuple[str, str]]:
        g = self.gene_ids
        return [(g[i], g[j]) for i, j in self.edges]

    def edge_set(self) -> set[tuple[str, str]]:
        return set(self.named_edges())

    def degree(self) -> np.ndarray:
        deg = np.zeros(len(self.gene_ids), dtype=np.int64)
        np.add.at(deg, self.edges.reshape(-1), 1)
        return deg

    def __eq__(self, other):
        if not isinstance(other, CoexpressionGraph):
            return NotImplemented
        if self.gene_ids != other.gene_ids or not np.array_equal(self.edges, other.edges):
            return False
        if (self.weights is None) != (other.weights is None):
            return False
        return self.weights is None or np.array_equal(self.weights, other.weights)

    __hash__ = None


def pearson_corr(x, y, with_flag: bool = False):
    """Sample Pearson correlation of two vectors.

    Returns 0.0 when either vector is constant. With ``with_flag=True`` the
    result is ``(r, degenerate)``.
    """
    x = np.asarray(x, dtype=np.float64).ravel()
    y = np.asarray(y, dtype=np.float64).ravel()
    if x.shape != y.shape:
        raise ValueError(f"length mismatch: {x.size} vs {y.size}")
    if x.size < 2:
        raise ValueError("need at least two observations")
    if np.all(x == x[0]) or np.all(y == y[0]):
        return (0.0, True) if with_flag else 0.0
    xc = x - x.mean()
    yc = y - y.mean()
    r = float(np.dot(xc, yc)) / (math.sqrt(float(np.dot(xc, xc))) * math.sqrt(float(np.dot(yc, yc))))
    r = min(1.0, max(-1.0, r))
    return (r, False) if with_flag else r


def standardize_columns(values: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Center each column and scale it to unit Euclidean norm.

    Constant columns become all-zero and are reported in the returned mask.
    """
    X = np.asarray(values, dtype=np.float64)
    constant = np.all(X == X[:1], axis=0)
    Z = X - X.mean(axis=0)
    norms = np.sqrt(np.einsum("ij,ij->j", Z, Z))
    norms[constant] = 1.0
    Z /= norms
    Z[:, constant] = 0.0
    return Z, constant


# tiles only preselect pairs; anything within this margin of tau is rescored
_TILE_MARGIN = 1e-9


def _rescore(ZT, ii, jj):
    """Pairwise correlations summed in one fixed order, whatever the tiling."""
    return np.clip(np.einsum("ij,ij->i", ZT[ii], ZT[jj]), -1.0, 1.0)


def _tile_edges(Z, ZT, starts, bi, block, tau, absolute):
    """Edges with both endpoints >= the row-block start, row in block ``bi``."""
    n = Z.shape[1]
    i0 = starts[bi]
    i1 = min(i0 + block, n)
    Zi = Z[:, i0:i1]
    rows, cols, vals = [], [], []
    for j0 in range(i0, n, block):
        j1 = min(j0 + block, n)
        C = Zi.T @ Z[:, j0:j1]
        hit = (np.abs(C) if absolute else C) > tau - _TILE_MARGIN
        if j0 == i0:
            hit &= np.triu(np.ones(hit.shape, dtype=bool), k=1)
        ii, jj = np.nonzero(hit)
        if len(ii):
            ii, jj = ii + i0, jj + j0
            r = _rescore(ZT, ii, jj)
            keep = (np.abs(r) if absolute else r) > tau
            rows.append(ii[keep])
            cols.append(jj[keep])
            vals.append(r[keep])
    if not rows:
        e = np.zeros(0, dtype=np.int64)
        return e, e, np.zeros(0)
    return np.concatenate(rows), np.concatenate(cols), np.concatenate(vals)


def correlation_edges(values: np.ndarray, tau: float, block: int = DEFAULT_BLOCK,
                      absolute: bool = False, threads: int = 1):
    """Thresholded correlation pairs of the columns of ``values``.

    Returns ``(i, j, r)`` arrays in column-index space with ``i < j``,
    sorted by ``(i, j)``.
    """
    if not 0.0 < tau < 1.0:
        raise ValueError(f"tau must lie in (0, 1), got {tau}")
    if block < 1:
        raise ValueError("block must be positive")
    values = np.asarray(values, dtype=np.float64)
    if values.shape[0] < 2:
        raise ValueError("need at least two samples")
    Z, _ = standardize_columns(values)
    ZT = np.ascontiguousarray(Z.T)
    starts = list(range(0, Z.shape[1], block))
    work = lambda bi: _tile_edges(Z, ZT, starts, bi, block, tau, absolute)
    if threads > 1 and len(starts) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            parts = list(pool.map(work, range(len(starts))))
    else:
        parts = [work(bi) for bi in range(len(starts))]
    i = np.concatenate([p[0] for p in parts])
    j = np.concatenate([p[1] for p in parts])
    r = np.concatenate([p[2] for p in parts])
    order = np.lexsort((j, i))
    return i[order], j[order], r[order]


def build_graph(expr: "ExpressionMatrix", tau: float = DEFAULT_TAU, block: int = DEFAULT_BLOCK,
                absolute: bool = False, threads: int = 1,
                rows: Optional[Sequence[int]] = None) -> CoexpressionGraph:
    """Thresholded Pearson co-expression graph of an expression matrix.

    An edge joins genes i and j when ``r_ij > tau`` (or ``|r_ij| > tau`` with
    ``absolute=True``). ``rows`` restricts the computation to a subset of
    samples, which is how fold-local graphs are built.
    """
    values = expr.values if rows is None else expr.values[np.asarray(rows, dtype=np.int64)]
    i, j, r = correlation_edges(values, tau, block=block, absolute=absolute, threads=threads)
    genes = list(expr.gene_ids)
    order = np.argsort(np.array(genes, dtype=object), kind="stable")
    rank = np.empty(len(genes), dtype=np.int64)
    rank[order] = np.arange(len(genes))
    a, b = rank[i], rank[j]
    edges = np.column_stack([np.minimum(a, b), np.maximum(a, b)])
    return CoexpressionGraph(tuple(sorted(genes)), edges, r, tau=tau, absolute=absolute)


def naive_graph(expr: "ExpressionMatrix", tau: float, absolute: bool = False) -> CoexpressionGraph:
    """All-pairs double loop over :func:`pearson_corr`. Reference only."""
    X = expr.values
    pairs, ws = [], []
    n = X.shape[1]
    for i in range(n):
        for j in range(i + 1, n):
            r = pearson_corr(X[:, i], X[:, j])
            if (abs(r) if absolute else r) > tau:
                pairs.append((expr.gene_ids[i], expr.gene_ids[j]))
                ws.append(r)
    return CoexpressionGraph.from_named_edges(pairs, ws, gene_ids=expr.gene_ids,
                                              tau=tau, absolute=absolute)


def union_graphs(a: CoexpressionGraph, b: CoexpressionGraph) -> CoexpressionGraph:
    """Union of node and edge sets.

    Weights survive only when both inputs are weighted; for an edge present
    in both, the weight of larger magnitude wins.
    """
    weighted = a.weights is not None and b.weights is not None
    pairs = a.named_edges() + b.named_edges()
    weights = None
    if weighted:
        weights = list(a.weights) + list(b.weights)
    genes = set(a.gene_ids) | set(b.gene_ids)
    return CoexpressionGraph.from_named_edges(pairs, weights, gene_ids=genes)


def graph_stats(g: CoexpressionGraph) -> tuple[int, int]:
    """``(genes with degree >= 1, number of edges)``."""
    return int(np.count_nonzero(g.degree())), g.n_edges
