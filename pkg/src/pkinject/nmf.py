"""Nonnegative factorization of co-expression adjacency matrices.

``M ~= G @ Y.T`` with ``G, Y >= 0`` is fitted with the Lee-Seung
multiplicative updates for the squared Frobenius objective. Rows of ``G``
are the gene embeddings.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
import scipy.sparse as sp

from .coexpr import CoexpressionGraph

logger = logging.getLogger(__name__)

EPS = 1e-12
# above this many entries the residual is never formed densely
DENSE_LOSS_LIMIT = 4_000_000


@dataclass(frozen=True)
class AdjacencyMatrix:
    gene_ids: tuple[str, ...]
    matrix: sp.csr_matrix

    def __post_init__(self):
        object.__setattr__(self, "gene_ids", tuple(self.gene_ids))
        m = sp.csr_matrix(self.matrix, dtype=np.float64)
        n = len(self.gene_ids)
        if m.shape != (n, n):
            raise ValueError(f"matrix shape {m.shape} does not match {n} genes")
        m.sum_duplicates()
        m.sort_indices()
        object.__setattr__(self, "matrix", m)

    @property
    def n(self) -> int:
        return len(self.gene_ids)

    def row_nonzero(self) -> np.ndarray:
        return np.diff(self.matrix.indptr) > 0

    def toarray(self) -> np.ndarray:
        return self.matrix.toarray()


@dataclass
class GeneEmbeddings:
    gene_ids: tuple[str, ...]
    G: np.ndarray
    Y: np.ndarray
    final_loss: float = 0.0
    iterations_run: int = 0
    loss_history: list = field(default_factory=list, repr=False)

    @property
    def d(self) -> int:
        return self.G.shape[1]

    def rows_for(self, genes: Sequence[str]) -> np.ndarray:
        """Embedding rows in the order of ``genes``; unknown genes get zeros."""
        index = {g: k for k, g in enumerate(self.gene_ids)}
        out = np.zeros((len(genes), self.d))
        for k, g in enumerate(genes):
            if g in index:
                out[k] = self.G[index[g]]
        return out


def adjacency_from_graph(g: CoexpressionGraph, universe: Sequence[str]) -> AdjacencyMatrix:
    """Symmetric 0/1 adjacency with rows in ``universe`` order."""
    universe = list(universe)
    pos = {x: k for k, x in enumerate(universe)}
    if len(pos) != len(universe):
        raise ValueError("universe contains duplicate genes")
    rows, cols = [], []
    for a, b in g.named_edges():
        if a in pos and b in pos:
            rows.append(pos[a])
            cols.append(pos[b])
    r = np.array(rows + cols, dtype=np.int64)
    c = np.array(cols + rows, dtype=np.int64)
    n = len(universe)
    m = sp.csr_matrix((np.ones(len(r)), (r, c)), shape=(n, n))
    return AdjacencyMatrix(tuple(universe), m)


def _as_matrix(M):
    if isinstance(M, AdjacencyMatrix):
        return M.matrix
    if sp.issparse(M):
        return sp.csr_matrix(M, dtype=np.float64)
    return np.asarray(M, dtype=np.float64)


def frobenius_loss(M, G, Y) -> float:
    """Squared Frobenius norm ``||M - G Y^T||_F^2``.

    Large sparse inputs use ``||M||^2 - 2 <M, G Y^T> + tr(G^T G Y^T Y)``
    so the dense residual is never built.
    """
    M = _as_matrix(M)
    G = np.asarray(G, dtype=np.float64)
    Y = np.asarray(Y, dtype=np.float64)
    n, m = M.shape
    if G.ndim != 2 or Y.ndim != 2 or G.shape[0] != n or Y.shape[0] != m or G.shape[1] != Y.shape[1]:
        raise ValueError(f"shape mismatch: M {M.shape}, G {G.shape}, Y {Y.shape}")
    if n * m <= DENSE_LOSS_LIMIT:
        dense = M.toarray() if sp.issparse(M) else M
        R = dense - G @ Y.T
        return float(np.einsum("ij,ij->", R, R))
    if not sp.issparse(M):
        M = sp.csr_matrix(M)
    coo = M.tocoo()
    cross = np.einsum("ij,ij->i", G[coo.row], Y[coo.col]) @ coo.data
    sq = float(coo.data @ coo.data)
    gram = float(np.einsum("ij,ij->", G.T @ G, Y.T @ Y))
    return max(0.0, sq - 2.0 * float(cross) + gram)


def update_step(M, G, Y, eps: float = EPS):
    """One multiplicative update of ``G`` then ``Y``."""
    M = _as_matrix(M)
    G = np.asarray(G, dtype=np.float64)
    Y = np.asarray(Y, dtype=np.float64)
    if np.any(G < 0) or np.any(Y < 0):
        raise ValueError("factors must be nonnegative")
    if (M.data if sp.issparse(M) else M).min(initial=0.0) < 0:
        raise ValueError("M must be nonnegative")
    G = G * (M @ Y) / (G @ (Y.T @ Y) + eps)
    Y = Y * (M.T @ G) / (Y @ (G.T @ G) + eps)
    return np.asarray(G), np.asarray(Y)


def factorize(M, d: int, max_iter: int = 500, tol: float = 1e-5, seed: int = 0,
              gene_ids: Optional[Sequence[str]] = None) -> GeneEmbeddings:
    """Fit ``M ~= G Y^T`` from a seeded random start.

    Stops when the relative loss improvement drops below ``tol`` or after
    ``max_iter`` updates. Genes with an all-zero adjacency row get an
    all-zero embedding row.
    """
    if isinstance(M, AdjacencyMatrix):
        gene_ids = M.gene_ids
    A = _as_matrix(M)
    n = A.shape[0]
    if A.shape != (n, n):
        raise ValueError("adjacency must be square")
    if d < 1:
        raise ValueError("d must be at least 1")
    if d > n:
        raise ValueError(f"rank {d} exceeds the number of genes {n}")
    if max_iter < 1:
        raise ValueError("max_iter must be at least 1")
    if gene_ids is None:
        gene_ids = tuple(f"g{k}" for k in range(n))
    total = float(A.sum())
    rng = np.random.default_rng(seed)
    scale = np.sqrt(total / (n * n) / d)
    G = rng.uniform(0.0, 1.0, size=(n, d)) * scale
    Y = rng.uniform(0.0, 1.0, size=(n, d)) * scale
    loss = frobenius_loss(A, G, Y)
    history = [loss]
    it = 0
    while it < max_iter and loss > 0.0:
        G, Y = update_step(A, G, Y)
        it += 1
        new = frobenius_loss(A, G, Y)
        history.append(new)
        improvement = (loss - new) / loss
        loss = new
        if improvement < tol:
            break
    zero = np.asarray(abs(A).sum(axis=1)).ravel() == 0
    G[zero] = 0.0
    loss = frobenius_loss(A, G, Y)
    logger.debug("nmf: d=%d iterations=%d loss=%.6g", d, it, loss)
    return GeneEmbeddings(tuple(gene_ids), G, Y, loss, it, history)
