"""Neighborhood preservation between a co-expression graph and its embedding.

For every gene in the network the top-k neighbors are ranked in the
adjacency space (cosine similarity of adjacency rows) and in the embedding
space (Euclidean distance), and the overlap of both sets is averaged.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np
import scipy.sparse as sp

from .nmf import AdjacencyMatrix, GeneEmbeddings

# relative tolerance under which two embedding-space scores count as tied
DEFAULT_TIE_TOL = 1e-6


@dataclass(frozen=True)
class NeighborhoodReport:
    k: int
    per_gene_overlap: dict
    np_score: float
    genes_evaluated: int


def _dense_rows(M) -> np.ndarray:
    if isinstance(M, AdjacencyMatrix):
        M = M.matrix
    if sp.issparse(M):
        return M.toarray()
    return np.asarray(M, dtype=np.float64)


def _embedding_rows(G) -> np.ndarray:
    if isinstance(G, GeneEmbeddings):
        return np.asarray(G.G, dtype=np.float64)
    return np.asarray(G, dtype=np.float64)


def _top_k(score: np.ndarray, candidates: np.ndarray, i: int, k: int) -> np.ndarray:
    """Indices of the k largest scores among ``candidates`` (not ``i``).

    Ties go to the lower index.
    """
    cand = candidates.copy()
    cand[i] = False
    idx = np.flatnonzero(cand)
    if k < 1:
        raise ValueError("k must be at least 1")
    if k > len(idx):
        raise ValueError(f"k={k} exceeds the {len(idx)} available neighbors")
    order = np.lexsort((idx, -score[idx]))
    return np.sort(idx[order[:k]])


def _quantize(dist: np.ndarray, tie_tol: float) -> np.ndarray:
    if tie_tol <= 0:
        return dist
    scale = float(np.max(dist)) if dist.size else 0.0
    if scale == 0.0:
        return dist
    return np.round(dist / (scale * tie_tol))


def _cosine_scores(X: np.ndarray, i: int) -> np.ndarray:
    norms = np.sqrt(np.einsum("ij,ij->i", X, X))
    dots = X @ X[i]
    with np.errstate(divide="ignore", invalid="ignore"):
        s = dots / (norms * norms[i])
    s[norms == 0] = -np.inf
    return s


def _euclid_scores(X: np.ndarray, i: int) -> np.ndarray:
    diff = X - X[i]
    return -np.einsum("ij,ij->i", diff, diff)


def _scores(X, i, metric, tie_tol=0.0):
    if metric == "cosine":
        s = _cosine_scores(X, i)
        if tie_tol > 0:
            finite = np.isfinite(s)
            s[finite] = -_quantize(1.0 - s[finite], tie_tol)
        return s
    if metric == "euclidean":
        return -_quantize(-_euclid_scores(X, i), tie_tol)
    raise ValueError(f"unknown metric {metric!r}")


def hd_neighbors(M, i: int, k: int, metric: str = "cosine") -> set:
    """Top-k network neighbors of gene ``i`` by adjacency-row similarity."""
    X = _dense_rows(M)
    evaluable = np.any(X != 0, axis=1)
    if not evaluable[i]:
        raise ValueError(f"gene {i} has no edges and cannot be evaluated")
    return set(_top_k(_scores(X, i, metric), evaluable, i, k).tolist())


def ld_neighbors(G, i: int, k: int, metric: str = "euclidean",
                 candidates: Optional[np.ndarray] = None,
                 tie_tol: float = DEFAULT_TIE_TOL) -> set:
    """Top-k neighbors of gene ``i`` in embedding space.

    By default only genes with a nonzero embedding row are candidates.
    Scores within ``tie_tol`` (relative to the largest distance from ``i``)
    are tied and resolved by index.
    """
    X = _embedding_rows(G)
    nonzero = np.any(X != 0, axis=1)
    if not nonzero[i]:
        raise ValueError(f"gene {i} has a zero embedding row")
    cand = nonzero if candidates is None else np.asarray(candidates, dtype=bool)
    return set(_top_k(_scores(X, i, metric, tie_tol), cand, i, k).tolist())


def np_score(M, G, k: int = 100, hd_metric: str = "cosine", ld_metric: str = "euclidean",
             tie_tol: float = DEFAULT_TIE_TOL, gene_ids=None) -> NeighborhoodReport:
    """Mean top-k neighbor overlap over genes with at least one edge.

    Both rankings are restricted to those genes.
    """
    A = _dense_rows(M)
    X = _embedding_rows(G)
    if A.shape[0] != X.shape[0]:
        raise ValueError("adjacency and embeddings cover different gene counts")
    if gene_ids is None:
        gene_ids = M.gene_ids if isinstance(M, AdjacencyMatrix) else tuple(range(A.shape[0]))
    evaluable = np.any(A != 0, axis=1)
    n_eval = int(evaluable.sum())
    if n_eval < k + 1:
        raise ValueError(f"{n_eval} genes in the network, need at least k+1={k + 1}")
    overlap = {}
    for i in np.flatnonzero(evaluable):
        hd = _top_k(_scores(A, i, hd_metric), evaluable, i, k)
        ld = _top_k(_scores(X, i, ld_metric, tie_tol), evaluable, i, k)
        overlap[gene_ids[i]] = len(np.intersect1d(hd, ld, assume_unique=True)) / k
    score = float(np.mean(list(overlap.values())))
    return NeighborhoodReport(k, overlap, score, n_eval)
