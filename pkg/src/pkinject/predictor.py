"""Prediction head with injected gene embeddings, and a mean-pool MLP encoder.

The head maps a sample embedding ``w`` (length ``d``) to gene predictions::

    raw = (1 - lam) * w @ A.T + lam * w @ G.T + b
    out = max(raw, 0)            # when clamp_output is set

``A`` and ``b`` are trained, ``G`` holds the frozen gene embeddings (zero
rows for genes outside the co-expression network). Gradients are analytic;
the loss throughout is the mean squared error over all batch entries.
"""
from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Optional

import numpy as np


@dataclass
class PkLinearHead:
    A: np.ndarray
    b: np.ndarray
    G: np.ndarray
    lam: float = 0.0
    clamp_output: bool = True
    train_G: bool = False

    def __post_init__(self):
        self.A = np.array(self.A, dtype=np.float64)
        self.b = np.array(self.b, dtype=np.float64).reshape(-1)
        self.G = np.array(self.G, dtype=np.float64)
        if self.A.ndim != 2 or self.A.shape != self.G.shape:
            raise ValueError(f"A {self.A.shape} and G {self.G.shape} must share one N_genes x d shape")
        if self.b.shape != (self.A.shape[0],):
            raise ValueError("b must have one entry per gene")
        if not 0.0 <= self.lam <= 1.0:
            raise ValueError(f"lambda must lie in [0, 1], got {self.lam}")

    @property
    def n_genes(self) -> int:
        return self.A.shape[0]

    @property
    def d(self) -> int:
        return self.A.shape[1]

    def params(self) -> dict:
        p = {"A": self.A, "b": self.b}
        if self.train_G:
            p["G"] = self.G
        return p

    def copy(self) -> "PkLinearHead":
        return replace(self, A=self.A.copy(), b=self.b.copy(), G=self.G.copy())


def init_head(n_genes: int, d: int, G: Optional[np.ndarray] = None, lam: float = 0.0,
              seed: int = 0, scale: Optional[float] = None, b: Optional[np.ndarray] = None,
              clamp_output: bool = True) -> PkLinearHead:
    """Head with small Gaussian ``A``; ``G`` defaults to all zeros (no PK)."""
    rng = np.random.default_rng(seed)
    scale = 1.0 / np.sqrt(d) if scale is None else scale
    A = rng.normal(0.0, scale, size=(n_genes, d))
    if G is None:
        G = np.zeros((n_genes, d))
    if b is None:
        b = np.zeros(n_genes)
    return PkLinearHead(A, b, G, lam, clamp_output)


def _raw(head: PkLinearHead, W: np.ndarray) -> np.ndarray:
    lam = head.lam
    return (1.0 - lam) * (W @ head.A.T) + lam * (W @ head.G.T) + head.b


def pk_forward(head: PkLinearHead, w, raw: bool = False) -> np.ndarray:
    """Predictions for one embedding (``d``) or a batch (``n x d``)."""
    w = np.asarray(w, dtype=np.float64)
    if w.shape[-1] != head.d or w.ndim > 2:
        raise ValueError(f"embedding dimension {w.shape[-1]} does not match head d={head.d}")
    out = _raw(head, w)
    if head.clamp_output and not raw:
        out = np.maximum(out, 0.0)
    return out


def pk_term(head: PkLinearHead, w) -> np.ndarray:
    """The injected contribution ``lam * w @ G.T`` on its own."""
    return head.lam * (np.asarray(w, dtype=np.float64) @ head.G.T)


def mse(pred: np.ndarray, target: np.ndarray) -> float:
    r = pred - target
    return float(np.mean(r * r))


def pk_grad(head: PkLinearHead, batch_w, batch_targets, return_input_grad: bool = False):
    """Loss and gradients of the batch MSE.

    Returns ``(loss, grads)`` where ``grads`` holds ``"A"``, ``"b"`` (and
    ``"G"`` when ``train_G``). With ``return_input_grad`` the gradient with
    respect to ``batch_w`` is returned as a third element.
    """
    W = np.asarray(batch_w, dtype=np.float64)
    Yt = np.asarray(batch_targets, dtype=np.float64)
    if W.ndim != 2 or W.shape[0] == 0:
        raise ValueError("batch_w must be a nonempty n x d matrix")
    if W.shape[1] != head.d:
        raise ValueError(f"embedding dimension {W.shape[1]} does not match head d={head.d}")
    if Yt.shape != (W.shape[0], head.n_genes):
        raise ValueError(f"targets shape {Yt.shape} != {(W.shape[0], head.n_genes)}")
    raw = _raw(head, W)
    pred = np.maximum(raw, 0.0) if head.clamp_output else raw
    resid = pred - Yt
    loss = float(np.mean(resid * resid))
    delta = (2.0 / resid.size) * resid
    if head.clamp_output:
        delta = delta * (raw > 0)
    grads = {"A": (1.0 - head.lam) * (delta.T @ W), "b": delta.sum(axis=0)}
    if head.train_G:
        grads["G"] = head.lam * (delta.T @ W)
    if return_input_grad:
        dW = delta @ ((1.0 - head.lam) * head.A + head.lam * head.G)
        return loss, grads, dW
    return loss, grads


@dataclass
class MlpEncoder:
    """Mean over patches, then ``relu(x W1 + b1) W2 + b2``."""

    W1: np.ndarray
    b1: np.ndarray
    W2: np.ndarray
    b2: np.ndarray

    @property
    def in_dim(self) -> int:
        return self.W1.shape[0]

    @property
    def hidden_dim(self) -> int:
        return self.W1.shape[1]

    @property
    def out_dim(self) -> int:
        return self.W2.shape[1]

    def params(self) -> dict:
        return {"W1": self.W1, "b1": self.b1, "W2": self.W2, "b2": self.b2}

    def copy(self) -> "MlpEncoder":
        return MlpEncoder(self.W1.copy(), self.b1.copy(), self.W2.copy(), self.b2.copy())


def init_encoder(in_dim: int, hidden_dim: int, out_dim: int, seed: int = 0) -> MlpEncoder:
    rng = np.random.default_rng(seed)
    W1 = rng.normal(0.0, np.sqrt(2.0 / in_dim), size=(in_dim, hidden_dim))
    W2 = rng.normal(0.0, np.sqrt(1.0 / hidden_dim), size=(hidden_dim, out_dim))
    return MlpEncoder(W1, np.zeros(hidden_dim), W2, np.zeros(out_dim))


def pool_patches(patches) -> np.ndarray:
    """Mean patch vector, independent of the row order bit for bit."""
    P = np.asarray(getattr(patches, "patches", patches), dtype=np.float64)
    if P.ndim != 2 or P.shape[0] == 0:
        raise ValueError("a patch set needs at least one patch")
    order = np.lexsort(P.T[::-1])
    return P[order].mean(axis=0)


def encode_pooled(enc: MlpEncoder, X: np.ndarray, cache: bool = False):
    X = np.asarray(X, dtype=np.float64)
    pre = X @ enc.W1 + enc.b1
    h = np.maximum(pre, 0.0)
    out = h @ enc.W2 + enc.b2
    if cache:
        return out, (X, pre, h)
    return out


def mlp_encode(enc: MlpEncoder, patches) -> np.ndarray:
    """Sample embedding ``w`` for one patch set."""
    x = pool_patches(patches)
    if x.shape[0] != enc.in_dim:
        raise ValueError(f"patch dimension {x.shape[0]} does not match encoder input {enc.in_dim}")
    return encode_pooled(enc, x)


def encoder_grad(enc: MlpEncoder, cache, dW: np.ndarray) -> dict:
    """Backpropagate ``dL/dw`` through the encoder."""
    X, pre, h = cache
    dh = (dW @ enc.W2.T) * (pre > 0)
    return {"W1": X.T @ dh, "b1": dh.sum(axis=0), "W2": h.T @ dW, "b2": dW.sum(axis=0)}
