"""Training, lambda sweeps and per-gene significance.

A gene counts as significantly well predicted when its test-set Pearson
correlation ``r`` satisfies all of

* Benjamini-Hochberg adjusted p-value below ``alpha``,
* ``r > 0``,
* ``r`` above the correlation reached by an untrained, randomly
  initialised model on the same test inputs.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
from scipy import stats

from .predictor import (MlpEncoder, PkLinearHead, encode_pooled, encoder_grad, init_encoder,
                        init_head, pk_forward, pk_grad)

logger = logging.getLogger(__name__)

LAMBDA_GRID = (0.1, 0.2, 0.5, 0.8, 0.9)


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-3
    optimizer: str = "adam"
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    batch_size: int = 32
    max_epochs: int = 200
    patience: int = 20
    seed: int = 0

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if self.optimizer not in ("adam", "sgd"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")
        if self.batch_size < 1 or self.max_epochs < 1:
            raise ValueError("batch_size and max_epochs must be positive")
        if not 0 <= self.patience < self.max_epochs:
            raise ValueError("patience must be smaller than max_epochs")


@dataclass(frozen=True)
class FoldData:
    """Inputs (embeddings or pooled patches) and targets per split."""

    x_train: np.ndarray
    y_train: np.ndarray
    x_val: np.ndarray
    y_val: np.ndarray
    x_test: np.ndarray
    y_test: np.ndarray
    gene_ids: tuple = ()

    def __post_init__(self):
        for split in ("train", "val", "test"):
            x, y = getattr(self, f"x_{split}"), getattr(self, f"y_{split}")
            if len(x) == 0:
                raise ValueError(f"empty {split} split")
            if len(x) != len(y):
                raise ValueError(f"{split}: {len(x)} inputs for {len(y)} targets")

    @classmethod
    def from_indices(cls, x: np.ndarray, y: np.ndarray, splits: dict, gene_ids=()) -> "FoldData":
        return cls(x[splits["train"]], y[splits["train"]], x[splits["val"]], y[splits["val"]],
                   x[splits["test"]], y[splits["test"]], tuple(gene_ids))

    @property
    def n_genes(self) -> int:
        return self.y_train.shape[1]


@dataclass
class EvalReport:
    per_gene_r: np.ndarray
    per_gene_p: np.ndarray
    per_gene_q: np.ndarray
    significant: np.ndarray
    baseline_r: np.ndarray
    degenerate_flags: np.ndarray
    lambda_used: float = 0.0
    alpha: float = 0.05

    @property
    def n_significant(self) -> int:
        return int(np.count_nonzero(self.significant))


@dataclass
class TrainResult:
    head: PkLinearHead
    encoder: Optional[MlpEncoder]
    history: list = field(default_factory=list)   # (epoch, train_mse, val_pearson)
    best_epoch: int = 0
    stopped_early: bool = False


# -- statistics ---------------------------------------------------------------

def per_gene_pearson(pred, truth):
    """Column-wise Pearson ``r``, two-sided p-values and degenerate flags."""
    P = np.asarray(pred, dtype=np.float64)
    T = np.asarray(truth, dtype=np.float64)
    if P.ndim == 1:
        P, T = P[:, None], T[:, None]
    if P.shape != T.shape:
        raise ValueError(f"shape mismatch {P.shape} vs {T.shape}")
    n = P.shape[0]
    if n < 3:
        raise ValueError("need at least three samples")
    degenerate = np.all(P == P[:1], axis=0) | np.all(T == T[:1], axis=0)
    Pc = P - P.mean(axis=0)
    Tc = T - T.mean(axis=0)
    num = np.einsum("ij,ij->j", Pc, Tc)
    den = np.sqrt(np.einsum("ij,ij->j", Pc, Pc)) * np.sqrt(np.einsum("ij,ij->j", Tc, Tc))
    r = np.zeros(P.shape[1])
    ok = ~degenerate
    r[ok] = np.clip(num[ok] / den[ok], -1.0, 1.0)
    dof = n - 2
    p = np.ones(P.shape[1])
    with np.errstate(divide="ignore"):
        t = np.abs(r[ok]) * np.sqrt(dof / np.maximum(1.0 - r[ok] ** 2, 0.0))
    p[ok] = 2.0 * stats.t.sf(t, dof)
    return r, p, degenerate


def bh_adjust(p) -> np.ndarray:
    """Benjamini-Hochberg adjusted p-values."""
    p = np.asarray(p, dtype=np.float64)
    if p.ndim != 1:
        raise ValueError("p must be a vector")
    if p.size == 0:
        return p.copy()
    if np.any(~(p >= 0) | ~(p <= 1)):
        raise ValueError("p-values must lie in [0, 1]")
    m = p.size
    order = np.argsort(p, kind="stable")
    ranked = m * p[order] / np.arange(1, m + 1)
    q_sorted = np.minimum.accumulate(ranked[::-1])[::-1]
    q = np.empty(m)
    q[order] = np.minimum(q_sorted, 1.0)
    return q


def significant_genes(r, p, baseline_r, alpha: float = 0.05, degenerate=None,
                      lambda_used: float = 0.0) -> EvalReport:
    r = np.asarray(r, dtype=np.float64)
    p = np.asarray(p, dtype=np.float64)
    baseline_r = np.asarray(baseline_r, dtype=np.float64)
    if not (r.shape == p.shape == baseline_r.shape):
        raise ValueError("inputs differ in length")
    if degenerate is None:
        degenerate = np.zeros(r.shape, dtype=bool)
    q = bh_adjust(p)
    sig = (q < alpha) & (r > 0) & (r > baseline_r)
    return EvalReport(r, p, q, sig, baseline_r, np.asarray(degenerate, dtype=bool),
                      lambda_used, alpha)


def mean_pearson(pred, truth) -> float:
    """Unweighted mean Pearson over non-degenerate genes (0 if none)."""
    r, _, deg = per_gene_pearson(pred, truth)
    ok = ~deg
    return float(r[ok].mean()) if ok.any() else 0.0


# -- models -------------------------------------------------------------------

def predict(head: PkLinearHead, x, encoder: Optional[MlpEncoder] = None) -> np.ndarray:
    w = encode_pooled(encoder, x) if encoder is not None else np.asarray(x, dtype=np.float64)
    return pk_forward(head, w)


def build_models(data: FoldData, d: int, G: Optional[np.ndarray], lam: float, seed: int,
                 hidden_dim: Optional[int] = None, clamp_output: bool = True):
    """Fresh head (and encoder when ``hidden_dim`` is set) for one run.

    ``b`` starts at the training mean of each gene.
    """
    encoder = None
    if hidden_dim:
        encoder = init_encoder(data.x_train.shape[1], hidden_dim, d, seed=seed + 1)
    head = init_head(data.n_genes, d, G=G, lam=lam, seed=seed,
                     b=data.y_train.mean(axis=0), clamp_output=clamp_output)
    return head, encoder


def random_baseline(data: FoldData, d: int, G: Optional[np.ndarray] = None, lam: float = 0.0,
                    seed: int = 0, hidden_dim: Optional[int] = None,
                    clamp_output: bool = True) -> np.ndarray:
    """Test-set predictions of an untrained, randomly initialised model."""
    rng = np.random.default_rng([seed, 7919])
    encoder = None
    if hidden_dim:
        encoder = init_encoder(data.x_test.shape[1], hidden_dim, d, seed=int(rng.integers(2**31)))
    head = init_head(data.n_genes, d, G=G, lam=lam, seed=int(rng.integers(2**31)),
                     b=rng.normal(size=data.n_genes), clamp_output=clamp_output)
    return predict(head, data.x_test, encoder)


class _Optimizer:
    def __init__(self, cfg: TrainConfig):
        self.cfg = cfg
        self.m, self.v, self.t = {}, {}, 0

    def step(self, params: dict, grads: dict):
        cfg = self.cfg
        self.t += 1
        for key, g in grads.items():
            p = params[key]
            if cfg.optimizer == "sgd":
                p -= cfg.learning_rate * g
                continue
            m = self.m.setdefault(key, np.zeros_like(g))
            v = self.v.setdefault(key, np.zeros_like(g))
            m *= cfg.beta1
            m += (1 - cfg.beta1) * g
            v *= cfg.beta2
            v += (1 - cfg.beta2) * g * g
            mhat = m / (1 - cfg.beta1 ** self.t)
            vhat = v / (1 - cfg.beta2 ** self.t)
            p -= cfg.learning_rate * mhat / (np.sqrt(vhat) + cfg.eps)


def train_model(head: PkLinearHead, data: FoldData, cfg: TrainConfig,
                encoder: Optional[MlpEncoder] = None) -> TrainResult:
    """Minimise batch MSE with early stopping on validation mean Pearson.

    The returned models are the snapshot from the best validation epoch.
    Inputs are left untouched; training works on copies.
    """
    head = head.copy()
    encoder = encoder.copy() if encoder is not None else None
    rng = np.random.default_rng(cfg.seed)
    opt = _Optimizer(cfg)
    params = {f"head.{k}": v for k, v in head.params().items()}
    if encoder is not None:
        params.update({f"enc.{k}": v for k, v in encoder.params().items()})

    X, Yt = data.x_train, data.y_train
    n = len(X)
    best_val, best_epoch, wait = -np.inf, 0, 0
    snapshot = (head.copy(), encoder.copy() if encoder else None)
    history = []
    stopped = False
    for epoch in range(1, cfg.max_epochs + 1):
        order = rng.permutation(n)
        total = 0.0
        for start in range(0, n, cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            xb, yb = X[idx], Yt[idx]
            if encoder is not None:
                w, cache = encode_pooled(encoder, xb, cache=True)
                loss, g, dw = pk_grad(head, w, yb, return_input_grad=True)
                grads = {f"head.{k}": v for k, v in g.items()}
                grads.update({f"enc.{k}": v for k, v in encoder_grad(encoder, cache, dw).items()})
            else:
                loss, g = pk_grad(head, xb, yb)
                grads = {f"head.{k}": v for k, v in g.items()}
            if not np.isfinite(loss):
                raise FloatingPointError(f"non-finite training loss at epoch {epoch}, "
                                         f"batch starting at {start} (lr={cfg.learning_rate})")
            total += loss * len(idx)
            opt.step(params, grads)
        val = mean_pearson(predict(head, data.x_val, encoder), data.y_val)
        history.append((epoch, total / n, val))
        if val > best_val:
            best_val, best_epoch, wait = val, epoch, 0
            snapshot = (head.copy(), encoder.copy() if encoder else None)
        else:
            wait += 1
            if wait >= cfg.patience:
                stopped = True
                break
    head, encoder = snapshot
    return TrainResult(head, encoder, history, best_epoch, stopped)


def evaluate(head: PkLinearHead, data: FoldData, baseline_pred: np.ndarray,
             encoder: Optional[MlpEncoder] = None, alpha: float = 0.05) -> EvalReport:
    pred = predict(head, data.x_test, encoder)
    r, p, deg = per_gene_pearson(pred, data.y_test)
    base_r, _, _ = per_gene_pearson(baseline_pred, data.y_test)
    return significant_genes(r, p, base_r, alpha, deg, lambda_used=head.lam)


@dataclass
class SweepResult:
    reports: dict            # lambda -> EvalReport on the test split
    val_scores: dict         # lambda -> best validation mean Pearson
    results: dict            # lambda -> TrainResult
    selected_lambda: float

    def counts(self) -> dict:
        return {lam: rep.n_significant for lam, rep in self.reports.items()}


def select_lambda(scores: dict, grid: Sequence[float]) -> float:
    """Highest score within ``grid``; ties go to the smaller lambda."""
    return min(grid, key=lambda lam: (-scores[lam], lam))


def lambda_sweep(data: FoldData, G: Optional[np.ndarray], grid: Sequence[float] = LAMBDA_GRID,
                 cfg: TrainConfig = TrainConfig(), d: Optional[int] = None,
                 hidden_dim: Optional[int] = None, alpha: float = 0.05,
                 include_zero: bool = True, select_on: str = "test",
                 clamp_output: bool = True) -> SweepResult:
    """Train one model per lambda and pick the best by significant-gene count.

    ``lambda = 0`` (no prior knowledge) is always trained as the reference
    unless ``include_zero`` is false; selection only considers ``grid``.
    Every run shares the initial weights so lambdas are compared paired.
    ``select_on="val"`` ranks by validation mean Pearson instead.
    """
    grid = [float(x) for x in grid]
    if not grid:
        raise ValueError("empty lambda grid")
    if any(not 0.0 <= x <= 1.0 for x in grid):
        raise ValueError("lambdas must lie in [0, 1]")
    if select_on not in ("test", "val"):
        raise ValueError("select_on must be 'test' or 'val'")
    if d is None:
        d = data.x_train.shape[1] if not hidden_dim else G.shape[1]
    lambdas = sorted(set(grid) | ({0.0} if include_zero else set()))
    reports, vals, results = {}, {}, {}
    for lam in lambdas:
        G_used = G if G is not None and lam > 0 else None
        head, enc = build_models(data, d, G_used, lam, cfg.seed, hidden_dim, clamp_output)
        res = train_model(head, data, cfg, enc)
        base = random_baseline(data, d, G_used, lam, cfg.seed, hidden_dim, clamp_output)
        reports[lam] = evaluate(res.head, data, base, res.encoder, alpha)
        vals[lam] = max(h[2] for h in res.history)
        results[lam] = res
        logger.info("lambda=%.2f n_significant=%d best_epoch=%d", lam,
                    reports[lam].n_significant, res.best_epoch)
    scores = {lam: reports[lam].n_significant for lam in lambdas} if select_on == "test" else vals
    return SweepResult(reports, vals, results, select_lambda(scores, grid))
