"""Synthetic expression data with a known co-expression structure.

Each patient draws a latent vector ``z``. Module genes follow one shared
latent direction per module, background genes follow private noise, and
the sample embedding is a noisy linear image of ``z``. The module structure
is therefore the ground-truth co-expression graph, and the embedding carries
exactly the information needed to predict module genes.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, fields
from itertools import combinations
from typing import Optional

import numpy as np

from .coexpr import CoexpressionGraph
from .dataio import EmbeddingTable, ExpressionMatrix, PatchSet


@dataclass(frozen=True)
class SynthConfig:
    n_patients: int = 200
    samples_per_patient: int = 1
    n_genes: int = 500
    n_modules: int = 10
    genes_per_module: int = 20
    latent_dim: Optional[int] = None        # defaults to n_modules
    embed_dim: int = 32
    expression_noise: float = 0.5
    embedding_noise: float = 1.0
    patches_per_sample: int = 16
    patch_noise: float = 1.0
    loading_jitter: float = 0.1
    base_level: float = 5.0
    seed: int = 0

    @property
    def m(self) -> int:
        return self.n_modules if self.latent_dim is None else self.latent_dim

    def validate(self):
        ints = ("n_patients", "samples_per_patient", "n_genes", "genes_per_module",
                "embed_dim", "patches_per_sample")
        for name in ints:
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if self.n_modules < 0:
            raise ValueError("n_modules must be nonnegative")
        if self.n_modules * self.genes_per_module > self.n_genes:
            raise ValueError("modules need more genes than n_genes")
        if self.m < 1 or self.m > self.embed_dim:
            raise ValueError("latent_dim must lie in [1, embed_dim]")
        for name in ("expression_noise", "embedding_noise", "patch_noise", "loading_jitter"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be nonnegative")
        return self

    @classmethod
    def from_dict(cls, d: dict) -> "SynthConfig":
        known = {f.name: f.type for f in fields(cls)}
        kw = {}
        for k, v in d.items():
            if k not in known:
                raise ValueError(f"unknown synth setting {k!r}")
            if k == "latent_dim":
                kw[k] = None if v in (None, "", "none", "None") else int(v)
            elif known[k] == "float":
                kw[k] = float(v)
            else:
                kw[k] = int(v)
        return cls(**kw)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class SynthDataset:
    expression: ExpressionMatrix
    embeddings: EmbeddingTable
    patches: tuple
    latent: np.ndarray          # per sample, n_samples x m
    module_of: np.ndarray       # module index per gene, -1 for background


def gene_names(cfg: SynthConfig) -> list[str]:
    width = max(4, len(str(cfg.n_genes - 1)))
    return [f"G{k:0{width}d}" for k in range(cfg.n_genes)]


def module_assignment(cfg: SynthConfig) -> np.ndarray:
    module_of = np.full(cfg.n_genes, -1, dtype=np.int64)
    for k in range(cfg.n_modules):
        module_of[k * cfg.genes_per_module:(k + 1) * cfg.genes_per_module] = k
    return module_of


def _module_directions(cfg: SynthConfig, rng) -> np.ndarray:
    m = cfg.m
    raw = rng.normal(size=(m, max(cfg.n_modules, 1)))
    if cfg.n_modules <= m:
        q, _ = np.linalg.qr(raw)
        return q[:, :cfg.n_modules].T
    return (raw / np.linalg.norm(raw, axis=0)).T


def generate_dataset(cfg: SynthConfig) -> SynthDataset:
    cfg.validate()
    root = np.random.SeedSequence(cfg.seed)
    struct_ss, *patient_ss = root.spawn(1 + cfg.n_patients)
    rng = np.random.default_rng(struct_ss)

    m, d = cfg.m, cfg.embed_dim
    module_of = module_assignment(cfg)
    directions = _module_directions(cfg, rng)
    loadings = np.zeros((cfg.n_genes, m))
    for g in np.flatnonzero(module_of >= 0):
        v = directions[module_of[g]] + cfg.loading_jitter * rng.normal(size=m) / np.sqrt(m)
        loadings[g] = v / np.linalg.norm(v)
    gene_scale = rng.uniform(0.5, 1.5, size=cfg.n_genes)
    base = cfg.base_level * rng.uniform(0.8, 1.2, size=cfg.n_genes)
    background = module_of < 0
    Q = rng.normal(size=(d, m)) / np.sqrt(m)
    while np.linalg.matrix_rank(Q) < m:
        Q = rng.normal(size=(d, m)) / np.sqrt(m)

    genes = gene_names(cfg)
    sample_ids, patient_ids, expr_rows, emb_rows, patch_sets, latent = [], [], [], [], [], []
    width = max(3, len(str(cfg.n_patients - 1)))
    for p, ss in enumerate(patient_ss):
        prng = np.random.default_rng(ss)
        pid = f"P{p:0{width}d}"
        z = prng.normal(size=m)
        for s in range(cfg.samples_per_patient):
            sid = f"{pid}_S{s}"
            signal = loadings @ z
            signal[background] = prng.normal(size=int(background.sum()))
            x = base + gene_scale * signal + cfg.expression_noise * prng.normal(size=cfg.n_genes)
            w = Q @ z + cfg.embedding_noise * prng.normal(size=d)
            patches = w + cfg.patch_noise * prng.normal(size=(cfg.patches_per_sample, d))
            sample_ids.append(sid)
            patient_ids.append(pid)
            expr_rows.append(np.maximum(x, 0.0))
            emb_rows.append(w)
            patch_sets.append(PatchSet(sid, patches))
            latent.append(z)
    expr = ExpressionMatrix(sample_ids, patient_ids, genes, np.array(expr_rows))
    emb = EmbeddingTable(sample_ids, np.array(emb_rows))
    return SynthDataset(expr, emb, tuple(patch_sets), np.array(latent), module_of)


def true_graph(cfg: SynthConfig) -> CoexpressionGraph:
    """Complete graph on every module; background genes isolated."""
    cfg.validate()
    genes = gene_names(cfg)
    module_of = module_assignment(cfg)
    pairs = []
    for k in range(cfg.n_modules):
        members = [genes[g] for g in np.flatnonzero(module_of == k)]
        pairs.extend(combinations(members, 2))
    return CoexpressionGraph.from_named_edges(pairs, gene_ids=genes)


def graph_recovery_metrics(predicted: CoexpressionGraph, truth: CoexpressionGraph):
    """Edge-set ``(precision, recall, f1)``; empty sets score 0."""
    pe, te = predicted.edge_set(), truth.edge_set()
    hit = len(pe & te)
    precision = hit / len(pe) if pe else 0.0
    recall = hit / len(te) if te else 0.0
    f1 = 2 * precision * recall / (precision + recall) if precision + recall > 0 else 0.0
    return precision, recall, f1
