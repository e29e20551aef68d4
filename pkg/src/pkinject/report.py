"""Delimited reports, model files and figures."""
from __future__ import annotations

import hashlib
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import dataio
from .predictor import MlpEncoder, PkLinearHead
from .train_eval import EvalReport

MODEL_FILES = ("A", "b", "G")
ENCODER_FILES = ("W1", "b1", "W2", "b2")


def _num(v: float) -> str:
    return repr(float(v))


def gene_hash(gene_ids: Sequence[str]) -> str:
    return hashlib.sha256("\n".join(gene_ids).encode("utf-8")).hexdigest()


def write_eval_report(report: EvalReport, gene_ids: Sequence[str], path):
    """One row per gene, then a ``# summary`` line."""
    lines = ["gene_id\tr\tp\tq\tsignificant\tbaseline_r\tdegenerate"]
    for k, g in enumerate(gene_ids):
        lines.append("\t".join([g, _num(report.per_gene_r[k]), _num(report.per_gene_p[k]),
                                _num(report.per_gene_q[k]), str(int(report.significant[k])),
                                _num(report.baseline_r[k]), str(int(report.degenerate_flags[k]))]))
    lines.append(f"# summary\tn_significant={report.n_significant}\tn_genes={len(gene_ids)}"
                 f"\tlambda={report.lambda_used!r}\talpha={report.alpha!r}")
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_eval_report(path) -> tuple[list[str], EvalReport]:
    genes, rows, summary = [], [], {}
    for line in Path(path).read_text(encoding="utf-8").splitlines()[1:]:
        if line.startswith("# summary"):
            summary = dict(x.split("=", 1) for x in line.split("\t")[1:])
            continue
        parts = line.split("\t")
        genes.append(parts[0])
        rows.append([float(x) for x in parts[1:]])
    a = np.array(rows).reshape(-1, 6)
    rep = EvalReport(a[:, 0], a[:, 1], a[:, 2], a[:, 3].astype(bool), a[:, 4],
                     a[:, 5].astype(bool), float(summary.get("lambda", 0.0)),
                     float(summary.get("alpha", 0.05)))
    return genes, rep


def write_history(history, path):
    lines = ["epoch\ttrain_mse\tval_pearson"]
    lines += [f"{e}\t{_num(m)}\t{_num(v)}" for e, m, v in history]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def write_table(path, header: Sequence[str], rows):
    out = ["\t".join(header)] + ["\t".join(str(x) for x in row) for row in rows]
    Path(path).write_text("\n".join(out) + "\n", encoding="utf-8")


def read_table(path) -> list[dict]:
    lines = [x for x in Path(path).read_text(encoding="utf-8").splitlines() if x and not x.startswith("#")]
    header = lines[0].split("\t")
    return [dict(zip(header, x.split("\t"))) for x in lines[1:]]


def save_model(path, head: PkLinearHead, gene_ids: Sequence[str],
               encoder: Optional[MlpEncoder] = None):
    """Model directory: ``A``, ``b``, ``G`` (and encoder) as PKMX plus ``meta.txt``."""
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    if len(gene_ids) != head.n_genes:
        raise ValueError("one gene id per head row is required")
    dataio.save_labeled_matrix(path / "A.pkmx", gene_ids, head.A)
    dataio.write_pkmx(path / "b.pkmx", head.b)
    dataio.save_labeled_matrix(path / "G.pkmx", gene_ids, head.G)
    meta = [f"lambda = {head.lam!r}", f"d = {head.d}", f"n_genes = {head.n_genes}",
            f"clamp_output = {head.clamp_output}", f"train_G = {head.train_G}",
            f"gene_hash = {gene_hash(gene_ids)}", f"encoder = {encoder is not None}"]
    if encoder is not None:
        for name in ENCODER_FILES:
            dataio.write_pkmx(path / f"encoder_{name}.pkmx", getattr(encoder, name))
    (path / "meta.txt").write_text("\n".join(meta) + "\n", encoding="utf-8")


def load_model(path):
    import configparser
    path = Path(path)
    cp = configparser.ConfigParser(interpolation=None)
    cp.read_string("[model]\n" + (path / "meta.txt").read_text(encoding="utf-8"))
    meta = cp["model"]
    genes, A = dataio.load_labeled_matrix(path / "A.pkmx")
    _, G = dataio.load_labeled_matrix(path / "G.pkmx")
    b = dataio.read_pkmx(path / "b.pkmx").reshape(-1)
    if meta["gene_hash"] != gene_hash(genes):
        raise dataio.FormatError(f"{path}: gene list does not match its recorded hash")
    head = PkLinearHead(A, b, G, float(meta["lambda"]), meta.getboolean("clamp_output"),
                        meta.getboolean("train_G"))
    if head.d != int(meta["d"]) or head.n_genes != int(meta["n_genes"]):
        raise dataio.FormatError(f"{path}: matrix shapes disagree with meta.txt")
    encoder = None
    if meta.getboolean("encoder"):
        W1, b1, W2, b2 = (dataio.read_pkmx(path / f"encoder_{n}.pkmx") for n in ENCODER_FILES)
        encoder = MlpEncoder(W1, b1.reshape(-1), W2, b2.reshape(-1))
    return genes, head, encoder


# -- figures ------------------------------------------------------------------

def _pyplot():
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt
    plt.rcParams.update({"figure.dpi": 100, "savefig.dpi": 120, "font.size": 9,
                         "axes.spines.top": False, "axes.spines.right": False,
                         "svg.hashsalt": "pkinject"})
    return plt


def plot_lambda_curves(path, curves: dict, no_pk: float, title: str = ""):
    """Significant genes against lambda, one line per PK source."""
    plt = _pyplot()
    fig, ax = plt.subplots(figsize=(4.5, 3.2))
    for source, pts in curves.items():
        lams = sorted(pts)
        ax.plot(lams, [pts[x] for x in lams], marker="o", label=source)
    ax.axhline(no_pk, color="0.4", ls="--", lw=1, label="no PK")
    ax.set_xlabel("lambda")
    ax.set_ylabel("significant genes (mean over folds)")
    if title:
        ax.set_title(title)
    ax.legend(frameon=False, fontsize=8)
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)


def plot_r_scatter(path, r_base: np.ndarray, r_pk: np.ndarray, label: str):
    plt = _pyplot()
    fig, ax = plt.subplots(figsize=(3.6, 3.6))
    ax.scatter(r_base, r_pk, s=4, alpha=0.6, lw=0)
    lo = float(min(r_base.min(), r_pk.min(), 0.0))
    ax.plot([lo, 1], [lo, 1], color="0.4", lw=1)
    ax.set_xlabel("per-gene r, no PK")
    ax.set_ylabel(f"per-gene r, {label}")
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)


def plot_history(path, histories: dict):
    plt = _pyplot()
    fig, (a1, a2) = plt.subplots(1, 2, figsize=(7, 3))
    for label, hist in histories.items():
        h = np.array(hist)
        a1.plot(h[:, 0], h[:, 1], label=label)
        a2.plot(h[:, 0], h[:, 2], label=label)
    a1.set_xlabel("epoch")
    a1.set_ylabel("train MSE")
    a2.set_xlabel("epoch")
    a2.set_ylabel("val mean Pearson")
    a2.legend(frameon=False, fontsize=7)
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)


def plot_graph_stats(path, stats: dict):
    """Bar chart of genes in network and co-expressed pairs per source."""
    plt = _pyplot()
    names = list(stats)
    fig, (a1, a2) = plt.subplots(1, 2, figsize=(6, 2.8))
    a1.bar(names, [stats[n][0] for n in names], color="tab:blue")
    a1.set_ylabel("genes in network")
    a2.bar(names, [stats[n][1] for n in names], color="tab:orange")
    a2.set_ylabel("co-expressed pairs")
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)
