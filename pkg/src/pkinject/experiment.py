"""End-to-end experiment: graphs, embeddings, lambda sweeps, summary table.

Config files are plain ``key = value`` text (``#`` comments)::

    expression = data/expression.tsv
    patches = data/patches.pkmx          # and/or: embeddings = ...
    external_graph = data/true_graph.tsv # optional
    output_dir = runs/exp1
    sources = external,internal,combined
    tau = 0.85
    lambda_grid = 0.1,0.2,0.5,0.8,0.9
    seed = 0

Every other key of :class:`ExperimentConfig` may be set the same way.
"""
from __future__ import annotations

import configparser
import contextlib
import json
import logging
import shutil
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Optional

import numpy as np

from . import __version__, dataio, report
from .coexpr import build_graph, graph_stats, union_graphs
from .embedqc import np_score
from .nmf import adjacency_from_graph, factorize
from .predictor import pool_patches
from .train_eval import FoldData, TrainConfig, lambda_sweep, select_lambda

logger = logging.getLogger(__name__)

SOURCES = ("external", "internal", "combined")


class PipelineError(RuntimeError):
    """A pipeline stage failed; the message starts with ``[stage]``."""


@contextlib.contextmanager
def stage(name: str):
    try:
        yield
    except PipelineError:
        raise
    except Exception as exc:
        raise PipelineError(f"[{name}] {type(exc).__name__}: {exc}") from exc


@dataclass
class ExperimentConfig:
    expression: str = ""
    output_dir: str = ""
    embeddings: str = ""
    patches: str = ""
    external_graph: str = ""
    folds: str = ""
    sources: tuple = ()
    models: tuple = ()
    tau: float = 0.85
    absolute: bool = False
    block: int = 1024
    nmf_max_iter: int = 500
    nmf_tol: float = 1e-5
    lambda_grid: tuple = (0.1, 0.2, 0.5, 0.8, 0.9)
    n_folds: int = 5
    fold_ratios: tuple = (0.72, 0.08, 0.20)
    learning_rate: float = 1e-3
    optimizer: str = "adam"
    batch_size: int = 32
    max_epochs: int = 200
    patience: int = 20
    hidden_dim: int = 64
    encoder_dim: int = 0
    alpha: float = 0.05
    select_on: str = "test"
    np_k: int = 100
    clamp_output: bool = True
    figures: bool = True
    seed: int = 0
    threads: int = 1

    @classmethod
    def from_file(cls, path, **overrides) -> "ExperimentConfig":
        cp = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#",))
        cp.optionxform = str
        cp.read_string("[experiment]\n" + Path(path).read_text(encoding="utf-8"))
        raw = dict(cp["experiment"])
        raw.update({k: v for k, v in overrides.items() if v is not None})
        return cls.from_dict(raw, base=Path(path).parent)

    @classmethod
    def from_dict(cls, raw: dict, base: Optional[Path] = None) -> "ExperimentConfig":
        types = {f.name: f.type for f in fields(cls)}
        kw = {}
        for key, val in raw.items():
            if key not in types:
                raise ValueError(f"unknown config key {key!r}")
            t = types[key]
            if not isinstance(val, str):
                kw[key] = val
            elif t == "bool":
                kw[key] = val.strip().lower() in ("1", "true", "yes", "on")
            elif t == "int":
                kw[key] = int(val)
            elif t == "float":
                kw[key] = float(val)
            elif t == "tuple":
                items = [x.strip() for x in val.split(",") if x.strip()]
                kw[key] = tuple(float(x) for x in items) if key in ("lambda_grid", "fold_ratios") else tuple(items)
            else:
                kw[key] = val.strip()
        cfg = cls(**kw)
        if base is not None:
            for key in ("expression", "embeddings", "patches", "external_graph", "folds", "output_dir"):
                v = getattr(cfg, key)
                if v and not Path(v).is_absolute():
                    setattr(cfg, key, str(base / v))
        return cfg

    def train_config(self, seed: int) -> TrainConfig:
        return TrainConfig(learning_rate=self.learning_rate, optimizer=self.optimizer,
                           batch_size=self.batch_size, max_epochs=self.max_epochs,
                           patience=self.patience, seed=seed)

    def resolved_sources(self) -> tuple:
        if self.sources:
            return tuple(self.sources)
        return SOURCES if self.external_graph else ("internal",)

    def resolved_models(self) -> tuple:
        if self.models:
            return tuple(self.models)
        out = []
        if self.embeddings:
            out.append("emb_linear")
        if self.patches:
            out.append("patch_mlp")
        return tuple(out)

    def validate(self):
        if not self.expression:
            raise ValueError("config needs an expression file")
        if not self.output_dir:
            raise ValueError("config needs an output_dir")
        for key in ("expression", "embeddings", "patches", "external_graph", "folds"):
            v = getattr(self, key)
            if v and not Path(v).is_file():
                raise FileNotFoundError(f"{key} file not found: {v}")
        for s in self.resolved_sources():
            if s not in SOURCES:
                raise ValueError(f"unknown PK source {s!r}")
            if s in ("external", "combined") and not self.external_graph:
                raise ValueError(f"source {s!r} needs external_graph")
        models = self.resolved_models()
        if not models:
            raise ValueError("config needs embeddings and/or patches")
        for m in models:
            if m not in ("emb_linear", "patch_mlp"):
                raise ValueError(f"unknown model {m!r}")
            if m == "emb_linear" and not self.embeddings:
                raise ValueError("model emb_linear needs embeddings")
            if m == "patch_mlp" and not self.patches:
                raise ValueError("model patch_mlp needs patches")
        if not 0 < self.tau < 1:
            raise ValueError("tau must lie in (0, 1)")
        if self.select_on not in ("test", "val"):
            raise ValueError("select_on must be 'test' or 'val'")
        self.train_config(self.seed)
        return self


@dataclass
class _Inputs:
    expr: dataio.ExpressionMatrix
    x: dict = field(default_factory=dict)      # model -> input matrix aligned to samples
    d: dict = field(default_factory=dict)      # model -> embedding dimension
    hidden: dict = field(default_factory=dict)
    external: Optional[object] = None


def _load_inputs(cfg: ExperimentConfig) -> _Inputs:
    with stage("load"):
        expr = dataio.load_expression_matrix(cfg.expression)
        inp = _Inputs(expr)
        models = cfg.resolved_models()
        if "emb_linear" in models:
            table = dataio.load_embedding_table(cfg.embeddings)
            inp.x["emb_linear"] = table.aligned_to(expr.sample_ids)
            inp.d["emb_linear"] = table.dim
            inp.hidden["emb_linear"] = None
        if "patch_mlp" in models:
            sets = {ps.sample_id: ps for ps in dataio.load_patch_sets(cfg.patches)}
            missing = [s for s in expr.sample_ids if s not in sets]
            if missing:
                raise KeyError(f"no patches for samples {missing[:5]}")
            pooled = np.array([pool_patches(sets[s]) for s in expr.sample_ids])
            inp.x["patch_mlp"] = pooled
            inp.d["patch_mlp"] = cfg.encoder_dim or pooled.shape[1]
            inp.hidden["patch_mlp"] = cfg.hidden_dim
        if cfg.external_graph:
            ext = dataio.load_graph_edgelist(cfg.external_graph)
            inp.external = dataio.align_gene_universe(ext, expr.gene_ids)
    return inp


def fold_graphs(cfg: ExperimentConfig, expr, splits, external) -> dict:
    """PK graphs for one fold; the internal one sees only train+val rows."""
    out = {}
    sources = cfg.resolved_sources()
    if "internal" in sources or "combined" in sources:
        rows = np.sort(np.concatenate([splits["train"], splits["val"]]))
        internal = build_graph(expr, cfg.tau, cfg.block, cfg.absolute, rows=rows)
    for s in sources:
        if s == "external":
            out[s] = external
        elif s == "internal":
            out[s] = internal
        else:
            out[s] = union_graphs(external, internal)
    return out


def _run_fold(cfg: ExperimentConfig, inp: _Inputs, folds, f: int, out: Path) -> dict:
    expr = inp.expr
    splits = folds.sample_indices(f, expr.patient_ids)
    fold_seed = cfg.seed + 1000 * f
    with stage(f"fold{f}/build-graph"):
        graphs = fold_graphs(cfg, expr, splits, inp.external)
        for s, g in graphs.items():
            dataio.save_graph_edgelist(g, out / "graphs" / f"fold{f}_{s}.tsv")
    embeddings, np_rows = {}, []
    with stage(f"fold{f}/embed"):
        for s, g in graphs.items():
            M = adjacency_from_graph(g, expr.gene_ids)
            for d in sorted(set(inp.d.values())):
                emb = factorize(M, d, cfg.nmf_max_iter, cfg.nmf_tol, seed=fold_seed)
                embeddings[(s, d)] = emb
                dataio.save_labeled_matrix(out / "embeddings" / f"fold{f}_{s}_d{d}.pkmx",
                                           emb.gene_ids, emb.G)
                n_eval = int(M.row_nonzero().sum())
                k = min(cfg.np_k, n_eval - 1)
                score = np_score(M, emb, k).np_score if k >= 1 else float("nan")
                np_rows.append((f, s, d, k, f"{score:.6f}", f"{emb.final_loss:.6g}", emb.iterations_run))
    sweeps = {}
    for model, x in inp.x.items():
        data = FoldData.from_indices(x, expr.values, splits, expr.gene_ids)
        d, hidden = inp.d[model], inp.hidden[model]
        tcfg = cfg.train_config(fold_seed)
        rdir = out / "reports" / model / f"fold{f}"
        rdir.mkdir(parents=True, exist_ok=True)
        with stage(f"fold{f}/{model}/no-pk"):
            base = lambda_sweep(data, None, [0.0], tcfg, d=d, hidden_dim=hidden, alpha=cfg.alpha,
                                include_zero=False, clamp_output=cfg.clamp_output)
            sweeps[(model, "none")] = base
            report.write_eval_report(base.reports[0.0], expr.gene_ids, rdir / "none_lam0.0.tsv")
            report.write_history(base.results[0.0].history, rdir / "none_lam0.0_history.tsv")
        for s in graphs:
            with stage(f"fold{f}/{model}/{s}"):
                G = embeddings[(s, d)].G
                sw = lambda_sweep(data, G, cfg.lambda_grid, tcfg, d=d, hidden_dim=hidden,
                                  alpha=cfg.alpha, include_zero=False, select_on=cfg.select_on,
                                  clamp_output=cfg.clamp_output)
                sweeps[(model, s)] = sw
                for lam, rep in sw.reports.items():
                    report.write_eval_report(rep, expr.gene_ids, rdir / f"{s}_lam{lam}.tsv")
                    report.write_history(sw.results[lam].history, rdir / f"{s}_lam{lam}_history.tsv")
    stats = {s: graph_stats(g) for s, g in graphs.items()}
    return {"sweeps": sweeps, "np": np_rows, "stats": stats}


def run_experiment(cfg: ExperimentConfig) -> Path:
    """Run every fold and write reports under ``cfg.output_dir``.

    Returns the path of ``summary.tsv``.
    """
    with stage("config"):
        cfg.validate()
    inp = _load_inputs(cfg)
    out = Path(cfg.output_dir)
    with stage("setup"):
        out.mkdir(parents=True, exist_ok=True)
        for sub in ("graphs", "embeddings", "reports", "figures"):
            d = out / sub
            if d.exists():
                shutil.rmtree(d)
            d.mkdir()
        if cfg.folds:
            folds = dataio.load_folds(cfg.folds)
        else:
            folds = dataio.make_folds(inp.expr.patient_ids, cfg.n_folds, cfg.fold_ratios, cfg.seed)
        dataio.save_folds(folds, out / "folds.txt")
        manifest = {
            "version": __version__,
            "config": {k: (list(v) if isinstance(v, tuple) else v) for k, v in asdict(cfg).items()},
            "inputs": {k: {"path": getattr(cfg, k), "sha256": dataio.file_sha256(getattr(cfg, k))}
                       for k in ("expression", "embeddings", "patches", "external_graph", "folds")
                       if getattr(cfg, k)},
        }
        (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")

    run = lambda f: _run_fold(cfg, inp, folds, f, out)
    if cfg.threads > 1:
        with ThreadPoolExecutor(max_workers=cfg.threads) as pool:
            results = list(pool.map(run, range(folds.n_folds)))
    else:
        results = [run(f) for f in range(folds.n_folds)]

    with stage("summary"):
        return _summarize(cfg, inp, folds, results, out)


def _summarize(cfg, inp, folds, results, out: Path) -> Path:
    sources = cfg.resolved_sources()
    grid = [float(x) for x in cfg.lambda_grid]
    sweep_rows, summary_rows, fold_rows = [], [], []
    curves = {}
    for model in inp.x:
        base = [r["sweeps"][(model, "none")].reports[0.0].n_significant for r in results]
        for f, n in enumerate(base):
            sweep_rows.append((model, "none", f, "0.0", n))
        row = [model, f"{np.mean(base):.1f}"]
        curves[model] = {}
        for s in sources:
            per_lam = {lam: [r["sweeps"][(model, s)].reports[lam].n_significant for r in results]
                       for lam in grid}
            for lam in grid:
                for f, n in enumerate(per_lam[lam]):
                    sweep_rows.append((model, s, f, repr(lam), n))
            means = {lam: float(np.mean(v)) for lam, v in per_lam.items()}
            if cfg.select_on == "val":
                vals = {lam: float(np.mean([r["sweeps"][(model, s)].val_scores[lam] for r in results]))
                        for lam in grid}
                best = select_lambda(vals, grid)
            else:
                best = select_lambda(means, grid)
            row += [f"{means[best]:.1f}", repr(best), f"{means[best] - np.mean(base):+.1f}"]
            curves[model][s] = means
            for f, r in enumerate(results):
                fold_rows.append((model, s, f, repr(r["sweeps"][(model, s)].selected_lambda),
                                  r["sweeps"][(model, s)].reports[r["sweeps"][(model, s)].selected_lambda].n_significant,
                                  base[f]))
        summary_rows.append(row)
    header = ["model", "no_pk"]
    for s in sources:
        header += [s, f"{s}_lambda", f"{s}_delta"]
    report.write_table(out / "summary.tsv", header, summary_rows)
    report.write_table(out / "sweep.tsv", ["model", "source", "fold", "lambda", "n_significant"], sweep_rows)
    report.write_table(out / "fold_selection.tsv",
                       ["model", "source", "fold", "selected_lambda", "n_significant", "no_pk"], fold_rows)
    stats_rows = []
    mean_stats = {}
    for s in sources:
        per = [r["stats"][s] for r in results]
        for f, (ng, npairs) in enumerate(per):
            stats_rows.append((s, f, ng, npairs))
        mean_stats[s] = (float(np.mean([p[0] for p in per])), float(np.mean([p[1] for p in per])))
        stats_rows.append((s, "mean", f"{mean_stats[s][0]:.1f}", f"{mean_stats[s][1]:.1f}"))
    report.write_table(out / "graph_stats.tsv", ["source", "fold", "genes_in_network", "pairs"], stats_rows)
    report.write_table(out / "np_scores.tsv",
                       ["fold", "source", "d", "k", "np", "nmf_loss", "nmf_iterations"],
                       [row for r in results for row in r["np"]])
    if cfg.figures:
        _figures(cfg, inp, results, curves, mean_stats, out)
    return out / "summary.tsv"


def _figures(cfg, inp, results, curves, mean_stats, out: Path):
    figs = out / "figures"
    report.plot_graph_stats(figs / "graph_stats.png", mean_stats)
    first = results[0]["sweeps"]
    for model in inp.x:
        no_pk = float(np.mean([r["sweeps"][(model, "none")].reports[0.0].n_significant for r in results]))
        report.plot_lambda_curves(figs / f"{model}_lambda.png", curves[model], no_pk, title=model)
        base_rep = first[(model, "none")].reports[0.0]
        hist = {"no PK": first[(model, "none")].results[0.0].history}
        for s in cfg.resolved_sources():
            sw = first[(model, s)]
            lam = sw.selected_lambda
            report.plot_r_scatter(figs / f"{model}_{s}_r_fold0.png", base_rep.per_gene_r,
                                  sw.reports[lam].per_gene_r, f"{s} PK (lambda={lam})")
            hist[f"{s} lambda={lam}"] = sw.results[lam].history
        report.plot_history(figs / f"{model}_history_fold0.png", hist)
