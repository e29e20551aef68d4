"""Command line interface: ``pkinject <subcommand> ...``."""
from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import fields
from pathlib import Path

import numpy as np

from . import dataio, report
from .coexpr import DEFAULT_BLOCK, DEFAULT_TAU, build_graph, graph_stats, union_graphs
from .embedqc import np_score
from .experiment import ExperimentConfig, PipelineError, run_experiment, stage
from .nmf import GeneEmbeddings, adjacency_from_graph, factorize
from .predictor import pool_patches
from .synth import SynthConfig, generate_dataset, true_graph
from .train_eval import (FoldData, LAMBDA_GRID, TrainConfig, build_models, evaluate,
                         lambda_sweep, random_baseline, train_model)

log = logging.getLogger("pkinject")


class CliError(Exception):
    pass


def _floats(text: str) -> tuple:
    return tuple(float(x) for x in text.split(",") if x.strip())


def _read_universe(path) -> list[str]:
    """Gene universe from an expression TSV header or a one-id-per-line file."""
    with open(path, encoding="utf-8") as fh:
        first = fh.readline().rstrip("\r\n")
    if first.startswith("sample_id\tpatient_id\t"):
        return first.split("\t")[2:]
    return [x for x in dataio.read_ids(path) if x]


# -- subcommands --------------------------------------------------------------

def cmd_synth(args):
    values = {}
    if args.config:
        import configparser
        cp = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#",))
        cp.optionxform = str
        cp.read_string("[synth]\n" + Path(args.config).read_text(encoding="utf-8"))
        values.update(cp["synth"])
    for f in fields(SynthConfig):
        v = getattr(args, f.name, None)
        if v is not None:
            values[f.name] = v
    cfg = SynthConfig.from_dict(values).validate()
    out = Path(args.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    ds = generate_dataset(cfg)
    dataio.save_expression_matrix(ds.expression, out / "expression.tsv")
    dataio.save_embedding_table(ds.embeddings, out / "embeddings.pkmx")
    dataio.save_patch_sets(ds.patches, out / "patches.pkmx")
    dataio.save_graph_edgelist(true_graph(cfg), out / "true_graph.tsv", header="synthetic module graph")
    (out / "synth_config.txt").write_text(
        "".join(f"{k} = {'' if v is None else v}\n" for k, v in cfg.to_dict().items()))
    print(f"wrote {len(ds.expression.sample_ids)} samples x {cfg.n_genes} genes to {out}")


def cmd_build_graph(args):
    expr = dataio.load_expression_matrix(args.input)
    rows = None
    if args.folds:
        spec = dataio.load_folds(args.folds)
        splits = spec.sample_indices(args.fold, expr.patient_ids)
        rows = np.sort(np.concatenate([splits["train"], splits["val"]]))
    g = build_graph(expr, args.tau, args.block, args.absolute, args.threads, rows=rows)
    dataio.save_graph_edgelist(g, args.output)
    n, e = graph_stats(g)
    print(f"genes_in_network\t{n}\npairs\t{e}")


def cmd_graph_stats(args):
    g = dataio.load_graph_edgelist(args.graph)
    if args.universe:
        g = dataio.align_gene_universe(g, _read_universe(args.universe))
    n, e = graph_stats(g)
    print(f"genes_in_network\t{n}\npairs\t{e}")


def cmd_union(args):
    g = union_graphs(dataio.load_graph_edgelist(args.a), dataio.load_graph_edgelist(args.b))
    dataio.save_graph_edgelist(g, args.output)
    n, e = graph_stats(g)
    print(f"genes_in_network\t{n}\npairs\t{e}")


def cmd_embed(args):
    g = dataio.load_graph_edgelist(args.graph)
    universe = _read_universe(args.universe) if args.universe else list(g.gene_ids)
    M = adjacency_from_graph(g, universe)
    emb = factorize(M, args.dim, args.max_iter, args.tol, args.seed)
    dataio.save_labeled_matrix(args.output, emb.gene_ids, emb.G)
    print(f"loss\t{emb.final_loss!r}\niterations\t{emb.iterations_run}")


def cmd_np_eval(args):
    g = dataio.load_graph_edgelist(args.graph)
    genes, G = dataio.load_labeled_matrix(args.embeddings)
    M = adjacency_from_graph(g, genes)
    rep = np_score(M, GeneEmbeddings(tuple(genes), G, np.zeros_like(G)), args.k,
                   hd_metric=args.hd_metric, ld_metric=args.ld_metric)
    rows = [(gene, repr(v)) for gene, v in rep.per_gene_overlap.items()]
    if args.output:
        report.write_table(args.output, ["gene_id", "overlap"], rows)
        with open(args.output, "a", encoding="utf-8") as fh:
            fh.write(f"# summary\tk={rep.k}\tnp={rep.np_score!r}\tgenes_evaluated={rep.genes_evaluated}\n")
    print(f"np\t{rep.np_score:.6f}\nk\t{rep.k}\ngenes_evaluated\t{rep.genes_evaluated}")


def _fold_data(args):
    expr = dataio.load_expression_matrix(args.expression)
    if bool(args.embeddings) == bool(args.patches):
        raise CliError("give exactly one of --embeddings or --patches")
    if args.embeddings:
        x = dataio.load_embedding_table(args.embeddings).aligned_to(expr.sample_ids)
    else:
        sets = {ps.sample_id: ps for ps in dataio.load_patch_sets(args.patches)}
        x = np.array([pool_patches(sets[s]) for s in expr.sample_ids])
    spec = dataio.load_folds(args.folds)
    splits = spec.sample_indices(args.fold, expr.patient_ids)
    return expr, FoldData.from_indices(x, expr.values, splits, expr.gene_ids)


def _pk_matrix(args, gene_ids):
    if not args.pk_embeddings:
        return None
    genes, G = dataio.load_labeled_matrix(args.pk_embeddings)
    emb = GeneEmbeddings(tuple(genes), G, np.zeros_like(G))
    return emb.rows_for(gene_ids)


def _train_cfg(args) -> TrainConfig:
    return TrainConfig(learning_rate=args.lr, optimizer=args.optimizer, batch_size=args.batch_size,
                       max_epochs=args.max_epochs, patience=args.patience, seed=args.seed)


def _model_dims(args, data, G):
    hidden = args.hidden_dim if args.patches else None
    if G is not None:
        d = G.shape[1]
    elif hidden:
        d = args.encoder_dim or data.x_train.shape[1]
    else:
        d = data.x_train.shape[1]
    if not hidden and d != data.x_train.shape[1]:
        raise CliError(f"PK embedding dimension {d} differs from sample embedding dimension "
                       f"{data.x_train.shape[1]}")
    return d, hidden


def cmd_train(args):
    expr, data = _fold_data(args)
    G = _pk_matrix(args, expr.gene_ids)
    d, hidden = _model_dims(args, data, G)
    head, enc = build_models(data, d, G if args.lam > 0 else None, args.lam, args.seed, hidden,
                             not args.no_clamp)
    res = train_model(head, data, _train_cfg(args), enc)
    out = Path(args.output_dir)
    report.save_model(out / "model", res.head, expr.gene_ids, res.encoder)
    report.write_history(res.history, out / "history.tsv")
    print(f"best_epoch\t{res.best_epoch}\nepochs_run\t{len(res.history)}")


def cmd_evaluate(args):
    expr, data = _fold_data(args)
    genes, head, enc = report.load_model(args.model)
    if list(genes) != list(expr.gene_ids):
        raise CliError("model genes do not match the expression matrix")
    hidden = enc.hidden_dim if enc is not None else None
    G = head.G if head.lam > 0 else None
    base = random_baseline(data, head.d, G, head.lam, args.seed, hidden, head.clamp_output)
    rep = evaluate(head, data, base, enc, args.alpha)
    report.write_eval_report(rep, expr.gene_ids, args.output)
    print(f"n_significant\t{rep.n_significant}")


def cmd_sweep(args):
    expr, data = _fold_data(args)
    G = _pk_matrix(args, expr.gene_ids)
    if G is None:
        raise CliError("sweep needs --pk-embeddings")
    d, hidden = _model_dims(args, data, G)
    res = lambda_sweep(data, G, _floats(args.grid), _train_cfg(args), d=d, hidden_dim=hidden,
                       alpha=args.alpha, select_on=args.select_on, clamp_output=not args.no_clamp)
    out = Path(args.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    rows = []
    for lam, rep in sorted(res.reports.items()):
        report.write_eval_report(rep, expr.gene_ids, out / f"report_lam{lam}.tsv")
        report.write_history(res.results[lam].history, out / f"history_lam{lam}.tsv")
        rows.append((repr(lam), rep.n_significant, f"{res.val_scores[lam]:.6f}"))
    report.write_table(out / "sweep.tsv", ["lambda", "n_significant", "best_val_pearson"], rows)
    print(f"selected_lambda\t{res.selected_lambda!r}")
    for lam, n, _ in rows:
        print(f"lambda={lam}\t{n}")


def cmd_make_folds(args):
    expr = dataio.load_expression_matrix(args.expression)
    spec = dataio.make_folds(expr.patient_ids, args.n_folds, _floats(args.ratios), args.seed)
    dataio.save_folds(spec, args.output)


def cmd_run(args):
    with stage("config"):
        cfg = ExperimentConfig.from_file(args.config, output_dir=args.output_dir,
                                         threads=args.threads)
    summary = run_experiment(cfg)
    print(Path(summary).read_text(), end="")


# -- parser -------------------------------------------------------------------

def _add_training(p, sweep=False):
    p.add_argument("--expression", required=True)
    p.add_argument("--embeddings")
    p.add_argument("--patches")
    p.add_argument("--folds", required=True)
    p.add_argument("--fold", type=int, default=0)
    p.add_argument("--pk-embeddings", help="PKMX gene embeddings (with .ids sidecar)")
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--optimizer", choices=("adam", "sgd"), default="adam")
    p.add_argument("--batch-size", type=int, default=32)
    p.add_argument("--max-epochs", type=int, default=200)
    p.add_argument("--patience", type=int, default=20)
    p.add_argument("--hidden-dim", type=int, default=64)
    p.add_argument("--encoder-dim", type=int, default=0)
    p.add_argument("--no-clamp", action="store_true")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--output-dir", required=True)
    if sweep:
        p.add_argument("--grid", default=",".join(map(str, LAMBDA_GRID)))
        p.add_argument("--alpha", type=float, default=0.05)
        p.add_argument("--select-on", choices=("test", "val"), default="test")
    else:
        p.add_argument("--lam", type=float, default=0.0)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="pkinject", description=__doc__)
    parser.add_argument("-v", "--verbose", action="count", default=0)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic dataset")
    p.add_argument("--config", help="key = value file of synth settings")
    p.add_argument("--output-dir", required=True)
    for f in fields(SynthConfig):
        kind = float if f.type == "float" else int
        p.add_argument("--" + f.name.replace("_", "-"), dest=f.name, type=kind, default=None)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("build-graph", help="thresholded Pearson co-expression graph")
    p.add_argument("--input", required=True)
    p.add_argument("--output", required=True)
    p.add_argument("--tau", type=float, default=DEFAULT_TAU)
    p.add_argument("--block", type=int, default=DEFAULT_BLOCK)
    p.add_argument("--absolute", action="store_true", help="threshold |r| instead of r")
    p.add_argument("--threads", type=int, default=1)
    p.add_argument("--folds", help="fold file; restricts to the fold's train+val samples")
    p.add_argument("--fold", type=int, default=0)
    p.set_defaults(func=cmd_build_graph)

    p = sub.add_parser("graph-stats", help="genes in network and edge count")
    p.add_argument("--graph", required=True)
    p.add_argument("--universe", help="expression TSV or gene id list")
    p.set_defaults(func=cmd_graph_stats)

    p = sub.add_parser("union", help="union of two edge lists")
    p.add_argument("--a", required=True)
    p.add_argument("--b", required=True)
    p.add_argument("--output", required=True)
    p.set_defaults(func=cmd_union)

    p = sub.add_parser("embed", help="NMF gene embeddings of a graph")
    p.add_argument("--graph", required=True)
    p.add_argument("--universe", help="expression TSV or gene id list")
    p.add_argument("--dim", type=int, required=True)
    p.add_argument("--max-iter", type=int, default=500)
    p.add_argument("--tol", type=float, default=1e-5)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--output", required=True)
    p.set_defaults(func=cmd_embed)

    p = sub.add_parser("np-eval", help="neighborhood preservation of embeddings")
    p.add_argument("--graph", required=True)
    p.add_argument("--embeddings", required=True)
    p.add_argument("--k", type=int, default=100)
    p.add_argument("--hd-metric", choices=("cosine", "euclidean"), default="cosine")
    p.add_argument("--ld-metric", choices=("cosine", "euclidean"), default="euclidean")
    p.add_argument("--output")
    p.set_defaults(func=cmd_np_eval)

    p = sub.add_parser("make-folds", help="patient-level cross-validation folds")
    p.add_argument("--expression", required=True)
    p.add_argument("--n-folds", type=int, default=5)
    p.add_argument("--ratios", default="0.72,0.08,0.20")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--output", required=True)
    p.set_defaults(func=cmd_make_folds)

    p = sub.add_parser("train", help="train one head for one fold")
    _add_training(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("sweep", help="train over a lambda grid for one fold")
    _add_training(p, sweep=True)
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("evaluate", help="significance report for a trained model")
    p.add_argument("--model", required=True)
    p.add_argument("--expression", required=True)
    p.add_argument("--embeddings")
    p.add_argument("--patches")
    p.add_argument("--folds", required=True)
    p.add_argument("--fold", type=int, default=0)
    p.add_argument("--alpha", type=float, default=0.05)
    p.add_argument("--seed", type=int, default=0, help="seed of the random baseline")
    p.add_argument("--output", required=True)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("run", help="full experiment from a config file")
    p.add_argument("--config", required=True)
    p.add_argument("--output-dir")
    p.add_argument("--threads", type=int)
    p.set_defaults(func=cmd_run)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2),
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        args.func(args)
    except PipelineError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (CliError, ValueError, KeyError, OSError, FloatingPointError) as exc:
        print(f"error: [{args.command}] {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
