import numpy as np
import pytest

from pkinject.coexpr import CoexpressionGraph, build_graph, graph_stats
from pkinject.synth import (SynthConfig, generate_dataset, graph_recovery_metrics,
                            module_assignment, true_graph)
from pkinject.train_eval import FoldData, TrainConfig, build_models, per_gene_pearson, train_model


def corr(a, b):
    return float(np.corrcoef(a, b)[0, 1])


class TestGenerate:
    def test_within_module_noiseless(self):
        cfg = SynthConfig(n_patients=200, expression_noise=0.0, loading_jitter=0.0, seed=1)
        X = generate_dataset(cfg).expression.values
        assert corr(X[:, 0], X[:, 1]) > 0.99
        assert corr(X[:, 20], X[:, 39]) > 0.99

    def test_cross_module_weak(self):
        vals = []
        for s in range(5):
            X = generate_dataset(SynthConfig(n_patients=200, seed=s)).expression.values
            vals.append(abs(corr(X[:, 0], X[:, 20])))
        assert np.median(vals) < 0.3

    def test_deterministic(self):
        cfg = SynthConfig(n_patients=30, n_genes=60, n_modules=2, seed=9)
        a, b = generate_dataset(cfg), generate_dataset(cfg)
        assert a.expression.values.tobytes() == b.expression.values.tobytes()
        assert a.embeddings.vectors.tobytes() == b.embeddings.vectors.tobytes()
        assert all(x.patches.tobytes() == y.patches.tobytes() for x, y in zip(a.patches, b.patches))

    def test_patient_stream_independent_of_count(self):
        small = generate_dataset(SynthConfig(n_patients=10, n_genes=60, n_modules=2, seed=3))
        big = generate_dataset(SynthConfig(n_patients=20, n_genes=60, n_modules=2, seed=3))
        assert small.latent.tobytes() == big.latent[:10].tobytes()

    def test_shapes_and_domain(self):
        cfg = SynthConfig(n_patients=12, samples_per_patient=2, n_genes=50, n_modules=2,
                          genes_per_module=5, embed_dim=6, patches_per_sample=3)
        ds = generate_dataset(cfg)
        assert ds.expression.shape == (24, 50)
        assert ds.expression.values.min() >= 0
        assert ds.embeddings.dim == 6
        assert len(ds.patches) == 24 and ds.patches[0].patches.shape == (3, 6)
        pats = ds.expression.patient_ids
        assert ds.latent[0].tobytes() == ds.latent[1].tobytes() and pats[0] == pats[1]

    def test_clamping_rare_at_defaults(self):
        X = generate_dataset(SynthConfig(seed=0)).expression.values
        assert np.mean(X == 0) < 0.05

    @pytest.mark.parametrize("bad", [dict(n_modules=30, genes_per_module=20), dict(embed_dim=0),
                                     dict(expression_noise=-1.0), dict(latent_dim=40, embed_dim=32)])
    def test_invalid(self, bad):
        with pytest.raises(ValueError):
            generate_dataset(SynthConfig(**bad))

    def test_config_dict_round_trip(self):
        cfg = SynthConfig(n_patients=7, expression_noise=0.25, seed=11)
        assert SynthConfig.from_dict(cfg.to_dict()) == cfg
        with pytest.raises(ValueError):
            SynthConfig.from_dict({"unknown": 1})


class TestTruth:
    def test_edge_count(self):
        g = true_graph(SynthConfig())
        assert g.n_edges == 1900
        assert graph_stats(g) == (200, 1900)

    def test_single_pair(self):
        assert true_graph(SynthConfig(n_genes=5, n_modules=1, genes_per_module=2)).n_edges == 1

    def test_module_assignment(self):
        m = module_assignment(SynthConfig(n_genes=30, n_modules=2, genes_per_module=10))
        assert m.tolist() == [0] * 10 + [1] * 10 + [-1] * 10

    def test_metrics(self):
        truth = true_graph(SynthConfig())
        assert graph_recovery_metrics(truth, truth) == (1.0, 1.0, 1.0)
        empty = CoexpressionGraph(truth.gene_ids, np.zeros((0, 2)))
        assert graph_recovery_metrics(empty, truth) == (0.0, 0.0, 0.0)
        genes = truth.gene_ids
        spurious = [(genes[300 + k], genes[400 + k]) for k in range(100)]
        noisy = CoexpressionGraph.from_named_edges(truth.named_edges() + spurious, gene_ids=genes)
        p, r, _ = graph_recovery_metrics(noisy, truth)
        assert r == 1.0 and p == pytest.approx(0.95, abs=1e-15)

    def test_threshold_recovers_truth(self):
        scores = []
        for s in range(5):
            cfg = SynthConfig(n_patients=400, expression_noise=0.0, loading_jitter=0.0, seed=s)
            ds = generate_dataset(cfg)
            p, r, _ = graph_recovery_metrics(build_graph(ds.expression, 0.85), true_graph(cfg))
            scores.append(min(p, r))
        assert np.median(scores) >= 0.99


class TestSignal:
    def test_module_genes_predictable_background_not(self):
        cfg = SynthConfig(n_patients=200, seed=2)
        ds = generate_dataset(cfg)
        w, y = ds.embeddings.vectors, ds.expression.values
        data = FoldData(w[:140], y[:140], w[140:160], y[140:160], w[160:], y[160:])
        head, _ = build_models(data, 32, None, 0.0, seed=0)
        res = train_model(head, data, TrainConfig(learning_rate=0.01, max_epochs=100, patience=10))
        r, _, _ = per_gene_pearson(w[160:] @ res.head.A.T + res.head.b, y[160:])
        assert np.median(r[:200]) > 0.3
        assert abs(np.median(r[200:])) < 0.1
