import json

import numpy as np
import pytest

from zsflow import rng as streams
from zsflow.data import SynthConfig, generate_synthetic
from zsflow.errors import ConfigurationError, InputDataError
from zsflow.flow import FlowModel
from zsflow.numcore import Layer, Mlp
from zsflow.pipeline import (
    ABLATION_VARIANTS,
    EvalReport,
    MiningSettings,
    SoftmaxClassifier,
    TrainConfig,
    ablation_config,
    fit_softmax,
    generate_unseen,
    harmonic_mean,
    per_class_accuracy,
    run_ablation,
    run_gzsl,
    run_zsl,
    train_classifier,
    train_pipeline,
)
from zsflow.semantics import RawEmbedder


@pytest.fixture(scope="module")
def small_ds():
    return generate_synthetic(
        SynthConfig(
            n_seen_classes=5,
            n_unseen_classes=2,
            feature_dim=8,
            attribute_dim=4,
            samples_per_class=30,
            seed=11,
        )
    )


def small_cfg(**overrides):
    base = dict(
        epochs=40,
        batch_size=64,
        lr=2e-3,
        n_coupling_layers=2,
        hidden_dim=32,
        embed_dim=16,
        lambda_ent=1.0,
        lambda_perturb=0.2,
        lambda_proto=1.0,
        weight_decay=1e-5,
        mining=MiningSettings(eta=0.05, steps=5),
        contrastive_epochs=20,
        contrastive_hidden=32,
        classifier_epochs=30,
        classifier_lr=1e-2,
        n_syn_per_unseen=80,
        seed=1,
    )
    base.update(overrides)
    return TrainConfig(**base)


class TestTrainConfig:
    def test_paper_scale_defaults(self):
        cfg = TrainConfig()
        assert cfg.batch_size == 256
        assert cfg.lr == 3e-4
        assert cfg.hidden_dim == 2048
        assert cfg.embed_dim == 1024

    def test_dict_roundtrip(self):
        cfg = small_cfg()
        clone = TrainConfig.from_dict(json.loads(json.dumps(cfg.to_dict())))
        assert clone == cfg

    def test_mining_null_disables_stage_one(self):
        cfg = TrainConfig.from_dict({"mining": None, "epochs": 1})
        assert cfg.mining is None

    def test_unknown_field_rejected(self):
        with pytest.raises(ConfigurationError, match="zap"):
            TrainConfig.from_dict({"zap": 1})

    def test_unknown_mining_field_rejected(self):
        with pytest.raises(ConfigurationError, match="mining.zap"):
            TrainConfig.from_dict({"mining": {"zap": 1}})

    def test_invalid_values_rejected(self):
        with pytest.raises(ConfigurationError):
            TrainConfig(p_drop=2.0)
        with pytest.raises(ConfigurationError):
            TrainConfig(lr=0.0)
        with pytest.raises(ConfigurationError):
            TrainConfig(mining_fraction=-0.5)


class TestTrainPipeline:
    def test_zero_epochs_returns_initialization(self, small_ds):
        cfg = small_cfg(epochs=0, mining=None)
        result = train_pipeline(small_ds, cfg)
        assert result.history == []
        fresh = FlowModel.build(
            small_ds.feature_dim,
            result.embedder.out_dim,
            cfg.n_coupling_layers,
            cfg.hidden_dim,
            streams.stream(cfg.seed, streams.FLOW_INIT),
        )
        for a, b in zip(result.flow.parameters(), fresh.parameters()):
            np.testing.assert_array_equal(a, b)

    def test_loss_drops_by_at_least_one_nat(self):
        ds = generate_synthetic(
            SynthConfig(
                n_seen_classes=10,
                n_unseen_classes=5,
                feature_dim=32,
                attribute_dim=16,
                samples_per_class=100,
                seed=7,
            )
        )
        result = train_pipeline(ds, TrainConfig.desk(seed=1, epochs=50))
        assert result.history[49]["total"] < result.history[0]["total"] - 1.0

    def test_mining_disabled_when_config_absent(self, small_ds):
        result = train_pipeline(small_ds, small_cfg(mining=None, epochs=1))
        assert result.contrastive is None
        assert result.mined is None

    def test_mining_fraction_caps_mined_count(self, small_ds):
        result = train_pipeline(small_ds, small_cfg(epochs=1, mining_fraction=0.5))
        n_train = len(small_ds.split["train_seen"])
        assert result.mined.shape[0] == round(0.5 * n_train)

    def test_prototype_loss_pulls_generated_means(self, small_ds):
        def distance(lam):
            cfg = small_cfg(lambda_proto=lam, epochs=60)
            res = train_pipeline(small_ds, cfg)
            a_g = res.embedder.embed(small_ds.seen_attributes())
            gen = res.flow.generate(
                np.zeros((len(small_ds.seen_classes), small_ds.feature_dim)), a_g
            )
            return float(np.linalg.norm(gen - res.prototypes, axis=1).mean())

        assert distance(10.0) < distance(0.0)

    def test_empty_train_split_rejected(self):
        ds2 = generate_synthetic(
            SynthConfig(
                n_seen_classes=3,
                n_unseen_classes=1,
                feature_dim=4,
                attribute_dim=2,
                samples_per_class=5,
                seed=1,
            )
        )
        ds2.split["train_seen"] = np.empty(0, dtype=np.intp)
        with pytest.raises(InputDataError):
            train_pipeline(ds2, small_cfg(epochs=1))


class TestGenerateUnseen:
    def test_zero_samples_gives_empty_set(self, small_ds):
        flow = FlowModel.build(8, 4, 1, 8, streams.stream(0, 0))
        feats, labels = generate_unseen(
            flow, RawEmbedder(4), small_ds.attributes, small_ds.unseen_classes, 0, 3
        )
        assert feats.shape == (0, 8)
        assert labels.shape == (0,)

    def test_identity_flow_returns_prior_draws(self, small_ds):
        flow = FlowModel.build(8, 4, 2, 8, streams.stream(0, 1))
        for p in flow.parameters():
            p[...] = 0.0
        feats, labels = generate_unseen(
            flow, RawEmbedder(4), small_ds.attributes, small_ds.unseen_classes, 10, 5
        )
        for i, c in enumerate(small_ds.unseen_classes):
            g = streams.stream(5, streams.GENERATE_BASE + int(c))
            z = g.standard_normal((10, 8))
            np.testing.assert_array_equal(feats[i * 10 : (i + 1) * 10], z)
            assert np.all(labels[i * 10 : (i + 1) * 10] == c)

    def test_row_count_is_n_times_classes(self, small_ds):
        flow = FlowModel.build(8, 4, 1, 8, streams.stream(0, 2))
        feats, labels = generate_unseen(
            flow, RawEmbedder(4), small_ds.attributes, small_ds.unseen_classes, 7, 3
        )
        assert feats.shape == (7 * len(small_ds.unseen_classes), 8)

    def test_class_order_independent(self, small_ds):
        flow = FlowModel.build(8, 4, 1, 8, streams.stream(0, 3))
        ids = small_ds.unseen_classes
        f1, l1 = generate_unseen(flow, RawEmbedder(4), small_ds.attributes, ids, 4, 9)
        f2, l2 = generate_unseen(
            flow, RawEmbedder(4), small_ds.attributes, ids[::-1], 4, 9
        )
        for c in ids:
            np.testing.assert_array_equal(f1[l1 == c], f2[l2 == c])


class TestClassifier:
    def test_linearly_separable_toy_reaches_full_accuracy(self):
        g = streams.stream(21, 0)
        x = np.vstack([g.standard_normal((30, 2)) - 4, g.standard_normal((30, 2)) + 4])
        y = np.repeat([0, 1], 30)
        clf = fit_softmax(x, y, 2, epochs=60, batch_size=16, lr=5e-2, seed=0)
        assert (clf.predict(x) == y).mean() == 1.0

    def test_training_is_deterministic(self):
        g = streams.stream(22, 0)
        x = g.standard_normal((40, 3))
        y = (x[:, 0] > 0).astype(np.intp)
        a = fit_softmax(x, y, 2, epochs=20, batch_size=8, lr=1e-2, seed=4)
        b = fit_softmax(x, y, 2, epochs=20, batch_size=8, lr=1e-2, seed=4)
        for pa, pb in zip(a.net.parameters(), b.net.parameters()):
            np.testing.assert_array_equal(pa, pb)

    def test_loss_decreases_smoothed(self, small_ds):
        idx = small_ds.split["train_seen"]
        clf = fit_softmax(
            small_ds.features[idx], small_ds.labels[idx], small_ds.n_classes,
            epochs=30, batch_size=32, lr=1e-2, seed=2,
        )
        smoothed = [float(np.mean(clf.train_history[i : i + 5])) for i in range(0, 30, 5)]
        assert all(b < a for a, b in zip(smoothed, smoothed[1:]))

    def test_requires_both_sets_nonempty(self, small_ds):
        real = (np.zeros((3, 2)), np.zeros(3, dtype=np.intp))
        empty = (np.zeros((0, 2)), np.zeros(0, dtype=np.intp))
        with pytest.raises(ConfigurationError):
            train_classifier(real, empty, 4, small_cfg())
        with pytest.raises(ConfigurationError):
            train_classifier(empty, real, 4, small_cfg())


def fixed_prediction_classifier(n_features, n_classes, winner):
    """A classifier whose argmax is always ``winner``."""
    w = np.zeros((n_features, n_classes))
    b = np.zeros(n_classes)
    b[winner] = 1.0
    clf = SoftmaxClassifier(Mlp([Layer(w, b, "identity")]))
    return clf


class TestMetrics:
    def test_perfect_classifier_scores_one(self):
        # Identity logits: every sample of class c gets argmax c.
        clf = SoftmaxClassifier(Mlp([Layer(np.eye(3), np.zeros(3), "identity")]))
        x = np.eye(3)
        labels = np.array([0, 1, 2])
        accs, mean = per_class_accuracy(clf, x, labels, np.array([0, 1, 2]))
        np.testing.assert_array_equal(accs, np.ones(3))
        assert mean == 1.0

    def test_class_balanced_mean_ignores_class_sizes(self):
        clf = fixed_prediction_classifier(2, 2, winner=0)
        x = np.zeros((100, 2))
        labels = np.array([0] * 99 + [1])
        accs, mean = per_class_accuracy(clf, x, labels, np.array([0, 1]))
        np.testing.assert_array_equal(accs, [1.0, 0.0])
        assert mean == 0.5

    def test_matches_counting_oracle(self):
        g = streams.stream(23, 0)
        for _ in range(20):
            w = g.standard_normal((4, 3))
            clf = SoftmaxClassifier(Mlp([Layer(w, g.standard_normal(3), "identity")]))
            x = g.standard_normal((30, 4))
            labels = g.integers(0, 3, size=30).astype(np.intp)
            accs, mean = per_class_accuracy(clf, x, labels, np.array([0, 1, 2]))
            preds = clf.logits(x).argmax(axis=1)
            want = []
            for c in range(3):
                hit = sum(1 for p, y in zip(preds, labels) if y == c and p == c)
                total = sum(1 for y in labels if y == c)
                want.append(hit / total)
            np.testing.assert_array_equal(accs, want)
            assert mean == float(np.mean(want))

    def test_duplicating_a_class_preserves_accuracy(self):
        g = streams.stream(24, 0)
        clf = SoftmaxClassifier(
            Mlp([Layer(g.standard_normal((4, 3)), np.zeros(3), "identity")])
        )
        x = g.standard_normal((30, 4))
        labels = g.integers(0, 3, size=30).astype(np.intp)
        accs, _ = per_class_accuracy(clf, x, labels, np.array([0, 1, 2]))
        dup_mask = labels == 1
        x2 = np.vstack([x, x[dup_mask]])
        labels2 = np.concatenate([labels, labels[dup_mask]])
        accs2, _ = per_class_accuracy(clf, x2, labels2, np.array([0, 1, 2]))
        np.testing.assert_array_equal(accs, accs2)

    def test_empty_class_rejected(self):
        clf = fixed_prediction_classifier(2, 3, winner=0)
        with pytest.raises(InputDataError):
            per_class_accuracy(clf, np.zeros((2, 2)), np.array([0, 0]), np.array([0, 1]))

    def test_restricted_argmax(self):
        clf = fixed_prediction_classifier(2, 3, winner=0)
        preds = clf.predict(np.zeros((4, 2)), restrict_to=np.array([1, 2]))
        assert set(preds.tolist()) <= {1, 2}


class TestHarmonicMean:
    def test_equal_accuracies(self):
        assert harmonic_mean(0.5, 0.5) == 0.5

    def test_zero_unseen_gives_zero(self):
        assert harmonic_mean(0.8, 0.0) == 0.0

    def test_both_zero_gives_zero(self):
        assert harmonic_mean(0.0, 0.0) == 0.0

    def test_published_awa_operating_point(self):
        # U=66.5, S=80.3 must reproduce H=72.8 to within 0.05 points.
        assert abs(harmonic_mean(0.665, 0.803) - 0.728) <= 0.0005

    def test_out_of_range_rejected(self):
        with pytest.raises(ConfigurationError):
            harmonic_mean(1.2, 0.5)


@pytest.fixture(scope="module")
def gzsl_report(small_ds):
    return run_gzsl(small_ds, small_cfg())


class TestRuns:
    def test_gzsl_report_schema(self, gzsl_report):
        doc = gzsl_report.to_json_dict()
        for key in ("acc_seen", "acc_unseen", "harmonic_mean", "zsl_t1", "per_class",
                    "config_echo", "seed"):
            assert key in doc
        assert len(doc["per_class"]) == 7

    def test_restricted_t1_dominates_gzsl_unseen(self, gzsl_report):
        assert gzsl_report.zsl_t1 >= gzsl_report.acc_unseen

    def test_harmonic_mean_consistent(self, gzsl_report):
        want = harmonic_mean(gzsl_report.acc_seen, gzsl_report.acc_unseen)
        assert abs(gzsl_report.harmonic_mean - want) < 1e-12

    def test_deterministic_reports(self, small_ds, gzsl_report):
        again = run_gzsl(small_ds, small_cfg())
        a = json.dumps(gzsl_report.to_json_dict(), sort_keys=True)
        b = json.dumps(again.to_json_dict(), sort_keys=True)
        assert a == b

    def test_zsl_report_omits_seen_metrics(self, small_ds):
        report = run_zsl(small_ds, small_cfg(epochs=10))
        doc = report.to_json_dict()
        assert "acc_seen" not in doc
        assert "harmonic_mean" not in doc
        assert 0.0 <= doc["zsl_t1"] <= 1.0
        assert {e["class_id"] for e in doc["per_class"]} == set(
            small_ds.unseen_classes.tolist()
        )

    def test_always_seen_classifier_yields_zero_h(self, small_ds):
        report = run_gzsl(small_ds, small_cfg(epochs=5, n_syn_per_unseen=0))
        assert report.acc_unseen == 0.0
        assert report.harmonic_mean == 0.0


class TestAblation:
    def test_variant_configs(self):
        cfg = small_cfg()
        assert ablation_config(cfg, "w/o EM").mining is None
        assert ablation_config(cfg, "w/o VP").lambda_perturb == 0.0
        assert ablation_config(cfg, "w/o RP").relative_positioning is False
        no_c = ablation_config(cfg, "w/o constraints")
        assert no_c.mining is None
        assert no_c.lambda_perturb == 0.0
        assert no_c.relative_positioning is False
        assert no_c.lambda_proto == 0.0
        both = ablation_config(cfg, "w/o EM&VP")
        assert both.mining is None and both.lambda_perturb == 0.0

    def test_unknown_variant_rejected(self):
        with pytest.raises(ConfigurationError):
            ablation_config(small_cfg(), "w/o gravity")

    def test_run_ablation_keys(self, small_ds):
        reports = run_ablation(small_ds, small_cfg(epochs=5, n_syn_per_unseen=20))
        assert set(reports) == {"full", *ABLATION_VARIANTS}
        for rep in reports.values():
            assert isinstance(rep, EvalReport)


def test_eval_report_bounds_checked():
    with pytest.raises(ConfigurationError):
        EvalReport(zsl_t1=1.5, per_class=[], config_echo={}, seed=0)
