import math

import numpy as np
import pytest

from zsflow import rng as streams
from zsflow.augment import (
    ContrastiveNet,
    MiningConfig,
    PerturbConfig,
    contrastive_loss,
    contrastive_scores,
    mine_boundary,
    perturb,
    prediction_entropy,
    shannon_entropy,
    train_contrastive,
)
from zsflow.errors import ConfigurationError
from zsflow.numcore import Layer, Mlp, parameter_hash

from oracles import central_diff, max_rel_err


def zero_net(d_v, d_a, hidden=4):
    net = Mlp(
        [
            Layer(np.zeros((d_v + d_a, hidden)), np.zeros(hidden), "relu"),
            Layer(np.zeros((hidden, 1)), np.zeros(1), "sigmoid"),
        ]
    )
    return ContrastiveNet(net, d_v, d_a)


def two_class_data(n_per_class=40, d_v=4, d_a=3, seed=0, gap=4.0):
    g = streams.stream(seed, 0)
    attrs = np.array([[1.0, 0.0, 0.5], [0.0, 1.0, 0.5]])
    mu = np.vstack([np.full(d_v, -gap / 2), np.full(d_v, gap / 2)])
    x = np.vstack(
        [mu[c] + 0.3 * g.standard_normal((n_per_class, d_v)) for c in (0, 1)]
    )
    y = np.repeat([0, 1], n_per_class)
    return x, y, attrs


class TestScores:
    def test_zero_net_scores_are_half(self):
        cn = zero_net(3, 2)
        x = streams.stream(1, 0).standard_normal((5, 3))
        attrs = streams.stream(1, 1).standard_normal((4, 2))
        np.testing.assert_array_equal(contrastive_scores(cn, x, attrs), np.full((5, 4), 0.5))

    def test_scores_monotone_in_bias(self):
        cn = zero_net(2, 2)
        x = np.zeros((1, 2))
        attrs = np.zeros((2, 2))
        prev = 0.5
        for bias in (1.0, 3.0, 9.0):
            cn.net.layers[1].b[0] = bias
            score = contrastive_scores(cn, x, attrs)[0, 0]
            assert score > prev
            prev = score
        assert prev > 0.999

    def test_matches_per_pair_oracle(self):
        g = streams.stream(2, 0)
        cn = ContrastiveNet.build(4, 3, 8, g)
        x = g.standard_normal((6, 4))
        attrs = g.standard_normal((5, 3))
        got = contrastive_scores(cn, x, attrs)
        for i in range(6):
            for j in range(5):
                pair = np.concatenate([x[i], attrs[j]])[None, :]
                want = cn.net.forward(pair)[0, 0]
                assert abs(got[i, j] - want) < 1e-12


class TestLoss:
    def test_perfect_scores_give_zero(self):
        assert contrastive_loss(np.array([0.0, 1.0, 0.0]), 1) == 0.0

    def test_uniform_two_class_value(self):
        assert contrastive_loss(np.array([0.5, 0.5]), 0) == 0.5

    def test_batch_rows(self):
        scores = np.array([[0.5, 0.5], [1.0, 0.0]])
        got = contrastive_loss(scores, np.array([0, 0]))
        np.testing.assert_allclose(got, [0.5, 0.0])

    def test_out_of_range_class_rejected(self):
        with pytest.raises(ConfigurationError):
            contrastive_loss(np.array([0.5, 0.5]), 2)

    def test_input_gradient_matches_fd(self):
        g = streams.stream(3, 0)
        cn = ContrastiveNet.build(3, 2, 6, g)
        x = g.standard_normal((2, 3))
        attrs = g.standard_normal((4, 2))
        labels = np.array([1, 3])
        lam = 0.7

        def loss():
            scores = contrastive_scores(cn, x, attrs)
            total = 0.0
            for i, y in enumerate(labels):
                total += contrastive_loss(scores[i], int(y))
                total += lam * prediction_entropy(scores[i])
            return total

        from zsflow.augment import mining_gradient

        grad = mining_gradient(cn, x, labels, attrs, lam, +1.0)
        assert max_rel_err(central_diff(loss, x), grad) < 1e-4


class TestEntropy:
    def test_uniform_two_scores(self):
        assert abs(prediction_entropy(np.array([0.5, 0.5])) + math.log(2)) < 1e-12

    def test_confident_single_score(self):
        assert abs(prediction_entropy(np.array([1.0 - 1e-12]))) < 1e-10

    def test_hand_computed_skewed_scores(self):
        value = prediction_entropy(np.array([0.9, 0.1]))
        assert abs(value - (0.9 * math.log(0.9) + 0.1 * math.log(0.1))) < 1e-12
        assert abs(value + 0.325083) < 1e-6

    def test_exact_zero_and_one_are_clamped(self):
        value = prediction_entropy(np.array([0.0, 1.0]))
        assert np.isfinite(value)

    def test_shannon_is_negated(self):
        scores = np.array([0.3, 0.6])
        assert shannon_entropy(scores) == -prediction_entropy(scores)


class TestTrainContrastive:
    def test_separates_two_synthetic_classes(self):
        x, y, attrs = two_class_data(seed=4)
        cn = ContrastiveNet.build(4, 3, 16, streams.stream(4, 1))
        train_contrastive(cn, x, y, attrs, epochs=60, batch_size=32, lr=5e-3,
                          rng=streams.stream(4, 2))
        scores = contrastive_scores(cn, x, attrs)
        matched = scores[np.arange(len(y)), y]
        mismatched = scores[np.arange(len(y)), 1 - y]
        assert matched.min() > 0.9
        assert mismatched.max() < 0.1

    def test_zero_epochs_leaves_net_unchanged(self):
        x, y, attrs = two_class_data(seed=5)
        cn = ContrastiveNet.build(4, 3, 8, streams.stream(5, 1))
        before = parameter_hash(cn.net.parameters())
        history = train_contrastive(cn, x, y, attrs, epochs=0, batch_size=16, lr=1e-3,
                                    rng=streams.stream(5, 2))
        assert history == []
        assert parameter_hash(cn.net.parameters()) == before

    def test_loss_decreases_over_first_ten_epochs(self):
        x, y, attrs = two_class_data(seed=6)
        cn = ContrastiveNet.build(4, 3, 16, streams.stream(6, 1))
        history = train_contrastive(cn, x, y, attrs, epochs=10, batch_size=32, lr=5e-3,
                                    rng=streams.stream(6, 2))
        assert all(b < a for a, b in zip(history, history[1:]))
        assert history[-1] < history[0]


class TestMining:
    def test_config_validation(self):
        with pytest.raises(ConfigurationError):
            MiningConfig(eta=0.0, steps=1)
        with pytest.raises(ConfigurationError):
            MiningConfig(eta=0.1, steps=0)
        with pytest.raises(ConfigurationError):
            MiningConfig(eta=0.1, steps=1, lambda_ent=-1.0)
        with pytest.raises(ConfigurationError):
            MiningConfig(eta=0.1, steps=1, sign_mode="sideways")

    def test_stationary_point_is_fixed(self):
        # A zero net has zero input gradient everywhere, so mining cannot move.
        cn = zero_net(3, 2)
        x = streams.stream(7, 0).standard_normal((4, 3))
        mcfg = MiningConfig(eta=1e-3, steps=5, lambda_ent=0.0)
        mined = mine_boundary(cn, x, np.zeros(4, dtype=int), np.zeros((2, 2)), mcfg)
        np.testing.assert_array_equal(mined, x)

    def test_single_step_matches_fd_oracle_intent(self):
        g = streams.stream(8, 0)
        cn = ContrastiveNet.build(2, 2, 6, g)
        x = g.standard_normal((1, 2))
        attrs = g.standard_normal((3, 2))
        label = np.array([1])
        eta, lam = 0.05, 0.4

        def objective():
            scores = contrastive_scores(cn, x, attrs)
            return contrastive_loss(scores[0], 1) + lam * prediction_entropy(scores[0])

        fd_grad = central_diff(objective, x)
        mined = mine_boundary(cn, x, label, attrs,
                              MiningConfig(eta=eta, steps=1, lambda_ent=lam))
        np.testing.assert_allclose(mined, x - eta * fd_grad, atol=1e-8)

    def test_single_step_matches_fd_oracle_paper_literal(self):
        g = streams.stream(9, 0)
        cn = ContrastiveNet.build(2, 2, 6, g)
        x = g.standard_normal((1, 2))
        attrs = g.standard_normal((3, 2))
        label = np.array([0])
        eta, lam = 0.05, 0.4

        def objective():
            scores = contrastive_scores(cn, x, attrs)
            return contrastive_loss(scores[0], 0) - lam * prediction_entropy(scores[0])

        fd_grad = central_diff(objective, x)
        mined = mine_boundary(
            cn, x, label, attrs,
            MiningConfig(eta=eta, steps=1, lambda_ent=lam, sign_mode="paper_literal"),
        )
        np.testing.assert_allclose(mined, x + eta * fd_grad, atol=1e-8)

    def test_mining_never_mutates_the_net(self):
        x, y, attrs = two_class_data(seed=10)
        cn = ContrastiveNet.build(4, 3, 16, streams.stream(10, 1))
        train_contrastive(cn, x, y, attrs, epochs=30, batch_size=32, lr=5e-3,
                          rng=streams.stream(10, 2))
        before = parameter_hash(cn.net.parameters())
        mine_boundary(cn, x, y, attrs, MiningConfig(eta=0.05, steps=10, lambda_ent=1.0))
        assert parameter_hash(cn.net.parameters()) == before

    def test_intent_mode_without_entropy_descends_loss(self):
        # eta = 1e-3: the pair loss must be monotonically non-increasing at
        # every step (tolerance 1e-9 per step).
        x, y, attrs = two_class_data(n_per_class=10, seed=11)
        cn = ContrastiveNet.build(4, 3, 16, streams.stream(11, 1))
        train_contrastive(cn, x, y, attrs, epochs=5, batch_size=16, lr=5e-3,
                          rng=streams.stream(11, 2))
        current = x.copy()
        mcfg = MiningConfig(eta=1e-3, steps=1, lambda_ent=0.0)
        prev = contrastive_loss(contrastive_scores(cn, current, attrs), y).sum()
        for _ in range(10):
            current = mine_boundary(cn, current, y, attrs, mcfg)
            now = contrastive_loss(contrastive_scores(cn, current, attrs), y).sum()
            assert now <= prev + 1e-9
            prev = now

    def test_batch_rows_mine_independently(self):
        # Row i of a batched call must match mining sample i alone, so mined
        # samples stay aligned with their source labels.
        g = streams.stream(19, 0)
        cn = ContrastiveNet.build(3, 2, 8, g)
        x = g.standard_normal((5, 3))
        y = g.integers(0, 4, size=5).astype(int)
        attrs = g.standard_normal((4, 2))
        mcfg = MiningConfig(eta=0.02, steps=4, lambda_ent=0.5)
        batch = mine_boundary(cn, x, y, attrs, mcfg)
        for i in range(5):
            single = mine_boundary(cn, x[i : i + 1], y[i : i + 1], attrs, mcfg)
            np.testing.assert_allclose(batch[i], single[0], atol=1e-12)

    def test_intent_mode_raises_shannon_entropy(self):
        x, y, attrs = two_class_data(seed=12)
        cn = ContrastiveNet.build(4, 3, 16, streams.stream(12, 1))
        train_contrastive(cn, x, y, attrs, epochs=60, batch_size=32, lr=5e-3,
                          rng=streams.stream(12, 2))
        mined = mine_boundary(cn, x, y, attrs,
                              MiningConfig(eta=0.05, steps=10, lambda_ent=1.0))
        before = shannon_entropy(contrastive_scores(cn, x, attrs)).mean()
        after = shannon_entropy(contrastive_scores(cn, mined, attrs)).mean()
        assert after > before


class TestPerturb:
    def test_zero_coefficient_is_identity(self):
        x = streams.stream(13, 0).standard_normal((5, 3))
        out = perturb(x, PerturbConfig(lambda_perturb=0.0), streams.stream(13, 1))
        np.testing.assert_array_equal(out, x)

    def test_zero_keep_probability_is_identity(self):
        x = streams.stream(14, 0).standard_normal((5, 3))
        out = perturb(x, PerturbConfig(lambda_perturb=2.0, p_drop=0.0), streams.stream(14, 1))
        np.testing.assert_array_equal(out, x)

    def test_noise_moments(self):
        # 1e5 draws of (x_vir - x)/lambda: mean within 0.02 of 0 and variance
        # within 0.02 of 1, per dimension.
        lam = 0.5
        x = np.array([[1.0, -2.0, 0.5]])
        g = streams.stream(15, 1)
        draws = np.vstack([
            (perturb(x, PerturbConfig(lambda_perturb=lam, p_drop=1.0), g) - x) / lam
            for _ in range(100_000)
        ])
        assert np.abs(draws.mean(axis=0)).max() < 0.02
        assert np.abs(draws.var(axis=0) - 1.0).max() < 0.02

    def test_prototype_preserved_in_expectation(self):
        lam = 0.8
        x = np.array([[0.3, -1.2, 2.0, 0.0]])
        g = streams.stream(16, 1)
        acc = np.zeros(4)
        n = 10_000
        for _ in range(n):
            acc += perturb(x, PerturbConfig(lambda_perturb=lam, p_drop=0.7), g)[0]
        drift = np.abs(acc / n - x[0])
        assert drift.max() < 0.02 * lam

    def test_config_validation(self):
        with pytest.raises(ConfigurationError):
            PerturbConfig(lambda_perturb=-0.1)
        with pytest.raises(ConfigurationError):
            PerturbConfig(lambda_perturb=0.1, p_drop=1.5)
