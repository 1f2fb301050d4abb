"""Tests for the stage-two multi-task network."""

from __future__ import annotations

import logging
import math

import numpy as np
import pytest

from crossgrain.config import StageTwoConfig
from crossgrain.core.layers import Activation, pack, unpack_into
from crossgrain.core.multitask import (
    SimilarityGraph,
    build_similarity_graph,
    build_stage_two,
    contrastive_grad,
    contrastive_loss,
    cross_entropy_loss,
    encode_common,
    multitask_gradients,
    multitask_loss,
    multitask_train,
    sample_negative_mask,
    squared_distances,
)
from crossgrain.core.numeric import SeededRng, finite_diff_grad, relative_error
from crossgrain.errors import ConfigurationError, DivergenceError, DomainError, PairingError, PreconditionError, UsageError


def _toy_cfg(**kw) -> StageTwoConfig:
    base = dict(layer_dims=[3, 3], hidden_activation="sigmoid", lam=0.7, alpha=1.0, dropout=0.0, epochs=3, batch_size=4)
    base.update(kw)
    return StageTwoConfig(**base)


def _toy_data(n: int = 6) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    rng = SeededRng(7)
    return rng.normal(size=(n, 4)), rng.normal(size=(n, 5)), np.array([0, 1, 2, 0, 1, 2][:n])


def _closed_form(f, g, e, alpha):
    """Per-pair derivative rules summed by hand."""
    grad_f, grad_g = np.zeros_like(f), np.zeros_like(g)
    for p in range(f.shape[0]):
        for q in range(g.shape[0]):
            diff = f[p] - g[q]
            if e[p, q]:
                grad_f[p] += 2 * diff
                grad_g[q] += -2 * diff
            elif alpha - diff @ diff > 0:
                grad_f[p] += -2 * diff
                grad_g[q] += 2 * diff
    n = e.size
    return grad_f / n, grad_g / n


class TestSimilarityGraph:
    def test_same_label(self):
        np.testing.assert_array_equal(build_similarity_graph([3], [3]).matrix, [[1.0]])

    def test_different_label(self):
        np.testing.assert_array_equal(build_similarity_graph([1], [2]).matrix, [[0.0]])

    def test_co_existence_is_identity(self):
        idx = np.arange(4)
        np.testing.assert_array_equal(build_similarity_graph(pairs_image=idx, pairs_text=idx).matrix, np.eye(4))

    def test_needs_labels_or_pairs(self):
        with pytest.raises(ConfigurationError):
            build_similarity_graph()


class TestContrastiveLoss:
    def test_equal_embeddings_all_similar(self):
        f = SeededRng(0).normal(size=(3, 2))
        assert contrastive_loss(f, f, SimilarityGraph(np.eye(3)), 1.0) == 0.0

    def test_hinge_boundary(self):
        f, g = np.array([[1.0, 1.0]]), np.array([[0.0, 0.0]])
        assert contrastive_loss(f, g, SimilarityGraph(np.zeros((1, 1))), 2.0) == 0.0

    def test_hand_case(self):
        f, g = np.array([[1.0, 0.0]]), np.array([[0.0, 0.0]])
        assert contrastive_loss(f, g, SimilarityGraph(np.zeros((1, 1))), 2.0) == pytest.approx(1.0)

    def test_modality_swap_symmetry(self):
        rng = SeededRng(1)
        f, g = rng.normal(size=(3, 2)), rng.normal(size=(4, 2))
        e = (rng.uniform(size=(3, 4)) > 0.5).astype(float)
        a = contrastive_loss(f, g, SimilarityGraph(e), 1.5)
        b = contrastive_loss(g, f, SimilarityGraph(e.T), 1.5)
        assert a == pytest.approx(b, abs=1e-14)

    def test_nonpositive_margin(self):
        with pytest.raises(ConfigurationError):
            contrastive_loss(np.zeros((1, 2)), np.zeros((1, 2)), SimilarityGraph(np.ones((1, 1))), 0.0)

    def test_squared_distances(self):
        d = squared_distances(np.array([[0.0, 0.0]]), np.array([[3.0, 4.0], [1.0, 0.0]]))
        np.testing.assert_array_equal(d, [[25.0, 1.0]])


class TestContrastiveGrad:
    def test_single_positive_pair_closed_form(self):
        f, g = np.array([[1.0, 2.0]]), np.array([[0.5, -1.0]])
        gf, gg = contrastive_grad(f, g, SimilarityGraph(np.ones((1, 1))), 1.0)
        np.testing.assert_array_equal(gf, 2 * (f - g))
        np.testing.assert_array_equal(gg, 2 * (g - f))

    def test_equal_positive_pair_has_zero_gradient(self):
        f = np.array([[0.3, 0.4]])
        gf, gg = contrastive_grad(f, f.copy(), SimilarityGraph(np.ones((1, 1))), 1.0)
        assert not gf.any() and not gg.any()

    def test_inactive_hinge_has_zero_gradient(self):
        f, g = np.array([[3.0, 0.0]]), np.array([[0.0, 0.0]])
        gf, gg = contrastive_grad(f, g, SimilarityGraph(np.zeros((1, 1))), 1.0)
        assert not gf.any() and not gg.any()

    def test_matches_per_pair_rules(self):
        rng = SeededRng(2)
        f, g = rng.normal(0, 0.5, size=(4, 3)), rng.normal(0, 0.5, size=(4, 3))
        e = np.array([[1, 0, 0, 1], [0, 1, 0, 0], [0, 0, 1, 0], [1, 0, 0, 1]], dtype=float)
        gf, gg = contrastive_grad(f, g, SimilarityGraph(e), 1.0)
        ef, eg = _closed_form(f, g, e, 1.0)
        np.testing.assert_allclose(gf, ef, atol=1e-14)
        np.testing.assert_allclose(gg, eg, atol=1e-14)

    def test_matches_finite_differences(self):
        rng = SeededRng(3)
        f, g = rng.normal(0, 0.5, size=(4, 3)), rng.normal(0, 0.5, size=(5, 3))
        graph = SimilarityGraph((rng.uniform(size=(4, 5)) > 0.6).astype(float))
        gf, gg = contrastive_grad(f, g, graph, 1.0)
        num_f = finite_diff_grad(lambda x: contrastive_loss(x.reshape(f.shape), g, graph, 1.0), f)
        num_g = finite_diff_grad(lambda x: contrastive_loss(f, x.reshape(g.shape), graph, 1.0), g)
        np.testing.assert_allclose(gf.ravel(), num_f, atol=1e-6)
        np.testing.assert_allclose(gg.ravel(), num_g, atol=1e-6)

    def test_mask_limits_counted_pairs(self):
        f, g = np.array([[1.0, 0.0], [0.0, 1.0]]), np.zeros((2, 2))
        mask = np.array([[1.0, 0.0], [0.0, 0.0]])
        loss = contrastive_loss(f, g, SimilarityGraph(np.eye(2)), 1.0, mask=mask)
        assert loss == pytest.approx(1.0)


class TestNegativeSampling:
    def test_no_cap_means_no_mask(self):
        assert sample_negative_mask(SimilarityGraph(np.eye(3)), None, SeededRng(0)) is None

    def test_keeps_positives_and_caps_negatives(self):
        e = np.eye(5)
        mask = sample_negative_mask(SimilarityGraph(e), 4, SeededRng(0))
        assert mask is not None
        assert np.all(mask[e == 1] == 1)
        assert mask[e == 0].sum() == 4


class TestCrossEntropy:
    def test_perfect_prediction(self):
        target = np.eye(3)
        assert cross_entropy_loss(target, target) == 0.0

    def test_uniform_over_four(self):
        loss = cross_entropy_loss(np.full((1, 4), 0.25), np.array([[0.0, 0.0, 1.0, 0.0]]))
        assert loss == pytest.approx(math.log(4), abs=1e-6)
        assert loss == pytest.approx(1.386294, abs=1e-6)

    def test_class_permutation_invariant(self):
        pred = np.array([[0.1, 0.6, 0.3]])
        target = np.array([[0.0, 1.0, 0.0]])
        order = [2, 0, 1]
        assert cross_entropy_loss(pred[:, order], target[:, order]) == pytest.approx(cross_entropy_loss(pred, target))

    def test_rows_must_sum_to_one(self):
        with pytest.raises(PreconditionError):
            cross_entropy_loss(np.array([[0.5, 0.6]]), np.array([[1.0, 0.0]]))

    def test_zero_probability_is_clamped(self, caplog):
        with caplog.at_level(logging.WARNING, logger="crossgrain.core.multitask"):
            loss = cross_entropy_loss(np.array([[1.0, 0.0]]), np.array([[0.0, 1.0]]))
        assert loss == pytest.approx(-math.log(1e-12))
        assert "clamping" in caplog.text


class TestStageTwoModel:
    def test_build_shapes_and_activations(self):
        model = build_stage_two(4, 5, _toy_cfg(layer_dims=[6, 6, 2], hidden_activation="relu"), SeededRng(0), classes=[2, 0, 2])
        assert model.common_dim == 2
        assert [layer.activation for layer in model.f.layers] == [Activation.RELU, Activation.RELU, Activation.LINEAR]
        np.testing.assert_array_equal(model.classes, [0, 2])
        assert model.head_image is not None and model.head_image.weights.shape == (2, 2)

    def test_no_classes_no_heads(self):
        model = build_stage_two(4, 5, _toy_cfg(), SeededRng(0))
        assert not model.has_heads

    def test_unseen_class_in_one_hot(self):
        model = build_stage_two(4, 5, _toy_cfg(), SeededRng(0), classes=[0, 1])
        with pytest.raises(DomainError):
            model.one_hot([5])

    def test_identity_layers_reproduce_input(self):
        model = build_stage_two(4, 4, _toy_cfg(layer_dims=[4, 4, 4], hidden_activation="linear"), SeededRng(0))
        s = SeededRng(1).normal(size=(5, 4))
        np.testing.assert_array_equal(encode_common(model, s, "image"), s)
        np.testing.assert_array_equal(encode_common(model, s, "text"), s)

    def test_encode_is_repeatable(self):
        model = build_stage_two(4, 5, _toy_cfg(dropout=0.5), SeededRng(0))
        s = SeededRng(1).normal(size=(5, 4))
        assert encode_common(model, s, "image").tobytes() == encode_common(model, s, "image").tobytes()

    def test_encode_unknown_modality(self):
        model = build_stage_two(4, 5, _toy_cfg(), SeededRng(0))
        with pytest.raises(UsageError):
            encode_common(model, np.zeros((1, 4)), "video")


class TestMultitaskGradients:
    @pytest.mark.parametrize("with_heads", [True, False])
    def test_total_gradient_matches_finite_differences(self, with_heads):
        s_i, s_t, labels = _toy_data()
        model = build_stage_two(4, 5, _toy_cfg(), SeededRng(0), classes=labels if with_heads else None)
        graph = build_similarity_graph(labels, labels)
        targets = model.one_hot(labels) if with_heads else None
        _, grads = multitask_gradients(model, s_i, s_t, graph, targets=targets)
        params = model.parameters()
        start = pack(params)

        def loss_at(vector: np.ndarray) -> float:
            unpack_into(params, vector)
            return multitask_loss(model, s_i, s_t, graph, targets=targets).total

        numeric = finite_diff_grad(loss_at, start)
        unpack_into(params, start)
        assert relative_error(pack(grads), numeric) < 1e-4

    def test_loss_parts_combine_with_lambda(self):
        s_i, s_t, labels = _toy_data()
        model = build_stage_two(4, 5, _toy_cfg(lam=0.5), SeededRng(0), classes=labels)
        loss = multitask_loss(model, s_i, s_t, build_similarity_graph(labels, labels), targets=model.one_hot(labels))
        assert loss.total == pytest.approx(loss.contrastive + 0.5 * (loss.ce_image + loss.ce_text))


class TestMultitaskTrain:
    def test_zero_learning_rate_leaves_model_unchanged(self):
        s_i, s_t, labels = _toy_data()
        model = build_stage_two(4, 5, _toy_cfg(learning_rate=0.0), SeededRng(0), classes=labels)
        fit = multitask_train(model, s_i, s_t, _toy_cfg(learning_rate=0.0), SeededRng(1), labels=labels)
        np.testing.assert_array_equal(pack(fit.model.parameters()), pack(model.parameters()))

    def test_history_once_per_epoch(self):
        s_i, s_t, labels = _toy_data()
        model = build_stage_two(4, 5, _toy_cfg(), SeededRng(0), classes=labels)
        fit = multitask_train(model, s_i, s_t, _toy_cfg(epochs=5), SeededRng(1), labels=labels)
        assert [e.epoch for e in fit.history] == [0, 1, 2, 3, 4]

    def test_heads_without_labels_rejected(self):
        s_i, s_t, labels = _toy_data()
        model = build_stage_two(4, 5, _toy_cfg(), SeededRng(0), classes=labels)
        with pytest.raises(ConfigurationError):
            multitask_train(model, s_i, s_t, _toy_cfg(), SeededRng(1))

    def test_label_free_training_is_pairwise_only(self):
        s_i, s_t, _ = _toy_data()
        model = build_stage_two(4, 5, _toy_cfg(lam=0.0), SeededRng(0))
        fit = multitask_train(model, s_i, s_t, _toy_cfg(lam=0.0), SeededRng(1))
        assert all(e.train.ce_image == 0.0 and e.train.total == e.train.contrastive for e in fit.history)

    def test_contrastive_loss_decreases(self):
        rng = SeededRng(5)
        labels = np.repeat(np.arange(3), 10)
        centers = rng.normal(0, 2, size=(3, 4))
        s_i = centers[labels] + rng.normal(0, 0.3, size=(30, 4))
        s_t = centers[labels] @ rng.normal(size=(4, 5)) + rng.normal(0, 0.3, size=(30, 5))
        cfg = _toy_cfg(layer_dims=[8, 4], hidden_activation="relu", learning_rate=0.05, epochs=40, batch_size=10, lam=0.5)
        model = build_stage_two(4, 5, cfg, SeededRng(0), classes=labels)
        fit = multitask_train(model, s_i, s_t, cfg, SeededRng(1), labels=labels)
        assert fit.history[-1].train.total < fit.history[0].train.total

    def test_row_mismatch(self):
        s_i, s_t, _ = _toy_data()
        model = build_stage_two(4, 5, _toy_cfg(lam=0.0), SeededRng(0))
        with pytest.raises(PairingError):
            multitask_train(model, s_i, s_t[:-1], _toy_cfg(lam=0.0), SeededRng(1))

    def test_divergence_reports_epoch(self):
        huge = np.full((4, 4), 1e160)
        cfg = _toy_cfg(layer_dims=[4], hidden_activation="linear", lam=0.0)
        model = build_stage_two(4, 4, cfg, SeededRng(0))
        with pytest.raises(DivergenceError) as info:
            multitask_train(model, huge, huge * 0.5, cfg, SeededRng(0))
        assert info.value.epoch == 0

    def test_validation_class_without_head(self):
        s_i, s_t, labels = _toy_data()
        model = build_stage_two(4, 5, _toy_cfg(), SeededRng(0), classes=labels)
        v_i, v_t = s_i[:3] + 0.1, s_t[:3] - 0.1
        fit = multitask_train(
            model, s_i, s_t, _toy_cfg(epochs=2), SeededRng(1),
            labels=labels, validation=(v_i, v_t, np.array([0, 1, 9])),
        )
        assert all(np.isfinite(e.validation) for e in fit.history)

    def test_unknown_classes_only_skip_their_cross_entropy(self):
        s_i, s_t, labels = _toy_data()
        model = build_stage_two(4, 5, _toy_cfg(), SeededRng(0), classes=labels)
        val_labels = np.array([0, 1, 9, 2])
        np.testing.assert_array_equal(model.knows(val_labels), [True, True, False, True])
        rows = np.array([0, 1, 3])
        graph = build_similarity_graph(val_labels, val_labels)
        partial = multitask_loss(model, s_i[:4], s_t[:4], graph, targets=model.one_hot(val_labels[rows]), target_rows=rows)
        known = multitask_loss(model, s_i[rows], s_t[rows], build_similarity_graph(val_labels[rows], val_labels[rows]),
                               targets=model.one_hot(val_labels[rows]))
        full_pairs = multitask_loss(model, s_i[:4], s_t[:4], graph)
        assert partial.contrastive == pytest.approx(full_pairs.contrastive)
        assert partial.ce_image == pytest.approx(known.ce_image)
        assert partial.ce_text == pytest.approx(known.ce_text)


class TestDropout:
    @pytest.mark.parametrize("activation", ["sigmoid", "tanh"])
    def test_gradient_with_frozen_mask_matches_finite_differences(self, activation):
        s_i, s_t, labels = _toy_data()
        model = build_stage_two(4, 5, _toy_cfg(layer_dims=[4, 4, 3], hidden_activation=activation), SeededRng(0),
                                classes=labels)
        graph = build_similarity_graph(labels, labels)
        targets = model.one_hot(labels)
        _, grads = multitask_gradients(model, s_i, s_t, graph, targets=targets, dropout=0.5, rng=SeededRng(9))
        params = model.parameters()
        start = pack(params)

        def loss_at(vector: np.ndarray) -> float:
            unpack_into(params, vector)
            loss, _ = multitask_gradients(model, s_i, s_t, graph, targets=targets, dropout=0.5, rng=SeededRng(9))
            return loss.total

        numeric = finite_diff_grad(loss_at, start)
        unpack_into(params, start)
        assert relative_error(pack(grads), numeric) < 1e-4

    def test_masks_change_the_loss(self):
        s_i, s_t, labels = _toy_data()
        model = build_stage_two(4, 5, _toy_cfg(layer_dims=[4, 4, 3]), SeededRng(0), classes=labels)
        graph = build_similarity_graph(labels, labels)
        dropped, _ = multitask_gradients(model, s_i, s_t, graph, dropout=0.5, rng=SeededRng(9))
        plain, _ = multitask_gradients(model, s_i, s_t, graph)
        assert dropped.total != plain.total

    def test_training_with_dropout(self):
        rng = SeededRng(5)
        labels = np.repeat(np.arange(3), 10)
        centers = rng.normal(0, 2, size=(3, 4))
        s_i = centers[labels] + rng.normal(0, 0.3, size=(30, 4))
        s_t = centers[labels] @ rng.normal(size=(4, 5)) + rng.normal(0, 0.3, size=(30, 5))
        cfg = _toy_cfg(layer_dims=[16, 16, 4], hidden_activation="relu", learning_rate=0.05, epochs=60,
                       batch_size=10, lam=0.5, dropout=0.5)
        model = build_stage_two(4, 5, cfg, SeededRng(0), classes=labels)
        a = multitask_train(model, s_i, s_t, cfg, SeededRng(1), labels=labels)
        b = multitask_train(model, s_i, s_t, cfg, SeededRng(1), labels=labels)
        assert pack(a.model.parameters()).tobytes() == pack(b.model.parameters()).tobytes()
        late = np.mean([e.train.total for e in a.history[-5:]])
        assert late < a.history[0].train.total
