"""Tests for patch averaging and the joint fusion RBM."""

from __future__ import annotations

import math

import numpy as np
import pytest

from crossgrain.config import CdConfig
from crossgrain.core.fusion import (
    JointFusionRbm,
    PatchGroup,
    average_fuse,
    fuse,
    joint_distribution,
    train_fusion,
)
from crossgrain.core.numeric import SeededRng
from crossgrain.core.rbm import RbmParams, hidden_given_visible
from crossgrain.errors import DataValidationError, DomainError, PairingError, PreconditionError, ShapeError

_CD = CdConfig(epochs=2, batch_size=8)


def _rbm(weights, visible_bias, hidden_bias) -> RbmParams:
    return RbmParams(np.array(visible_bias, float), np.array(hidden_bias, float), np.array(weights, float))


def _zero_model(n_in: int, n_path: int, n_out: int) -> JointFusionRbm:
    return JointFusionRbm(
        _rbm(np.zeros((n_in, n_path)), np.zeros(n_in), np.zeros(n_path)),
        _rbm(np.zeros((n_in, n_path)), np.zeros(n_in), np.zeros(n_path)),
        _rbm(np.zeros((2 * n_path, n_out)), np.zeros(2 * n_path), np.zeros(n_out)),
    )


def _sig(x: float) -> float:
    return 1.0 / (1.0 + math.exp(-x))


class TestAverageFuse:
    def test_single_patch_is_itself(self):
        np.testing.assert_array_equal(average_fuse(np.array([[0.3, 0.7]])), [0.3, 0.7])

    def test_symmetric_pair(self):
        np.testing.assert_array_equal(average_fuse(np.array([[0.0, 2.0], [2.0, 0.0]])), [1.0, 1.0])

    def test_identical_patches(self):
        row = np.array([1.5, -2.0, 0.25])
        np.testing.assert_array_equal(average_fuse(np.tile(row, (5, 1))), row)

    def test_permutation_invariant(self):
        patches = SeededRng(0).normal(size=(4, 3))
        np.testing.assert_allclose(average_fuse(patches), average_fuse(patches[::-1]), atol=1e-15)

    def test_empty_group(self):
        with pytest.raises(DomainError):
            average_fuse(PatchGroup("x", np.zeros((0, 3))))


class TestPatchGroup:
    def test_count(self):
        assert PatchGroup("a", np.zeros((3, 2))).patch_count == 3

    def test_cap_enforced(self):
        with pytest.raises(DataValidationError) as info:
            PatchGroup("a", np.zeros((11, 2)), cap=10)
        assert info.value.cap == 10

    def test_cap_boundary_allowed(self):
        assert PatchGroup("a", np.zeros((4, 2)), cap=4).patch_count == 4


class TestTrainFusion:
    def test_dimensions(self):
        rng = SeededRng(0)
        model = train_fusion(_CD, rng.uniform(size=(20, 6)), rng.uniform(size=(20, 5)), SeededRng(1), pathway_dim=4, output_dim=3)
        assert model.pathway_a.weights.shape == (6, 4)
        assert model.pathway_b.weights.shape == (5, 4)
        assert model.top.weights.shape == (8, 3)
        assert model.output_dim == 3

    def test_default_output_width(self):
        data = SeededRng(0).uniform(size=(3, 4))
        model = train_fusion(CdConfig(epochs=0), data, data, SeededRng(0))
        assert model.output_dim == 2048
        assert fuse(model, data, data).shape == (3, 2048)

    def test_zero_epochs_is_deterministic(self):
        data = SeededRng(0).uniform(size=(6, 4))
        a = train_fusion(CdConfig(epochs=0), data, data, SeededRng(5), pathway_dim=3, output_dim=2)
        b = train_fusion(CdConfig(epochs=0), data, data, SeededRng(5), pathway_dim=3, output_dim=2)
        assert a.top.weights.tobytes() == b.top.weights.tobytes()

    def test_tied_seeds_give_identical_pathways(self):
        data = SeededRng(2).uniform(size=(16, 5))
        model = train_fusion(_CD, data, data, SeededRng(3), pathway_dim=4, output_dim=2, tie_seeds=True)
        ha, _ = hidden_given_visible(model.pathway_a, data)
        hb, _ = hidden_given_visible(model.pathway_b, data)
        np.testing.assert_array_equal(ha, hb)

    def test_callback_names_parts(self):
        parts: list[str] = []
        data = SeededRng(0).uniform(size=(8, 3))
        train_fusion(_CD, data, data, SeededRng(0), pathway_dim=2, output_dim=2, on_epoch=lambda p, e, err: parts.append(p))
        assert parts == ["origin", "origin", "patch", "patch", "top", "top"]

    def test_row_misalignment(self):
        rng = SeededRng(0)
        with pytest.raises(PairingError):
            train_fusion(_CD, rng.uniform(size=(5, 3)), rng.uniform(size=(4, 3)), rng)


class TestFuse:
    def test_zero_parameters_give_half(self):
        model = _zero_model(3, 2, 4)
        out = fuse(model, np.ones((2, 3)), np.zeros((2, 3)))
        np.testing.assert_array_equal(out, np.full((2, 4), 0.5))

    def test_hand_evaluated_chain(self):
        model = JointFusionRbm(
            _rbm([[1.0]], [0.0], [0.0]),
            _rbm([[-1.0]], [0.0], [0.5]),
            _rbm([[1.0, 0.0], [0.0, 2.0]], [0.0, 0.0], [0.0, -1.0]),
        )
        h_a, h_b = _sig(2.0), _sig(-0.5)
        out = fuse(model, np.array([[2.0]]), np.array([[1.0]]))
        np.testing.assert_allclose(out[0], [_sig(h_a), _sig(2.0 * h_b - 1.0)], atol=1e-15)

    def test_repeated_calls_bit_identical(self):
        rng = SeededRng(0)
        data = rng.uniform(size=(10, 4))
        model = train_fusion(_CD, data, data, rng, pathway_dim=3, output_dim=3)
        assert fuse(model, data, data).tobytes() == fuse(model, data, data).tobytes()

    def test_outputs_in_unit_interval(self):
        rng = SeededRng(1)
        data = rng.uniform(size=(10, 4))
        out = fuse(train_fusion(_CD, data, data, rng, pathway_dim=3, output_dim=3), data, data)
        assert np.all((out > 0.0) & (out < 1.0))

    def test_width_mismatch(self):
        with pytest.raises(ShapeError):
            fuse(_zero_model(3, 2, 2), np.ones((1, 4)), np.ones((1, 3)))


class TestJointModel:
    def test_top_width_must_match_pathways(self):
        with pytest.raises(ShapeError):
            JointFusionRbm(
                _rbm(np.zeros((2, 2)), np.zeros(2), np.zeros(2)),
                _rbm(np.zeros((2, 2)), np.zeros(2), np.zeros(2)),
                _rbm(np.zeros((3, 2)), np.zeros(3), np.zeros(2)),
            )

    def test_enumerated_distribution_sums_to_one(self):
        gen = np.random.default_rng(4)

        def rand(n_v: int, n_h: int) -> RbmParams:
            return _rbm(gen.normal(size=(n_v, n_h)), gen.normal(size=n_v), gen.normal(size=n_h))

        model = JointFusionRbm(rand(3, 2), rand(3, 2), rand(4, 2))
        states, probs = joint_distribution(model)
        assert len(states) == 2 ** 12
        assert abs(probs.sum() - 1.0) < 1e-10

    def test_enumeration_refuses_large_models(self):
        with pytest.raises(PreconditionError):
            joint_distribution(_zero_model(8, 4, 4))
