"""Tests for the checkpoint file format and model packing."""

from __future__ import annotations

import struct

import numpy as np
import pytest

from crossgrain.checkpoint import (
    Checkpoint,
    from_bytes,
    get_corrnet,
    get_dbn,
    get_rbm,
    get_stage_two,
    load_checkpoint,
    put_corrnet,
    put_dbn,
    put_rbm,
    put_stage_two,
    save_checkpoint,
    to_bytes,
)
from crossgrain.config import CdConfig, CorrNetConfig, StageTwoConfig
from crossgrain.core.corrnet import build_corrnet, corrnet_encode
from crossgrain.core.dbn import train_dbn
from crossgrain.core.multitask import build_stage_two, encode_common
from crossgrain.core.numeric import SeededRng
from crossgrain.core.rbm import VisibleKind, init_rbm
from crossgrain.errors import CorruptCheckpointError, UnsupportedVersionError


@pytest.fixture
def ckpt(config) -> Checkpoint:
    c = Checkpoint(stage="stage1", config=config, seed=config.seed, meta={"dataset": "toy", "phases": []})
    c.put("x/W", np.arange(6, dtype=float).reshape(2, 3), note="hello")
    c.put("x/ids", np.array([3, 1, 2]))
    c.put("x/empty", np.zeros((0, 4)))
    return c


class TestFormat:
    def test_roundtrip(self, ckpt):
        back = from_bytes(to_bytes(ckpt))
        assert back.stage == "stage1"
        assert back.seed == ckpt.seed
        assert back.config == ckpt.config
        assert back.meta == ckpt.meta
        assert back.get("x/W").tobytes() == ckpt.get("x/W").tobytes()
        assert back.get("x/ids").dtype == np.int64
        assert back.get("x/empty").shape == (0, 4)
        assert back.attr("x/W", "note") == "hello"

    def test_same_checkpoint_same_bytes(self, ckpt):
        assert to_bytes(ckpt) == to_bytes(ckpt)
        assert to_bytes(from_bytes(to_bytes(ckpt))) == to_bytes(ckpt)

    def test_file_layout(self, ckpt):
        blob = to_bytes(ckpt)
        magic, version, header_len = struct.unpack_from("<4sBQ", blob)
        assert magic == b"XGCK"
        assert version == 1
        assert blob[13:13 + header_len].startswith(b"{")

    def test_bumped_version_rejected(self, ckpt):
        blob = bytearray(to_bytes(ckpt))
        blob[4] += 1
        with pytest.raises(UnsupportedVersionError) as info:
            from_bytes(bytes(blob))
        assert info.value.found == 2

    def test_truncated(self, ckpt):
        blob = to_bytes(ckpt)
        with pytest.raises(CorruptCheckpointError):
            from_bytes(blob[:-10])
        with pytest.raises(CorruptCheckpointError):
            from_bytes(blob[:8])

    def test_flipped_byte(self, ckpt):
        blob = bytearray(to_bytes(ckpt))
        blob[-40] ^= 0xFF
        with pytest.raises(CorruptCheckpointError):
            from_bytes(bytes(blob))

    def test_bad_magic(self, ckpt):
        blob = b"NOPE" + to_bytes(ckpt)[4:]
        with pytest.raises(CorruptCheckpointError):
            from_bytes(blob)

    def test_missing_tensor(self, ckpt):
        with pytest.raises(CorruptCheckpointError):
            ckpt.get("nope")

    def test_save_and_load(self, ckpt, tmp_path):
        path = save_checkpoint(ckpt, tmp_path / "nested" / "c.ckpt")
        assert path.read_bytes() == to_bytes(ckpt)
        assert load_checkpoint(path).has_prefix("x")


class TestModelPacking:
    def test_rbm(self, ckpt):
        params = init_rbm(4, 3, VisibleKind.REPLICATED_SOFTMAX, SeededRng(0))
        put_rbm(ckpt, "r", params)
        back = get_rbm(from_bytes(to_bytes(ckpt)), "r")
        assert back.visible_kind is VisibleKind.REPLICATED_SOFTMAX
        assert back.weights.tobytes() == params.weights.tobytes()

    def test_dbn(self, ckpt, toy_patterns):
        model = train_dbn(toy_patterns, [4, 3], CdConfig(epochs=2), SeededRng(0), modality="text")
        put_dbn(ckpt, "dbn", model)
        back = get_dbn(from_bytes(to_bytes(ckpt)), "dbn")
        assert back.modality.value == "text"
        assert [layer.weights.shape for layer in back.layers] == [(16, 4), (4, 3)]

    def test_corrnet_encodes_identically(self, ckpt):
        net = build_corrnet(5, 6, CorrNetConfig(hidden_dims=[4], code_dim=3), SeededRng(0))
        put_corrnet(ckpt, "cn", net)
        back = get_corrnet(from_bytes(to_bytes(ckpt)), "cn")
        x = SeededRng(1).normal(size=(2, 5))
        assert corrnet_encode(back, x, "image").tobytes() == corrnet_encode(net, x, "image").tobytes()

    def test_stage_two_with_heads(self, ckpt):
        model = build_stage_two(4, 5, StageTwoConfig(layer_dims=[3, 2], alpha=1.5, lam=0.2), SeededRng(0), classes=[4, 7])
        put_stage_two(ckpt, "s2", model)
        back = get_stage_two(from_bytes(to_bytes(ckpt)), "s2")
        assert (back.alpha, back.lam) == (1.5, 0.2)
        np.testing.assert_array_equal(back.classes, [4, 7])
        s = SeededRng(2).normal(size=(3, 5))
        assert encode_common(back, s, "text").tobytes() == encode_common(model, s, "text").tobytes()

    def test_stage_two_without_heads(self, ckpt):
        model = build_stage_two(4, 5, StageTwoConfig(layer_dims=[3]), SeededRng(0))
        put_stage_two(ckpt, "s2", model)
        assert not get_stage_two(from_bytes(to_bytes(ckpt)), "s2").has_heads

    def test_missing_dbn(self, ckpt):
        with pytest.raises(CorruptCheckpointError):
            get_dbn(ckpt, "absent")
