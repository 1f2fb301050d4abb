"""Versioned, self-describing checkpoint files.

Layout (all integers little-endian)::

    b"XGCK"                 magic
    uint8                   format version
    uint64                  header length in bytes
    header                  UTF-8 JSON, keys sorted
    data                    raw tensor bytes in header order
    32 bytes                SHA-256 of everything above

The header records the stage tag, the seed, the experiment config, free-form
metadata and, for every tensor, its name, dtype, shape, byte offset and
attributes.  Writing the same checkpoint twice gives identical bytes.
"""

from __future__ import annotations

import hashlib
import json
import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import numpy as np

from crossgrain import settings
from crossgrain.config import ExperimentConfig
from crossgrain.core.corrnet import CorrNet, Pathway
from crossgrain.core.dbn import DbnModel
from crossgrain.core.fusion import JointFusionRbm
from crossgrain.core.layers import Activation, DenseLayer, Mlp
from crossgrain.core.modality import Modality
from crossgrain.core.multitask import StageTwoModel
from crossgrain.core.rbm import RbmParams, VisibleKind
from crossgrain.errors import CorruptCheckpointError, UnsupportedVersionError

logger = logging.getLogger(__name__)

_PREFIX = struct.Struct("<4sBQ")
_DIGEST_SIZE = hashlib.sha256().digest_size
_DTYPES = {"f8": np.dtype("<f8"), "i8": np.dtype("<i8")}


@dataclass
class Checkpoint:
    stage: str
    config: ExperimentConfig
    seed: int
    tensors: dict[str, np.ndarray] = field(default_factory=dict)
    attrs: dict[str, dict[str, Any]] = field(default_factory=dict)
    meta: dict[str, Any] = field(default_factory=dict)

    def put(self, name: str, array: np.ndarray, **attrs: Any) -> None:
        self.tensors[name] = np.asarray(array)
        if attrs:
            self.attrs[name] = attrs

    def get(self, name: str) -> np.ndarray:
        try:
            return self.tensors[name]
        except KeyError:
            raise CorruptCheckpointError(f"checkpoint has no tensor {name!r}") from None

    def has(self, name: str) -> bool:
        return name in self.tensors

    def has_prefix(self, prefix: str) -> bool:
        return any(name.startswith(prefix + "/") for name in self.tensors)

    def attr(self, name: str, key: str) -> Any:
        try:
            return self.attrs[name][key]
        except KeyError:
            raise CorruptCheckpointError(f"tensor {name!r} lacks attribute {key!r}") from None


# ---------------------------------------------------------------------------
# Encoding
# ---------------------------------------------------------------------------

def to_bytes(ckpt: Checkpoint) -> bytes:
    entries = []
    chunks: list[bytes] = []
    offset = 0
    for name, array in ckpt.tensors.items():
        code = "i8" if np.issubdtype(array.dtype, np.integer) else "f8"
        raw = np.ascontiguousarray(array, dtype=_DTYPES[code]).tobytes()
        entries.append({
            "name": name,
            "dtype": code,
            "shape": list(array.shape),
            "offset": offset,
            "attrs": ckpt.attrs.get(name, {}),
        })
        chunks.append(raw)
        offset += len(raw)
    header = json.dumps(
        {
            "stage": ckpt.stage,
            "seed": ckpt.seed,
            "config": ckpt.config.model_dump(mode="json"),
            "meta": ckpt.meta,
            "tensors": entries,
        },
        sort_keys=True,
        separators=(",", ":"),
    ).encode("utf-8")
    body = _PREFIX.pack(settings.CHECKPOINT_MAGIC, settings.CHECKPOINT_VERSION, len(header)) + header + b"".join(chunks)
    return body + hashlib.sha256(body).digest()


def from_bytes(blob: bytes) -> Checkpoint:
    """Decode a checkpoint.

    Raises:
        UnsupportedVersionError: if the version byte is not the one this build writes.
        CorruptCheckpointError: on truncation, bad magic or a failed integrity check.
    """
    if len(blob) < _PREFIX.size + _DIGEST_SIZE:
        raise CorruptCheckpointError("checkpoint is truncated")
    magic, version, header_len = _PREFIX.unpack_from(blob)
    if magic != settings.CHECKPOINT_MAGIC:
        raise CorruptCheckpointError("not a crossgrain checkpoint (bad magic)")
    if version != settings.CHECKPOINT_VERSION:
        raise UnsupportedVersionError(version, settings.CHECKPOINT_VERSION)
    body, digest = blob[:-_DIGEST_SIZE], blob[-_DIGEST_SIZE:]
    if hashlib.sha256(body).digest() != digest:
        raise CorruptCheckpointError("checkpoint failed its integrity check (truncated or modified)")

    start = _PREFIX.size
    try:
        header = json.loads(body[start:start + header_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CorruptCheckpointError(f"unreadable checkpoint header: {exc}") from exc
    data = body[start + header_len:]

    ckpt = Checkpoint(
        stage=header["stage"],
        config=ExperimentConfig.model_validate(header["config"]),
        seed=int(header["seed"]),
        meta=header.get("meta", {}),
    )
    for entry in header["tensors"]:
        dtype = _DTYPES[entry["dtype"]]
        shape = tuple(entry["shape"])
        count = int(np.prod(shape, dtype=np.int64))
        begin = entry["offset"]
        end = begin + count * dtype.itemsize
        if end > len(data):
            raise CorruptCheckpointError(f"tensor {entry['name']!r} runs past the end of the data")
        array = np.frombuffer(data[begin:end], dtype=dtype).reshape(shape).astype(dtype.newbyteorder("="))
        ckpt.put(entry["name"], array, **entry["attrs"])
    return ckpt


def save_checkpoint(ckpt: Checkpoint, path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    blob = to_bytes(ckpt)
    path.write_bytes(blob)
    logger.info("saved %s checkpoint (%d tensors, %d bytes) to %s", ckpt.stage, len(ckpt.tensors), len(blob), path)
    return path


def load_checkpoint(path: str | Path) -> Checkpoint:
    path = Path(path)
    ckpt = from_bytes(path.read_bytes())
    logger.info("loaded %s checkpoint from %s", ckpt.stage, path)
    return ckpt


# ---------------------------------------------------------------------------
# Model packing
# ---------------------------------------------------------------------------

def put_rbm(ckpt: Checkpoint, prefix: str, params: RbmParams) -> None:
    ckpt.put(f"{prefix}/W", params.weights, visible_kind=params.visible_kind.value)
    ckpt.put(f"{prefix}/a", params.visible_bias)
    ckpt.put(f"{prefix}/b", params.hidden_bias)


def get_rbm(ckpt: Checkpoint, prefix: str) -> RbmParams:
    return RbmParams(
        visible_bias=ckpt.get(f"{prefix}/a"),
        hidden_bias=ckpt.get(f"{prefix}/b"),
        weights=ckpt.get(f"{prefix}/W"),
        visible_kind=VisibleKind(ckpt.attr(f"{prefix}/W", "visible_kind")),
    )


def put_dbn(ckpt: Checkpoint, prefix: str, model: DbnModel) -> None:
    for i, layer in enumerate(model.layers):
        put_rbm(ckpt, f"{prefix}/{i}", layer)
        ckpt.attrs[f"{prefix}/{i}/W"]["modality"] = model.modality.value


def get_dbn(ckpt: Checkpoint, prefix: str) -> DbnModel:
    layers = []
    while ckpt.has(f"{prefix}/{len(layers)}/W"):
        layers.append(get_rbm(ckpt, f"{prefix}/{len(layers)}"))
    if not layers:
        raise CorruptCheckpointError(f"checkpoint has no DBN at {prefix!r}")
    return DbnModel(layers=layers, modality=Modality(ckpt.attr(f"{prefix}/0/W", "modality")))


def put_dense(ckpt: Checkpoint, prefix: str, layer: DenseLayer) -> None:
    ckpt.put(f"{prefix}/W", layer.weights, activation=layer.activation.value)
    ckpt.put(f"{prefix}/b", layer.bias)


def get_dense(ckpt: Checkpoint, prefix: str) -> DenseLayer:
    return DenseLayer(
        weights=ckpt.get(f"{prefix}/W"),
        bias=ckpt.get(f"{prefix}/b"),
        activation=Activation(ckpt.attr(f"{prefix}/W", "activation")),
    )


def put_mlp(ckpt: Checkpoint, prefix: str, mlp: Mlp) -> None:
    for i, layer in enumerate(mlp.layers):
        put_dense(ckpt, f"{prefix}/{i}", layer)


def get_mlp(ckpt: Checkpoint, prefix: str) -> Mlp:
    layers = []
    while ckpt.has(f"{prefix}/{len(layers)}/W"):
        layers.append(get_dense(ckpt, f"{prefix}/{len(layers)}"))
    if not layers:
        raise CorruptCheckpointError(f"checkpoint has no network at {prefix!r}")
    return Mlp(layers)


def put_corrnet(ckpt: Checkpoint, prefix: str, net: CorrNet) -> None:
    for side, path in (("image", net.image), ("text", net.text)):
        put_mlp(ckpt, f"{prefix}/{side}/encoder", path.encoder)
        put_mlp(ckpt, f"{prefix}/{side}/decoder", path.decoder)


def get_corrnet(ckpt: Checkpoint, prefix: str) -> CorrNet:
    return CorrNet(
        image=Pathway(get_mlp(ckpt, f"{prefix}/image/encoder"), get_mlp(ckpt, f"{prefix}/image/decoder")),
        text=Pathway(get_mlp(ckpt, f"{prefix}/text/encoder"), get_mlp(ckpt, f"{prefix}/text/decoder")),
    )


def put_fusion(ckpt: Checkpoint, prefix: str, model: JointFusionRbm) -> None:
    put_rbm(ckpt, f"{prefix}/a", model.pathway_a)
    put_rbm(ckpt, f"{prefix}/b", model.pathway_b)
    put_rbm(ckpt, f"{prefix}/top", model.top)


def get_fusion(ckpt: Checkpoint, prefix: str) -> JointFusionRbm:
    return JointFusionRbm(
        get_rbm(ckpt, f"{prefix}/a"), get_rbm(ckpt, f"{prefix}/b"), get_rbm(ckpt, f"{prefix}/top")
    )


def put_stage_two(ckpt: Checkpoint, prefix: str, model: StageTwoModel) -> None:
    put_mlp(ckpt, f"{prefix}/f", model.f)
    put_mlp(ckpt, f"{prefix}/g", model.g)
    ckpt.put(f"{prefix}/margin", np.array([model.alpha, model.lam]))
    if model.head_image is not None and model.head_text is not None and model.classes is not None:
        put_dense(ckpt, f"{prefix}/head_image", model.head_image)
        put_dense(ckpt, f"{prefix}/head_text", model.head_text)
        ckpt.put(f"{prefix}/classes", model.classes.astype(np.int64))


def get_stage_two(ckpt: Checkpoint, prefix: str) -> StageTwoModel:
    alpha, lam = (float(v) for v in ckpt.get(f"{prefix}/margin"))
    heads = ckpt.has(f"{prefix}/classes")
    return StageTwoModel(
        f=get_mlp(ckpt, f"{prefix}/f"),
        g=get_mlp(ckpt, f"{prefix}/g"),
        alpha=alpha,
        lam=lam,
        head_image=get_dense(ckpt, f"{prefix}/head_image") if heads else None,
        head_text=get_dense(ckpt, f"{prefix}/head_text") if heads else None,
        classes=ckpt.get(f"{prefix}/classes") if heads else None,
    )
