"""On-disk dataset format, ingestion and the in-memory dataset.

A dataset directory holds plain-text files described by a manifest:

* feature files: first line ``<rows> <cols>``, then one row of
  space-separated decimals per instance;
* labels: one integer per line;
* patch files: per instance a line ``<instance_id> <patch_count>`` followed
  by that many feature rows;
* split file: lines ``<instance_id> train|val|test``.  Its order defines the
  instance ids of the feature rows (row ``i`` belongs to line ``i``).
"""

from __future__ import annotations

import logging
from collections.abc import Iterator
from dataclasses import dataclass, field, replace
from enum import Enum
from pathlib import Path

import numpy as np
import numpy.typing as npt

from crossgrain.config import DatasetManifest, load_manifest
from crossgrain.core.fusion import PatchGroup
from crossgrain.core.modality import Modality
from crossgrain.core.numeric import FeatureMatrix
from crossgrain.errors import DataValidationError, FormatError
from crossgrain.patches import patch_cap

logger = logging.getLogger(__name__)

MANIFEST_FILE = "manifest.txt"


class Split(str, Enum):
    TRAIN = "train"
    VAL = "val"
    TEST = "test"


# ---------------------------------------------------------------------------
# Readers
# ---------------------------------------------------------------------------

def _lines(path: Path) -> Iterator[tuple[int, str]]:
    with path.open(encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            yield lineno, line.strip()


def _parse_row(text: str, width: int, *, path: Path, line: int) -> list[float]:
    parts = text.split()
    if len(parts) != width:
        raise FormatError(f"expected {width} values, found {len(parts)}", path=str(path), line=line)
    try:
        return [float(p) for p in parts]
    except ValueError:
        raise FormatError(f"non-numeric value in {text[:40]!r}", path=str(path), line=line) from None


def _parse_ints(text: str, count: int, *, path: Path, line: int, what: str) -> list[int]:
    parts = text.split()
    if len(parts) != count:
        raise FormatError(f"expected {what}", path=str(path), line=line)
    try:
        return [int(p) for p in parts]
    except ValueError:
        raise FormatError(f"expected {what}, got {text!r}", path=str(path), line=line) from None


def read_feature_file(path: str | Path, *, expected_cols: int | None = None) -> FeatureMatrix:
    """Read a ``<rows> <cols>`` feature file.

    Raises:
        FormatError: with the offending line number.
    """
    path = Path(path)
    rows: list[list[float]] = []
    n_rows = n_cols = -1
    for lineno, text in _lines(path):
        if lineno == 1:
            n_rows, n_cols = _parse_ints(text, 2, path=path, line=1, what="header '<rows> <cols>'")
            if expected_cols is not None and n_cols != expected_cols:
                raise FormatError(
                    f"header declares {n_cols} columns but the manifest says {expected_cols}",
                    path=str(path), line=1,
                )
            continue
        if not text:
            continue
        if len(rows) == n_rows:
            raise FormatError(f"more than the {n_rows} declared rows", path=str(path), line=lineno)
        rows.append(_parse_row(text, n_cols, path=path, line=lineno))
    if n_rows < 0:
        raise FormatError("empty feature file", path=str(path), line=1)
    if len(rows) != n_rows:
        raise FormatError(
            f"header declares {n_rows} rows, found {len(rows)}", path=str(path), line=len(rows) + 2
        )
    return np.asarray(rows, dtype=np.float64).reshape(n_rows, n_cols)


def read_labels(path: str | Path, *, expected: int | None = None) -> npt.NDArray[np.int64]:
    path = Path(path)
    labels: list[int] = []
    for lineno, text in _lines(path):
        if text:
            labels.extend(_parse_ints(text, 1, path=path, line=lineno, what="one integer label"))
    if expected is not None and len(labels) != expected:
        raise FormatError(f"{len(labels)} labels for {expected} instances", path=str(path))
    logger.debug("read %d labels from %s", len(labels), path)
    return np.asarray(labels, dtype=np.int64)


def read_patch_file(path: str | Path, width: int) -> dict[str, FeatureMatrix]:
    """Read patch groups keyed by instance id (caps are checked by :func:`ingest`)."""
    path = Path(path)
    groups: dict[str, FeatureMatrix] = {}
    current: str | None = None
    pending = 0
    rows: list[list[float]] = []
    last_line = 0
    for lineno, text in _lines(path):
        last_line = lineno
        if not text:
            continue
        if pending == 0:
            parts = text.split()
            if len(parts) != 2:
                raise FormatError("expected '<instance_id> <patch_count>'", path=str(path), line=lineno)
            current = parts[0]
            if current in groups:
                raise FormatError(f"instance {current!r} listed twice", path=str(path), line=lineno)
            try:
                pending = int(parts[1])
            except ValueError:
                raise FormatError(f"bad patch count {parts[1]!r}", path=str(path), line=lineno) from None
            if pending < 0:
                raise FormatError("patch count must be non-negative", path=str(path), line=lineno)
            rows = []
            if pending == 0:
                groups[current] = np.zeros((0, width))
            continue
        rows.append(_parse_row(text, width, path=path, line=lineno))
        pending -= 1
        if pending == 0:
            assert current is not None
            groups[current] = np.asarray(rows, dtype=np.float64)
    if pending:
        raise FormatError(
            f"instance {current!r} is missing {pending} patch row(s)", path=str(path), line=last_line + 1
        )
    return groups


def read_split_file(path: str | Path) -> tuple[list[str], list[Split]]:
    path = Path(path)
    ids: list[str] = []
    splits: list[Split] = []
    seen: set[str] = set()
    for lineno, text in _lines(path):
        if not text:
            continue
        parts = text.split()
        if len(parts) != 2:
            raise FormatError("expected '<instance_id> train|val|test'", path=str(path), line=lineno)
        instance_id, split = parts
        if instance_id in seen:
            raise FormatError(f"instance {instance_id!r} assigned twice", path=str(path), line=lineno)
        try:
            splits.append(Split(split))
        except ValueError:
            raise FormatError(f"unknown split {split!r}", path=str(path), line=lineno) from None
        seen.add(instance_id)
        ids.append(instance_id)
    return ids, splits


# ---------------------------------------------------------------------------
# Dataset
# ---------------------------------------------------------------------------

@dataclass
class CrossModalDataset:
    """Row-aligned image and text features of paired instances.

    Labels are loaded from ``label_path`` on first access, so code paths that
    never look at labels never open the file.
    """

    ids: list[str]
    image: FeatureMatrix
    text: FeatureMatrix
    splits: list[Split]
    name: str = "dataset"
    image_patches: dict[str, PatchGroup] = field(default_factory=dict)
    text_patches: dict[str, PatchGroup] = field(default_factory=dict)
    text_patch_style: str = "tags"
    label_path: Path | None = None
    standardized: bool = False
    _labels: npt.NDArray[np.int64] | None = None

    def __post_init__(self) -> None:
        n = len(self.ids)
        if self.image.shape[0] != n or self.text.shape[0] != n or len(self.splits) != n:
            raise DataValidationError(
                f"{n} ids, {self.image.shape[0]} image rows, {self.text.shape[0]} text rows, "
                f"{len(self.splits)} split entries"
            )

    def __len__(self) -> int:
        return len(self.ids)

    @property
    def image_dim(self) -> int:
        return self.image.shape[1]

    @property
    def text_dim(self) -> int:
        return self.text.shape[1]

    @property
    def has_labels(self) -> bool:
        return self._labels is not None or self.label_path is not None

    @property
    def labels(self) -> npt.NDArray[np.int64] | None:
        if self._labels is None and self.label_path is not None:
            self._labels = read_labels(self.label_path, expected=len(self))
        return self._labels

    @property
    def has_patches(self) -> bool:
        return bool(self.image_patches) or bool(self.text_patches)

    def split_index(self, split: Split | str) -> npt.NDArray[np.int64]:
        split = Split(split)
        return np.array([i for i, s in enumerate(self.splits) if s is split], dtype=np.int64)

    def split_ids(self, split: Split | str) -> list[str]:
        return [self.ids[i] for i in self.split_index(split)]

    def features(self, modality: Modality | str, split: Split | str) -> FeatureMatrix:
        matrix = self.image if Modality.parse(modality) is Modality.IMAGE else self.text
        return matrix[self.split_index(split)]

    def labels_for(self, split: Split | str) -> npt.NDArray[np.int64] | None:
        labels = self.labels
        return None if labels is None else labels[self.split_index(split)]

    def patch_groups(
        self, modality: Modality | str, split: Split | str, *, fallback: bool = True
    ) -> list[PatchGroup]:
        """Patch groups for every instance of *split*, in row order.

        An instance without patches gets its own features as its only patch,
        or an empty group when *fallback* is off.
        """
        modality = Modality.parse(modality)
        table = self.image_patches if modality is Modality.IMAGE else self.text_patches
        matrix = self.image if modality is Modality.IMAGE else self.text
        groups: list[PatchGroup] = []
        missing = 0
        for i in self.split_index(split):
            group = table.get(self.ids[i])
            if group is None or group.patch_count == 0:
                missing += 1
                rows = matrix[i:i + 1].copy() if fallback else np.zeros((0, matrix.shape[1]))
                group = PatchGroup(self.ids[i], rows)
            groups.append(group)
        if missing:
            logger.warning(
                "%d %s instance(s) in %s have no patches; %s",
                missing, modality.value, Split(split).value,
                "using the whole instance instead" if fallback else "their patch view is their instance view",
            )
        return groups

    def has_train_patches(self, modality: Modality | str) -> bool:
        table = self.image_patches if Modality.parse(modality) is Modality.IMAGE else self.text_patches
        return any(table.get(key) is not None and table[key].patch_count for key in self.split_ids(Split.TRAIN))

    def standardize(self) -> CrossModalDataset:
        """Z-score image features and image patches with train-split statistics.

        Text stays as raw counts.  Calling this twice is a no-op.
        """
        if self.standardized:
            return self
        train = self.split_index(Split.TRAIN)
        if train.size == 0:
            raise DataValidationError("the train split is empty")
        mean, std = _moments(self.image[train])
        image = (self.image - mean) / std
        patches = self.image_patches
        train_ids = {self.ids[i] for i in train}
        train_rows = [g.patch_features for key, g in patches.items() if key in train_ids and g.patch_count]
        if train_rows:
            p_mean, p_std = _moments(np.vstack(train_rows))
            patches = {
                key: replace(g, patch_features=(g.patch_features - p_mean) / p_std)
                for key, g in patches.items()
            }
        return replace(self, image=image, image_patches=patches, standardized=True)


def _moments(x: FeatureMatrix) -> tuple[np.ndarray, np.ndarray]:
    mean = x.mean(axis=0)
    std = x.std(axis=0)
    return mean, np.where(std > 0, std, 1.0)


# ---------------------------------------------------------------------------
# Ingestion
# ---------------------------------------------------------------------------

def _patch_table(
    path: Path | None, width: int, cap: int | None, known: set[str], modality: Modality
) -> dict[str, PatchGroup]:
    if path is None:
        return {}
    table: dict[str, PatchGroup] = {}
    for instance_id, rows in read_patch_file(path, width).items():
        if instance_id not in known:
            raise DataValidationError(f"{modality.value} patches for unknown instance {instance_id!r}")
        table[instance_id] = PatchGroup(instance_id, rows, cap=cap)
    return table


def ingest(manifest: DatasetManifest | str | Path) -> CrossModalDataset:
    """Load, check and standardise the dataset a manifest describes.

    Raises:
        FormatError: for malformed files, with the line number.
        DataValidationError: when a patch group exceeds its cap.
    """
    if not isinstance(manifest, DatasetManifest):
        manifest = load_manifest(manifest)
    ids, splits = read_split_file(manifest.splits)
    image = read_feature_file(manifest.image_features, expected_cols=manifest.image_dim)
    text = read_feature_file(manifest.text_features, expected_cols=manifest.text_dim)
    if image.shape[0] != len(ids) or text.shape[0] != len(ids):
        raise FormatError(
            f"split file lists {len(ids)} instances but feature files hold "
            f"{image.shape[0]} image and {text.shape[0]} text rows",
            path=str(manifest.splits),
        )
    if np.any(text < 0):
        raise DataValidationError("text features must be non-negative word counts")

    known = set(ids)
    dataset = CrossModalDataset(
        ids=ids,
        image=image,
        text=text,
        splits=splits,
        name=manifest.name,
        image_patches=_patch_table(
            manifest.image_patches, manifest.image_dim, patch_cap(Modality.IMAGE), known, Modality.IMAGE
        ),
        text_patches=_patch_table(
            manifest.text_patches, manifest.text_dim,
            patch_cap(Modality.TEXT, manifest.text_patch_style), known, Modality.TEXT,
        ),
        text_patch_style=manifest.text_patch_style,
        label_path=manifest.labels,
    )
    logger.info(
        "ingested %s: %d instances (%d train / %d val / %d test), image %d, text %d",
        dataset.name, len(dataset),
        len(dataset.split_index(Split.TRAIN)), len(dataset.split_index(Split.VAL)),
        len(dataset.split_index(Split.TEST)), dataset.image_dim, dataset.text_dim,
    )
    return dataset.standardize()


# ---------------------------------------------------------------------------
# Writers
# ---------------------------------------------------------------------------

def _format_row(row: np.ndarray) -> str:
    return " ".join(repr(float(v)) for v in row)


def write_feature_file(matrix: FeatureMatrix, path: str | Path) -> Path:
    path = Path(path)
    with path.open("w", encoding="utf-8") as fh:
        fh.write(f"{matrix.shape[0]} {matrix.shape[1]}\n")
        for row in matrix:
            fh.write(_format_row(row) + "\n")
    return path


def write_patch_file(groups: dict[str, PatchGroup], ids: list[str], path: str | Path) -> Path:
    path = Path(path)
    with path.open("w", encoding="utf-8") as fh:
        for instance_id in ids:
            group = groups.get(instance_id)
            if group is None:
                continue
            fh.write(f"{instance_id} {group.patch_count}\n")
            for row in group.patch_features:
                fh.write(_format_row(row) + "\n")
    return path


def write_dataset(dataset: CrossModalDataset, out_dir: str | Path) -> Path:
    """Write *dataset* in the ingest format and return the manifest path."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_feature_file(dataset.image, out / "image_features.txt")
    write_feature_file(dataset.text, out / "text_features.txt")
    (out / "splits.txt").write_text(
        "".join(f"{i} {s.value}\n" for i, s in zip(dataset.ids, dataset.splits)), encoding="utf-8"
    )
    entries: dict[str, object] = {
        "name": dataset.name,
        "image_features": "image_features.txt",
        "text_features": "text_features.txt",
        "splits": "splits.txt",
        "image_dim": dataset.image_dim,
        "text_dim": dataset.text_dim,
        "text_patch_style": dataset.text_patch_style,
    }
    labels = dataset.labels
    if labels is not None:
        (out / "labels.txt").write_text("".join(f"{int(v)}\n" for v in labels), encoding="utf-8")
        entries["labels"] = "labels.txt"
    if dataset.image_patches:
        write_patch_file(dataset.image_patches, dataset.ids, out / "image_patches.txt")
        entries["image_patches"] = "image_patches.txt"
    if dataset.text_patches:
        write_patch_file(dataset.text_patches, dataset.ids, out / "text_patches.txt")
        entries["text_patches"] = "text_patches.txt"

    manifest_path = out / MANIFEST_FILE
    # File paths are relative to the manifest directory
    manifest_path.write_text("".join(f"{k} = {v}\n" for k, v in entries.items()), encoding="utf-8")
    logger.info("wrote dataset %s (%d instances) to %s", dataset.name, len(dataset), out)
    return manifest_path
