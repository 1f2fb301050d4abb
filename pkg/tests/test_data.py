"""Tests for the on-disk dataset format and the in-memory dataset."""

from __future__ import annotations

import logging
from pathlib import Path
from unittest.mock import patch

import numpy as np
import pytest

from crossgrain.core.fusion import PatchGroup
from crossgrain.data import (
    CrossModalDataset,
    Split,
    ingest,
    read_feature_file,
    read_labels,
    read_patch_file,
    read_split_file,
    write_dataset,
)
from crossgrain.errors import ConfigurationError, DataValidationError, FormatError


def _write(path: Path, text: str) -> Path:
    path.write_text(text, encoding="utf-8")
    return path


def _tiny_dataset(tmp_path: Path, *, image_patches: str | None = None, text_patches: str | None = None,
                  text_style: str = "tags", labels: bool = True) -> Path:
    _write(tmp_path / "img.txt", "3 2\n1 2\n3 4\n5 9\n")
    _write(tmp_path / "txt.txt", "3 3\n1 0 2\n0 3 0\n1 1 1\n")
    _write(tmp_path / "splits.txt", "a train\nb train\nc test\n")
    lines = [
        "name = tiny", "image_features = img.txt", "text_features = txt.txt",
        "splits = splits.txt", "image_dim = 2", "text_dim = 3", f"text_patch_style = {text_style}",
    ]
    if labels:
        _write(tmp_path / "labels.txt", "0\n1\n0\n")
        lines.append("labels = labels.txt")
    if image_patches is not None:
        _write(tmp_path / "ip.txt", image_patches)
        lines.append("image_patches = ip.txt")
    if text_patches is not None:
        _write(tmp_path / "tp.txt", text_patches)
        lines.append("text_patches = tp.txt")
    return _write(tmp_path / "manifest.txt", "\n".join(lines) + "\n")


class TestFeatureFile:
    def test_reads_matrix(self, tmp_path):
        m = read_feature_file(_write(tmp_path / "f.txt", "2 3\n1 2 3\n\n4 5 6\n"))
        np.testing.assert_array_equal(m, [[1, 2, 3], [4, 5, 6]])

    def test_missing_row_reports_next_line(self, tmp_path):
        path = _write(tmp_path / "f.txt", "2 3\n1 2 3\n")
        with pytest.raises(FormatError) as info:
            read_feature_file(path)
        assert info.value.line == 3
        assert str(info.value).startswith(f"{path}:3:")

    def test_wrong_width(self, tmp_path):
        with pytest.raises(FormatError) as info:
            read_feature_file(_write(tmp_path / "f.txt", "2 3\n1 2 3\n4 5\n"))
        assert info.value.line == 3

    def test_non_numeric(self, tmp_path):
        with pytest.raises(FormatError) as info:
            read_feature_file(_write(tmp_path / "f.txt", "1 2\n1 x\n"))
        assert info.value.line == 2

    def test_too_many_rows(self, tmp_path):
        with pytest.raises(FormatError) as info:
            read_feature_file(_write(tmp_path / "f.txt", "1 1\n1\n2\n"))
        assert info.value.line == 3

    def test_header_disagrees_with_manifest(self, tmp_path):
        with pytest.raises(FormatError) as info:
            read_feature_file(_write(tmp_path / "f.txt", "1 2\n1 2\n"), expected_cols=3)
        assert info.value.line == 1

    def test_bad_header(self, tmp_path):
        with pytest.raises(FormatError):
            read_feature_file(_write(tmp_path / "f.txt", "two 3\n"))


class TestOtherReaders:
    def test_labels(self, tmp_path):
        labels = read_labels(_write(tmp_path / "l.txt", "3\n1\n\n2\n"))
        np.testing.assert_array_equal(labels, [3, 1, 2])

    def test_label_count_checked(self, tmp_path):
        with pytest.raises(FormatError):
            read_labels(_write(tmp_path / "l.txt", "3\n1\n"), expected=3)

    def test_non_integer_label(self, tmp_path):
        with pytest.raises(FormatError) as info:
            read_labels(_write(tmp_path / "l.txt", "3\ncat\n"))
        assert info.value.line == 2

    def test_patch_file(self, tmp_path):
        groups = read_patch_file(_write(tmp_path / "p.txt", "a 2\n1 2\n3 4\nb 0\nc 1\n5 6\n"), 2)
        assert list(groups) == ["a", "b", "c"]
        assert groups["a"].shape == (2, 2)
        assert groups["b"].shape == (0, 2)

    def test_patch_file_truncated(self, tmp_path):
        with pytest.raises(FormatError) as info:
            read_patch_file(_write(tmp_path / "p.txt", "a 3\n1 2\n3 4\n"), 2)
        assert info.value.line == 4

    def test_patch_file_duplicate_instance(self, tmp_path):
        with pytest.raises(FormatError):
            read_patch_file(_write(tmp_path / "p.txt", "a 1\n1 2\na 1\n3 4\n"), 2)

    def test_split_file(self, tmp_path):
        ids, splits = read_split_file(_write(tmp_path / "s.txt", "x train\ny val\nz test\n"))
        assert ids == ["x", "y", "z"]
        assert splits == [Split.TRAIN, Split.VAL, Split.TEST]

    def test_unknown_split(self, tmp_path):
        with pytest.raises(FormatError) as info:
            read_split_file(_write(tmp_path / "s.txt", "x train\ny dev\n"))
        assert info.value.line == 2


class TestIngest:
    def test_basic(self, tmp_path):
        dataset = ingest(_tiny_dataset(tmp_path))
        assert dataset.name == "tiny"
        assert dataset.ids == ["a", "b", "c"]
        assert (dataset.image_dim, dataset.text_dim) == (2, 3)
        assert dataset.split_ids("test") == ["c"]
        np.testing.assert_array_equal(dataset.labels, [0, 1, 0])

    def test_image_patch_cap(self, tmp_path):
        rows = "".join(f"{i} {i}\n" for i in range(11))
        with pytest.raises(DataValidationError) as info:
            ingest(_tiny_dataset(tmp_path, image_patches=f"a 11\n{rows}"))
        assert info.value.cap == 10

    def test_tag_patch_cap(self, tmp_path):
        rows = "1 0 0\n" * 5
        with pytest.raises(DataValidationError) as info:
            ingest(_tiny_dataset(tmp_path, text_patches=f"a 5\n{rows}"))
        assert info.value.cap == 4

    def test_paragraph_patches_uncapped(self, tmp_path):
        rows = "1 0 0\n" * 5
        dataset = ingest(_tiny_dataset(tmp_path, text_patches=f"a 5\n{rows}", text_style="paragraphs"))
        assert dataset.text_patches["a"].patch_count == 5

    def test_patches_for_unknown_instance(self, tmp_path):
        with pytest.raises(DataValidationError):
            ingest(_tiny_dataset(tmp_path, image_patches="zz 1\n1 2\n"))

    def test_negative_word_counts(self, tmp_path):
        manifest = _tiny_dataset(tmp_path)
        _write(tmp_path / "txt.txt", "3 3\n1 0 2\n0 -3 0\n1 1 1\n")
        with pytest.raises(DataValidationError):
            ingest(manifest)

    def test_split_and_feature_rows_disagree(self, tmp_path):
        manifest = _tiny_dataset(tmp_path)
        _write(tmp_path / "splits.txt", "a train\nb train\n")
        with pytest.raises(FormatError):
            ingest(manifest)

    def test_missing_file(self, tmp_path):
        manifest = _tiny_dataset(tmp_path)
        (tmp_path / "img.txt").unlink()
        with pytest.raises(ConfigurationError):
            ingest(manifest)

    def test_labels_read_lazily(self, tmp_path):
        manifest = _tiny_dataset(tmp_path)
        with patch("crossgrain.data.read_labels", wraps=read_labels) as reader:
            dataset = ingest(manifest)
            assert dataset.has_labels
            reader.assert_not_called()
            assert dataset.labels is not None
            reader.assert_called_once()

    def test_no_labels(self, tmp_path):
        dataset = ingest(_tiny_dataset(tmp_path, labels=False))
        assert not dataset.has_labels
        assert dataset.labels is None
        assert dataset.labels_for("train") is None


class TestStandardize:
    def test_image_zscored_on_train(self, tmp_path):
        dataset = ingest(_tiny_dataset(tmp_path))
        train = dataset.features("image", "train")
        np.testing.assert_allclose(train.mean(axis=0), 0.0, atol=1e-12)
        np.testing.assert_allclose(train.std(axis=0), 1.0, atol=1e-12)
        # test row 5 9 with train means (2, 3) and stds (1, 1)
        np.testing.assert_allclose(dataset.features("image", "test"), [[3.0, 6.0]])

    def test_text_left_as_counts(self, tmp_path):
        dataset = ingest(_tiny_dataset(tmp_path))
        np.testing.assert_array_equal(dataset.text, [[1, 0, 2], [0, 3, 0], [1, 1, 1]])

    def test_idempotent(self, tmp_path):
        dataset = ingest(_tiny_dataset(tmp_path))
        assert dataset.standardized
        assert dataset.standardize() is dataset

    def test_constant_column_kept_finite(self):
        dataset = CrossModalDataset(
            ids=["a", "b"], image=np.array([[1.0, 5.0], [3.0, 5.0]]), text=np.ones((2, 1)),
            splits=[Split.TRAIN, Split.TRAIN],
        ).standardize()
        np.testing.assert_array_equal(dataset.image[:, 1], [0.0, 0.0])

    def test_empty_train_split(self):
        dataset = CrossModalDataset(ids=["a"], image=np.ones((1, 1)), text=np.ones((1, 1)), splits=[Split.TEST])
        with pytest.raises(DataValidationError):
            dataset.standardize()


class TestDataset:
    def test_misaligned_rows(self):
        with pytest.raises(DataValidationError):
            CrossModalDataset(ids=["a", "b"], image=np.ones((2, 1)), text=np.ones((1, 1)), splits=[Split.TRAIN] * 2)

    def test_patchless_instances_fall_back_to_features(self, caplog):
        dataset = CrossModalDataset(
            ids=["a", "b"], image=np.array([[1.0, 2.0], [3.0, 4.0]]), text=np.ones((2, 1)),
            splits=[Split.TRAIN] * 2,
            image_patches={"a": PatchGroup("a", np.zeros((2, 2)))},
        )
        with caplog.at_level(logging.WARNING):
            groups = dataset.patch_groups("image", "train")
        assert groups[0].patch_count == 2
        np.testing.assert_array_equal(groups[1].patch_features, [[3.0, 4.0]])
        assert "have no patches" in caplog.text

    def test_patchless_instances_without_fallback_are_empty(self, caplog):
        dataset = CrossModalDataset(
            ids=["a", "b"], image=np.array([[1.0, 2.0], [3.0, 4.0]]), text=np.ones((2, 1)),
            splits=[Split.TRAIN, Split.TEST],
            image_patches={"b": PatchGroup("b", np.zeros((2, 2)))},
        )
        with caplog.at_level(logging.WARNING):
            groups = dataset.patch_groups("image", "train", fallback=False)
        assert groups[0].patch_features.shape == (0, 2)
        assert "instance view" in caplog.text
        assert not dataset.has_train_patches("image")
        assert not dataset.has_train_patches("text")

    def test_write_then_ingest(self, dataset, tmp_path):
        back = ingest(write_dataset(dataset, tmp_path / "copy"))
        assert back.ids == dataset.ids
        assert back.splits == dataset.splits
        np.testing.assert_array_equal(back.text, dataset.text)
        np.testing.assert_array_equal(back.labels, dataset.labels)
        assert set(back.image_patches) == set(dataset.image_patches)
