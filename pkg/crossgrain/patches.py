"""Rules for cutting instances into patches before feature extraction.

Images keep at most the ten largest region proposals, dropping any box that
overlaps an already kept larger box too much.  Text with tags is split into
four alphabetical tag groups; free text is split into paragraphs or
sentences, and every piece becomes a word-count row over a fixed
vocabulary.
"""

from __future__ import annotations

import re
from collections import Counter
from collections.abc import Iterable, Sequence
from dataclasses import dataclass

import numpy as np

from crossgrain import settings
from crossgrain.core.modality import Modality
from crossgrain.errors import DomainError, UsageError

Box = tuple[float, float, float, float]

_PARAGRAPH_BREAK = re.compile(r"\n\s*\n")
_SENTENCE_END = re.compile(r"(?<=[.!?])\s+")
_TOKEN = re.compile(r"[a-z0-9']+")


def patch_cap(modality: Modality | str, style: str = "tags") -> int | None:
    """Maximum patches per instance, or None when unlimited."""
    if Modality.parse(modality) is Modality.IMAGE:
        return settings.MAX_IMAGE_PATCHES
    if style == "tags":
        return settings.MAX_TAG_PATCHES
    if style in ("paragraphs", "sentences"):
        return None
    raise UsageError(f"unknown text patch style {style!r}")


# ---------------------------------------------------------------------------
# Text
# ---------------------------------------------------------------------------

def group_tags(tags: Iterable[str], n_patches: int = settings.MAX_TAG_PATCHES) -> list[list[str]]:
    """Sort tags alphabetically and cut them into *n_patches* contiguous groups.

    With fewer tags than groups every tag becomes its own patch.  Earlier
    groups take one extra tag when the count does not divide evenly.
    """
    ordered = sorted(tags)
    if not ordered:
        raise DomainError("cannot build patches from an empty tag list")
    if n_patches < 1:
        raise DomainError(f"patch count must be positive, got {n_patches}")
    if len(ordered) <= n_patches:
        return [[tag] for tag in ordered]
    base, extra = divmod(len(ordered), n_patches)
    groups: list[list[str]] = []
    start = 0
    for i in range(n_patches):
        size = base + (1 if i < extra else 0)
        groups.append(ordered[start:start + size])
        start += size
    return groups


def split_paragraphs(text: str) -> list[str]:
    return [p.strip() for p in _PARAGRAPH_BREAK.split(text) if p.strip()]


def split_sentences(text: str) -> list[str]:
    return [s.strip() for s in _SENTENCE_END.split(text.strip()) if s.strip()]


def tokenize(text: str) -> list[str]:
    return _TOKEN.findall(text.lower())


@dataclass(frozen=True)
class Vocabulary:
    """Word list used to turn token streams into count vectors."""

    words: tuple[str, ...]

    @classmethod
    def build(cls, documents: Iterable[Sequence[str]], max_size: int | None = None) -> Vocabulary:
        """Most frequent words first, ties alphabetical."""
        counts: Counter[str] = Counter()
        for doc in documents:
            counts.update(doc)
        ranked = sorted(counts.items(), key=lambda item: (-item[1], item[0]))
        if max_size is not None:
            ranked = ranked[:max_size]
        return cls(tuple(word for word, _ in ranked))

    def __len__(self) -> int:
        return len(self.words)

    def counts(self, tokens: Iterable[str]) -> np.ndarray:
        """Bag-of-words vector; out-of-vocabulary tokens are ignored."""
        index = {word: i for i, word in enumerate(self.words)}
        vec = np.zeros(len(self.words))
        for token in tokens:
            i = index.get(token)
            if i is not None:
                vec[i] += 1.0
        return vec


def tag_patches(tags: Iterable[str], vocabulary: Vocabulary, n_patches: int = settings.MAX_TAG_PATCHES) -> np.ndarray:
    """One count row per tag group; a tag listed twice counts twice."""
    return np.vstack([vocabulary.counts(group) for group in group_tags(tags, n_patches)])


def text_patches(text: str, style: str, vocabulary: Vocabulary) -> np.ndarray:
    """Count rows of the paragraphs or sentences of *text*.

    Raises:
        UsageError: for any other style; tags go through :func:`tag_patches`.
    """
    if style == "paragraphs":
        pieces = split_paragraphs(text)
    elif style == "sentences":
        pieces = split_sentences(text)
    else:
        raise UsageError(f"text patch style {style!r} does not split free text")
    if not pieces:
        return np.zeros((0, len(vocabulary)))
    return np.vstack([vocabulary.counts(tokenize(piece)) for piece in pieces])


# ---------------------------------------------------------------------------
# Images
# ---------------------------------------------------------------------------

def box_area(box: Box) -> float:
    x0, y0, x1, y1 = box
    return max(0.0, x1 - x0) * max(0.0, y1 - y0)


def box_iou(a: Box, b: Box) -> float:
    ix0, iy0 = max(a[0], b[0]), max(a[1], b[1])
    ix1, iy1 = min(a[2], b[2]), min(a[3], b[3])
    inter = box_area((ix0, iy0, ix1, iy1))
    union = box_area(a) + box_area(b) - inter
    return inter / union if union > 0 else 0.0


def select_image_patches(
    boxes: Sequence[Box],
    iou_threshold: float = settings.PATCH_IOU_THRESHOLD,
    max_patches: int = settings.MAX_IMAGE_PATCHES,
) -> list[int]:
    """Indices of the kept boxes, largest first.

    Boxes are ``(x0, y0, x1, y1)``.  A box overlapping a larger kept box with
    IoU above *iou_threshold* is dropped.
    """
    order = sorted(range(len(boxes)), key=lambda i: (-box_area(boxes[i]), i))
    kept: list[int] = []
    for i in order:
        if len(kept) == max_patches:
            break
        if all(box_iou(boxes[i], boxes[j]) <= iou_threshold for j in kept):
            kept.append(i)
    return kept
