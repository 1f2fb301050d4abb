"""Deterministic synthetic cross-modal datasets.

Each class owns a latent prototype.  An instance draws one latent code
around its class prototype and both modalities are rendered from that same
code: image features through a fixed random linear map, text as word counts
sampled from ``softmax(code @ B)``.  Image patches come from perturbed copies
of the instance code, one per region proposal that survives
:func:`~crossgrain.patches.select_image_patches`.  Text patches cut the
instance document itself, by tag group or by sentence or paragraph.
"""

from __future__ import annotations

import logging

import numpy as np

from crossgrain.config import SynthSpec
from crossgrain.core.fusion import PatchGroup
from crossgrain.core.numeric import FeatureMatrix, SeededRng, matmul, softmax
from crossgrain.data import CrossModalDataset, Split
from crossgrain.patches import Box, Vocabulary, select_image_patches, tag_patches, text_patches

logger = logging.getLogger(__name__)


def _render_text(codes: FeatureMatrix, word_map: FeatureMatrix, length: int, rng: SeededRng) -> FeatureMatrix:
    probs = softmax(matmul(codes, word_map))
    return np.vstack([rng.multinomial(length, row) for row in probs])


def _split_plan(spec: SynthSpec, rng: SeededRng) -> list[Split]:
    """Stratified assignment: every class contributes to every split it can."""
    splits: list[Split] = []
    n_test = n_val = 0
    # A class keeps at least one training instance
    if spec.per_class > 1:
        n_test = min(max(1, round(spec.per_class * spec.test_fraction)), spec.per_class - 1)
        n_val = min(round(spec.per_class * spec.val_fraction), spec.per_class - 1 - n_test)
    for _ in range(spec.classes):
        plan = [Split.TEST] * n_test + [Split.VAL] * n_val
        plan += [Split.TRAIN] * (spec.per_class - len(plan))
        order = rng.permutation(spec.per_class)
        splits.extend(plan[i] for i in order)
    return splits


def _candidate_boxes(spec: SynthSpec, rng: SeededRng) -> list[Box]:
    """Twice as many region proposals as patches, in the unit square."""
    corners = rng.uniform(0.0, 0.6, size=(2 * spec.patches_per_image, 2))
    sizes = rng.uniform(0.25, 0.4, size=(2 * spec.patches_per_image, 2))
    return [(x, y, x + w, y + h) for (x, y), (w, h) in zip(corners.tolist(), sizes.tolist())]


def _text_patches(tokens: list[str], spec: SynthSpec, vocabulary: Vocabulary, rng: SeededRng) -> FeatureMatrix:
    if spec.text_patch_style == "tags":
        return tag_patches(tokens, vocabulary, spec.patches_per_text)
    shuffled = [tokens[j] for j in rng.permutation(len(tokens))]
    pieces = np.array_split(np.array(shuffled, dtype=object), spec.patches_per_text)
    chunks = [" ".join(chunk) + "." for chunk in pieces if len(chunk)]
    joiner = "\n\n" if spec.text_patch_style == "paragraphs" else " "
    return text_patches(joiner.join(chunks), spec.text_patch_style, vocabulary)


def generate(spec: SynthSpec) -> CrossModalDataset:
    """Build the dataset described by *spec*; the same spec gives the same bytes."""
    rng = SeededRng(spec.seed)
    scale = 1.0 / np.sqrt(spec.latent_dim)

    prototypes = rng.child("prototypes").normal(0.0, spec.spread, size=(spec.classes, spec.latent_dim))
    image_map = rng.child("image-map").normal(0.0, scale, size=(spec.latent_dim, spec.image_dim))
    word_map = rng.child("text-map").normal(0.0, scale, size=(spec.latent_dim, spec.text_dim))

    labels = np.repeat(np.arange(spec.classes, dtype=np.int64), spec.per_class)
    n = labels.size
    codes = prototypes[labels] + rng.child("codes").normal(0.0, 1.0, size=(n, spec.latent_dim)) * spec.noise

    image = matmul(codes, image_map)
    text = _render_text(codes, word_map, spec.doc_length, rng.child("words"))
    ids = [f"s{i:05d}" for i in range(n)]

    patch_rng = rng.child("patches")
    vocabulary = Vocabulary(tuple(f"w{j:04d}" for j in range(spec.text_dim)))
    image_groups: dict[str, PatchGroup] = {}
    text_groups: dict[str, PatchGroup] = {}
    for i, instance_id in enumerate(ids):
        kept = select_image_patches(_candidate_boxes(spec, patch_rng), max_patches=spec.patches_per_image)
        noise = patch_rng.normal(0.0, 1.0, size=(2 * spec.patches_per_image, spec.latent_dim))
        image_codes = codes[i] + noise[kept] * spec.patch_noise
        image_groups[instance_id] = PatchGroup(instance_id, matmul(image_codes, image_map))
        tokens = [word for word, count in zip(vocabulary.words, text[i]) for _ in range(int(count))]
        text_groups[instance_id] = PatchGroup(instance_id, _text_patches(tokens, spec, vocabulary, patch_rng))

    dataset = CrossModalDataset(
        ids=ids,
        image=image,
        text=text,
        splits=_split_plan(spec, rng.child("splits")),
        name=f"synth-{spec.classes}x{spec.per_class}-seed{spec.seed}",
        image_patches=image_groups,
        text_patches=text_groups,
        text_patch_style=spec.text_patch_style,
        _labels=labels,
    )
    logger.info("generated %s: %d pairs, %d classes", dataset.name, n, spec.classes)
    return dataset
