"""Stage two: map separate representations into a common space.

Two branches are trained together on every mini-batch:

* inter-modality: a contrastive loss over all image/text pairs of the batch,
  pulling similar pairs together and pushing dissimilar pairs at least
  ``alpha`` apart (squared Euclidean distance);
* intra-modality: an n-way softmax classifier on each mapped modality,
  weighted by ``lam``.

Gradients are written out in closed form; :func:`multitask_gradients` is the
single place where the two branches meet.
"""

from __future__ import annotations

import logging
from collections.abc import Callable
from dataclasses import dataclass, field

import numpy as np
import numpy.typing as npt

from crossgrain import settings
from crossgrain.config import StageTwoConfig
from crossgrain.core.layers import Activation, DenseLayer, Mlp, MlpTrace, Sgd, flat_grads, init_dense
from crossgrain.core.modality import Modality
from crossgrain.core.numeric import FeatureMatrix, SeededRng, as_matrix, matmul, softmax
from crossgrain.errors import (
    ConfigurationError,
    DivergenceError,
    DomainError,
    PairingError,
    PreconditionError,
    ShapeError,
)

logger = logging.getLogger(__name__)


# ---------------------------------------------------------------------------
# Similarity graph
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SimilarityGraph:
    """``matrix[p, q] = 1`` when image ``p`` and text ``q`` are similar."""

    matrix: FeatureMatrix

    @property
    def shape(self) -> tuple[int, int]:
        return self.matrix.shape  # type: ignore[return-value]

    @property
    def positives(self) -> int:
        return int(self.matrix.sum())


def build_similarity_graph(
    labels_image: npt.ArrayLike | None = None,
    labels_text: npt.ArrayLike | None = None,
    *,
    pairs_image: npt.ArrayLike | None = None,
    pairs_text: npt.ArrayLike | None = None,
) -> SimilarityGraph:
    """Similarity by label equality, or by co-existence when only pair ids
    (instance ids or row positions) are available.

    Raises:
        ConfigurationError: if neither labels nor pair ids are given.
    """
    if labels_image is not None and labels_text is not None:
        left, right = np.asarray(labels_image), np.asarray(labels_text)
    elif pairs_image is not None and pairs_text is not None:
        left, right = np.asarray(pairs_image), np.asarray(pairs_text)
    else:
        raise ConfigurationError("a similarity graph needs labels or pairing information")
    return SimilarityGraph((left[:, None] == right[None, :]).astype(np.float64))


# ---------------------------------------------------------------------------
# Contrastive branch
# ---------------------------------------------------------------------------

def _check_contrastive(f: FeatureMatrix, g: FeatureMatrix, e: FeatureMatrix, alpha: float) -> None:
    if not alpha > 0:
        raise ConfigurationError(f"margin alpha must be positive, got {alpha}")
    if f.shape[1] != g.shape[1]:
        raise ShapeError(f"mapped widths differ: {f.shape} vs {g.shape}", f.shape, g.shape)
    if e.shape != (f.shape[0], g.shape[0]):
        raise ShapeError(
            f"similarity graph {e.shape} does not span batches {f.shape[0]} x {g.shape[0]}",
            e.shape, f.shape, g.shape,
        )


def _pair_mask(e: FeatureMatrix, mask: FeatureMatrix | None) -> FeatureMatrix:
    return np.ones_like(e) if mask is None else mask


def squared_distances(f: FeatureMatrix, g: FeatureMatrix) -> FeatureMatrix:
    """``D[p, q] = ||f_p - g_q||^2``."""
    diff = f[:, None, :] - g[None, :, :]
    return (diff * diff).sum(axis=2)


def contrastive_loss(
    f: FeatureMatrix,
    g: FeatureMatrix,
    graph: SimilarityGraph,
    alpha: float,
    *,
    mask: FeatureMatrix | None = None,
) -> float:
    """Mean over the counted pairs of ``D`` (similar) or ``max(0, alpha - D)``.

    *mask* selects which pairs count (all by default).
    """
    e = graph.matrix
    _check_contrastive(f, g, e, alpha)
    m = _pair_mask(e, mask)
    counted = m.sum()
    if counted == 0:
        return 0.0
    d = squared_distances(f, g)
    terms = e * d + (1.0 - e) * np.maximum(0.0, alpha - d)
    return float((terms * m).sum() / counted)


def contrastive_grad(
    f: FeatureMatrix,
    g: FeatureMatrix,
    graph: SimilarityGraph,
    alpha: float,
    *,
    mask: FeatureMatrix | None = None,
) -> tuple[FeatureMatrix, FeatureMatrix]:
    """Gradients of :func:`contrastive_loss` with respect to ``f`` and ``g``.

    Per pair: ``2(f - g)`` / ``2(g - f)`` when similar, the negation of those
    times ``J`` otherwise, where ``J = 1`` while the hinge is active
    (``alpha - D > 0``).
    """
    e = graph.matrix
    _check_contrastive(f, g, e, alpha)
    m = _pair_mask(e, mask)
    counted = m.sum()
    if counted == 0:
        return np.zeros_like(f), np.zeros_like(g)
    active = (alpha - squared_distances(f, g) > 0).astype(np.float64)
    c = (e - (1.0 - e) * active) * m
    scale = 2.0 / counted
    grad_f = scale * (c.sum(axis=1)[:, None] * f - matmul(c, g))
    grad_g = scale * (c.sum(axis=0)[:, None] * g - matmul(c.T, f))
    return grad_f, grad_g


def sample_negative_mask(graph: SimilarityGraph, max_negatives: int | None, rng: SeededRng) -> FeatureMatrix | None:
    """Keep every positive pair and at most *max_negatives* random negatives."""
    if max_negatives is None:
        return None
    e = graph.matrix
    negatives = np.flatnonzero(e.ravel() == 0)
    if negatives.size <= max_negatives:
        return None
    mask = e.copy().ravel()
    chosen = negatives[rng.permutation(negatives.size)[:max_negatives]]
    mask[chosen] = 1.0
    return mask.reshape(e.shape)


# ---------------------------------------------------------------------------
# Classification branch
# ---------------------------------------------------------------------------

def cross_entropy_loss(predicted: FeatureMatrix, target: FeatureMatrix) -> float:
    """``-sum(target * log(predicted))`` averaged over rows.

    Predicted probabilities are clamped at ``settings.LOG_CLAMP``; a warning
    is logged when a target coordinate needed the clamp.
    """
    predicted = as_matrix(predicted, name="predicted distribution")
    target = as_matrix(target, name="target distribution")
    if predicted.shape != target.shape:
        raise ShapeError(
            f"prediction {predicted.shape} and target {target.shape} differ",
            predicted.shape, target.shape,
        )
    if not np.allclose(predicted.sum(axis=1), 1.0, atol=1e-9, rtol=0.0):
        raise PreconditionError("predicted rows must sum to one")
    if np.any((target > 0) & (predicted < settings.LOG_CLAMP)):
        logger.warning("clamping predicted probabilities below %g before the log", settings.LOG_CLAMP)
    logs = np.log(np.maximum(predicted, settings.LOG_CLAMP))
    return float(-(target * logs).sum() / predicted.shape[0])


# ---------------------------------------------------------------------------
# Model
# ---------------------------------------------------------------------------

@dataclass
class StageTwoModel:
    f: Mlp
    g: Mlp
    alpha: float
    lam: float
    head_image: DenseLayer | None = None
    head_text: DenseLayer | None = None
    classes: npt.NDArray[np.int64] | None = None

    def __post_init__(self) -> None:
        if self.f.out_dim != self.g.out_dim:
            raise ShapeError(f"mapping widths differ: {self.f.out_dim} vs {self.g.out_dim}")
        if not self.alpha > 0:
            raise ConfigurationError(f"margin alpha must be positive, got {self.alpha}")
        if self.lam < 0:
            raise ConfigurationError(f"branch weight must be non-negative, got {self.lam}")
        if (self.head_image is None) != (self.head_text is None) or (self.head_image is None) != (self.classes is None):
            raise ConfigurationError("class heads and their class list must be given together")

    @property
    def has_heads(self) -> bool:
        return self.head_image is not None

    @property
    def common_dim(self) -> int:
        return self.f.out_dim

    def mapping(self, modality: Modality | str) -> Mlp:
        return self.f if Modality.parse(modality) is Modality.IMAGE else self.g

    def parameters(self) -> list[np.ndarray]:
        params = [*self.f.parameters(), *self.g.parameters()]
        if self.head_image is not None and self.head_text is not None:
            params += [self.head_image.weights, self.head_image.bias, self.head_text.weights, self.head_text.bias]
        return params

    def copy(self) -> StageTwoModel:
        def head(layer: DenseLayer | None) -> DenseLayer | None:
            if layer is None:
                return None
            return DenseLayer(layer.weights.copy(), layer.bias.copy(), layer.activation)

        return StageTwoModel(
            f=self.f.copy(),
            g=self.g.copy(),
            alpha=self.alpha,
            lam=self.lam,
            head_image=head(self.head_image),
            head_text=head(self.head_text),
            classes=None if self.classes is None else self.classes.copy(),
        )

    def one_hot(self, labels: npt.ArrayLike) -> FeatureMatrix:
        if self.classes is None:
            raise ConfigurationError("this model has no class heads")
        labels = np.asarray(labels)
        index = np.searchsorted(self.classes, labels)
        index = np.clip(index, 0, len(self.classes) - 1)
        if np.any(self.classes[index] != labels):
            raise DomainError("labels contain classes unseen when the model was built")
        out = np.zeros((labels.size, len(self.classes)))
        out[np.arange(labels.size), index] = 1.0
        return out

    def knows(self, labels: npt.ArrayLike) -> npt.NDArray[np.bool_]:
        """Which *labels* have a class head output."""
        labels = np.asarray(labels)
        if self.classes is None:
            return np.zeros(labels.shape, dtype=bool)
        return np.isin(labels, self.classes)


def build_stage_two(
    image_dim: int,
    text_dim: int,
    cfg: StageTwoConfig,
    rng: SeededRng,
    *,
    classes: npt.ArrayLike | None = None,
) -> StageTwoModel:
    """Fresh model; class heads are added when *classes* is given."""
    hidden = Activation(cfg.hidden_activation)
    acts = [hidden] * (len(cfg.layer_dims) - 1) + [Activation.LINEAR]
    f = Mlp.build([image_dim, *cfg.layer_dims], acts, rng.child("f"))
    g = Mlp.build([text_dim, *cfg.layer_dims], acts, rng.child("g"))
    head_image = head_text = None
    class_array = None
    if classes is not None:
        class_array = np.unique(np.asarray(classes, dtype=np.int64))
        n = len(class_array)
        head_image = init_dense(f.out_dim, n, Activation.LINEAR, rng.child("head-image"))
        head_text = init_dense(g.out_dim, n, Activation.LINEAR, rng.child("head-text"))
    return StageTwoModel(f, g, cfg.alpha, cfg.lam, head_image, head_text, class_array)


# ---------------------------------------------------------------------------
# Loss and gradients
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class MultitaskLoss:
    total: float
    contrastive: float
    ce_image: float = 0.0
    ce_text: float = 0.0


def _dropout_layers(mlp: Mlp) -> tuple[int, ...]:
    # Every layer but the output one, i.e. the first two of the usual three
    return tuple(range(len(mlp.layers) - 1))


def multitask_gradients(
    model: StageTwoModel,
    s_image: FeatureMatrix,
    s_text: FeatureMatrix,
    graph: SimilarityGraph,
    *,
    targets: FeatureMatrix | None = None,
    dropout: float = 0.0,
    rng: SeededRng | None = None,
    mask: FeatureMatrix | None = None,
) -> tuple[MultitaskLoss, list[np.ndarray]]:
    """Total loss and its gradients, ordered like :meth:`StageTwoModel.parameters`.

    *targets* holds one-hot rows shared by both modalities (rows are
    aligned); without them the classification branch is skipped.
    """
    trace_f = model.f.forward(s_image, dropout=dropout, dropout_after=_dropout_layers(model.f), rng=rng)
    trace_g = model.g.forward(s_text, dropout=dropout, dropout_after=_dropout_layers(model.g), rng=rng)
    f_out, g_out = trace_f.output, trace_g.output
    assert f_out is not None and g_out is not None

    pair_loss = contrastive_loss(f_out, g_out, graph, model.alpha, mask=mask)
    grad_f, grad_g = contrastive_grad(f_out, g_out, graph, model.alpha, mask=mask)

    ce_image = ce_text = 0.0
    head_grads: list[np.ndarray] = []
    use_heads = targets is not None and model.head_image is not None and model.head_text is not None
    if use_heads:
        assert targets is not None and model.head_image is not None and model.head_text is not None
        n = targets.shape[0]
        for head, out, name in ((model.head_image, f_out, "image"), (model.head_text, g_out, "text")):
            logits, _ = head.forward(out)
            probs = softmax(logits)
            ce = cross_entropy_loss(probs, targets)
            d_logits = model.lam * (probs - targets) / n
            head_grads += [matmul(out.T, d_logits), d_logits.sum(axis=0)]
            back = matmul(d_logits, head.weights.T)
            if name == "image":
                ce_image, grad_f = ce, grad_f + back
            else:
                ce_text, grad_g = ce, grad_g + back
    elif model.has_heads:
        head_grads = [np.zeros_like(p) for p in model.parameters()[-4:]]

    f_grads, _ = model.f.backward(trace_f, grad_f)
    g_grads, _ = model.g.backward(trace_g, grad_g)
    total = pair_loss + model.lam * (ce_image + ce_text)
    loss = MultitaskLoss(total, pair_loss, ce_image, ce_text)
    return loss, [*flat_grads(f_grads), *flat_grads(g_grads), *head_grads]


def multitask_loss(
    model: StageTwoModel,
    s_image: FeatureMatrix,
    s_text: FeatureMatrix,
    graph: SimilarityGraph,
    *,
    targets: FeatureMatrix | None = None,
    target_rows: npt.NDArray[np.int64] | None = None,
) -> MultitaskLoss:
    """Loss without dropout (evaluation mode).

    *target_rows* selects the rows *targets* belong to; the contrastive term
    always covers every row.
    """
    f_out = model.f(s_image)
    g_out = model.g(s_text)
    pair_loss = contrastive_loss(f_out, g_out, graph, model.alpha)
    ce_image = ce_text = 0.0
    if targets is not None and model.head_image is not None and model.head_text is not None and targets.shape[0]:
        if target_rows is not None:
            f_out, g_out = f_out[target_rows], g_out[target_rows]
        ce_image = cross_entropy_loss(softmax(model.head_image.forward(f_out)[1]), targets)
        ce_text = cross_entropy_loss(softmax(model.head_text.forward(g_out)[1]), targets)
    return MultitaskLoss(pair_loss + model.lam * (ce_image + ce_text), pair_loss, ce_image, ce_text)


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class StageTwoEpoch:
    epoch: int
    train: MultitaskLoss
    validation: float | None = None


@dataclass
class MultitaskFit:
    model: StageTwoModel
    history: list[StageTwoEpoch] = field(default_factory=list)


def multitask_train(
    model: StageTwoModel,
    s_image: FeatureMatrix,
    s_text: FeatureMatrix,
    cfg: StageTwoConfig,
    rng: SeededRng,
    *,
    labels: npt.ArrayLike | None = None,
    validation: tuple[FeatureMatrix, FeatureMatrix, npt.ArrayLike | None] | None = None,
    on_epoch: Callable[[StageTwoEpoch], None] | None = None,
) -> MultitaskFit:
    """Train a copy of *model* on row-aligned separate representations.

    With *labels* the similarity graph follows label equality and the class
    heads are trained; without them the graph is the co-existence diagonal
    and labels are never touched.

    Raises:
        ConfigurationError: if the model has class heads, ``lam > 0`` and no
            labels are given.
        DivergenceError: with the epoch index when the loss stops being finite.
    """
    s_image = as_matrix(s_image, name="image representations")
    s_text = as_matrix(s_text, name="text representations")
    n = s_image.shape[0]
    if s_text.shape[0] != n:
        raise PairingError(f"{n} image rows but {s_text.shape[0]} text rows")
    if labels is None and model.has_heads and model.lam > 0:
        raise ConfigurationError("class heads with a positive branch weight need labels")
    label_array = np.asarray(labels) if labels is not None else None
    if label_array is not None and label_array.shape[0] != n:
        raise PairingError(f"{label_array.shape[0]} labels for {n} instances")

    trained = model.copy()
    optimiser = Sgd(trained.parameters(), cfg.learning_rate, cfg.momentum)
    fit = MultitaskFit(trained)
    dropout_rng = rng.child("dropout")
    negatives_rng = rng.child("negatives")
    shuffle_rng = rng.child("shuffle")

    for epoch in range(cfg.epochs):
        order = shuffle_rng.permutation(n)
        batch_losses: list[MultitaskLoss] = []
        for start in range(0, n, cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            graph, targets = _batch_targets(trained, idx, label_array)
            mask = sample_negative_mask(graph, cfg.max_negatives, negatives_rng)
            loss, grads = multitask_gradients(
                trained, s_image[idx], s_text[idx], graph,
                targets=targets, dropout=cfg.dropout, rng=dropout_rng, mask=mask,
            )
            if not np.isfinite(loss.total):
                raise DivergenceError(f"multi-task loss diverged at epoch {epoch}", epoch=epoch)
            optimiser.step(grads)
            batch_losses.append(loss)

        mean = MultitaskLoss(
            total=float(np.mean([b.total for b in batch_losses])),
            contrastive=float(np.mean([b.contrastive for b in batch_losses])),
            ce_image=float(np.mean([b.ce_image for b in batch_losses])),
            ce_text=float(np.mean([b.ce_text for b in batch_losses])),
        )
        val_total = None
        if validation is not None:
            val_total = _validation_total(trained, *validation)
        record = StageTwoEpoch(epoch, mean, val_total)
        fit.history.append(record)
        logger.debug("stage-2 epoch %d: loss %.6f (contrastive %.6f)", epoch, mean.total, mean.contrastive)
        if on_epoch is not None:
            on_epoch(record)
    return fit


def _batch_targets(
    model: StageTwoModel, idx: npt.NDArray[np.int64], labels: npt.NDArray | None
) -> tuple[SimilarityGraph, FeatureMatrix | None]:
    if labels is None:
        return build_similarity_graph(pairs_image=idx, pairs_text=idx), None
    batch_labels = labels[idx]
    graph = build_similarity_graph(batch_labels, batch_labels)
    targets = model.one_hot(batch_labels) if model.has_heads else None
    return graph, targets


def _validation_total(
    model: StageTwoModel, s_image: FeatureMatrix, s_text: FeatureMatrix, labels: npt.ArrayLike | None
) -> float:
    if labels is None or not model.has_heads:
        idx = np.arange(s_image.shape[0])
        graph, _ = _batch_targets(model, idx, None if labels is None else np.asarray(labels))
        return multitask_loss(model, s_image, s_text, graph).total
    label_array = np.asarray(labels)
    graph = build_similarity_graph(label_array, label_array)
    # Rows of classes absent from training only count towards the pair term
    rows = np.flatnonzero(model.knows(label_array))
    if rows.size < label_array.size:
        logger.debug("%d validation row(s) have classes without a head", label_array.size - rows.size)
    targets = model.one_hot(label_array[rows])
    return multitask_loss(model, s_image, s_text, graph, targets=targets, target_rows=rows).total


def encode_common(model: StageTwoModel, s: FeatureMatrix, modality: Modality | str) -> FeatureMatrix:
    """Common representation M; dropout is never applied here."""
    return model.mapping(modality)(as_matrix(s, name="separate representation"))
