"""Greedy layer-wise stacks of RBMs, one per modality."""

from __future__ import annotations

import logging
from collections.abc import Callable
from dataclasses import dataclass, field

from crossgrain.config import CdConfig
from crossgrain.core.modality import Modality
from crossgrain.core.numeric import FeatureMatrix, SeededRng, as_matrix
from crossgrain.core.rbm import RbmParams, VisibleKind, hidden_given_visible, init_rbm, train_rbm
from crossgrain.errors import DivergenceError, PreconditionError, ShapeError

logger = logging.getLogger(__name__)

# Visible family of the first layer for each modality
FIRST_LAYER_KIND: dict[Modality, VisibleKind] = {
    Modality.IMAGE: VisibleKind.GAUSSIAN,
    Modality.TEXT: VisibleKind.REPLICATED_SOFTMAX,
}


@dataclass
class DbnModel:
    layers: list[RbmParams]
    modality: Modality
    errors: list[list[float]] = field(default_factory=list)

    def __post_init__(self) -> None:
        for lower, upper in zip(self.layers, self.layers[1:]):
            if lower.n_hidden != upper.n_visible:
                raise ShapeError(
                    f"layer widths do not chain: {lower.weights.shape} then {upper.weights.shape}",
                    lower.weights.shape, upper.weights.shape,
                )

    @property
    def layer_dims(self) -> list[int]:
        if not self.layers:
            return []
        return [self.layers[0].n_visible] + [layer.n_hidden for layer in self.layers]

    @property
    def in_dim(self) -> int:
        return self.layers[0].n_visible

    @property
    def out_dim(self) -> int:
        return self.layers[-1].n_hidden


def train_dbn(
    data: FeatureMatrix,
    dims: list[int] | tuple[int, ...],
    cfg: CdConfig,
    rng: SeededRng,
    *,
    modality: Modality | str = Modality.IMAGE,
    on_epoch: Callable[[int, int, float], None] | None = None,
) -> DbnModel:
    """Train a stack with hidden widths *dims* on *data*, one layer at a time.

    Each layer sees the mean-field activations of the already trained layers
    below it; lower layers are never revisited.  *on_epoch* receives
    ``(layer, epoch, reconstruction_error)``.

    Raises:
        PreconditionError: if *dims* is empty.
        DivergenceError: with the failing layer named in the message.
    """
    if not dims:
        raise PreconditionError("a DBN needs at least one hidden layer")
    modality = Modality.parse(modality)
    data = as_matrix(data, name=f"{modality.value} DBN input")

    layers: list[RbmParams] = []
    errors: list[list[float]] = []
    current = data
    n_visible = data.shape[1]
    for index, n_hidden in enumerate(dims):
        kind = FIRST_LAYER_KIND[modality] if index == 0 else VisibleKind.BERNOULLI
        layer_rng = rng.child(f"layer-{index}")
        params = init_rbm(n_visible, n_hidden, kind, layer_rng.child("init"))
        callback = None
        if on_epoch is not None:
            callback = lambda epoch, err, _i=index: on_epoch(_i, epoch, err)  # noqa: E731
        try:
            fit = train_rbm(params, current, cfg, layer_rng.child("cd"), on_epoch=callback)
        except DivergenceError as exc:
            raise DivergenceError(
                f"{modality.value} DBN layer {index}: {exc}", epoch=exc.epoch, phase=exc.phase
            ) from exc
        layers.append(fit.params)
        errors.append(fit.errors)
        if fit.errors:
            logger.info(
                "%s DBN layer %d (%d -> %d): final reconstruction error %.6f",
                modality.value, index, n_visible, n_hidden, fit.errors[-1],
            )
        current, _ = hidden_given_visible(fit.params, current)
        n_visible = n_hidden
    return DbnModel(layers=layers, modality=modality, errors=errors)


def dbn_forward(model: DbnModel, x: FeatureMatrix) -> FeatureMatrix:
    """Propagate mean-field hidden probabilities through every layer."""
    h = as_matrix(x, name="DBN input")
    if h.shape[1] != model.in_dim:
        raise ShapeError(
            f"DBN expects width {model.in_dim}, got input of shape {h.shape}",
            h.shape, (model.in_dim,),
        )
    for layer in model.layers:
        h, _ = hidden_given_visible(layer, h)
    return h
