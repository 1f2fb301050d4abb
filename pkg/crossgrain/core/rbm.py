"""Restricted Boltzmann Machines: energy, conditionals and CD-k training.

Three visible-unit families are supported:

  gaussian            real-valued features, unit variance (inputs are
                      expected to be standardised per feature)
  bernoulli           binary or probability-valued features
  replicated-softmax  non-negative word counts; the hidden bias is scaled by
                      the document length ``D = sum_i v_i``

Hidden units are always binary.  At inference time mean-field probabilities
are propagated; binary samples only appear inside the negative phase of
contrastive divergence.
"""

from __future__ import annotations

import logging
from collections.abc import Callable
from dataclasses import dataclass, field, replace
from enum import Enum

import numpy as np

from crossgrain import settings
from crossgrain.config import CdConfig
from crossgrain.core.numeric import (
    FeatureMatrix,
    SeededRng,
    Vector,
    as_matrix,
    matmul,
    sigmoid,
    softmax,
)
from crossgrain.errors import DivergenceError, DomainError, ShapeError

logger = logging.getLogger(__name__)


class VisibleKind(str, Enum):
    GAUSSIAN = "gaussian"
    BERNOULLI = "bernoulli"
    REPLICATED_SOFTMAX = "replicated-softmax"


@dataclass(frozen=True)
class RbmParams:
    """theta = (a, b, W) plus the visible-unit family."""

    visible_bias: Vector
    hidden_bias: Vector
    weights: FeatureMatrix
    visible_kind: VisibleKind = VisibleKind.BERNOULLI

    def __post_init__(self) -> None:
        n_v, n_h = self.weights.shape
        if self.visible_bias.shape != (n_v,) or self.hidden_bias.shape != (n_h,):
            raise ShapeError(
                f"bias shapes {self.visible_bias.shape}/{self.hidden_bias.shape} "
                f"do not match weights {self.weights.shape}",
                self.visible_bias.shape, self.hidden_bias.shape, self.weights.shape,
            )

    @property
    def n_visible(self) -> int:
        return self.weights.shape[0]

    @property
    def n_hidden(self) -> int:
        return self.weights.shape[1]

    def is_finite(self) -> bool:
        return bool(
            np.all(np.isfinite(self.weights))
            and np.all(np.isfinite(self.visible_bias))
            and np.all(np.isfinite(self.hidden_bias))
        )


def init_rbm(n_visible: int, n_hidden: int, kind: VisibleKind, rng: SeededRng) -> RbmParams:
    """Small normal weights, zero biases."""
    return RbmParams(
        visible_bias=np.zeros(n_visible),
        hidden_bias=np.zeros(n_hidden),
        weights=rng.normal(0.0, settings.RBM_INIT_STD, size=(n_visible, n_hidden)),
        visible_kind=kind,
    )


def _doc_lengths(v: FeatureMatrix) -> Vector:
    if np.any(v < 0):
        raise DomainError("replicated-softmax input must be non-negative word counts")
    return v.sum(axis=1)


def _check_visible(params: RbmParams, v: FeatureMatrix) -> None:
    if v.shape[1] != params.n_visible:
        raise ShapeError(
            f"visible batch of shape {v.shape} does not match weights {params.weights.shape}",
            v.shape, params.weights.shape,
        )


# ---------------------------------------------------------------------------
# Energy
# ---------------------------------------------------------------------------

def rbm_energy(params: RbmParams, v: Vector, h: Vector) -> float:
    """E(v, h) = -a.v - b.h - v.W.h.

    Gaussian visible units use ``(v - a).(v - a) / 2`` in place of ``-a.v``;
    replicated-softmax scales the hidden-bias term by ``D = sum(v)``.
    """
    v = np.asarray(v, dtype=np.float64)
    h = np.asarray(h, dtype=np.float64)
    if v.shape != (params.n_visible,) or h.shape != (params.n_hidden,):
        raise ShapeError(
            f"v {v.shape} / h {h.shape} do not match weights {params.weights.shape}",
            v.shape, h.shape, params.weights.shape,
        )
    interaction = float(v @ params.weights @ h)
    if params.visible_kind is VisibleKind.GAUSSIAN:
        diff = v - params.visible_bias
        visible_term = 0.5 * float(diff @ diff)
    else:
        visible_term = -float(params.visible_bias @ v)
    hidden_scale = float(v.sum()) if params.visible_kind is VisibleKind.REPLICATED_SOFTMAX else 1.0
    return visible_term - hidden_scale * float(params.hidden_bias @ h) - interaction


def free_energy(params: RbmParams, v: FeatureMatrix) -> Vector:
    """Per-row free energy F(v) = -log sum_h exp(-E(v, h))."""
    v = as_matrix(v, name="visible batch")
    _check_visible(params, v)
    pre = _hidden_preactivation(params, v)
    hidden_term = np.logaddexp(0.0, pre).sum(axis=1)
    if params.visible_kind is VisibleKind.GAUSSIAN:
        diff = v - params.visible_bias
        return 0.5 * (diff * diff).sum(axis=1) - hidden_term
    return -(v @ params.visible_bias) - hidden_term


# ---------------------------------------------------------------------------
# Conditionals
# ---------------------------------------------------------------------------

def _hidden_preactivation(params: RbmParams, v: FeatureMatrix) -> FeatureMatrix:
    if params.visible_kind is VisibleKind.REPLICATED_SOFTMAX:
        bias = np.outer(_doc_lengths(v), params.hidden_bias)
    else:
        bias = params.hidden_bias
    return matmul(v, params.weights) + bias


def hidden_given_visible(
    params: RbmParams, v: FeatureMatrix, rng: SeededRng | None = None
) -> tuple[FeatureMatrix, FeatureMatrix | None]:
    """Return p(h=1 | v) and, when *rng* is given, a binary sample of h."""
    v = as_matrix(v, name="visible batch")
    _check_visible(params, v)
    probs = sigmoid(_hidden_preactivation(params, v))
    sample = rng.bernoulli(probs) if rng is not None else None
    return probs, sample


def visible_given_hidden(
    params: RbmParams,
    h: FeatureMatrix,
    rng: SeededRng | None = None,
    *,
    mean_field: bool = False,
    doc_lengths: Vector | None = None,
) -> FeatureMatrix:
    """Reconstruct visible units from hidden states.

    gaussian            mean ``a + W h``; unit-variance sample when sampling
    bernoulli           ``sigmoid(a + W h)``; binary sample when sampling
    replicated-softmax  ``D * softmax(a + W h)``; multinomial with D draws when
                        sampling (``doc_lengths`` is required)

    A sample is drawn only when *rng* is given and ``mean_field`` is false.
    """
    h = as_matrix(h, name="hidden batch")
    if h.shape[1] != params.n_hidden:
        raise ShapeError(
            f"hidden batch of shape {h.shape} does not match weights {params.weights.shape}",
            h.shape, params.weights.shape,
        )
    pre = matmul(h, params.weights.T) + params.visible_bias
    sample = rng is not None and not mean_field
    kind = params.visible_kind
    if kind is VisibleKind.GAUSSIAN:
        return pre + rng.normal(size=pre.shape) if sample else pre  # type: ignore[union-attr]
    if kind is VisibleKind.BERNOULLI:
        probs = sigmoid(pre)
        return rng.bernoulli(probs) if sample else probs  # type: ignore[union-attr]
    if doc_lengths is None:
        raise DomainError("replicated-softmax reconstruction needs document lengths")
    doc_lengths = np.asarray(doc_lengths, dtype=np.float64)
    if np.any(doc_lengths < 0):
        raise DomainError("document lengths must be non-negative")
    probs = softmax(pre)
    if sample:
        counts = np.rint(doc_lengths).astype(np.int64)
        return np.vstack([
            rng.multinomial(counts[i], probs[i]) for i in range(probs.shape[0])  # type: ignore[union-attr]
        ])
    return probs * doc_lengths[:, None]


# ---------------------------------------------------------------------------
# Contrastive divergence
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class RbmVelocity:
    weights: FeatureMatrix
    visible_bias: Vector
    hidden_bias: Vector

    @classmethod
    def zeros_like(cls, params: RbmParams) -> RbmVelocity:
        return cls(
            np.zeros_like(params.weights),
            np.zeros_like(params.visible_bias),
            np.zeros_like(params.hidden_bias),
        )


@dataclass(frozen=True)
class CdResult:
    params: RbmParams
    reconstruction_error: float
    velocity: RbmVelocity


def cd_k_update(
    params: RbmParams,
    batch: FeatureMatrix,
    cfg: CdConfig,
    rng: SeededRng,
    *,
    velocity: RbmVelocity | None = None,
    epoch: int = 0,
) -> CdResult:
    """One CD-k step on *batch*.

    ``dW = lr * ((<v h>_data - <v h>_model) / n - weight_decay * W)`` with
    classical momentum; the biases follow the same rule without decay.  The
    reconstruction error is the mean squared difference between the batch and
    its mean-field one-step reconstruction.

    Raises:
        DivergenceError: if the update is not finite.
    """
    v0 = as_matrix(batch, name="training batch")
    _check_visible(params, v0)
    n = v0.shape[0]
    lengths = _doc_lengths(v0) if params.visible_kind is VisibleKind.REPLICATED_SOFTMAX else None
    hidden_rng = None if cfg.mean_field else rng

    ph0, h_state = hidden_given_visible(params, v0, hidden_rng)
    if h_state is None:
        h_state = ph0
    recon = visible_given_hidden(params, ph0, mean_field=True, doc_lengths=lengths)

    vk, phk = v0, ph0
    for _ in range(cfg.k):
        vk = visible_given_hidden(
            params,
            h_state,
            rng if cfg.sample_visible else None,
            mean_field=not cfg.sample_visible,
            doc_lengths=lengths,
        )
        phk, h_state = hidden_given_visible(params, vk, hidden_rng)
        if h_state is None:
            h_state = phk

    if lengths is not None:
        hidden_pos = ph0 * lengths[:, None]
        hidden_neg = phk * lengths[:, None]
    else:
        hidden_pos, hidden_neg = ph0, phk

    grad_w = (matmul(v0.T, ph0) - matmul(vk.T, phk)) / n - cfg.weight_decay * params.weights
    grad_a = (v0 - vk).mean(axis=0)
    grad_b = (hidden_pos - hidden_neg).mean(axis=0)

    vel = velocity or RbmVelocity.zeros_like(params)
    vel = RbmVelocity(
        weights=cfg.momentum * vel.weights + cfg.learning_rate * grad_w,
        visible_bias=cfg.momentum * vel.visible_bias + cfg.learning_rate * grad_a,
        hidden_bias=cfg.momentum * vel.hidden_bias + cfg.learning_rate * grad_b,
    )
    updated = replace(
        params,
        weights=params.weights + vel.weights,
        visible_bias=params.visible_bias + vel.visible_bias,
        hidden_bias=params.hidden_bias + vel.hidden_bias,
    )
    error = float(np.mean((v0 - recon) ** 2))
    if not updated.is_finite() or not np.isfinite(error):
        raise DivergenceError(f"CD update diverged at epoch {epoch}", epoch=epoch)
    return CdResult(updated, error, vel)


@dataclass
class RbmFit:
    params: RbmParams
    errors: list[float] = field(default_factory=list)


def train_rbm(
    params: RbmParams,
    data: FeatureMatrix,
    cfg: CdConfig,
    rng: SeededRng,
    *,
    on_epoch: Callable[[int, float], None] | None = None,
) -> RbmFit:
    """Run ``cfg.epochs`` epochs of shuffled mini-batch CD-k.

    Returns the trained parameters and the mean reconstruction error of each
    epoch.  ``epochs == 0`` returns *params* untouched.
    """
    data = as_matrix(data, name="training data")
    _check_visible(params, data)
    fit = RbmFit(params)
    velocity: RbmVelocity | None = None
    n = data.shape[0]
    for epoch in range(cfg.epochs):
        order = rng.permutation(n)
        batch_errors: list[float] = []
        for start in range(0, n, cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            step = cd_k_update(fit.params, data[idx], cfg, rng, velocity=velocity, epoch=epoch)
            fit.params, velocity = step.params, step.velocity
            batch_errors.append(step.reconstruction_error)
        epoch_error = float(np.mean(batch_errors)) if batch_errors else 0.0
        fit.errors.append(epoch_error)
        logger.debug("rbm epoch %d: reconstruction error %.6f", epoch, epoch_error)
        if on_epoch is not None:
            on_epoch(epoch, epoch_error)
    return fit
