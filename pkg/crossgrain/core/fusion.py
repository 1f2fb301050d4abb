"""Patch averaging and the joint RBM that fuses coarse and fine views.

The joint model has one RBM per input view (instance codes ``T_origin`` and
averaged patch codes ``T_patch``) and a top RBM over the concatenation of
their hidden layers.  Its mean-field top activations are the separate
representation ``S`` handed to stage two.
"""

from __future__ import annotations

import itertools
import logging
from collections.abc import Callable
from dataclasses import dataclass

import numpy as np

from crossgrain import settings
from crossgrain.config import CdConfig
from crossgrain.core.numeric import FeatureMatrix, SeededRng, Vector, as_matrix
from crossgrain.core.rbm import RbmParams, VisibleKind, hidden_given_visible, init_rbm, rbm_energy, train_rbm
from crossgrain.errors import DataValidationError, DomainError, PairingError, PreconditionError, ShapeError

logger = logging.getLogger(__name__)

# Exact enumeration is exponential in the unit count
MAX_ENUMERATION_UNITS = 20


@dataclass(frozen=True)
class PatchGroup:
    """The patch feature rows of one instance."""

    instance_id: str
    patch_features: FeatureMatrix
    cap: int | None = None

    def __post_init__(self) -> None:
        if self.patch_features.ndim != 2:
            raise ShapeError(
                f"patches of {self.instance_id!r} must be a 2-D array", self.patch_features.shape
            )
        if self.cap is not None and self.patch_count > self.cap:
            raise DataValidationError(
                f"instance {self.instance_id!r} has {self.patch_count} patches (cap {self.cap})",
                cap=self.cap,
            )

    @property
    def patch_count(self) -> int:
        return self.patch_features.shape[0]


def average_fuse(group: PatchGroup | FeatureMatrix) -> Vector:
    """Coordinate-wise mean of the patch rows.

    Raises:
        DomainError: if there are no patches.
    """
    rows = group.patch_features if isinstance(group, PatchGroup) else np.asarray(group, dtype=np.float64)
    if rows.ndim != 2 or rows.shape[0] == 0:
        raise DomainError("cannot average an empty patch group")
    return rows.mean(axis=0)


# ---------------------------------------------------------------------------
# Joint RBM
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class JointFusionRbm:
    pathway_a: RbmParams
    pathway_b: RbmParams
    top: RbmParams

    def __post_init__(self) -> None:
        if self.top.n_visible != self.pathway_a.n_hidden + self.pathway_b.n_hidden:
            raise ShapeError(
                f"top RBM sees {self.top.n_visible} units but the pathways provide "
                f"{self.pathway_a.n_hidden} + {self.pathway_b.n_hidden}",
            )

    @property
    def output_dim(self) -> int:
        return self.top.n_hidden


def _aligned(t_origin: FeatureMatrix, t_patch: FeatureMatrix) -> tuple[FeatureMatrix, FeatureMatrix]:
    t_origin = as_matrix(t_origin, name="T_origin")
    t_patch = as_matrix(t_patch, name="T_patch")
    if t_origin.shape[0] != t_patch.shape[0]:
        raise PairingError(
            f"T_origin has {t_origin.shape[0]} rows but T_patch has {t_patch.shape[0]}"
        )
    return t_origin, t_patch


def train_fusion(
    cfg: CdConfig,
    t_origin: FeatureMatrix,
    t_patch: FeatureMatrix,
    rng: SeededRng,
    *,
    pathway_dim: int = settings.FUSION_PATHWAY_DIM,
    output_dim: int = settings.FUSION_OUTPUT_DIM,
    tie_seeds: bool = False,
    on_epoch: Callable[[str, int, float], None] | None = None,
) -> JointFusionRbm:
    """Train both pathway RBMs, then the top RBM on their mean-field hiddens.

    With ``tie_seeds`` both pathways draw from one stream name, so identical
    inputs give identical pathways.
    """
    t_origin, t_patch = _aligned(t_origin, t_patch)

    def fit(name: str, stream: str, data: FeatureMatrix, n_hidden: int) -> RbmParams:
        stream_rng = rng.child(stream)
        params = init_rbm(data.shape[1], n_hidden, VisibleKind.BERNOULLI, stream_rng.child("init"))
        callback = (lambda epoch, err: on_epoch(name, epoch, err)) if on_epoch else None
        result = train_rbm(params, data, cfg, stream_rng.child("cd"), on_epoch=callback)
        if result.errors:
            logger.info("fusion %s RBM: final reconstruction error %.6f", name, result.errors[-1])
        return result.params

    pathway_a = fit("origin", "pathway" if tie_seeds else "pathway-a", t_origin, pathway_dim)
    pathway_b = fit("patch", "pathway" if tie_seeds else "pathway-b", t_patch, pathway_dim)
    hidden = _pathway_hiddens(pathway_a, pathway_b, t_origin, t_patch)
    top = fit("top", "top", hidden, output_dim)
    return JointFusionRbm(pathway_a, pathway_b, top)


def _pathway_hiddens(
    a: RbmParams, b: RbmParams, t_origin: FeatureMatrix, t_patch: FeatureMatrix
) -> FeatureMatrix:
    ha, _ = hidden_given_visible(a, t_origin)
    hb, _ = hidden_given_visible(b, t_patch)
    return np.hstack([ha, hb])


def fuse(model: JointFusionRbm, t_origin: FeatureMatrix, t_patch: FeatureMatrix) -> FeatureMatrix:
    """Separate representation S: mean-field top activations, never sampled."""
    t_origin, t_patch = _aligned(t_origin, t_patch)
    hidden = _pathway_hiddens(model.pathway_a, model.pathway_b, t_origin, t_patch)
    top, _ = hidden_given_visible(model.top, hidden)
    return top


def joint_energy(
    model: JointFusionRbm,
    v_origin: Vector,
    v_patch: Vector,
    h_origin: Vector,
    h_patch: Vector,
    h_top: Vector,
) -> float:
    """Energy of one full configuration of the joint model."""
    h_both = np.concatenate([np.asarray(h_origin, float), np.asarray(h_patch, float)])
    return (
        rbm_energy(model.pathway_a, v_origin, h_origin)
        + rbm_energy(model.pathway_b, v_patch, h_patch)
        + rbm_energy(model.top, h_both, h_top)
    )


def joint_distribution(model: JointFusionRbm) -> tuple[list[tuple[int, ...]], Vector]:
    """Enumerate every binary configuration and its probability.

    Only for toy models: the state count is ``2 ** units``.
    """
    sizes = [
        model.pathway_a.n_visible, model.pathway_b.n_visible,
        model.pathway_a.n_hidden, model.pathway_b.n_hidden, model.top.n_hidden,
    ]
    units = sum(sizes)
    if units > MAX_ENUMERATION_UNITS:
        raise PreconditionError(f"{units} units is too many to enumerate (max {MAX_ENUMERATION_UNITS})")
    bounds = np.cumsum([0, *sizes])
    states = list(itertools.product((0, 1), repeat=units))
    energies = np.empty(len(states))
    for i, state in enumerate(states):
        x = np.asarray(state, dtype=np.float64)
        parts = [x[bounds[j]:bounds[j + 1]] for j in range(len(sizes))]
        energies[i] = joint_energy(model, *parts)
    log_weights = -energies
    log_z = np.logaddexp.reduce(log_weights)
    return states, np.exp(log_weights - log_z)
