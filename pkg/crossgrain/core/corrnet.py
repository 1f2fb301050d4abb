"""Two-pathway correlation network linked at a shared code layer.

Each pathway is an encoder (input -> hidden -> hidden -> code) and a
mirrored decoder back to the input width.  Training minimises

    ||Qi - Qi_r||^2 + ||Qt - Qt_r||^2 + ||code_i - code_t||^2

averaged over the batch.  The same network type is fitted once on instance
representations and once on averaged patch representations.
"""

from __future__ import annotations

import logging
from collections.abc import Callable
from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from crossgrain.config import CorrNetConfig
from crossgrain.core.layers import Activation, Mlp, MlpTrace, Sgd, flat_grads
from crossgrain.core.modality import Modality
from crossgrain.core.numeric import FeatureMatrix, SeededRng, as_matrix
from crossgrain.errors import DivergenceError, PairingError, ShapeError

logger = logging.getLogger(__name__)


class CorrObjective(str, Enum):
    """Which loss terms drive training."""

    JOINT = "joint"
    RECONSTRUCTION_ONLY = "reconstruction-only"
    CORRELATION_ONLY = "correlation-only"


@dataclass
class Pathway:
    encoder: Mlp
    decoder: Mlp

    @property
    def in_dim(self) -> int:
        return self.encoder.in_dim

    @property
    def code_dim(self) -> int:
        return self.encoder.out_dim


@dataclass
class CorrNet:
    image: Pathway
    text: Pathway

    def __post_init__(self) -> None:
        if self.image.code_dim != self.text.code_dim:
            raise ShapeError(
                f"code layers differ: image {self.image.code_dim}, text {self.text.code_dim}"
            )
        for name, path in (("image", self.image), ("text", self.text)):
            if path.decoder.in_dim != path.code_dim or path.decoder.out_dim != path.in_dim:
                raise ShapeError(f"{name} decoder does not mirror its encoder")

    @property
    def code_dim(self) -> int:
        return self.image.code_dim

    def pathway(self, modality: Modality | str) -> Pathway:
        return self.image if Modality.parse(modality) is Modality.IMAGE else self.text

    def swapped(self) -> CorrNet:
        """The same network with the roles of the two pathways exchanged."""
        return CorrNet(image=self.text, text=self.image)

    def parameters(self) -> list[np.ndarray]:
        return [
            *self.image.encoder.parameters(),
            *self.image.decoder.parameters(),
            *self.text.encoder.parameters(),
            *self.text.decoder.parameters(),
        ]

    def copy(self) -> CorrNet:
        return CorrNet(
            image=Pathway(self.image.encoder.copy(), self.image.decoder.copy()),
            text=Pathway(self.text.encoder.copy(), self.text.decoder.copy()),
        )


def _pathway(in_dim: int, cfg: CorrNetConfig, rng: SeededRng) -> Pathway:
    act = Activation(cfg.activation)
    widths = [in_dim, *cfg.hidden_dims, cfg.code_dim]
    acts = [act] * (len(widths) - 1)
    encoder = Mlp.build(widths, acts, rng.child("encoder"))
    decoder = Mlp.build(widths[::-1], acts, rng.child("decoder"))
    return Pathway(encoder, decoder)


def build_corrnet(image_dim: int, text_dim: int, cfg: CorrNetConfig, rng: SeededRng) -> CorrNet:
    """Fresh network; square layers start as identity with zero bias."""
    return CorrNet(
        image=_pathway(image_dim, cfg, rng.child("image")),
        text=_pathway(text_dim, cfg, rng.child("text")),
    )


# ---------------------------------------------------------------------------
# Loss
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class CorrLossReport:
    total: float
    recon_image: float
    recon_text: float
    correlation: float

    def objective_value(self, objective: CorrObjective) -> float:
        if objective is CorrObjective.RECONSTRUCTION_ONLY:
            return self.recon_image + self.recon_text
        if objective is CorrObjective.CORRELATION_ONLY:
            return self.correlation
        return self.total


@dataclass
class _Forward:
    enc_i: MlpTrace
    dec_i: MlpTrace
    enc_t: MlpTrace
    dec_t: MlpTrace


def _paired(net: CorrNet, qi: FeatureMatrix, qt: FeatureMatrix) -> tuple[FeatureMatrix, FeatureMatrix]:
    qi = as_matrix(qi, name="image batch")
    qt = as_matrix(qt, name="text batch")
    if qi.shape[0] != qt.shape[0]:
        raise PairingError(f"image batch has {qi.shape[0]} rows but text batch has {qt.shape[0]}")
    if qi.shape[1] != net.image.in_dim or qt.shape[1] != net.text.in_dim:
        raise ShapeError(
            f"batches {qi.shape}/{qt.shape} do not fit pathway inputs "
            f"{net.image.in_dim}/{net.text.in_dim}",
            qi.shape, qt.shape,
        )
    return qi, qt


def _forward(net: CorrNet, qi: FeatureMatrix, qt: FeatureMatrix) -> _Forward:
    enc_i = net.image.encoder.forward(qi)
    enc_t = net.text.encoder.forward(qt)
    return _Forward(
        enc_i=enc_i,
        dec_i=net.image.decoder.forward(enc_i.output),
        enc_t=enc_t,
        dec_t=net.text.decoder.forward(enc_t.output),
    )


def _report(qi: FeatureMatrix, qt: FeatureMatrix, fw: _Forward) -> CorrLossReport:
    n = qi.shape[0]
    recon_i = float(((qi - fw.dec_i.output) ** 2).sum()) / n
    recon_t = float(((qt - fw.dec_t.output) ** 2).sum()) / n
    corr = float(((fw.enc_i.output - fw.enc_t.output) ** 2).sum()) / n
    return CorrLossReport(recon_i + recon_t + corr, recon_i, recon_t, corr)


def corrnet_loss(net: CorrNet, qi: FeatureMatrix, qt: FeatureMatrix) -> CorrLossReport:
    """Evaluate every loss term on a paired batch.

    Raises:
        PairingError: if the batches have different row counts.
    """
    qi, qt = _paired(net, qi, qt)
    return _report(qi, qt, _forward(net, qi, qt))


def corrnet_gradients(
    net: CorrNet,
    qi: FeatureMatrix,
    qt: FeatureMatrix,
    objective: CorrObjective = CorrObjective.JOINT,
) -> tuple[CorrLossReport, list[np.ndarray]]:
    """Loss report and gradients ordered like :meth:`CorrNet.parameters`."""
    qi, qt = _paired(net, qi, qt)
    fw = _forward(net, qi, qt)
    report = _report(qi, qt, fw)
    n = qi.shape[0]

    recon_weight = 0.0 if objective is CorrObjective.CORRELATION_ONLY else 1.0
    corr_weight = 0.0 if objective is CorrObjective.RECONSTRUCTION_ONLY else 1.0

    dec_i_grads, g_code_i = net.image.decoder.backward(fw.dec_i, recon_weight * 2.0 * (fw.dec_i.output - qi) / n)
    dec_t_grads, g_code_t = net.text.decoder.backward(fw.dec_t, recon_weight * 2.0 * (fw.dec_t.output - qt) / n)
    code_diff = corr_weight * 2.0 * (fw.enc_i.output - fw.enc_t.output) / n
    enc_i_grads, _ = net.image.encoder.backward(fw.enc_i, g_code_i + code_diff)
    enc_t_grads, _ = net.text.encoder.backward(fw.enc_t, g_code_t - code_diff)

    grads = [
        *flat_grads(enc_i_grads),
        *flat_grads(dec_i_grads),
        *flat_grads(enc_t_grads),
        *flat_grads(dec_t_grads),
    ]
    return report, grads


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class CorrEpoch:
    epoch: int
    train: CorrLossReport
    validation: CorrLossReport | None = None


@dataclass
class CorrNetFit:
    net: CorrNet
    history: list[CorrEpoch] = field(default_factory=list)


def corrnet_train(
    net: CorrNet,
    qi: FeatureMatrix,
    qt: FeatureMatrix,
    cfg: CorrNetConfig,
    rng: SeededRng,
    *,
    objective: CorrObjective = CorrObjective.JOINT,
    validation: tuple[FeatureMatrix, FeatureMatrix] | None = None,
    on_epoch: Callable[[CorrEpoch], None] | None = None,
) -> CorrNetFit:
    """Mini-batch SGD with momentum on a copy of *net*.

    The loss on the full training pairs (and on *validation*, when given) is
    recorded after every epoch.

    Raises:
        DivergenceError: with the epoch index when the loss stops being finite.
    """
    qi, qt = _paired(net, qi, qt)
    if validation is not None:
        validation = _paired(net, *validation)
    trained = net.copy()
    optimiser = Sgd(trained.parameters(), cfg.learning_rate, cfg.momentum)
    fit = CorrNetFit(trained)
    n = qi.shape[0]

    for epoch in range(cfg.epochs):
        order = rng.permutation(n)
        for start in range(0, n, cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            report, grads = corrnet_gradients(trained, qi[idx], qt[idx], objective)
            if not np.isfinite(report.objective_value(objective)):
                raise DivergenceError(f"correlation network loss diverged at epoch {epoch}", epoch=epoch)
            optimiser.step(grads)

        train_report = corrnet_loss(trained, qi, qt)
        if not np.isfinite(train_report.total):
            raise DivergenceError(f"correlation network loss diverged at epoch {epoch}", epoch=epoch)
        val_report = corrnet_loss(trained, *validation) if validation is not None else None
        record = CorrEpoch(epoch, train_report, val_report)
        fit.history.append(record)
        logger.debug(
            "corrnet epoch %d: loss %.6f (correlation %.6f)%s",
            epoch, train_report.total, train_report.correlation,
            f", validation {val_report.total:.6f}" if val_report else "",
        )
        if on_epoch is not None:
            on_epoch(record)
    return fit


def corrnet_encode(net: CorrNet, q: FeatureMatrix, modality: Modality | str) -> FeatureMatrix:
    """Code-layer activations for one modality."""
    path = net.pathway(modality)
    return path.encoder(as_matrix(q, name="corrnet input"))


def corrnet_decode(net: CorrNet, code: FeatureMatrix, modality: Modality | str) -> FeatureMatrix:
    path = net.pathway(modality)
    return path.decoder(as_matrix(code, name="code batch"))
