"""End-to-end training and evaluation.

Stage one turns raw features into separate representations ``S`` per
modality (DBNs, correlation networks, joint fusion RBMs); stage two maps
``S`` into the common space; evaluation ranks test-split embeddings.  Each
stage reads and writes a :class:`~crossgrain.checkpoint.Checkpoint`.
"""

from __future__ import annotations

import contextlib
import logging
from collections.abc import Callable, Iterator, Sequence
from dataclasses import dataclass
from pathlib import Path
from typing import Any

import numpy as np
import numpy.typing as npt

from crossgrain import settings
from crossgrain.checkpoint import (
    Checkpoint,
    get_corrnet,
    get_dbn,
    get_fusion,
    get_stage_two,
    put_corrnet,
    put_dbn,
    put_fusion,
    put_stage_two,
)
from crossgrain.config import AblationMode, ExperimentConfig, apply_overrides
from crossgrain.core.corrnet import CorrNet, CorrObjective, build_corrnet, corrnet_encode, corrnet_train
from crossgrain.core.dbn import DbnModel, dbn_forward, train_dbn
from crossgrain.core.fusion import JointFusionRbm, PatchGroup, average_fuse, fuse, train_fusion
from crossgrain.core.modality import Modality
from crossgrain.core.multitask import StageTwoModel, build_stage_two, encode_common, multitask_train
from crossgrain.core.numeric import FeatureMatrix, SeededRng, deterministic_mode
from crossgrain.data import CrossModalDataset, Split
from crossgrain.errors import (
    CompatibilityError,
    ConfigurationError,
    DataValidationError,
    DivergenceError,
    PreconditionError,
)
from crossgrain.reports import write_eval_outputs
from crossgrain.retrieval import MetricsReport, Task, evaluate_task

logger = logging.getLogger(__name__)

STAGE_ONE = "stage1"
STAGE_TWO = "stage2"

# Called as (phase, epoch, loss) after every training epoch
EpochCallback = Callable[[str, int, float], None]


def _objective(mode: AblationMode) -> CorrObjective:
    if mode is AblationMode.INTRA_ONLY:
        return CorrObjective.RECONSTRUCTION_ONLY
    if mode is AblationMode.INTER_ONLY:
        return CorrObjective.CORRELATION_ONLY
    return CorrObjective.JOINT


@contextlib.contextmanager
def _phase(name: str, phases: list[dict[str, Any]]) -> Iterator[dict[str, Any]]:
    """Log a training phase and tag divergence errors with its name."""
    record: dict[str, Any] = {"phase": name, "epochs": 0, "final_loss": None}
    logger.info("phase %s: started", name)
    try:
        yield record
    except DivergenceError as exc:
        raise DivergenceError(f"{name}: {exc}", epoch=exc.epoch, phase=name) from exc
    phases.append(record)
    if record["final_loss"] is not None:
        logger.info("phase %s: %d epochs, final loss %.6f", name, record["epochs"], record["final_loss"])
    else:
        logger.info("phase %s: done (no training epochs)", name)


def _relay(name: str, on_epoch: EpochCallback | None) -> Callable[..., None] | None:
    if on_epoch is None:
        return None
    return lambda *args: on_epoch(name, args[-2], args[-1])


# ---------------------------------------------------------------------------
# Stage one
# ---------------------------------------------------------------------------

@dataclass
class StageOneModel:
    mode: AblationMode
    image_dbn: DbnModel | None = None
    text_dbn: DbnModel | None = None
    image_patch_dbn: DbnModel | None = None
    text_patch_dbn: DbnModel | None = None
    instance_net: CorrNet | None = None
    patch_net: CorrNet | None = None
    image_fusion: JointFusionRbm | None = None
    text_fusion: JointFusionRbm | None = None
    # Patchless instances use their whole features as a patch instead of
    # taking their instance codes
    patch_fallback: bool = False

    def dbn(self, modality: Modality, *, patches: bool = False) -> DbnModel:
        if patches:
            model = self.image_patch_dbn if modality is Modality.IMAGE else self.text_patch_dbn
        else:
            model = self.image_dbn if modality is Modality.IMAGE else self.text_dbn
        assert model is not None
        return model

    def separate(self, dataset: CrossModalDataset, split: Split) -> tuple[FeatureMatrix, FeatureMatrix]:
        """Separate representations ``S`` of *split*, image then text."""
        out = []
        for modality in (Modality.IMAGE, Modality.TEXT):
            origin = patch = None
            if self.mode.uses_instances:
                assert self.instance_net is not None
                q = dbn_forward(self.dbn(modality), dataset.features(modality, split))
                origin = corrnet_encode(self.instance_net, q, modality)
            if self.mode.uses_patches:
                assert self.patch_net is not None
                groups = dataset.patch_groups(modality, split, fallback=self.patch_fallback)
                patch = patch_codes(self.patch_net, self.dbn(modality, patches=True), groups, modality, origin)
            if origin is not None and patch is not None:
                fusion = self.image_fusion if modality is Modality.IMAGE else self.text_fusion
                assert fusion is not None
                out.append(fuse(fusion, origin, patch))
            else:
                out.append(origin if origin is not None else patch)
        return out[0], out[1]


def patch_representation(dbn: DbnModel, groups: Sequence[PatchGroup]) -> FeatureMatrix:
    """Run every patch through *dbn* and average the results per instance.

    Instances with no patches get zero rows.
    """
    out = np.zeros((len(groups), dbn.out_dim))
    present = [i for i, g in enumerate(groups) if g.patch_count]
    if not present:
        return out
    counts = [groups[i].patch_count for i in present]
    hidden = dbn_forward(dbn, np.vstack([groups[i].patch_features for i in present]))
    pieces = np.split(hidden, np.cumsum(counts)[:-1])
    out[present] = np.vstack([average_fuse(piece) for piece in pieces])
    return out


def _present(groups: Sequence[PatchGroup]) -> npt.NDArray[np.bool_]:
    return np.array([g.patch_count > 0 for g in groups], dtype=bool)


def patch_codes(
    net: CorrNet,
    dbn: DbnModel,
    groups: Sequence[PatchGroup],
    modality: Modality,
    origin: FeatureMatrix | None,
) -> FeatureMatrix:
    """Patch-grain codes ``T_patch``; instances without patches take their
    row of *origin*."""
    codes = corrnet_encode(net, patch_representation(dbn, groups), modality)
    missing = ~_present(groups)
    if missing.any():
        if origin is None:
            raise DataValidationError(f"{int(missing.sum())} {modality.value} instance(s) have no patches")
        codes = codes.copy()
        codes[missing] = origin[missing]
    return codes


def _patch_fallback(mode: AblationMode, dataset: CrossModalDataset) -> bool:
    if not mode.uses_patches:
        return False
    if not mode.uses_instances:
        return True
    if dataset.has_train_patches(Modality.IMAGE) and dataset.has_train_patches(Modality.TEXT):
        return False
    logger.warning("no training patches for one modality; whole instances stand in for patches")
    return True


def _stacked_patches(dataset: CrossModalDataset, modality: Modality, split: Split, fallback: bool) -> FeatureMatrix:
    groups = dataset.patch_groups(modality, split, fallback=fallback)
    return np.vstack([g.patch_features for g in groups if g.patch_count])


def _final(errors: list[float]) -> float | None:
    return errors[-1] if errors else None


def run_stage1(
    config: ExperimentConfig,
    dataset: CrossModalDataset,
    *,
    on_epoch: EpochCallback | None = None,
) -> Checkpoint:
    """Train every stage-one component the ablation mode calls for.

    Raises:
        PreconditionError: if the train split is empty.
        DivergenceError: tagged with the failing phase.
    """
    dataset = dataset.standardize()
    if dataset.split_index(Split.TRAIN).size == 0:
        raise PreconditionError("the train split is empty")
    mode = config.mode
    rng = SeededRng(config.seed)
    phases: list[dict[str, Any]] = []
    model = StageOneModel(mode=mode, patch_fallback=_patch_fallback(mode, dataset))
    objective = _objective(mode)
    has_val = dataset.split_index(Split.VAL).size > 0

    with deterministic_mode(config.deterministic):
        for suffix, use in (("", mode.uses_instances), ("_patch", mode.uses_patches)):
            if not use:
                continue
            patches = bool(suffix)
            dbns: dict[Modality, DbnModel] = {}
            for modality in (Modality.IMAGE, Modality.TEXT):
                name = f"{modality.value}{suffix}_dbn"
                dims = config.image_dbn_dims if modality is Modality.IMAGE else config.text_dbn_dims
                cd = config.image_dbn if modality is Modality.IMAGE else config.text_dbn
                data = (
                    _stacked_patches(dataset, modality, Split.TRAIN, model.patch_fallback) if patches
                    else dataset.features(modality, Split.TRAIN)
                )
                with _phase(name, phases) as record:
                    dbns[modality] = train_dbn(
                        data, dims, cd, rng.child(name), modality=modality, on_epoch=_relay(name, on_epoch)
                    )
                    record["epochs"] = cd.epochs * len(dims)
                    record["final_loss"] = _final(dbns[modality].errors[-1])
                setattr(model, f"{modality.value}{suffix}_dbn", dbns[modality])

            def inputs(split: Split) -> tuple[FeatureMatrix, FeatureMatrix]:
                if patches:
                    # Pairs missing patches on either side stay out of patch training
                    g_image = dataset.patch_groups(Modality.IMAGE, split, fallback=model.patch_fallback)
                    g_text = dataset.patch_groups(Modality.TEXT, split, fallback=model.patch_fallback)
                    both = _present(g_image) & _present(g_text)
                    return (
                        patch_representation(dbns[Modality.IMAGE], g_image)[both],
                        patch_representation(dbns[Modality.TEXT], g_text)[both],
                    )
                return (
                    dbn_forward(dbns[Modality.IMAGE], dataset.features(Modality.IMAGE, split)),
                    dbn_forward(dbns[Modality.TEXT], dataset.features(Modality.TEXT, split)),
                )

            name = "patch_corrnet" if patches else "instance_corrnet"
            qi, qt = inputs(Split.TRAIN)
            if qi.shape[0] == 0:
                raise DataValidationError("no training pair has patches in both modalities")
            validation = inputs(Split.VAL) if has_val else None
            if validation is not None and validation[0].shape[0] == 0:
                validation = None
            net_rng = rng.child(name)
            with _phase(name, phases) as record:
                net = build_corrnet(qi.shape[1], qt.shape[1], config.corrnet, net_rng.child("init"))
                fit = corrnet_train(
                    net, qi, qt, config.corrnet, net_rng.child("train"),
                    objective=objective,
                    validation=validation,
                    on_epoch=(lambda e, _n=name: on_epoch(_n, e.epoch, e.train.total)) if on_epoch else None,
                )
                record["epochs"] = len(fit.history)
                if fit.history:
                    last = fit.history[-1]
                    record["final_loss"] = last.train.total
                    record["correlation"] = last.train.correlation
                    if last.validation is not None:
                        record["validation_loss"] = last.validation.total
            if patches:
                model.patch_net = fit.net
            else:
                model.instance_net = fit.net

        if mode.uses_fusion:
            assert model.instance_net is not None and model.patch_net is not None
            for modality in (Modality.IMAGE, Modality.TEXT):
                name = f"{modality.value}_fusion"
                origin = corrnet_encode(
                    model.instance_net,
                    dbn_forward(model.dbn(modality), dataset.features(modality, Split.TRAIN)),
                    modality,
                )
                patch = patch_codes(
                    model.patch_net,
                    model.dbn(modality, patches=True),
                    dataset.patch_groups(modality, Split.TRAIN, fallback=model.patch_fallback),
                    modality,
                    origin,
                )
                errors: list[float] = []
                with _phase(name, phases) as record:
                    fusion = train_fusion(
                        config.fusion.cd, origin, patch, rng.child(name),
                        pathway_dim=config.fusion.pathway_dim,
                        output_dim=config.fusion.output_dim,
                        on_epoch=lambda part, epoch, err, _n=name: _fusion_epoch(_n, part, epoch, err, errors, on_epoch),
                    )
                    record["epochs"] = config.fusion.cd.epochs * 3
                    record["final_loss"] = _final(errors)
                setattr(model, name, fusion)

    ckpt = Checkpoint(stage=STAGE_ONE, config=config, seed=config.seed)
    store_stage_one(ckpt, model)
    ckpt.meta = {
        "dataset": dataset.name,
        "image_dim": dataset.image_dim,
        "text_dim": dataset.text_dim,
        "phases": phases,
        "patch_fallback": model.patch_fallback,
    }
    return ckpt


def _fusion_epoch(
    name: str, part: str, epoch: int, err: float, errors: list[float], on_epoch: EpochCallback | None
) -> None:
    if part == "top":
        errors.append(err)
    if on_epoch is not None:
        on_epoch(f"{name}/{part}", epoch, err)


_STAGE_ONE_PARTS = {
    "image_dbn": "dbn",
    "text_dbn": "dbn",
    "image_patch_dbn": "dbn",
    "text_patch_dbn": "dbn",
    "instance_net": "corrnet",
    "patch_net": "corrnet",
    "image_fusion": "fusion",
    "text_fusion": "fusion",
}


def store_stage_one(ckpt: Checkpoint, model: StageOneModel) -> None:
    writers = {"dbn": put_dbn, "corrnet": put_corrnet, "fusion": put_fusion}
    for attr, kind in _STAGE_ONE_PARTS.items():
        part = getattr(model, attr)
        if part is not None:
            writers[kind](ckpt, f"{STAGE_ONE}/{attr}", part)


def load_stage_one(ckpt: Checkpoint) -> StageOneModel:
    readers = {"dbn": get_dbn, "corrnet": get_corrnet, "fusion": get_fusion}
    mode = ckpt.config.mode
    model = StageOneModel(mode=mode, patch_fallback=ckpt.meta.get("patch_fallback", not mode.uses_instances))
    for attr, kind in _STAGE_ONE_PARTS.items():
        prefix = f"{STAGE_ONE}/{attr}"
        if ckpt.has_prefix(prefix):
            setattr(model, attr, readers[kind](ckpt, prefix))
    return model


def _check_dataset(ckpt: Checkpoint, dataset: CrossModalDataset) -> None:
    for key, actual in (("image_dim", dataset.image_dim), ("text_dim", dataset.text_dim)):
        expected = ckpt.meta.get(key)
        if expected is not None and expected != actual:
            raise CompatibilityError(
                f"checkpoint was trained with {key} = {expected}, dataset has {actual}"
            )


# ---------------------------------------------------------------------------
# Stage two
# ---------------------------------------------------------------------------

def run_stage2(
    config: ExperimentConfig,
    dataset: CrossModalDataset,
    stage1: Checkpoint,
    *,
    on_epoch: EpochCallback | None = None,
) -> Checkpoint:
    """Train the common-space mapping on top of a stage-one checkpoint.

    Labels are used only when ``stage2.lam > 0`` and the dataset has them;
    otherwise training runs label-free with co-existence similarity.

    Raises:
        CompatibilityError: if the checkpoint does not fit *config* or *dataset*.
    """
    if stage1.stage != STAGE_ONE:
        raise CompatibilityError(f"expected a {STAGE_ONE} checkpoint, got {stage1.stage!r}")
    if stage1.config.mode is not config.mode:
        raise CompatibilityError(
            f"stage-one checkpoint was trained in mode {stage1.config.mode.value}, "
            f"config asks for {config.mode.value}"
        )
    dataset = dataset.standardize()
    _check_dataset(stage1, dataset)
    stage_one = load_stage_one(stage1)
    cfg = config.stage2
    use_labels = cfg.lam > 0 and dataset.has_labels
    if not use_labels:
        logger.info("stage 2 runs label-free (co-existence similarity, no class heads)")

    with deterministic_mode(config.deterministic):
        s_image, s_text = stage_one.separate(dataset, Split.TRAIN)
        labels = dataset.labels_for(Split.TRAIN) if use_labels else None
        validation = None
        if dataset.split_index(Split.VAL).size:
            v_image, v_text = stage_one.separate(dataset, Split.VAL)
            validation = (v_image, v_text, dataset.labels_for(Split.VAL) if use_labels else None)

        rng = SeededRng(config.seed).child(STAGE_TWO)
        model = build_stage_two(s_image.shape[1], s_text.shape[1], cfg, rng.child("init"), classes=labels)
        phases: list[dict[str, Any]] = []
        with _phase("multitask", phases) as record:
            fit = multitask_train(
                model, s_image, s_text, cfg, rng.child("train"),
                labels=labels,
                validation=validation,
                on_epoch=(lambda e: on_epoch("multitask", e.epoch, e.train.total)) if on_epoch else None,
            )
            record["epochs"] = len(fit.history)
            record["final_loss"] = fit.history[-1].train.total if fit.history else None

    ckpt = Checkpoint(stage=STAGE_TWO, config=config, seed=config.seed)
    ckpt.tensors.update(stage1.tensors)
    ckpt.attrs.update(stage1.attrs)
    put_stage_two(ckpt, STAGE_TWO, fit.model)
    ckpt.meta = {
        **stage1.meta,
        "phases": list(stage1.meta.get("phases", [])) + phases,
        "label_free": not use_labels,
        "history": [
            {
                "epoch": e.epoch,
                "total": e.train.total,
                "contrastive": e.train.contrastive,
                "ce_image": e.train.ce_image,
                "ce_text": e.train.ce_text,
                "validation": e.validation,
            }
            for e in fit.history
        ],
    }
    return ckpt


def load_stage_two(ckpt: Checkpoint) -> tuple[StageOneModel, StageTwoModel]:
    if ckpt.stage != STAGE_TWO:
        raise CompatibilityError(f"expected a {STAGE_TWO} checkpoint, got {ckpt.stage!r}")
    return load_stage_one(ckpt), get_stage_two(ckpt, STAGE_TWO)


# ---------------------------------------------------------------------------
# Evaluation
# ---------------------------------------------------------------------------

def common_representations(
    ckpt: Checkpoint, dataset: CrossModalDataset, split: Split = Split.TEST
) -> tuple[FeatureMatrix, FeatureMatrix]:
    stage_one, stage_two = load_stage_two(ckpt)
    dataset = dataset.standardize()
    _check_dataset(ckpt, dataset)
    with deterministic_mode(ckpt.config.deterministic):
        s_image, s_text = stage_one.separate(dataset, split)
        return encode_common(stage_two, s_image, Modality.IMAGE), encode_common(stage_two, s_text, Modality.TEXT)


def run_eval(
    config: ExperimentConfig,
    dataset: CrossModalDataset,
    stage2: Checkpoint,
    task: Task | str = Task.BI_MODAL,
    *,
    out_dir: str | Path | None = None,
) -> MetricsReport:
    """Encode the test split and run *task*; write report files to *out_dir*.

    Raises:
        PreconditionError: if the test split is empty.
        ConfigurationError: if *task* needs labels the dataset lacks.
    """
    task = Task(task)
    if dataset.split_index(Split.TEST).size == 0:
        raise PreconditionError("the test split is empty")
    if task.needs_labels and not dataset.has_labels:
        raise ConfigurationError(f"task {task.value} needs labels but the dataset has none")
    m_image, m_text = common_representations(stage2, dataset, Split.TEST)
    report = evaluate_task(
        task, m_image, m_text,
        labels=dataset.labels_for(Split.TEST) if task.needs_labels else None,
        ids=dataset.split_ids(Split.TEST),
        cfg=config.eval,
    )
    for name, value in report.metrics().items():
        logger.info("%s %s = %.6f", task.value, name, value)
    if out_dir is not None:
        write_eval_outputs(report, out_dir)
    return report


# ---------------------------------------------------------------------------
# Sweeps
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SweepPoint:
    value: float
    report: MetricsReport

    @property
    def score(self) -> float:
        """MAP average, or R@1 for recall-only tasks."""
        if self.report.map_average is not None:
            return self.report.map_average
        return self.report.recall_at.get(1, 0.0)


def sweep(
    config: ExperimentConfig,
    dataset: CrossModalDataset,
    stage1: Checkpoint,
    key: str,
    values: Sequence[float],
    task: Task | str = Task.BI_MODAL,
) -> list[SweepPoint]:
    """Retrain stage two for every value of the dotted config *key*."""
    points = []
    for value in values:
        cfg = apply_overrides(config, {key: value})
        stage2 = run_stage2(cfg, dataset, stage1)
        report = run_eval(cfg, dataset, stage2, task)
        points.append(SweepPoint(float(value), report))
        logger.info("sweep %s = %g: score %.6f", key, value, points[-1].score)
    return points


def sweep_alpha(
    config: ExperimentConfig,
    dataset: CrossModalDataset,
    stage1: Checkpoint,
    alphas: Sequence[float] = settings.ALPHA_SWEEP,
    task: Task | str = Task.BI_MODAL,
) -> list[SweepPoint]:
    return sweep(config, dataset, stage1, "stage2.alpha", alphas, task)


def sweep_learning_rate(
    config: ExperimentConfig,
    dataset: CrossModalDataset,
    stage1: Checkpoint,
    rates: Sequence[float] = settings.LEARNING_RATE_SWEEP,
    task: Task | str = Task.BI_MODAL,
) -> list[SweepPoint]:
    return sweep(config, dataset, stage1, "stage2.learning_rate", rates, task)


def run_all(
    config: ExperimentConfig,
    dataset: CrossModalDataset,
    task: Task | str = Task.BI_MODAL,
    *,
    on_epoch: EpochCallback | None = None,
) -> tuple[Checkpoint, Checkpoint, MetricsReport]:
    """Stage one, stage two and evaluation in memory."""
    stage1 = run_stage1(config, dataset, on_epoch=on_epoch)
    stage2 = run_stage2(config, dataset, stage1, on_epoch=on_epoch)
    return stage1, stage2, run_eval(config, dataset, stage2, task)
