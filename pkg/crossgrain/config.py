"""Pydantic configuration schemas and the flat ``key = value`` file format.

Config files are plain text::

    # comment
    seed = 7
    mode = coarse-only
    image_dbn_dims = 64, 32
    stage2.alpha = 1.5

Dotted keys address nested sections, comma-separated values fill list
fields and ``none`` maps to null.  Unknown keys are rejected.
"""

from __future__ import annotations

from enum import Enum
from pathlib import Path
from typing import Annotated, Any, Literal, Optional

from pydantic import BaseModel, BeforeValidator, ConfigDict, Field, ValidationError, field_validator, model_validator

from crossgrain import settings
from crossgrain.errors import ConfigurationError, FormatError


def _split_csv(value: Any) -> Any:
    if isinstance(value, str):
        return [part.strip() for part in value.split(",") if part.strip()]
    return value


IntList = Annotated[list[int], BeforeValidator(_split_csv)]


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid", validate_assignment=True)


# ---------------------------------------------------------------------------
# Training phases
# ---------------------------------------------------------------------------

class CdConfig(_Strict):
    """Contrastive-divergence hyperparameters for one RBM training phase."""

    k: int = Field(settings.CD_STEPS, ge=1)
    learning_rate: float = Field(settings.CD_LEARNING_RATE, ge=0.0, le=1.0)
    batch_size: int = Field(settings.CD_BATCH_SIZE, ge=1)
    epochs: int = Field(settings.CD_EPOCHS, ge=0)
    momentum: float = Field(settings.CD_MOMENTUM, ge=0.0, lt=1.0)
    weight_decay: float = Field(settings.CD_WEIGHT_DECAY, ge=0.0)
    # Propagate probabilities instead of binary hidden samples in the chain
    mean_field: bool = False
    # Sample visible reconstructions instead of using their means
    sample_visible: bool = False


class CorrNetConfig(_Strict):
    hidden_dims: IntList = Field(default_factory=lambda: list(settings.CORRNET_HIDDEN_DIMS))
    code_dim: int = Field(settings.CORRNET_CODE_DIM, ge=1)
    activation: Literal["sigmoid", "relu", "tanh", "linear"] = "sigmoid"
    learning_rate: float = Field(settings.CORRNET_LEARNING_RATE, ge=0.0, le=1.0)
    epochs: int = Field(settings.CORRNET_EPOCHS, ge=0)
    batch_size: int = Field(settings.CORRNET_BATCH_SIZE, ge=1)
    momentum: float = Field(settings.CORRNET_MOMENTUM, ge=0.0, lt=1.0)

    @field_validator("hidden_dims")
    @classmethod
    def _positive_dims(cls, v: list[int]) -> list[int]:
        if any(d < 1 for d in v):
            raise ValueError("layer widths must be positive")
        return v


class FusionConfig(_Strict):
    pathway_dim: int = Field(settings.FUSION_PATHWAY_DIM, ge=1)
    output_dim: int = Field(settings.FUSION_OUTPUT_DIM, ge=1)
    cd: CdConfig = Field(default_factory=CdConfig)


class StageTwoConfig(_Strict):
    layer_dims: IntList = Field(default_factory=lambda: list(settings.STAGE2_LAYER_DIMS))
    learning_rate: float = Field(settings.STAGE2_LEARNING_RATE, ge=0.0, le=1.0)
    epochs: int = Field(settings.STAGE2_EPOCHS, ge=0)
    batch_size: int = Field(settings.STAGE2_BATCH_SIZE, ge=1)
    momentum: float = Field(settings.STAGE2_MOMENTUM, ge=0.0, lt=1.0)
    alpha: float = Field(settings.MARGIN_ALPHA, gt=0.0)
    lam: float = Field(settings.BRANCH_WEIGHT_LAMBDA, ge=0.0)
    # Activation of every layer but the last, which is always linear
    hidden_activation: Literal["relu", "sigmoid", "tanh", "linear"] = "relu"
    dropout: float = Field(settings.DROPOUT_RATE, ge=0.0, lt=1.0)
    # Cap on negative pairs per mini-batch; none uses every negative pair
    max_negatives: Optional[int] = Field(None, ge=1)

    @field_validator("layer_dims")
    @classmethod
    def _positive_layers(cls, v: list[int]) -> list[int]:
        if not v or any(d < 1 for d in v):
            raise ValueError("layer_dims must list positive widths")
        return v


class EvalConfig(_Strict):
    exclude_own_pair: bool = settings.EXCLUDE_OWN_PAIR
    recall_ks: IntList = Field(default_factory=lambda: list(settings.RECALL_KS))
    scope_grid: IntList = Field(default_factory=lambda: list(settings.SCOPE_GRID))


class AblationMode(str, Enum):
    FULL = "full"
    COARSE_ONLY = "coarse-only"
    FINE_ONLY = "fine-only"
    INTRA_ONLY = "intra-only"
    INTER_ONLY = "inter-only"

    @property
    def uses_instances(self) -> bool:
        return self is not AblationMode.FINE_ONLY

    @property
    def uses_patches(self) -> bool:
        return self is not AblationMode.COARSE_ONLY

    @property
    def uses_fusion(self) -> bool:
        return self.uses_instances and self.uses_patches


class ExperimentConfig(_Strict):
    """Everything a pipeline run needs besides the data."""

    seed: int = settings.DEFAULT_SEED
    deterministic: bool = settings.DETERMINISTIC
    mode: AblationMode = AblationMode.FULL

    image_dbn_dims: IntList = Field(default_factory=lambda: list(settings.IMAGE_DBN_DIMS))
    text_dbn_dims: IntList = Field(default_factory=lambda: list(settings.TEXT_DBN_DIMS))
    image_dbn: CdConfig = Field(default_factory=lambda: CdConfig(learning_rate=settings.DBN_LEARNING_RATE))
    text_dbn: CdConfig = Field(default_factory=lambda: CdConfig(learning_rate=settings.DBN_LEARNING_RATE))

    corrnet: CorrNetConfig = Field(default_factory=CorrNetConfig)
    fusion: FusionConfig = Field(default_factory=FusionConfig)
    stage2: StageTwoConfig = Field(default_factory=StageTwoConfig)
    eval: EvalConfig = Field(default_factory=EvalConfig)

    @field_validator("image_dbn_dims", "text_dbn_dims")
    @classmethod
    def _nonempty_dims(cls, v: list[int]) -> list[int]:
        if not v or any(d < 1 for d in v):
            raise ValueError("DBN dims must be a non-empty list of positive widths")
        return v


# ---------------------------------------------------------------------------
# Data descriptions
# ---------------------------------------------------------------------------

TextPatchStyle = Literal["tags", "paragraphs", "sentences"]


class DatasetManifest(_Strict):
    """Where a dataset lives on disk and what shape it has."""

    name: str = "dataset"
    image_features: Path
    text_features: Path
    splits: Path
    labels: Optional[Path] = None
    image_patches: Optional[Path] = None
    text_patches: Optional[Path] = None
    image_dim: int = Field(ge=1)
    text_dim: int = Field(ge=1)
    text_patch_style: TextPatchStyle = "tags"

    @model_validator(mode="after")
    def _files_exist(self) -> DatasetManifest:
        for key in ("image_features", "text_features", "splits", "labels", "image_patches", "text_patches"):
            path = getattr(self, key)
            if path is not None and not Path(path).is_file():
                raise ValueError(f"{key} file does not exist: {path}")
        return self


class SynthSpec(_Strict):
    """Parameters of the synthetic cross-modal generator."""

    classes: int = Field(4, ge=1)
    per_class: int = Field(50, ge=1)
    latent_dim: int = Field(8, ge=1)
    image_dim: int = Field(32, ge=1)
    text_dim: int = Field(40, ge=1)
    noise: float = Field(0.5, ge=0.0)
    # Extra noise applied when drawing patches around an instance
    patch_noise: float = Field(0.5, ge=0.0)
    # Spread of the class prototypes in latent space
    spread: float = Field(3.0, gt=0.0)
    doc_length: int = Field(100, ge=1)
    patches_per_image: int = Field(4, ge=1, le=settings.MAX_IMAGE_PATCHES)
    patches_per_text: int = Field(4, ge=1, le=settings.MAX_TAG_PATCHES)
    text_patch_style: TextPatchStyle = "tags"
    val_fraction: float = Field(0.1, ge=0.0, lt=1.0)
    test_fraction: float = Field(0.2, gt=0.0, lt=1.0)
    seed: int = settings.DEFAULT_SEED

    @model_validator(mode="after")
    def _fractions(self) -> SynthSpec:
        if self.val_fraction + self.test_fraction >= 1.0:
            raise ValueError("val_fraction + test_fraction must leave a training split")
        return self


# ---------------------------------------------------------------------------
# Flat key = value files
# ---------------------------------------------------------------------------

def parse_key_values(text: str, *, path: str = "") -> dict[str, Any]:
    """Parse ``key = value`` lines into a nested dict (dotted keys nest)."""
    nested: dict[str, Any] = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise FormatError(f"expected 'key = value', got {raw.strip()!r}", path=path, line=lineno)
        key, value = (part.strip() for part in line.split("=", 1))
        if not key:
            raise FormatError("empty key", path=path, line=lineno)
        _assign(nested, key, None if value.lower() == "none" else value, path=path, line=lineno)
    return nested


def _assign(nested: dict[str, Any], dotted: str, value: Any, *, path: str = "", line: int = 0) -> None:
    parts = dotted.split(".")
    node = nested
    for part in parts[:-1]:
        child = node.setdefault(part, {})
        if not isinstance(child, dict):
            raise FormatError(f"key {dotted!r} conflicts with a scalar value", path=path, line=line)
        node = child
    if parts[-1] in node:
        raise FormatError(f"duplicate key {dotted!r}", path=path, line=line)
    node[parts[-1]] = value


def _validated(model: type[_Strict], data: dict[str, Any], source: str) -> Any:
    try:
        return model.model_validate(data)
    except ValidationError as exc:
        problems = "; ".join(
            f"{'.'.join(str(p) for p in err['loc']) or '<root>'}: {err['msg']}"
            for err in exc.errors()
        )
        raise ConfigurationError(f"{source}: {problems}") from exc


def load_experiment_config(path: str | Path | None = None, **overrides: Any) -> ExperimentConfig:
    """Read an experiment config file (or start from defaults) and apply
    dotted-key overrides given as keyword arguments with ``__`` for dots."""
    data: dict[str, Any] = {}
    source = "defaults"
    if path is not None:
        path = Path(path)
        source = str(path)
        data = parse_key_values(path.read_text(encoding="utf-8"), path=source)
    for key, value in overrides.items():
        if value is not None:
            _merge(data, key.replace("__", "."), value)
    return _validated(ExperimentConfig, data, source)


def apply_overrides(config: ExperimentConfig, overrides: dict[str, Any]) -> ExperimentConfig:
    """Return a copy of *config* with dotted-key overrides applied."""
    data = config.model_dump(mode="json")
    for key, value in overrides.items():
        _merge(data, key, value)
    return _validated(ExperimentConfig, data, "overrides")


def _merge(data: dict[str, Any], dotted: str, value: Any) -> None:
    parts = dotted.split(".")
    node = data
    for part in parts[:-1]:
        node = node.setdefault(part, {})
    node[parts[-1]] = value


def load_manifest(path: str | Path) -> DatasetManifest:
    """Read a manifest; relative file paths resolve against its directory."""
    path = Path(path)
    data = parse_key_values(path.read_text(encoding="utf-8"), path=str(path))
    for key in ("image_features", "text_features", "splits", "labels", "image_patches", "text_patches"):
        value = data.get(key)
        if isinstance(value, str):
            candidate = Path(value)
            data[key] = candidate if candidate.is_absolute() else path.parent / candidate
    return _validated(DatasetManifest, data, str(path))


def load_synth_spec(path: str | Path | None = None, **overrides: Any) -> SynthSpec:
    data: dict[str, Any] = {}
    source = "defaults"
    if path is not None:
        path = Path(path)
        source = str(path)
        data = parse_key_values(path.read_text(encoding="utf-8"), path=source)
    data.update({k: v for k, v in overrides.items() if v is not None})
    return _validated(SynthSpec, data, source)


def dump_key_values(model: BaseModel) -> str:
    """Render *model* in the flat file format (inverse of the loaders)."""
    lines: list[str] = []

    def walk(prefix: str, value: Any) -> None:
        if isinstance(value, dict):
            for key, inner in value.items():
                walk(f"{prefix}.{key}" if prefix else key, inner)
        elif isinstance(value, list):
            lines.append(f"{prefix} = {', '.join(str(v) for v in value)}")
        elif value is None:
            lines.append(f"{prefix} = none")
        else:
            lines.append(f"{prefix} = {value}")

    walk("", model.model_dump(mode="json"))
    return "\n".join(lines) + "\n"
