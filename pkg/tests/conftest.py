"""Shared pytest fixtures."""

from __future__ import annotations

from pathlib import Path

import numpy as np
import pytest

from crossgrain.config import CdConfig, CorrNetConfig, EvalConfig, ExperimentConfig, FusionConfig, StageTwoConfig, SynthSpec
from crossgrain.core.numeric import SeededRng
from crossgrain.data import CrossModalDataset, write_dataset
from crossgrain.synth import generate


def small_config(**updates) -> ExperimentConfig:
    """Desk-scale widths and short schedules; every test run stays fast."""
    config = ExperimentConfig(
        seed=0,
        image_dbn_dims=[48, 32],
        text_dbn_dims=[48, 32],
        image_dbn=CdConfig(learning_rate=0.01, epochs=5, batch_size=16),
        text_dbn=CdConfig(learning_rate=0.001, epochs=5, batch_size=16),
        corrnet=CorrNetConfig(hidden_dims=[32], code_dim=32, learning_rate=0.05, epochs=10, batch_size=16),
        fusion=FusionConfig(pathway_dim=32, output_dim=32, cd=CdConfig(learning_rate=0.01, epochs=5, batch_size=16)),
        stage2=StageTwoConfig(layer_dims=[32, 32, 32], learning_rate=0.01, epochs=20, batch_size=32, dropout=0.0),
        eval=EvalConfig(scope_grid=[10, 20, 50]),
    )
    if not updates:
        return config
    return ExperimentConfig.model_validate({**dict(config), **updates})


@pytest.fixture
def rng() -> SeededRng:
    return SeededRng(1234)


@pytest.fixture
def config() -> ExperimentConfig:
    return small_config()


@pytest.fixture
def make_config():
    return small_config


@pytest.fixture
def synth_spec() -> SynthSpec:
    return SynthSpec(classes=4, per_class=20, image_dim=16, text_dim=20, seed=3)


@pytest.fixture
def dataset(synth_spec: SynthSpec) -> CrossModalDataset:
    return generate(synth_spec)


@pytest.fixture
def manifest_path(dataset: CrossModalDataset, tmp_path: Path) -> Path:
    return write_dataset(dataset, tmp_path / "data")


@pytest.fixture
def toy_patterns() -> np.ndarray:
    """Four binary patterns over sixteen units, repeated to 64 rows."""
    patterns = np.array(
        [
            [1, 1, 1, 1, 0, 0, 0, 0, 1, 1, 1, 1, 0, 0, 0, 0],
            [0, 0, 0, 0, 1, 1, 1, 1, 0, 0, 0, 0, 1, 1, 1, 1],
            [1, 0, 1, 0, 1, 0, 1, 0, 1, 0, 1, 0, 1, 0, 1, 0],
            [0, 1, 0, 1, 0, 1, 0, 1, 0, 1, 0, 1, 0, 1, 0, 1],
        ],
        dtype=np.float64,
    )
    return np.tile(patterns, (16, 1))
