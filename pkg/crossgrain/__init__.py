"""crossgrain – cross-modal retrieval with multi-grained representations.

Quick in-memory usage::

    from crossgrain import ExperimentConfig, SynthSpec, generate, run_all

    dataset = generate(SynthSpec(classes=4, per_class=50))
    stage1, stage2, report = run_all(ExperimentConfig(), dataset)
    print(report.map_average)
"""

from crossgrain.checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from crossgrain.config import AblationMode, ExperimentConfig, SynthSpec, load_experiment_config
from crossgrain.data import CrossModalDataset, ingest
from crossgrain.errors import CrossGrainError
from crossgrain.pipeline import run_all, run_eval, run_stage1, run_stage2
from crossgrain.retrieval import MetricsReport, Task
from crossgrain.synth import generate

__version__ = "0.1.0"
__all__ = [
    "AblationMode",
    "Checkpoint",
    "CrossGrainError",
    "CrossModalDataset",
    "ExperimentConfig",
    "MetricsReport",
    "SynthSpec",
    "Task",
    "generate",
    "ingest",
    "load_checkpoint",
    "load_experiment_config",
    "run_all",
    "run_eval",
    "run_stage1",
    "run_stage2",
    "save_checkpoint",
]
