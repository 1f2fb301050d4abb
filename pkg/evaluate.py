"""Quick evaluation script: train on a synthetic dataset and print the metrics.

Run:
    python evaluate.py

Requires the package to be installed:
    pip install -e ".[dev]"

Everything runs in memory (no checkpoints or report files are written).
Widths and epochs are scaled down so one run finishes in well under a minute;
change SPEC / MODE / the config overrides below to try other settings.
"""

from __future__ import annotations

from crossgrain import AblationMode, CrossGrainError, ExperimentConfig, MetricsReport, SynthSpec, generate, run_all
from crossgrain.config import apply_overrides

# ── change these to evaluate other settings ───────────────────────────────────
SPEC = SynthSpec(classes=4, per_class=50, seed=0)
MODE = AblationMode.FULL
OVERRIDES: dict[str, object] = {
    "image_dbn_dims": [64, 32],
    "text_dbn_dims": [64, 32],
    "image_dbn.learning_rate": 0.01,
    "image_dbn.epochs": 5,
    "text_dbn.epochs": 5,
    "corrnet.hidden_dims": [32],
    "corrnet.code_dim": 32,
    "corrnet.learning_rate": 0.05,
    "fusion.pathway_dim": 32,
    "fusion.output_dim": 32,
    "fusion.cd.epochs": 5,
    "stage2.layer_dims": [32, 32, 32],
    "stage2.learning_rate": 0.01,
    "stage2.epochs": 20,
    "stage2.dropout": 0.0,
}
# ──────────────────────────────────────────────────────────────────────────────

SEP = "-" * 72


def demo_config(mode: AblationMode = MODE, seed: int = 0) -> ExperimentConfig:
    return apply_overrides(ExperimentConfig(), {**OVERRIDES, "mode": mode.value, "seed": seed})


def run_demo(spec: SynthSpec = SPEC, config: ExperimentConfig | None = None) -> tuple[dict, MetricsReport]:
    """Train both stages on ``generate(spec)`` and evaluate the bi-modal task.

    Returns the stage-two checkpoint metadata and the report.
    """
    config = config or demo_config()
    _, stage2, report = run_all(config, generate(spec))
    return stage2.meta, report


def _print_run(meta: dict, report: MetricsReport) -> None:
    print(SEP)
    print(f"  Dataset      : {meta.get('dataset', '—')}")
    print(f"  Image dim    : {meta.get('image_dim', '—')}")
    print(f"  Text dim     : {meta.get('text_dim', '—')}")
    print(f"  Label-free   : {meta.get('label_free')}")
    print(SEP)

    print(f"\nTRAINING PHASES  ({len(meta.get('phases', []))})")
    for record in meta.get("phases", []):
        final = record.get("final_loss")
        print(f"  {record['phase']:<24} epochs {record.get('epochs', 0):>4}  "
              f"final loss {'—' if final is None else f'{final:.6f}'}")

    print("\nMETRICS")
    for name, value in report.metrics().items():
        print(f"  {name:<20}: {value:.6f}")

    if report.scope_curve:
        print("\nPRECISION @ SCOPE")
        for k, p in report.scope_curve:
            print(f"  {int(k):>6} : {p:.4f}")
    print(SEP)


def main() -> int:
    print(f"Training on {SPEC.classes} classes x {SPEC.per_class} pairs, mode {MODE.value}")
    try:
        meta, report = run_demo()
    except CrossGrainError as exc:
        print(f"[ERROR] {type(exc).__name__}: {exc}")
        return 1
    _print_run(meta, report)
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
