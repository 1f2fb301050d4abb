"""CLI entry point: python -m crossgrain <command> [options]"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path
from typing import Any

from pydantic import ValidationError

from crossgrain import settings
from crossgrain.errors import CrossGrainError

STAGE1_FILE = "stage1.ckpt"
STAGE2_FILE = "stage2.ckpt"

COMMANDS = ("gen-synth", "ingest-check", "train-stage1", "train-stage2", "eval", "sweep-alpha", "sweep-lr")


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="crossgrain",
        description=(
            "Cross-modal retrieval with multi-grained representations.\n"
            "Stage 1 fuses instance and patch views, stage 2 learns a common space."
        ),
        formatter_class=argparse.RawDescriptionHelpFormatter,
    )
    parser.add_argument("command", choices=COMMANDS, metavar="{" + ",".join(COMMANDS) + "}",
                        help="What to run")
    parser.add_argument("--config", default=None, metavar="FILE",
                        help="Experiment config (or synthetic spec for gen-synth), key = value format")
    parser.add_argument("--manifest", default=None, metavar="FILE",
                        help="Dataset manifest")
    parser.add_argument("--checkpoint", default=None, metavar="FILE",
                        help="Input checkpoint (stage 1 for train-stage2 and sweeps, stage 2 for eval)")
    parser.add_argument("--out", default="./out", metavar="DIR",
                        help="Output directory (default: ./out)")
    parser.add_argument("--seed", type=int, default=None, metavar="N",
                        help="Override the config seed")
    parser.add_argument("--mode", default=None,
                        choices=["full", "coarse-only", "fine-only", "intra-only", "inter-only"],
                        metavar="{full,coarse-only,fine-only,intra-only,inter-only}",
                        help="Override the ablation mode")
    parser.add_argument("--task", default="bi-modal",
                        choices=["bi-modal", "all-modal", "annotation", "retrieval"],
                        metavar="{bi-modal,all-modal,annotation,retrieval}",
                        help="Evaluation task (default: bi-modal)")
    parser.add_argument("--values", default=None, metavar="LIST",
                        help="Comma-separated values for sweep-alpha / sweep-lr")
    parser.add_argument("--log-level", default=settings.LOG_LEVEL,
                        choices=["DEBUG", "INFO", "WARNING", "ERROR"],
                        metavar="{DEBUG,INFO,WARNING,ERROR}",
                        help=f"Logging level (default: {settings.LOG_LEVEL})")
    parser.add_argument("--progress", action="store_true", default=False,
                        help="Show live Rich progress bars (sets log-level to WARNING)")
    return parser


_REQUIRED = {
    "ingest-check": ("manifest",),
    "train-stage1": ("manifest",),
    "train-stage2": ("manifest", "checkpoint"),
    "eval": ("manifest", "checkpoint"),
    "sweep-alpha": ("manifest", "checkpoint"),
    "sweep-lr": ("manifest", "checkpoint"),
}


def _missing_flags(args: argparse.Namespace) -> str | None:
    missing = [f"--{name}" for name in _REQUIRED.get(args.command, ()) if getattr(args, name) is None]
    if missing:
        return f"{args.command} needs {', '.join(missing)}"
    return None


def _parse_values(text: str | None) -> list[float] | None:
    if text is None:
        return None
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        return None


def _print_banner(args: argparse.Namespace) -> None:
    try:
        from rich.console import Console
        from rich.panel import Panel

        console = Console()
        console.print(
            Panel.fit(
                f"[bold cyan]crossgrain[/bold cyan] [bold]{args.command}[/bold]\n"
                f"Config:      {args.config or 'defaults'}\n"
                f"Manifest:    [green]{args.manifest or '-'}[/green]\n"
                f"Checkpoint:  {args.checkpoint or '-'}\n"
                f"Output:      [yellow]{args.out}[/yellow]\n"
                f"Seed:        {args.seed if args.seed is not None else 'from config'}\n"
                f"Mode:        {args.mode or 'from config'}\n"
                f"Task:        {args.task}",
                border_style="cyan",
                title="[bold]Configuration[/bold]",
            )
        )
    except ImportError:
        print(f"crossgrain {args.command} | Out: {args.out}")


def _print_phases(phases: list[dict[str, Any]], metrics: dict[str, float] | None = None) -> None:
    try:
        from rich import box
        from rich.console import Console
        from rich.table import Table

        console = Console()
        if phases:
            tbl = Table(title="[bold green]Training phases[/bold green]", box=box.SIMPLE_HEAVY)
            tbl.add_column("Phase", style="cyan", no_wrap=True)
            tbl.add_column("Epochs", justify="right")
            tbl.add_column("Final loss", justify="right")
            tbl.add_column("Validation", justify="right", style="dim")
            for record in phases:
                final = record.get("final_loss")
                val = record.get("validation_loss")
                tbl.add_row(
                    record["phase"],
                    str(record.get("epochs", 0)),
                    "-" if final is None else f"{final:.6f}",
                    "-" if val is None else f"{val:.6f}",
                )
            console.print(tbl)
        if metrics:
            mtbl = Table(title="[bold green]Metrics[/bold green]", box=box.SIMPLE_HEAVY)
            mtbl.add_column("Metric", style="cyan", no_wrap=True)
            mtbl.add_column("Value", justify="right")
            for name, value in metrics.items():
                mtbl.add_row(name, f"{value:.6f}")
            console.print(mtbl)
    except ImportError:
        pass


def main(argv: list[str] | None = None) -> int:
    parser = _build_parser()
    args = parser.parse_args(argv)

    flag_err = _missing_flags(args)
    if flag_err:
        print(f"ERROR: {flag_err}", file=sys.stderr)
        return 1
    values = _parse_values(args.values)
    if args.values is not None and not values:
        print(f"ERROR: --values must be a comma-separated list of numbers, got {args.values!r}", file=sys.stderr)
        return 1

    _print_banner(args)

    effective_log_level = "WARNING" if args.progress else args.log_level
    logging.basicConfig(
        level=getattr(logging, effective_log_level, logging.INFO),
        format=settings.LOG_FORMAT,
    )

    out_dir = Path(args.out).resolve()
    try:
        return _dispatch(args, out_dir, values)
    except (CrossGrainError, ValidationError, OSError) as exc:
        print(f"ERROR: {exc}", file=sys.stderr)
        return 1


def _dispatch(args: argparse.Namespace, out_dir: Path, values: list[float] | None) -> int:
    from crossgrain import pipeline
    from crossgrain.checkpoint import load_checkpoint, save_checkpoint
    from crossgrain.config import apply_overrides, load_experiment_config, load_synth_spec
    from crossgrain.data import ingest, write_dataset
    from crossgrain.progress import TrainingProgress
    from crossgrain.reports import write_summary, write_sweep_csv

    if args.command == "gen-synth":
        from crossgrain.synth import generate

        spec = load_synth_spec(args.config, seed=args.seed)
        manifest = write_dataset(generate(spec), out_dir)
        write_summary(out_dir, title="synthetic dataset", facts={"Manifest": manifest, **spec.model_dump()})
        print(f"Manifest: {manifest}")
        return 0

    dataset = ingest(args.manifest)
    if args.command == "ingest-check":
        from crossgrain.data import Split

        facts = {
            "Dataset": dataset.name,
            "Instances": len(dataset),
            "Train / val / test": " / ".join(str(len(dataset.split_index(s))) for s in Split),
            "Image dim": dataset.image_dim,
            "Text dim": dataset.text_dim,
            "Labels": "yes" if dataset.has_labels else "no",
            "Image patch groups": len(dataset.image_patches),
            "Text patch groups": len(dataset.text_patches),
        }
        for key, value in facts.items():
            print(f"{key:<20}: {value}")
        return 0

    checkpoint = load_checkpoint(args.checkpoint) if args.checkpoint else None
    # A checkpoint carries its own config; a --config file replaces it
    if args.config is None and checkpoint is not None:
        overrides = {k: v for k, v in (("seed", args.seed), ("mode", args.mode)) if v is not None}
        config = apply_overrides(checkpoint.config, overrides)
    else:
        config = load_experiment_config(args.config, seed=args.seed, mode=args.mode)
    facts: dict[str, Any] = {"Dataset": dataset.name, "Seed": config.seed, "Mode": config.mode.value}

    with TrainingProgress(enabled=args.progress) as progress:
        on_epoch = progress if args.progress else None
        if args.command == "train-stage1":
            ckpt = pipeline.run_stage1(config, dataset, on_epoch=on_epoch)
            path = save_checkpoint(ckpt, out_dir / STAGE1_FILE)
        elif args.command == "train-stage2":
            assert checkpoint is not None
            ckpt = pipeline.run_stage2(config, dataset, checkpoint, on_epoch=on_epoch)
            path = save_checkpoint(ckpt, out_dir / STAGE2_FILE)
        elif args.command == "eval":
            assert checkpoint is not None
            report = pipeline.run_eval(config, dataset, checkpoint, args.task, out_dir=out_dir)
            metrics = report.metrics()
            _print_phases([], metrics)
            write_summary(out_dir, title=f"evaluation ({args.task})", facts=facts, metrics=metrics)
            return 0
        else:
            assert checkpoint is not None
            if args.command == "sweep-alpha":
                key, default = "stage2.alpha", settings.ALPHA_SWEEP
            else:
                key, default = "stage2.learning_rate", settings.LEARNING_RATE_SWEEP
            points = pipeline.sweep(config, dataset, checkpoint, key, values or default, args.task)
            rows = [(p.value, p.score) for p in points]
            write_sweep_csv(rows, key, out_dir / f"{args.command}.csv")
            metrics = {f"{key}={value:g}": score for value, score in rows}
            _print_phases([], metrics)
            write_summary(out_dir, title=args.command, facts=facts, metrics=metrics)
            return 0

    phases = ckpt.meta.get("phases", [])
    _print_phases(phases)
    write_summary(out_dir, title=args.command, facts={**facts, "Checkpoint": path}, phases=phases)
    return 0


if __name__ == "__main__":
    sys.exit(main())
