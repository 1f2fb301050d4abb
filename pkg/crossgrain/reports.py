"""Plain-text outputs: metrics report, curve and sweep CSVs, run summary."""

from __future__ import annotations

import csv
import logging
from collections.abc import Sequence
from datetime import datetime, timezone
from pathlib import Path
from typing import Any

from crossgrain import settings
from crossgrain.errors import FormatError
from crossgrain.retrieval import MetricsReport, write_curve_csv

logger = logging.getLogger(__name__)


# ---------------------------------------------------------------------------
# Metrics report
# ---------------------------------------------------------------------------

def format_metrics(report: MetricsReport) -> str:
    """``metric = value`` per line, six decimals, preceded by a task comment."""
    decimals = settings.REPORT_DECIMALS
    lines = [f"# task: {report.task.value}"]
    lines += [f"{name} = {value:.{decimals}f}" for name, value in report.metrics().items()]
    return "\n".join(lines) + "\n"


def write_metrics_report(report: MetricsReport, path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(format_metrics(report), encoding="utf-8")
    return path


def read_metrics_report(path: str | Path) -> dict[str, float]:
    path = Path(path)
    values: dict[str, float] = {}
    for lineno, raw in enumerate(path.read_text(encoding="utf-8").splitlines(), 1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        name, sep, value = line.partition("=")
        if not sep:
            raise FormatError("expected 'metric = value'", path=str(path), line=lineno)
        try:
            values[name.strip()] = float(value)
        except ValueError:
            raise FormatError(f"bad number {value.strip()!r}", path=str(path), line=lineno) from None
    return values


def write_eval_outputs(report: MetricsReport, out_dir: str | Path) -> list[Path]:
    """Metrics report plus both curve files."""
    out = Path(out_dir)
    written = [write_metrics_report(report, out / settings.METRICS_FILE)]
    if report.pr_curve or report.scope_curve:
        written.append(write_curve_csv(report.pr_curve, out / settings.PR_CURVE_FILE))
        written.append(write_curve_csv(report.scope_curve, out / settings.SCOPE_CURVE_FILE))
    for path in written:
        logger.info("wrote %s", path)
    return written


def write_sweep_csv(rows: Sequence[tuple[float, float]], key: str, path: str | Path) -> Path:
    """One ``<key>,score`` row per swept value."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow([key, "score"])
        for value, score in rows:
            writer.writerow([f"{value:g}", f"{score:.{settings.REPORT_DECIMALS}f}"])
    return path


# ---------------------------------------------------------------------------
# Run summary
# ---------------------------------------------------------------------------

def write_summary(
    out_dir: str | Path,
    *,
    title: str,
    facts: dict[str, Any],
    phases: Sequence[dict[str, Any]] = (),
    metrics: dict[str, float] | None = None,
) -> Path:
    """Write ``summary.txt`` describing one CLI run."""
    out = Path(out_dir)
    now = datetime.now(timezone.utc).strftime("%Y-%m-%d %H:%M:%S UTC")
    lines: list[str] = []

    def h1(text: str) -> None:
        lines.append("")
        lines.append("=" * 72)
        lines.append(f"  {text}")
        lines.append("=" * 72)

    lines.append("=" * 72)
    lines.append(f"  CROSSGRAIN - {title.upper()}")
    lines.append("=" * 72)
    lines.append(f"  Generated : {now}")
    lines.append(f"  Output dir: {out}")

    h1("RUN")
    for key, value in facts.items():
        lines.append(f"  {key:<24}: {value}")

    if phases:
        h1(f"TRAINING PHASES  ({len(phases)})")
        lines.append(f"  {'Phase':<28}  {'Epochs':>6}  {'Final loss':>14}  {'Validation':>14}")
        lines.append("  " + "-" * 68)
        for record in phases:
            final = record.get("final_loss")
            val = record.get("validation_loss")
            lines.append(
                f"  {record['phase']:<28}  {record.get('epochs', 0):>6}  "
                f"{'-' if final is None else f'{final:.6f}':>14}  "
                f"{'-' if val is None else f'{val:.6f}':>14}"
            )

    if metrics:
        h1("METRICS")
        for name, value in metrics.items():
            lines.append(f"  {name:<24}: {value:.{settings.REPORT_DECIMALS}f}")

    h1("OUTPUT FILES")
    for path in sorted(out.rglob("*")):
        if path.is_file() and path.name != settings.SUMMARY_FILE:
            size_kb = path.stat().st_size / 1024
            lines.append(f"  {str(path.relative_to(out)):<60}  {size_kb:>8.1f} KB")

    lines.append("")
    lines.append("=" * 72)
    lines.append("  END OF REPORT")
    lines.append("=" * 72)
    lines.append("")

    summary_path = out / settings.SUMMARY_FILE
    try:
        out.mkdir(parents=True, exist_ok=True)
        summary_path.write_text("\n".join(lines), encoding="utf-8")
    except OSError as exc:
        logger.warning("Could not write %s: %s", summary_path, exc)
    return summary_path
