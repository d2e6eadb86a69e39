"""Module for saving evaluation reports and training logs to files."""

import logging
from pathlib import Path
from typing import Dict, Optional

from src.metrics import EvalReport
from src.persistence import write_text_atomic

logger = logging.getLogger(__name__)

REPORT_NAME = "report.txt"
PER_EXAMPLE_NAME = "per_example.csv"
UNDEFINED = "undefined"


def _fmt(value: Optional[float]) -> str:
    return UNDEFINED if value is None else repr(float(value))


def format_report(report: EvalReport) -> str:
    """Plain-text ``key = value`` rendering of an EvalReport."""
    lines = [
        "# SI-SNR evaluation report",
        f"checkpoint_id = {report.checkpoint_id}",
        f"oracle = {str(report.oracle).lower()}",
        f"count = {report.count}",
        f"mean_sisnr_db = {_fmt(report.mean)}",
        f"median_sisnr_db = {_fmt(report.median)}",
        f"mean_mixture_sisnr_db = {_fmt(report.mean_mixture)}",
        f"mean_improvement_db = {_fmt(report.mean_improvement)}",
    ]
    lines.extend(f"task.{key} = {value}" for key, value in report.config.items())
    return "\n".join(lines) + "\n"


def format_per_example(report: EvalReport) -> str:
    rows = ["index,sisnr_db"]
    rows.extend(f"{index},{score!r}" for index, score in enumerate(report.scores))
    return "\n".join(rows) + "\n"


def save_report(report: EvalReport, out_dir: str | Path) -> Dict[str, Path]:
    """Saves an evaluation report and its per-example CSV under ``out_dir``.

    Args:
        report: Evaluation result
        out_dir: Output directory, created if missing

    Returns:
        Paths of the written files keyed "report" and "per_example"
    """
    out_dir = Path(out_dir)
    paths = {"report": out_dir / REPORT_NAME, "per_example": out_dir / PER_EXAMPLE_NAME}
    write_text_atomic(paths["report"], format_report(report))
    write_text_atomic(paths["per_example"], format_per_example(report))
    logger.info(f"Report saved to {paths['report']}")
    return paths


def read_report(path: str | Path) -> Dict[str, str]:
    """Key-value pairs of a saved report; comment lines are skipped."""
    values = {}
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        if not line.strip() or line.startswith("#"):
            continue
        key, _, value = line.partition("=")
        values[key.strip()] = value.strip()
    return values


class TrainingLogWriter:
    """Append-only training log: ``step<TAB>lr<TAB>loss`` and ``eval<TAB>step<TAB>mean_sisnr_db`` lines.

    Every line is flushed as soon as it is written, so a crashed run keeps
    its history up to the failing step.
    """

    def __init__(self, path: Optional[str | Path]):
        self.path = Path(path) if path else None
        if self.path is not None:
            self.path.parent.mkdir(parents=True, exist_ok=True)

    def _append(self, line: str) -> None:
        if self.path is None:
            return
        with open(self.path, "a", encoding="utf-8") as f:
            f.write(line + "\n")

    def step(self, step: int, lr: float, loss: float) -> None:
        self._append(f"{step}\t{lr!r}\t{loss!r}")

    def eval(self, step: int, mean_sisnr_db: Optional[float]) -> None:
        self._append(f"eval\t{step}\t{_fmt(mean_sisnr_db)}")
