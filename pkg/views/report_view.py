import logging
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence

from models.config_model import SOFTWARE_NAME, SOFTWARE_VERSION, RegistrationConfig
from models.io_model import ReportWriter
from models.optimizer_model import IterationRecord


def format_trace_line(record: IterationRecord) -> str:
    return (
        f"iteration={record.iteration} cost={record.cost:.9g} gain={record.gain:.6g} "
        f"t={record.t:.6g} rejected={record.rejected}"
    )


class TraceLogger:
    """Optimizer observer that logs the cost trace"""

    def __init__(self, every: int = 1):
        self.every = max(1, int(every))
        self.records: List[IterationRecord] = []

    def __call__(self, record: IterationRecord):
        self.records.append(record)
        if record.iteration % self.every == 0:
            logging.info(format_trace_line(record))


def build_run_report(
    path: Path,
    config: RegistrationConfig,
    result,
    summary: Optional[Dict[str, Any]] = None,
    inputs: Optional[Dict[str, str]] = None,
) -> ReportWriter:
    """Self-contained run record: config echo, per-level traces and final quality figures"""
    report = ReportWriter(path)
    report.add(
        "run",
        software=SOFTWARE_NAME,
        version=SOFTWARE_VERSION,
        seed=config.seed,
        threads=config.threads,
        inputs=dict(inputs or {}),
    )
    report.add("config", parameters=config.to_parameter_map().to_dict())
    for outcome in result.levels:
        report.add("level", **outcome.to_dict())
        for record in outcome.trace:
            report.add("iteration", stage=outcome.stage, **record.to_dict())
    report.add(
        "result",
        status=result.status,
        error=result.error,
        exit_code=result.exit_code,
        evaluations=result.evaluations,
        rejected=result.rejected,
        **(summary or {}),
    )
    return report


def build_timing_report(path: Path, result) -> ReportWriter:
    # Wall-clock figures live apart from the run report so seeded reports compare byte for byte
    report = ReportWriter(path)
    for outcome in result.levels:
        report.add("level", stage=outcome.stage, level=outcome.level, seconds=round(outcome.seconds, 6))
    report.add("total", seconds=round(result.seconds, 6))
    return report


def format_value(value) -> str:
    if isinstance(value, float):
        return f"{value:.4f}"
    return str(value)


def format_table(rows: Sequence[Dict[str, Any]], columns: Sequence[str]) -> str:
    """Plain-text table with one row per record"""
    cells = [[format_value(row.get(column, "")) for column in columns] for row in rows]
    widths = [max([len(column)] + [len(line[i]) for line in cells]) for i, column in enumerate(columns)]
    lines = ["  ".join(column.ljust(width) for column, width in zip(columns, widths))]
    lines.append("  ".join("-" * width for width in widths))
    for line in cells:
        lines.append("  ".join(cell.ljust(width) for cell, width in zip(line, widths)))
    return "\n".join(lines)


def write_table(rows: Sequence[Dict[str, Any]], columns: Sequence[str], path: Path) -> Path:
    """Tab-separated copy of a metrics table"""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    lines = ["\t".join(columns)]
    lines += ["\t".join(format_value(row.get(column, "")) for column in columns) for row in rows]
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return path
