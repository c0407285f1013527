import itertools
import logging
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np

from controllers.registration_controller import RegistrationController
from models.config_model import RegistrationConfig
from models.errors import ConfigurationError
from models.evaluation_model import summarize, tre
from models.io_model import ReportWriter
from models.volume_model import BinaryMask, Volume
from views.report_view import format_table, write_table

# Grid axis -> parameter key; any other axis name is taken as a parameter key itself
AXES = {
    "extractor": "ModelsPath",
    "distance": "Loss",
    "mode": "Mode",
    "pyramid-strategy": "PyramidStrategy",
    "metric": "Metric",
}


def parse_grid(entries: Sequence[str]) -> List[Tuple[str, List[str]]]:
    """'axis=a,b,c' entries into (axis, values) pairs, in the order given"""
    grid = []
    for entry in entries:
        axis, separator, values = entry.partition("=")
        axis = axis.strip()
        options = [v.strip() for v in values.split(",") if v.strip()]
        if not separator or not axis or not options:
            raise ConfigurationError(f"Grid entries look like axis=value,value; got {entry!r}")
        if any(axis == existing for existing, _ in grid):
            raise ConfigurationError(f"Grid axis {axis} given twice")
        grid.append((axis, options))
    return grid


class AblationController:
    """Registers one pair under every combination of the requested settings"""

    def __init__(self, config: RegistrationConfig, grid: List[Tuple[str, List[str]]], seeds: Sequence[int]):
        self.config = config
        self.grid = grid
        self.seeds = list(seeds) or [config.seed]

        # State
        self.runs: List[Dict[str, Any]] = []

    def cells(self) -> List[Dict[str, str]]:
        axes = [axis for axis, _ in self.grid]
        return [dict(zip(axes, values)) for values in itertools.product(*(options for _, options in self.grid))]

    def cell_config(self, cell: Dict[str, str], seed: int) -> RegistrationConfig:
        overrides = {AXES.get(axis, axis): [value] for axis, value in cell.items()}
        overrides["RandomSeed"] = [str(seed)]
        return self.config.with_overrides(overrides)

    def run(
        self,
        fixed: Volume,
        moving: Volume,
        fixed_points: np.ndarray,
        moving_points: np.ndarray,
        fixed_mask: Optional[BinaryMask] = None,
        moving_mask: Optional[BinaryMask] = None,
    ) -> List[Dict[str, Any]]:
        """One row per cell: TRE pooled over all landmark pairs and seeds"""
        initial = tre(fixed_points, moving_points)
        logging.info(f"Initial TRE: mean {initial.summary['mean']:.3f} mm over {len(initial.distances)} pairs")
        cells = self.cells()
        rows = []
        for number, cell in enumerate(cells, start=1):
            logging.info(f"Ablation cell {number}/{len(cells)}: {cell}")
            distances, failed = [], 0
            for seed in self.seeds:
                controller = RegistrationController(self.cell_config(cell, seed))
                result = controller.register(fixed, moving, fixed_mask, moving_mask)
                if not result.succeeded:
                    failed += 1
                    logging.warning(f"Cell {cell} seed {seed} failed: {result.error}")
                outcome = tre(fixed_points, moving_points, result.transform)
                distances.append(outcome.distances)
                self.runs.append({**cell, "seed": seed, "status": result.status, **outcome.summary})
            summary = summarize(np.concatenate(distances))
            rows.append(
                {
                    **cell,
                    "runs": len(self.seeds),
                    "failed": failed,
                    "tre_mean": summary["mean"],
                    "tre_sd": summary["sd"],
                    "tre_p50": summary["p50"],
                    "tre_max": summary["max"],
                }
            )
        return rows

    def columns(self) -> List[str]:
        return [axis for axis, _ in self.grid] + ["runs", "failed", "tre_mean", "tre_sd", "tre_p50", "tre_max"]

    def save(self, rows: List[Dict[str, Any]], out_dir: Path) -> Path:
        out_dir = Path(out_dir)
        report = ReportWriter(out_dir / "ablation.jsonl")
        for run in self.runs:
            report.add("run", **run)
        for row in rows:
            report.add("cell", **row)
        report.flush()
        path = write_table(rows, self.columns(), out_dir / "ablation.tsv")
        logging.info("Ablation results:\n" + format_table(rows, self.columns()))
        return path
