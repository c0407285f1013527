import logging
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence

import numpy as np

from controllers.registration_controller import warp_labels
from models.errors import ConfigurationError
from models.evaluation_model import TreResult, dice, hausdorff, hd95, jacobian_determinant_map, tre
from models.io_model import ReportWriter, read_landmarks, read_transform, read_volume
from models.transform_model import Transform
from models.volume_model import BinaryMask, ImageGrid
from views.report_view import format_table

LABEL_COLUMNS = ["pair", "label", "dice", "hd95", "hausdorff"]
TRE_COLUMNS = ["count", "p25", "p50", "p75", "mean", "sd", "max"]


class EvaluationController:
    """Landmark, label and plausibility metrics of one transform"""

    def __init__(self, transform: Optional[Transform] = None):
        self.transform = transform

        # State
        self.records: List[Dict[str, Any]] = []

    @classmethod
    def from_path(cls, path: Optional[str]) -> "EvaluationController":
        """Load a transform written by the register subcommand; no path means identity"""
        return cls(read_transform(path) if path else None)

    def evaluate_landmarks(self, fixed_path: str, moving_path: str) -> TreResult:
        result = tre(read_landmarks(fixed_path), read_landmarks(moving_path), self.transform)
        logging.info(
            f"TRE over {len(result.distances)} pairs: median {result.summary['p50']:.3f} mm, "
            f"mean {result.summary['mean']:.3f} +- {result.summary['sd']:.3f} mm"
        )
        self.records.append({"type": "tre", "count": len(result.distances), **result.to_dict()})
        return result

    def evaluate_labels(self, fixed_paths: Sequence[str], moving_paths: Sequence[str]) -> List[Dict[str, Any]]:
        """Dice, HD95 and Hausdorff per label value of each fixed/moving label image pair"""
        if len(fixed_paths) != len(moving_paths):
            raise ConfigurationError(
                f"Label files must pair up: {len(fixed_paths)} fixed vs {len(moving_paths)} moving"
            )
        rows = []
        for pair, (fixed_path, moving_path) in enumerate(zip(fixed_paths, moving_paths)):
            fixed = read_volume(fixed_path)
            moving = read_volume(moving_path)
            fixed_labels = np.rint(fixed.scalar()).astype(np.int64)
            moving_labels = warp_labels(moving, self.transform, fixed.grid)
            values = sorted((set(np.unique(fixed_labels).tolist()) | set(np.unique(moving_labels).tolist())) - {0})
            for value in values:
                rows.append(self._label_row(pair, value, fixed_labels, moving_labels, fixed.grid))
        self.records += [{"type": "label", **row} for row in rows]
        return rows

    @staticmethod
    def _label_row(pair: int, value: int, fixed_labels, moving_labels, grid: ImageGrid) -> Dict[str, Any]:
        a = BinaryMask(fixed_labels == value, grid)
        b = BinaryMask(moving_labels == value, grid)
        row = {"pair": pair, "label": int(value), "dice": dice(a, b)}
        if a.is_empty() or b.is_empty():
            logging.warning(f"Label {value} is empty on one side of pair {pair}; surface distances skipped")
            row.update(hd95=None, hausdorff=None)
        else:
            row.update(hd95=hd95(a, b), hausdorff=hausdorff(a, b))
        logging.debug(f"Label {value}: {row}")
        return row

    def evaluate_jacobian(self, reference_path: str) -> Dict[str, float]:
        """det(dT/dx) statistics on the grid of a reference image"""
        if self.transform is None:
            summary = {"min": 1.0, "max": 1.0, "mean": 1.0, "fraction_nonpositive": 0.0}
        else:
            _, summary = jacobian_determinant_map(self.transform, read_volume(reference_path).grid)
        self.records.append({"type": "jacobian", **summary})
        return summary

    def write(self, path: Path) -> Path:
        report = ReportWriter(path)
        for record in self.records:
            fields = dict(record)
            report.add(fields.pop("type"), **fields)
        return report.flush()

    def tables(self) -> List[str]:
        """Printable tables of everything evaluated so far"""
        tables = []
        tre_rows = [r for r in self.records if r["type"] == "tre"]
        if tre_rows:
            tables.append(format_table(tre_rows, TRE_COLUMNS))
        label_rows = [r for r in self.records if r["type"] == "label"]
        if label_rows:
            tables.append(format_table(label_rows, LABEL_COLUMNS))
        jacobian_rows = [r for r in self.records if r["type"] == "jacobian"]
        if jacobian_rows:
            tables.append(format_table(jacobian_rows, ["min", "max", "mean", "fraction_nonpositive"]))
        return tables
