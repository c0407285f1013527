import logging
from pathlib import Path
from typing import List, Tuple

import cv2
import numpy as np
from PIL import Image

from models.volume_model import Volume

PLANES = ("sagittal", "coronal", "axial")


def to_uint8(values: np.ndarray, low: float, high: float) -> np.ndarray:
    scale = 255.0 / max(high - low, 1e-12)
    return np.clip((values - low) * scale, 0, 255).astype(np.uint8)


def checkerboard(a: np.ndarray, b: np.ndarray, tiles: int = 8) -> np.ndarray:
    """Alternate square blocks of two equally shaped slices"""
    rows, cols = a.shape
    block = max(1, max(rows, cols) // tiles)
    r, c = np.indices((rows, cols))
    pattern = ((r // block) + (c // block)) % 2 == 0
    return np.where(pattern, a, b)


def _display(plane: np.ndarray) -> np.ndarray:
    # First array axis runs left to right, second bottom to top
    return np.ascontiguousarray(np.rot90(plane))


def snapshot_panels(fixed: Volume, warped: Volume) -> List[Tuple[str, np.ndarray]]:
    """Checkerboard and colour-mapped absolute difference through the central slice of each plane"""
    fixed_data = fixed.scalar().astype(np.float64)
    warped_data = warped.scalar().astype(np.float64)
    low, high = np.percentile(fixed_data, [1, 99])
    panels = []
    for axis, name in enumerate(PLANES):
        index = fixed.dims[axis] // 2
        f = np.take(fixed_data, index, axis=axis)
        w = np.take(warped_data, index, axis=axis)
        board = checkerboard(to_uint8(f, low, high), to_uint8(w, low, high))
        difference = cv2.applyColorMap(to_uint8(np.abs(f - w), 0.0, high - low), cv2.COLORMAP_JET)
        difference = cv2.cvtColor(difference, cv2.COLOR_BGR2RGB)
        panel = np.concatenate([np.repeat(board[..., np.newaxis], 3, axis=-1), difference], axis=0)
        panels.append((name, _display(panel)))
    return panels


def write_snapshots(fixed: Volume, warped: Volume, directory: Path) -> List[Path]:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    paths = []
    for name, panel in snapshot_panels(fixed, warped):
        path = directory / f"{name}.png"
        Image.fromarray(panel).save(path)
        paths.append(path)
    logging.info(f"Wrote {len(paths)} quality snapshots to {directory}")
    return paths
