import logging
from dataclasses import dataclass, field
from typing import Dict, Optional, Tuple

import numpy as np
from scipy import ndimage

from models.errors import ConfigurationError
from models.transform_model import Transform
from models.volume_model import WARP_BATCH_POINTS, BinaryMask, ImageGrid, Volume


@dataclass
class TreResult:
    distances: np.ndarray
    summary: Dict[str, float] = field(default_factory=dict)

    def to_dict(self):
        return {"distances": [float(d) for d in self.distances], **self.summary}


def transform_landmarks(points: np.ndarray, transform: Optional[Transform]) -> np.ndarray:
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    return points.copy() if transform is None else transform.apply(points)


def summarize(distances: np.ndarray) -> Dict[str, float]:
    distances = np.asarray(distances, dtype=np.float64)
    p25, p50, p75 = np.percentile(distances, [25, 50, 75])
    return {
        "p25": float(p25),
        "p50": float(p50),
        "p75": float(p75),
        "mean": float(np.mean(distances)),
        "sd": float(np.std(distances, ddof=1)) if len(distances) > 1 else 0.0,
        "max": float(np.max(distances)),
    }


def tre(fixed_points: np.ndarray, moving_points: np.ndarray, transform: Optional[Transform] = None) -> TreResult:
    """|T(x_fixed) - x_moving| per landmark pair, quantiles by linear interpolation"""
    fixed_points = np.asarray(fixed_points, dtype=np.float64).reshape(-1, 3)
    moving_points = np.asarray(moving_points, dtype=np.float64).reshape(-1, 3)
    if len(fixed_points) == 0:
        raise ConfigurationError("TRE needs at least one landmark pair")
    if len(fixed_points) != len(moving_points):
        raise ConfigurationError(
            f"Landmark sets differ in size: {len(fixed_points)} fixed vs {len(moving_points)} moving"
        )
    distances = np.linalg.norm(transform_landmarks(fixed_points, transform) - moving_points, axis=1)
    return TreResult(distances, summarize(distances))


def _check_pair(a: BinaryMask, b: BinaryMask):
    if tuple(a.grid.dims) != tuple(b.grid.dims) or not a.grid.matches(b.grid):
        raise ConfigurationError(f"Label masks must share a grid, got {a.grid} and {b.grid}")


def dice(a: BinaryMask, b: BinaryMask) -> float:
    _check_pair(a, b)
    total = a.count() + b.count()
    if total == 0:
        logging.warning("Dice of two empty masks defined as 1")
        return 1.0
    return 2.0 * float(np.count_nonzero(a.data & b.data)) / total


def _boundary(mask: BinaryMask) -> np.ndarray:
    """Mask voxels with at least one 6-connected neighbour outside the mask"""
    structure = ndimage.generate_binary_structure(3, 1)
    return mask.data & ~ndimage.binary_erosion(mask.data, structure=structure, border_value=0)


def surface_distances(a: BinaryMask, b: BinaryMask) -> np.ndarray:
    """Symmetric set of boundary-to-nearest-boundary distances in mm"""
    _check_pair(a, b)
    if a.is_empty() or b.is_empty():
        raise ConfigurationError("Surface distances are undefined for an empty mask")
    spacing = a.grid.spacing_array
    border_a, border_b = _boundary(a), _boundary(b)
    to_b = ndimage.distance_transform_edt(~border_b, sampling=spacing)
    to_a = ndimage.distance_transform_edt(~border_a, sampling=spacing)
    return np.concatenate([to_b[border_a], to_a[border_b]])


def hd95(a: BinaryMask, b: BinaryMask) -> float:
    return float(np.percentile(surface_distances(a, b), 95))


def hausdorff(a: BinaryMask, b: BinaryMask) -> float:
    return float(np.max(surface_distances(a, b)))


def jacobian_determinant_map(transform: Transform, grid: ImageGrid) -> Tuple[Volume, Dict[str, float]]:
    """det(dT/dx) at every voxel of `grid` from the analytic spatial Jacobian"""
    points = grid.points().reshape(-1, 3)
    determinants = np.empty(len(points))
    for start in range(0, len(points), WARP_BATCH_POINTS):
        stop = start + WARP_BATCH_POINTS
        determinants[start:stop] = np.linalg.det(transform.spatial_jacobian(points[start:stop]))
    summary = {
        "min": float(determinants.min()),
        "max": float(determinants.max()),
        "mean": float(determinants.mean()),
        "fraction_nonpositive": float(np.mean(determinants <= 0)),
    }
    if summary["fraction_nonpositive"] > 0:
        logging.warning(f"Transform folds: {summary['fraction_nonpositive']:.4%} of voxels have det(J) <= 0")
    return Volume(determinants.reshape(tuple(grid.dims)), grid), summary


def displacement_field(transform: Transform, grid: ImageGrid) -> Volume:
    """T(x) - x at every voxel, three channels in mm"""
    points = grid.points().reshape(-1, 3)
    field_values = np.empty_like(points)
    for start in range(0, len(points), WARP_BATCH_POINTS):
        stop = start + WARP_BATCH_POINTS
        field_values[start:stop] = transform.displacement(points[start:stop])
    return Volume(field_values.reshape(tuple(grid.dims) + (3,)), grid)
