import logging
from dataclasses import dataclass, field
from typing import Dict, Optional

import numpy as np

from models.errors import ConfigurationError, SamplingError
from models.transform_model import Transform
from models.volume_model import BinaryMask, ImageGrid


@dataclass
class SamplingPlan:
    """How many points to draw per iteration and where they may land"""

    samples: int
    fixed_mask: BinaryMask
    moving_mask: BinaryMask
    fixed_offsets: np.ndarray = field(default_factory=lambda: np.zeros((1, 3)))
    moving_offsets: np.ndarray = field(default_factory=lambda: np.zeros((1, 3)))
    retry_factor: int = 50
    jitter: bool = True

    def __post_init__(self):
        if self.samples < 1:
            raise ConfigurationError(f"NumberOfSpatialSamples must be >= 1, got {self.samples}")
        if self.retry_factor < 1:
            raise ConfigurationError(f"Sampling retry factor must be >= 1, got {self.retry_factor}")
        self.fixed_offsets = np.asarray(self.fixed_offsets, dtype=np.float64).reshape(-1, 3)
        self.moving_offsets = np.asarray(self.moving_offsets, dtype=np.float64).reshape(-1, 3)
        self._candidates = np.flatnonzero(self.fixed_mask.data)

    @property
    def retry_budget(self) -> int:
        return self.retry_factor * self.samples

    @property
    def candidates(self) -> np.ndarray:
        return self._candidates


@dataclass
class SampleSet:
    points: np.ndarray
    drawn: int
    rejected: int
    fixed_rejections: int = 0
    moving_rejections: int = 0

    @property
    def acceptance_rate(self) -> float:
        return len(self.points) / self.drawn if self.drawn else 0.0

    def to_dict(self) -> Dict[str, float]:
        return {
            "accepted": int(len(self.points)),
            "drawn": int(self.drawn),
            "rejected": int(self.rejected),
            "fixed_rejections": int(self.fixed_rejections),
            "moving_rejections": int(self.moving_rejections),
        }


def _patch_inside(points: np.ndarray, offsets: np.ndarray, grid: ImageGrid, mask: BinaryMask) -> np.ndarray:
    positions = (points[:, np.newaxis, :] + offsets[np.newaxis, :, :]).reshape(-1, 3)
    inside = grid.contains(positions) & mask.lookup(positions)
    return inside.reshape(len(points), len(offsets)).all(axis=1)


def sample_points(
    plan: SamplingPlan,
    fixed_domain: ImageGrid,
    transform: Transform,
    rng: np.random.Generator,
    moving_domain: Optional[ImageGrid] = None,
    metric=None,
) -> SampleSet:
    """Rejection-sample N fixed-frame points whose fixed and moving patches lie inside both masks"""
    moving_domain = moving_domain or plan.moving_mask.grid
    candidates = plan.candidates
    if len(candidates) == 0 or plan.moving_mask.is_empty():
        raise SamplingError(
            "Cannot sample from an empty mask",
            {"fixed_mask_voxels": int(len(candidates)), "moving_mask_voxels": plan.moving_mask.count()},
        )

    mask_grid = plan.fixed_mask.grid
    accepted = []
    count = 0
    drawn = fixed_rejections = moving_rejections = 0
    while count < plan.samples:
        remaining_budget = plan.retry_budget - drawn
        if remaining_budget <= 0:
            coverage = {
                "requested": plan.samples,
                "accepted": count,
                "drawn": drawn,
                "fixed_mask_voxels": int(len(candidates)),
                "moving_mask_voxels": plan.moving_mask.count(),
                "fixed_rejections": fixed_rejections,
                "moving_rejections": moving_rejections,
                "acceptance_rate": count / drawn if drawn else 0.0,
            }
            logging.error(f"Sampling budget exhausted: {coverage}")
            raise SamplingError(
                f"Placed only {count} of {plan.samples} samples after {drawn} draws "
                f"(fixed rejections {fixed_rejections}, moving rejections {moving_rejections})",
                coverage,
            )

        batch = int(min(remaining_budget, max(2 * (plan.samples - count), 64)))
        voxels = np.stack(np.unravel_index(candidates[rng.integers(0, len(candidates), batch)], mask_grid.dims), axis=1)
        if plan.jitter:
            voxels = voxels + rng.uniform(-0.5, 0.5, size=(batch, 3))
        points = mask_grid.index_to_world(voxels)

        fixed_ok = _patch_inside(points, plan.fixed_offsets, fixed_domain, plan.fixed_mask)
        ok = fixed_ok.copy()
        if fixed_ok.any():
            candidates_ok = np.flatnonzero(fixed_ok)
            mapped = transform.apply(points[candidates_ok])
            moving_ok = _patch_inside(mapped, plan.moving_offsets, moving_domain, plan.moving_mask)
            if metric is not None:
                moving_ok &= metric.valid_points(points[candidates_ok], mapped)
            ok[candidates_ok] = moving_ok

        # Only draws up to the N-th acceptance count towards the budget
        needed = plan.samples - count
        accepted_positions = np.flatnonzero(ok)
        if len(accepted_positions) >= needed:
            considered = int(accepted_positions[needed - 1]) + 1
        else:
            considered = batch
        fixed_rejections += int(np.count_nonzero(~fixed_ok[:considered]))
        moving_rejections += int(np.count_nonzero(fixed_ok[:considered] & ~ok[:considered]))
        kept = points[:considered][ok[:considered]]
        accepted.append(kept)
        count += len(kept)
        drawn += considered

    points = np.concatenate(accepted)
    return SampleSet(
        points=points,
        drawn=drawn,
        rejected=drawn - len(points),
        fixed_rejections=fixed_rejections,
        moving_rejections=moving_rejections,
    )
