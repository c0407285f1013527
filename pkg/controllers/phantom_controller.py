import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Dict

import numpy as np

from models.config_model import ParameterMap
from models.io_model import write_landmarks, write_mask, write_parameters, write_transform, write_volume
from models.phantom_model import (
    Phantom,
    PhantomSettings,
    SimulatedImage,
    apply_known_deformation,
    default_phantom_spec,
    generate_phantom,
    random_smooth_field,
    simulate_modality,
)
from models.transform_model import BSplineTransform
from models.volume_model import BinaryMask, Volume


@dataclass
class PhantomCase:
    fixed: Phantom
    moving: Phantom
    moving_image: SimulatedImage
    field: BSplineTransform


def label_image(labels: Dict[str, BinaryMask], grid) -> Volume:
    """Structures painted as 1..n in order, later ones on top"""
    data = np.zeros(tuple(grid.dims), dtype=np.float64)
    for value, mask in enumerate(labels.values(), start=1):
        data[mask.data] = value
    return Volume(data, grid)


class PhantomController:
    """Builds a ground-truthed fixed/moving pair and writes it to disk"""

    def __init__(self, settings: PhantomSettings):
        self.settings = settings

    def generate(self) -> PhantomCase:
        settings = self.settings
        rng = np.random.default_rng(settings.seed)
        fixed = generate_phantom(default_phantom_spec(settings.extent, settings.spacing, settings.seed))
        lower, upper = fixed.volume.grid.physical_bounds()
        field = random_smooth_field(lower, upper, rng, settings.grid_spacing, settings.max_displacement)
        moving = apply_known_deformation(fixed, field)
        moving_image = simulate_modality(moving.volume, settings.modality(), rng)
        logging.info(
            f"Phantom pair ready: {len(fixed.landmarks)} landmarks, max displacement {settings.max_displacement} mm"
        )
        return PhantomCase(fixed, moving, moving_image, field)

    def save(self, case: PhantomCase, out_dir: Path) -> Path:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        grid = case.fixed.volume.grid

        write_volume(case.fixed.volume, out_dir / "fixed.mha")
        write_volume(case.moving_image.volume, out_dir / "moving.mha")
        write_mask(case.fixed.labels["body"], out_dir / "fixed_mask.mha")
        moving_body = case.moving.labels["body"].data & case.moving_image.valid.data
        write_mask(BinaryMask(moving_body, grid), out_dir / "moving_mask.mha")
        write_mask(case.moving_image.valid, out_dir / "moving_validity.mha")
        write_volume(label_image(case.fixed.labels, grid), out_dir / "fixed_labels.mha", "MET_UCHAR")
        write_volume(label_image(case.moving.labels, grid), out_dir / "moving_labels.mha", "MET_UCHAR")
        write_landmarks(case.fixed.landmarks, out_dir / "fixed_landmarks.txt", " ".join(case.fixed.landmark_names))
        write_landmarks(case.moving.landmarks, out_dir / "moving_landmarks.txt", " ".join(case.moving.landmark_names))
        write_transform(case.field, out_dir / "ground_truth")

        description = ParameterMap(
            {key: [repr(getattr(self.settings, attribute))] for key, (attribute, _) in PhantomSettings.KEYS.items()}
        )
        description.set("LabelNames", list(case.fixed.labels))
        description.set("LandmarkNames", case.fixed.landmark_names)
        path = out_dir / "phantom.txt"
        write_parameters(description, path)
        logging.info(f"Wrote phantom pair to {out_dir}")
        return path
