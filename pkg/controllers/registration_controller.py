import logging
import time
import traceback
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Dict, List, Optional, Tuple

import numpy as np
from scipy import ndimage

from models.config_model import DEFAULT_SUBSET_FEATURES, RegistrationConfig
from models.errors import RegistrationError
from models.evaluation_model import displacement_field, jacobian_determinant_map
from models.feature_model import ExternalFeatureSource, MindConfig, create_extractor
from models.io_model import layer_paths, write_mask, write_transform, write_volume
from models.optimizer_model import AsgdOptimizer, IterationRecord, LevelSettings
from models.similarity_model import (
    ImpactComponent,
    ImpactJacobian,
    ImpactStatic,
    MeanSquares,
    NormalizedCorrelation,
    NormalizedMutualInformation,
    ResolutionLevel,
    SimilarityMetric,
    get_distance,
)
from models.transform_model import AffineTransform, CompositeTransform, Transform, bspline_for_affine_domain
from models.volume_model import (
    WARP_BATCH_POINTS,
    BinaryMask,
    ImageGrid,
    Volume,
    build_pyramid,
    coefficients_for,
    warp_volume,
)
from views.report_view import build_run_report, build_timing_report
from views.snapshot_view import write_snapshots

RESULT_IMAGE = "result.mha"
VALIDITY_MASK = "validity.mha"
DISPLACEMENT_FIELD = "displacement.mha"
TRANSFORM_DIR = "transform"
REPORT_FILE = "report.jsonl"
TIMINGS_FILE = "timings.jsonl"
SNAPSHOT_DIR = "snapshots"


def build_component(name: str, config: RegistrationConfig) -> ImpactComponent:
    explicit = config.subset_features is not None
    subset = config.subset_features if explicit else DEFAULT_SUBSET_FEATURES
    distances = [get_distance(loss) for loss in config.loss]
    if name == "External":
        source = ExternalFeatureSource(
            layer_paths(config.feature_map_fixed),
            layer_paths(config.feature_map_moving),
            layer_mask=config.layers_mask,
            weights=config.layers_weight,
            channels=config.feature_map_channels or None,
        )
        return ImpactComponent(source, distances, subset, warn_clamp=explicit)

    extractor = create_extractor(
        name,
        patch_size=config.patch_size,
        patch_resolution=config.voxel_size,
        input_channels=config.channels,
        layer_mask=config.layers_mask[:1],
        padding_policy=config.padding_policy,
        mind=MindConfig(config.mind_radius, config.mind_dilation, config.mind_weighting),
    )
    # Built-in extractors expose a single layer
    extractor.layers[0].weight = config.layers_weight[0]
    return ImpactComponent(extractor, distances, subset, warn_clamp=explicit)


def create_metric(config: RegistrationConfig) -> SimilarityMetric:
    """Similarity metric named by the configuration, with its feature extractors"""
    if config.metric == "MSE":
        return MeanSquares(config.threads)
    if config.metric == "NCC":
        return NormalizedCorrelation(config.threads)
    if config.metric == "NMI":
        return NormalizedMutualInformation(config.histogram_bins, config.threads)

    components = [build_component(name, config) for name in config.models]
    if config.mode == "Static":
        return ImpactStatic(
            components,
            update_interval=config.update_interval,
            pca_components=config.pca,
            tile=config.tile_size or None,
            tile_overlap=config.tile_overlap,
            threads=config.threads,
        )
    return ImpactJacobian(components, config.threads)


def warp_image(
    moving: Volume, transform: Transform, fixed_grid: ImageGrid, background: float = 0.0
) -> Tuple[Volume, BinaryMask]:
    """Moving image resampled at T(x) for every fixed voxel x, plus the voxels that landed inside it"""
    points = fixed_grid.points().reshape(-1, 3)
    mapped = np.empty_like(points)
    for start in range(0, len(points), WARP_BATCH_POINTS):
        stop = start + WARP_BATCH_POINTS
        mapped[start:stop] = transform.apply(points[start:stop])
    return warp_volume(coefficients_for(moving), mapped, fixed_grid, background)


def warp_labels(labels: Volume, transform: Optional[Transform], fixed_grid: ImageGrid) -> np.ndarray:
    """Integer label image pulled onto the fixed grid by nearest-neighbour lookup"""
    points = fixed_grid.points().reshape(-1, 3)
    if transform is not None:
        mapped = np.empty_like(points)
        for start in range(0, len(points), WARP_BATCH_POINTS):
            stop = start + WARP_BATCH_POINTS
            mapped[start:stop] = transform.apply(points[start:stop])
        points = mapped
    index = labels.grid.world_to_index(points).T
    values = ndimage.map_coordinates(labels.scalar(), index, order=0, mode="constant", cval=0.0)
    return np.rint(values).astype(np.int64).reshape(tuple(fixed_grid.dims))


def level_mask(mask: Optional[BinaryMask], grid: ImageGrid) -> Optional[BinaryMask]:
    if mask is None:
        return None
    if mask.grid.matches(grid) and tuple(mask.grid.dims) == tuple(grid.dims):
        return mask
    return BinaryMask(mask.lookup(grid.points()), grid)


@dataclass
class LevelOutcome:
    stage: str
    level: int
    image_spacing: List[float]
    grid_spacing: Optional[List[float]]
    iterations: int
    samples: int
    base_gain: float
    rejected: int
    seconds: float
    trace: List[IterationRecord] = field(default_factory=list)

    def to_dict(self):
        return {
            "stage": self.stage,
            "level": self.level,
            "image_spacing": self.image_spacing,
            "grid_spacing": self.grid_spacing,
            "iterations": self.iterations,
            "samples": self.samples,
            "base_gain": self.base_gain,
            "rejected": self.rejected,
        }


@dataclass
class RegistrationResult:
    transform: Transform
    levels: List[LevelOutcome] = field(default_factory=list)
    status: str = "ok"
    error: Optional[str] = None
    exit_code: int = 0
    seconds: float = 0.0

    @property
    def succeeded(self) -> bool:
        return self.status == "ok"

    @property
    def evaluations(self) -> int:
        return sum(len(level.trace) for level in self.levels)

    @property
    def rejected(self) -> int:
        return sum(level.rejected for level in self.levels)


class RegistrationController:
    """Affine initialisation and coarse-to-fine B-spline registration of one image pair"""

    def __init__(self, config: RegistrationConfig, metric: Optional[SimilarityMetric] = None):
        self.config = config
        self.metric = metric or create_metric(config)
        self.optimizer = AsgdOptimizer()

        # State
        self.stage = "bspline"
        self.current_level = 0

    def add_observer(self, observer: Callable[[IterationRecord], None]):
        """Observer pattern: Add an observer for per-iteration records"""
        self.optimizer.add_observer(observer)

    def build_levels(
        self,
        fixed: Volume,
        moving: Volume,
        fixed_mask: Optional[BinaryMask] = None,
        moving_mask: Optional[BinaryMask] = None,
    ) -> List[ResolutionLevel]:
        """Pyramid levels of both images on the same millimetre schedule, masks carried along"""
        schedule = self.config.pyramid_spacings(fixed.spacing)
        smoothing, downsampling = self.config.pyramid_flags
        fixed_levels = build_pyramid(fixed, schedule, smoothing, downsampling)
        moving_levels = build_pyramid(moving, schedule, smoothing, downsampling)
        levels = []
        for index, (fixed_level, moving_level) in enumerate(zip(fixed_levels, moving_levels)):
            levels.append(
                ResolutionLevel(
                    index,
                    fixed_level,
                    moving_level,
                    level_mask(fixed_mask, fixed_level.grid),
                    level_mask(moving_mask, moving_level.grid),
                )
            )
        return levels

    def level_settings(self, level: int, stage: str = "bspline") -> LevelSettings:
        config = self.config
        refresh = config.update_interval if config.metric == "IMPACT" and config.mode == "Static" else -1
        return LevelSettings(
            iterations=config.level_iterations(level),
            samples=config.level_samples(level),
            bending_weight=config.bending_weight if stage == "bspline" else 0.0,
            A=config.sp_A,
            alpha=config.sp_alpha,
            f_max=config.sigmoid_max,
            f_min=config.sigmoid_min,
            base_gain=config.base_gain,
            delta_max=config.max_step,
            gain_trials=config.gain_trials,
            update_interval=refresh,
            jitter=config.jitter,
            retry_factor=config.retry_factor,
        )

    def _run_level(
        self, stage: str, level: ResolutionLevel, transform: Transform, rng: np.random.Generator
    ) -> LevelOutcome:
        self.stage, self.current_level = stage, level.index
        settings = self.level_settings(level.index, stage)
        logging.info(
            f"Starting {stage} level {level.index}: image spacing {level.fixed.spacing.tolist()} mm, "
            f"dims {level.fixed.dims}, {settings.iterations} iterations x {settings.samples} samples"
        )
        self.metric.initialize(level)
        result = self.optimizer.run_resolution(settings, level, transform, self.metric, rng)
        bspline = getattr(transform, "bspline", None)
        return LevelOutcome(
            stage=stage,
            level=level.index,
            image_spacing=[float(s) for s in level.fixed.spacing],
            grid_spacing=None if bspline is None else [float(s) for s in bspline.grid_spacing],
            iterations=settings.iterations,
            samples=settings.samples,
            base_gain=float(result.base_gain),
            rejected=result.rejected,
            seconds=result.seconds,
            trace=result.trace,
        )

    def register(
        self,
        fixed: Volume,
        moving: Volume,
        fixed_mask: Optional[BinaryMask] = None,
        moving_mask: Optional[BinaryMask] = None,
    ) -> RegistrationResult:
        """Run every stage; on failure return the last transform that completed a level"""
        started = time.perf_counter()
        config = self.config
        rng = np.random.default_rng(config.seed)
        lower, upper = fixed.grid.physical_bounds()
        outcomes: List[LevelOutcome] = []

        transform = CompositeTransform(None, bspline_for_affine_domain(None, lower, upper, config.grid_spacing(0)))
        last_valid = transform.copy()
        try:
            levels = self.build_levels(fixed, moving, fixed_mask, moving_mask)

            affine = None
            if config.affine_initialization:
                affine = AffineTransform.for_domain(lower, upper)
                for level in levels:
                    outcomes.append(self._run_level("affine", level, affine, rng))
                    last_valid = CompositeTransform(
                        affine.copy(), bspline_for_affine_domain(affine, lower, upper, config.grid_spacing(0))
                    )

            transform = CompositeTransform(
                affine, bspline_for_affine_domain(affine, lower, upper, config.grid_spacing(0))
            )
            for level in levels:
                if level.index > 0:
                    transform = transform.refine_grid()
                outcomes.append(self._run_level("bspline", level, transform, rng))
                last_valid = transform.copy()
        except RegistrationError as e:
            logging.error(f"Registration failed at {self.stage} level {self.current_level}: {e}")
            logging.debug(traceback.format_exc())
            return RegistrationResult(
                last_valid, outcomes, "failed", str(e), e.exit_code, time.perf_counter() - started
            )

        seconds = time.perf_counter() - started
        logging.info(f"Registration finished: {sum(len(o.trace) for o in outcomes)} iterations in {seconds:.1f}s")
        return RegistrationResult(transform, outcomes, seconds=seconds)

    def quality_summary(self, transform: Transform, grid: ImageGrid, fixed_mask: Optional[BinaryMask] = None):
        """Displacement magnitude and Jacobian-determinant statistics over the fixed grid"""
        field_volume = displacement_field(transform, grid)
        magnitude = np.linalg.norm(field_volume.data.astype(np.float64), axis=-1)
        if fixed_mask is not None and not fixed_mask.is_empty():
            magnitude = magnitude[fixed_mask.data]
        _, jacobian = jacobian_determinant_map(transform, grid)
        summary = {
            "mean_displacement": float(np.mean(magnitude)),
            "max_displacement": float(np.max(magnitude)),
            "jacobian": jacobian,
        }
        return field_volume, summary

    def save(
        self,
        result: RegistrationResult,
        fixed: Volume,
        moving: Volume,
        out_dir: Path,
        fixed_mask: Optional[BinaryMask] = None,
        inputs: Optional[Dict[str, str]] = None,
    ) -> Path:
        """Write warped image, validity mask, displacement field, transform, report and timings"""
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        config = self.config

        field_volume, summary = self.quality_summary(result.transform, fixed.grid, fixed_mask)
        write_volume(field_volume, out_dir / DISPLACEMENT_FIELD)
        write_transform(result.transform, out_dir / TRANSFORM_DIR)

        warped, validity = warp_image(moving, result.transform, fixed.grid, config.background)
        write_mask(validity, out_dir / VALIDITY_MASK)
        if config.write_result_image:
            write_volume(warped, out_dir / RESULT_IMAGE)
        if config.write_snapshots:
            write_snapshots(fixed, warped, out_dir / SNAPSHOT_DIR)

        build_timing_report(out_dir / TIMINGS_FILE, result).flush()
        report = build_run_report(out_dir / REPORT_FILE, config, result, summary, inputs)
        path = report.flush()
        logging.info(
            f"Wrote results to {out_dir}: mean displacement {summary['mean_displacement']:.3f} mm, "
            f"min det(J) {summary['jacobian']['min']:.3f}"
        )
        return path
