import logging
from abc import ABC, abstractmethod
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from models.errors import ConfigurationError, NumericalError
from models.feature_model import (
    ExternalFeatureSource,
    FeatureExtractor,
    StaticFeatureMap,
    compute_static_features,
    pca_reduce,
    select_subset,
)
from models.transform_model import Transform
from models.volume_model import (
    BinaryMask,
    Volume,
    coefficients_for,
    cubic_weights,
    patch_offsets,
    resample_patches,
    sample_value,
    sample_value_and_gradient,
    warp_volume,
)

# Samples per work unit; fixed so the reduction order does not depend on the thread count
CHUNK_SIZE = 256

DISTANCE_EPSILON = 1e-12
L1_SMOOTHING = 1e-6


@dataclass
class DistanceResult:
    values: np.ndarray  # (N,)
    gradient: np.ndarray  # (N, C), dD/dm
    degenerate: int = 0


class DistanceFunction(ABC):
    """Dissimilarity between fixed and moving feature vectors, evaluated row-wise"""

    name = "base"

    @abstractmethod
    def evaluate(self, f: np.ndarray, m: np.ndarray) -> DistanceResult:
        pass

    @staticmethod
    def _scale(f: np.ndarray, m: np.ndarray) -> np.ndarray:
        return np.maximum(np.abs(f).max(axis=1), np.abs(m).max(axis=1))


class L1Distance(DistanceFunction):
    name = "L1"

    def evaluate(self, f, m):
        channels = f.shape[1]
        residual = m - f
        epsilon = (L1_SMOOTHING * self._scale(f, m))[:, np.newaxis]
        magnitude = np.abs(residual)
        with np.errstate(divide="ignore", invalid="ignore"):
            smoothed = np.where(epsilon > 0, np.minimum(1.0, magnitude / epsilon), 1.0)
        return DistanceResult(magnitude.mean(axis=1), np.sign(residual) * smoothed / channels)


class L2Distance(DistanceFunction):
    name = "L2"

    def evaluate(self, f, m):
        channels = f.shape[1]
        residual = m - f
        return DistanceResult(np.mean(residual * residual, axis=1), 2.0 * residual / channels)


class CosineDistance(DistanceFunction):
    """1 - <f, m> / (|f| |m|), denominators guarded"""

    name = "Cosine"
    center = False

    def evaluate(self, f, m):
        channels = f.shape[1]
        if self.center:
            f = f - f.mean(axis=1, keepdims=True)
            m = m - m.mean(axis=1, keepdims=True)
        scale = self._scale(f, m)
        epsilon = DISTANCE_EPSILON * channels * scale * scale + np.finfo(np.float64).tiny
        f_squared = np.sum(f * f, axis=1)
        m_squared = np.sum(m * m, axis=1)
        f_norm = np.sqrt(f_squared + epsilon)
        m_norm = np.sqrt(m_squared + epsilon)
        correlation = np.sum(f * m, axis=1) / (f_norm * m_norm)

        d_correlation = f / (f_norm * m_norm)[:, np.newaxis] - (correlation / (m_norm * m_norm))[:, np.newaxis] * m
        if self.center:
            d_correlation = d_correlation - d_correlation.mean(axis=1, keepdims=True)
        degenerate = int(np.count_nonzero((f_squared <= epsilon) | (m_squared <= epsilon)))
        return DistanceResult(1.0 - correlation, -d_correlation, degenerate)


class NCCDistance(CosineDistance):
    name = "NCC"
    center = True


class L1CosineDistance(DistanceFunction):
    name = "L1Cosine"

    def evaluate(self, f, m):
        l1 = L1Distance().evaluate(f, m)
        cosine = CosineDistance().evaluate(f, m)
        return DistanceResult(l1.values + cosine.values, l1.gradient + cosine.gradient, cosine.degenerate)


DISTANCES = {
    "L1": L1Distance(),
    "L2": L2Distance(),
    "NCC": NCCDistance(),
    "Cosine": CosineDistance(),
    "L1Cosine": L1CosineDistance(),
}


def get_distance(name: str) -> DistanceFunction:
    if name not in DISTANCES:
        raise ConfigurationError(f"Unknown Loss: {name}; choose from {sorted(DISTANCES)}")
    return DISTANCES[name]


def distance_eval(kind: str, f: np.ndarray, m: np.ndarray) -> Tuple[float, np.ndarray]:
    """Distance of one feature pair and its derivative with respect to m"""
    f = np.asarray(f, dtype=np.float64).reshape(1, -1)
    m = np.asarray(m, dtype=np.float64).reshape(1, -1)
    if f.shape != m.shape or f.size == 0:
        raise ConfigurationError(f"Feature vectors must have equal nonzero length, got {f.size} and {m.size}")
    result = get_distance(kind).evaluate(f, m)
    return float(result.values[0]), result.gradient[0]


@dataclass
class ResolutionLevel:
    """Images and masks one pyramid level is registered on"""

    index: int
    fixed: Volume
    moving: Volume
    fixed_mask: Optional[BinaryMask] = None
    moving_mask: Optional[BinaryMask] = None

    def __post_init__(self):
        if self.fixed_mask is None:
            self.fixed_mask = BinaryMask.full_like(self.fixed)
        if self.moving_mask is None:
            self.moving_mask = BinaryMask.full_like(self.moving)


@dataclass
class MetricValue:
    value: float
    gradient: np.ndarray
    degenerate: int = 0
    details: Dict[str, float] = field(default_factory=dict)


class SimilarityMetric(ABC):
    """Sampled dissimilarity between the fixed image and the transformed moving image"""

    name = "base"

    def __init__(self, threads: int = 1):
        self.threads = max(1, int(threads))
        self.level: Optional[ResolutionLevel] = None

    def initialize(self, level: ResolutionLevel):
        """Prepare per-level state (coefficients, histogram ranges, feature maps)"""
        self.level = level

    def refresh(self, transform: Transform):
        """Recompute transform-dependent state; nothing to do for most metrics"""

    def sample_extent(self) -> Tuple[np.ndarray, np.ndarray]:
        """World offsets around x (fixed) and around T(x) (moving) that must stay inside the masks"""
        origin = np.zeros((1, 3))
        return origin, origin

    def valid_points(self, points: np.ndarray, mapped: np.ndarray) -> np.ndarray:
        """Extra admissibility beyond the masks; all points by default"""
        return np.ones(len(points), dtype=bool)

    @abstractmethod
    def evaluate(self, transform: Transform, points: np.ndarray, rng: np.random.Generator) -> MetricValue:
        pass

    def _reduce_chunks(
        self,
        work: Callable[[np.ndarray, np.random.Generator], Tuple[float, np.ndarray, int]],
        transform: Transform,
        points: np.ndarray,
        rng: np.random.Generator,
    ) -> MetricValue:
        """Evaluate fixed-size chunks (possibly in threads) and add the partial sums in chunk order"""
        points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
        if len(points) == 0:
            raise ConfigurationError("Cannot evaluate a metric on an empty sample set")
        starts = range(0, len(points), CHUNK_SIZE)
        seeds = rng.integers(0, np.iinfo(np.int64).max, size=len(starts))
        jobs = [(points[start : start + CHUNK_SIZE], np.random.default_rng(seed)) for start, seed in zip(starts, seeds)]

        if self.threads > 1 and len(jobs) > 1:
            with ThreadPoolExecutor(max_workers=self.threads) as pool:
                results = list(pool.map(lambda job: work(*job), jobs))
        else:
            results = [work(*job) for job in jobs]

        value = 0.0
        gradient = np.zeros(transform.parameter_count)
        degenerate = 0
        for chunk_value, chunk_gradient, chunk_degenerate in results:
            value += chunk_value
            gradient += chunk_gradient
            degenerate += chunk_degenerate
        count = len(points)
        if degenerate:
            logging.debug(f"{self.name}: {degenerate} sample(s) hit the guarded distance denominator")
        return MetricValue(value / count, gradient / count, degenerate)


class MeanSquares(SimilarityMetric):
    """Mean over samples of (I_F(x) - I_M(T(x)))^2"""

    name = "MSE"

    def evaluate(self, transform, points, rng):
        fixed = coefficients_for(self.level.fixed)
        moving = coefficients_for(self.level.moving)

        def work(chunk, _rng):
            f, _ = sample_value(fixed, chunk)
            mapped = transform.apply(chunk)
            m, grad, _ = sample_value_and_gradient(moving, mapped)
            residual = m[:, 0] - f[:, 0]
            cotangent = 2.0 * residual[:, np.newaxis] * grad[:, 0, :]
            return float(np.sum(residual * residual)), transform.vjp(chunk, cotangent), 0

        return self._reduce_chunks(work, transform, points, rng)


def _sample_pair(level: ResolutionLevel, transform: Transform, points: np.ndarray):
    fixed = coefficients_for(level.fixed)
    moving = coefficients_for(level.moving)
    f, _ = sample_value(fixed, points)
    m, grad, _ = sample_value_and_gradient(moving, transform.apply(points))
    return f[:, 0], m[:, 0], grad[:, 0, :]


class NormalizedCorrelation(SimilarityMetric):
    """1 - Pearson correlation of fixed and moving intensities over the sample set"""

    name = "NCC"

    def evaluate(self, transform, points, rng):
        points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
        f, m, grad = _sample_pair(self.level, transform, points)
        a = f - f.mean()
        b = m - m.mean()
        scale = max(np.abs(f).max(), np.abs(m).max())
        epsilon = DISTANCE_EPSILON * len(points) * scale * scale
        a_squared = float(a @ a) + epsilon
        b_squared = float(b @ b) + epsilon
        if a_squared <= 0 or b_squared <= 0:
            raise NumericalError("NCC undefined: fixed and moving samples are all zero")
        norm = np.sqrt(a_squared * b_squared)
        correlation = float(a @ b) / norm
        d_value = -(a / norm - correlation * b / b_squared)
        gradient = transform.vjp(points, d_value[:, np.newaxis] * grad)
        degenerate = int(a_squared <= 2 * epsilon) + int(b_squared <= 2 * epsilon)
        return MetricValue(1.0 - correlation, gradient, degenerate)


def parzen_window(position: np.ndarray, bins: int) -> Tuple[np.ndarray, np.ndarray]:
    """Cubic B-spline taps (n, 4) around continuous bin positions, and the fractional offsets"""
    floor = np.floor(position)
    taps = floor.astype(np.int64)[:, np.newaxis] - 1 + np.arange(4)
    return np.clip(taps, 0, bins - 1), position - floor


def joint_histogram(fixed_position: np.ndarray, moving_position: np.ndarray, bins: int) -> np.ndarray:
    """Normalised joint histogram with a cubic Parzen window on both axes"""
    fixed_taps, fixed_t = parzen_window(fixed_position, bins)
    moving_taps, moving_t = parzen_window(moving_position, bins)
    weights = cubic_weights(fixed_t)[:, :, np.newaxis] * cubic_weights(moving_t)[:, np.newaxis, :]
    rows = np.broadcast_to(fixed_taps[:, :, np.newaxis], weights.shape).ravel()
    cols = np.broadcast_to(moving_taps[:, np.newaxis, :], weights.shape).ravel()
    joint = np.zeros((bins, bins))
    np.add.at(joint, (rows, cols), weights.ravel())
    return joint / len(fixed_position)


class NormalizedMutualInformation(SimilarityMetric):
    """-(H(F) + H(M)) / H(F, M) from a joint histogram with cubic Parzen windows"""

    name = "NMI"
    PADDING = 2
    LOWER_PERCENTILE = 0.5
    UPPER_PERCENTILE = 99.5

    def __init__(self, bins: int = 32, threads: int = 1):
        super().__init__(threads)
        if bins < 2 * self.PADDING + 2:
            raise ConfigurationError(f"NumberOfHistogramBins must be at least {2 * self.PADDING + 2}, got {bins}")
        self.bins = int(bins)
        self._fixed_range = (0.0, 1.0)
        self._moving_range = (0.0, 1.0)

    def _intensity_range(self, volume: Volume, mask: BinaryMask, label: str) -> Tuple[float, float]:
        values = volume.scalar()[mask.lookup(volume.grid.points())] if mask is not None else volume.scalar()
        if values.size == 0:
            values = volume.scalar().ravel()
        low, high = np.percentile(values, [self.LOWER_PERCENTILE, self.UPPER_PERCENTILE])
        if not high > low:
            raise NumericalError(f"NMI undefined: {label} image is constant over the mask ({low})")
        return float(low), float(high)

    def initialize(self, level):
        super().initialize(level)
        self._fixed_range = self._intensity_range(level.fixed, level.fixed_mask, "fixed")
        self._moving_range = self._intensity_range(level.moving, level.moving_mask, "moving")
        logging.debug(f"NMI level {level.index}: fixed range {self._fixed_range}, moving range {self._moving_range}")

    def _bin_width(self, value_range: Tuple[float, float]) -> float:
        return (value_range[1] - value_range[0]) / (self.bins - 2 * self.PADDING - 1)

    def evaluate(self, transform, points, rng):
        points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
        count = len(points)
        f, m, grad = _sample_pair(self.level, transform, points)
        if np.ptp(f) == 0 or np.ptp(m) == 0:
            raise NumericalError("NMI undefined: constant intensity over the sample set")

        f_low, f_high = self._fixed_range
        m_low, m_high = self._moving_range
        m_width = self._bin_width(self._moving_range)
        fixed_position = (np.clip(f, f_low, f_high) - f_low) / self._bin_width(self._fixed_range) + self.PADDING
        moving_position = (np.clip(m, m_low, m_high) - m_low) / m_width + self.PADDING
        in_range = (m >= m_low) & (m <= m_high)

        joint = joint_histogram(fixed_position, moving_position, self.bins)
        fixed_marginal = joint.sum(axis=1)
        moving_marginal = joint.sum(axis=0)

        def entropy(p):
            p = p[p > 0]
            return float(-np.sum(p * np.log(p)))

        h_fixed = entropy(fixed_marginal)
        h_moving = entropy(moving_marginal)
        h_joint = entropy(joint)
        if h_joint <= 0:
            raise NumericalError("NMI undefined: joint histogram has zero entropy")
        value = -(h_fixed + h_moving) / h_joint

        # The fixed marginal does not move with m: its derivative weights sum to zero
        tiny = np.finfo(np.float64).tiny
        log_joint = np.log(np.maximum(joint, tiny))
        log_moving = np.log(np.maximum(moving_marginal, tiny))
        d_joint = (log_moving[np.newaxis, :] + 1.0) / h_joint - (h_fixed + h_moving) * (log_joint + 1.0) / h_joint**2

        fixed_taps, fixed_t = parzen_window(fixed_position, self.bins)
        moving_taps, moving_t = parzen_window(moving_position, self.bins)
        per_sample = np.einsum(
            "ni,nj,nij->n",
            cubic_weights(fixed_t),
            cubic_weights(moving_t, derivative=1),
            d_joint[fixed_taps[:, :, np.newaxis], moving_taps[:, np.newaxis, :]],
        ) / count
        d_value = np.where(in_range, per_sample / m_width, 0.0)
        gradient = transform.vjp(points, d_value[:, np.newaxis] * grad)
        return MetricValue(value, gradient, details={"h_fixed": h_fixed, "h_moving": h_moving, "h_joint": h_joint})


@dataclass
class ImpactComponent:
    """One feature source of the IMPACT metric with its per-layer distances"""

    extractor: object  # FeatureExtractor, or ExternalFeatureSource in Static mode
    distances: List[DistanceFunction]
    subset: int = 0
    warn_clamp: bool = True

    def distance_for(self, layer_index: int) -> DistanceFunction:
        return self.distances[min(layer_index, len(self.distances) - 1)]

    def subset_size(self, channels: int) -> int:
        if self.subset <= 0 or self.subset >= channels:
            return channels
        return self.subset


def _layer_term(
    component: ImpactComponent, index: int, weight: float, f: np.ndarray, m: np.ndarray, rng: np.random.Generator
) -> Tuple[float, np.ndarray, int]:
    """Weighted distance sum over a chunk and its cotangent w.r.t. all moving channels"""
    channels = f.shape[1]
    k = component.subset_size(channels)
    distance = component.distance_for(index)
    if k < channels:
        selected = select_subset(f, k, rng)
        result = distance.evaluate(np.take_along_axis(f, selected, axis=1), np.take_along_axis(m, selected, axis=1))
        cotangent = np.zeros_like(m)
        np.put_along_axis(cotangent, selected, weight * result.gradient, axis=1)
    else:
        result = distance.evaluate(f, m)
        cotangent = weight * result.gradient
    return weight * float(np.sum(result.values)), cotangent, result.degenerate


class ImpactMetric(SimilarityMetric):
    """Feature-space dissimilarity summed over components and their enabled layers"""

    def __init__(self, components: List[ImpactComponent], threads: int = 1):
        super().__init__(threads)
        if not components:
            raise ConfigurationError("IMPACT needs at least one feature extractor")
        self.components = components

    def _warn_subset(self, component: ImpactComponent, channels: Sequence[int]):
        if component.warn_clamp and component.subset > 0 and any(component.subset > c for c in channels):
            logging.warning(
                f"SubsetFeatures={component.subset} exceeds the {min(channels)} channel(s) of "
                f"{getattr(component.extractor, 'name', 'features')}; using all channels"
            )


class ImpactJacobian(ImpactMetric):
    """IMPACT with features recomputed per sampled patch and backpropagated through the extractor"""

    name = "IMPACT-Jacobian"

    def __init__(self, components, threads=1):
        super().__init__(components, threads)
        for component in components:
            if not isinstance(component.extractor, FeatureExtractor):
                raise ConfigurationError("Jacobian mode needs built-in extractors; external maps require Static mode")
            component.extractor.validate_for_jacobian()
            layers = component.extractor.enabled_layers()
            self._warn_subset(component, [layer.channels for layer in layers])

    def sample_extent(self):
        offsets = np.concatenate(
            [patch_offsets(c.extractor.patch_size, c.extractor.patch_resolution) for c in self.components]
        )
        return offsets, offsets

    def evaluate(self, transform, points, rng):
        fixed = coefficients_for(self.level.fixed)
        moving = coefficients_for(self.level.moving)

        def work(chunk, chunk_rng):
            mapped = transform.apply(chunk)
            value = 0.0
            degenerate = 0
            cotangent_x = np.zeros((len(chunk), 3))
            for component in self.components:
                extractor = component.extractor
                size, resolution = extractor.patch_size, extractor.patch_resolution
                fixed_patches, _, _ = resample_patches(fixed, chunk, size, resolution)
                moving_patches, moving_grad, _ = resample_patches(moving, mapped, size, resolution, with_gradient=True)
                fixed_features = extractor.extract(fixed_patches)
                moving_features = extractor.extract(moving_patches)

                cotangents = []
                for index, layer in enumerate(extractor.enabled_layers()):
                    term, cotangent, bad = _layer_term(
                        component, index, layer.weight, fixed_features[index], moving_features[index], chunk_rng
                    )
                    value += term
                    degenerate += bad
                    cotangents.append(cotangent)

                patch_grad = extractor.backward(moving_patches, cotangents)
                # Chain rule through the patch centre: sum over patch voxels and channels of dS/dI * dI/dx
                cotangent_x += np.einsum("bxyzc,bxyzcd->bd", patch_grad, moving_grad)
            return value, transform.vjp(chunk, cotangent_x), degenerate

        return self._reduce_chunks(work, transform, points, rng)


class ImpactStatic(ImpactMetric):
    """IMPACT on dense feature maps, differentiated through the moving map's spline"""

    name = "IMPACT-Static"

    def __init__(
        self,
        components: List[ImpactComponent],
        update_interval: int = -1,
        pca_components: int = 0,
        tile=None,
        tile_overlap: int = 0,
        threads: int = 1,
    ):
        super().__init__(components, threads)
        self.update_interval = int(update_interval)
        self.pca_components = int(pca_components)
        self.tile = tile
        self.tile_overlap = tile_overlap
        self._fixed_maps: List[StaticFeatureMap] = []
        self._moving_maps: List[StaticFeatureMap] = []
        self._reference: Optional[Transform] = None
        if self.update_interval > 0 and any(isinstance(c.extractor, ExternalFeatureSource) for c in components):
            logging.warning("FeaturesMapUpdateInterval ignored for external feature maps; they are never recomputed")

    def _reduce(self, fixed_map: StaticFeatureMap, moving_map: StaticFeatureMap):
        if self.pca_components <= 0:
            return fixed_map, moving_map
        fixed_reduced = pca_reduce(fixed_map, self.pca_components, self.level.fixed_mask)
        moving_reduced = pca_reduce(moving_map, self.pca_components, bases=fixed_reduced.pca_bases)
        return fixed_reduced, moving_reduced

    def _maps_for(self, component: ImpactComponent, moving: Volume) -> Tuple[StaticFeatureMap, StaticFeatureMap]:
        source = component.extractor
        if isinstance(source, ExternalFeatureSource):
            fixed_map, moving_map = source.load(self.level.fixed, self.level.moving)
        else:
            fixed_map = compute_static_features(source, self.level.fixed, self.tile, self.tile_overlap)
            moving_map = compute_static_features(source, moving, self.tile, self.tile_overlap)
        return self._reduce(fixed_map, moving_map)

    def initialize(self, level):
        super().initialize(level)
        self._reference = None
        self._fixed_maps, self._moving_maps = [], []
        for component in self.components:
            fixed_map, moving_map = self._maps_for(component, level.moving)
            if fixed_map.channels != moving_map.channels:
                raise ConfigurationError(
                    f"Fixed and moving feature maps disagree: {fixed_map.channels} vs {moving_map.channels} channels"
                )
            self._warn_subset(component, fixed_map.channels)
            self._fixed_maps.append(fixed_map)
            self._moving_maps.append(moving_map)

    def refresh(self, transform: Transform):
        """Recompute built-in moving maps on the moving image warped by the current transform"""
        if self.update_interval <= 0:
            return
        fixed_grid = self.level.fixed.grid
        warped, _ = warp_volume(
            coefficients_for(self.level.moving), transform.apply(fixed_grid.points().reshape(-1, 3)), fixed_grid
        )
        for index, component in enumerate(self.components):
            if isinstance(component.extractor, ExternalFeatureSource):
                continue
            moving_map = compute_static_features(component.extractor, warped, self.tile, self.tile_overlap)
            if self.pca_components > 0:
                moving_map = pca_reduce(moving_map, self.pca_components, bases=self._fixed_maps[index].pca_bases)
            self._moving_maps[index] = moving_map
        self._reference = transform.copy()
        logging.debug("Static feature maps refreshed on the warped moving image")

    def _moving_positions(self, component_index: int, points: np.ndarray, mapped: np.ndarray) -> np.ndarray:
        refreshed = self._reference is not None and not isinstance(
            self.components[component_index].extractor, ExternalFeatureSource
        )
        if refreshed:
            return points + mapped - self._reference.apply(points)
        return mapped

    def valid_points(self, points, mapped):
        valid = np.ones(len(points), dtype=bool)
        for index, (fixed_map, moving_map) in enumerate(zip(self._fixed_maps, self._moving_maps)):
            positions = self._moving_positions(index, points, mapped)
            for layer in fixed_map.layers:
                valid &= layer.grid.contains(points)
            for layer in moving_map.layers:
                valid &= layer.grid.contains(positions)
        return valid

    def evaluate(self, transform, points, rng):
        def work(chunk, chunk_rng):
            mapped = transform.apply(chunk)
            value = 0.0
            degenerate = 0
            cotangent_x = np.zeros((len(chunk), 3))
            for index, component in enumerate(self.components):
                fixed_map, moving_map = self._fixed_maps[index], self._moving_maps[index]
                positions = self._moving_positions(index, chunk, mapped)
                fixed_samples = fixed_map.sample(chunk)
                moving_samples = moving_map.sample(positions)
                for layer_index, weight in enumerate(fixed_map.weights):
                    f = fixed_samples[layer_index][0]
                    m, m_grad, _ = moving_samples[layer_index]
                    term, cotangent, bad = _layer_term(component, layer_index, weight, f, m, chunk_rng)
                    value += term
                    degenerate += bad
                    cotangent_x += np.einsum("bc,bcd->bd", cotangent, m_grad)
            return value, transform.vjp(chunk, cotangent_x), degenerate

        return self._reduce_chunks(work, transform, points, rng)


METRICS = {
    "MSE": MeanSquares,
    "NCC": NormalizedCorrelation,
    "NMI": NormalizedMutualInformation,
    "IMPACT": ImpactJacobian,
}


def mse(level: ResolutionLevel, transform: Transform, points: np.ndarray, rng=None, threads: int = 1) -> MetricValue:
    metric = MeanSquares(threads)
    metric.initialize(level)
    return metric.evaluate(transform, points, rng if rng is not None else np.random.default_rng(0))


def ncc_metric(level: ResolutionLevel, transform: Transform, points: np.ndarray, rng=None) -> MetricValue:
    metric = NormalizedCorrelation()
    metric.initialize(level)
    return metric.evaluate(transform, points, rng if rng is not None else np.random.default_rng(0))


def nmi_metric(level: ResolutionLevel, transform: Transform, points: np.ndarray, rng=None, bins: int = 32):
    metric = NormalizedMutualInformation(bins)
    metric.initialize(level)
    return metric.evaluate(transform, points, rng if rng is not None else np.random.default_rng(0))


def impact_jacobian(
    level: ResolutionLevel,
    transform: Transform,
    extractor: FeatureExtractor,
    distance: str,
    points: np.ndarray,
    rng: np.random.Generator,
    subset: int = 0,
) -> MetricValue:
    metric = ImpactJacobian([ImpactComponent(extractor, [get_distance(distance)], subset)])
    metric.initialize(level)
    return metric.evaluate(transform, points, rng)


def impact_static(
    level: ResolutionLevel,
    transform: Transform,
    extractor,
    distance: str,
    points: np.ndarray,
    rng: np.random.Generator,
    subset: int = 0,
) -> MetricValue:
    metric = ImpactStatic([ImpactComponent(extractor, [get_distance(distance)], subset)])
    metric.initialize(level)
    return metric.evaluate(transform, points, rng)
