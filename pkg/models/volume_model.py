import logging
import threading
from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple, Union

import numpy as np
from cachetools import LRUCache
from scipy import ndimage

from models.errors import ConfigurationError, NumericalError, OutOfDomainError

# Points this close (mm) outside the grid hull still count as inside
BOUNDS_TOLERANCE = 1e-6

# Points per batch when evaluating the spline densely
WARP_BATCH_POINTS = 65536

Vector3 = Union[float, Sequence[float], np.ndarray]


def as_vector3(value: Vector3, name: str = "value") -> np.ndarray:
    """Broadcast a scalar or 3-sequence to a float64 3-vector"""
    try:
        vector = np.broadcast_to(np.asarray(value, dtype=np.float64), (3,))
    except ValueError as e:
        raise ConfigurationError(f"{name} must be a scalar or 3 values: {e}")
    return vector.copy()


def as_size3(value: Union[int, Sequence[int]], name: str = "size") -> Tuple[int, int, int]:
    """Broadcast a scalar or 3-sequence to an integer triple"""
    vector = np.broadcast_to(np.asarray(value), (3,))
    size = tuple(int(v) for v in vector)
    if any(v < 1 for v in size):
        raise ConfigurationError(f"{name} must be >= 1 per axis, got {size}")
    return size


@dataclass(frozen=True)
class ImageGrid:
    """Axis-aligned voxel grid: world = origin + index * spacing"""

    dims: Tuple[int, int, int]
    spacing: Tuple[float, float, float]
    origin: Tuple[float, float, float]

    def __post_init__(self):
        if len(self.dims) != 3 or any(int(d) < 1 for d in self.dims):
            raise ConfigurationError(f"Grid dims must be 3 positive integers, got {self.dims}")
        if len(self.spacing) != 3 or any(not s > 0 for s in self.spacing):
            raise ConfigurationError(f"Grid spacing must be positive, got {self.spacing}")

    @classmethod
    def create(cls, dims, spacing: Vector3 = 1.0, origin: Vector3 = 0.0) -> "ImageGrid":
        return cls(
            dims=tuple(int(d) for d in dims),
            spacing=tuple(float(s) for s in as_vector3(spacing, "spacing")),
            origin=tuple(float(o) for o in as_vector3(origin, "origin")),
        )

    @property
    def spacing_array(self) -> np.ndarray:
        return np.asarray(self.spacing, dtype=np.float64)

    @property
    def origin_array(self) -> np.ndarray:
        return np.asarray(self.origin, dtype=np.float64)

    @property
    def voxel_count(self) -> int:
        return int(np.prod(self.dims))

    def index_to_world(self, index: np.ndarray) -> np.ndarray:
        return self.origin_array + np.asarray(index, dtype=np.float64) * self.spacing_array

    def world_to_index(self, points: np.ndarray) -> np.ndarray:
        return (np.asarray(points, dtype=np.float64) - self.origin_array) / self.spacing_array

    def physical_bounds(self) -> Tuple[np.ndarray, np.ndarray]:
        """Lower and upper corner of the voxel-centre hull"""
        lower = self.origin_array
        upper = lower + (np.asarray(self.dims) - 1) * self.spacing_array
        return lower, upper

    def extent(self) -> np.ndarray:
        return (np.asarray(self.dims) - 1) * self.spacing_array

    def contains(self, points: np.ndarray, tolerance: float = BOUNDS_TOLERANCE) -> np.ndarray:
        """True for points inside the physical hull"""
        lower, upper = self.physical_bounds()
        points = np.asarray(points, dtype=np.float64)
        return np.all((points >= lower - tolerance) & (points <= upper + tolerance), axis=-1)

    def points(self) -> np.ndarray:
        """World coordinates of every voxel, shape dims + (3,)"""
        axes = [self.origin[a] + np.arange(self.dims[a]) * self.spacing[a] for a in range(3)]
        return np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1)

    def resampled(self, spacing: Vector3) -> "ImageGrid":
        """Grid with a new spacing covering the same physical extent"""
        spacing = as_vector3(spacing, "spacing")
        dims = np.floor(self.extent() / spacing + 1e-9).astype(int) + 1
        return ImageGrid.create(dims, spacing, self.origin)

    def matches(self, other: "ImageGrid", tolerance: float = 1e-6) -> bool:
        return (
            tuple(self.dims) == tuple(other.dims)
            and np.allclose(self.spacing, other.spacing, atol=tolerance)
            and np.allclose(self.origin, other.origin, atol=tolerance)
        )


class Volume:
    """Physically calibrated 3D grid with one or more channels (float32, read-only)"""

    def __init__(self, data: np.ndarray, grid: ImageGrid, source_dtype: Optional[str] = None):
        data = np.asarray(data)
        if data.ndim == 3:
            data = data[..., np.newaxis]
        if data.ndim != 4 or data.shape[-1] < 1:
            raise ConfigurationError(f"Volume data must be 3D or 4D (x, y, z, channels), got {data.shape}")
        if tuple(data.shape[:3]) != tuple(grid.dims):
            raise ConfigurationError(f"Volume data shape {data.shape[:3]} does not match grid dims {grid.dims}")
        self._data = np.ascontiguousarray(data, dtype=np.float32)
        self._data.setflags(write=False)
        self.grid = grid
        self.source_dtype = source_dtype or data.dtype.name

    @classmethod
    def from_array(cls, data: np.ndarray, spacing: Vector3 = 1.0, origin: Vector3 = 0.0) -> "Volume":
        data = np.asarray(data)
        return cls(data, ImageGrid.create(data.shape[:3], spacing, origin))

    @property
    def data(self) -> np.ndarray:
        return self._data

    @property
    def dims(self) -> Tuple[int, int, int]:
        return self.grid.dims

    @property
    def spacing(self) -> np.ndarray:
        return self.grid.spacing_array

    @property
    def origin(self) -> np.ndarray:
        return self.grid.origin_array

    @property
    def channels(self) -> int:
        return int(self._data.shape[-1])

    def scalar(self) -> np.ndarray:
        """First channel as a 3D array"""
        return self._data[..., 0]

    def with_data(self, data: np.ndarray) -> "Volume":
        return Volume(data, self.grid, self.source_dtype)

    def dynamic_range(self) -> float:
        return float(np.max(self._data) - np.min(self._data)) if self._data.size else 0.0

    def __repr__(self):
        return f"Volume(dims={self.dims}, spacing={self.grid.spacing}, origin={self.grid.origin}, channels={self.channels})"


class BinaryMask:
    """Region-of-interest mask on an image grid"""

    def __init__(self, data: np.ndarray, grid: ImageGrid):
        data = np.asarray(data)
        if data.ndim == 4 and data.shape[-1] == 1:
            data = data[..., 0]
        if tuple(data.shape) != tuple(grid.dims):
            raise ConfigurationError(f"Mask shape {data.shape} does not match grid dims {grid.dims}")
        self._data = np.ascontiguousarray(data != 0)
        self._data.setflags(write=False)
        self.grid = grid

    @classmethod
    def full_like(cls, volume: Volume) -> "BinaryMask":
        return cls(np.ones(volume.dims, dtype=bool), volume.grid)

    @classmethod
    def from_volume(cls, volume: Volume, threshold: float = 0.5) -> "BinaryMask":
        return cls(volume.scalar() > threshold, volume.grid)

    @property
    def data(self) -> np.ndarray:
        return self._data

    def count(self) -> int:
        return int(np.count_nonzero(self._data))

    def is_empty(self) -> bool:
        return not self._data.any()

    def lookup(self, points: np.ndarray) -> np.ndarray:
        """Nearest-voxel membership of world points; outside the grid is outside the mask"""
        points = np.asarray(points, dtype=np.float64)
        index = np.rint(self.grid.world_to_index(points)).astype(np.int64)
        dims = np.asarray(self.grid.dims)
        inside = np.all((index >= 0) & (index < dims), axis=-1)
        clipped = np.clip(index, 0, dims - 1)
        return inside & self._data[clipped[..., 0], clipped[..., 1], clipped[..., 2]]

    def to_volume(self) -> Volume:
        return Volume(self._data.astype(np.float32), self.grid, source_dtype="uint8")


class SplineCoefficientVolume:
    """Cubic B-spline coefficients of a volume, sampled as a continuous C2 function"""

    def __init__(self, coefficients: np.ndarray, grid: ImageGrid, source_range: float = 0.0):
        self.coefficients = np.ascontiguousarray(coefficients, dtype=np.float64)
        self.coefficients.setflags(write=False)
        self.grid = grid
        self.source_range = source_range

    @property
    def channels(self) -> int:
        return int(self.coefficients.shape[-1])

    def reconstruct(self) -> np.ndarray:
        """Spline values at every grid point"""
        points = self.grid.points().reshape(-1, 3)
        values = [
            sample_value(self, points[start : start + WARP_BATCH_POINTS])[0]
            for start in range(0, len(points), WARP_BATCH_POINTS)
        ]
        return np.concatenate(values).reshape(tuple(self.grid.dims) + (self.channels,))


_COEFFICIENT_CACHE: LRUCache = LRUCache(maxsize=32)
_CACHE_LOCK = threading.Lock()


def prefilter_cubic(vol: Volume) -> SplineCoefficientVolume:
    """Compute interpolating cubic B-spline coefficients (mirror boundary)"""
    data = vol.data
    finite = np.isfinite(data)
    if not finite.all():
        bad = np.argwhere(~finite)
        raise NumericalError(
            f"Cannot prefilter volume with {len(bad)} non-finite voxels (first at index {tuple(bad[0][:3])})"
        )

    coefficients = np.empty(data.shape, dtype=np.float64)
    for channel in range(vol.channels):
        coefficients[..., channel] = ndimage.spline_filter(
            data[..., channel].astype(np.float64), order=3, output=np.float64, mode="mirror"
        )
    return SplineCoefficientVolume(coefficients, vol.grid, vol.dynamic_range())


def coefficients_for(vol: Volume) -> SplineCoefficientVolume:
    """Prefiltered coefficients of a volume, cached by volume identity"""
    key = id(vol)
    with _CACHE_LOCK:
        cached = _COEFFICIENT_CACHE.get(key)
        if cached is not None and cached[0] is vol:
            return cached[1]
    coefficients = prefilter_cubic(vol)
    with _CACHE_LOCK:
        _COEFFICIENT_CACHE[key] = (vol, coefficients)
    return coefficients


def _mirror_index(index: np.ndarray, size: int) -> np.ndarray:
    if size == 1:
        return np.zeros_like(index)
    period = 2 * (size - 1)
    index = np.abs(index) % period
    return np.where(index >= size, period - index, index)


def cubic_weights(t: np.ndarray, derivative: int = 0) -> np.ndarray:
    """Cubic B-spline tap weights for taps floor(u)-1 .. floor(u)+2, t = u - floor(u)"""
    t = np.asarray(t, dtype=np.float64)
    if derivative == 0:
        s = 1.0 - t
        t2 = t * t
        t3 = t2 * t
        return np.stack(
            [s * s * s / 6.0, (3.0 * t3 - 6.0 * t2 + 4.0) / 6.0, (-3.0 * t3 + 3.0 * t2 + 3.0 * t + 1.0) / 6.0, t3 / 6.0],
            axis=-1,
        )
    if derivative == 1:
        s = 1.0 - t
        t2 = t * t
        return np.stack([-0.5 * s * s, 1.5 * t2 - 2.0 * t, -1.5 * t2 + t + 0.5, 0.5 * t2], axis=-1)
    if derivative == 2:
        return np.stack([1.0 - t, 3.0 * t - 2.0, 1.0 - 3.0 * t, t], axis=-1)
    raise ValueError(f"Unsupported derivative order: {derivative}")


def contract_taps(block: np.ndarray, wx: np.ndarray, wy: np.ndarray, wz: np.ndarray) -> np.ndarray:
    """Tensor-product contraction of (N,4,4,4,C) taps with per-axis weights"""
    acc = np.sum(block * wz[:, np.newaxis, np.newaxis, :, np.newaxis], axis=3)
    acc = np.sum(acc * wy[:, np.newaxis, :, np.newaxis], axis=2)
    return np.sum(acc * wx[:, :, np.newaxis], axis=1)


def _evaluate(
    coeffs: SplineCoefficientVolume, points: np.ndarray, with_gradient: bool
) -> Tuple[np.ndarray, Optional[np.ndarray], np.ndarray]:
    grid = coeffs.grid
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    inside = grid.contains(points)
    u = grid.world_to_index(points)
    floor = np.floor(u)
    t = u - floor
    base = floor.astype(np.int64) - 1
    taps = np.arange(4)

    indices = [_mirror_index(base[:, a, np.newaxis] + taps, grid.dims[a]) for a in range(3)]
    block = coeffs.coefficients[
        indices[0][:, :, np.newaxis, np.newaxis],
        indices[1][:, np.newaxis, :, np.newaxis],
        indices[2][:, np.newaxis, np.newaxis, :],
    ]
    weights = [cubic_weights(t[:, a]) for a in range(3)]
    values = contract_taps(block, *weights)

    gradient = None
    if with_gradient:
        derivatives = [cubic_weights(t[:, a], derivative=1) for a in range(3)]
        spacing = grid.spacing_array
        gradient = np.stack(
            [
                contract_taps(block, derivatives[0], weights[1], weights[2]) / spacing[0],
                contract_taps(block, weights[0], derivatives[1], weights[2]) / spacing[1],
                contract_taps(block, weights[0], weights[1], derivatives[2]) / spacing[2],
            ],
            axis=-1,
        )
    return values, gradient, inside


def _check_strict(inside: np.ndarray, points: np.ndarray):
    if not inside.all():
        first = np.asarray(points, dtype=np.float64).reshape(-1, 3)[~inside][0]
        raise OutOfDomainError(f"{int((~inside).sum())} point(s) outside the volume bounds, first at {first}")


def sample_value(
    coeffs: SplineCoefficientVolume, points: np.ndarray, strict: bool = False
) -> Tuple[np.ndarray, np.ndarray]:
    """Interpolated values per channel at world points; returns (values, inside)"""
    single = np.ndim(points) == 1
    values, _, inside = _evaluate(coeffs, points, with_gradient=False)
    if strict:
        _check_strict(inside, points)
    if single:
        return values[0], inside[0]
    return values, inside


def sample_gradient(
    coeffs: SplineCoefficientVolume, points: np.ndarray, strict: bool = False
) -> Tuple[np.ndarray, np.ndarray]:
    """Spatial gradient per channel in value/mm, shape (N, C, 3); returns (gradients, inside)"""
    single = np.ndim(points) == 1
    _, gradient, inside = _evaluate(coeffs, points, with_gradient=True)
    if strict:
        _check_strict(inside, points)
    if single:
        return gradient[0], inside[0]
    return gradient, inside


def sample_value_and_gradient(
    coeffs: SplineCoefficientVolume, points: np.ndarray
) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    return _evaluate(coeffs, points, with_gradient=True)


def _validate_schedule(schedule: Sequence[Vector3]) -> List[np.ndarray]:
    if schedule is None or len(schedule) == 0:
        raise ConfigurationError("Pyramid schedule must contain at least one spacing")
    spacings = [as_vector3(level, "pyramid spacing") for level in schedule]
    for spacing in spacings:
        if np.any(spacing <= 0):
            raise ConfigurationError(f"Pyramid spacings must be positive, got {spacing}")
    for coarse, fine in zip(spacings, spacings[1:]):
        if np.any(fine > coarse) or np.all(fine == coarse):
            raise ConfigurationError(f"Pyramid schedule must be strictly decreasing, got {coarse} then {fine}")
    return spacings


def _resample_data(data: np.ndarray, source: ImageGrid, target: ImageGrid) -> np.ndarray:
    coordinates = source.world_to_index(target.points()).reshape(-1, 3).T
    output = np.empty(tuple(target.dims) + (data.shape[-1],), dtype=np.float32)
    for channel in range(data.shape[-1]):
        coefficients = ndimage.spline_filter(data[..., channel], order=3, output=np.float64, mode="mirror")
        output[..., channel] = ndimage.map_coordinates(
            coefficients, coordinates, order=3, mode="mirror", prefilter=False
        ).reshape(target.dims)
    return output


def build_pyramid(
    vol: Volume, schedule: Sequence[Vector3], smoothing: bool = True, downsampling: bool = True
) -> List[Volume]:
    """Gaussian-smoothed, resampled copies of a volume, coarse to fine"""
    spacings = _validate_schedule(schedule)
    levels = []
    for target in spacings:
        factor = target / vol.spacing
        data = vol.data.astype(np.float64)

        if smoothing:
            sigma = np.where(factor > 1.0, 0.5 * factor, 0.0)
            if np.any(sigma > 0):
                data = np.stack(
                    [ndimage.gaussian_filter(data[..., c], sigma=sigma, mode="mirror") for c in range(vol.channels)],
                    axis=-1,
                )

        if downsampling and not np.allclose(target, vol.spacing):
            grid = vol.grid.resampled(target)
            data = _resample_data(data, vol.grid, grid)
        else:
            grid = vol.grid

        logging.debug(f"Pyramid level spacing {target.tolist()} -> dims {grid.dims}")
        levels.append(Volume(data, grid, vol.source_dtype))
    return levels


def resample_to_spacing(vol: Volume, spacing: Vector3) -> Volume:
    """Cubic resampling onto a new spacing over the same physical extent"""
    spacing = as_vector3(spacing, "spacing")
    if np.allclose(spacing, vol.spacing):
        return vol
    grid = vol.grid.resampled(spacing)
    return Volume(_resample_data(vol.data.astype(np.float64), vol.grid, grid), grid, vol.source_dtype)


def patch_offsets(patch_size, patch_resolution: Vector3, axes: Optional[np.ndarray] = None) -> np.ndarray:
    """World offsets (Q, 3) of a regular patch grid centred on the origin"""
    size = as_size3(patch_size, "patch size")
    resolution = as_vector3(patch_resolution, "patch resolution")
    ranges = [(np.arange(size[a]) - (size[a] - 1) / 2.0) * resolution[a] for a in range(3)]
    local = np.stack(np.meshgrid(*ranges, indexing="ij"), axis=-1).reshape(-1, 3)
    if axes is None:
        return local
    axes = np.asarray(axes, dtype=np.float64)
    if axes.shape != (3, 3):
        raise ConfigurationError(f"Patch axes must be a 3x3 matrix, got {axes.shape}")
    return local @ axes


def resample_patches(
    coeffs: SplineCoefficientVolume,
    centers: np.ndarray,
    patch_size,
    patch_resolution: Vector3,
    axes: Optional[np.ndarray] = None,
    with_gradient: bool = False,
):
    """Sample a batch of patches; returns (patches (B,P1,P2,P3,C), gradients or None, valid (B,))"""
    size = as_size3(patch_size, "patch size")
    offsets = patch_offsets(size, patch_resolution, axes)
    centers = np.asarray(centers, dtype=np.float64).reshape(-1, 3)
    points = (centers[:, np.newaxis, :] + offsets[np.newaxis, :, :]).reshape(-1, 3)
    values, gradient, inside = _evaluate(coeffs, points, with_gradient)

    batch = centers.shape[0]
    patches = values.reshape((batch,) + size + (coeffs.channels,))
    valid = inside.reshape(batch, -1).all(axis=1)
    if gradient is not None:
        gradient = gradient.reshape((batch,) + size + (coeffs.channels, 3))
    return patches, gradient, valid


def resample_patch(
    coeffs: SplineCoefficientVolume,
    center: np.ndarray,
    patch_size,
    patch_resolution: Vector3,
    axes: Optional[np.ndarray] = None,
) -> np.ndarray:
    """Regular P1 x P2 x P3 (x C) patch of spacing R centred at a world point"""
    patches, _, valid = resample_patches(coeffs, np.asarray(center)[np.newaxis], patch_size, patch_resolution, axes)
    if not valid[0]:
        raise OutOfDomainError(f"Patch centred at {np.asarray(center).tolist()} leaves the volume bounds")
    return patches[0]


def warp_volume(
    coeffs: SplineCoefficientVolume, mapped_points: np.ndarray, grid: ImageGrid, background: float = 0.0
) -> Tuple[Volume, BinaryMask]:
    """Pull values from `coeffs` at mapped positions of every voxel of `grid`"""
    mapped = np.asarray(mapped_points, dtype=np.float64).reshape(-1, 3)
    values = np.empty((len(mapped), coeffs.channels))
    inside = np.empty(len(mapped), dtype=bool)
    for start in range(0, len(mapped), WARP_BATCH_POINTS):
        stop = start + WARP_BATCH_POINTS
        values[start:stop], inside[start:stop] = sample_value(coeffs, mapped[start:stop])
    values = np.where(inside[:, np.newaxis], values, background)
    shape = tuple(grid.dims)
    warped = Volume(values.reshape(shape + (coeffs.channels,)), grid)
    return warped, BinaryMask(inside.reshape(shape), grid)
