import logging
from abc import ABC, abstractmethod
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy import ndimage

from models.config_model import ParameterMap, parse_float, parse_int
from models.errors import ConfigurationError, NumericalError
from models.transform_model import BSplineTransform
from models.volume_model import (
    WARP_BATCH_POINTS,
    BinaryMask,
    ImageGrid,
    Vector3,
    Volume,
    as_vector3,
    coefficients_for,
    warp_volume,
)

INVERSION_TOLERANCE = 0.05
MIN_JACOBIAN = 0.2


class Structure(ABC):
    """Analytic solid painted into the phantom"""

    name: str
    intensity: float

    @abstractmethod
    def contains(self, points: np.ndarray) -> np.ndarray:
        pass

    @abstractmethod
    def landmarks(self) -> List[Tuple[str, np.ndarray]]:
        pass


@dataclass
class Ellipsoid(Structure):
    name: str
    center: Vector3
    radii: Vector3
    intensity: float

    def contains(self, points):
        scaled = (points - as_vector3(self.center)) / as_vector3(self.radii)
        return np.sum(scaled * scaled, axis=-1) <= 1.0

    def landmarks(self):
        return [(f"{self.name}:center", as_vector3(self.center))]


@dataclass
class Tube(Structure):
    """Capsule of constant radius around the segment start..end"""

    name: str
    start: Vector3
    end: Vector3
    radius: float
    intensity: float

    def contains(self, points):
        start, end = as_vector3(self.start), as_vector3(self.end)
        axis = end - start
        t = np.clip(((points - start) @ axis) / float(axis @ axis), 0.0, 1.0)
        closest = start + t[..., np.newaxis] * axis
        return np.linalg.norm(points - closest, axis=-1) <= self.radius

    def landmarks(self):
        return [(f"{self.name}:start", as_vector3(self.start)), (f"{self.name}:end", as_vector3(self.end))]


@dataclass
class Slab(Structure):
    """Axis-aligned box, used for rib-like plates"""

    name: str
    center: Vector3
    size: Vector3
    intensity: float

    def contains(self, points):
        return np.all(np.abs(points - as_vector3(self.center)) <= as_vector3(self.size) / 2.0, axis=-1)

    def landmarks(self):
        return [(f"{self.name}:center", as_vector3(self.center))]


@dataclass
class PhantomSpec:
    extent: Vector3 = 128.0
    spacing: Vector3 = 2.0
    structures: List[Structure] = field(default_factory=list)
    texture_amplitude: float = 0.02
    texture_scale: float = 4.0
    edge_blur: float = 0.6
    seed: int = 0

    @property
    def grid(self) -> ImageGrid:
        extent = as_vector3(self.extent, "extent")
        spacing = as_vector3(self.spacing, "spacing")
        dims = np.floor(extent / spacing + 1e-9).astype(int) + 1
        return ImageGrid.create(dims, spacing, 0.0)


@dataclass
class Phantom:
    volume: Volume
    labels: Dict[str, BinaryMask]
    landmarks: np.ndarray
    landmark_names: List[str] = field(default_factory=list)


def default_phantom_spec(extent: Vector3 = 128.0, spacing: Vector3 = 2.0, seed: int = 0) -> PhantomSpec:
    """Thorax-like layout: body, two lungs, heart, a bifurcating vessel and ribs"""
    extent = as_vector3(extent, "extent")
    rng = np.random.default_rng(seed)
    center = extent / 2.0
    half = extent / 2.0

    def at(*relative) -> np.ndarray:
        jitter = rng.uniform(-0.02, 0.02, size=3) * extent
        return center + np.asarray(relative) * half + jitter

    body = Ellipsoid("body", center, half * np.array([0.85, 0.7, 0.9]), 0.3)
    left_lung = Ellipsoid("left_lung", at(-0.38, 0.0, 0.05), half * np.array([0.3, 0.42, 0.6]), 0.05)
    right_lung = Ellipsoid("right_lung", at(0.38, 0.0, 0.05), half * np.array([0.3, 0.42, 0.6]), 0.05)
    heart = Ellipsoid("heart", at(0.0, 0.2, -0.25), half * np.array([0.18, 0.16, 0.2]), 0.6)

    root = at(0.0, -0.05, 0.6)
    fork = at(0.0, -0.05, 0.15)
    vessel_radius = max(0.025 * float(np.min(extent)), 1.5 * float(np.max(as_vector3(spacing))))
    structures: List[Structure] = [body, left_lung, right_lung, heart]
    structures.append(Tube("trunk", root, fork, vessel_radius, 0.8))
    structures.append(Tube("left_branch", fork, at(-0.35, 0.05, -0.25), 0.8 * vessel_radius, 0.8))
    structures.append(Tube("right_branch", fork, at(0.35, 0.05, -0.25), 0.8 * vessel_radius, 0.8))

    rib_size = half * np.array([1.2, 0.08, 0.06])
    for index, z in enumerate((-0.5, -0.1, 0.3)):
        structures.append(Slab(f"rib{index}", at(0.0, -0.62, z), rib_size, 1.0))

    return PhantomSpec(extent=extent, spacing=spacing, structures=structures, seed=seed)


def generate_phantom(spec: PhantomSpec) -> Phantom:
    """Paint structures in order (later ones on top), add smooth texture inside the body"""
    if not spec.structures:
        raise ConfigurationError("Phantom needs at least one structure")
    grid = spec.grid
    points = grid.points()
    image = np.zeros(grid.dims)
    labels, landmarks, names = {}, [], []
    for structure in spec.structures:
        inside = structure.contains(points)
        image[inside] = structure.intensity
        labels[structure.name] = BinaryMask(inside, grid)
        for name, point in structure.landmarks():
            names.append(name)
            landmarks.append(point)

    if spec.texture_amplitude > 0:
        rng = np.random.default_rng(spec.seed)
        noise = ndimage.gaussian_filter(rng.standard_normal(grid.dims), spec.texture_scale, mode="mirror")
        noise /= max(float(np.max(np.abs(noise))), np.finfo(float).tiny)
        support = np.zeros(grid.dims, dtype=bool)
        for mask in labels.values():
            support |= mask.data
        image += spec.texture_amplitude * noise * support
    if spec.edge_blur > 0:
        image = ndimage.gaussian_filter(image, spec.edge_blur, mode="nearest")

    logging.info(f"Generated phantom: dims {grid.dims}, {len(labels)} structures, {len(landmarks)} landmarks")
    return Phantom(Volume(image, grid), labels, np.asarray(landmarks).reshape(-1, 3), names)


def _min_jacobian(transform: BSplineTransform, grid: ImageGrid) -> float:
    points = grid.points().reshape(-1, 3)
    return float(np.min(np.linalg.det(transform.spatial_jacobian(points))))


def random_smooth_field(
    lower: Vector3,
    upper: Vector3,
    rng: np.random.Generator,
    spacing: float = 16.0,
    max_displacement: float = 8.0,
    min_jacobian: float = MIN_JACOBIAN,
) -> BSplineTransform:
    """Random B-spline deformation scaled to `max_displacement` mm, shrunk until det(J) > min_jacobian"""
    if max_displacement < 0:
        raise ConfigurationError(f"Maximum displacement must be >= 0, got {max_displacement}")
    transform = BSplineTransform.for_domain(lower, upper, spacing)
    if max_displacement == 0:
        return transform
    lower, upper = as_vector3(lower), as_vector3(upper)
    sample_grid = ImageGrid.create(
        np.floor((upper - lower) / (spacing / 4.0)).astype(int) + 1, spacing / 4.0, lower
    )
    coefficients = rng.standard_normal(transform.coefficients.shape)
    transform.coefficients = coefficients
    largest = float(np.max(np.linalg.norm(transform.displacement(sample_grid.points().reshape(-1, 3)), axis=1)))
    transform.coefficients = coefficients * (max_displacement / largest)

    for _ in range(20):
        if _min_jacobian(transform, sample_grid) > min_jacobian:
            return transform
        transform.coefficients = transform.coefficients * 0.8
    raise NumericalError(f"Could not build a fold-free field with det(J) > {min_jacobian}")


def invert_points(
    transform: BSplineTransform, targets: np.ndarray, iterations: int = 100, tolerance: float = 1e-4
) -> Tuple[np.ndarray, float]:
    """Solve T(x) = y by the fixed-point iteration x <- y - u(x), finished with Newton steps.

    Returns x and the max residual |T(x) - y|.
    """
    targets = np.asarray(targets, dtype=np.float64).reshape(-1, 3)
    points = targets.copy()
    if len(points) == 0:
        return points, 0.0
    residual = np.inf
    for iteration in range(iterations):
        error = transform.apply(points) - targets
        residual = float(np.max(np.linalg.norm(error, axis=1)))
        if residual < tolerance:
            break
        if iteration < 10:
            points = points - error
        else:
            jacobian = transform.spatial_jacobian(points)
            points = points - np.linalg.solve(jacobian, error[..., np.newaxis])[..., 0]
    return points, residual


def apply_known_deformation(
    phantom: Phantom, transform: BSplineTransform, tolerance: float = INVERSION_TOLERANCE
) -> Phantom:
    """Image and labels pulled back through the inverse field, landmarks pushed forward.

    Registering the original (fixed) to the result (moving) recovers `transform`.
    """
    grid = phantom.volume.grid
    voxels = grid.points().reshape(-1, 3)
    sources = np.empty_like(voxels)
    worst = 0.0
    for start in range(0, len(voxels), WARP_BATCH_POINTS):
        stop = start + WARP_BATCH_POINTS
        sources[start:stop], residual = invert_points(transform, voxels[start:stop])
        worst = max(worst, residual)
    if worst >= tolerance:
        raise NumericalError(f"Inverse deformation did not converge: max residual {worst:.4f} mm >= {tolerance} mm")
    logging.debug(f"Inverse field residual {worst:.2e} mm")

    warped, _ = warp_volume(coefficients_for(phantom.volume), sources, grid, background=0.0)
    index = grid.world_to_index(sources).T
    labels = {}
    for name, mask in phantom.labels.items():
        values = ndimage.map_coordinates(mask.data.astype(np.float64), index, order=1, mode="constant", cval=0.0)
        labels[name] = BinaryMask(values.reshape(grid.dims) >= 0.5, grid)
    landmarks = transform.apply(phantom.landmarks) if len(phantom.landmarks) else phantom.landmarks.copy()
    return Phantom(warped, labels, landmarks, list(phantom.landmark_names))


@dataclass
class ModalitySim:
    """Monotone intensity remap, multiplicative bias, additive noise and field-of-view truncation"""

    gamma: float = 1.0
    knots: Optional[Sequence[Tuple[float, float]]] = None
    intensity_range: Tuple[float, float] = (0.0, 1.0)
    bias_amplitude: float = 0.0
    bias_wavelength: float = 128.0
    noise_sigma: float = 0.0
    truncation_margin: float = 0.0
    background: float = 0.0

    def __post_init__(self):
        if self.gamma <= 0:
            raise ConfigurationError(f"Gamma must be positive, got {self.gamma}")
        low, high = self.intensity_range
        if not high > low:
            raise ConfigurationError(f"Intensity range must be increasing, got {self.intensity_range}")
        if self.knots is not None:
            knots = np.asarray(self.knots, dtype=np.float64)
            if knots.ndim != 2 or knots.shape[1] != 2 or len(knots) < 2:
                raise ConfigurationError("Remap knots must be at least two (input, output) pairs")
            if np.any(np.diff(knots[:, 0]) <= 0) or np.any(np.diff(knots[:, 1]) <= 0):
                raise ConfigurationError("Remap knots must be strictly increasing in both coordinates")
        if self.bias_amplitude < 0 or self.noise_sigma < 0 or self.truncation_margin < 0:
            raise ConfigurationError("Bias amplitude, noise sigma and truncation margin must be >= 0")

    @property
    def remaps(self) -> bool:
        return self.gamma != 1.0 or self.knots is not None

    def remap(self, values: np.ndarray) -> np.ndarray:
        if not self.remaps:
            return values
        low, high = self.intensity_range
        normalized = np.clip((values - low) / (high - low), 0.0, 1.0) ** self.gamma
        if self.knots is not None:
            knots = np.asarray(self.knots, dtype=np.float64)
            normalized = np.interp(normalized, knots[:, 0], knots[:, 1])
        return low + normalized * (high - low)


@dataclass
class SimulatedImage:
    volume: Volume
    valid: BinaryMask
    bias: np.ndarray


def _bias_field(grid: ImageGrid, sim: ModalitySim, rng: np.random.Generator) -> np.ndarray:
    """exp(a * s(x)) with s a random sum of low-frequency cosines, max |s| = 1"""
    if sim.bias_amplitude == 0:
        return np.ones(grid.dims)
    points = grid.points()
    smooth = np.zeros(grid.dims)
    for _ in range(4):
        direction = rng.standard_normal(3)
        direction /= np.linalg.norm(direction)
        phase = rng.uniform(0.0, 2.0 * np.pi)
        smooth += np.cos(2.0 * np.pi * (points @ direction) / sim.bias_wavelength + phase)
    smooth /= max(float(np.max(np.abs(smooth))), np.finfo(float).tiny)
    return np.exp(sim.bias_amplitude * smooth)


def simulate_modality(vol: Volume, sim: ModalitySim, rng: np.random.Generator) -> SimulatedImage:
    """remap, then bias, then noise, then truncation"""
    values = sim.remap(vol.scalar().astype(np.float64))
    bias = _bias_field(vol.grid, sim, rng)
    values = values * bias
    if sim.noise_sigma > 0:
        low, high = sim.intensity_range
        values = values + rng.normal(0.0, sim.noise_sigma * (high - low), size=values.shape)

    valid = np.ones(vol.dims, dtype=bool)
    if sim.truncation_margin > 0:
        lower, upper = vol.grid.physical_bounds()
        points = vol.grid.points()
        # Lateral field of view is cut on the x and y axes only
        for axis in (0, 1):
            valid &= (points[..., axis] >= lower[axis] + sim.truncation_margin) & (
                points[..., axis] <= upper[axis] - sim.truncation_margin
            )
        values = np.where(valid, values, sim.background)
    return SimulatedImage(vol.with_data(values), BinaryMask(valid, vol.grid), bias)


@dataclass
class PhantomSettings:
    """Parameters of the phantom subcommand; keys mirror its command-line flags"""

    extent: float = 128.0
    spacing: float = 2.0
    grid_spacing: float = 16.0
    max_displacement: float = 8.0
    gamma: float = 1.0
    bias_amplitude: float = 0.0
    noise_sigma: float = 0.0
    truncation_margin: float = 0.0
    seed: int = 0

    KEYS = {
        "PhantomExtent": ("extent", parse_float),
        "PhantomSpacing": ("spacing", parse_float),
        "DeformationGridSpacing": ("grid_spacing", parse_float),
        "MaximumDisplacement": ("max_displacement", parse_float),
        "Gamma": ("gamma", parse_float),
        "BiasAmplitude": ("bias_amplitude", parse_float),
        "NoiseSigma": ("noise_sigma", parse_float),
        "TruncationMargin": ("truncation_margin", parse_float),
        "RandomSeed": ("seed", parse_int),
    }

    @classmethod
    def from_parameter_map(cls, parameters: ParameterMap) -> "PhantomSettings":
        values = {}
        for key, tokens in parameters.items():
            if key not in cls.KEYS:
                logging.warning(f"Unknown phantom parameter {key} ignored")
                continue
            attribute, convert = cls.KEYS[key]
            if len(tokens) != 1:
                raise ConfigurationError(f"{key} takes a single value, got {tokens}")
            values[attribute] = convert(key, tokens[0])
        return cls(**values)

    def modality(self) -> ModalitySim:
        return ModalitySim(
            gamma=self.gamma,
            bias_amplitude=self.bias_amplitude,
            noise_sigma=self.noise_sigma,
            truncation_margin=self.truncation_margin,
        )
