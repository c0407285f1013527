import logging
from abc import ABC, abstractmethod
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from models.errors import ConfigurationError, VolumeIOError
from models.volume_model import (
    BinaryMask,
    SplineCoefficientVolume,
    Vector3,
    Volume,
    as_size3,
    as_vector3,
    coefficients_for,
    resample_to_spacing,
    sample_value_and_gradient,
)

PADDING_POLICIES = ("duplicate", "mean")
MIND_WEIGHTINGS = ("box", "gaussian")

# Voxels per batch when sliding windows over a whole image
DENSE_BATCH_VOXELS = 8192


@dataclass
class FeatureLayer:
    layer_id: int
    channels: int
    weight: float = 1.0
    supports_jacobian: bool = True

    def to_dict(self):
        return {
            "layer_id": self.layer_id,
            "channels": self.channels,
            "weight": self.weight,
            "supports_jacobian": self.supports_jacobian,
        }


@dataclass
class MindConfig:
    radius: int = 1
    dilation: int = 1
    weighting: str = "box"

    def __post_init__(self):
        if int(self.radius) < 1 or int(self.dilation) < 1:
            raise ConfigurationError(f"MIND radius and dilation must be >= 1, got r={self.radius} d={self.dilation}")
        if self.weighting not in MIND_WEIGHTINGS:
            raise ConfigurationError(f"Unknown MIND patch weighting: {self.weighting}; choose from {MIND_WEIGHTINGS}")
        self.radius = int(self.radius)
        self.dilation = int(self.dilation)

    @property
    def field_of_view(self) -> int:
        return 2 * self.radius * self.dilation + 1

    @property
    def half_width(self) -> int:
        """Reach of the descriptor from its centre voxel"""
        return self.radius * self.dilation + self.dilation

    @property
    def receptive_field(self) -> int:
        return 2 * self.half_width + 1


def pad_channels(patch: np.ndarray, required: int, policy: str = "duplicate") -> np.ndarray:
    """Extend the trailing channel axis to `required` channels"""
    if policy not in PADDING_POLICIES:
        raise ConfigurationError(f"Unknown channel padding policy: {policy}; choose from {PADDING_POLICIES}")
    patch = np.asarray(patch)
    existing = patch.shape[-1]
    if existing >= required:
        return patch
    if policy == "duplicate":
        return patch[..., np.arange(required) % existing]
    mean = patch.mean(axis=-1, keepdims=True)
    filler = np.broadcast_to(mean, patch.shape[:-1] + (required - existing,))
    return np.concatenate([patch, filler], axis=-1)


def pad_channels_backward(gradient: np.ndarray, existing: int, policy: str = "duplicate") -> np.ndarray:
    """Fold a gradient w.r.t. padded channels back onto the original channels"""
    gradient = np.asarray(gradient)
    required = gradient.shape[-1]
    if existing >= required:
        return gradient
    if policy == "duplicate":
        folded = np.zeros(gradient.shape[:-1] + (existing,), dtype=gradient.dtype)
        for channel in range(required):
            folded[..., channel % existing] += gradient[..., channel]
        return folded
    extra = gradient[..., existing:].sum(axis=-1, keepdims=True) / existing
    return gradient[..., :existing] + extra


def select_subset(features: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    """Random channel indices without replacement, one draw per feature vector"""
    features = np.asarray(features)
    channels = features.shape[-1]
    if k < 1 or k > channels:
        raise ConfigurationError(f"Feature subset size must be in [1, {channels}], got {k}")
    if features.ndim == 1:
        return np.sort(rng.permutation(channels)[:k])
    count = int(np.prod(features.shape[:-1]))
    order = np.argsort(rng.random((count, channels)), axis=1)[:, :k]
    return np.sort(order, axis=1).reshape(features.shape[:-1] + (k,))


class FeatureExtractor(ABC):
    """Patch in, per-layer feature vectors out"""

    name = "base"

    def __init__(
        self,
        patch_size=(5, 5, 5),
        patch_resolution: Vector3 = 1.5,
        input_channels: int = 1,
        layers: Optional[List[FeatureLayer]] = None,
        layer_mask: Optional[Sequence[bool]] = None,
        padding_policy: str = "duplicate",
    ):
        self.patch_size = as_size3(patch_size, "PatchSize")
        self.patch_resolution = as_vector3(patch_resolution, "VoxelSize")
        if np.any(self.patch_resolution <= 0):
            raise ConfigurationError(f"VoxelSize must be positive, got {self.patch_resolution}")
        self.input_channels = int(input_channels)
        if padding_policy not in PADDING_POLICIES:
            raise ConfigurationError(f"Unknown channel padding policy: {padding_policy}")
        self.padding_policy = padding_policy
        self.layers = layers or [FeatureLayer(0, self.default_channels())]
        self.layer_mask = list(layer_mask) if layer_mask is not None else [True] * len(self.layers)
        self._validate_layers()

    def _validate_layers(self):
        if len(self.layer_mask) != len(self.layers):
            raise ConfigurationError(
                f"{self.name}: LayersMask has {len(self.layer_mask)} entries for {len(self.layers)} layers"
            )
        enabled = self.enabled_layers()
        if not enabled:
            raise ConfigurationError(f"{self.name}: at least one layer must be enabled")
        if any(layer.weight < 0 for layer in self.layers):
            raise ConfigurationError(f"{self.name}: layer weights must be >= 0")
        if sum(layer.weight for layer in enabled) <= 0:
            raise ConfigurationError(f"{self.name}: enabled layer weights must not all be zero")

    def enabled_layers(self) -> List[FeatureLayer]:
        return [layer for layer, on in zip(self.layers, self.layer_mask) if on]

    def validate_for_jacobian(self):
        unsupported = [layer.layer_id for layer in self.enabled_layers() if not layer.supports_jacobian]
        if unsupported:
            raise ConfigurationError(f"{self.name}: layers {unsupported} have no analytic gradient (use Static mode)")

    @abstractmethod
    def default_channels(self) -> int:
        pass

    @property
    @abstractmethod
    def receptive_field(self) -> Tuple[int, int, int]:
        """Voxels per axis a dense descriptor reads around its centre"""
        pass

    @abstractmethod
    def _forward(self, patches: np.ndarray) -> np.ndarray:
        """(B, P1, P2, P3, C_in) -> (B, C)"""
        pass

    @abstractmethod
    def _backward(self, patches: np.ndarray, cotangent: np.ndarray) -> np.ndarray:
        """(B, C) cotangent -> (B, P1, P2, P3, C_in) gradient"""
        pass

    def _prepare(self, patches: np.ndarray) -> np.ndarray:
        patches = np.asarray(patches, dtype=np.float64)
        if patches.ndim == 4:
            patches = patches[..., np.newaxis]
        return pad_channels(patches, self.input_channels, self.padding_policy)

    def extract(self, patches: np.ndarray) -> List[np.ndarray]:
        """Feature vectors per enabled layer for a batch of patches"""
        features = self._forward(self._prepare(patches))
        return [features for _ in self.enabled_layers()]

    def backward(self, patches: np.ndarray, cotangents: List[np.ndarray]) -> np.ndarray:
        """Vector-Jacobian product: gradient of sum_l <cotangent_l, phi_l> w.r.t. the patch voxels"""
        patches = np.asarray(patches, dtype=np.float64)
        existing = 1 if patches.ndim == 4 else patches.shape[-1]
        total = np.sum(cotangents, axis=0)
        gradient = self._backward(self._prepare(patches), total)
        gradient = pad_channels_backward(gradient, existing, self.padding_policy)
        return gradient[..., 0] if patches.ndim == 4 else gradient

    def jacobian(self, patch: np.ndarray) -> np.ndarray:
        """Dense d phi / d patch for one patch, shape (C, patch voxels)"""
        patch = np.asarray(patch, dtype=np.float64)[np.newaxis]
        channels = self._forward(self._prepare(patch)).shape[1]
        rows = []
        for channel in range(channels):
            cotangent = np.zeros((1, channels))
            cotangent[0, channel] = 1.0
            rows.append(self.backward(patch, [cotangent])[0].ravel())
        return np.stack(rows)

    def dense_core(self, windows: np.ndarray) -> np.ndarray:
        """Descriptors for windows of receptive-field size centred on each voxel"""
        return self._forward(windows)


class IdentityExtractor(FeatureExtractor):
    """Intensity passthrough: the flattened patch is the feature vector"""

    name = "Identity"

    def default_channels(self) -> int:
        return int(np.prod(self.patch_size)) * self.input_channels

    @property
    def receptive_field(self) -> Tuple[int, int, int]:
        return self.patch_size

    def _forward(self, patches: np.ndarray) -> np.ndarray:
        return patches.reshape(len(patches), -1)

    def _backward(self, patches: np.ndarray, cotangent: np.ndarray) -> np.ndarray:
        return np.asarray(cotangent, dtype=np.float64).reshape(patches.shape)


class MindExtractor(FeatureExtractor):
    """Six-channel self-similarity descriptor at the patch centre"""

    name = "MIND"
    CHANNELS = 6
    RANGE_FLOOR = 1e-6
    ABSOLUTE_FLOOR = 1e-30

    def __init__(self, mind: Optional[MindConfig] = None, **kwargs):
        self.mind = mind or MindConfig()
        super().__init__(**kwargs)
        if self.input_channels != 1:
            raise ConfigurationError(f"MIND works on single-channel input, got NumberOfChannels={self.input_channels}")
        needed = self.mind.receptive_field
        for size in self.patch_size:
            if size % 2 == 0 or size < needed:
                raise ConfigurationError(
                    f"MIND(r={self.mind.radius}, d={self.mind.dilation}) needs odd PatchSize >= {needed}, "
                    f"got {self.patch_size}"
                )
        self._geometry_cache: Dict[Tuple[int, int, int], dict] = {}

    def default_channels(self) -> int:
        return self.CHANNELS

    @property
    def receptive_field(self) -> Tuple[int, int, int]:
        return (self.mind.receptive_field,) * 3

    def _geometry(self, shape: Tuple[int, int, int]) -> dict:
        """Flat voxel indices used by the descriptor for a given patch shape"""
        if shape in self._geometry_cache:
            return self._geometry_cache[shape]
        r, d, h = self.mind.radius, self.mind.dilation, self.mind.half_width
        center = np.array([(s - 1) // 2 for s in shape])
        lattice = d * np.arange(-r, r + 1)
        q = np.stack(np.meshgrid(lattice, lattice, lattice, indexing="ij"), axis=-1).reshape(-1, 3)
        offsets = d * np.array([[1, 0, 0], [-1, 0, 0], [0, 1, 0], [0, -1, 0], [0, 0, 1], [0, 0, -1]])

        if self.mind.weighting == "gaussian":
            sigma = 0.5 * max(r, 1)
            weights = np.exp(-np.sum((q / d) ** 2, axis=1) / (2.0 * sigma**2))
        else:
            weights = np.ones(len(q))
        weights = weights / weights.sum()

        cube = np.arange(-h, h + 1)
        cube_points = np.stack(np.meshgrid(cube, cube, cube, indexing="ij"), axis=-1).reshape(-1, 3)
        geometry = {
            "reference": np.ravel_multi_index((center + q).T, shape),
            "shifted": [np.ravel_multi_index((center + o + q).T, shape) for o in offsets],
            "cube": np.ravel_multi_index((center + cube_points).T, shape),
            "weights": weights,
        }
        self._geometry_cache[shape] = geometry
        return geometry

    def _distances(self, flat: np.ndarray, geometry: dict):
        reference = flat[:, geometry["reference"]]
        differences = [reference - flat[:, shifted] for shifted in geometry["shifted"]]
        distances = np.stack([(diff * diff) @ geometry["weights"] for diff in differences], axis=1)
        return distances, differences

    def _variance(self, flat: np.ndarray, distances: np.ndarray, geometry: dict):
        cube = flat[:, geometry["cube"]]
        high = np.argmax(cube, axis=1)
        low = np.argmin(cube, axis=1)
        rows = np.arange(len(flat))
        value_range = cube[rows, high] - cube[rows, low]
        candidates = np.stack(
            [
                distances.mean(axis=1),
                self.RANGE_FLOOR * value_range**2,
                np.full(len(flat), self.ABSOLUTE_FLOOR),
            ],
            axis=1,
        )
        regime = np.argmax(candidates, axis=1)
        variance = candidates[rows, regime]
        return variance, regime, value_range, geometry["cube"][high], geometry["cube"][low]

    def _forward(self, patches: np.ndarray) -> np.ndarray:
        shape = patches.shape[1:4]
        geometry = self._geometry(shape)
        flat = patches[..., 0].reshape(len(patches), -1)
        distances, _ = self._distances(flat, geometry)
        variance, *_ = self._variance(flat, distances, geometry)
        lowest = distances.min(axis=1, keepdims=True)
        return np.exp(-(distances - lowest) / variance[:, np.newaxis])

    def _backward(self, patches: np.ndarray, cotangent: np.ndarray) -> np.ndarray:
        shape = patches.shape[1:4]
        geometry = self._geometry(shape)
        batch = len(patches)
        rows = np.arange(batch)
        flat = patches[..., 0].reshape(batch, -1)
        distances, differences = self._distances(flat, geometry)
        variance, regime, value_range, high, low = self._variance(flat, distances, geometry)
        nearest = np.argmin(distances, axis=1)
        lowest = distances[rows, nearest][:, np.newaxis]
        scaled = (distances - lowest) / variance[:, np.newaxis]
        descriptor = np.exp(-scaled)

        a = -np.asarray(cotangent, dtype=np.float64).reshape(batch, -1) * descriptor
        grad_distances = a / variance[:, np.newaxis]
        grad_distances[rows, nearest] -= a.sum(axis=1) / variance
        grad_variance = -np.sum(a * scaled, axis=1) / variance

        mean_regime = regime == 0
        grad_distances += np.where(mean_regime, grad_variance / self.CHANNELS, 0.0)[:, np.newaxis]

        grad_flat = np.zeros_like(flat)
        range_regime = regime == 1
        if range_regime.any():
            slope = np.where(range_regime, grad_variance * 2.0 * self.RANGE_FLOOR * value_range, 0.0)
            grad_flat[rows, high] += slope
            grad_flat[rows, low] -= slope

        weights = geometry["weights"]
        for channel, shifted in enumerate(geometry["shifted"]):
            local = 2.0 * weights * differences[channel] * grad_distances[:, channel, np.newaxis]
            grad_flat[:, geometry["reference"]] += local
            grad_flat[:, shifted] -= local
        return grad_flat.reshape(patches.shape[:4])[..., np.newaxis]


EXTRACTORS = {"Identity": IdentityExtractor, "MIND": MindExtractor}


def create_extractor(name: str, **kwargs) -> FeatureExtractor:
    """Instantiate a built-in extractor by name"""
    if name not in EXTRACTORS:
        raise ConfigurationError(f"Unknown feature extractor: {name}; choose from {sorted(EXTRACTORS)}")
    if name != "MIND":
        kwargs.pop("mind", None)
    return EXTRACTORS[name](**kwargs)


@dataclass
class PcaBasis:
    mean: np.ndarray
    components: np.ndarray  # (q, C), rows are principal directions
    explained_variance: np.ndarray

    def project(self, values: np.ndarray) -> np.ndarray:
        return (np.asarray(values, dtype=np.float64) - self.mean) @ self.components.T


@dataclass
class StaticFeatureMap:
    """Per-layer multi-channel feature volumes in the frame of their source image"""

    layers: List[Volume]
    names: List[str] = field(default_factory=list)
    weights: List[float] = field(default_factory=list)
    pca_bases: List[Optional[PcaBasis]] = field(default_factory=list)

    def __post_init__(self):
        if not self.names:
            self.names = [f"layer{i}" for i in range(len(self.layers))]
        if not self.weights:
            self.weights = [1.0] * len(self.layers)
        if not self.pca_bases:
            self.pca_bases = [None] * len(self.layers)

    @property
    def channels(self) -> List[int]:
        return [layer.channels for layer in self.layers]

    def coefficients(self) -> List[SplineCoefficientVolume]:
        return [coefficients_for(layer) for layer in self.layers]

    def sample(self, points: np.ndarray) -> List[Tuple[np.ndarray, np.ndarray, np.ndarray]]:
        """(values, gradients, inside) per layer at world points"""
        return [sample_value_and_gradient(coeffs, points) for coeffs in self.coefficients()]


def _layer_matches_frame(layer: Volume, frame: Volume) -> bool:
    layer_low, layer_high = layer.grid.physical_bounds()
    frame_low, frame_high = frame.grid.physical_bounds()
    tolerance = np.maximum(layer.spacing, frame.spacing)
    return bool(np.all(np.abs(layer_low - frame_low) <= 1e-6) and np.all(np.abs(layer_high - frame_high) <= tolerance))


def load_static_features(
    paths: Sequence[str], frame: Volume, expected_channels: Optional[Sequence[int]] = None
) -> StaticFeatureMap:
    """Read precomputed per-layer feature volumes and check them against their source image"""
    from models.io_model import read_volume

    layers = []
    for index, path in enumerate(paths):
        try:
            layer = read_volume(path)
        except VolumeIOError as e:
            raise VolumeIOError(f"Feature layer {index} ({path}): {e}")
        if expected_channels is not None and index < len(expected_channels):
            if layer.channels != expected_channels[index]:
                raise ConfigurationError(
                    f"Feature layer {index} ({path}): expected {expected_channels[index]} channels, found {layer.channels}"
                )
        if not _layer_matches_frame(layer, frame):
            low, high = layer.grid.physical_bounds()
            frame_low, frame_high = frame.grid.physical_bounds()
            raise ConfigurationError(
                f"Feature layer {index} ({path}): covers {low.tolist()}..{high.tolist()} mm, "
                f"expected the source frame {frame_low.tolist()}..{frame_high.tolist()} mm"
            )
        layers.append(layer)
    logging.info(f"Loaded {len(layers)} static feature layer(s) with channels {[l.channels for l in layers]}")
    return StaticFeatureMap(layers, names=[str(p) for p in paths])


class ExternalFeatureSource:
    """Precomputed per-layer feature maps read from disk; usable in Static mode only"""

    name = "External"

    def __init__(
        self,
        fixed_paths: Sequence[str],
        moving_paths: Sequence[str],
        layer_mask: Optional[Sequence[bool]] = None,
        weights: Optional[Sequence[float]] = None,
        channels: Optional[Sequence[int]] = None,
    ):
        if not fixed_paths or len(fixed_paths) != len(moving_paths):
            raise ConfigurationError(
                f"External features need matching fixed/moving layer files, got {len(fixed_paths)} and {len(moving_paths)}"
            )
        count = len(fixed_paths)
        self.fixed_paths = list(fixed_paths)
        self.moving_paths = list(moving_paths)
        self.layer_mask = list(layer_mask) if layer_mask is not None else [True] * count
        weights = list(weights) if weights is not None else [1.0]
        self.weights = [float(weights[min(i, len(weights) - 1)]) for i in range(count)]
        self.channels = list(channels) if channels is not None else None
        if len(self.layer_mask) < count:
            self.layer_mask += [self.layer_mask[-1]] * (count - len(self.layer_mask))
        enabled = self.enabled_layers()
        if not enabled:
            raise ConfigurationError("External features: at least one layer must be enabled")
        if any(w < 0 for w in self.weights) or sum(layer.weight for layer in enabled) <= 0:
            raise ConfigurationError("External features: layer weights must be >= 0 and not all zero")
        self._maps: Optional[Tuple[StaticFeatureMap, StaticFeatureMap]] = None

    def enabled_layers(self) -> List[FeatureLayer]:
        layers = []
        for index, on in enumerate(self.layer_mask[: len(self.fixed_paths)]):
            if on:
                channels = self.channels[index] if self.channels and index < len(self.channels) else 0
                layers.append(FeatureLayer(index, channels, self.weights[index], supports_jacobian=False))
        return layers

    def load(self, fixed_frame: Volume, moving_frame: Volume) -> Tuple[StaticFeatureMap, StaticFeatureMap]:
        """Read the enabled layers once; later calls reuse them"""
        if self._maps is None:
            enabled = self.enabled_layers()
            expected = [layer.channels for layer in enabled] if self.channels else None
            fixed_map = load_static_features([self.fixed_paths[l.layer_id] for l in enabled], fixed_frame, expected)
            moving_map = load_static_features([self.moving_paths[l.layer_id] for l in enabled], moving_frame, expected)
            for index, layer in enumerate(enabled):
                if fixed_map.layers[index].channels != moving_map.layers[index].channels:
                    raise ConfigurationError(
                        f"External layer {layer.layer_id}: fixed has {fixed_map.layers[index].channels} channels, "
                        f"moving has {moving_map.layers[index].channels}"
                    )
            weights = [layer.weight for layer in enabled]
            fixed_map.weights = list(weights)
            moving_map.weights = list(weights)
            self._maps = (fixed_map, moving_map)
        return self._maps


def _tile_starts(size: int, tile: int, step: int) -> List[int]:
    starts = list(range(0, max(size - tile, 0) + 1, step))
    if starts[-1] + tile < size:
        starts.append(size - tile)
    return starts


def _dense_region(extractor: FeatureExtractor, padded: np.ndarray, lower, upper, window) -> np.ndarray:
    """Descriptors for voxels lower..upper (exclusive) from an edge-padded image"""
    block = padded[
        lower[0] : upper[0] + window[0] - 1,
        lower[1] : upper[1] + window[1] - 1,
        lower[2] : upper[2] + window[2] - 1,
    ]
    windows = sliding_window_view(block, window, axis=(0, 1, 2))  # (tx, ty, tz, C, w1, w2, w3)
    region = tuple(int(u - l) for l, u in zip(lower, upper))
    slab = max(1, DENSE_BATCH_VOXELS // (region[1] * region[2]))
    outputs = []
    for start in range(0, region[0], slab):
        chunk = windows[start : start + slab]
        chunk = np.moveaxis(chunk.reshape((-1,) + chunk.shape[3:]), 1, -1)
        outputs.append(extractor.dense_core(chunk))
    return np.concatenate(outputs).reshape(region + (-1,))


def compute_static_features(
    extractor: FeatureExtractor, image: Volume, tile=None, overlap=0
) -> StaticFeatureMap:
    """Dense per-voxel descriptors of a built-in extractor, optionally computed tile by tile"""
    if type(extractor) not in EXTRACTORS.values():
        raise ConfigurationError(f"Dense feature maps need a built-in extractor, got {extractor.name}")
    window = extractor.receptive_field
    if any(w % 2 == 0 for w in window):
        raise ConfigurationError(f"Dense feature maps need odd patch sizes, got {window}")

    if not np.allclose(extractor.patch_resolution, image.spacing):
        image = resample_to_spacing(image, extractor.patch_resolution)
    data = pad_channels(image.data.astype(np.float64), extractor.input_channels, extractor.padding_policy)
    if data.shape[-1] != extractor.input_channels:
        raise ConfigurationError(
            f"{extractor.name} expects {extractor.input_channels} input channel(s), image has {data.shape[-1]}"
        )

    halo = [w // 2 for w in window]
    padded = np.pad(data, [(h, h) for h in halo] + [(0, 0)], mode="edge")
    dims = image.dims

    if tile is None:
        tile_size = tuple(dims)
    else:
        tile_size = tuple(min(t, n) for t, n in zip(as_size3(tile, "tile"), dims))
        for t, w, n in zip(as_size3(tile, "tile"), window, dims):
            if t < w and t < n:
                raise ConfigurationError(f"Tile of {t} voxels is smaller than the receptive field {w}")
    overlap = tuple(int(v) for v in np.broadcast_to(np.asarray(overlap), (3,)))
    if any(o < 0 for o in overlap):
        raise ConfigurationError(f"Tile overlap must be >= 0, got {overlap}")
    steps = [max(t - o, 1) for t, o in zip(tile_size, overlap)]

    output = None
    for x in _tile_starts(dims[0], tile_size[0], steps[0]):
        for y in _tile_starts(dims[1], tile_size[1], steps[1]):
            for z in _tile_starts(dims[2], tile_size[2], steps[2]):
                lower = (x, y, z)
                upper = tuple(min(s + t, n) for s, t, n in zip(lower, tile_size, dims))
                values = _dense_region(extractor, padded, lower, upper, window)
                if output is None:
                    output = np.empty(tuple(dims) + (values.shape[-1],), dtype=np.float64)
                output[lower[0] : upper[0], lower[1] : upper[1], lower[2] : upper[2]] = values

    layers = [image.with_data(output) for _ in extractor.enabled_layers()]
    logging.info(f"Computed dense {extractor.name} features: dims {dims}, {output.shape[-1]} channels")
    return StaticFeatureMap(
        layers,
        names=[f"{extractor.name}:{layer.layer_id}" for layer in extractor.enabled_layers()],
        weights=[layer.weight for layer in extractor.enabled_layers()],
    )


def fit_pca(layer: Volume, q: int, mask: Optional[BinaryMask] = None) -> PcaBasis:
    """Principal directions of the masked voxel population of one feature layer"""
    values = layer.data.reshape(-1, layer.channels).astype(np.float64)
    if mask is not None:
        inside = mask.lookup(layer.grid.points().reshape(-1, 3))
        values = values[inside]
    if q < 1 or q > layer.channels:
        raise ConfigurationError(f"PCA component count must be in [1, {layer.channels}], got {q}")
    if len(values) < q + 1:
        raise ConfigurationError(f"PCA with {q} components needs at least {q + 1} masked voxels, got {len(values)}")

    mean = values.mean(axis=0)
    centered = values - mean
    covariance = centered.T @ centered / max(len(values) - 1, 1)
    eigenvalues, eigenvectors = np.linalg.eigh(covariance)
    order = np.argsort(eigenvalues)[::-1]
    eigenvalues = np.clip(eigenvalues[order], 0.0, None)
    eigenvectors = eigenvectors[:, order]

    top = eigenvalues[0] if len(eigenvalues) else 0.0
    rank = int(np.sum(eigenvalues > 1e-10 * top)) if top > 0 else 0
    effective = max(1, min(q, rank))
    if effective < q:
        logging.warning(f"Feature covariance has rank {rank}; reducing PCA components from {q} to {effective}")

    components = eigenvectors[:, :effective].T
    # Fix the sign of each direction so repeated fits agree
    signs = np.sign(components[np.arange(effective), np.argmax(np.abs(components), axis=1)])
    components = components * np.where(signs == 0, 1.0, signs)[:, np.newaxis]
    return PcaBasis(mean=mean, components=components, explained_variance=eigenvalues[:effective])


def pca_reduce(
    feature_map: StaticFeatureMap,
    q: int,
    mask: Optional[BinaryMask] = None,
    bases: Optional[List[PcaBasis]] = None,
) -> StaticFeatureMap:
    """Project every layer onto its top-q principal directions (fitted here unless bases are given)"""
    reduced, fitted = [], []
    for index, layer in enumerate(feature_map.layers):
        basis = bases[index] if bases is not None else fit_pca(layer, min(q, layer.channels), mask)
        projected = basis.project(layer.data.reshape(-1, layer.channels))
        reduced.append(layer.with_data(projected.reshape(tuple(layer.dims) + (-1,))))
        fitted.append(basis)
    return StaticFeatureMap(reduced, names=list(feature_map.names), weights=list(feature_map.weights), pca_bases=fitted)
