import logging
import re
import shlex
from dataclasses import dataclass, field, fields
from typing import Any, Callable, Dict, Iterable, List, NamedTuple, Optional, Tuple, Union

import numpy as np
from typing_extensions import Protocol

from models.errors import ConfigurationError
from models.feature_model import EXTRACTORS, MIND_WEIGHTINGS, PADDING_POLICIES
from models.similarity_model import DISTANCES, METRICS

SOFTWARE_NAME = "featurereg"
SOFTWARE_VERSION = "0.1.0"

MODES = ("Jacobian", "Static")

# Clamped to the channel count without a warning when SubsetFeatures is not given
DEFAULT_SUBSET_FEATURES = 32

# strategy -> (gaussian smoothing, downsampling)
PYRAMID_STRATEGIES = {
    "full": (True, True),
    "downsample-only": (False, True),
    "smooth-only": (True, False),
    "none": (False, False),
}

PROFILES = {
    "four-level": {
        "NumberOfResolutions": ["4"],
        "ImagePyramidSpacing": ["6", "3", "1.5", "1"],
        "FinalGridSpacingInPhysicalUnits": ["8"],
    },
}

_ENTRY_PATTERN = re.compile(r'\(\s*([A-Za-z_]\w*)((?:\s*(?:"[^"]*"|[^\s()"]+))*)\s*\)')


class SupportsWrite(Protocol):
    def write(self, __s: str) -> int: ...


def _strip_comment(line: str) -> str:
    """Drop a // comment unless it sits inside a quoted value"""
    quoted = False
    for index, char in enumerate(line):
        if char == '"':
            quoted = not quoted
        elif not quoted and line.startswith("//", index):
            return line[:index]
    return line


def _is_number(token: str) -> bool:
    try:
        float(token)
    except ValueError:
        return False
    return True


class ParameterMap:
    """Ordered (Key value value ...) entries, kept verbatim as strings"""

    def __init__(self, entries: Optional[Dict[str, Iterable[Any]]] = None):
        self._entries: Dict[str, List[str]] = {}
        for key, values in (entries or {}).items():
            self.set(key, values)

    @classmethod
    def parse(cls, text: str, source: str = "<parameters>") -> "ParameterMap":
        parameters = cls()
        for number, raw in enumerate(text.splitlines(), start=1):
            line = _strip_comment(raw).strip()
            if not line:
                continue
            matches = list(_ENTRY_PATTERN.finditer(line))
            leftover = _ENTRY_PATTERN.sub("", line).strip()
            if not matches or leftover:
                raise ConfigurationError(f"{source}:{number}: expected '(Key value ...)', got {raw.strip()!r}")
            for match in matches:
                try:
                    values = shlex.split(match.group(2))
                except ValueError as e:
                    raise ConfigurationError(f"{source}:{number}: {e}")
                if match.group(1) in parameters:
                    logging.warning(f"{source}:{number}: parameter {match.group(1)} repeated; last value wins")
                parameters.set(match.group(1), values)
        return parameters

    def get(self, key: str, default: Optional[List[str]] = None) -> Optional[List[str]]:
        values = self._entries.get(key)
        return list(values) if values is not None else default

    def set(self, key: str, values: Union[Any, Iterable[Any]]):
        if isinstance(values, (str, bytes)) or not isinstance(values, Iterable):
            values = [values]
        self._entries[key] = [str(value) for value in values]

    def remove(self, key: str):
        self._entries.pop(key, None)

    def update(self, other: "ParameterMap"):
        for key, values in other.items():
            self.set(key, values)

    def copy(self) -> "ParameterMap":
        return ParameterMap(self._entries)

    def keys(self) -> List[str]:
        return list(self._entries)

    def items(self) -> List[Tuple[str, List[str]]]:
        return [(key, list(values)) for key, values in self._entries.items()]

    def to_dict(self) -> Dict[str, List[str]]:
        return {key: list(values) for key, values in self._entries.items()}

    def to_text(self) -> str:
        lines = []
        for key, values in self._entries.items():
            tokens = [value if _is_number(value) else f'"{value}"' for value in values]
            lines.append(f"({' '.join([key] + tokens)})")
        return "\n".join(lines) + "\n"

    def write(self, stream: SupportsWrite):
        stream.write(self.to_text())

    def __contains__(self, key: str) -> bool:
        return key in self._entries

    def __len__(self) -> int:
        return len(self._entries)

    def __eq__(self, other) -> bool:
        return isinstance(other, ParameterMap) and self._entries == other._entries

    def __repr__(self):
        return f"ParameterMap({self._entries!r})"


def parse_override(text: str) -> Tuple[str, List[str]]:
    """'Key=value value' from the command line"""
    key, separator, values = text.partition("=")
    key = key.strip()
    if not separator or not re.fullmatch(r"[A-Za-z_]\w*", key):
        raise ConfigurationError(f"Override must look like Key=value, got {text!r}")
    try:
        return key, shlex.split(values)
    except ValueError as e:
        raise ConfigurationError(f"Override {text!r}: {e}")


def _single(key: str, values: List[str]) -> str:
    if len(values) != 1:
        raise ConfigurationError(f"{key} takes a single value, got {values}")
    return values[0]


def parse_int(key: str, token: str) -> int:
    try:
        number = float(token)
    except ValueError:
        raise ConfigurationError(f"{key} must be an integer, got {token!r}")
    if not number.is_integer():
        raise ConfigurationError(f"{key} must be an integer, got {token!r}")
    return int(number)


def parse_float(key: str, token: str) -> float:
    try:
        return float(token)
    except ValueError:
        raise ConfigurationError(f"{key} must be a number, got {token!r}")


def parse_bool(key: str, token: str) -> bool:
    lowered = token.lower()
    if lowered in ("true", "1", "yes", "on"):
        return True
    if lowered in ("false", "0", "no", "off"):
        return False
    raise ConfigurationError(f"{key} must be true or false, got {token!r}")


def _to_mask(key: str, values: List[str]) -> List[bool]:
    """Accepts '1 0 1' as well as the compact '101'"""
    text = "".join(values)
    if not text or set(text) - {"0", "1"}:
        raise ConfigurationError(f"{key} must be a string of 0/1 flags, got {values}")
    return [char == "1" for char in text]


class _Param(NamedTuple):
    key: str
    attribute: str
    parse: Callable[[str, List[str]], Any]
    render: Callable[[Any], List[str]]


def _scalar(convert):
    return lambda key, values: convert(key, _single(key, values))


def _listed(convert):
    return lambda key, values: [convert(key, value) for value in values]


def _render_scalar(value) -> List[str]:
    if isinstance(value, bool):
        return ["true" if value else "false"]
    if isinstance(value, float):
        return [repr(value)]
    return [str(value)]


def _render_list(values) -> List[str]:
    return [token for value in values for token in _render_scalar(value)]


def _render_mask(values) -> List[str]:
    return ["".join("1" if value else "0" for value in values)]


def _optional(parse):
    return lambda key, values: None if values in ([], ["auto"]) else parse(key, values)


_INT = (_scalar(parse_int), _render_scalar)
_FLOAT = (_scalar(parse_float), _render_scalar)
_STR = (lambda key, values: _single(key, values), _render_scalar)
_BOOL = (_scalar(parse_bool), _render_scalar)
_INTS = (_listed(parse_int), _render_list)
_FLOATS = (_listed(parse_float), _render_list)
_STRS = (lambda key, values: list(values), _render_list)
_MASK = (_to_mask, _render_mask)
_OPTIONAL_FLOAT = (_optional(_scalar(parse_float)), _render_scalar)

PARAMETERS = [
    _Param("MaximumNumberOfIterations", "iterations", *_INTS),
    _Param("NumberOfSpatialSamples", "samples", *_INTS),
    _Param("NumberOfResolutions", "resolutions", *_INT),
    _Param("FinalGridSpacingInPhysicalUnits", "final_grid_spacing", *_FLOATS),
    _Param("ImagePyramidSpacing", "pyramid_spacing", *_FLOATS),
    _Param("PyramidStrategy", "pyramid_strategy", *_STR),
    _Param("Metric", "metric", *_STR),
    _Param("Mode", "mode", *_STR),
    _Param("ModelsPath", "models", *_STRS),
    _Param("Dimension", "dimension", *_INT),
    _Param("NumberOfChannels", "channels", *_INT),
    _Param("PatchSize", "patch_size", *_INTS),
    _Param("VoxelSize", "voxel_size", *_FLOATS),
    _Param("LayersMask", "layers_mask", *_MASK),
    _Param("SubsetFeatures", "subset_features", *_INT),
    _Param("LayersWeight", "layers_weight", *_FLOATS),
    _Param("Loss", "loss", *_STRS),
    _Param("FeaturesMapUpdateInterval", "update_interval", *_INT),
    _Param("PCA", "pca", *_INT),
    _Param("GPU", "gpu", *_INT),
    _Param("FeatureMapPaddingPolicy", "padding_policy", *_STR),
    _Param("FeatureMapFixed", "feature_map_fixed", *_STRS),
    _Param("FeatureMapMoving", "feature_map_moving", *_STRS),
    _Param("FeatureMapChannels", "feature_map_channels", *_INTS),
    _Param("StaticTileSize", "tile_size", *_INT),
    _Param("StaticTileOverlap", "tile_overlap", *_INT),
    _Param("MINDRadius", "mind_radius", *_INT),
    _Param("MINDDilation", "mind_dilation", *_INT),
    _Param("MINDPatchWeighting", "mind_weighting", *_STR),
    _Param("NumberOfHistogramBins", "histogram_bins", *_INT),
    _Param("BendingEnergyWeight", "bending_weight", *_FLOAT),
    _Param("AffineInitialization", "affine_initialization", *_BOOL),
    _Param("SP_a", "base_gain", *_OPTIONAL_FLOAT),
    _Param("SP_A", "sp_A", *_FLOAT),
    _Param("SP_alpha", "sp_alpha", *_FLOAT),
    _Param("SigmoidMax", "sigmoid_max", *_FLOAT),
    _Param("SigmoidMin", "sigmoid_min", *_FLOAT),
    _Param("MaximumStepLength", "max_step", *_OPTIONAL_FLOAT),
    _Param("NumberOfGradientMeasurements", "gain_trials", *_INT),
    _Param("MaximumNumberOfSamplingAttempts", "retry_factor", *_INT),
    _Param("SampleJitter", "jitter", *_BOOL),
    _Param("DefaultPixelValue", "background", *_FLOAT),
    _Param("WriteResultImage", "write_result_image", *_BOOL),
    _Param("WriteQualitySnapshots", "write_snapshots", *_BOOL),
    _Param("RandomSeed", "seed", *_INT),
    _Param("Threads", "threads", *_INT),
    _Param("Profile", "profile", *_STR),
]

KNOWN_KEYS = {param.key for param in PARAMETERS}


def _choice(key: str, value: str, choices: Iterable[str]):
    choices = list(choices)
    if value not in choices:
        raise ConfigurationError(f"Unknown {key}: {value}; choose from {{{', '.join(choices)}}}")


def _per_level(key: str, values: List[Any], levels: int) -> List[Any]:
    if len(values) == 1:
        return list(values) * levels
    if len(values) != levels:
        raise ConfigurationError(f"{key} needs 1 or {levels} values (one per resolution), got {len(values)}")
    return list(values)


@dataclass
class RegistrationConfig:
    """Every setting of one registration run"""

    iterations: List[int] = field(default_factory=lambda: [500])
    samples: List[int] = field(default_factory=lambda: [2000])
    resolutions: int = 3
    final_grid_spacing: List[float] = field(default_factory=lambda: [8.0])
    pyramid_spacing: List[float] = field(default_factory=list)
    pyramid_strategy: str = "full"
    metric: str = "IMPACT"
    mode: str = "Jacobian"
    models: List[str] = field(default_factory=lambda: ["MIND"])
    dimension: int = 3
    channels: int = 1
    patch_size: List[int] = field(default_factory=lambda: [5, 5, 5])
    voxel_size: List[float] = field(default_factory=lambda: [1.5, 1.5, 1.5])
    layers_mask: List[bool] = field(default_factory=lambda: [True])
    subset_features: Optional[int] = None
    layers_weight: List[float] = field(default_factory=lambda: [1.0])
    loss: List[str] = field(default_factory=lambda: ["L2"])
    update_interval: int = -1
    pca: int = 0
    gpu: int = -1
    padding_policy: str = "duplicate"
    feature_map_fixed: List[str] = field(default_factory=list)
    feature_map_moving: List[str] = field(default_factory=list)
    feature_map_channels: List[int] = field(default_factory=list)
    tile_size: int = 0
    tile_overlap: int = 0
    mind_radius: int = 1
    mind_dilation: int = 1
    mind_weighting: str = "box"
    histogram_bins: int = 32
    bending_weight: float = 0.0
    affine_initialization: bool = False
    base_gain: Optional[float] = None
    sp_A: float = 20.0
    sp_alpha: float = 0.602
    sigmoid_max: float = 1.0
    sigmoid_min: float = -0.8
    max_step: Optional[float] = None
    gain_trials: int = 10
    retry_factor: int = 50
    jitter: bool = True
    background: float = 0.0
    write_result_image: bool = True
    write_snapshots: bool = False
    seed: int = 0
    threads: int = 1
    profile: str = "default"
    unknown: Dict[str, List[str]] = field(default_factory=dict)

    def __post_init__(self):
        self.validate()

    def validate(self):
        """Raise ConfigurationError for any out-of-range or unknown setting"""
        if self.resolutions < 1:
            raise ConfigurationError(f"NumberOfResolutions must be >= 1, got {self.resolutions}")
        _per_level("MaximumNumberOfIterations", self.iterations, self.resolutions)
        _per_level("NumberOfSpatialSamples", self.samples, self.resolutions)
        if any(i < 0 for i in self.iterations):
            raise ConfigurationError(f"MaximumNumberOfIterations must be >= 0, got {self.iterations}")
        if any(s < 1 for s in self.samples):
            raise ConfigurationError(f"NumberOfSpatialSamples must be >= 1, got {self.samples}")
        if len(self.final_grid_spacing) not in (1, 3) or any(s <= 0 for s in self.final_grid_spacing):
            raise ConfigurationError(
                f"FinalGridSpacingInPhysicalUnits needs 1 or 3 positive values, got {self.final_grid_spacing}"
            )
        if self.pyramid_spacing and len(self.pyramid_spacing) not in (self.resolutions, 3 * self.resolutions):
            raise ConfigurationError(
                f"ImagePyramidSpacing needs {self.resolutions} or {3 * self.resolutions} values, "
                f"got {len(self.pyramid_spacing)}"
            )

        _choice("PyramidStrategy", self.pyramid_strategy, PYRAMID_STRATEGIES)
        _choice("Metric", self.metric, METRICS)
        _choice("Mode", self.mode, MODES)
        for name in self.models:
            _choice("ModelsPath", name, list(EXTRACTORS) + ["External"])
        for loss in self.loss:
            _choice("Loss", loss, DISTANCES)
        _choice("FeatureMapPaddingPolicy", self.padding_policy, PADDING_POLICIES)
        _choice("MINDPatchWeighting", self.mind_weighting, MIND_WEIGHTINGS)
        _choice("Profile", self.profile, ["default"] + list(PROFILES))

        if self.dimension != 3:
            raise ConfigurationError(f"Only 3D registration is supported, got Dimension={self.dimension}")
        if self.channels < 1:
            raise ConfigurationError(f"NumberOfChannels must be >= 1, got {self.channels}")
        if len(self.patch_size) not in (1, 3) or any(p < 1 for p in self.patch_size):
            raise ConfigurationError(f"PatchSize needs 1 or 3 positive values, got {self.patch_size}")
        if len(self.voxel_size) not in (1, 3) or any(v <= 0 for v in self.voxel_size):
            raise ConfigurationError(f"VoxelSize needs 1 or 3 positive values, got {self.voxel_size}")
        if (self.subset_features is not None and self.subset_features < 0) or self.pca < 0:
            raise ConfigurationError("SubsetFeatures and PCA must be >= 0")
        if any(w < 0 for w in self.layers_weight):
            raise ConfigurationError(f"LayersWeight must be >= 0, got {self.layers_weight}")
        if self.tile_size < 0 or self.tile_overlap < 0:
            raise ConfigurationError("StaticTileSize and StaticTileOverlap must be >= 0")
        if self.tile_size and self.tile_overlap >= self.tile_size:
            raise ConfigurationError(f"StaticTileOverlap {self.tile_overlap} must be below StaticTileSize {self.tile_size}")
        if self.mind_radius < 1 or self.mind_dilation < 1:
            raise ConfigurationError("MINDRadius and MINDDilation must be >= 1")
        if self.histogram_bins < 8:
            raise ConfigurationError(f"NumberOfHistogramBins must be >= 8, got {self.histogram_bins}")
        if self.bending_weight < 0:
            raise ConfigurationError(f"BendingEnergyWeight must be >= 0, got {self.bending_weight}")
        if self.base_gain is not None and self.base_gain <= 0:
            raise ConfigurationError(f"SP_a must be positive, got {self.base_gain}")
        if self.sp_A < 1 or not 0 < self.sp_alpha <= 1:
            raise ConfigurationError(f"SP_A must be >= 1 and SP_alpha in (0, 1], got {self.sp_A}, {self.sp_alpha}")
        if not self.sigmoid_min < 0 < self.sigmoid_max:
            raise ConfigurationError(f"Need SigmoidMin < 0 < SigmoidMax, got {self.sigmoid_min}, {self.sigmoid_max}")
        if self.max_step is not None and self.max_step <= 0:
            raise ConfigurationError(f"MaximumStepLength must be positive, got {self.max_step}")
        if self.gain_trials < 1 or self.retry_factor < 1 or self.threads < 1:
            raise ConfigurationError(
                "NumberOfGradientMeasurements, MaximumNumberOfSamplingAttempts and Threads must be >= 1"
            )

        if "External" in self.models:
            if self.mode != "Static":
                raise ConfigurationError("External feature maps are only usable with Mode Static")
            if not self.feature_map_fixed or len(self.feature_map_fixed) != len(self.feature_map_moving):
                raise ConfigurationError("External features need FeatureMapFixed and FeatureMapMoving of equal length")

    @property
    def uses_external_features(self) -> bool:
        return "External" in self.models

    @property
    def pyramid_flags(self) -> Tuple[bool, bool]:
        """(smoothing, downsampling)"""
        return PYRAMID_STRATEGIES[self.pyramid_strategy]

    def level_iterations(self, level: int) -> int:
        return _per_level("MaximumNumberOfIterations", self.iterations, self.resolutions)[level]

    def level_samples(self, level: int) -> int:
        return _per_level("NumberOfSpatialSamples", self.samples, self.resolutions)[level]

    def grid_spacing(self, level: int) -> np.ndarray:
        """Control-point spacing at a level: final spacing doubled per coarser level"""
        final = np.broadcast_to(np.asarray(self.final_grid_spacing, dtype=np.float64), (3,))
        return final * 2.0 ** (self.resolutions - 1 - level)

    def pyramid_spacings(self, native_spacing) -> List[np.ndarray]:
        """Per-level image spacing in mm, coarse to fine"""
        if not self.pyramid_spacing:
            native = np.asarray(native_spacing, dtype=np.float64)
            return [native * 2.0 ** (self.resolutions - 1 - level) for level in range(self.resolutions)]
        values = np.asarray(self.pyramid_spacing, dtype=np.float64)
        if len(values) == self.resolutions:
            return [np.full(3, value) for value in values]
        return [row for row in values.reshape(self.resolutions, 3)]

    @classmethod
    def from_parameter_map(cls, parameters: ParameterMap) -> "RegistrationConfig":
        """Apply defaults, then the selected profile, then explicit entries"""
        merged = ParameterMap()
        profile = parameters.get("Profile", ["default"])
        profile_name = _single("Profile", profile)
        _choice("Profile", profile_name, ["default"] + list(PROFILES))
        for key, values in PROFILES.get(profile_name, {}).items():
            merged.set(key, values)
        merged.update(parameters)

        values: Dict[str, Any] = {}
        unknown: Dict[str, List[str]] = {}
        by_key = {param.key: param for param in PARAMETERS}
        for key, tokens in merged.items():
            param = by_key.get(key)
            if param is None:
                logging.warning(f"Unknown parameter {key} kept but not used")
                unknown[key] = tokens
                continue
            values[param.attribute] = param.parse(key, tokens)

        config = cls(**values, unknown=unknown)
        if config.gpu >= 0:
            logging.warning(f"GPU={config.gpu} requested; this build computes on the CPU only")
        return config

    def to_parameter_map(self) -> ParameterMap:
        """Complete echo of the configuration, unknown entries included"""
        parameters = ParameterMap()
        for param in PARAMETERS:
            value = getattr(self, param.attribute)
            if value is None or value == []:
                continue
            parameters.set(param.key, param.render(value))
        for key, tokens in self.unknown.items():
            parameters.set(key, tokens)
        return parameters

    def with_overrides(self, overrides: Dict[str, List[str]]) -> "RegistrationConfig":
        parameters = self.to_parameter_map()
        for key, tokens in overrides.items():
            parameters.set(key, tokens)
        return RegistrationConfig.from_parameter_map(parameters)

    def replace(self, **changes) -> "RegistrationConfig":
        current = {f.name: getattr(self, f.name) for f in fields(self)}
        current.update(changes)
        return RegistrationConfig(**current)
