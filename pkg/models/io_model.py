import json
import logging
import os
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple, Union

import nibabel as nib
import numpy as np
import SimpleITK as sitk
from nibabel.filebasedimages import ImageFileError

from models.config_model import ParameterMap, RegistrationConfig
from models.errors import ConfigurationError, UnsupportedFeatureError, VolumeIOError
from models.feature_model import StaticFeatureMap
from models.transform_model import AffineTransform, BSplineTransform, CompositeTransform, Transform
from models.volume_model import BinaryMask, ImageGrid, Volume

PathLike = Union[str, os.PathLike]

METAIMAGE_TYPES = {
    "MET_FLOAT": np.dtype("float32"),
    "MET_DOUBLE": np.dtype("float64"),
    "MET_SHORT": np.dtype("int16"),
    "MET_UCHAR": np.dtype("uint8"),
}

# Scalar and per-voxel vector pixels of the element types above
SITK_PIXEL_TYPES = {
    sitk.sitkFloat32, sitk.sitkFloat64, sitk.sitkInt16, sitk.sitkUInt8,
    sitk.sitkVectorFloat32, sitk.sitkVectorFloat64, sitk.sitkVectorInt16, sitk.sitkVectorUInt8,
}

VOLUME_SUFFIXES = (".mhd", ".mha", ".nii")


def _suffix(path: PathLike) -> str:
    name = str(path).lower()
    if name.endswith(".nii.gz"):
        return ".nii.gz"
    return Path(name).suffix


def _read_metaimage(path: PathLike) -> Tuple[np.ndarray, ImageGrid, str]:
    """(x, y, z, channels) array, its grid and the dtype name it was stored with"""
    try:
        image = sitk.ReadImage(str(path))
    except RuntimeError as e:
        raise VolumeIOError(f"Cannot read {path}: {e}")
    if image.GetDimension() != 3:
        raise UnsupportedFeatureError(str(path), "NDims", f"only 3D volumes are read, got {image.GetDimension()}")
    if not np.allclose(np.asarray(image.GetDirection()).reshape(3, 3), np.eye(3)):
        raise UnsupportedFeatureError(str(path), "TransformMatrix", "only axis-aligned volumes are read")
    if image.GetPixelID() not in SITK_PIXEL_TYPES:
        raise UnsupportedFeatureError(
            str(path), "ElementType", f"{image.GetPixelIDTypeAsString()}; supported: {sorted(METAIMAGE_TYPES)}"
        )

    array = sitk.GetArrayFromImage(image)  # (z, y, x[, channels])
    if array.ndim == 3:
        array = array[..., np.newaxis]
    array = np.ascontiguousarray(array.transpose(2, 1, 0, 3))
    grid = ImageGrid.create(image.GetSize(), image.GetSpacing(), image.GetOrigin())
    return array, grid, array.dtype.name


def _write_metaimage(array: np.ndarray, grid: ImageGrid, path: PathLike, element_type: str = "MET_FLOAT"):
    path = Path(path)
    if element_type not in METAIMAGE_TYPES:
        raise UnsupportedFeatureError(str(path), "ElementType", f"cannot write {element_type}")
    array = np.asarray(array, dtype=METAIMAGE_TYPES[element_type])
    if array.ndim == 4 and array.shape[-1] == 1:
        array = array[..., 0]
    if array.ndim == 4:
        image = sitk.GetImageFromArray(np.ascontiguousarray(array.transpose(2, 1, 0, 3)), isVector=True)
    else:
        image = sitk.GetImageFromArray(np.ascontiguousarray(array.transpose(2, 1, 0)))
    image.SetSpacing([float(v) for v in grid.spacing])
    image.SetOrigin([float(v) for v in grid.origin])
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        sitk.WriteImage(image, str(path))
    except (OSError, RuntimeError) as e:
        raise VolumeIOError(f"Cannot write {path}: {e}")


def _read_nifti(path: PathLike) -> Tuple[np.ndarray, ImageGrid, str]:
    try:
        image = nib.load(str(path))
    except (OSError, ImageFileError) as e:
        raise VolumeIOError(f"Cannot read {path}: {e}")
    affine = np.asarray(image.affine, dtype=np.float64)
    linear = affine[:3, :3]
    diagonal = np.diag(linear)
    if not np.allclose(linear, np.diag(diagonal)):
        raise UnsupportedFeatureError(str(path), "affine", "oblique or rotated orientation; only axis-aligned grids are read")
    if np.any(diagonal <= 0):
        raise UnsupportedFeatureError(str(path), "affine", f"flipped axes (diagonal {diagonal.tolist()})")
    data = np.asanyarray(image.dataobj)
    if data.ndim not in (3, 4):
        raise UnsupportedFeatureError(str(path), "dim", f"expected 3D or 4D data, got {data.ndim}D")
    return data, ImageGrid.create(data.shape[:3], diagonal, affine[:3, 3]), data.dtype.name


def _write_nifti(array: np.ndarray, grid: ImageGrid, path: PathLike):
    affine = np.eye(4)
    affine[:3, :3] = np.diag(grid.spacing)
    affine[:3, 3] = grid.origin
    data = np.asarray(array)
    if data.ndim == 4 and data.shape[-1] == 1:
        data = data[..., 0]
    image = nib.Nifti1Image(data, affine)
    image.header.set_xyzt_units("mm")
    try:
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        nib.save(image, str(path))
    except OSError as e:
        raise VolumeIOError(f"Cannot write {path}: {e}")


def read_volume(path: PathLike) -> Volume:
    """MetaImage (.mhd/.mha) or uncompressed single-file NIfTI (.nii)"""
    suffix = _suffix(path)
    if suffix not in VOLUME_SUFFIXES:
        if suffix == ".nii.gz":
            raise UnsupportedFeatureError(str(path), "compression", "compressed NIfTI is not read")
        raise UnsupportedFeatureError(str(path), "format", f"extension {suffix or 'missing'}; use {VOLUME_SUFFIXES}")
    if not Path(path).is_file():
        raise VolumeIOError(f"No such file: {path}")
    if suffix == ".nii":
        data, grid, source_dtype = _read_nifti(path)
    else:
        data, grid, source_dtype = _read_metaimage(path)
    if not np.all(np.isfinite(data)):
        logging.warning(f"{path} contains non-finite voxels")
    volume = Volume(data, grid, source_dtype)
    logging.debug(f"Read {path}: {volume}")
    return volume


def write_volume(vol: Volume, path: PathLike, element_type: str = "MET_FLOAT"):
    suffix = _suffix(path)
    if suffix == ".nii":
        data = vol.data if element_type == "MET_FLOAT" else vol.data.astype(METAIMAGE_TYPES[element_type])
        _write_nifti(data, vol.grid, path)
    elif suffix in (".mhd", ".mha"):
        _write_metaimage(vol.data, vol.grid, path, element_type)
    else:
        raise UnsupportedFeatureError(str(path), "format", f"cannot write extension {suffix or 'missing'}")
    logging.debug(f"Wrote {path}")


def read_mask(path: PathLike, reference: Optional[Volume] = None) -> BinaryMask:
    volume = read_volume(path)
    if reference is not None and not volume.grid.matches(reference.grid):
        raise ConfigurationError(f"Mask {path} grid {volume.grid} does not match its image grid {reference.grid}")
    return BinaryMask(volume.scalar() != 0, volume.grid)


def write_mask(mask: BinaryMask, path: PathLike):
    write_volume(mask.to_volume(), path, element_type="MET_UCHAR")


def read_landmarks(path: PathLike) -> np.ndarray:
    """One 'x y z' point in mm per line; '#' starts a comment"""
    try:
        lines = Path(path).read_text(encoding="utf-8").splitlines()
    except OSError as e:
        raise VolumeIOError(f"Cannot read landmarks {path}: {e}")
    points = []
    for number, line in enumerate(lines, start=1):
        content = line.split("#", 1)[0].strip()
        if not content:
            continue
        fields = content.replace(",", " ").split()
        if len(fields) != 3:
            raise ConfigurationError(f"{path}:{number}: expected 3 coordinates, got {len(fields)}")
        try:
            point = [float(v) for v in fields]
        except ValueError:
            raise ConfigurationError(f"{path}:{number}: coordinates must be numeric, got {content!r}")
        if not np.all(np.isfinite(point)):
            raise ConfigurationError(f"{path}:{number}: coordinates must be finite")
        points.append(point)
    return np.asarray(points, dtype=np.float64).reshape(-1, 3)


def write_landmarks(points: np.ndarray, path: PathLike, comment: Optional[str] = None):
    lines = [f"# {comment}"] if comment else []
    lines += [" ".join(repr(float(v)) for v in point) for point in np.asarray(points).reshape(-1, 3)]
    try:
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")
    except OSError as e:
        raise VolumeIOError(f"Cannot write landmarks {path}: {e}")


def read_parameters(path: PathLike) -> ParameterMap:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as e:
        raise VolumeIOError(f"Cannot read parameter file {path}: {e}")
    return ParameterMap.parse(text, source=str(path))


def write_parameters(parameters: ParameterMap, path: PathLike):
    try:
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", encoding="utf-8") as f:
            parameters.write(f)
    except OSError as e:
        raise VolumeIOError(f"Cannot write parameter file {path}: {e}")


def load_config(path: Optional[PathLike] = None, overrides: Optional[Dict[str, List[str]]] = None) -> RegistrationConfig:
    """Parameter file (optional) plus command-line overrides, defaults for the rest"""
    parameters = read_parameters(path) if path else ParameterMap()
    for key, values in (overrides or {}).items():
        parameters.set(key, values)
    return RegistrationConfig.from_parameter_map(parameters)


def write_transform(transform: Transform, directory: PathLike) -> Path:
    """transform.txt plus, for spline transforms, coefficients.mha holding the control grid"""
    directory = Path(directory)
    parameters = ParameterMap(transform.to_dict())
    bspline = getattr(transform, "bspline", transform)
    if isinstance(bspline, BSplineTransform):
        grid = ImageGrid.create(bspline.grid_dims, bspline.grid_spacing, bspline.grid_origin)
        _write_metaimage(bspline.coefficients, grid, directory / "coefficients.mha", "MET_DOUBLE")
        parameters.set("CoefficientFile", ["coefficients.mha"])
    path = directory / "transform.txt"
    write_parameters(parameters, path)
    return path


def read_transform(path: PathLike) -> Transform:
    """Inverse of write_transform; `path` is the transform.txt file or its directory"""
    path = Path(path)
    if path.is_dir():
        path = path / "transform.txt"
    data = read_parameters(path).to_dict()
    kind = data.get("Transform", [""])[0]
    if kind == "AffineTransform":
        return AffineTransform.from_dict(data)
    if kind not in ("BSplineTransform", "CompositeTransform"):
        raise ConfigurationError(f"{path}: unknown Transform {kind!r}")
    coefficient_file = path.parent / data.get("CoefficientFile", ["coefficients.mha"])[0]
    coefficients, _, _ = _read_metaimage(coefficient_file)
    coefficients = coefficients.astype(np.float64)
    if kind == "BSplineTransform":
        return BSplineTransform.from_dict(data, coefficients)
    return CompositeTransform.from_dict(data, coefficients)


def write_static_features(feature_map: StaticFeatureMap, directory: PathLike, prefix: str = "features") -> Path:
    """One volume per layer (channels fastest) and a sidecar header listing them"""
    directory = Path(directory)
    files = []
    for index, layer in enumerate(feature_map.layers):
        name = f"{prefix}_layer{index}.mha"
        write_volume(layer, directory / name)
        files.append(name)
    header = ParameterMap(
        {
            "LayerFiles": files,
            "LayerNames": feature_map.names,
            "LayerChannels": [str(c) for c in feature_map.channels],
            "LayerWeights": [repr(float(w)) for w in feature_map.weights],
        }
    )
    path = directory / f"{prefix}.txt"
    write_parameters(header, path)
    logging.info(f"Wrote {len(files)} feature layer(s) to {directory}")
    return path


def read_static_features(header_path: PathLike) -> StaticFeatureMap:
    header_path = Path(header_path)
    header = read_parameters(header_path)
    files = header.get("LayerFiles")
    if not files:
        raise VolumeIOError(f"{header_path}: feature header lists no LayerFiles")
    channels = [int(c) for c in header.get("LayerChannels", [])]
    layers = []
    for index, name in enumerate(files):
        layer = read_volume(header_path.parent / name)
        if index < len(channels) and layer.channels != channels[index]:
            raise VolumeIOError(
                f"{header_path}: layer {name} has {layer.channels} channels, header says {channels[index]}"
            )
        layers.append(layer)
    return StaticFeatureMap(
        layers,
        names=header.get("LayerNames", []),
        weights=[float(w) for w in header.get("LayerWeights", [])],
    )


def layer_paths(header_or_paths: Sequence[str]) -> List[str]:
    """Expand a sidecar header (.txt) into its layer files; volume paths pass through"""
    paths = []
    for entry in header_or_paths:
        if _suffix(entry) == ".txt":
            base = Path(entry).parent
            paths += [str(base / name) for name in read_parameters(entry).get("LayerFiles", [])]
        else:
            paths.append(entry)
    return paths


class ReportWriter:
    """Line-delimited JSON records with a stable field order"""

    def __init__(self, path: PathLike):
        self.path = Path(path)
        self._records: List[Dict[str, Any]] = []

    def add(self, record_type: str, **fields):
        record = {"type": record_type}
        record.update(fields)
        self._records.append(record)

    @property
    def records(self) -> List[Dict[str, Any]]:
        return list(self._records)

    def flush(self) -> Path:
        try:
            self.path.parent.mkdir(parents=True, exist_ok=True)
            with open(self.path, "w", encoding="utf-8") as f:
                for record in self._records:
                    f.write(json.dumps(record, default=_json_default) + "\n")
        except OSError as e:
            raise VolumeIOError(f"Cannot write report {self.path}: {e}")
        return self.path


def _json_default(value):
    if isinstance(value, np.generic):
        return value.item()
    if isinstance(value, np.ndarray):
        return value.tolist()
    raise TypeError(f"Cannot serialise {type(value).__name__}")


def read_report(path: PathLike) -> List[Dict[str, Any]]:
    try:
        with open(path, "r", encoding="utf-8") as f:
            return [json.loads(line) for line in f if line.strip()]
    except (OSError, json.JSONDecodeError) as e:
        raise VolumeIOError(f"Cannot read report {path}: {e}")
