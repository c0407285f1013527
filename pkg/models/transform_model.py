import logging
from abc import ABC, abstractmethod
from typing import Dict, List, Optional, Tuple

import numpy as np

from models.errors import ConfigurationError
from models.volume_model import Vector3, as_vector3, contract_taps, cubic_weights

# Cubic B-spline two-scale relation, taps j = -2..2
SUBDIVISION_MASK = np.array([1.0, 4.0, 6.0, 4.0, 1.0]) / 8.0

# Unique second-derivative pairs (i, j) with their multiplicity in the full i,j sum
HESSIAN_PAIRS = ((0, 0, 1.0), (1, 1, 1.0), (2, 2, 1.0), (0, 1, 2.0), (0, 2, 2.0), (1, 2, 2.0))


class Transform(ABC):
    """Spatial mapping from the fixed frame into the moving frame"""

    @abstractmethod
    def apply(self, points: np.ndarray) -> np.ndarray:
        pass

    @abstractmethod
    def spatial_jacobian(self, points: np.ndarray) -> np.ndarray:
        """dT/dx per point, shape (N, 3, 3)"""
        pass

    @abstractmethod
    def vjp(self, points: np.ndarray, cotangent: np.ndarray) -> np.ndarray:
        """Pull back per-point dC/dT(x) (N, 3) to a gradient over the parameters"""
        pass

    @abstractmethod
    def displacement_of_step(self, points: np.ndarray, step: np.ndarray) -> np.ndarray:
        """Change of T(x) caused by adding `step` to the parameters, shape (N, 3)"""
        pass

    @property
    @abstractmethod
    def parameter_count(self) -> int:
        pass

    @abstractmethod
    def get_parameters(self) -> np.ndarray:
        pass

    @abstractmethod
    def set_parameters(self, parameters: np.ndarray):
        pass

    @abstractmethod
    def copy(self) -> "Transform":
        pass

    @abstractmethod
    def to_dict(self) -> Dict[str, List[str]]:
        pass

    def bending_energy(self, points: np.ndarray) -> Tuple[float, np.ndarray]:
        """Sampled curvature penalty; zero for transforms without curvature"""
        return 0.0, np.zeros(self.parameter_count)

    def displacement(self, points: np.ndarray) -> np.ndarray:
        points = np.asarray(points, dtype=np.float64)
        return self.apply(points) - points


def _format(values) -> List[str]:
    return [repr(float(v)) for v in np.ravel(values)]


class BSplineTransform(Transform):
    """Cubic B-spline free-form deformation: T(x) = x + sum_k B3(u - k) theta_k"""

    def __init__(
        self,
        grid_origin: Vector3,
        grid_spacing: Vector3,
        grid_dims,
        coefficients: Optional[np.ndarray] = None,
        domain_lower: Optional[Vector3] = None,
        domain_upper: Optional[Vector3] = None,
    ):
        self.grid_origin = as_vector3(grid_origin, "grid origin")
        self.grid_spacing = as_vector3(grid_spacing, "grid spacing")
        if np.any(self.grid_spacing <= 0):
            raise ConfigurationError(f"Control-point spacing must be positive, got {self.grid_spacing}")
        self.grid_dims = tuple(int(d) for d in grid_dims)
        if len(self.grid_dims) != 3 or any(d < 4 for d in self.grid_dims):
            raise ConfigurationError(f"Control grid needs at least 4 points per axis, got {self.grid_dims}")

        shape = self.grid_dims + (3,)
        if coefficients is None:
            coefficients = np.zeros(shape)
        coefficients = np.array(coefficients, dtype=np.float64)
        if coefficients.shape != shape:
            raise ConfigurationError(f"Coefficient shape {coefficients.shape} does not match grid {shape}")
        self.coefficients = coefficients

        # Domain the grid was built for; default is the span the grid fully supports
        if domain_lower is None:
            domain_lower = self.grid_origin + self.grid_spacing
        if domain_upper is None:
            domain_upper = self.grid_origin + (np.asarray(self.grid_dims) - 3) * self.grid_spacing
        self.domain_lower = as_vector3(domain_lower, "domain lower")
        self.domain_upper = as_vector3(domain_upper, "domain upper")

    @classmethod
    def for_domain(cls, lower: Vector3, upper: Vector3, spacing: Vector3) -> "BSplineTransform":
        """Identity transform whose control grid supports every point of [lower, upper]"""
        lower = as_vector3(lower, "domain lower")
        upper = as_vector3(upper, "domain upper")
        spacing = as_vector3(spacing, "grid spacing")
        if np.any(upper < lower):
            raise ConfigurationError(f"Empty domain: lower {lower} above upper {upper}")
        # Two control points beyond the domain on each side
        dims = np.ceil((upper - lower) / spacing - 1e-9).astype(int) + 5
        return cls(lower - 2.0 * spacing, spacing, dims, domain_lower=lower, domain_upper=upper)

    @property
    def parameter_count(self) -> int:
        return int(self.coefficients.size)

    @property
    def control_point_count(self) -> int:
        return int(np.prod(self.grid_dims))

    def get_parameters(self) -> np.ndarray:
        return self.coefficients.reshape(-1).copy()

    def set_parameters(self, parameters: np.ndarray):
        parameters = np.asarray(parameters, dtype=np.float64)
        if parameters.size != self.parameter_count:
            raise ConfigurationError(f"Expected {self.parameter_count} parameters, got {parameters.size}")
        self.coefficients = parameters.reshape(self.grid_dims + (3,)).copy()

    def copy(self) -> "BSplineTransform":
        return BSplineTransform(
            self.grid_origin, self.grid_spacing, self.grid_dims, self.coefficients, self.domain_lower, self.domain_upper
        )

    def _support(self, points: np.ndarray):
        """Per-axis tap indices (N,4), validity (N,4) and fractional offsets (N,)"""
        u = (np.asarray(points, dtype=np.float64).reshape(-1, 3) - self.grid_origin) / self.grid_spacing
        floor = np.floor(u)
        t = u - floor
        base = floor.astype(np.int64) - 1
        taps = np.arange(4)
        indices, valid = [], []
        for axis in range(3):
            index = base[:, axis, np.newaxis] + taps
            ok = (index >= 0) & (index < self.grid_dims[axis])
            indices.append(np.clip(index, 0, self.grid_dims[axis] - 1))
            valid.append(ok)
        return indices, valid, t

    def _axis_weights(self, t: np.ndarray, valid: List[np.ndarray], orders: Tuple[int, int, int]) -> List[np.ndarray]:
        weights = []
        for axis in range(3):
            w = cubic_weights(t[:, axis], derivative=orders[axis]) / self.grid_spacing[axis] ** orders[axis]
            weights.append(np.where(valid[axis], w, 0.0))
        return weights

    def _block(self, indices: List[np.ndarray], coefficients: np.ndarray) -> np.ndarray:
        return coefficients[
            indices[0][:, :, np.newaxis, np.newaxis],
            indices[1][:, np.newaxis, :, np.newaxis],
            indices[2][:, np.newaxis, np.newaxis, :],
        ]

    def _field(self, points: np.ndarray, coefficients: np.ndarray, orders=(0, 0, 0)) -> np.ndarray:
        indices, valid, t = self._support(points)
        weights = self._axis_weights(t, valid, orders)
        return contract_taps(self._block(indices, coefficients), *weights)

    def apply(self, points: np.ndarray) -> np.ndarray:
        points = np.asarray(points, dtype=np.float64)
        single = points.ndim == 1
        mapped = points.reshape(-1, 3) + self._field(points, self.coefficients)
        return mapped[0] if single else mapped

    def displacement_of_step(self, points: np.ndarray, step: np.ndarray) -> np.ndarray:
        step = np.asarray(step, dtype=np.float64).reshape(self.grid_dims + (3,))
        return self._field(points, step)

    def param_jacobian(self, points: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        """Sparse dT/dtheta: flat control-point indices (N, 64) and tensor-product weights (N, 64)"""
        indices, valid, t = self._support(points)
        weights = self._axis_weights(t, valid, (0, 0, 0))
        return self._tensor_indices(indices), self._tensor_weights(weights)

    def _tensor_indices(self, indices: List[np.ndarray]) -> np.ndarray:
        flat = np.ravel_multi_index(
            (
                indices[0][:, :, np.newaxis, np.newaxis],
                indices[1][:, np.newaxis, :, np.newaxis],
                indices[2][:, np.newaxis, np.newaxis, :],
            ),
            self.grid_dims,
        )
        return flat.reshape(len(indices[0]), 64)

    @staticmethod
    def _tensor_weights(weights: List[np.ndarray]) -> np.ndarray:
        product = (
            weights[0][:, :, np.newaxis, np.newaxis]
            * weights[1][:, np.newaxis, :, np.newaxis]
            * weights[2][:, np.newaxis, np.newaxis, :]
        )
        return product.reshape(len(weights[0]), 64)

    def _scatter(self, indices: np.ndarray, weights: np.ndarray, cotangent: np.ndarray) -> np.ndarray:
        """Accumulate sum_n weights[n,k] * cotangent[n,d] into the (K, 3) parameter layout"""
        count = self.control_point_count
        gradient = np.zeros((count, 3))
        flat_index = indices.ravel()
        for component in range(3):
            gradient[:, component] = np.bincount(
                flat_index, weights=(weights * cotangent[:, component, np.newaxis]).ravel(), minlength=count
            )
        return gradient.reshape(-1)

    def vjp(self, points: np.ndarray, cotangent: np.ndarray) -> np.ndarray:
        indices, weights = self.param_jacobian(points)
        return self._scatter(indices, weights, np.asarray(cotangent, dtype=np.float64).reshape(-1, 3))

    def spatial_jacobian(self, points: np.ndarray) -> np.ndarray:
        points = np.asarray(points, dtype=np.float64)
        columns = [self._field(points, self.coefficients, orders) for orders in ((1, 0, 0), (0, 1, 0), (0, 0, 1))]
        return np.eye(3) + np.stack(columns, axis=-1)

    def hessian(self, points: np.ndarray) -> np.ndarray:
        """Second derivatives d2T_d/dx_i dx_j, shape (N, 3, 3, 3)"""
        points = np.asarray(points, dtype=np.float64)
        hessian = np.zeros((len(points.reshape(-1, 3)), 3, 3, 3))
        for i, j, _ in HESSIAN_PAIRS:
            orders = [0, 0, 0]
            orders[i] += 1
            orders[j] += 1
            value = self._field(points, self.coefficients, tuple(orders))
            hessian[:, :, i, j] = value
            hessian[:, :, j, i] = value
        return hessian

    def bending_energy(self, points: np.ndarray) -> Tuple[float, np.ndarray]:
        """Mean over points of sum_d sum_ij (d2T_d/dx_i dx_j)^2 and its gradient"""
        points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
        if len(points) == 0:
            raise ConfigurationError("Bending energy needs a nonempty sample set")
        indices, valid, t = self._support(points)
        flat = self._tensor_indices(indices)
        block = self._block(indices, self.coefficients)

        value = 0.0
        gradient = np.zeros(self.parameter_count)
        scale = 2.0 / len(points)
        for i, j, multiplicity in HESSIAN_PAIRS:
            orders = [0, 0, 0]
            orders[i] += 1
            orders[j] += 1
            weights = self._axis_weights(t, valid, tuple(orders))
            second = contract_taps(block, *weights)
            value += multiplicity * float(np.sum(second * second))
            gradient += self._scatter(flat, self._tensor_weights(weights), scale * multiplicity * second)
        return value / len(points), gradient

    def refine_grid(self) -> "BSplineTransform":
        """Same deformation on a control grid of half the spacing"""
        refined = BSplineTransform.for_domain(self.domain_lower, self.domain_upper, self.grid_spacing / 2.0)
        coefficients = self.coefficients
        for axis in range(3):
            coefficients = _subdivide_axis(coefficients, axis)

        # Subdivided index m sits at grid_origin + m * s/2 and is stored at array index m + 2
        offset = np.rint((refined.grid_origin - self.grid_origin) / refined.grid_spacing).astype(int) + 2
        output = np.zeros(refined.grid_dims + (3,))
        source = tuple(slice(offset[a], offset[a] + refined.grid_dims[a]) for a in range(3))
        cropped = coefficients[source]
        output[tuple(slice(0, n) for n in cropped.shape[:3])] = cropped
        refined.coefficients = output
        logging.debug(f"Refined control grid {self.grid_dims} -> {refined.grid_dims}")
        return refined

    def to_dict(self) -> Dict[str, List[str]]:
        return {
            "Transform": ["BSplineTransform"],
            "GridSize": [str(d) for d in self.grid_dims],
            "GridSpacing": _format(self.grid_spacing),
            "GridOrigin": _format(self.grid_origin),
            "DomainLower": _format(self.domain_lower),
            "DomainUpper": _format(self.domain_upper),
        }

    @classmethod
    def from_dict(cls, data: Dict[str, List[str]], coefficients: Optional[np.ndarray] = None) -> "BSplineTransform":
        return cls(
            grid_origin=[float(v) for v in data["GridOrigin"]],
            grid_spacing=[float(v) for v in data["GridSpacing"]],
            grid_dims=[int(v) for v in data["GridSize"]],
            coefficients=coefficients,
            domain_lower=[float(v) for v in data["DomainLower"]],
            domain_upper=[float(v) for v in data["DomainUpper"]],
        )


def _subdivide_axis(coefficients: np.ndarray, axis: int) -> np.ndarray:
    """Fine coefficients d_m = sum_k c_k h_(m-2k) for m = -2 .. 2n, stored at m + 2"""
    moved = np.moveaxis(coefficients, axis, 0)
    count = moved.shape[0]
    output = np.zeros((2 * count + 3,) + moved.shape[1:])
    for tap, weight in enumerate(SUBDIVISION_MASK):
        output[tap : tap + 2 * count - 1 : 2] += weight * moved
    return np.moveaxis(output, 0, axis)


class AffineTransform(Transform):
    """T(x) = (I + P / scale)(x - c) + c + t, twelve parameters in mm"""

    def __init__(self, center: Vector3 = 0.0, scale: float = 1.0, parameters: Optional[np.ndarray] = None):
        self.center = as_vector3(center, "center")
        if not scale > 0:
            raise ConfigurationError(f"Affine parameter scale must be positive, got {scale}")
        self.scale = float(scale)
        self._parameters = np.zeros(12) if parameters is None else np.array(parameters, dtype=np.float64).reshape(12)

    @classmethod
    def for_domain(cls, lower: Vector3, upper: Vector3) -> "AffineTransform":
        """Identity centred on a domain, matrix entries scaled by its radius"""
        lower = as_vector3(lower, "domain lower")
        upper = as_vector3(upper, "domain upper")
        radius = max(0.5 * float(np.linalg.norm(upper - lower)), 1.0)
        return cls(center=0.5 * (lower + upper), scale=radius)

    @classmethod
    def from_matrix(cls, matrix: np.ndarray, translation: Vector3, center: Vector3 = 0.0, scale: float = 1.0):
        matrix = np.asarray(matrix, dtype=np.float64).reshape(3, 3)
        if abs(np.linalg.det(matrix)) < 1e-12:
            raise ConfigurationError("Affine matrix must be invertible")
        parameters = np.concatenate([((matrix - np.eye(3)) * scale).ravel(), as_vector3(translation, "translation")])
        return cls(center, scale, parameters)

    @property
    def matrix(self) -> np.ndarray:
        return np.eye(3) + self._parameters[:9].reshape(3, 3) / self.scale

    @property
    def translation(self) -> np.ndarray:
        return self._parameters[9:].copy()

    @property
    def parameter_count(self) -> int:
        return 12

    def get_parameters(self) -> np.ndarray:
        return self._parameters.copy()

    def set_parameters(self, parameters: np.ndarray):
        parameters = np.asarray(parameters, dtype=np.float64)
        if parameters.size != 12:
            raise ConfigurationError(f"Expected 12 affine parameters, got {parameters.size}")
        self._parameters = parameters.reshape(12).copy()

    def copy(self) -> "AffineTransform":
        return AffineTransform(self.center, self.scale, self._parameters)

    def apply(self, points: np.ndarray) -> np.ndarray:
        points = np.asarray(points, dtype=np.float64)
        return (points - self.center) @ self.matrix.T + self.center + self._parameters[9:]

    def spatial_jacobian(self, points: np.ndarray) -> np.ndarray:
        count = len(np.asarray(points).reshape(-1, 3))
        return np.broadcast_to(self.matrix, (count, 3, 3)).copy()

    def param_jacobian(self, points: np.ndarray) -> np.ndarray:
        """Dense dT/dtheta, shape (N, 3, 12)"""
        relative = (np.asarray(points, dtype=np.float64).reshape(-1, 3) - self.center) / self.scale
        jacobian = np.zeros((len(relative), 3, 12))
        for d in range(3):
            jacobian[:, d, 3 * d : 3 * d + 3] = relative
            jacobian[:, d, 9 + d] = 1.0
        return jacobian

    def vjp(self, points: np.ndarray, cotangent: np.ndarray) -> np.ndarray:
        relative = (np.asarray(points, dtype=np.float64).reshape(-1, 3) - self.center) / self.scale
        cotangent = np.asarray(cotangent, dtype=np.float64).reshape(-1, 3)
        return np.concatenate([(cotangent.T @ relative).ravel(), cotangent.sum(axis=0)])

    def displacement_of_step(self, points: np.ndarray, step: np.ndarray) -> np.ndarray:
        step = np.asarray(step, dtype=np.float64).reshape(12)
        relative = (np.asarray(points, dtype=np.float64).reshape(-1, 3) - self.center) / self.scale
        return relative @ step[:9].reshape(3, 3).T + step[9:]

    def to_dict(self) -> Dict[str, List[str]]:
        return {
            "Transform": ["AffineTransform"],
            "AffineMatrix": _format(self.matrix),
            "AffineTranslation": _format(self.translation),
            "CenterOfRotationPoint": _format(self.center),
            "AffineScale": _format([self.scale]),
        }

    @classmethod
    def from_dict(cls, data: Dict[str, List[str]]) -> "AffineTransform":
        scale = float(data.get("AffineScale", ["1.0"])[0])
        matrix = np.array([float(v) for v in data["AffineMatrix"]]).reshape(3, 3)
        translation = [float(v) for v in data["AffineTranslation"]]
        center = [float(v) for v in data["CenterOfRotationPoint"]]
        return cls.from_matrix(matrix, translation, center, scale)


class CompositeTransform(Transform):
    """T(x) = T_bspline(T_affine(x)); only the B-spline parameters are optimised"""

    def __init__(self, affine: Optional[AffineTransform], bspline: BSplineTransform):
        self.affine = affine
        self.bspline = bspline

    def _pre(self, points: np.ndarray) -> np.ndarray:
        points = np.asarray(points, dtype=np.float64)
        return points if self.affine is None else self.affine.apply(points)

    @property
    def parameter_count(self) -> int:
        return self.bspline.parameter_count

    def get_parameters(self) -> np.ndarray:
        return self.bspline.get_parameters()

    def set_parameters(self, parameters: np.ndarray):
        self.bspline.set_parameters(parameters)

    def copy(self) -> "CompositeTransform":
        return CompositeTransform(None if self.affine is None else self.affine.copy(), self.bspline.copy())

    def apply(self, points: np.ndarray) -> np.ndarray:
        return self.bspline.apply(self._pre(points))

    def param_jacobian(self, points: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        return self.bspline.param_jacobian(self._pre(points))

    def vjp(self, points: np.ndarray, cotangent: np.ndarray) -> np.ndarray:
        return self.bspline.vjp(self._pre(points), cotangent)

    def spatial_jacobian(self, points: np.ndarray) -> np.ndarray:
        outer = self.bspline.spatial_jacobian(self._pre(points))
        if self.affine is None:
            return outer
        return outer @ self.affine.matrix

    def displacement_of_step(self, points: np.ndarray, step: np.ndarray) -> np.ndarray:
        return self.bspline.displacement_of_step(self._pre(points), step)

    def bending_energy(self, points: np.ndarray) -> Tuple[float, np.ndarray]:
        # Curvature measured in the B-spline's own frame
        return self.bspline.bending_energy(self._pre(points))

    def refine_grid(self) -> "CompositeTransform":
        return CompositeTransform(self.affine, self.bspline.refine_grid())

    def to_dict(self) -> Dict[str, List[str]]:
        data = self.bspline.to_dict()
        data["Transform"] = ["CompositeTransform"]
        if self.affine is not None:
            affine = self.affine.to_dict()
            del affine["Transform"]
            data.update(affine)
        return data

    @classmethod
    def from_dict(cls, data: Dict[str, List[str]], coefficients: Optional[np.ndarray] = None) -> "CompositeTransform":
        affine = AffineTransform.from_dict(data) if "AffineMatrix" in data else None
        return cls(affine, BSplineTransform.from_dict(data, coefficients))


def bspline_for_affine_domain(
    affine: Optional[AffineTransform], lower: Vector3, upper: Vector3, spacing: Vector3
) -> BSplineTransform:
    """Control grid covering the bounding box of the (affinely mapped) fixed domain"""
    lower = as_vector3(lower, "domain lower")
    upper = as_vector3(upper, "domain upper")
    if affine is not None:
        corners = np.array(np.meshgrid(*zip(lower, upper))).T.reshape(-1, 3)
        mapped = affine.apply(corners)
        lower, upper = mapped.min(axis=0), mapped.max(axis=0)
    return BSplineTransform.for_domain(lower, upper, spacing)
