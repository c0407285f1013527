import numpy as np
import pytest

from models.errors import ConfigurationError
from models.transform_model import AffineTransform, BSplineTransform, CompositeTransform, bspline_for_affine_domain


@pytest.fixture
def bspline():
    transform = BSplineTransform.for_domain((0.0, 0.0, 0.0), (15.0, 15.0, 15.0), 5.0)
    rng = np.random.default_rng(7)
    transform.coefficients = rng.normal(0.0, 0.4, transform.coefficients.shape)
    return transform


@pytest.fixture
def points():
    return np.random.default_rng(11).uniform(0.0, 15.0, size=(50, 3))


class TestBSplineTransform:
    def test_identity_at_zero_coefficients(self, points):
        transform = BSplineTransform.for_domain((0.0, 0.0, 0.0), (15.0, 15.0, 15.0), 5.0)
        np.testing.assert_array_equal(transform.apply(points), points)
        np.testing.assert_allclose(transform.spatial_jacobian(points), np.broadcast_to(np.eye(3), (50, 3, 3)))

    def test_grid_layout(self):
        transform = BSplineTransform.for_domain((0.0, 0.0, 0.0), (15.0, 15.0, 12.0), 5.0)
        assert transform.grid_dims == (8, 8, 8)
        np.testing.assert_allclose(transform.grid_origin, [-10.0, -10.0, -10.0])

    def test_two_control_points_beyond_each_side(self):
        lower, upper, spacing = np.zeros(3), np.array([15.0, 13.0, 7.5]), np.array([5.0, 4.0, 3.0])
        transform = BSplineTransform.for_domain(lower, upper, spacing)
        dims = np.asarray(transform.grid_dims)
        last = transform.grid_origin + (dims - 1) * spacing
        assert np.all(transform.grid_origin <= lower - 2 * spacing + 1e-9)
        assert np.all(last >= upper + 2 * spacing - 1e-9)
        corners = np.array([[x, y, z] for x in (0.0, 15.0) for y in (0.0, 13.0) for z in (0.0, 7.5)])
        first_tap = np.floor((corners - transform.grid_origin) / spacing).astype(int) - 1
        assert np.all(first_tap >= 1)
        assert np.all(first_tap + 3 <= dims - 1)

    def test_constant_coefficients_translate(self, points):
        transform = BSplineTransform.for_domain((0.0, 0.0, 0.0), (15.0, 15.0, 15.0), 5.0)
        transform.coefficients[...] = [1.5, -2.0, 0.25]
        np.testing.assert_allclose(transform.apply(points) - points, np.tile([1.5, -2.0, 0.25], (50, 1)))
        value, gradient = transform.bending_energy(points)
        assert value == pytest.approx(0.0, abs=1e-20)
        np.testing.assert_allclose(gradient, 0.0, atol=1e-12)

    def test_parameter_jacobian_matches_finite_differences(self, bspline, points):
        cotangent = np.random.default_rng(1).normal(size=(50, 3))
        analytic = bspline.vjp(points, cotangent)
        parameters = bspline.get_parameters()
        step = 1e-6
        for index in np.argsort(-np.abs(analytic))[:10]:
            shifted = parameters.copy()
            shifted[index] += step
            bspline.set_parameters(shifted)
            high = np.sum(bspline.apply(points) * cotangent)
            shifted[index] -= 2 * step
            bspline.set_parameters(shifted)
            low = np.sum(bspline.apply(points) * cotangent)
            assert analytic[index] == pytest.approx((high - low) / (2 * step), rel=1e-5, abs=1e-8)
        bspline.set_parameters(parameters)

    def test_spatial_jacobian_matches_finite_differences(self, bspline, points):
        analytic = bspline.spatial_jacobian(points[:5])
        step = 1e-5
        for axis in range(3):
            offset = np.zeros(3)
            offset[axis] = step
            column = (bspline.apply(points[:5] + offset) - bspline.apply(points[:5] - offset)) / (2 * step)
            np.testing.assert_allclose(analytic[:, :, axis], column, atol=1e-7)

    def test_bending_energy_gradient(self, bspline, points):
        _, gradient = bspline.bending_energy(points)
        parameters = bspline.get_parameters()
        step = 1e-6
        for index in np.argsort(-np.abs(gradient))[:5]:
            shifted = parameters.copy()
            shifted[index] += step
            bspline.set_parameters(shifted)
            high, _ = bspline.bending_energy(points)
            shifted[index] -= 2 * step
            bspline.set_parameters(shifted)
            low, _ = bspline.bending_energy(points)
            assert gradient[index] == pytest.approx((high - low) / (2 * step), rel=1e-4)
        bspline.set_parameters(parameters)

    def test_refine_grid_preserves_deformation(self, bspline, points):
        refined = bspline.refine_grid()
        np.testing.assert_allclose(refined.grid_spacing, [2.5, 2.5, 2.5])
        np.testing.assert_allclose(refined.apply(points), bspline.apply(points), atol=1e-10)

    def test_displacement_of_step_is_linear(self, bspline, points):
        step = np.random.default_rng(2).normal(size=bspline.parameter_count)
        before = bspline.apply(points)
        expected = bspline.displacement_of_step(points, step)
        bspline.set_parameters(bspline.get_parameters() + step)
        np.testing.assert_allclose(bspline.apply(points) - before, expected, atol=1e-12)

    def test_serialisation_keeps_layout(self, bspline):
        restored = BSplineTransform.from_dict(bspline.to_dict(), bspline.coefficients)
        assert restored.grid_dims == bspline.grid_dims
        np.testing.assert_allclose(restored.grid_origin, bspline.grid_origin)
        np.testing.assert_allclose(restored.domain_upper, bspline.domain_upper)

    def test_small_grid_rejected(self):
        with pytest.raises(ConfigurationError):
            BSplineTransform((0, 0, 0), 1.0, (3, 4, 4))

    def test_wrong_parameter_count(self, bspline):
        with pytest.raises(ConfigurationError):
            bspline.set_parameters(np.zeros(5))


class TestAffineTransform:
    def test_starts_as_identity(self, points):
        affine = AffineTransform.for_domain((0.0, 0.0, 0.0), (15.0, 15.0, 15.0))
        np.testing.assert_allclose(affine.apply(points), points)

    def test_from_matrix(self, points):
        matrix = np.array([[1.1, 0.05, 0.0], [0.0, 0.9, 0.1], [0.02, 0.0, 1.0]])
        affine = AffineTransform.from_matrix(matrix, [1.0, 2.0, 3.0], center=[7.5, 7.5, 7.5], scale=10.0)
        expected = (points - 7.5) @ matrix.T + 7.5 + np.array([1.0, 2.0, 3.0])
        np.testing.assert_allclose(affine.apply(points), expected, atol=1e-12)
        np.testing.assert_allclose(affine.matrix, matrix, atol=1e-12)

    def test_vjp_matches_finite_differences(self, points):
        affine = AffineTransform.for_domain((0.0, 0.0, 0.0), (15.0, 15.0, 15.0))
        affine.set_parameters(np.random.default_rng(4).normal(0.0, 0.1, 12))
        cotangent = np.random.default_rng(5).normal(size=(50, 3))
        analytic = affine.vjp(points, cotangent)
        parameters = affine.get_parameters()
        step = 1e-6
        numeric = np.empty(12)
        for index in range(12):
            shifted = parameters.copy()
            shifted[index] += step
            affine.set_parameters(shifted)
            high = np.sum(affine.apply(points) * cotangent)
            shifted[index] -= 2 * step
            affine.set_parameters(shifted)
            low = np.sum(affine.apply(points) * cotangent)
            numeric[index] = (high - low) / (2 * step)
        np.testing.assert_allclose(analytic, numeric, rtol=1e-5, atol=1e-6)

    def test_no_bending_energy(self, points):
        affine = AffineTransform.for_domain((0.0, 0.0, 0.0), (15.0, 15.0, 15.0))
        value, gradient = affine.bending_energy(points)
        assert value == 0.0
        assert gradient.shape == (12,)


class TestCompositeTransform:
    def test_composes_affine_then_spline(self, bspline, points):
        affine = AffineTransform.from_matrix(np.eye(3), [0.5, 0.0, 0.0])
        spline = bspline_for_affine_domain(affine, (0.0, 0.0, 0.0), (15.0, 15.0, 15.0), 5.0)
        np.testing.assert_allclose(spline.domain_lower, [0.5, 0.0, 0.0])
        spline.coefficients = np.random.default_rng(8).normal(0.0, 0.3, spline.coefficients.shape)
        composite = CompositeTransform(affine, spline)
        np.testing.assert_allclose(composite.apply(points), spline.apply(affine.apply(points)))

    def test_optimises_spline_parameters_only(self, bspline):
        affine = AffineTransform.from_matrix(np.eye(3), [0.5, 0.0, 0.0])
        composite = CompositeTransform(affine, bspline)
        assert composite.parameter_count == bspline.parameter_count

    def test_refine_keeps_affine(self, bspline, points):
        affine = AffineTransform.from_matrix(np.eye(3), [0.1, 0.2, 0.3])
        spline = bspline_for_affine_domain(affine, (0.0, 0.0, 0.0), (15.0, 15.0, 15.0), 5.0)
        composite = CompositeTransform(affine, spline)
        refined = composite.refine_grid()
        np.testing.assert_allclose(refined.apply(points), composite.apply(points), atol=1e-10)
