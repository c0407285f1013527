import numpy as np
import pytest

from models.errors import ConfigurationError, NumericalError, OutOfDomainError
from models.volume_model import (
    BinaryMask,
    ImageGrid,
    Volume,
    build_pyramid,
    coefficients_for,
    cubic_weights,
    prefilter_cubic,
    resample_patch,
    resample_to_spacing,
    sample_gradient,
    sample_value,
    warp_volume,
)


class TestImageGrid:
    def test_world_index_round_trip(self):
        grid = ImageGrid.create((10, 12, 14), (0.5, 1.0, 2.0), (-3.0, 1.0, 5.0))
        index = np.array([[0, 0, 0], [9, 11, 13], [2.5, 3.25, 7.0]])
        np.testing.assert_allclose(grid.world_to_index(grid.index_to_world(index)), index)

    def test_physical_bounds_are_voxel_centres(self):
        grid = ImageGrid.create((10, 10, 10), 2.0, 1.0)
        lower, upper = grid.physical_bounds()
        np.testing.assert_allclose(lower, [1.0, 1.0, 1.0])
        np.testing.assert_allclose(upper, [19.0, 19.0, 19.0])
        assert grid.contains(np.array([19.0, 1.0, 10.0]))
        assert not grid.contains(np.array([19.5, 1.0, 10.0]))

    def test_points_shape(self):
        grid = ImageGrid.create((3, 4, 5))
        assert grid.points().shape == (3, 4, 5, 3)

    def test_rejects_nonpositive_spacing(self):
        with pytest.raises(ConfigurationError):
            ImageGrid.create((4, 4, 4), (1.0, 0.0, 1.0))


class TestVolume:
    def test_data_is_read_only_float32(self, blob):
        assert blob.data.dtype == np.float32
        assert blob.channels == 1
        with pytest.raises(ValueError):
            blob.data[0, 0, 0, 0] = 1.0

    def test_shape_mismatch(self):
        with pytest.raises(ConfigurationError):
            Volume(np.zeros((4, 4, 4)), ImageGrid.create((4, 4, 5)))


class TestSplineSampling:
    def test_interpolates_voxel_values(self, texture):
        reconstructed = prefilter_cubic(texture).reconstruct()
        np.testing.assert_allclose(reconstructed, texture.data, atol=1e-5)

    def test_weights_form_partition_of_unity(self):
        t = np.linspace(0.0, 0.999, 17)
        np.testing.assert_allclose(cubic_weights(t).sum(axis=1), 1.0)
        np.testing.assert_allclose(cubic_weights(t, derivative=1).sum(axis=1), 0.0, atol=1e-12)

    def test_gradient_matches_finite_differences(self, texture):
        coeffs = coefficients_for(texture)
        rng = np.random.default_rng(3)
        points = rng.uniform(4.0, 13.0, size=(20, 3))
        analytic, _ = sample_gradient(coeffs, points)
        step = 1e-4
        numeric = np.empty((20, 3))
        for axis in range(3):
            offset = np.zeros(3)
            offset[axis] = step
            high, _ = sample_value(coeffs, points + offset)
            low, _ = sample_value(coeffs, points - offset)
            numeric[:, axis] = (high[:, 0] - low[:, 0]) / (2 * step)
        np.testing.assert_allclose(analytic[:, 0, :], numeric, atol=1e-6)

    def test_gradient_is_in_value_per_mm(self):
        data = np.tile(np.arange(40, dtype=np.float64)[:, None, None], (1, 6, 6))
        ramp = Volume.from_array(data, spacing=2.0)
        gradient, _ = sample_gradient(coefficients_for(ramp), np.array([[39.0, 5.0, 5.0]]))
        np.testing.assert_allclose(gradient[0, 0], [0.5, 0.0, 0.0], atol=1e-6)

    def test_inside_flag_and_strict_mode(self, blob):
        coeffs = coefficients_for(blob)
        _, inside = sample_value(coeffs, np.array([[0.0, 0.0, 0.0], [-1.0, 5.0, 5.0]]))
        assert inside.tolist() == [True, False]
        with pytest.raises(OutOfDomainError):
            sample_value(coeffs, np.array([[-1.0, 5.0, 5.0]]), strict=True)

    def test_non_finite_volume_rejected(self):
        data = np.zeros((6, 6, 6))
        data[2, 2, 2] = np.nan
        with pytest.raises(NumericalError, match="non-finite"):
            prefilter_cubic(Volume.from_array(data))


class TestPyramid:
    def test_dims_follow_schedule(self, blob):
        levels = build_pyramid(blob, [4.0, 2.0, 1.0])
        assert [level.dims for level in levels] == [(4, 4, 4), (8, 8, 8), (16, 16, 16)]
        np.testing.assert_allclose(levels[0].spacing, [4.0, 4.0, 4.0])
        np.testing.assert_allclose(levels[-1].data, blob.data)

    def test_smooth_only_keeps_grid(self, texture):
        levels = build_pyramid(texture, [4.0, 1.0], smoothing=True, downsampling=False)
        assert levels[0].dims == texture.dims
        assert levels[0].data.std() < texture.data.std()

    def test_none_strategy_is_identity(self, texture):
        levels = build_pyramid(texture, [2.0, 1.0], smoothing=False, downsampling=False)
        for level in levels:
            np.testing.assert_array_equal(level.data, texture.data)

    @pytest.mark.parametrize("schedule", [[1.0, 2.0], [2.0, 2.0], []])
    def test_schedule_must_strictly_decrease(self, blob, schedule):
        with pytest.raises(ConfigurationError):
            build_pyramid(blob, schedule)

    def test_resample_to_spacing_keeps_extent(self, blob):
        coarse = resample_to_spacing(blob, 3.0)
        assert coarse.dims == (6, 6, 6)
        np.testing.assert_allclose(coarse.origin, blob.origin)


class TestPatches:
    def test_patch_at_voxel_centre_matches_data(self, texture):
        patch = resample_patch(coefficients_for(texture), np.array([8.0, 8.0, 8.0]), 3, 1.0)
        np.testing.assert_allclose(patch[..., 0], texture.scalar()[7:10, 7:10, 7:10], atol=1e-5)

    def test_patch_leaving_volume_raises(self, texture):
        with pytest.raises(OutOfDomainError):
            resample_patch(coefficients_for(texture), np.array([0.5, 8.0, 8.0]), 5, 1.0)


class TestMaskAndWarp:
    def test_lookup_is_nearest_voxel(self):
        data = np.zeros((5, 5, 5), dtype=bool)
        data[2, 2, 2] = True
        mask = BinaryMask(data, ImageGrid.create((5, 5, 5)))
        points = np.array([[2.4, 1.6, 2.0], [2.6, 2.0, 2.0], [-3.0, 2.0, 2.0]])
        assert mask.lookup(points).tolist() == [True, False, False]

    def test_identity_warp_reproduces_image(self, texture):
        grid = texture.grid
        warped, valid = warp_volume(coefficients_for(texture), grid.points().reshape(-1, 3), grid)
        np.testing.assert_allclose(warped.data, texture.data, atol=1e-5)
        assert valid.count() == grid.voxel_count

    def test_warp_outside_gets_background(self, texture):
        grid = texture.grid
        mapped = grid.points().reshape(-1, 3) + np.array([100.0, 0.0, 0.0])
        warped, valid = warp_volume(coefficients_for(texture), mapped, grid, background=-7.0)
        assert valid.is_empty()
        np.testing.assert_array_equal(warped.data, -7.0)
