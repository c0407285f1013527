import numpy as np
import pytest

from models.config_model import ParameterMap
from models.errors import ConfigurationError
from models.evaluation_model import tre
from models.phantom_model import (
    ModalitySim,
    PhantomSettings,
    apply_known_deformation,
    default_phantom_spec,
    generate_phantom,
    invert_points,
    random_smooth_field,
    simulate_modality,
)
from models.transform_model import BSplineTransform


@pytest.fixture(scope="module")
def phantom():
    return generate_phantom(default_phantom_spec(extent=40.0, spacing=2.0, seed=1))


class TestGeneration:
    def test_grid_and_structures(self, phantom):
        assert phantom.volume.dims == (21, 21, 21)
        assert {"body", "left_lung", "right_lung", "heart", "trunk"} <= set(phantom.labels)
        assert len(phantom.landmarks) == len(phantom.landmark_names) == 13
        assert not phantom.labels["heart"].is_empty()

    def test_same_seed_same_phantom(self, phantom):
        again = generate_phantom(default_phantom_spec(extent=40.0, spacing=2.0, seed=1))
        np.testing.assert_array_equal(again.volume.data, phantom.volume.data)
        np.testing.assert_array_equal(again.landmarks, phantom.landmarks)

    def test_seed_changes_layout(self, phantom):
        other = generate_phantom(default_phantom_spec(extent=40.0, spacing=2.0, seed=2))
        assert not np.array_equal(other.landmarks, phantom.landmarks)

    def test_lungs_darker_than_heart(self, phantom):
        image = phantom.volume.scalar()
        assert image[phantom.labels["left_lung"].data].mean() < image[phantom.labels["heart"].data].mean()


class TestKnownDeformation:
    def test_translation_moves_everything(self, phantom):
        transform = BSplineTransform.for_domain((0.0, 0.0, 0.0), (40.0, 40.0, 40.0), 16.0)
        transform.coefficients[...] = [4.0, 0.0, 0.0]
        deformed = apply_known_deformation(phantom, transform)
        np.testing.assert_allclose(deformed.landmarks - phantom.landmarks, np.tile([4.0, 0.0, 0.0], (13, 1)))
        np.testing.assert_allclose(deformed.volume.data[4:], phantom.volume.data[2:19], atol=1e-4)
        np.testing.assert_array_equal(deformed.labels["heart"].data[4:], phantom.labels["heart"].data[2:19])

    def test_ground_truth_transform_has_no_landmark_error(self, phantom):
        transform = random_smooth_field((0.0, 0.0, 0.0), (40.0, 40.0, 40.0), np.random.default_rng(3), 16.0, 4.0)
        deformed = apply_known_deformation(phantom, transform)
        assert tre(phantom.landmarks, deformed.landmarks, transform).summary["max"] < 0.05

    def test_random_field_is_bounded_and_fold_free(self):
        transform = random_smooth_field((0.0, 0.0, 0.0), (40.0, 40.0, 40.0), np.random.default_rng(0), 16.0, 5.0)
        points = np.random.default_rng(1).uniform(0.0, 40.0, size=(500, 3))
        assert np.max(np.linalg.norm(transform.displacement(points), axis=1)) <= 6.0
        assert np.min(np.linalg.det(transform.spatial_jacobian(points))) > 0.1

    def test_zero_displacement_is_identity(self):
        transform = random_smooth_field((0.0, 0.0, 0.0), (40.0, 40.0, 40.0), np.random.default_rng(0), 16.0, 0.0)
        np.testing.assert_array_equal(transform.coefficients, 0.0)

    def test_inversion_residual(self):
        transform = random_smooth_field((0.0, 0.0, 0.0), (40.0, 40.0, 40.0), np.random.default_rng(5), 16.0, 6.0)
        targets = np.random.default_rng(6).uniform(8.0, 32.0, size=(100, 3))
        sources, residual = invert_points(transform, targets)
        assert residual < 1e-4
        np.testing.assert_allclose(transform.apply(sources), targets, atol=1e-4)


class TestModality:
    def test_gamma_remap(self):
        sim = ModalitySim(gamma=0.5)
        np.testing.assert_allclose(sim.remap(np.array([0.0, 0.0625, 1.0])), [0.0, 0.25, 1.0])

    def test_knot_remap_is_monotone(self):
        sim = ModalitySim(knots=[(0.0, 0.0), (0.5, 0.8), (1.0, 1.0)])
        values = sim.remap(np.linspace(0.0, 1.0, 11))
        assert np.all(np.diff(values) > 0)
        assert values[5] == pytest.approx(0.8)

    @pytest.mark.parametrize(
        "kwargs",
        [
            {"gamma": 0.0},
            {"intensity_range": (1.0, 1.0)},
            {"knots": [(0.0, 0.0), (0.5, 0.9), (1.0, 0.5)]},
            {"noise_sigma": -0.1},
        ],
    )
    def test_invalid_settings(self, kwargs):
        with pytest.raises(ConfigurationError):
            ModalitySim(**kwargs)

    def test_identity_settings_change_nothing(self, phantom):
        result = simulate_modality(phantom.volume, ModalitySim(), np.random.default_rng(0))
        np.testing.assert_array_equal(result.volume.data, phantom.volume.data)
        assert result.valid.count() == phantom.volume.grid.voxel_count

    def test_bias_field_is_bounded(self, phantom):
        result = simulate_modality(phantom.volume, ModalitySim(bias_amplitude=0.3), np.random.default_rng(0))
        assert result.bias.min() >= np.exp(-0.3) - 1e-12
        assert result.bias.max() <= np.exp(0.3) + 1e-12
        assert np.ptp(result.bias) > 0.0

    def test_noise_scales_with_intensity_range(self, phantom):
        sim = ModalitySim(noise_sigma=0.05, intensity_range=(0.0, 2.0))
        result = simulate_modality(phantom.volume, sim, np.random.default_rng(0))
        difference = result.volume.scalar().astype(np.float64) - phantom.volume.scalar()
        assert np.std(difference) == pytest.approx(0.1, rel=0.05)

    def test_truncation_cuts_lateral_borders(self, phantom):
        sim = ModalitySim(truncation_margin=6.0, background=-1.0)
        result = simulate_modality(phantom.volume, sim, np.random.default_rng(0))
        valid = result.valid.data
        assert not valid[:3].any() and not valid[:, -3:].any()
        assert valid[3:18, 3:18, :].all()
        np.testing.assert_array_equal(result.volume.scalar()[:3], -1.0)


class TestPhantomSettings:
    def test_from_parameter_map(self):
        parameters = ParameterMap({"PhantomExtent": [64], "Gamma": [0.5], "RandomSeed": [7]})
        settings = PhantomSettings.from_parameter_map(parameters)
        assert settings.extent == 64.0
        assert settings.seed == 7
        assert settings.modality().gamma == 0.5

    def test_single_value_only(self):
        with pytest.raises(ConfigurationError):
            PhantomSettings.from_parameter_map(ParameterMap({"Gamma": [0.5, 0.6]}))
