import numpy as np
import pytest

from controllers.ablation_controller import AblationController, parse_grid
from controllers.registration_controller import (
    RegistrationController,
    build_component,
    create_metric,
    level_mask,
    warp_labels,
)
from models.config_model import DEFAULT_SUBSET_FEATURES, RegistrationConfig
from models.errors import ConfigurationError
from models.evaluation_model import tre
from models.similarity_model import ImpactJacobian, ImpactStatic, MeanSquares, NormalizedMutualInformation
from models.transform_model import AffineTransform
from models.volume_model import BinaryMask, ImageGrid, Volume

CENTRE = np.array([[7.5, 7.5, 7.5]])


def small_config(**changes) -> RegistrationConfig:
    settings = dict(metric="MSE", resolutions=1, iterations=[150], samples=[500], final_grid_spacing=[5.0])
    settings.update(changes)
    return RegistrationConfig(**settings)


class TestMetricFactory:
    def test_intensity_metrics(self):
        assert isinstance(create_metric(small_config()), MeanSquares)
        assert isinstance(create_metric(small_config(metric="NMI", histogram_bins=16)), NormalizedMutualInformation)

    def test_impact_modes(self):
        config = RegistrationConfig()
        assert isinstance(create_metric(config), ImpactJacobian)
        assert isinstance(create_metric(config.replace(mode="Static")), ImpactStatic)

    def test_refresh_interval_only_for_static_impact(self):
        jacobian = RegistrationController(RegistrationConfig(update_interval=10))
        assert jacobian.level_settings(0).update_interval == -1
        static = RegistrationController(RegistrationConfig(mode="Static", update_interval=10))
        assert static.level_settings(0).update_interval == 10

    def test_default_subset_does_not_warn(self, caplog):
        with caplog.at_level("WARNING"):
            component = build_component("MIND", RegistrationConfig())
            create_metric(RegistrationConfig())
        assert component.subset == DEFAULT_SUBSET_FEATURES
        assert "SubsetFeatures" not in caplog.text

    def test_explicit_subset_warns_when_clamped(self, caplog):
        with caplog.at_level("WARNING"):
            create_metric(RegistrationConfig(subset_features=32))
        assert "SubsetFeatures=32" in caplog.text


class TestHelpers:
    def test_warp_labels_identity(self):
        labels = np.zeros((6, 6, 6))
        labels[1:4, 2:5, 0:3] = 3
        volume = Volume.from_array(labels)
        np.testing.assert_array_equal(warp_labels(volume, None, volume.grid), labels.astype(np.int64))

    def test_warp_labels_shift(self):
        labels = np.zeros((6, 6, 6))
        labels[3, 3, 3] = 2
        volume = Volume.from_array(labels)
        shift = AffineTransform.from_matrix(np.eye(3), [1.0, 0.0, 0.0])
        warped = warp_labels(volume, shift, volume.grid)
        assert warped[2, 3, 3] == 2
        assert warped.sum() == 2

    def test_level_mask_follows_grid(self):
        data = np.zeros((8, 8, 8), dtype=bool)
        data[:4] = True
        mask = BinaryMask(data, ImageGrid.create((8, 8, 8)))
        coarse = level_mask(mask, ImageGrid.create((4, 4, 4), 2.0))
        assert coarse.grid.dims == (4, 4, 4)
        assert coarse.data[:2].all() and not coarse.data[2:].any()
        assert level_mask(mask, mask.grid) is mask
        assert level_mask(None, mask.grid) is None


class TestRegistration:
    @pytest.mark.slow
    def test_recovers_shift(self, blob, shifted_blob):
        initial = tre(CENTRE, CENTRE + [1.0, 0.0, 0.0])
        result = RegistrationController(small_config()).register(blob, shifted_blob)
        assert result.succeeded
        assert len(result.levels) == 1
        assert result.evaluations == 150
        final = tre(CENTRE, CENTRE + [1.0, 0.0, 0.0], result.transform)
        assert final.summary["max"] < 0.5 * initial.summary["max"]

    def test_failure_returns_last_valid_transform(self, blob, shifted_blob):
        empty = BinaryMask(np.zeros(blob.dims, dtype=bool), blob.grid)
        result = RegistrationController(small_config(iterations=[5])).register(blob, shifted_blob, empty)
        assert not result.succeeded
        assert result.exit_code == 4
        np.testing.assert_array_equal(result.transform.get_parameters(), 0.0)

    def test_same_seed_same_transform(self, blob, shifted_blob):
        config = small_config(iterations=[10], samples=[100], seed=4)
        first = RegistrationController(config).register(blob, shifted_blob)
        second = RegistrationController(config).register(blob, shifted_blob)
        np.testing.assert_array_equal(first.transform.get_parameters(), second.transform.get_parameters())


class TestAblation:
    def test_parse_grid(self):
        assert parse_grid(["metric=MSE,NCC", "SP_A=10"]) == [("metric", ["MSE", "NCC"]), ("SP_A", ["10"])]
        with pytest.raises(ConfigurationError):
            parse_grid(["metric"])
        with pytest.raises(ConfigurationError):
            parse_grid(["metric=MSE", "metric=NCC"])

    def test_cells_cover_product(self):
        controller = AblationController(small_config(), parse_grid(["metric=MSE,NCC", "mode=Jacobian,Static"]), [])
        assert len(controller.cells()) == 4
        config = controller.cell_config({"metric": "NCC", "mode": "Static"}, 9)
        assert (config.metric, config.mode, config.seed) == ("NCC", "Static", 9)

    def test_rows_pool_seeds(self, blob, shifted_blob, tmp_path):
        grid = parse_grid(["metric=MSE,NCC"])
        controller = AblationController(small_config(iterations=[5], samples=[100]), grid, [0, 1])
        rows = controller.run(blob, shifted_blob, CENTRE, CENTRE + [1.0, 0.0, 0.0])
        assert [row["metric"] for row in rows] == ["MSE", "NCC"]
        assert all(row["runs"] == 2 and row["failed"] == 0 for row in rows)
        assert len(controller.runs) == 4
        controller.save(rows, tmp_path)
        assert (tmp_path / "ablation.tsv").is_file()
        assert (tmp_path / "ablation.jsonl").is_file()
