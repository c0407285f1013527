import numpy as np
import pytest

from models.config_model import ParameterMap, RegistrationConfig, parse_override
from models.errors import ConfigurationError


PARAMETER_TEXT = """
// registration settings
(Metric "IMPACT")
(Mode "Static")   // trailing comment
(NumberOfResolutions 2)
(MaximumNumberOfIterations 100 50)
(ModelsPath "MIND")
(LayersMask "1")
(Loss "L1")
(DefaultPixelValue -1000)
"""


class TestParameterMap:
    def test_parse_keeps_values_as_strings(self):
        parameters = ParameterMap.parse(PARAMETER_TEXT)
        assert parameters.keys()[:2] == ["Metric", "Mode"]
        assert parameters.get("MaximumNumberOfIterations") == ["100", "50"]
        assert parameters.get("DefaultPixelValue") == ["-1000"]

    def test_comment_inside_quotes_is_kept(self):
        parameters = ParameterMap.parse('(ModelsPath "a//b.pt")')
        assert parameters.get("ModelsPath") == ["a//b.pt"]

    def test_several_entries_on_one_line(self):
        parameters = ParameterMap.parse("(A 1) (B 2 3)")
        assert parameters.to_dict() == {"A": ["1"], "B": ["2", "3"]}

    def test_malformed_line(self):
        with pytest.raises(ConfigurationError, match=":2:"):
            ParameterMap.parse("(A 1)\nB 2")

    def test_text_round_trip(self):
        parameters = ParameterMap.parse(PARAMETER_TEXT)
        assert ParameterMap.parse(parameters.to_text()) == parameters

    def test_override_syntax(self):
        assert parse_override("Loss=L1 Cosine") == ("Loss", ["L1", "Cosine"])
        with pytest.raises(ConfigurationError):
            parse_override("no-equals-sign")


class TestRegistrationConfig:
    def test_defaults(self):
        config = RegistrationConfig()
        assert config.metric == "IMPACT"
        assert config.mode == "Jacobian"
        assert config.level_iterations(2) == 500
        assert config.sp_A == 20.0
        assert config.sp_alpha == pytest.approx(0.602)

    def test_from_parameter_map(self):
        config = RegistrationConfig.from_parameter_map(ParameterMap.parse(PARAMETER_TEXT))
        assert config.mode == "Static"
        assert config.resolutions == 2
        assert [config.level_iterations(level) for level in range(2)] == [100, 50]
        assert config.level_samples(1) == 2000
        assert config.loss == ["L1"]
        assert config.background == -1000.0

    def test_unknown_keys_are_kept(self, caplog):
        with caplog.at_level("WARNING"):
            config = RegistrationConfig.from_parameter_map(ParameterMap.parse("(Interpolator BSpline)"))
        assert config.unknown == {"Interpolator": ["BSpline"]}
        assert "Interpolator" in caplog.text
        assert config.to_parameter_map().get("Interpolator") == ["BSpline"]

    def test_echo_reproduces_config(self):
        config = RegistrationConfig.from_parameter_map(ParameterMap.parse(PARAMETER_TEXT))
        assert RegistrationConfig.from_parameter_map(config.to_parameter_map()) == config

    def test_unset_subset_stays_unset_in_echo(self):
        config = RegistrationConfig()
        assert config.subset_features is None
        assert "SubsetFeatures" not in config.to_parameter_map().to_text()
        assert RegistrationConfig.from_parameter_map(config.to_parameter_map()).subset_features is None

    def test_overrides_win(self):
        config = RegistrationConfig().with_overrides({"Metric": ["NMI"], "NumberOfHistogramBins": ["16"]})
        assert config.metric == "NMI"
        assert config.histogram_bins == 16

    def test_profile_sets_schedule(self):
        config = RegistrationConfig.from_parameter_map(ParameterMap.parse('(Profile "four-level")'))
        assert config.resolutions == 4
        spacings = config.pyramid_spacings([1.0, 1.0, 1.0])
        assert [s[0] for s in spacings] == [6.0, 3.0, 1.5, 1.0]

    def test_explicit_entries_beat_profile(self):
        parameters = ParameterMap.parse('(Profile "four-level")\n(FinalGridSpacingInPhysicalUnits 10)')
        assert RegistrationConfig.from_parameter_map(parameters).final_grid_spacing == [10.0]

    def test_grid_spacing_doubles_per_coarser_level(self):
        config = RegistrationConfig(resolutions=3, final_grid_spacing=[8.0])
        np.testing.assert_allclose(config.grid_spacing(0), [32.0, 32.0, 32.0])
        np.testing.assert_allclose(config.grid_spacing(2), [8.0, 8.0, 8.0])

    def test_default_pyramid_halves_native_spacing(self):
        spacings = RegistrationConfig(resolutions=3).pyramid_spacings([1.0, 1.0, 2.0])
        np.testing.assert_allclose(spacings[0], [4.0, 4.0, 8.0])
        np.testing.assert_allclose(spacings[2], [1.0, 1.0, 2.0])

    def test_per_axis_pyramid(self):
        config = RegistrationConfig(resolutions=2, pyramid_spacing=[4.0, 4.0, 2.0, 2.0, 2.0, 1.0])
        spacings = config.pyramid_spacings([1.0, 1.0, 1.0])
        np.testing.assert_allclose(spacings[0], [4.0, 4.0, 2.0])
        np.testing.assert_allclose(spacings[1], [2.0, 2.0, 1.0])

    @pytest.mark.parametrize(
        "text",
        [
            '(Mode "Hybrid")',
            '(Metric "SSIM")',
            '(Loss "Huber")',
            "(Dimension 2)",
            "(NumberOfHistogramBins 4)",
            "(NumberOfResolutions 2)\n(MaximumNumberOfIterations 1 2 3)",
            "(NumberOfResolutions 2)\n(ImagePyramidSpacing 4 2 1)",
            "(PatchSize 0)",
            "(SigmoidMin 0.5)",
            "(StaticTileSize 4)\n(StaticTileOverlap 4)",
            '(ModelsPath "External")\n(FeatureMapFixed "f.mha")\n(FeatureMapMoving "m.mha")',
            "(NumberOfSpatialSamples many)",
            "(RandomSeed 1.5)",
        ],
    )
    def test_invalid_settings(self, text):
        with pytest.raises(ConfigurationError):
            RegistrationConfig.from_parameter_map(ParameterMap.parse(text))

    def test_external_models_in_static_mode(self):
        text = '(Mode "Static")\n(ModelsPath "External")\n(FeatureMapFixed "f.mha")\n(FeatureMapMoving "m.mha")'
        config = RegistrationConfig.from_parameter_map(ParameterMap.parse(text))
        assert config.uses_external_features

    def test_unknown_choice_lists_options(self):
        with pytest.raises(ConfigurationError, match="Jacobian"):
            RegistrationConfig(mode="Hybrid")
