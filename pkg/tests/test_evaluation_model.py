import numpy as np
import pytest

from models.errors import ConfigurationError
from models.evaluation_model import (
    dice,
    displacement_field,
    hausdorff,
    hd95,
    jacobian_determinant_map,
    summarize,
    tre,
)
from models.transform_model import AffineTransform, BSplineTransform
from models.volume_model import BinaryMask, ImageGrid


@pytest.fixture
def landmarks():
    return np.random.default_rng(0).uniform(0.0, 50.0, size=(12, 3))


class TestTre:
    def test_zero_when_landmarks_coincide(self, landmarks):
        result = tre(landmarks, landmarks, AffineTransform())
        np.testing.assert_array_equal(result.distances, 0.0)
        assert result.summary["max"] == 0.0

    def test_known_offset(self, landmarks):
        result = tre(landmarks, landmarks + [3.0, 4.0, 0.0])
        np.testing.assert_allclose(result.distances, 5.0)
        assert result.summary["mean"] == pytest.approx(5.0)
        assert result.summary["sd"] == pytest.approx(0.0, abs=1e-12)

    def test_transform_is_applied_to_fixed_points(self, landmarks):
        shift = AffineTransform.from_matrix(np.eye(3), [3.0, 4.0, 0.0])
        result = tre(landmarks, landmarks + [3.0, 4.0, 0.0], shift)
        np.testing.assert_allclose(result.distances, 0.0, atol=1e-12)

    def test_size_mismatch(self, landmarks):
        with pytest.raises(ConfigurationError, match="differ in size"):
            tre(landmarks, landmarks[:-1])

    def test_empty_set(self):
        with pytest.raises(ConfigurationError):
            tre(np.zeros((0, 3)), np.zeros((0, 3)))

    def test_summary_statistics(self):
        summary = summarize([1.0, 2.0, 3.0, 4.0, 5.0])
        assert summary["p25"] == 2.0
        assert summary["p50"] == 3.0
        assert summary["p75"] == 4.0
        assert summary["mean"] == 3.0
        assert summary["sd"] == pytest.approx(np.sqrt(2.5))
        assert summary["max"] == 5.0


class TestOverlap:
    def test_dice_of_half_overlapping_boxes(self, box_masks):
        assert dice(*box_masks) == pytest.approx(0.5)

    def test_dice_of_identical_masks(self, box_masks):
        assert dice(box_masks[0], box_masks[0]) == 1.0

    def test_dice_of_empty_masks(self):
        grid = ImageGrid.create((4, 4, 4))
        empty = BinaryMask(np.zeros((4, 4, 4), dtype=bool), grid)
        assert dice(empty, empty) == 1.0

    def test_grid_mismatch(self, box_masks):
        other = BinaryMask(box_masks[0].data, ImageGrid.create((20, 20, 20), 2.0))
        with pytest.raises(ConfigurationError):
            dice(box_masks[0], other)


class TestSurfaceDistance:
    def test_boxes_shifted_by_four_voxels(self, box_masks):
        assert hausdorff(*box_masks) == pytest.approx(4.0)
        assert 0.0 < hd95(*box_masks) <= hausdorff(*box_masks)

    def test_symmetric(self, box_masks):
        a, b = box_masks
        assert hd95(a, b) == pytest.approx(hd95(b, a))

    def test_identical_masks(self, box_masks):
        assert hd95(box_masks[0], box_masks[0]) == 0.0

    def test_respects_spacing(self, box_masks):
        grid = ImageGrid.create((20, 20, 20), 2.0)
        a, b = (BinaryMask(mask.data, grid) for mask in box_masks)
        assert hausdorff(a, b) == pytest.approx(8.0)

    def test_empty_mask(self, box_masks):
        empty = BinaryMask(np.zeros((20, 20, 20), dtype=bool), box_masks[0].grid)
        with pytest.raises(ConfigurationError):
            hd95(box_masks[0], empty)


class TestFieldMaps:
    def test_identity_has_unit_jacobian(self):
        grid = ImageGrid.create((8, 8, 8), 2.0)
        transform = BSplineTransform.for_domain((0.0, 0.0, 0.0), (14.0, 14.0, 14.0), 5.0)
        determinant, summary = jacobian_determinant_map(transform, grid)
        np.testing.assert_allclose(determinant.data, 1.0)
        assert summary["fraction_nonpositive"] == 0.0

    def test_scaling_jacobian(self):
        grid = ImageGrid.create((4, 4, 4))
        scaling = AffineTransform.from_matrix(np.diag([2.0, 1.0, 0.5]), [0.0, 0.0, 0.0])
        _, summary = jacobian_determinant_map(scaling, grid)
        assert summary["mean"] == pytest.approx(1.0)

    def test_detects_folding(self):
        grid = ImageGrid.create((4, 4, 4))
        mirror = AffineTransform.from_matrix(np.diag([-1.0, 1.0, 1.0]), [0.0, 0.0, 0.0])
        _, summary = jacobian_determinant_map(mirror, grid)
        assert summary["fraction_nonpositive"] == 1.0

    def test_displacement_of_translation(self):
        grid = ImageGrid.create((5, 6, 7))
        field = displacement_field(AffineTransform.from_matrix(np.eye(3), [1.0, 2.0, 3.0]), grid)
        assert field.channels == 3
        np.testing.assert_allclose(field.data, np.broadcast_to([1.0, 2.0, 3.0], (5, 6, 7, 3)), atol=1e-6)
