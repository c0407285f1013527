import numpy as np
import pytest

from controllers.main_controller import MainController
from models.io_model import read_report, read_transform, read_volume, write_landmarks, write_volume
from models.volume_model import Volume

SMALL_RUN = [
    "--set", "Metric=MSE",
    "--set", "NumberOfResolutions=1",
    "--set", "MaximumNumberOfIterations=10",
    "--set", "NumberOfSpatialSamples=200",
    "--set", "FinalGridSpacingInPhysicalUnits=8",
]


def run(*argv) -> int:
    return MainController().run([str(arg) for arg in argv])


@pytest.fixture(scope="module")
def phantom_dir(tmp_path_factory):
    out_dir = tmp_path_factory.mktemp("phantom")
    code = MainController().run(
        [
            "phantom", "--out-dir", str(out_dir), "--extent", "32", "--spacing", "2",
            "--grid-spacing", "16", "--max-displacement", "3", "--seed", "1",
        ]
    )
    assert code == 0
    return out_dir


class TestPhantomCommand:
    def test_writes_pair(self, phantom_dir):
        for name in ("fixed.mha", "moving.mha", "fixed_mask.mha", "moving_mask.mha", "fixed_labels.mha",
                     "fixed_landmarks.txt", "moving_landmarks.txt", "phantom.txt"):
            assert (phantom_dir / name).is_file(), name
        assert read_volume(phantom_dir / "fixed.mha").dims == (17, 17, 17)
        assert (phantom_dir / "ground_truth" / "transform.txt").is_file()

    def test_ground_truth_recovers_landmarks(self, phantom_dir, tmp_path):
        code = run(
            "evaluate", "--transform", phantom_dir / "ground_truth",
            "--landmarks-fixed", phantom_dir / "fixed_landmarks.txt",
            "--landmarks-moving", phantom_dir / "moving_landmarks.txt",
            "--labels-fixed", phantom_dir / "fixed_labels.mha",
            "--labels-moving", phantom_dir / "moving_labels.mha",
            "--out-dir", tmp_path,
        )
        assert code == 0
        records = read_report(tmp_path / "metrics.jsonl")
        (tre_record,) = [r for r in records if r["type"] == "tre"]
        assert tre_record["max"] < 0.05
        body = [r for r in records if r["type"] == "label" and r["label"] == 1]
        assert body[0]["dice"] > 0.8
        (jacobian,) = [r for r in records if r["type"] == "jacobian"]
        assert jacobian["fraction_nonpositive"] == 0.0


class TestEvaluateCommand:
    def test_identity_on_identical_landmarks(self, tmp_path):
        points = np.random.default_rng(0).uniform(0.0, 20.0, size=(5, 3))
        write_landmarks(points, tmp_path / "points.txt")
        code = run(
            "evaluate", "--landmarks-fixed", tmp_path / "points.txt",
            "--landmarks-moving", tmp_path / "points.txt", "--out-dir", tmp_path,
        )
        assert code == 0
        (record,) = read_report(tmp_path / "metrics.jsonl")
        assert record["max"] == 0.0
        assert record["count"] == 5

    def test_nothing_to_evaluate(self):
        assert run("evaluate") == 2

    def test_unpaired_landmarks(self, tmp_path):
        write_landmarks(np.zeros((1, 3)), tmp_path / "points.txt")
        assert run("evaluate", "--landmarks-fixed", tmp_path / "points.txt") == 2


class TestRegisterCommand:
    def test_missing_moving_image_writes_nothing(self, blob, tmp_path):
        write_volume(blob, tmp_path / "fixed.mha")
        out_dir = tmp_path / "out"
        code = run("register", tmp_path / "fixed.mha", tmp_path / "absent.mha", "--out-dir", out_dir)
        assert code == 3
        assert not out_dir.exists()

    def test_malformed_override(self, blob, tmp_path):
        write_volume(blob, tmp_path / "fixed.mha")
        code = run("register", tmp_path / "fixed.mha", tmp_path / "fixed.mha", "--out-dir", tmp_path / "out",
                   "--set", "NoEqualsSign")
        assert code == 2

    def test_invalid_mode(self, blob, tmp_path):
        write_volume(blob, tmp_path / "fixed.mha")
        code = run("register", tmp_path / "fixed.mha", tmp_path / "fixed.mha", "--out-dir", tmp_path / "out",
                   "--set", "Mode=Hybrid")
        assert code == 2

    def test_compressed_input_rejected(self, blob, tmp_path):
        write_volume(blob, tmp_path / "fixed.mha")
        (tmp_path / "moving.nii.gz").write_bytes(b"")
        code = run("register", tmp_path / "fixed.mha", tmp_path / "moving.nii.gz", "--out-dir", tmp_path / "out")
        assert code == 3

    def test_unknown_subcommand(self):
        with pytest.raises(SystemExit) as caught:
            run("align")
        assert caught.value.code == 2

    @pytest.mark.slow
    def test_seeded_runs_are_reproducible(self, phantom_dir, tmp_path):
        reports = []
        for name in ("first", "second"):
            out_dir = tmp_path / name
            code = run(
                "register", phantom_dir / "fixed.mha", phantom_dir / "moving.mha",
                "--fixed-mask", phantom_dir / "fixed_mask.mha", "--moving-mask", phantom_dir / "moving_mask.mha",
                "--out-dir", out_dir, "--seed", "3", *SMALL_RUN,
            )
            assert code == 0
            reports.append((out_dir / "report.jsonl").read_bytes())
        assert reports[0] == reports[1]

        out_dir = tmp_path / "first"
        for name in ("result.mha", "validity.mha", "displacement.mha", "timings.jsonl"):
            assert (out_dir / name).is_file(), name
        records = read_report(out_dir / "report.jsonl")
        assert [r["type"] for r in records][:2] == ["run", "config"]
        assert len([r for r in records if r["type"] == "iteration"]) == 10
        assert records[-1]["status"] == "ok"
        transform = read_transform(out_dir / "transform")
        assert transform.parameter_count > 0

    @pytest.mark.slow
    def test_impact_registration_runs(self, phantom_dir, tmp_path):
        code = run(
            "register", phantom_dir / "fixed.mha", phantom_dir / "moving.mha",
            "--fixed-mask", phantom_dir / "fixed_mask.mha", "--out-dir", tmp_path,
            "--set", "Metric=IMPACT", "--set", "ModelsPath=MIND", "--set", "PatchSize=5",
            "--set", "VoxelSize=2", "--set", "NumberOfResolutions=1",
            "--set", "MaximumNumberOfIterations=5", "--set", "NumberOfSpatialSamples=100",
        )
        assert code == 0
        warped = read_volume(tmp_path / "result.mha")
        assert warped.dims == (17, 17, 17)


def test_features_command_writes_maps(tmp_path):
    data = np.random.default_rng(0).uniform(size=(12, 12, 12))
    write_volume(Volume.from_array(data), tmp_path / "image.mha")
    code = run("features", tmp_path / "image.mha", "--out-dir", tmp_path / "maps",
               "--set", "PatchSize=5", "--set", "VoxelSize=1")
    assert code == 0
    assert len(list((tmp_path / "maps").glob("features_*.txt"))) == 1
