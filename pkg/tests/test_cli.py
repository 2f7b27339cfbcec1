import json
from pathlib import Path

import numpy as np
import pytest

from app.cli.main import main
from app.core.config import settings
from app.core.exceptions import ConfigError, InsufficientDepth, QuadratureError, TruncationBelowResolution
from app.models.schemas import ConstructArtifact, Provenance, RunConfig
from app.services.ifs_service import certify_separation
from app.services.pipeline_service import load_config
from app.utils import serialization
from tests.conftest import HEISENBERG_CONFIG

TOY_RUN = """
seed = 7

[depths]
certify = [4, 5, 6]
ad_scan = 4

[quadrature]
theta = 0.0
grid_points = 4
far_samples = 3
near_samples = 3
probes = 3
ad_centers = 8
ad_radii = 5
"""


@pytest.fixture(autouse=True)
def restore_settings():
    saved = (settings.workers, settings.deterministic, settings.triangle_samples)
    yield
    settings.workers, settings.deterministic, settings.triangle_samples = saved


def _write(path, text):
    path.write_text(text, encoding="utf-8")
    return str(path)


def _artifact(tmp_path, system, gap_fraction):
    cert = certify_separation(system, gap_fraction=gap_fraction, raise_on_failure=False)
    artifact = ConstructArtifact(
        provenance=Provenance(config_hash="fixture", seed=system.seed, library_version=settings.app_version),
        system=system.to_record(),
        certificate=cert,
    )
    return str(serialization.write_json(tmp_path / "system.json", artifact))


class TestConfig:
    def test_defaults_without_a_file(self):
        assert load_config(None) == RunConfig()

    def test_missing_file(self, tmp_path):
        with pytest.raises(ConfigError):
            load_config(str(tmp_path / "absent.toml"))

    def test_unknown_key(self, tmp_path):
        path = _write(tmp_path / "run.toml", "[group]\npreset = \"heisenberg-1\"\ncolour = 3\n")
        with pytest.raises(ConfigError, match="group.colour"):
            load_config(path)

    def test_hash_is_stable(self):
        assert serialization.config_hash(RunConfig()) == serialization.config_hash(RunConfig())
        assert serialization.config_hash(RunConfig()) != serialization.config_hash(RunConfig(seed=1))


class TestExitCodes:
    def test_validate(self, tmp_path, capsys):
        path = _write(tmp_path / "run.toml", "[group]\npreset = \"heisenberg-1\"\n")
        assert main(["validate", "--config", path]) == 0
        summary = json.loads(capsys.readouterr().out)
        assert summary["homogeneous_dimension"] == 4
        assert summary["horizontal_dim"] == 2
        assert summary["step"] == 2

    def test_low_homogeneous_dimension(self, tmp_path, capsys):
        path = _write(tmp_path / "run.toml", "[group]\npreset = \"abelian-2\"\n")
        assert main(["validate", "--config", path]) == 3
        assert "Q >= 3 required" in capsys.readouterr().err

    def test_malformed_bracket(self, tmp_path):
        path = _write(tmp_path / "run.toml",
                      "[group]\npreset = \"inline\"\nlayers = [2, 1]\nbrackets = [[1, 2, 3, 1, 0]]\n")
        assert main(["validate", "--config", path]) == 2

    def test_contradicting_bracket(self, tmp_path, capsys):
        path = _write(tmp_path / "run.toml",
                      "[group]\npreset = \"inline\"\nlayers = [2, 1]\n"
                      "brackets = [[1, 2, 3, 1, 1], [2, 1, 3, 1, 1]]\n")
        assert main(["validate", "--config", path]) == 3
        assert "(1,2)" in capsys.readouterr().err

    def test_cone_across_the_sign_change(self, tmp_path):
        settings.triangle_samples = 2000
        path = _write(tmp_path / "run.toml",
                      "[group]\npreset = \"heisenberg-1\"\n[cone]\nradius = 1.5\n"
                      "[construction]\nsphere_samples = 256\n")
        assert main(["construct", "--config", path, "--out", str(tmp_path / "out")]) == 4
        failure = json.loads((tmp_path / "out" / "construct_failure.json").read_text())
        assert failure["code"] == "cone_violation"

    @pytest.mark.slow
    def test_exhausted_retries_leave_a_failure_record(self, tmp_path, capsys):
        text = Path(HEISENBERG_CONFIG).read_text(encoding="utf-8")
        text = text.replace("gap_fraction = 0.05", "gap_fraction = 1.0\nretries = 1")
        path = _write(tmp_path / "run.toml", text)
        out = tmp_path / "out"
        assert main(["construct", "--config", path, "--out", str(out)]) == 4
        failure = json.loads((out / "construct_failure.json").read_text())
        assert failure["code"] == "certification_failure"
        assert len(failure["details"]["attempts"]) == 1
        assert failure["provenance"]["seed"] == 7
        assert not (out / "system.json").exists()
        assert "certification_failure" in capsys.readouterr().err

    def test_missing_config_is_a_usage_error(self, tmp_path):
        assert main(["validate", "--config", str(tmp_path / "absent.toml")]) == 2

    def test_unknown_command(self):
        assert main(["frobnicate"]) == 2

    def test_resolution_errors_are_input_errors(self):
        assert TruncationBelowResolution.exit_code == 2
        assert InsufficientDepth.exit_code == 2
        assert QuadratureError.exit_code == 5

    def test_uncertified_system_is_refused(self, tmp_path, toy_system):
        system_path = _artifact(tmp_path, toy_system, gap_fraction=0.2)
        assert main(["certify", "--system", system_path, "--out", str(tmp_path)]) == 6

    def test_missing_artifact(self, tmp_path):
        assert main(["scan-ad", "--system", str(tmp_path / "none.json"), "--out", str(tmp_path)]) == 2

    def test_invalid_nesting(self, tmp_path, toy_system):
        system_path = _artifact(tmp_path, toy_system, gap_fraction=0.05)
        code = main(["compop", "--system", system_path, "--out", str(tmp_path), "--outer", "1", "--inner", "2"])
        assert code == 4


class TestPipeline:
    def test_certify_is_reproducible(self, tmp_path, toy_system, capsys):
        config = _write(tmp_path / "run.toml", TOY_RUN)
        system_path = _artifact(tmp_path, toy_system, gap_fraction=0.05)
        first, second = tmp_path / "a", tmp_path / "b"
        assert main(["certify", "--config", config, "--system", system_path, "--out", str(first)]) == 0
        unb = json.loads(capsys.readouterr().out)
        assert unb["certified_sign"] == 1
        assert unb["depth"] == 6
        assert main(["certify", "--config", config, "--system", system_path, "--out", str(second),
                     "--workers", "2"]) == 0
        assert (first / "certify.json").read_bytes() == (second / "certify.json").read_bytes()
        assert (first / "ladder.csv").exists()
        assert (first / "ladder.gp").exists()
        report = json.loads((first / "certify.json").read_text())
        assert [row["depth"] for row in report["ladder"]] == [4, 5, 6]
        assert report["scale_invariance_residual"] < 1e-10

    def test_compop_with_equal_words(self, tmp_path, toy_system, capsys):
        config = _write(tmp_path / "run.toml", TOY_RUN)
        system_path = _artifact(tmp_path, toy_system, gap_fraction=0.05)
        code = main(["compop", "--config", config, "--system", system_path, "--out", str(tmp_path),
                     "--outer", "1", "--inner", "1"])
        assert code == 0
        report = json.loads(capsys.readouterr().out)
        assert report["left_max"] == 0.0
        assert (tmp_path / "compop.csv").exists()

    def test_export_writes_a_weighted_cloud(self, tmp_path, toy_system, capsys):
        config = _write(tmp_path / "run.toml", TOY_RUN)
        system_path = _artifact(tmp_path, toy_system, gap_fraction=0.05)
        code = main(["export", "--config", config, "--system", system_path, "--out", str(tmp_path), "--depth", "2"])
        assert code == 0
        result = json.loads(capsys.readouterr().out)
        assert result["atoms"] == 25
        points, weights = serialization.read_cloud(tmp_path / "cloud-depth2.cnlb")
        assert points.shape == (25, 3)
        assert weights.sum() == pytest.approx(1.0)
        assert (tmp_path / "centers.csv").exists()


class TestCloudFormat:
    def test_header_layout(self, tmp_path):
        pts = np.arange(6, dtype=float).reshape(2, 3)
        path = serialization.write_cloud(tmp_path / "c.cnlb", pts)
        data = path.read_bytes()
        assert data[:4] == b"CNLB"
        assert int.from_bytes(data[4:8], "little") == 1
        assert int.from_bytes(data[8:12], "little") == 3
        assert int.from_bytes(data[12:20], "little") == 2
        assert len(data) == 20 + 6 * 8
        read, weights = serialization.read_cloud(path)
        np.testing.assert_array_equal(read, pts)
        assert weights is None

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "bad.cnlb"
        path.write_bytes(b"XXXX" + bytes(16))
        with pytest.raises(ConfigError):
            serialization.read_cloud(path)

    def test_canonical_json_drops_non_finite(self):
        assert serialization.canonical_json({"b": float("inf"), "a": 1}) == '{"a":1,"b":null}'


@pytest.mark.slow
def test_shipped_heisenberg_config_constructs(tmp_path, capsys):
    out = tmp_path / "out"
    assert main(["construct", "--config", HEISENBERG_CONFIG, "--out", str(out)]) == 0
    cert = json.loads(capsys.readouterr().out)
    assert cert["certified"]
    assert json.loads((out / "certificate.json").read_text())["certified"]
    assert (out / "system.json").exists()
    assert not (out / "construct_failure.json").exists()
