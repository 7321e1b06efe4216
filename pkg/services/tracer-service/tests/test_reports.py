"""
Tests for deterministic report files and stored pilot histograms
"""

import hashlib
import json
import os
import sys

import numpy as np
import pytest

sys.path.insert(0, os.path.join(os.path.dirname(__file__), ".."))

from config import VERSION
from errors import ConfigError
from models import OccupationHistogram, PathSample, TracerPath
from services.reports import (
    PILOT_FILE,
    ReportWriter,
    dumps,
    format_value,
    load_pilot,
    render_table,
    save_pilot,
)

TWO_PI = 2.0 * np.pi
RAW_MODEL = {"dimension": 1, "period": ["2pi"], "jumps": {"kind": "atoms", "atoms": [[-1.0, 1.0], [1.0, 1.0]]}}


@pytest.fixture
def writer(tmp_path):
    return ReportWriter(tmp_path / "out", config_hash="abc123", seed=5, command="lln")


@pytest.fixture
def tracer_path():
    driving = PathSample(dt=0.5, states=[[0.0], [3.5], [7.0]], period=(TWO_PI,))
    return TracerPath(
        driving=driving,
        drift=np.array([1.0]),
        x0=np.array([0.0]),
        integral=np.array([[0.0], [0.25], [0.5]]),
        noise=np.zeros((3, 1)),
    )


@pytest.mark.unit
class TestFormatting:
    """Test value and table formatting"""

    @pytest.mark.parametrize(
        "value, expected",
        [(None, ""), (True, "true"), (np.bool_(False), "false"), (3, "3"), (np.int64(4), "4"), (0.1, "0.1"), ("x", "x")],
    )
    def test_format_value(self, value, expected):
        """Test CSV cell rendering"""
        assert format_value(value) == expected

    def test_floats_round_trip(self):
        """Test that float cells keep full precision"""
        value = 0.1 + 0.2
        assert float(format_value(value)) == value

    def test_dumps_is_canonical(self):
        """Test sorted keys and unwrapped numpy values"""
        text = dumps({"b": np.float64(1.5), "a": np.arange(2)})
        assert text.index('"a"') < text.index('"b"')
        assert json.loads(text) == {"a": [0, 1], "b": 1.5}

    def test_render_table(self):
        """Test column alignment with a rule under the header"""
        table = render_table(["n", "value"], [[1, 0.5], [1000, 0.25]])
        lines = table.splitlines()
        assert len(lines) == 4
        assert set(lines[1]) <= {"-", " "}
        assert len({len(line) for line in lines}) == 1


@pytest.mark.unit
class TestReportWriter:
    """Test JSON, CSV, path and manifest files"""

    def test_json_is_deterministic(self, writer):
        """Test that rewriting the same payload gives the same bytes"""
        first = writer.write_json("report", {"value": 1.0}).read_bytes()
        second = writer.write_json("report", {"value": 1.0}).read_bytes()
        assert first == second
        body = json.loads(first)
        assert body["provenance"] == {"version": VERSION, "config_hash": "abc123", "seed": 5, "command": "lln"}

    def test_csv_provenance_header(self, writer):
        """Test leading '#' provenance lines then the column header"""
        path = writer.write_csv("rungs", ["n", "deviation"], [[10, 0.5], [20, 0.25]])
        lines = path.read_text(encoding="utf-8").splitlines()
        assert lines[:4] == [f"# version={VERSION}", "# config_hash=abc123", "# seed=5", "# command=lln"]
        assert lines[4] == "n,deviation"
        assert lines[5] == "10,0.5"

    def test_excluded_format(self, tmp_path):
        """Test that formats outside the selection are skipped"""
        writer = ReportWriter(tmp_path, config_hash="h", seed=1, command="check", formats=("json",))
        assert writer.write_csv("table", ["a"], [[1]]) is None
        assert not (tmp_path / "table.csv").exists()
        assert writer.write_json("table", {}) is not None

    def test_write_path_columns(self, writer, tracer_path):
        """Test the path dump header and torus column"""
        path = writer.write_path(3, tracer_path)
        assert path.name == "path_0003.csv"
        lines = [line for line in path.read_text(encoding="utf-8").splitlines() if not line.startswith("#")]
        assert lines[0] == "t,F_1,Ftorus_1,X_1,I_1"
        last = [float(v) for v in lines[-1].split(",")]
        assert last[0] == pytest.approx(1.0)
        assert last[2] == pytest.approx(7.0 - TWO_PI)
        assert last[3] == pytest.approx(1.5)

    def test_manifest_hashes(self, writer):
        """Test that the manifest lists every file with its digest"""
        written = writer.write_json("report", {"value": 2})
        writer.write_csv("table", ["a"], [[1]])
        manifest = json.loads(writer.write_manifest(n_paths=10).read_text(encoding="utf-8"))
        assert manifest["n_paths"] == 10
        assert [e["file"] for e in manifest["files"]] == ["report.json", "table.csv"]
        expected = hashlib.sha256(written.read_bytes()).hexdigest()
        assert manifest["files"][0]["sha256"] == expected

    def test_unwritable_directory(self, tmp_path):
        """Test that an output path blocked by a file is a configuration error"""
        blocker = tmp_path / "file"
        blocker.write_text("x")
        with pytest.raises(ConfigError):
            ReportWriter(blocker / "out", config_hash="h", seed=1, command="check")


@pytest.mark.unit
class TestPilotStore:
    """Test saving and reloading pilot histograms"""

    def test_round_trip(self, writer):
        """Test that a stored histogram reloads for the same model"""
        histogram = OccupationHistogram(period=(TWO_PI,), bins=4, counts=[1.0, 2.0, 3.0, 4.0], total_time=10.0)
        save_pilot(writer, histogram, RAW_MODEL)
        restored = load_pilot(writer.out_dir, RAW_MODEL)
        np.testing.assert_allclose(restored.mass, [0.1, 0.2, 0.3, 0.4])
        assert restored.total_time == pytest.approx(10.0)

    def test_missing_pilot(self, tmp_path):
        """Test that no stored pilot gives None"""
        assert load_pilot(tmp_path, RAW_MODEL) is None

    def test_other_model_rejected(self, writer):
        """Test that a pilot from another model is refused"""
        histogram = OccupationHistogram(period=(TWO_PI,), bins=2, counts=[1.0, 1.0], total_time=1.0)
        save_pilot(writer, histogram, RAW_MODEL)
        other = {**RAW_MODEL, "diffusion": 1.0}
        with pytest.raises(ConfigError, match="different model"):
            load_pilot(writer.out_dir, other)

    def test_corrupt_pilot(self, tmp_path):
        """Test that an unreadable pilot file is a configuration error"""
        (tmp_path / PILOT_FILE).write_text("{not json", encoding="utf-8")
        with pytest.raises(ConfigError, match="corrupt"):
            load_pilot(tmp_path, RAW_MODEL)
