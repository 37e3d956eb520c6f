"""
Tests for the CSV/JSON report writer
"""
import json

import numpy as np
import pytest

from config import TOOL_NAME
from services.report_service import FixedDigitsEncoder, ReportWriter, format_float, to_builtin
from utils.error_handlers import InvalidArgumentError

@pytest.mark.parametrize("value,digits,expected", [
    (0.1, 17, "0.10000000000000001"),
    (2.0, 17, "2.0"),
    (1e-20, 3, "1e-20"),
    (float("nan"), 17, "nan"),
    (float("-inf"), 17, "-inf"),
])
def test_format_float(value, digits, expected):
    assert format_float(value, digits) == expected

def test_encoder_writes_null_for_non_finite():
    text = json.dumps({"a": float("nan"), "b": [1.0, float("inf")]}, cls=FixedDigitsEncoder, digits=17, sort_keys=True)
    assert json.loads(text) == {"a": None, "b": [1.0, None]}

def test_encoder_handles_numpy():
    text = json.dumps({"x": np.array([0.5, 1.5]), "n": np.int64(3), "ok": np.bool_(True)}, cls=FixedDigitsEncoder)
    assert json.loads(text) == {"x": [0.5, 1.5], "n": 3, "ok": True}

def test_encoder_exact_text():
    payload = {"a": [0.1, 2.0], "b": {"c": float("nan")}, "n": np.float64(1 / 3), "v": np.array([np.nan, 0.25])}
    text = json.dumps(payload, cls=FixedDigitsEncoder, digits=17, sort_keys=True)
    assert text == '{"a": [0.10000000000000001, 2.0], "b": {"c": null}, "n": 0.33333333333333331, "v": [null, 0.25]}'

def test_encoder_exact_text_indented():
    text = json.dumps({"x": [0.1]}, cls=FixedDigitsEncoder, digits=17, indent=2)
    assert text == '{\n  "x": [\n    0.10000000000000001\n  ]\n}'

def test_to_builtin_rejects_unknown():
    with pytest.raises(TypeError):
        to_builtin(object())

class TestReportWriter:
    """Artifacts with embedded manifest"""

    def test_csv_layout(self, tmp_path):
        writer = ReportWriter(tmp_path, {"command": "test", "seed": 3})
        rows = [{"lag": 1, "score": 0.5, "detected": True}, {"lag": 2, "score": None, "detected": False}]
        path = writer.write_csv("scores.csv", rows, ["lag", "score", "detected"])
        lines = path.read_text().splitlines()
        assert lines[0].startswith(f"# tool={TOOL_NAME}")
        assert lines[1].startswith("# manifest=")
        assert json.loads(lines[1][len("# manifest="):])["seed"] == 3
        assert lines[2] == "lag,score,detected"
        assert lines[3] == "1,0.5,true"
        assert lines[4] == "2,,false"

    def test_columns_follow_given_order(self, tmp_path):
        writer = ReportWriter(tmp_path, {})
        path = writer.write_csv("cols.csv", [{"b": 2, "a": 1, "extra": 9}], ["a", "b", "c"])
        assert path.read_text().splitlines()[2:] == ["a,b,c", "1,2,"]

    def test_json_carries_manifest(self, tmp_path):
        writer = ReportWriter(tmp_path, {"command": "test"})
        path = writer.write_json("out.json", {"value": 1.0 / 3.0})
        document = json.loads(path.read_text())
        assert document["manifest"]["tool"] == TOOL_NAME
        assert document["manifest"]["command"] == "test"
        assert document["value"] == 1.0 / 3.0

    def test_rewrites_are_byte_identical(self, tmp_path):
        payload = {"b": [0.1, 0.2], "a": {"z": 1, "y": 2.5}}
        first = ReportWriter(tmp_path / "one", {"seed": 1}).write_json("r.json", payload)
        second = ReportWriter(tmp_path / "two", {"seed": 1}).write_json("r.json", dict(reversed(payload.items())))
        assert first.read_bytes() == second.read_bytes()

    def test_write_report_formats(self, tmp_path):
        writer = ReportWriter(tmp_path, {})
        paths = writer.write_report("slash", {"n": 1}, [{"lag": 0}], ["lag"], ["json"])
        assert [p.name for p in paths] == ["slash.json"]
        assert json.loads(paths[0].read_text())["rows"] == [{"lag": 0}]
        assert writer.written == paths

    def test_output_path_must_be_directory(self, tmp_path):
        blocker = tmp_path / "file"
        blocker.write_text("x")
        with pytest.raises(InvalidArgumentError):
            ReportWriter(blocker, {})

    def test_fewer_digits(self, tmp_path):
        writer = ReportWriter(tmp_path, {}, float_digits=3)
        path = writer.write_csv("short.csv", [{"x": 1.0 / 3.0}], ["x"])
        assert path.read_text().splitlines()[-1] == "0.333"
