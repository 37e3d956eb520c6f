"""
Tests for the exit-code contract, error reports, settings and small utilities
"""
import json
import logging

import numpy as np
import pytest

import config
from utils.error_handlers import (
    AcceptanceError,
    AliasingError,
    DivergedError,
    DumpCorruptError,
    InvalidArgumentError,
    MissingTensorError,
    SlashLabError,
    UsageError,
    create_error_report,
    exit_code_for,
    safe_execute,
)
from utils.error_handlers import ConfigurationError as ExperimentConfigurationError
from utils.parallel import fixed_order_mean, fixed_order_sum, ordered_map
from utils.logging_config import ColoredFormatter, JSONFormatter, format_metrics
from utils.validation import validate_output_dir, validate_tensor_name

@pytest.mark.parametrize("error,code", [
    (UsageError("bad flag"), 1),
    (RuntimeError("unexpected"), 1),
    (InvalidArgumentError("odd d"), 2),
    (AliasingError("repeats"), 2),
    (DumpCorruptError("short"), 2),
    (MissingTensorError("no Q"), 2),
    (ExperimentConfigurationError("train.eta1"), 2),
    (config.ConfigurationError("bad environment"), 2),
    (FileNotFoundError("missing"), 2),
    (SlashLabError("generic"), 2),
    (AcceptanceError("missed"), 3),
    (DivergedError("nan"), 4),
])
def test_exit_codes(error, code):
    assert exit_code_for(error) == code

def test_domain_errors_are_value_errors():
    assert isinstance(InvalidArgumentError("x"), ValueError)
    assert not isinstance(DivergedError("x"), ValueError)

def test_error_report_shape():
    report = create_error_report("DumpFormatError", "bad magic", 2, {"offset": 0}, "analyze")
    assert report == {
        "success": False,
        "error": {
            "code": "DumpFormatError",
            "message": "bad magic",
            "exit_code": 2,
            "details": {"offset": 0},
            "command": "analyze",
        },
    }

def test_safe_execute_maps_and_reports(capsys):
    def handler():
        raise DivergedError("loss is nan", details={"step": 7})

    assert safe_execute(handler, command="train") == 4
    report = json.loads(capsys.readouterr().err.strip().splitlines()[-1])
    assert report["error"]["code"] == "DivergedError"
    assert report["error"]["details"] == {"step": 7}

def test_safe_execute_passes_result_through():
    assert safe_execute(lambda a, b=0: a + b, 2, b=1) == 3

class TestSettings:
    """Environment-driven settings"""

    def test_defaults(self, monkeypatch):
        for name in ("SLASHLAB_THREADS", "SLASHLAB_SEED", "SLASHLAB_FLOAT_DIGITS", "LOG_LEVEL"):
            monkeypatch.delenv(name, raising=False)
        settings = config.Settings()
        assert settings.THREADS == 1
        assert settings.FLOAT_DIGITS == 17
        assert settings.LOG_LEVEL == "INFO"
        assert settings.get_config_summary()["tool"] == config.TOOL_NAME

    def test_invalid_digits_rejected(self, monkeypatch):
        monkeypatch.setenv("SLASHLAB_FLOAT_DIGITS", "40")
        with pytest.raises(config.ConfigurationError) as info:
            config.Settings()
        assert info.value.error_code == "SettingsError"
        assert "SLASHLAB_FLOAT_DIGITS" in info.value.details["errors"][0]

    def test_global_settings_validated_lazily(self, monkeypatch):
        monkeypatch.setenv("SLASHLAB_FLOAT_DIGITS", "40")
        with pytest.raises(config.ConfigurationError):
            config.settings.validate()

    def test_unparsable_threads_fall_back(self, monkeypatch):
        monkeypatch.setenv("SLASHLAB_THREADS", "many")
        assert config.Settings().THREADS == 1

    def test_unknown_log_level_falls_back(self, monkeypatch):
        monkeypatch.setenv("LOG_LEVEL", "chatty")
        assert config.Settings().LOG_LEVEL == "INFO"

class TestUtilities:
    """Validation and deterministic reductions"""

    def test_tensor_name_passthrough(self):
        assert validate_tensor_name("layers.3.W_Q") == "layers.3.W_Q"

    def test_output_dir_created(self, tmp_path):
        assert validate_output_dir(tmp_path / "a" / "b").is_dir()

    def test_ordered_map_keeps_order(self):
        assert ordered_map(lambda x: x * x, range(10), threads=4) == [x * x for x in range(10)]

    def test_fixed_order_sum(self):
        arrays = [np.full(2, float(i)) for i in range(5)]
        assert np.array_equal(fixed_order_sum(arrays), np.full(2, 10.0))
        assert np.array_equal(fixed_order_mean(arrays), np.full(2, 2.0))
        with pytest.raises(ValueError):
            fixed_order_sum([])

class TestLogging:
    """Formatters carrying run context"""

    def make_record(self, **extra):
        record = logging.LogRecord("services.training", logging.INFO, __file__, 1, "Operation: snapshot", None, None)
        for key, value in extra.items():
            setattr(record, key, value)
        return record

    def test_format_metrics(self):
        assert format_metrics({"loss": 0.123456789, "passed": True, "steps": 3}) == "loss=0.123457 passed=True steps=3"

    def test_json_formatter_promotes_context(self):
        record = self.make_record(operation="snapshot", stage=2, step=50, metrics={"loss": 0.25})
        entry = json.loads(JSONFormatter().format(record))
        assert entry["stage"] == 2 and entry["step"] == 50
        assert entry["metrics"] == {"loss": 0.25}
        assert "details" not in entry

    def test_console_line_shows_stage_and_metrics(self):
        line = ColoredFormatter(use_color=False).format(self.make_record(stage=1, step=10, metrics={"loss": 0.5}))
        assert "[stage 1 step 10]" in line
        assert line.endswith("| loss=0.5")
