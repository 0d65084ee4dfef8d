"""
Tests for command execution, exit-code mapping and the shared utilities
"""

import logging
import threading
import time

import pytest

from config.settings import Settings
from pidcount.errors import (
    CheckpointError,
    ConfigParseError,
    ConfigurationError,
    DatasetLoadError,
    DegenerateInputError,
    NumericalFailure,
    ValidationError,
)
from pidcount.run_config import RunConfig
from pidcount.runner import EXIT_DATA, EXIT_NUMERICAL, EXIT_OK, EXIT_USAGE, exit_code_for, run_command_execution
from pidcount.utils import configure_logging, parallel_map


@pytest.mark.parametrize("error, code", [
    (NumericalFailure(2, 5, float("nan")), EXIT_NUMERICAL),
    (ConfigurationError("bad"), EXIT_USAGE),
    (ConfigParseError("bad", line=3), EXIT_USAGE),
    (DatasetLoadError("missing", orphans=["b", "a"]), EXIT_DATA),
    (ValidationError("empty"), EXIT_DATA),
    (CheckpointError("magic"), EXIT_DATA),
    (DegenerateInputError("flat"), EXIT_DATA),
    (FileNotFoundError("gone"), EXIT_DATA),
    (RuntimeError("boom"), EXIT_USAGE),
])
def test_exit_code_for(error, code):
    assert exit_code_for(error) == code


def test_orphans_are_listed_sorted():
    assert str(DatasetLoadError("unpaired", orphans=["img_9", "img_2"])) == "unpaired: img_2, img_9"


class TestRunCommandExecution:
    def test_success_writes_resolved_config(self, tmp_path):
        calls = []
        out = tmp_path / "run"
        code = run_command_execution(lambda: calls.append(out.is_dir()), out, run_type="eval", config=RunConfig(epochs=2))
        assert code == EXIT_OK and calls == [True]
        assert "epochs = 2" in (out / Settings.RESOLVED_CONFIG_FILENAME).read_text()

    def test_no_output_directory(self):
        assert run_command_execution(lambda: None, None, run_type="count") == EXIT_OK

    def test_failure_is_logged_and_mapped(self, tmp_path, caplog):
        def fail():
            raise NumericalFailure(1, 1, float("inf"))

        with caplog.at_level(logging.ERROR):
            code = run_command_execution(fail, tmp_path, run_type="train")
        assert code == EXIT_NUMERICAL
        assert "[ERROR] train failed" in caplog.text


class TestParallelMap:
    def test_keeps_input_order(self):
        def slow_square(x):
            time.sleep(0.002 * (5 - x % 5))
            return x * x

        assert parallel_map(slow_square, list(range(20)), workers=4) == [x * x for x in range(20)]

    def test_single_worker_runs_inline(self):
        threads = parallel_map(lambda _: threading.current_thread(), [1, 2, 3], workers=1)
        assert all(t is threading.main_thread() for t in threads)

    def test_empty(self):
        assert parallel_map(lambda x: x, [], workers=3) == []


def test_configure_logging_creates_file(tmp_path):
    root = logging.getLogger()
    try:
        log_file = configure_logging("unit", logs_dir=tmp_path / "logs", level="debug")
        logging.getLogger("pidcount.test").info("[INFO] hello")
        for handler in root.handlers:
            handler.flush()
        assert log_file.parent == tmp_path / "logs"
        assert log_file.name.startswith("unit_") and log_file.suffix == ".log"
        assert "[INFO] hello" in log_file.read_text(encoding="utf-8")
        assert root.level == logging.DEBUG
    finally:
        for handler in list(root.handlers):
            root.removeHandler(handler)
            handler.close()
        root.setLevel(logging.WARNING)
