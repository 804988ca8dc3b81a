# -*- coding: utf-8 -*-
import logging

import pytest

import utils
from utils.error_handler import (
    EXIT_INPUT_ERROR,
    EXIT_INVARIANT_ERROR,
    AuditError,
    ErrorHandler,
    InvariantViolation,
    ScenarioError,
    describe_counters,
)


@pytest.fixture
def handler():
    lines = []
    return ErrorHandler(logging.getLogger("test"), echo=lines.append), lines


@pytest.mark.parametrize("error, code", [
    (AuditError("坏结果包"), EXIT_INPUT_ERROR),
    (InvariantViolation("single_use", "link1 密钥 3"), EXIT_INVARIANT_ERROR),
    (FileNotFoundError("x"), EXIT_INPUT_ERROR),
    (RuntimeError("意外"), EXIT_INVARIANT_ERROR),
])
def test_exit_codes(handler, error, code):
    errors, _ = handler
    assert errors.exit_code_for(error) == code


def test_scenario_errors_listed_one_per_line(handler):
    errors, lines = handler
    code = errors.handle_scenario_error(ScenarioError(["seed 缺失", "links 为空"], "bad.json"))
    assert code == EXIT_INPUT_ERROR
    assert lines[0].endswith("bad.json")
    assert lines[1:] == ["   - seed 缺失", "   - links 为空"]


def test_log_and_show_error(handler):
    errors, lines = handler
    assert errors.log_and_show_error(AuditError("缺少 ledger"), "审计") == EXIT_INPUT_ERROR
    assert "审计失败" in lines[-1]


def test_package_exports_only_live_helpers():
    assert utils.__all__ == ["ErrorHandler", "FieldMapper"]
    assert not hasattr(ErrorHandler, "safe_execute")


def test_describe_counters_skips_zero():
    assert describe_counters({"sent": 3, "stale": 0, "bad_auth": 1}) == "bad_auth=1, sent=3"
