import logging

from src.core.logger import LoggerContext, get_logger, run_context, set_global_context, set_global_level


def test_loggers_are_singletons_per_name():
    assert get_logger("sensor_select.tests") is get_logger("sensor_select.tests")
    assert get_logger("sensor_select.tests") is not get_logger("sensor_select.other")


def test_run_context_restores_previous_values():
    set_global_context(run_id="outer")
    with run_context(run_id="inner", seed=7):
        assert LoggerContext.get_context("run_id") == "inner"
        assert LoggerContext.get_context("seed") == "7"
    assert LoggerContext.get_context("run_id") == "outer"
    assert LoggerContext.get_context("seed") == ""


def test_global_level_reaches_existing_and_new_loggers():
    existing = get_logger("sensor_select.level_check")
    try:
        set_global_level("DEBUG")
        assert existing._logger.level == logging.DEBUG
        assert get_logger("sensor_select.level_check_late")._logger.level == logging.DEBUG
    finally:
        set_global_level("WARNING")
