"""Unit tests for the stock exception policies and callable naming."""

import logging

from gmmc import handlers
from gmmc.errors import DivergedChainError


def _plain_hook() -> None:
    pass


class _Hook(object):
    def on_epoch(self) -> None:
        pass


def test_policy_return_values() -> None:
    exc = DivergedChainError(3, [0])
    assert handlers.stop_and_log_chain_exception(0, exc) is handlers.STOP
    assert handlers.log_and_continue_chain_exception(0, exc) is handlers.CONTINUE
    assert handlers.silent_chain_exception(0, exc) is handlers.CONTINUE
    assert handlers.stop_and_log_subscriber_exception(print, "gmmc.train", exc) is handlers.STOP
    assert (
        handlers.log_and_continue_subscriber_exception(print, "gmmc.train", exc)
        is handlers.CONTINUE
    )


def test_stop_and_log_writes_an_error_record(caplog) -> None:
    with caplog.at_level(logging.ERROR, logger="gmmc.handlers"):
        handlers.stop_and_log_chain_exception(7, DivergedChainError(2, [7]))

    assert len(caplog.records) == 1
    assert "Chain:     7" in caplog.records[0].getMessage()


def test_log_and_continue_writes_a_warning(caplog) -> None:
    with caplog.at_level(logging.WARNING, logger="gmmc.handlers"):
        handlers.log_and_continue_subscriber_exception(print, "gmmc.train.epoch", ValueError("x"))

    assert caplog.records[0].levelno == logging.WARNING
    assert "gmmc.train.epoch" in caplog.records[0].getMessage()


def test_collect_chain_exception_keeps_step() -> None:
    handlers.chain_exceptions_caught.clear()
    handlers.collect_chain_exception(2, DivergedChainError(5, [2]))

    assert handlers.chain_exceptions_caught[0]["chain"] == 2
    assert handlers.chain_exceptions_caught[0]["step"] == 5
    handlers.chain_exceptions_caught.clear()


def test_get_callable_name() -> None:
    assert handlers.get_callable_name(_plain_hook) == "_plain_hook"
    assert handlers.get_callable_name(_Hook().on_epoch) == "_Hook.on_epoch"
    assert handlers.get_callable_name(_Hook.on_epoch) == "on_epoch"
