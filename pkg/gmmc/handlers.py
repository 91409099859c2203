"""
Exception handling policies.

Two families of handlers decide what happens when something fails in the
middle of a batch of work:

- chain handlers are consulted by ``sampler.sample_chains`` when one sampler
  chain diverges,
- subscriber handlers are consulted by ``events.emit`` when a training hook
  raises.

A handler returns STOP (True) to abort the rest of the batch or CONTINUE
(False) to carry on. Built-ins cover stopping with a log record
(stop_and_log_*), continuing with a warning (log_and_continue_*), silently
continuing (silent_*) and collecting failures for later review (collect_*).
"""

import logging
import sys
from typing import Callable

logger = logging.getLogger(__name__)

__all__ = [
    "STOP",
    "CONTINUE",
    "get_callable_name",
    "stop_and_log_chain_exception",
    "log_and_continue_chain_exception",
    "silent_chain_exception",
    "collect_chain_exception",
    "chain_exceptions_caught",
    "stop_and_log_subscriber_exception",
    "log_and_continue_subscriber_exception",
    "silent_subscriber_exception",
    "collect_subscriber_exception",
    "subscriber_exceptions_caught",
]

STOP = True
CONTINUE = False


def get_callable_name(callable_: Callable[..., object]) -> str:
    """Qualified name for bound methods, __name__ otherwise, str() as a fallback."""
    if hasattr(callable_, "__self__"):
        return f"{callable_.__self__.__class__.__name__}.{callable_.__name__}"
    elif hasattr(callable_, "__name__"):
        return callable_.__name__
    else:
        return str(callable_)


# -----Chain Exception Handlers------------------------------------------------


def stop_and_log_chain_exception(chain: int, exception: Exception) -> bool:
    """Log the failing chain and stop sampling the remaining chains."""
    logger.error(
        f"Sampler chain failed:\n"
        f"  Chain:     {chain}\n"
        f"  Exception: {exception.__class__.__name__}: {exception}",
        exc_info=True,
    )
    return STOP


def log_and_continue_chain_exception(chain: int, exception: Exception) -> bool:
    """Log the failing chain and keep sampling the others."""
    logger.warning(f"Sampler chain {chain} failed (continuing): {exception}")
    return CONTINUE


def silent_chain_exception(_: int, __: Exception) -> bool:
    return CONTINUE


chain_exceptions_caught: list[dict[str, object]] = []


def collect_chain_exception(chain: int, exception: Exception) -> bool:
    """
    Append the failure to handlers.chain_exceptions_caught and continue.
    Clear the list yourself between runs.
    """
    chain_exceptions_caught.append(
        {
            "chain": chain,
            "step": getattr(exception, "step", None),
            "exception": f"{exception.__class__.__name__}: {exception}",
            "exc_info": sys.exc_info(),
        }
    )
    return CONTINUE


# -----Subscriber Exception Handlers-------------------------------------------


def stop_and_log_subscriber_exception(
    callback: Callable[..., object], namespace: str, exception: Exception
) -> bool:
    """Log the failing hook and skip the remaining hooks for this event."""
    logger.error(
        f"Exception in training hook:\n"
        f"  Namespace: {namespace}\n"
        f"  Callback:  {get_callable_name(callback)}\n"
        f"  Exception: {exception.__class__.__name__}: {exception}",
        exc_info=True,
    )
    return STOP


def log_and_continue_subscriber_exception(
    callback: Callable[..., object], namespace: str, exception: Exception
) -> bool:
    logger.warning(
        f"Hook error (continuing): "
        f"{get_callable_name(callback)} in {namespace}: {exception}"
    )
    return CONTINUE


def silent_subscriber_exception(
    _: Callable[..., object], __: str, ___: Exception
) -> bool:
    return CONTINUE


subscriber_exceptions_caught: list[dict[str, object]] = []


def collect_subscriber_exception(
    callback: Callable[..., object], namespace: str, exception: Exception
) -> bool:
    subscriber_exceptions_caught.append(
        {
            "callback": get_callable_name(callback),
            "namespace": namespace,
            "exception": f"{exception.__class__.__name__}: {exception}",
            "exc_info": sys.exc_info(),
        }
    )
    return CONTINUE
