"""Opt-in runtime counters for training and sampling."""

from dataclasses import dataclass
from dataclasses import fields
from threading import Lock
from time import perf_counter
from typing import Optional


__all__ = [
    "RuntimeMetrics",
    "disable_runtime_metrics",
    "enable_runtime_metrics",
    "get_runtime_metrics",
    "reset_runtime_metrics",
    "runtime_metrics_enabled",
]


@dataclass(frozen=True)
class RuntimeMetrics(object):
    """Immutable snapshot of the runtime counters."""

    enabled: bool
    optimizer_steps: int
    discriminative_steps: int
    generative_steps: int
    chains_started: int
    chains_from_buffer: int
    chains_reinitialized: int
    chains_diverged: int
    sampler_steps: int
    training_seconds: float


@dataclass
class _MutableRuntimeMetrics(object):
    optimizer_steps: int = 0
    discriminative_steps: int = 0
    generative_steps: int = 0
    chains_started: int = 0
    chains_from_buffer: int = 0
    chains_reinitialized: int = 0
    chains_diverged: int = 0
    sampler_steps: int = 0
    training_seconds: float = 0.0


_enabled = False
_totals = _MutableRuntimeMetrics()
_lock = Lock()


def enable_runtime_metrics() -> None:
    """Start counting; totals collected earlier are kept."""
    global _enabled
    with _lock:
        _enabled = True


def disable_runtime_metrics() -> None:
    """Stop counting; the totals so far stay readable."""
    global _enabled
    with _lock:
        _enabled = False


def runtime_metrics_enabled() -> bool:
    with _lock:
        return _enabled


def reset_runtime_metrics() -> None:
    """Zero every counter. Does not change whether collection is enabled."""
    global _totals
    with _lock:
        _totals = _MutableRuntimeMetrics()


def get_runtime_metrics() -> RuntimeMetrics:
    """Return a stable snapshot of all runtime counters."""
    with _lock:
        values = {f.name: getattr(_totals, f.name) for f in fields(_totals)}
        return RuntimeMetrics(enabled=_enabled, **values)


def _increment(field: str, amount: int = 1) -> None:
    # Disabled collection stays a single boolean branch on the hot path.
    if not _enabled:
        return
    with _lock:
        setattr(_totals, field, getattr(_totals, field) + amount)


class _Stopwatch(object):
    """Adds elapsed training time to the totals when collection is enabled."""

    def __init__(self) -> None:
        self.started_at: Optional[float] = perf_counter() if _enabled else None

    def finish(self) -> None:
        if self.started_at is None:
            return
        elapsed = perf_counter() - self.started_at
        with _lock:
            _totals.training_seconds += elapsed
