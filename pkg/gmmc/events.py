"""
Training hooks.

A small hierarchical publish/subscribe hub. ``fit`` emits events under the
``gmmc.train`` namespace; report writers, loggers and checkpointers subscribe
to them. Subscribing to a parent namespace (``gmmc.train``) receives every
child event as well.

Each subscriber receives only the keyword arguments it names, unless it
accepts ``**kwargs``.
"""

import inspect
from typing import Any
from typing import Callable
from typing import Optional

from gmmc.private import registry as _registry

__all__ = [
    "TRAIN_ROOT",
    "TRAIN_EPOCH",
    "TRAIN_SWITCH",
    "TRAIN_CHECKPOINT",
    "TRAIN_FINISHED",
    "SUBSCRIPTION_EXCEPTION_HANDLER",
    "set_subscriber_exception_handler",
    "register_subscriber",
    "subscribe",
    "unregister_subscriber",
    "get_subscriber_count",
    "emit",
    "clear",
]

TRAIN_ROOT = "gmmc.train"
TRAIN_EPOCH = f"{TRAIN_ROOT}.epoch"
"""Payload: record (EpochRecord)."""

TRAIN_SWITCH = f"{TRAIN_ROOT}.switch"
"""Payload: epoch (int), the first epoch of the generative phase in joint mode."""

TRAIN_CHECKPOINT = f"{TRAIN_ROOT}.checkpoint"
"""Payload: epoch (int), model (GmmcModel), buffer (ReplayBuffer or None)."""

TRAIN_FINISHED = f"{TRAIN_ROOT}.finished"
"""Payload: report (TrainReport), model (GmmcModel), buffer (ReplayBuffer or None)."""


SUBSCRIPTION_EXCEPTION_HANDLER = Callable[[_registry.HOOK_SIG, str, Exception], bool]
"""
Signature for hook exception handlers: (callback, namespace, exception) ->
True to stop delivering this event, False to continue.
"""

subscriptions_exception_handler: Optional[SUBSCRIPTION_EXCEPTION_HANDLER] = None
"""
Which handler to use when a hook raises. None (the default) re-raises.
See gmmc.handlers for the stock policies.
"""


def set_subscriber_exception_handler(
    handler: Optional[SUBSCRIPTION_EXCEPTION_HANDLER],
) -> None:
    """
    Args:
        handler: Callable (callback, namespace, exception) -> bool, or None to
            re-raise hook exceptions.
    """
    global subscriptions_exception_handler
    subscriptions_exception_handler = handler


def register_subscriber(
    namespace: str, callback: _registry.HOOK_SIG, priority: int = 0
) -> None:
    """
    Register a hook to a namespace.

    Args:
        namespace (str): Event namespace, e.g. 'gmmc.train.epoch'.
        callback (Callable): Called with the event payload.
        priority (int): Higher priorities run first.
    """
    _registry.validate_namespace(namespace)
    entry = _registry.HOOK_REGISTRY.setdefault(namespace, _registry.NamespaceEntry())
    entry.subscribers.append(
        _registry.Subscriber(callback=callback, priority=priority, namespace=namespace)
    )


def subscribe(
    namespace: str, priority: int = 0
) -> Callable[[_registry.HOOK_SIG], _registry.HOOK_SIG]:
    """Decorator form of register_subscriber."""

    def decorator(func: _registry.HOOK_SIG) -> _registry.HOOK_SIG:
        register_subscriber(namespace, func, priority)
        return func

    return decorator


def unregister_subscriber(namespace: str, callback: _registry.HOOK_SIG) -> None:
    _registry.validate_namespace(namespace)
    entry = _registry.HOOK_REGISTRY.get(namespace)
    if entry is None:
        return

    entry.subscribers = [sub for sub in entry.subscribers if sub.callback != callback]
    if not entry.subscribers:
        del _registry.HOOK_REGISTRY[namespace]


def get_subscriber_count(namespace: str) -> int:
    """Number of hooks registered directly to ``namespace``."""
    entry = _registry.HOOK_REGISTRY.get(namespace)
    return 0 if entry is None else len(entry.subscribers)


def clear() -> None:
    _registry.HOOK_REGISTRY.clear()


def _callback_kwargs(callback: _registry.HOOK_SIG, kwargs: dict[str, Any]) -> dict[str, Any]:
    """Project the payload onto the parameters a callback accepts."""
    parameters = inspect.signature(callback).parameters.values()
    if any(p.kind == inspect.Parameter.VAR_KEYWORD for p in parameters):
        return kwargs
    return {p.name: kwargs[p.name] for p in parameters if p.name in kwargs}


def emit(namespace: str, **kwargs: Any) -> None:
    """
    Deliver an event to every matching hook.

    Hooks run parent namespace first, then by descending priority. A hook
    failure goes to the installed subscriber exception handler; STOP skips
    the remaining hooks for this event.
    """
    _registry.validate_namespace(namespace)
    for sub in _registry.get_sorted_subscribers(namespace):
        try:
            sub.callback(**_callback_kwargs(sub.callback, kwargs))
        except Exception as exc:
            if subscriptions_exception_handler is None:
                raise
            if subscriptions_exception_handler(sub.callback, namespace, exc):
                return
