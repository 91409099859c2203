"""
Herein is the hook table behind gmmc.events.

Not part of the public interface. A namespace exists in the table while at
least one subscriber is registered to it.
"""

from dataclasses import dataclass
from dataclasses import field
from typing import Any
from typing import Callable


HOOK_SIG = Callable[..., Any]


@dataclass(frozen=True)
class Subscriber(object):
    """A registered hook and its delivery priority."""

    callback: HOOK_SIG

    priority: int
    """Higher numbers run before lower numbers within a namespace."""

    namespace: str


@dataclass
class NamespaceEntry(object):
    subscribers: list[Subscriber] = field(default_factory=list)


HOOK_REGISTRY: dict[str, NamespaceEntry] = {}
"""Registered namespaces and their subscribers, in registration order."""


def validate_namespace(namespace: str) -> None:
    if not namespace or namespace.startswith(".") or namespace.endswith("."):
        raise ValueError(f"Invalid hook namespace: {namespace!r}")


def matches(namespace: str, registered_namespace: str) -> bool:
    """True when ``namespace`` equals or sits below ``registered_namespace``."""
    return namespace == registered_namespace or namespace.startswith(
        registered_namespace + "."
    )


def get_sorted_subscribers(namespace: str) -> list[Subscriber]:
    """
    Matching subscribers in delivery order.

    Parent namespaces come before their children; within a namespace,
    priority descending with ties kept in registration order.
    """
    matching = sorted(
        (registered for registered in HOOK_REGISTRY if matches(namespace, registered)),
        key=lambda registered: registered.count("."),
    )
    result: list[Subscriber] = []
    for registered in matching:
        result.extend(
            sorted(
                HOOK_REGISTRY[registered].subscribers,
                key=lambda sub: sub.priority,
                reverse=True,
            )
        )
    return result
