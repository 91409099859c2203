"""
Per-epoch training plan.

explain_schedule turns a TrainConfig into the exact sequence of epochs fit
will run: which step each epoch uses, the balance factor beta, and the
learning rate after decay. It has no side effects, so schedules can be
inspected and tested without training anything.
"""

import enum
from dataclasses import dataclass
from typing import TYPE_CHECKING

if TYPE_CHECKING:
    from gmmc.training import TrainConfig

__all__ = [
    "TrainMode",
    "StepKind",
    "EpochPlan",
    "beta_at",
    "learning_rate_at",
    "explain_schedule",
]


class TrainMode(str, enum.Enum):
    DISCRIMINATIVE = "discriminative"
    GENERATIVE = "generative"
    JOINT = "joint"
    """Discriminative epochs up to the switch, generative with a ramped beta after."""


class StepKind(str, enum.Enum):
    """The update an epoch runs: disc_step or gen_step."""

    DISCRIMINATIVE = "discriminative"
    GENERATIVE = "generative"


@dataclass(frozen=True)
class EpochPlan(object):
    """What one epoch of fit does."""

    epoch: int
    """1-based epoch number."""

    step: StepKind
    beta: float
    """Balance factor for generative steps; 0.0 for discriminative epochs."""

    learning_rate: float

    switched: bool = False
    """True for the first generative epoch of a joint run."""


def beta_at(cfg: "TrainConfig", epoch: int) -> float:
    """
    Balance factor used at ``epoch``.

    In joint mode beta is 0 before the switch epoch and then ramps linearly
    to cfg.beta over cfg.beta_ramp_epochs epochs, reaching cfg.beta at
    switch + ramp. A ramp of 0 is a step change.
    """
    if cfg.mode is TrainMode.DISCRIMINATIVE:
        return 0.0
    if cfg.mode is TrainMode.GENERATIVE:
        return cfg.beta

    switch = cfg.switch_epoch
    if epoch < switch:
        return 0.0
    if cfg.beta_ramp_epochs == 0:
        return cfg.beta
    return cfg.beta * min(1.0, (epoch - switch) / cfg.beta_ramp_epochs)


def learning_rate_at(cfg: "TrainConfig", epoch: int) -> float:
    """Initial rate times lr_decay for every decay epoch at or before ``epoch``."""
    decays = sum(1 for decay_epoch in cfg.decay_epochs if decay_epoch <= epoch)
    return cfg.learning_rate * cfg.lr_decay**decays


def explain_schedule(cfg: "TrainConfig") -> tuple[EpochPlan, ...]:
    """One EpochPlan per epoch, in order. Empty for a zero-epoch run."""
    plans = []
    for epoch in range(1, cfg.epochs + 1):
        if cfg.mode is TrainMode.DISCRIMINATIVE:
            step = StepKind.DISCRIMINATIVE
        elif cfg.mode is TrainMode.GENERATIVE:
            step = StepKind.GENERATIVE
        else:
            step = (
                StepKind.GENERATIVE
                if epoch >= cfg.switch_epoch
                else StepKind.DISCRIMINATIVE
            )

        plans.append(
            EpochPlan(
                epoch=epoch,
                step=step,
                beta=beta_at(cfg, epoch),
                learning_rate=learning_rate_at(cfg, epoch),
                switched=cfg.mode is TrainMode.JOINT and epoch == cfg.switch_epoch,
            )
        )
    return tuple(plans)
