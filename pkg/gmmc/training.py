"""
Discriminative, generative and joint training.

Every loss is written as something to minimise, with energies evaluated at
gamma^2 = 1:

discriminative
    mean_batch E(x, y)
generative
    mean_batch E(x, y) - beta * mean_chains E(x', y'), with the sampled x'
    held fixed (no differentiation through the chains)

fit runs the plan produced by gmmc.schedule.explain_schedule, then estimates
gamma^2 on the training set. Progress is published on the gmmc.train event
namespace.
"""

import logging
import math
from dataclasses import dataclass
from dataclasses import field
from time import perf_counter
from typing import Optional

import numpy as np
from numpy.typing import ArrayLike
from numpy.typing import NDArray

from gmmc import events
from gmmc import metrics
from gmmc import sampler
from gmmc.data import LabeledDataset
from gmmc.errors import ArgumentError
from gmmc.errors import DimensionError
from gmmc.errors import DivergedChainError
from gmmc.errors import DivergenceError
from gmmc.errors import EmptyDatasetError
from gmmc.errors import NonFiniteLossError
from gmmc.errors import TrainingDivergedError
from gmmc.model import GmmcModel
from gmmc.model import accuracy
from gmmc.model import estimate_gamma2
from gmmc.model import with_gamma2
from gmmc.network import ParameterVector
from gmmc.network import record
from gmmc.optim import AdamState
from gmmc.optim import adam_init
from gmmc.optim import adam_step
from gmmc.sampler import DEFAULT_REINIT_PROB
from gmmc.sampler import SamplerConfig
from gmmc.schedule import EpochPlan
from gmmc.schedule import StepKind
from gmmc.schedule import TrainMode
from gmmc.schedule import explain_schedule

__all__ = [
    "DEFAULT_EPOCHS",
    "DEFAULT_BATCH_SIZE",
    "DEFAULT_LEARNING_RATE",
    "DEFAULT_LR_DECAY",
    "DEFAULT_BETA",
    "DEFAULT_BETA_RAMP_EPOCHS",
    "DEFAULT_TRAIN_BUFFER_CAPACITY",
    "TrainConfig",
    "StepResult",
    "EpochRecord",
    "TrainReport",
    "generative_gradient",
    "disc_step",
    "gen_step",
    "fit",
    "joint_train",
]

logger = logging.getLogger(__name__)

DEFAULT_EPOCHS = 50
DEFAULT_BATCH_SIZE = 64
DEFAULT_LEARNING_RATE = 1e-4
DEFAULT_LR_DECAY = 0.3
DEFAULT_BETA = 0.5
DEFAULT_BETA_RAMP_EPOCHS = 5
DEFAULT_TRAIN_BUFFER_CAPACITY = 10_000


@dataclass(frozen=True)
class TrainConfig(object):
    """Hyperparameters for fit. Validated on construction."""

    mode: TrainMode = TrainMode.DISCRIMINATIVE
    epochs: int = DEFAULT_EPOCHS
    batch_size: int = DEFAULT_BATCH_SIZE
    learning_rate: float = DEFAULT_LEARNING_RATE

    lr_decay: float = DEFAULT_LR_DECAY
    """Multiplier applied at every epoch listed in decay_epochs."""

    decay_epochs: tuple[int, ...] = ()

    beta: float = DEFAULT_BETA
    """Weight of the sampled-energy term, in [0, 1]."""

    joint_switch_epoch: Optional[int] = None
    """First generative epoch of a joint run; None means halfway through."""

    beta_ramp_epochs: int = DEFAULT_BETA_RAMP_EPOCHS
    sampler: SamplerConfig = field(default_factory=SamplerConfig)
    buffer_capacity: int = DEFAULT_TRAIN_BUFFER_CAPACITY
    reinit_prob: float = DEFAULT_REINIT_PROB
    seed: int = 0

    checkpoint_every: int = 0
    """Emit a checkpoint event every N epochs; 0 only checkpoints at the end."""

    def __post_init__(self) -> None:
        object.__setattr__(self, "mode", TrainMode(self.mode))
        object.__setattr__(self, "decay_epochs", tuple(int(e) for e in self.decay_epochs))

        if self.epochs < 0:
            raise ArgumentError(f"epochs must be >= 0, got {self.epochs}")
        if self.batch_size < 1:
            raise ArgumentError(f"batch_size must be >= 1, got {self.batch_size}")
        if not (self.learning_rate > 0 and math.isfinite(self.learning_rate)):
            raise ArgumentError(f"learning_rate must be positive, got {self.learning_rate}")
        if not 0.0 < self.lr_decay <= 1.0:
            raise ArgumentError(f"lr_decay must be in (0, 1], got {self.lr_decay}")
        if any(b <= a for a, b in zip(self.decay_epochs, self.decay_epochs[1:])):
            raise ArgumentError(f"decay_epochs must increase strictly: {self.decay_epochs}")
        if any(not 1 <= e <= self.epochs for e in self.decay_epochs):
            raise ArgumentError(
                f"decay_epochs must lie within [1, {self.epochs}]: {self.decay_epochs}"
            )
        if not 0.0 <= self.beta <= 1.0:
            raise ArgumentError(f"beta must be in [0, 1], got {self.beta}")
        if self.joint_switch_epoch is not None and self.joint_switch_epoch < 1:
            raise ArgumentError(
                f"joint_switch_epoch must be >= 1, got {self.joint_switch_epoch}"
            )
        if self.beta_ramp_epochs < 0:
            raise ArgumentError(f"beta_ramp_epochs must be >= 0, got {self.beta_ramp_epochs}")
        if self.buffer_capacity < 1:
            raise ArgumentError(f"buffer_capacity must be >= 1, got {self.buffer_capacity}")
        if not 0.0 <= self.reinit_prob <= 1.0:
            raise ArgumentError(f"reinit_prob must be in [0, 1], got {self.reinit_prob}")
        if self.checkpoint_every < 0:
            raise ArgumentError(f"checkpoint_every must be >= 0, got {self.checkpoint_every}")
        if self.mode is not TrainMode.DISCRIMINATIVE and self.sampler.mode not in (
            sampler.SamplingMode.STAGED,
            sampler.SamplingMode.NOISE_INJECTED,
        ):
            raise ArgumentError(
                f"{self.mode.value} training needs a staged or noise_injected sampler, "
                f"got {self.sampler.mode.value}"
            )

    @property
    def switch_epoch(self) -> int:
        if self.joint_switch_epoch is not None:
            return self.joint_switch_epoch
        return self.epochs // 2 + 1


@dataclass(frozen=True, eq=False)
class StepResult(object):
    """Model and optimizer state after one update, plus the losses it saw."""

    model: GmmcModel
    opt_state: AdamState
    loss_real: float
    """Mean real-data energy before the update."""

    loss_sampled: Optional[float] = None
    """Mean sampled-data energy before the update; None for disc_step."""


@dataclass(frozen=True)
class EpochRecord(object):
    epoch: int
    step: StepKind
    beta: float
    learning_rate: float
    loss_real: float
    loss_sampled: Optional[float]
    train_acc: float
    test_acc: Optional[float]
    """None when fit ran without a test set."""

    seconds: float
    switched: bool = False
    """True on the first generative epoch of a joint run."""


@dataclass(frozen=True)
class TrainReport(object):
    """One record per completed epoch and how the run ended."""

    mode: TrainMode
    records: tuple[EpochRecord, ...] = ()
    switch_epoch: Optional[int] = None
    gamma2: Optional[float] = None
    """Variance estimated after the final epoch; None for aborted runs."""

    diverged: bool = False
    diverged_at: Optional[tuple[int, int]] = None
    """(epoch, batch index) of the failing step."""


# -----Steps-------------------------------------------------------------------


def _mean_energy_gradient(
    m: GmmcModel, x: ArrayLike, y: ArrayLike
) -> tuple[float, ParameterVector]:
    """Mean of ||phi(x) - mu_y||^2 / 2 over the batch and its parameter gradient."""
    x_arr = np.atleast_2d(np.asarray(x, dtype=np.float64))
    labels = np.atleast_1d(np.asarray(y, dtype=np.int64))
    n = x_arr.shape[0]
    if n == 0:
        raise EmptyDatasetError("Cannot take a training step on an empty batch")
    if labels.shape != (n,):
        raise DimensionError(f"{n} inputs but labels of shape {labels.shape}")

    tape = record(m.params, m.spec, x_arr)
    residual = tape.output - m.centroids.means[labels]
    loss = 0.5 * float(np.einsum("nd,nd->", residual, residual)) / n
    grad, _ = tape.backward(residual / n, need_params=True)
    assert grad is not None
    return loss, grad


def _check_loss(loss: float, epoch: Optional[int], batch_index: Optional[int]) -> None:
    if not math.isfinite(loss):
        raise NonFiniteLossError(loss, epoch=epoch, batch_index=batch_index)


def generative_gradient(
    m: GmmcModel,
    real_x: ArrayLike,
    real_y: ArrayLike,
    sampled_x: ArrayLike,
    sampled_y: ArrayLike,
    beta: float,
) -> tuple[float, float, ParameterVector]:
    """
    Gradient of mean E(real) - beta * mean E(sampled) at fixed samples.

    Returns:
        (mean real energy, mean sampled energy, combined parameter gradient).
        With beta == 0 the gradient is exactly the discriminative one.
    """
    loss_real, grad_real = _mean_energy_gradient(m, real_x, real_y)
    loss_sampled, grad_sampled = _mean_energy_gradient(m, sampled_x, sampled_y)
    if beta == 0.0:
        return loss_real, loss_sampled, grad_real
    combined = grad_real.values - beta * grad_sampled.values
    return loss_real, loss_sampled, grad_real.replace_values(combined)


def disc_step(
    m: GmmcModel,
    batch_x: ArrayLike,
    batch_y: ArrayLike,
    opt_state: AdamState,
    learning_rate: float,
    epoch: Optional[int] = None,
    batch_index: Optional[int] = None,
) -> StepResult:
    """
    One Adam update on the mean energy of a labelled batch.

    Raises:
        NonFiniteLossError: If the loss is NaN or infinite.
        NonFiniteParameterError: If the update leaves non-finite parameters.
    """
    loss, grad = _mean_energy_gradient(m, batch_x, batch_y)
    _check_loss(loss, epoch, batch_index)

    params, opt_state = adam_step(m.params, grad, opt_state, learning_rate)
    metrics._increment("optimizer_steps")
    metrics._increment("discriminative_steps")
    return StepResult(model=m.with_params(params), opt_state=opt_state, loss_real=loss)


def gen_step(
    m: GmmcModel,
    batch_x: ArrayLike,
    batch_y: ArrayLike,
    buf: sampler.ReplayBuffer,
    sampler_cfg: SamplerConfig,
    opt_state: AdamState,
    learning_rate: float,
    beta: float,
    rng: np.random.Generator,
    epoch: Optional[int] = None,
    batch_index: Optional[int] = None,
) -> StepResult:
    """
    One generative update.

    Starts one chain per real example from the replay buffer, runs the
    sampler, applies Adam to mean E(real) - beta * mean E(sampled), then
    writes the finished chains back to ``buf``.

    Raises:
        DivergedChainError: If a chain becomes non-finite; nothing is written back.
        NonFiniteLossError: If either energy term is NaN or infinite.
    """
    if sampler_cfg.mode not in (
        sampler.SamplingMode.STAGED,
        sampler.SamplingMode.NOISE_INJECTED,
    ):
        raise ArgumentError(f"gen_step cannot train with {sampler_cfg.mode.value} chains")

    n = np.atleast_2d(np.asarray(batch_x)).shape[0]
    start = sampler.init_chains(buf, m.num_classes, n)
    try:
        sampled = sampler.run_sampler(m, start.x, start.y, sampler_cfg, rng)
    except DivergedChainError:
        logger.error(f"Sampler diverged during epoch {epoch}, batch {batch_index}")
        raise

    loss_real, loss_sampled, grad = generative_gradient(
        m, batch_x, batch_y, sampled, start.y, beta
    )
    _check_loss(loss_real, epoch, batch_index)
    _check_loss(loss_sampled, epoch, batch_index)

    params, opt_state = adam_step(m.params, grad, opt_state, learning_rate)
    sampler.put_chains(buf, start, sampled)
    metrics._increment("optimizer_steps")
    metrics._increment("generative_steps")
    return StepResult(
        model=m.with_params(params),
        opt_state=opt_state,
        loss_real=loss_real,
        loss_sampled=loss_sampled,
    )


# -----Loops-------------------------------------------------------------------


def _check_compatible(m: GmmcModel, ds: LabeledDataset) -> None:
    if ds.input_dim != m.input_dim:
        raise DimensionError(
            f"Dataset '{ds.name}' has D={ds.input_dim}, model expects {m.input_dim}"
        )
    if ds.num_classes != m.num_classes:
        raise DimensionError(
            f"Dataset '{ds.name}' has {ds.num_classes} classes, model has {m.num_classes}"
        )


def _weighted_mean(values: list[float], weights: list[int]) -> float:
    return math.fsum(v * w for v, w in zip(values, weights)) / sum(weights)


def fit(
    m: GmmcModel,
    train_set: LabeledDataset,
    test_set: Optional[LabeledDataset],
    cfg: TrainConfig,
    buffer: Optional[sampler.ReplayBuffer] = None,
) -> tuple[GmmcModel, TrainReport]:
    """
    Train ``m`` on ``train_set`` and estimate gamma^2 afterwards.

    ``train_set`` and ``test_set`` are expected to be disjoint. A replay
    buffer is created when the schedule contains generative epochs and none
    was passed in. The run is a pure function of the inputs and cfg.seed.

    Raises:
        TrainingDivergedError: If any step diverges. ``.report`` holds every
            epoch completed before the failure.
    """
    _check_compatible(m, train_set)
    if test_set is not None:
        _check_compatible(m, test_set)
    if len(train_set) == 0:
        raise EmptyDatasetError(f"Training set '{train_set.name}' is empty")

    plan = explain_schedule(cfg)
    shuffle_rng, chain_rng = (
        np.random.default_rng(seed) for seed in np.random.SeedSequence(cfg.seed).spawn(2)
    )
    if buffer is None and any(p.step is StepKind.GENERATIVE for p in plan):
        buffer = sampler.ReplayBuffer(
            cfg.buffer_capacity, m.input_dim, cfg.reinit_prob, rng_seed=cfg.seed
        )

    switch_epoch = cfg.switch_epoch if cfg.mode is TrainMode.JOINT else None
    opt_state = adam_init(m.params)
    records: list[EpochRecord] = []
    stopwatch = metrics._Stopwatch()
    logger.info(
        f"Training {cfg.mode.value} for {cfg.epochs} epochs on {len(train_set)} examples"
    )

    for epoch_plan in plan:
        if epoch_plan.switched:
            logger.info(f"Switching to generative steps at epoch {epoch_plan.epoch}")
            events.emit(events.TRAIN_SWITCH, epoch=epoch_plan.epoch)

        try:
            m, opt_state, epoch_record = _run_epoch(
                m, train_set, test_set, cfg, epoch_plan, opt_state, buffer,
                shuffle_rng, chain_rng,
            )
        except _EpochAborted as aborted:
            stopwatch.finish()
            report = TrainReport(
                mode=cfg.mode,
                records=tuple(records),
                switch_epoch=switch_epoch,
                diverged=True,
                diverged_at=(epoch_plan.epoch, aborted.batch_index),
            )
            raise TrainingDivergedError(
                epoch_plan.epoch, aborted.batch_index, report, aborted.cause
            ) from aborted.cause

        records.append(epoch_record)
        events.emit(events.TRAIN_EPOCH, record=epoch_record)
        if cfg.checkpoint_every and epoch_plan.epoch % cfg.checkpoint_every == 0:
            events.emit(
                events.TRAIN_CHECKPOINT, epoch=epoch_plan.epoch, model=m, buffer=buffer
            )

    stopwatch.finish()
    gamma2 = estimate_gamma2(m, train_set)
    m = with_gamma2(m, gamma2)
    report = TrainReport(
        mode=cfg.mode,
        records=tuple(records),
        switch_epoch=switch_epoch,
        gamma2=gamma2,
    )
    events.emit(events.TRAIN_FINISHED, report=report, model=m, buffer=buffer)
    return m, report


class _EpochAborted(Exception):
    def __init__(self, batch_index: int, cause: DivergenceError) -> None:
        self.batch_index = batch_index
        self.cause = cause
        super().__init__(str(cause))


def _run_epoch(
    m: GmmcModel,
    train_set: LabeledDataset,
    test_set: Optional[LabeledDataset],
    cfg: TrainConfig,
    plan: EpochPlan,
    opt_state: AdamState,
    buffer: Optional[sampler.ReplayBuffer],
    shuffle_rng: np.random.Generator,
    chain_rng: np.random.Generator,
) -> tuple[GmmcModel, AdamState, EpochRecord]:
    started = perf_counter()
    order: NDArray[np.int64] = shuffle_rng.permutation(len(train_set))
    real_losses: list[float] = []
    sampled_losses: list[float] = []
    sizes: list[int] = []

    for batch_index, start in enumerate(range(0, len(order), cfg.batch_size)):
        idx = order[start : start + cfg.batch_size]
        batch_x = train_set.inputs[idx]
        batch_y = train_set.labels[idx]
        try:
            if plan.step is StepKind.GENERATIVE:
                assert buffer is not None
                result = gen_step(
                    m, batch_x, batch_y, buffer, cfg.sampler, opt_state,
                    plan.learning_rate, plan.beta, chain_rng,
                    epoch=plan.epoch, batch_index=batch_index,
                )
            else:
                result = disc_step(
                    m, batch_x, batch_y, opt_state, plan.learning_rate,
                    epoch=plan.epoch, batch_index=batch_index,
                )
        except DivergenceError as exc:
            raise _EpochAborted(batch_index, exc) from exc

        m, opt_state = result.model, result.opt_state
        real_losses.append(result.loss_real)
        sizes.append(len(idx))
        if result.loss_sampled is not None:
            sampled_losses.append(result.loss_sampled)
        logger.debug(
            f"epoch {plan.epoch} batch {batch_index}: loss_real={result.loss_real:.6g}"
        )

    epoch_record = EpochRecord(
        epoch=plan.epoch,
        step=plan.step,
        beta=plan.beta,
        learning_rate=plan.learning_rate,
        loss_real=_weighted_mean(real_losses, sizes),
        loss_sampled=_weighted_mean(sampled_losses, sizes) if sampled_losses else None,
        train_acc=accuracy(m, train_set),
        test_acc=accuracy(m, test_set) if test_set is not None and len(test_set) else None,
        seconds=perf_counter() - started,
        switched=plan.switched,
    )
    logger.info(
        f"epoch {epoch_record.epoch} [{epoch_record.step.value}] "
        f"beta={epoch_record.beta:.3g} lr={epoch_record.learning_rate:.3g} "
        f"loss_real={epoch_record.loss_real:.6g} train_acc={epoch_record.train_acc:.4f}"
    )
    return m, opt_state, epoch_record


def joint_train(
    m: GmmcModel,
    train_set: LabeledDataset,
    cfg: TrainConfig,
    test_set: Optional[LabeledDataset] = None,
) -> tuple[GmmcModel, TrainReport]:
    """
    fit for a joint-mode config.

    Epochs before cfg.switch_epoch run disc_step only; from the switch on,
    gen_step runs with beta ramping linearly from 0 to cfg.beta. A switch
    beyond the final epoch makes this a purely discriminative run.
    """
    if cfg.mode is not TrainMode.JOINT:
        raise ArgumentError(f"joint_train needs mode=joint, got {cfg.mode.value}")
    return fit(m, train_set, test_set, cfg)
