"""
Sample generation: replay buffer and the three chain update rules.

staged
    Draw one target z ~ N(mu_y, gamma^2 I) per chain, then descend
    E_z(x) = ||phi(x) - z||^2 / (2 gamma^2) without noise.
noise_injected
    Draw fresh z ~ N(0, I) every step and move along
    -dE(x, y)/dx + (1/gamma) J^T z, the reparameterised form of the staged
    objective.
sgld
    x <- x - (alpha/2) dE(x, y)/dx + alpha * eps with eps ~ N(0, I). The noise
    is scaled by alpha, not sqrt(alpha); this is the update as published and
    is kept as a reference.

Chains live in [-1, 1]^D. They start either from the replay buffer or, with
probability rho (and always when the buffer is empty), from U(-1, 1)^D with a
uniformly drawn class.

Gradients use unit gamma^2 unless SamplerConfig.use_estimated_gamma2 is set,
which is meant for sampling from a finished model.
"""

import enum
import logging
import math
from dataclasses import dataclass
from typing import AbstractSet
from typing import Callable
from typing import Optional
from typing import Union

import numpy as np
from numpy.typing import ArrayLike
from numpy.typing import NDArray

from gmmc import handlers
from gmmc import metrics
from gmmc import network
from gmmc.errors import ArgumentError
from gmmc.errors import DimensionError
from gmmc.errors import DivergedChainError
from gmmc.errors import GammaNotEstimatedError
from gmmc.model import GmmcModel

__all__ = [
    "DEFAULT_NUM_STEPS",
    "DEFAULT_STEP_SIZE",
    "DEFAULT_REINIT_PROB",
    "DEFAULT_BUFFER_CAPACITY",
    "SamplingMode",
    "SamplerConfig",
    "ReplayBuffer",
    "ChainStart",
    "ChainBatch",
    "SampleResult",
    "CHAIN_EXCEPTION_HANDLER",
    "set_chain_exception_handler",
    "init_chain",
    "init_chains",
    "buffer_put",
    "put_chains",
    "staged_step",
    "noise_injected_step",
    "sgld_step",
    "staged_sample",
    "noise_injected_sample",
    "sgld_sample",
    "run_sampler",
    "sample_chains",
]

logger = logging.getLogger(__name__)

DEFAULT_NUM_STEPS = 20
DEFAULT_STEP_SIZE = 1.0
DEFAULT_REINIT_PROB = 0.025
DEFAULT_BUFFER_CAPACITY = 100_000
"""Full-scale buffer size. Desk-scale training uses a smaller one."""


class SamplingMode(str, enum.Enum):
    STAGED = "staged"
    NOISE_INJECTED = "noise_injected"
    SGLD = "sgld"


@dataclass(frozen=True)
class SamplerConfig(object):
    """Settings shared by every chain of a sampling run."""

    num_steps: int = DEFAULT_NUM_STEPS
    """Number of update steps tau."""

    step_size: float = DEFAULT_STEP_SIZE
    """Step size alpha."""

    mode: SamplingMode = SamplingMode.STAGED

    clip_to_domain: bool = True
    """Clip to [-1, 1]^D after every step."""

    use_estimated_gamma2: bool = False
    """Use the model's estimated gamma^2 instead of 1."""

    def __post_init__(self) -> None:
        if self.num_steps < 1:
            raise ArgumentError(f"num_steps must be >= 1, got {self.num_steps}")
        if not self.step_size >= 0 or not math.isfinite(self.step_size):
            raise ArgumentError(f"step_size must be finite and >= 0, got {self.step_size}")
        object.__setattr__(self, "mode", SamplingMode(self.mode))


# -----Replay buffer-----------------------------------------------------------


class ReplayBuffer(object):
    """
    Persistent pool of (x, y) chain states.

    Single owner: reads and writes must not interleave across threads. Every
    stored x is clipped to [-1, 1]^D.
    """

    def __init__(
        self,
        capacity: int,
        input_dim: int,
        reinit_prob: float = DEFAULT_REINIT_PROB,
        rng_seed: int = 0,
    ) -> None:
        if capacity < 1 or input_dim < 1:
            raise ArgumentError(
                f"capacity and input_dim must be positive, got {capacity}, {input_dim}"
            )
        if not 0.0 <= reinit_prob <= 1.0:
            raise ArgumentError(f"reinit_prob must be in [0, 1], got {reinit_prob}")

        self.capacity = capacity
        self.input_dim = input_dim
        self.reinit_prob = reinit_prob
        self.rng_seed = rng_seed
        self.rng = np.random.default_rng(rng_seed)
        self._xs: list[NDArray[np.float64]] = []
        self._ys: list[int] = []

    def __len__(self) -> int:
        return len(self._ys)

    def entry(self, slot: int) -> tuple[NDArray[np.float64], int]:
        return self._xs[slot].copy(), self._ys[slot]

    def entries(self) -> list[tuple[NDArray[np.float64], int]]:
        return [(x.copy(), y) for x, y in zip(self._xs, self._ys)]

    def as_arrays(self) -> tuple[NDArray[np.float64], NDArray[np.int64]]:
        """(len, D) inputs and (len,) labels, copies."""
        if not self._xs:
            return np.empty((0, self.input_dim)), np.empty(0, dtype=np.int64)
        return np.stack(self._xs), np.array(self._ys, dtype=np.int64)

    def _store(self, slot: Optional[int], x: ArrayLike, y: int) -> None:
        x_arr = np.clip(np.asarray(x, dtype=np.float64), -1.0, 1.0)
        if x_arr.shape != (self.input_dim,):
            raise DimensionError(
                f"Buffer entries have shape ({self.input_dim},), got {x_arr.shape}"
            )
        if slot is None:
            self._xs.append(x_arr)
            self._ys.append(int(y))
        else:
            self._xs[slot] = x_arr
            self._ys[slot] = int(y)


@dataclass(frozen=True, eq=False)
class ChainStart(object):
    """Initial state of one chain and where it came from."""

    x: NDArray[np.float64]
    y: int
    from_buffer: bool
    slot: Optional[int]
    """Buffer slot the chain was read from, None for fresh chains."""


@dataclass(frozen=True, eq=False)
class ChainBatch(object):
    """Stacked initial states for a batch of chains."""

    x: NDArray[np.float64]
    y: NDArray[np.int64]
    from_buffer: NDArray[np.bool_]
    slots: NDArray[np.int64]
    """Originating slot per chain, -1 for fresh chains."""


def init_chain(
    buf: ReplayBuffer, C: int, taken: Optional[AbstractSet[int]] = None
) -> ChainStart:
    """
    Take a stored chain with probability 1 - rho, else start a fresh one.

    Slots in ``taken`` are not drawn. When every slot is taken the chain
    starts fresh.
    """
    if C < 2:
        raise ArgumentError(f"Need at least two classes, got {C}")

    taken = taken or frozenset()
    free = len(buf) - len(taken)
    metrics._increment("chains_started")
    if free <= 0 or buf.rng.random() < buf.reinit_prob:
        metrics._increment("chains_reinitialized")
        x0 = buf.rng.uniform(-1.0, 1.0, size=buf.input_dim)
        y = int(buf.rng.integers(C))
        return ChainStart(x=x0, y=y, from_buffer=False, slot=None)

    metrics._increment("chains_from_buffer")
    # k-th free slot, counting past the taken ones in order
    slot = int(buf.rng.integers(free))
    for t in sorted(taken):
        if t <= slot:
            slot += 1
    x0, y = buf.entry(slot)
    return ChainStart(x=x0, y=y, from_buffer=True, slot=slot)


def init_chains(buf: ReplayBuffer, C: int, n: int) -> ChainBatch:
    """Start ``n`` chains; buffered chains in one batch never share a slot."""
    taken: set[int] = set()
    starts = []
    for _ in range(n):
        start = init_chain(buf, C, taken)
        if start.slot is not None:
            taken.add(start.slot)
        starts.append(start)
    return ChainBatch(
        x=np.stack([s.x for s in starts]) if starts else np.empty((0, buf.input_dim)),
        y=np.array([s.y for s in starts], dtype=np.int64),
        from_buffer=np.array([s.from_buffer for s in starts], dtype=bool),
        slots=np.array([-1 if s.slot is None else s.slot for s in starts], dtype=np.int64),
    )


def buffer_put(
    buf: ReplayBuffer, x: ArrayLike, y: int, from_buffer: bool, slot: Optional[int]
) -> ReplayBuffer:
    """
    Write a finished chain back.

    Chains read from the buffer replace their slot. Fresh chains are appended
    while there is room and otherwise overwrite a uniformly chosen slot.
    """
    if from_buffer:
        if slot is None or not 0 <= slot < len(buf):
            raise ArgumentError(f"Invalid buffer slot {slot} for a buffered chain")
        buf._store(slot, x, y)
    elif len(buf) < buf.capacity:
        buf._store(None, x, y)
    else:
        buf._store(int(buf.rng.integers(buf.capacity)), x, y)
    return buf


def put_chains(buf: ReplayBuffer, start: ChainBatch, x_final: ArrayLike) -> ReplayBuffer:
    finals = np.asarray(x_final, dtype=np.float64)
    for i in range(finals.shape[0]):
        slot = int(start.slots[i])
        buffer_put(
            buf,
            finals[i],
            int(start.y[i]),
            bool(start.from_buffer[i]),
            slot if slot >= 0 else None,
        )
    return buf


# -----Update rules------------------------------------------------------------

_Labels = Union[int, ArrayLike]


def _centroid_rows(m: GmmcModel, y: _Labels) -> NDArray[np.float64]:
    return m.centroids.means[np.asarray(y, dtype=np.int64)]


def staged_step(
    m: GmmcModel,
    x: ArrayLike,
    target: ArrayLike,
    step_size: float,
    gamma2: float = 1.0,
) -> NDArray[np.float64]:
    """One noiseless step x - alpha * d/dx [||phi(x) - target||^2 / (2 gamma^2)]."""
    x_arr = np.asarray(x, dtype=np.float64)
    tape = network.record(m.params, m.spec, x_arr)
    _, grad = tape.backward((tape.output - np.asarray(target)) / gamma2, need_params=False)
    return x_arr - step_size * grad


def noise_injected_step(
    m: GmmcModel,
    x: ArrayLike,
    y: _Labels,
    step_size: float,
    noise: ArrayLike,
    gamma2: float = 1.0,
) -> NDArray[np.float64]:
    """One step x - alpha * dE(x, y)/dx + (alpha / gamma) J^T z with z = ``noise`` in R^d."""
    x_arr = np.asarray(x, dtype=np.float64)
    tape = network.record(m.params, m.spec, x_arr)
    upstream = (tape.output - _centroid_rows(m, y)) / gamma2 - np.asarray(
        noise
    ) / math.sqrt(gamma2)
    _, grad = tape.backward(upstream, need_params=False)
    return x_arr - step_size * grad


def sgld_step(
    m: GmmcModel,
    x: ArrayLike,
    y: _Labels,
    step_size: float,
    noise: ArrayLike,
    gamma2: float = 1.0,
) -> NDArray[np.float64]:
    """One step x - (alpha/2) dE(x, y)/dx + alpha * eps with eps = ``noise`` in R^D."""
    x_arr = np.asarray(x, dtype=np.float64)
    tape = network.record(m.params, m.spec, x_arr)
    _, grad = tape.backward(
        (tape.output - _centroid_rows(m, y)) / gamma2, need_params=False
    )
    return x_arr - 0.5 * step_size * grad + step_size * np.asarray(noise)


# -----Chains------------------------------------------------------------------


def _sampling_gamma2(m: GmmcModel, cfg: SamplerConfig) -> float:
    if not cfg.use_estimated_gamma2:
        return 1.0
    if m.gamma2 is None:
        raise GammaNotEstimatedError("Sampler configured for estimated gamma^2, model has none")
    return m.gamma2


def _require_mode(cfg: SamplerConfig, mode: SamplingMode) -> None:
    if cfg.mode is not mode:
        raise ArgumentError(f"Sampler configured for {cfg.mode.value}, not {mode.value}")


def _check_finite(x: NDArray[np.float64], step: int) -> None:
    bad = ~np.all(np.isfinite(x), axis=-1)
    if np.any(bad):
        metrics._increment("chains_diverged", int(np.sum(bad)))
        raise DivergedChainError(step, np.flatnonzero(np.atleast_1d(bad)).tolist())


def _finish_step(x: NDArray[np.float64], step: int, cfg: SamplerConfig) -> NDArray[np.float64]:
    _check_finite(x, step)
    if cfg.clip_to_domain:
        np.clip(x, -1.0, 1.0, out=x)
    return x


def _chain_count(x: NDArray[np.float64]) -> int:
    return 1 if x.ndim == 1 else int(x.shape[0])


def staged_sample(
    m: GmmcModel,
    x0: ArrayLike,
    y: _Labels,
    cfg: SamplerConfig,
    rng: np.random.Generator,
) -> NDArray[np.float64]:
    """
    Run staged chains for cfg.num_steps steps.

    ``x0`` is a (D,) start with an int class or an (N, D) batch with (N,) classes.

    Raises:
        DivergedChainError: If any chain becomes non-finite.
    """
    _require_mode(cfg, SamplingMode.STAGED)
    gamma2 = _sampling_gamma2(m, cfg)
    x = np.array(x0, dtype=np.float64)
    means = _centroid_rows(m, y)
    target = means + math.sqrt(gamma2) * rng.standard_normal(means.shape)

    for step in range(1, cfg.num_steps + 1):
        x = _finish_step(staged_step(m, x, target, cfg.step_size, gamma2), step, cfg)

    metrics._increment("sampler_steps", cfg.num_steps * _chain_count(x))
    return x


def noise_injected_sample(
    m: GmmcModel,
    x0: ArrayLike,
    y: _Labels,
    cfg: SamplerConfig,
    rng: np.random.Generator,
) -> NDArray[np.float64]:
    """Run noise-injected chains; a fresh z ~ N(0, I) is drawn every step."""
    _require_mode(cfg, SamplingMode.NOISE_INJECTED)
    gamma2 = _sampling_gamma2(m, cfg)
    x = np.array(x0, dtype=np.float64)
    feature_shape = _centroid_rows(m, y).shape

    for step in range(1, cfg.num_steps + 1):
        noise = rng.standard_normal(feature_shape)
        x = _finish_step(
            noise_injected_step(m, x, y, cfg.step_size, noise, gamma2), step, cfg
        )

    metrics._increment("sampler_steps", cfg.num_steps * _chain_count(x))
    return x


def sgld_sample(
    m: GmmcModel,
    x0: ArrayLike,
    y: _Labels,
    cfg: SamplerConfig,
    rng: np.random.Generator,
) -> NDArray[np.float64]:
    """Run plain SGLD chains at constant step size with per-coordinate noise."""
    _require_mode(cfg, SamplingMode.SGLD)
    gamma2 = _sampling_gamma2(m, cfg)
    x = np.array(x0, dtype=np.float64)

    for step in range(1, cfg.num_steps + 1):
        noise = rng.standard_normal(x.shape)
        x = _finish_step(sgld_step(m, x, y, cfg.step_size, noise, gamma2), step, cfg)

    metrics._increment("sampler_steps", cfg.num_steps * _chain_count(x))
    return x


_SAMPLERS = {
    SamplingMode.STAGED: staged_sample,
    SamplingMode.NOISE_INJECTED: noise_injected_sample,
    SamplingMode.SGLD: sgld_sample,
}


def run_sampler(
    m: GmmcModel,
    x0: ArrayLike,
    y: _Labels,
    cfg: SamplerConfig,
    rng: np.random.Generator,
) -> NDArray[np.float64]:
    """Dispatch to the update rule named by cfg.mode."""
    return _SAMPLERS[cfg.mode](m, x0, y, cfg, rng)


# -----Per-chain failure policy------------------------------------------------

CHAIN_EXCEPTION_HANDLER = Callable[[int, Exception], bool]
"""
Signature for chain exception handlers: receives the chain's batch position
and the exception, returns True to stop or False to keep sampling.
"""

chain_exception_handler: Optional[CHAIN_EXCEPTION_HANDLER] = (
    handlers.stop_and_log_chain_exception
)
"""Policy used by sample_chains when a chain diverges."""


def set_chain_exception_handler(handler: Optional[CHAIN_EXCEPTION_HANDLER]) -> None:
    """
    Set the policy for diverged chains in sample_chains.

    Args:
        handler: Callable (chain_index, exception) -> bool returning True to
            stop sampling the remaining chains. None re-raises.
    """
    global chain_exception_handler
    chain_exception_handler = handler


@dataclass(frozen=True, eq=False)
class SampleResult(object):
    """Outcome of sample_chains."""

    samples: NDArray[np.float64]
    """(N, D) final states; rows of failed or skipped chains are NaN."""

    status: tuple[str, ...]
    """Per chain: "ok", "diverged" or "skipped"."""

    @property
    def ok(self) -> NDArray[np.bool_]:
        return np.array([s == "ok" for s in self.status], dtype=bool)


def sample_chains(
    m: GmmcModel,
    x0: ArrayLike,
    y: ArrayLike,
    cfg: SamplerConfig,
    rng: np.random.Generator,
) -> SampleResult:
    """
    Run chains one at a time so a diverging chain does not sink the batch.

    Each failure is passed to the installed chain exception handler.
    """
    starts = np.atleast_2d(np.asarray(x0, dtype=np.float64))
    labels = np.atleast_1d(np.asarray(y, dtype=np.int64))
    if starts.shape[0] != labels.shape[0]:
        raise DimensionError(f"{starts.shape[0]} starts but {labels.shape[0]} labels")

    samples = np.full_like(starts, np.nan)
    status = ["skipped"] * labels.shape[0]
    for i in range(labels.shape[0]):
        try:
            samples[i] = run_sampler(m, starts[i], int(labels[i]), cfg, rng)
            status[i] = "ok"
        except DivergedChainError as exc:
            status[i] = "diverged"
            if chain_exception_handler is None:
                raise
            if chain_exception_handler(i, exc):
                break

    return SampleResult(samples=samples, status=tuple(status))
