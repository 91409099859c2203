"""
Exception types shared across the gmmc package.

Every error raised on purpose by the library derives from GmmcError so callers
can catch the whole family at once. Errors that describe bad caller input
also derive from the matching builtin (ValueError, IndexError) so generic
handlers keep working.
"""

from typing import TYPE_CHECKING
from typing import Optional
from typing import Sequence

if TYPE_CHECKING:
    from gmmc.training import TrainReport

__all__ = [
    "GmmcError",
    "ArgumentError",
    "DimensionError",
    "ClassIndexError",
    "GammaNotEstimatedError",
    "DegenerateVarianceError",
    "EmptyDatasetError",
    "DatasetFormatError",
    "CheckpointError",
    "ConfigError",
    "AttackError",
    "PreconditionError",
    "DivergenceError",
    "DivergedChainError",
    "NonFiniteLossError",
    "NonFiniteParameterError",
    "TrainingDivergedError",
]


class GmmcError(Exception):
    """Base class for all errors raised by gmmc."""


class ArgumentError(GmmcError, ValueError):
    """Raised when a scalar argument is outside its allowed range."""


class DimensionError(GmmcError, ValueError):
    """Raised when an array does not have the expected shape."""


class ClassIndexError(GmmcError, IndexError):
    """Raised when a class index is outside [0, C)."""


class GammaNotEstimatedError(GmmcError):
    """Raised when an operation needs the estimated variance but it is unset."""


class DegenerateVarianceError(GmmcError):
    """Raised when the variance estimate comes out as exactly zero."""


class EmptyDatasetError(GmmcError, ValueError):
    """Raised when an operation needs at least one example."""


class DatasetFormatError(GmmcError):
    """Raised when a dataset file cannot be parsed."""


class CheckpointError(GmmcError):
    """Raised when a checkpoint container is malformed or fails its checksum."""


class ConfigError(GmmcError, ValueError):
    """Raised when an experiment configuration is invalid."""


class AttackError(GmmcError):
    """Raised when an adversarial attack hits a non-finite gradient."""


class PreconditionError(GmmcError):
    """Raised when an operation's documented precondition does not hold."""


class DivergenceError(GmmcError):
    """Base class for numerical divergence during sampling or training."""


class DivergedChainError(DivergenceError):
    """Raised when a sampler chain produces non-finite values."""

    def __init__(self, step: int, chains: Sequence[int] = ()) -> None:
        self.step = step
        """1-based sampler step at which the chain left the finite range."""

        self.chains = tuple(chains)
        """Batch positions of the chains that diverged."""

        super().__init__(
            f"Sampler chain diverged at step {step} (chains: {list(self.chains)})"
        )


class NonFiniteLossError(DivergenceError):
    """Raised when a training loss is NaN or infinite."""

    def __init__(
        self, loss: float, epoch: Optional[int] = None, batch_index: Optional[int] = None
    ) -> None:
        self.loss = loss
        self.epoch = epoch
        self.batch_index = batch_index
        super().__init__(
            f"Non-finite training loss {loss} (epoch {epoch}, batch {batch_index})"
        )


class NonFiniteParameterError(DivergenceError):
    """Raised when an optimizer update leaves non-finite parameters."""


class TrainingDivergedError(DivergenceError):
    """Raised by fit when a step diverges; carries the partial report."""

    def __init__(
        self, epoch: int, batch_index: int, report: "TrainReport", cause: Exception
    ) -> None:
        self.epoch = epoch
        self.batch_index = batch_index
        self.report = report
        """Records for every epoch completed before the failure."""

        super().__init__(
            f"Training diverged at epoch {epoch}, batch {batch_index}: {cause}"
        )
