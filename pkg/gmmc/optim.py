"""Adam over the flat parameter vector."""

from dataclasses import dataclass

import numpy as np
from numpy.typing import NDArray

from gmmc.errors import NonFiniteParameterError
from gmmc.network import ParameterVector

__all__ = [
    "ADAM_BETA1",
    "ADAM_BETA2",
    "ADAM_EPS",
    "AdamState",
    "adam_init",
    "adam_step",
]

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8


@dataclass(frozen=True, eq=False)
class AdamState(object):
    """First and second moment estimates plus the step counter."""

    first_moment: NDArray[np.float64]
    second_moment: NDArray[np.float64]
    step: int = 0


def adam_init(params: ParameterVector) -> AdamState:
    return AdamState(
        first_moment=np.zeros_like(params.values),
        second_moment=np.zeros_like(params.values),
    )


def adam_step(
    params: ParameterVector,
    grad: ParameterVector,
    state: AdamState,
    learning_rate: float,
) -> tuple[ParameterVector, AdamState]:
    """
    One bias-corrected Adam update on a loss to be minimised.

    Raises:
        NonFiniteParameterError: If the update produces NaN or inf.
    """
    step = state.step + 1
    first = ADAM_BETA1 * state.first_moment + (1.0 - ADAM_BETA1) * grad.values
    second = ADAM_BETA2 * state.second_moment + (1.0 - ADAM_BETA2) * grad.values**2
    first_hat = first / (1.0 - ADAM_BETA1**step)
    second_hat = second / (1.0 - ADAM_BETA2**step)

    values = params.values - learning_rate * first_hat / (np.sqrt(second_hat) + ADAM_EPS)
    if not np.all(np.isfinite(values)):
        raise NonFiniteParameterError(f"Adam step {step} produced non-finite parameters")

    return params.replace_values(values), AdamState(first, second, step)
