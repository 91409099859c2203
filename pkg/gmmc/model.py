"""
The generative Max-Mahalanobis classifier.

A model couples a feature extractor phi with pre-designed centroids mu. The
energy of a labelled input is

    E(x, y) = ||phi(x) - mu_y||^2 / (2 gamma^2)

and the class posterior is the softmax of -E over classes. Training runs with
gamma^2 = 1; the variance is estimated once afterwards and then used for
posteriors and out-of-distribution scores.

Models are immutable. Anything that "changes" a model returns a new value.
"""

import dataclasses
import enum
import logging
import math
from dataclasses import dataclass
from typing import TYPE_CHECKING
from typing import Optional

import numpy as np
from numpy.typing import ArrayLike
from numpy.typing import NDArray
from scipy.special import logsumexp
from scipy.special import softmax

from gmmc import network
from gmmc.centroids import CentroidSet
from gmmc.centroids import squared_distances
from gmmc.errors import ArgumentError
from gmmc.errors import ClassIndexError
from gmmc.errors import DegenerateVarianceError
from gmmc.errors import DimensionError
from gmmc.errors import EmptyDatasetError
from gmmc.errors import GammaNotEstimatedError

if TYPE_CHECKING:
    from gmmc.data import LabeledDataset

__all__ = [
    "GammaMode",
    "GmmcModel",
    "build_model",
    "with_gamma2",
    "features",
    "energy",
    "energies",
    "posterior",
    "classify",
    "accuracy",
    "estimate_gamma2",
    "logpx_score",
    "approx_mass_score",
    "predictive_score",
]

logger = logging.getLogger(__name__)

_EVAL_CHUNK = 4096


class GammaMode(str, enum.Enum):
    """Which variance an energy evaluation uses."""

    UNIT = "unit"
    """gamma^2 = 1, as during training."""

    ESTIMATED = "estimated"
    """The post-training estimate stored on the model."""


@dataclass(frozen=True, eq=False)
class GmmcModel(object):
    """Feature extractor, centroids, and the (optional) estimated variance."""

    spec: network.NetworkSpec
    params: network.ParameterVector
    centroids: CentroidSet
    gamma2: Optional[float] = None
    """Estimated isotropic variance, or None before estimation."""

    def __post_init__(self) -> None:
        if self.centroids.feature_dim != self.spec.feature_dim:
            raise DimensionError(
                f"Centroids live in R^{self.centroids.feature_dim} but the network "
                f"outputs R^{self.spec.feature_dim}"
            )
        if self.gamma2 is not None and not (
            self.gamma2 > 0 and math.isfinite(self.gamma2)
        ):
            raise ArgumentError(f"gamma2 must be positive and finite: {self.gamma2}")

    @property
    def num_classes(self) -> int:
        return self.centroids.num_classes

    @property
    def input_dim(self) -> int:
        return self.spec.input_dim

    def with_params(self, params: network.ParameterVector) -> "GmmcModel":
        return dataclasses.replace(self, params=params)


def build_model(spec: network.NetworkSpec, centroids: CentroidSet) -> GmmcModel:
    """Freshly initialised model with unestimated variance."""
    return GmmcModel(spec=spec, params=network.init_params(spec), centroids=centroids)


def with_gamma2(m: GmmcModel, gamma2: Optional[float]) -> GmmcModel:
    return dataclasses.replace(m, gamma2=gamma2)


def _gamma2(m: GmmcModel, mode: GammaMode) -> float:
    if GammaMode(mode) is GammaMode.UNIT:
        return 1.0
    if m.gamma2 is None:
        raise GammaNotEstimatedError(
            "This operation needs the estimated gamma^2; run estimate_gamma2 first"
        )
    return m.gamma2


def features(m: GmmcModel, x: ArrayLike) -> NDArray[np.float64]:
    """phi(x) for a single input or a batch."""
    return network.forward(m.params, m.spec, x)


def energies(
    m: GmmcModel, x: ArrayLike, gamma2_mode: GammaMode = GammaMode.ESTIMATED
) -> NDArray[np.float64]:
    """Energies against every class: (C,) for one input, (N, C) for a batch."""
    gamma2 = _gamma2(m, gamma2_mode)
    return squared_distances(m.centroids, features(m, x)) / (2.0 * gamma2)


def _check_class(m: GmmcModel, y: int) -> None:
    if not 0 <= y < m.num_classes:
        raise ClassIndexError(f"Class index {y} outside [0, {m.num_classes})")


def energy(
    m: GmmcModel, x: ArrayLike, y: int, gamma2_mode: GammaMode = GammaMode.UNIT
) -> float:
    """E(x, y) = ||phi(x) - mu_y||^2 / (2 gamma^2) for a single (D,) input."""
    _check_class(m, y)
    gamma2 = _gamma2(m, gamma2_mode)
    residual = features(m, x) - m.centroids.means[y]
    if residual.ndim != 1:
        raise DimensionError("energy takes a single input; use energies for batches")
    return float(residual @ residual) / (2.0 * gamma2)


def posterior(m: GmmcModel, x: ArrayLike) -> NDArray[np.float64]:
    """Class probabilities p(y|x) using the estimated variance."""
    return np.asarray(softmax(-energies(m, x), axis=-1), dtype=np.float64)


def classify(m: GmmcModel, x: ArrayLike) -> NDArray[np.int64] | int:
    """
    Closest-centroid class in feature space; ties go to the lowest index.

    The decision does not depend on gamma^2, so this works on untrained and
    unestimated models alike. Returns an int for a (D,) input and an int array
    for a batch.
    """
    distances = squared_distances(m.centroids, features(m, x))
    labels = np.argmin(distances, axis=-1)
    if np.ndim(labels) == 0:
        return int(labels)
    return labels.astype(np.int64)


def accuracy(m: GmmcModel, dataset: "LabeledDataset") -> float:
    """Fraction of examples whose closest centroid is their label."""
    if len(dataset) == 0:
        raise EmptyDatasetError(f"Dataset '{dataset.name}' is empty")
    correct = 0
    for start in range(0, len(dataset), _EVAL_CHUNK):
        stop = start + _EVAL_CHUNK
        predicted = classify(m, dataset.inputs[start:stop])
        correct += int(np.sum(predicted == dataset.labels[start:stop]))
    return correct / len(dataset)


def estimate_gamma2(m: GmmcModel, train: "LabeledDataset") -> float:
    """
    gamma^2 = (1/d) * mean_i ||phi(x_i) - mu_{y_i}||^2 over the training set.

    The sum is accumulated with math.fsum so the estimate is independent of
    example order.

    Raises:
        EmptyDatasetError: If ``train`` has no examples.
        DegenerateVarianceError: If every feature sits exactly on its centroid.
    """
    if len(train) == 0:
        raise EmptyDatasetError(f"Cannot estimate gamma^2 from empty '{train.name}'")

    partial_sums = []
    for start in range(0, len(train), _EVAL_CHUNK):
        stop = start + _EVAL_CHUNK
        residuals = (
            features(m, train.inputs[start:stop])
            - m.centroids.means[train.labels[start:stop]]
        )
        partial_sums.extend(np.einsum("nd,nd->n", residuals, residuals).tolist())

    gamma2 = math.fsum(partial_sums) / (len(train) * m.spec.feature_dim)
    if gamma2 == 0.0:
        raise DegenerateVarianceError(
            "Every training feature coincides with its centroid; gamma^2 would be 0"
        )
    logger.info(f"Estimated gamma^2 = {gamma2:.6g} from {len(train)} examples")
    return gamma2


# -----Out-of-distribution scores----------------------------------------------


def logpx_score(m: GmmcModel, x: ArrayLike) -> NDArray[np.float64] | float:
    """Unnormalised log-density log sum_y exp(-E(x, y)), computed with a shifted log-sum-exp."""
    scores = logsumexp(-energies(m, x), axis=-1)
    if np.ndim(scores) == 0:
        return float(scores)
    return np.asarray(scores, dtype=np.float64)


def _logpx_input_gradient(m: GmmcModel, x: ArrayLike) -> NDArray[np.float64]:
    """d logpx / dx via one vector-Jacobian product."""
    gamma2 = _gamma2(m, GammaMode.ESTIMATED)
    tape = network.record(m.params, m.spec, x)
    phi = tape.output
    probs = softmax(-squared_distances(m.centroids, phi) / (2.0 * gamma2), axis=-1)
    # -sum_y p(y|x) (phi - mu_y) / gamma^2
    upstream = -(phi - probs @ m.centroids.means) / gamma2
    _, input_grad = tape.backward(upstream, need_params=False)
    return input_grad


def approx_mass_score(m: GmmcModel, x: ArrayLike) -> NDArray[np.float64] | float:
    """Negative norm of the input gradient of logpx_score; always <= 0."""
    grad = _logpx_input_gradient(m, x)
    scores = -np.linalg.norm(grad, axis=-1)
    if np.ndim(scores) == 0:
        return float(scores)
    return np.asarray(scores, dtype=np.float64)


def predictive_score(m: GmmcModel, x: ArrayLike) -> NDArray[np.float64] | float:
    """Largest posterior probability."""
    scores = np.max(posterior(m, x), axis=-1)
    if np.ndim(scores) == 0:
        return float(scores)
    return np.asarray(scores, dtype=np.float64)
