"""
Pre-designed Max-Mahalanobis centroids.

The centroid set places C class means on a sphere of radius S in R^d so that
every pair has the same, maximally negative, cosine -1/(C-1). The means are
built deterministically from the canonical basis and never trained.

Centroid sets serialise to a small versioned text format::

    mmd v1 C d S
    <d floats>      # one line per class, 17 significant digits
"""

import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Union

import numpy as np
from numpy.typing import ArrayLike
from numpy.typing import NDArray

from gmmc.errors import ArgumentError
from gmmc.errors import DatasetFormatError
from gmmc.errors import DimensionError

__all__ = [
    "DEFAULT_SCALE",
    "CentroidSet",
    "generate_opt_means",
    "pairwise_cosines",
    "squared_distances",
    "nearest_centroid",
    "format_centroids",
    "parse_centroids",
    "save_centroids",
    "load_centroids",
]

logger = logging.getLogger(__name__)

DEFAULT_SCALE = 10.0
"""Sphere radius S used unless a caller asks for another one."""

_FORMAT_TAG = "mmd"
_FORMAT_VERSION = "v1"
_RESIDUAL_TOLERANCE = 1e-9


@dataclass(frozen=True, eq=False)
class CentroidSet(object):
    """Immutable set of C pre-designed class means in R^d."""

    num_classes: int
    """Number of classes C."""

    feature_dim: int
    """Dimension d of the feature space."""

    scale: float
    """Norm S shared by every mean."""

    means: NDArray[np.float64]
    """Read-only (C, d) array; row k is the mean of class k."""

    def __post_init__(self) -> None:
        if self.means.shape != (self.num_classes, self.feature_dim):
            raise DimensionError(
                f"Centroid means have shape {self.means.shape}, expected "
                f"({self.num_classes}, {self.feature_dim})"
            )
        self.means.flags.writeable = False


def generate_opt_means(C: int, d: int, S: float = DEFAULT_SCALE) -> CentroidSet:
    """
    Build the Max-Mahalanobis means for C classes in R^d with norm S.

    Row 0 starts as the first basis vector. Each following row i fills its
    first i coordinates so that its inner product with every earlier row is
    -1/(C-1), then takes the remaining unit norm on coordinate i. When
    C = d + 1 the last row has no coordinate left and its residual norm is
    zero by construction.

    Raises:
        ArgumentError: If C < 2, d < 1 or S <= 0.
        DimensionError: If C > d + 1.
    """
    if C < 2 or d < 1 or not S > 0 or not math.isfinite(S):
        raise ArgumentError(
            f"generate_opt_means needs C >= 2, d >= 1 and S > 0, got C={C}, d={d}, S={S}"
        )
    if C > d + 1:
        raise DimensionError(
            f"Cannot place {C} equiangular means in {d} dimensions (need C <= d + 1)"
        )

    means = np.zeros((C, d), dtype=np.float64)
    means[0, 0] = 1.0
    for i in range(1, C):
        for j in range(i):
            inner = float(np.dot(means[i], means[j]))
            means[i, j] = -(1.0 + inner * (C - 1)) / (means[j, j] * (C - 1))

        residual = 1.0 - float(np.dot(means[i], means[i]))
        if i < d:
            means[i, i] = math.sqrt(max(residual, 0.0))
        elif abs(residual) > _RESIDUAL_TOLERANCE:
            raise ArithmeticError(
                f"Residual norm {residual} for mean {i} should vanish when C = d + 1"
            )

    means *= S
    return CentroidSet(num_classes=C, feature_dim=d, scale=float(S), means=means)


def pairwise_cosines(cs: CentroidSet) -> NDArray[np.float64]:
    """Return the (C, C) matrix of cosines between centroids; diagonal is 1."""
    norms = np.linalg.norm(cs.means, axis=1)
    cosines = (cs.means @ cs.means.T) / np.outer(norms, norms)
    np.fill_diagonal(cosines, 1.0)
    return cosines


def squared_distances(cs: CentroidSet, z: ArrayLike) -> NDArray[np.float64]:
    """
    Squared Euclidean distance from feature vectors to every centroid.

    Args:
        z: A (d,) vector or an (N, d) batch.
    Returns:
        A (C,) or (N, C) array.
    """
    z_arr = np.asarray(z, dtype=np.float64)
    if z_arr.ndim not in (1, 2) or z_arr.shape[-1] != cs.feature_dim:
        raise DimensionError(
            f"Expected features with trailing dimension {cs.feature_dim}, "
            f"got shape {z_arr.shape}"
        )
    residuals = z_arr[..., np.newaxis, :] - cs.means
    return np.einsum("...cd,...cd->...c", residuals, residuals)


def nearest_centroid(cs: CentroidSet, z: ArrayLike) -> int:
    """Index of the closest centroid to a (d,) vector; ties go to the lowest index."""
    z_arr = np.asarray(z, dtype=np.float64)
    if z_arr.shape != (cs.feature_dim,):
        raise DimensionError(
            f"Expected a vector of length {cs.feature_dim}, got shape {z_arr.shape}"
        )
    return int(np.argmin(squared_distances(cs, z_arr)))


# -----Text format-------------------------------------------------------------


def format_centroids(cs: CentroidSet) -> str:
    """Render a centroid set in the versioned text format."""
    lines = [
        f"{_FORMAT_TAG} {_FORMAT_VERSION} {cs.num_classes} {cs.feature_dim} "
        f"{cs.scale:.17g}"
    ]
    for row in cs.means:
        lines.append(" ".join(f"{value:.17g}" for value in row))
    return "\n".join(lines) + "\n"


def parse_centroids(text: str) -> CentroidSet:
    """Parse the versioned text format back into a CentroidSet."""
    lines = [line for line in text.splitlines() if line.strip()]
    if not lines:
        raise DatasetFormatError("Empty centroid document")

    header = lines[0].split()
    if len(header) != 5 or header[0] != _FORMAT_TAG:
        raise DatasetFormatError(f"Bad centroid header: {lines[0]!r}")
    if header[1] != _FORMAT_VERSION:
        raise DatasetFormatError(f"Unsupported centroid format version {header[1]!r}")

    try:
        num_classes, feature_dim = int(header[2]), int(header[3])
        scale = float(header[4])
        rows = [[float(token) for token in line.split()] for line in lines[1:]]
    except ValueError as exc:
        raise DatasetFormatError(f"Malformed centroid document: {exc}") from exc

    means = np.array(rows, dtype=np.float64).reshape(len(rows), -1)
    if means.shape != (num_classes, feature_dim):
        raise DatasetFormatError(
            f"Centroid body has shape {means.shape}, header says "
            f"({num_classes}, {feature_dim})"
        )
    return CentroidSet(
        num_classes=num_classes, feature_dim=feature_dim, scale=scale, means=means
    )


def save_centroids(cs: CentroidSet, path: Union[str, Path]) -> None:
    Path(path).write_text(format_centroids(cs), encoding="utf-8")
    logger.info(f"Wrote {cs.num_classes} centroids to {path}")


def load_centroids(path: Union[str, Path]) -> CentroidSet:
    return parse_centroids(Path(path).read_text(encoding="utf-8"))
