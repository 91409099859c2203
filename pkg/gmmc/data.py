"""
Labelled datasets: synthetic generation, IDX ingestion, splitting and
in/out-of-distribution pairing.

Every dataset holds inputs normalised to [-1, 1]^D, which is also the domain
the sampler initialises its chains in. Class labels are 0-based.
"""

import csv
import logging
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable
from typing import Optional
from typing import Union

import numpy as np
from numpy.typing import ArrayLike
from numpy.typing import NDArray

from gmmc.centroids import generate_opt_means
from gmmc.errors import ArgumentError
from gmmc.errors import DatasetFormatError
from gmmc.errors import DimensionError
from gmmc.errors import EmptyDatasetError

__all__ = [
    "IDX_IMAGES_MAGIC",
    "IDX_LABELS_MAGIC",
    "LabeledDataset",
    "synth_mixture",
    "load_idx_pair",
    "write_idx_pair",
    "split",
    "make_ood_pair",
    "save_csv",
    "load_csv",
]

logger = logging.getLogger(__name__)

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801

_PIXEL_HALF_RANGE = 127.5


@dataclass(frozen=True, eq=False)
class LabeledDataset(object):
    """Immutable collection of (input, label) pairs."""

    inputs: NDArray[np.float64]
    """(N, D) read-only array with entries in [-1, 1]."""

    labels: NDArray[np.int64]
    """(N,) read-only array of class indices in [0, num_classes)."""

    num_classes: int
    name: str = "dataset"
    source: str = "memory"
    """Where the data came from, e.g. a generator description or a file path."""

    def __post_init__(self) -> None:
        inputs = np.ascontiguousarray(self.inputs, dtype=np.float64)
        labels = np.ascontiguousarray(self.labels, dtype=np.int64)
        if inputs.ndim != 2 or labels.shape != (inputs.shape[0],):
            raise DimensionError(
                f"inputs {inputs.shape} and labels {labels.shape} are not parallel"
            )
        if self.num_classes < 1:
            raise ArgumentError(f"num_classes must be positive: {self.num_classes}")
        if inputs.size and (
            not np.all(np.isfinite(inputs)) or np.max(np.abs(inputs)) > 1.0
        ):
            raise ArgumentError(f"Dataset '{self.name}' has inputs outside [-1, 1]")
        if labels.size and (labels.min() < 0 or labels.max() >= self.num_classes):
            raise ArgumentError(
                f"Dataset '{self.name}' has labels outside [0, {self.num_classes})"
            )
        inputs.flags.writeable = False
        labels.flags.writeable = False
        object.__setattr__(self, "inputs", inputs)
        object.__setattr__(self, "labels", labels)

    def __len__(self) -> int:
        return int(self.labels.shape[0])

    @property
    def input_dim(self) -> int:
        return int(self.inputs.shape[1])

    def class_counts(self) -> NDArray[np.int64]:
        return np.bincount(self.labels, minlength=self.num_classes).astype(np.int64)

    def subset(self, indices: ArrayLike, name: Optional[str] = None) -> "LabeledDataset":
        idx = np.asarray(indices, dtype=np.int64)
        return LabeledDataset(
            inputs=self.inputs[idx],
            labels=self.labels[idx],
            num_classes=self.num_classes,
            name=name or self.name,
            source=self.source,
        )


# -----Generators--------------------------------------------------------------


def synth_mixture(
    C: int,
    D: int,
    n_per_class: int,
    spread: float,
    seed: int,
    name: str = "synth",
) -> LabeledDataset:
    """
    Isotropic Gaussian mixture around Max-Mahalanobis anchors in input space.

    Anchors are unit-norm equiangular vectors. Class k draws n_per_class
    points from N(a_k, spread^2 I); the whole set is then scaled by one common
    factor so the largest coordinate magnitude is 1, keeping it in [-1, 1]^D
    without distorting class geometry. Examples are ordered class by class.
    """
    if n_per_class < 1:
        raise ArgumentError(f"n_per_class must be positive: {n_per_class}")
    if spread < 0:
        raise ArgumentError(f"spread must be non-negative: {spread}")

    anchors = generate_opt_means(C, D, 1.0).means
    rng = np.random.default_rng(seed)
    labels = np.repeat(np.arange(C, dtype=np.int64), n_per_class)
    points = anchors[labels] + spread * rng.standard_normal((labels.size, D))
    points = points / np.max(np.abs(points))

    return LabeledDataset(
        inputs=points,
        labels=labels,
        num_classes=C,
        name=name,
        source=f"synth_mixture(C={C}, D={D}, n={n_per_class}, spread={spread}, seed={seed})",
    )


# -----IDX files---------------------------------------------------------------


def _read_idx(path: Path, magic: int, ndim: int) -> tuple[tuple[int, ...], bytes]:
    raw = path.read_bytes()
    if len(raw) < 4:
        raise DatasetFormatError(f"{path} is too short for an IDX magic number")
    (found_magic,) = struct.unpack(">I", raw[:4])
    if found_magic != magic:
        raise DatasetFormatError(
            f"Magic number mismatch in {path}: 0x{found_magic:08x}, expected 0x{magic:08x}"
        )

    header_size = 4 * (1 + ndim)
    if len(raw) < header_size:
        raise DatasetFormatError(f"{path} is too short for an IDX header")
    dims = struct.unpack(f">{ndim}I", raw[4:header_size])

    payload = raw[header_size:]
    expected = int(np.prod(dims, dtype=np.int64))
    if len(payload) < expected:
        raise DatasetFormatError(
            f"{path} is truncated: {len(payload)} payload bytes, expected {expected}"
        )
    return tuple(dims), payload[:expected]


def load_idx_pair(
    images_path: Union[str, Path],
    labels_path: Union[str, Path],
    num_classes: Optional[int] = None,
    name: Optional[str] = None,
) -> LabeledDataset:
    """
    Read an IDX image file and its label file.

    Pixels are mapped from [0, 255] to [-1, 1] by x / 127.5 - 1 and flattened
    row-major. Label bytes are used as 0-based class indices. ``num_classes``
    defaults to the largest label plus one.
    """
    images_path, labels_path = Path(images_path), Path(labels_path)
    (count, rows, cols), pixels = _read_idx(images_path, IDX_IMAGES_MAGIC, 3)
    (label_count,), label_bytes = _read_idx(labels_path, IDX_LABELS_MAGIC, 1)
    if count != label_count:
        raise DatasetFormatError(
            f"{images_path} holds {count} images but {labels_path} holds {label_count} labels"
        )
    if count == 0:
        raise EmptyDatasetError(f"{images_path} holds no images")

    inputs = (
        np.frombuffer(pixels, dtype=np.uint8).reshape(count, rows * cols) / _PIXEL_HALF_RANGE
        - 1.0
    )
    labels = np.frombuffer(label_bytes, dtype=np.uint8).astype(np.int64)
    logger.info(f"Loaded {count} {rows}x{cols} images from {images_path}")
    return LabeledDataset(
        inputs=inputs,
        labels=labels,
        num_classes=num_classes if num_classes is not None else int(labels.max()) + 1,
        name=name or images_path.stem,
        source=str(images_path),
    )


def write_idx_pair(
    ds: LabeledDataset,
    images_path: Union[str, Path],
    labels_path: Union[str, Path],
    image_shape: Optional[tuple[int, int]] = None,
) -> None:
    """
    Write a dataset as IDX files, inverting the pixel map of load_idx_pair.

    Inputs are quantised to the nearest pixel level, so a dataset read from
    IDX files writes back byte for byte.
    """
    rows, cols = image_shape or (1, ds.input_dim)
    if rows * cols != ds.input_dim:
        raise DimensionError(f"Image shape {rows}x{cols} does not hold {ds.input_dim} values")
    if ds.num_classes > 256:
        raise ArgumentError("IDX labels are single bytes; at most 256 classes")

    pixels = np.clip(np.rint((ds.inputs + 1.0) * _PIXEL_HALF_RANGE), 0, 255).astype(np.uint8)
    Path(images_path).write_bytes(
        struct.pack(">4I", IDX_IMAGES_MAGIC, len(ds), rows, cols) + pixels.tobytes()
    )
    Path(labels_path).write_bytes(
        struct.pack(">2I", IDX_LABELS_MAGIC, len(ds)) + ds.labels.astype(np.uint8).tobytes()
    )


# -----Splitting and pairing---------------------------------------------------


def split(
    ds: LabeledDataset, test_fraction: float, seed: int
) -> tuple[LabeledDataset, LabeledDataset]:
    """
    Stratified train/test split.

    Each class contributes round(test_fraction * count) examples to the test
    set, clamped so both sides keep at least one example of the class.
    Examples keep their original relative order on each side.
    """
    if not 0.0 < test_fraction < 1.0:
        raise ArgumentError(f"test_fraction must be in (0, 1), got {test_fraction}")

    rng = np.random.default_rng(seed)
    test_indices: list[NDArray[np.int64]] = []
    for label in range(ds.num_classes):
        members = np.flatnonzero(ds.labels == label)
        if members.size == 0:
            continue
        if members.size < 2:
            raise ArgumentError(
                f"Class {label} has {members.size} example(s); splitting needs at least 2"
            )
        n_test = min(max(int(round(test_fraction * members.size)), 1), members.size - 1)
        test_indices.append(rng.permutation(members)[:n_test])

    is_test = np.zeros(len(ds), dtype=bool)
    if test_indices:
        is_test[np.concatenate(test_indices)] = True
    return (
        ds.subset(np.flatnonzero(~is_test), name=f"{ds.name}-train"),
        ds.subset(np.flatnonzero(is_test), name=f"{ds.name}-test"),
    )


def make_ood_pair(
    ds: LabeledDataset, held_out_classes: Iterable[int]
) -> tuple[LabeledDataset, LabeledDataset]:
    """
    Split a dataset into in-distribution and held-out classes.

    The in-distribution set is relabelled densely from 0 preserving label
    order; the out set keeps its original labels.
    """
    held_out = sorted(set(int(c) for c in held_out_classes))
    if not held_out or len(held_out) >= ds.num_classes:
        raise ArgumentError(
            f"held_out_classes must be a non-empty proper subset of "
            f"[0, {ds.num_classes}), got {held_out}"
        )
    if held_out[0] < 0 or held_out[-1] >= ds.num_classes:
        raise ArgumentError(f"held_out_classes {held_out} outside [0, {ds.num_classes})")

    kept = [label for label in range(ds.num_classes) if label not in held_out]
    remap = np.full(ds.num_classes, -1, dtype=np.int64)
    remap[kept] = np.arange(len(kept))

    is_out = np.isin(ds.labels, held_out)
    in_idx = np.flatnonzero(~is_out)
    out_set = ds.subset(np.flatnonzero(is_out), name=f"{ds.name}-out")
    in_set = LabeledDataset(
        inputs=ds.inputs[in_idx],
        labels=remap[ds.labels[in_idx]],
        num_classes=len(kept),
        name=f"{ds.name}-in",
        source=ds.source,
    )
    return in_set, out_set


# -----CSV---------------------------------------------------------------------


def save_csv(ds: LabeledDataset, path: Union[str, Path]) -> None:
    """Write ``label,x1,...,xD`` rows with a header line."""
    with open(path, "w", newline="", encoding="utf-8") as handle:
        writer = csv.writer(handle)
        writer.writerow(["label"] + [f"x{i + 1}" for i in range(ds.input_dim)])
        for label, row in zip(ds.labels, ds.inputs):
            writer.writerow([int(label)] + [f"{value:.17g}" for value in row])


def load_csv(
    path: Union[str, Path], num_classes: Optional[int] = None, name: Optional[str] = None
) -> LabeledDataset:
    path = Path(path)
    with open(path, newline="", encoding="utf-8") as handle:
        reader = csv.reader(row for row in handle if not row.startswith("#"))
        header = next(reader, None)
        if header is None or header[0] != "label":
            raise DatasetFormatError(f"{path} does not start with a 'label,...' header")
        try:
            rows = [(int(row[0]), [float(v) for v in row[1:]]) for row in reader if row]
        except ValueError as exc:
            raise DatasetFormatError(f"Malformed row in {path}: {exc}") from exc

    if not rows:
        raise EmptyDatasetError(f"{path} holds no examples")
    labels = np.array([label for label, _ in rows], dtype=np.int64)
    inputs = np.array([values for _, values in rows], dtype=np.float64)
    return LabeledDataset(
        inputs=inputs,
        labels=labels,
        num_classes=num_classes if num_classes is not None else int(labels.max()) + 1,
        name=name or path.stem,
        source=str(path),
    )
