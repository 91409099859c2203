"""
Versioned binary checkpoints.

Layout, all integers and floats little-endian::

    b"GMMC"  u32 version  u32 flags
    spec:    u32 input_dim  u32 num_layers  u32 widths[num_layers]
             u8 activation codes[num_layers - 1]  u64 init_seed
    params:  u64 count  f64 values[count]
    [flags & CENTROIDS]  u32 C  u32 d  f64 scale  f64 means[C * d]
    [flags & GAMMA2]     f64 gamma2
    [flags & BUFFER]     u64 capacity  u32 input_dim  f64 reinit_prob
                         u64 rng_seed  u64 count  f64 xs[count * input_dim]
                         u32 labels[count]
    u32 crc32 of every byte after the magic

A restored replay buffer keeps its entries and seed; its generator restarts
from that seed.
"""

import logging
import struct
import zlib
from dataclasses import dataclass
from pathlib import Path
from typing import Optional
from typing import Union

import numpy as np
from numpy.typing import NDArray

from gmmc.centroids import CentroidSet
from gmmc.errors import CheckpointError
from gmmc.errors import GmmcError
from gmmc.model import GmmcModel
from gmmc.network import Activation
from gmmc.network import NetworkSpec
from gmmc.network import ParameterVector
from gmmc.network import parameter_layout
from gmmc.sampler import ReplayBuffer

__all__ = [
    "CHECKPOINT_MAGIC",
    "CHECKPOINT_VERSION",
    "Checkpoint",
    "save_network",
    "save_checkpoint",
    "load_checkpoint",
]

logger = logging.getLogger(__name__)

CHECKPOINT_MAGIC = b"GMMC"
CHECKPOINT_VERSION = 1

_FLAG_CENTROIDS = 1
_FLAG_GAMMA2 = 2
_FLAG_BUFFER = 4

_ACTIVATION_CODES = {
    Activation.TANH: 0,
    Activation.RELU: 1,
    Activation.IDENTITY: 2,
}
_CODE_ACTIVATIONS = {code: act for act, code in _ACTIVATION_CODES.items()}


@dataclass(frozen=True, eq=False)
class Checkpoint(object):
    """Everything a checkpoint file can hold."""

    spec: NetworkSpec
    params: ParameterVector
    centroids: Optional[CentroidSet] = None
    gamma2: Optional[float] = None
    buffer: Optional[ReplayBuffer] = None

    def model(self) -> GmmcModel:
        """
        Raises:
            CheckpointError: If the file held only a network.
        """
        if self.centroids is None:
            raise CheckpointError("Checkpoint has no centroid block; cannot build a model")
        return GmmcModel(
            spec=self.spec, params=self.params, centroids=self.centroids, gamma2=self.gamma2
        )


# -----Writing-----------------------------------------------------------------


def _encode_spec(spec: NetworkSpec) -> bytes:
    parts = [
        struct.pack("<II", spec.input_dim, spec.num_layers),
        struct.pack(f"<{spec.num_layers}I", *spec.widths),
        bytes(_ACTIVATION_CODES[a] for a in spec.activations),
        struct.pack("<Q", spec.init_seed),
    ]
    return b"".join(parts)


def _encode_floats(values: NDArray[np.float64]) -> bytes:
    return np.ascontiguousarray(values, dtype="<f8").tobytes()


def _encode(
    spec: NetworkSpec,
    params: ParameterVector,
    centroids: Optional[CentroidSet],
    gamma2: Optional[float],
    buffer: Optional[ReplayBuffer],
) -> bytes:
    flags = 0
    payload = [_encode_spec(spec), struct.pack("<Q", len(params)), _encode_floats(params.values)]

    if centroids is not None:
        flags |= _FLAG_CENTROIDS
        payload.append(
            struct.pack("<IId", centroids.num_classes, centroids.feature_dim, centroids.scale)
        )
        payload.append(_encode_floats(centroids.means.ravel()))
    if gamma2 is not None:
        flags |= _FLAG_GAMMA2
        payload.append(struct.pack("<d", gamma2))
    if buffer is not None:
        flags |= _FLAG_BUFFER
        xs, ys = buffer.as_arrays()
        payload.append(
            struct.pack(
                "<QIdQQ",
                buffer.capacity,
                buffer.input_dim,
                buffer.reinit_prob,
                buffer.rng_seed,
                len(buffer),
            )
        )
        payload.append(_encode_floats(xs.ravel()))
        payload.append(np.asarray(ys, dtype="<u4").tobytes())

    body = struct.pack("<II", CHECKPOINT_VERSION, flags) + b"".join(payload)
    return CHECKPOINT_MAGIC + body + struct.pack("<I", zlib.crc32(body))


def save_network(
    path: Union[str, Path], spec: NetworkSpec, params: ParameterVector
) -> None:
    """Write a network-only checkpoint."""
    Path(path).write_bytes(_encode(spec, params, None, None, None))


def save_checkpoint(
    path: Union[str, Path], model: GmmcModel, buffer: Optional[ReplayBuffer] = None
) -> None:
    """Write the model (network, centroids, gamma^2 when estimated) and optionally a buffer."""
    data = _encode(model.spec, model.params, model.centroids, model.gamma2, buffer)
    Path(path).write_bytes(data)
    logger.info(f"Wrote checkpoint {path} ({len(data)} bytes)")


# -----Reading-----------------------------------------------------------------


class _Cursor(object):
    def __init__(self, data: bytes, offset: int) -> None:
        self.data = data
        self.offset = offset

    def take(self, size: int) -> bytes:
        if self.offset + size > len(self.data):
            raise CheckpointError(
                f"Checkpoint truncated: needed {size} bytes at offset {self.offset}"
            )
        chunk = self.data[self.offset : self.offset + size]
        self.offset += size
        return chunk

    def unpack(self, fmt: str) -> tuple[int | float, ...]:
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    def floats(self, count: int) -> NDArray[np.float64]:
        return np.frombuffer(self.take(8 * count), dtype="<f8").astype(np.float64)


def _decode_spec(cursor: _Cursor) -> NetworkSpec:
    input_dim, num_layers = (int(v) for v in cursor.unpack("<II"))
    widths = tuple(int(v) for v in cursor.unpack(f"<{num_layers}I"))
    codes = cursor.take(max(num_layers - 1, 0))
    try:
        activations = tuple(_CODE_ACTIVATIONS[code] for code in codes)
    except KeyError as exc:
        raise CheckpointError(f"Unknown activation code {exc.args[0]}") from exc
    (init_seed,) = cursor.unpack("<Q")
    return NetworkSpec(input_dim, widths, activations, int(init_seed))


def load_checkpoint(path: Union[str, Path]) -> Checkpoint:
    """
    Read and verify a checkpoint written by save_checkpoint or save_network.

    Raises:
        CheckpointError: On a missing file, bad magic, unsupported version,
            checksum mismatch, truncation, or inconsistent blocks.
    """
    try:
        data = Path(path).read_bytes()
    except OSError as exc:
        raise CheckpointError(f"Cannot read checkpoint {path}: {exc}") from exc

    if len(data) < len(CHECKPOINT_MAGIC) + 12 or not data.startswith(CHECKPOINT_MAGIC):
        raise CheckpointError(f"{path} is not a gmmc checkpoint")
    body, (stored_crc,) = data[4:-4], struct.unpack("<I", data[-4:])
    if zlib.crc32(body) != stored_crc:
        raise CheckpointError(f"Checksum mismatch in {path}")

    cursor = _Cursor(body, 0)
    version, flags = (int(v) for v in cursor.unpack("<II"))
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"Unsupported checkpoint version {version}")

    try:
        spec = _decode_spec(cursor)
        (count,) = cursor.unpack("<Q")
        layout = parameter_layout(spec)
        if count != layout[-1].end:
            raise CheckpointError(
                f"Parameter count {count} does not match the network layout ({layout[-1].end})"
            )
        params = ParameterVector(values=cursor.floats(int(count)), layout=layout)

        centroids = None
        if flags & _FLAG_CENTROIDS:
            num_classes, feature_dim, scale = cursor.unpack("<IId")
            means = cursor.floats(int(num_classes) * int(feature_dim))
            centroids = CentroidSet(
                int(num_classes),
                int(feature_dim),
                float(scale),
                means.reshape(int(num_classes), int(feature_dim)),
            )

        gamma2 = None
        if flags & _FLAG_GAMMA2:
            gamma2 = float(cursor.unpack("<d")[0])

        buffer = None
        if flags & _FLAG_BUFFER:
            capacity, input_dim, reinit_prob, rng_seed, size = cursor.unpack("<QIdQQ")
            xs = cursor.floats(int(size) * int(input_dim)).reshape(int(size), int(input_dim))
            ys = np.frombuffer(cursor.take(4 * int(size)), dtype="<u4")
            buffer = ReplayBuffer(int(capacity), int(input_dim), float(reinit_prob), int(rng_seed))
            for x, y in zip(xs, ys):
                buffer._store(None, x, int(y))
    except CheckpointError:
        raise
    except GmmcError as exc:
        raise CheckpointError(f"Inconsistent checkpoint {path}: {exc}") from exc

    if cursor.offset != len(body):
        raise CheckpointError(f"{len(body) - cursor.offset} trailing bytes in {path}")
    if not params.is_finite():
        raise CheckpointError(f"Checkpoint {path} holds non-finite parameters")

    return Checkpoint(spec=spec, params=params, centroids=centroids, gamma2=gamma2, buffer=buffer)
