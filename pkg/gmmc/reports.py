"""
Report files.

Every CSV starts with a comment line recording the config hash and seed,
followed by a header row. Floats are written with a fixed format so reruns
of the same config produce identical bytes.

Image grids use the binary portable graymap format (P5).
"""

import csv
import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import IO
from typing import Any
from typing import Iterable
from typing import Optional
from typing import Sequence
from typing import Union

import numpy as np
from numpy.typing import NDArray

from gmmc.errors import DimensionError
from gmmc.evaluation import CalibrationBucket
from gmmc.evaluation import OodResult
from gmmc.training import EpochRecord

__all__ = [
    "EPOCH_COLUMNS",
    "ReportContext",
    "format_float",
    "EpochCsvWriter",
    "write_epoch_csv",
    "write_gamma2_csv",
    "write_calibration_csv",
    "write_ood_csv",
    "write_histogram_csv",
    "write_robustness_csv",
    "write_perturbation_csv",
    "write_samples_csv",
    "write_pgm_grid",
]

logger = logging.getLogger(__name__)

EPOCH_COLUMNS = (
    "epoch",
    "mode",
    "beta",
    "lr",
    "loss_real",
    "loss_sampled",
    "train_acc",
    "test_acc",
    "seconds",
)

PathLike = Union[str, Path]


@dataclass(frozen=True)
class ReportContext(object):
    """Provenance stamped into every report."""

    config_hash: str
    seed: int

    def comment(self) -> str:
        return f"# config_hash={self.config_hash} seed={self.seed}"


def format_float(value: Optional[float]) -> str:
    """Ten significant digits; None becomes an empty cell."""
    if value is None:
        return ""
    return f"{value:.10g}"


def _start(handle: IO[str], ctx: ReportContext, header: Sequence[str]) -> Any:
    handle.write(ctx.comment() + "\n")
    writer = csv.writer(handle, lineterminator="\n")
    writer.writerow(header)
    return writer


def _write(
    path: PathLike,
    ctx: ReportContext,
    header: Sequence[str],
    rows: Iterable[Sequence[object]],
) -> None:
    with open(path, "w", newline="", encoding="utf-8") as handle:
        writer = _start(handle, ctx, header)
        writer.writerows(rows)
    logger.info(f"Wrote {path}")


# -----Training----------------------------------------------------------------


def _epoch_row(record: EpochRecord, include_seconds: bool) -> list[str]:
    return [
        str(record.epoch),
        record.step.value,
        format_float(record.beta),
        format_float(record.learning_rate),
        format_float(record.loss_real),
        format_float(record.loss_sampled),
        format_float(record.train_acc),
        format_float(record.test_acc),
        format_float(record.seconds) if include_seconds else "",
    ]


class EpochCsvWriter(object):
    """
    Streams epoch records to CSV as they are produced.

    Register an instance on gmmc.train.epoch; rows are flushed one by one so
    an aborted run keeps every completed epoch on disk.
    """

    def __init__(
        self, path: PathLike, ctx: ReportContext, include_seconds: bool = False
    ) -> None:
        self.path = Path(path)
        self.include_seconds = include_seconds
        self._handle = open(self.path, "w", newline="", encoding="utf-8")
        self._writer = _start(self._handle, ctx, EPOCH_COLUMNS)
        self._handle.flush()

    def __call__(self, record: EpochRecord) -> None:
        self._writer.writerow(_epoch_row(record, self.include_seconds))
        self._handle.flush()

    def close(self) -> None:
        if not self._handle.closed:
            self._handle.close()


def write_epoch_csv(
    path: PathLike,
    records: Iterable[EpochRecord],
    ctx: ReportContext,
    include_seconds: bool = False,
) -> None:
    _write(path, ctx, EPOCH_COLUMNS, (_epoch_row(r, include_seconds) for r in records))


def write_gamma2_csv(path: PathLike, gamma2: float, ctx: ReportContext) -> None:
    _write(path, ctx, ("gamma2",), [(format_float(gamma2),)])


# -----Evaluation--------------------------------------------------------------


def write_calibration_csv(
    path: PathLike, buckets: Iterable[CalibrationBucket], ctx: ReportContext
) -> None:
    rows = (
        (b.index, b.count, format_float(b.accuracy), format_float(b.confidence))
        for b in buckets
    )
    _write(path, ctx, ("bucket", "count", "acc", "conf"), rows)


def write_ood_csv(path: PathLike, results: Iterable[OodResult], ctx: ReportContext) -> None:
    rows = ((r.score.value, format_float(r.auroc)) for r in results)
    _write(path, ctx, ("score_fn", "auroc"), rows)


def write_histogram_csv(path: PathLike, result: OodResult, ctx: ReportContext) -> None:
    hist = result.histogram
    rows = (
        (
            format_float(float(hist.edges[i])),
            format_float(float(hist.edges[i + 1])),
            int(hist.in_counts[i]),
            int(hist.out_counts[i]),
        )
        for i in range(hist.in_counts.shape[0])
    )
    _write(path, ctx, ("bin_lower", "bin_upper", "in_count", "out_count"), rows)


def write_robustness_csv(
    path: PathLike, rows: Iterable[tuple[float, float]], ctx: ReportContext
) -> None:
    _write(
        path,
        ctx,
        ("epsilon", "robust_acc"),
        ((format_float(eps), format_float(acc)) for eps, acc in rows),
    )


def write_perturbation_csv(
    path: PathLike, rows: Iterable[tuple[int, Optional[float]]], ctx: ReportContext
) -> None:
    """Norms of the smallest adversarial perturbations; empty l2 means none was found."""
    _write(
        path,
        ctx,
        ("example_id", "l2"),
        ((example_id, format_float(l2)) for example_id, l2 in rows),
    )


# -----Samples-----------------------------------------------------------------


def write_samples_csv(
    path: PathLike,
    label: int,
    samples: NDArray[np.float64],
    status: Sequence[str],
    initial_energy: Sequence[float],
    final_energy: Sequence[Optional[float]],
    ctx: ReportContext,
) -> None:
    """One row per chain; coordinates and final energy are blank for failed chains."""
    dim = samples.shape[1] if samples.ndim == 2 else 0
    header = ["sample_id", "label", "status", "energy_initial", "energy_final"]
    header += [f"x{i + 1}" for i in range(dim)]

    def rows() -> Iterable[list[object]]:
        for i, row in enumerate(samples):
            ok = status[i] == "ok"
            yield [
                i,
                label,
                status[i],
                format_float(initial_energy[i]),
                format_float(final_energy[i]) if ok else "",
            ] + [format_float(float(v)) if ok else "" for v in row]

    _write(path, ctx, header, rows())


def write_pgm_grid(path: PathLike, samples: NDArray[np.float64], side: int) -> None:
    """
    Tile (N, side*side) samples in [-1, 1] into one grayscale image.

    Tiles are laid out row-major on a ceil(sqrt(N))-wide grid with a one
    pixel gap. Non-finite values render black.
    """
    n = samples.shape[0]
    if n == 0:
        return
    if samples.shape[1] != side * side:
        raise DimensionError(f"Samples of dim {samples.shape[1]} are not {side}x{side} images")

    cols = math.ceil(math.sqrt(n))
    rows = math.ceil(n / cols)
    height = rows * (side + 1) - 1
    width = cols * (side + 1) - 1
    canvas = np.zeros((height, width), dtype=np.uint8)

    pixels = np.nan_to_num((samples + 1.0) * 127.5, nan=0.0, posinf=0.0, neginf=0.0)
    pixels = np.clip(np.rint(pixels), 0, 255).astype(np.uint8)
    for i in range(n):
        r, c = divmod(i, cols)
        top, left = r * (side + 1), c * (side + 1)
        canvas[top : top + side, left : left + side] = pixels[i].reshape(side, side)

    with open(path, "wb") as handle:
        handle.write(f"P5\n{width} {height}\n255\n".encode("ascii"))
        handle.write(canvas.tobytes())
    logger.info(f"Wrote {path}")
