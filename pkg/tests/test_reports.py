"""Tests for CSV reports and PGM image grids."""

from pathlib import Path

import numpy as np
import pytest

import gmmc
from gmmc.errors import DimensionError


CTX = gmmc.ReportContext(config_hash="0123456789abcdef", seed=7)


def _record(epoch: int, **overrides) -> gmmc.EpochRecord:
    values = dict(
        epoch=epoch,
        step=gmmc.StepKind.GENERATIVE,
        beta=0.5,
        learning_rate=0.01,
        loss_real=0.25,
        loss_sampled=-1.5,
        train_acc=1.0,
        test_acc=0.9875,
        seconds=12.345,
    )
    values.update(overrides)
    return gmmc.EpochRecord(**values)


def _lines(path: Path) -> list[str]:
    return path.read_text(encoding="utf-8").splitlines()


@pytest.mark.parametrize(
    "value, expected",
    [(None, ""), (0.0, "0"), (0.1, "0.1"), (1.0 / 3.0, "0.3333333333"), (1e-12, "1e-12")],
)
def test_format_float(value, expected: str) -> None:
    assert gmmc.format_float(value) == expected


def test_epoch_csv_layout(tmp_path: Path) -> None:
    """Test that the epoch CSV is a comment line, a header, then one row per epoch."""
    path = tmp_path / "epochs.csv"
    gmmc.write_epoch_csv(path, [_record(1), _record(2, loss_sampled=None, test_acc=None)], CTX)

    assert _lines(path) == [
        "# config_hash=0123456789abcdef seed=7",
        "epoch,mode,beta,lr,loss_real,loss_sampled,train_acc,test_acc,seconds",
        "1,generative,0.5,0.01,0.25,-1.5,1,0.9875,",
        "2,generative,0.5,0.01,0.25,,1,,",
    ]


def test_epoch_csv_seconds_opt_in(tmp_path: Path) -> None:
    path = tmp_path / "epochs.csv"
    gmmc.write_epoch_csv(path, [_record(1)], CTX, include_seconds=True)
    assert _lines(path)[2].endswith(",12.345")


def test_streaming_writer_flushes_each_row(tmp_path: Path) -> None:
    path = tmp_path / "epochs.csv"
    writer = gmmc.EpochCsvWriter(path, CTX)
    try:
        assert len(_lines(path)) == 2
        writer(_record(1))
        assert len(_lines(path)) == 3
        writer(_record(2))
        assert _lines(path)[-1].startswith("2,generative")
    finally:
        writer.close()
    writer.close()


def test_streaming_and_batch_writers_agree(tmp_path: Path) -> None:
    records = [_record(e) for e in range(1, 4)]
    writer = gmmc.EpochCsvWriter(tmp_path / "stream.csv", CTX)
    for record in records:
        writer(record)
    writer.close()
    gmmc.write_epoch_csv(tmp_path / "batch.csv", records, CTX)

    assert (tmp_path / "stream.csv").read_bytes() == (tmp_path / "batch.csv").read_bytes()


def test_small_reports(tmp_path: Path) -> None:
    gmmc.write_gamma2_csv(tmp_path / "gamma2.csv", 0.0625, CTX)
    gmmc.write_robustness_csv(tmp_path / "robustness.csv", [(0.0, 1.0), (0.1, 0.5)], CTX)
    gmmc.write_perturbation_csv(tmp_path / "perturbations.csv", [(0, 0.75), (3, None)], CTX)

    assert _lines(tmp_path / "gamma2.csv")[1:] == ["gamma2", "0.0625"]
    assert _lines(tmp_path / "robustness.csv")[1:] == ["epsilon,robust_acc", "0,1", "0.1,0.5"]
    assert _lines(tmp_path / "perturbations.csv")[1:] == ["example_id,l2", "0,0.75", "3,"]


def test_calibration_csv(tmp_path: Path) -> None:
    buckets = [
        gmmc.CalibrationBucket(0, 0.0, 0.5, 0, 0.0, 0.0),
        gmmc.CalibrationBucket(1, 0.5, 1.0, 4, 0.75, 0.875),
    ]
    gmmc.write_calibration_csv(tmp_path / "calibration.csv", buckets, CTX)
    assert _lines(tmp_path / "calibration.csv")[1:] == [
        "bucket,count,acc,conf",
        "0,0,0,0",
        "1,4,0.75,0.875",
    ]


def test_samples_csv_blanks_failed_chains(tmp_path: Path) -> None:
    path = tmp_path / "samples.csv"
    samples = np.array([[0.5, -0.25], [np.nan, np.nan]])
    gmmc.write_samples_csv(
        path, 1, samples, ["ok", "diverged"], [2.0, 3.0], [0.5, None], CTX
    )

    assert _lines(path)[1:] == [
        "sample_id,label,status,energy_initial,energy_final,x1,x2",
        "0,1,ok,2,0.5,0.5,-0.25",
        "1,1,diverged,3,,,",
    ]


def test_pgm_grid_header_and_size(tmp_path: Path) -> None:
    """Test that five 3x3 tiles land on a 3x2 grid with one pixel gaps."""
    path = tmp_path / "samples.pgm"
    samples = np.ones((5, 9))
    samples[1] = -1.0
    gmmc.write_pgm_grid(path, samples, 3)

    data = path.read_bytes()
    header = b"P5\n11 7\n255\n"
    assert data.startswith(header)
    pixels = np.frombuffer(data[len(header) :], dtype=np.uint8).reshape(7, 11)
    assert pixels[0, 0] == 255
    assert pixels[0, 3] == 0
    assert pixels[0, 4] == 0
    assert pixels[4, 0] == 255


def test_pgm_grid_rejects_non_square(tmp_path: Path) -> None:
    with pytest.raises(DimensionError):
        gmmc.write_pgm_grid(tmp_path / "bad.pgm", np.zeros((2, 5)), 2)


def test_pgm_grid_skips_empty(tmp_path: Path) -> None:
    gmmc.write_pgm_grid(tmp_path / "empty.pgm", np.zeros((0, 4)), 2)
    assert not (tmp_path / "empty.pgm").exists()
