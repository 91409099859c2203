"""
End-to-end tests for the gmmc command line.

Each test drives ``cli.main`` with an argv list and checks the exit code,
the files written and what was printed.
"""

import csv
from pathlib import Path

import numpy as np
import pytest

import gmmc
from gmmc import cli
from gmmc import training
from gmmc.errors import NonFiniteLossError


SMALL_CONFIG = """
[experiment]
name = small
seed = 1

[dataset]
kind = synth
classes = 2
dim = 2
n_per_class = 40
spread = 0.1

[network]
widths = 8, 2
activations = tanh
scale = 4

[train]
mode = discriminative
epochs = {epochs}
batch_size = 16
learning_rate = 0.01
checkpoint_every = {checkpoint_every}
"""


def _write_config(tmp_path: Path, epochs: int = 4, checkpoint_every: int = 0) -> Path:
    path = tmp_path / "small.ini"
    path.write_text(SMALL_CONFIG.format(epochs=epochs, checkpoint_every=checkpoint_every))
    return path


def _csv_rows(path: Path) -> list[dict[str, str]]:
    with open(path, newline="", encoding="utf-8") as handle:
        assert handle.readline().startswith("# config_hash=")
        return list(csv.DictReader(handle))


@pytest.fixture(scope="module")
def trained_run(tmp_path_factory) -> Path:
    out = tmp_path_factory.mktemp("toy2d-disc")
    assert cli.main(["train", "--config", "toy2d-disc", "--out", str(out)]) == cli.EXIT_OK
    return out


# -----means-------------------------------------------------------------------


def test_means_writes_centroids(tmp_path: Path, capsys) -> None:
    out = tmp_path / "means.txt"
    code = cli.main(["means", "--classes", "10", "--dim", "9", "--scale", "10", "--out", str(out)])

    assert code == cli.EXIT_OK
    cs = gmmc.load_centroids(out)
    assert (cs.num_classes, cs.feature_dim, cs.scale) == (10, 9, 10.0)
    assert "expected -0.111111111111" in capsys.readouterr().out


def test_means_reports_three_class_cosines(tmp_path: Path, capsys) -> None:
    out = tmp_path / "means.txt"
    code = cli.main(["means", "--classes", "3", "--dim", "2", "--scale", "1", "--out", str(out)])

    assert code == cli.EXIT_OK
    assert "pairwise cosine: min -0.5 max -0.5 (expected -0.5)" in capsys.readouterr().out


def test_means_too_many_classes(tmp_path: Path, capsys) -> None:
    code = cli.main(["means", "--classes", "4", "--dim", "2", "--out", str(tmp_path / "m.txt")])

    assert code == cli.EXIT_USAGE
    assert capsys.readouterr().err.startswith("error:")
    assert not (tmp_path / "m.txt").exists()


# -----train-------------------------------------------------------------------


def test_train_toy_reaches_accuracy_gate(trained_run: Path) -> None:
    """Test that the bundled discriminative toy run separates its two classes."""
    rows = _csv_rows(trained_run / "epochs.csv")

    assert [int(r["epoch"]) for r in rows] == list(range(1, 31))
    assert float(rows[-1]["test_acc"]) >= 0.98
    assert all(r["seconds"] == "" for r in rows)
    assert (trained_run / "model.gmmc").is_file()
    assert (trained_run / "config.ini").read_text().startswith("# Two-class")
    gamma2 = float(_csv_rows(trained_run / "gamma2.csv")[0]["gamma2"])
    assert gamma2 == pytest.approx(gmmc.load_checkpoint(trained_run / "model.gmmc").gamma2)


def test_train_is_byte_identical_across_runs(tmp_path: Path) -> None:
    config = _write_config(tmp_path)
    for name in ("a", "b"):
        assert cli.main(["train", "--config", str(config), "--out", str(tmp_path / name)]) == 0

    for report in ("epochs.csv", "gamma2.csv", "model.gmmc"):
        assert (tmp_path / "a" / report).read_bytes() == (tmp_path / "b" / report).read_bytes()


def test_train_zero_epochs_writes_header_only(tmp_path: Path) -> None:
    config = _write_config(tmp_path, epochs=0)
    assert cli.main(["train", "--config", str(config), "--out", str(tmp_path / "run")]) == 0

    lines = (tmp_path / "run" / "epochs.csv").read_text().splitlines()
    assert len(lines) == 2
    assert lines[1].startswith("epoch,mode,beta")
    assert (tmp_path / "run" / "model.gmmc").is_file()


def test_train_periodic_checkpoints(tmp_path: Path) -> None:
    config = _write_config(tmp_path, epochs=4, checkpoint_every=2)
    out = tmp_path / "run"
    assert cli.main(["train", "--config", str(config), "--out", str(out)]) == 0

    assert sorted(p.name for p in out.glob("checkpoint-*.gmmc")) == [
        "checkpoint-epoch0002.gmmc",
        "checkpoint-epoch0004.gmmc",
    ]
    assert gmmc.get_subscriber_count(gmmc.TRAIN_EPOCH) == 0


def test_train_missing_config(tmp_path: Path, capsys) -> None:
    code = cli.main(["train", "--config", str(tmp_path / "absent.ini")])
    assert code == cli.EXIT_USAGE
    assert "no bundled config" in capsys.readouterr().err


def test_train_divergence_exit_code(tmp_path: Path, monkeypatch, capsys) -> None:
    """Test that a diverging run exits with 3 and keeps the completed epochs on disk."""
    real_disc_step = training.disc_step

    def failing_disc_step(
        m, batch_x, batch_y, opt_state, learning_rate, epoch=None, batch_index=None
    ):
        if epoch == 2:
            raise NonFiniteLossError(float("inf"), epoch=epoch, batch_index=batch_index)
        return real_disc_step(m, batch_x, batch_y, opt_state, learning_rate, epoch, batch_index)

    monkeypatch.setattr(training, "disc_step", failing_disc_step)
    config = _write_config(tmp_path)
    out = tmp_path / "run"

    assert cli.main(["train", "--config", str(config), "--out", str(out)]) == cli.EXIT_DIVERGED
    assert [r["epoch"] for r in _csv_rows(out / "epochs.csv")] == ["1"]
    assert not (out / "model.gmmc").exists()
    assert "diverged at epoch 2, batch 0" in capsys.readouterr().err


# -----sample------------------------------------------------------------------


def test_sample_zero_count(trained_run: Path, tmp_path: Path) -> None:
    args = ["sample", "--checkpoint", str(trained_run / "model.gmmc")]
    args += ["--class", "0", "--count", "0", "--out", str(tmp_path)]
    assert cli.main(args) == cli.EXIT_OK

    lines = (tmp_path / "samples.csv").read_text().splitlines()
    assert lines[1] == "sample_id,label,status,energy_initial,energy_final,x1,x2"
    assert len(lines) == 2


def test_sample_lowers_mean_energy(trained_run: Path, tmp_path: Path) -> None:
    args = ["sample", "--checkpoint", str(trained_run / "model.gmmc"), "--class", "1"]
    args += ["--count", "64", "--steps", "20", "--step-size", "0.01", "--out", str(tmp_path)]
    assert cli.main(args) == cli.EXIT_OK

    rows = _csv_rows(tmp_path / "samples.csv")
    assert len(rows) == 64
    assert all(r["status"] == "ok" and r["label"] == "1" for r in rows)
    initial = np.mean([float(r["energy_initial"]) for r in rows])
    final = np.mean([float(r["energy_final"]) for r in rows])
    assert final < initial
    coords = np.array([[float(r["x1"]), float(r["x2"])] for r in rows])
    assert np.all(np.abs(coords) <= 1.0)
    assert not (tmp_path / "samples.pgm").exists()


def test_sample_writes_image_grid_for_square_inputs(tmp_path: Path) -> None:
    spec = gmmc.NetworkSpec(input_dim=4, widths=(3, 2), activations=("tanh",))
    checkpoint = tmp_path / "square.gmmc"
    gmmc.save_checkpoint(checkpoint, gmmc.build_model(spec, gmmc.generate_opt_means(3, 2)))

    args = ["sample", "--checkpoint", str(checkpoint), "--class", "2", "--count", "4"]
    args += ["--mode", "noise_injected", "--step-size", "0.1", "--out", str(tmp_path / "out")]
    assert cli.main(args) == cli.EXIT_OK
    assert (tmp_path / "out" / "samples.pgm").read_bytes().startswith(b"P5\n5 5\n255\n")


@pytest.mark.parametrize(
    "extra",
    [["--class", "2", "--count", "1"], ["--class", "0", "--count", "-1"]],
)
def test_sample_rejects_bad_arguments(trained_run: Path, tmp_path: Path, extra) -> None:
    args = ["sample", "--checkpoint", str(trained_run / "model.gmmc"), "--out", str(tmp_path)]
    assert cli.main(args + extra) == cli.EXIT_USAGE


def test_sample_estimated_gamma2_needs_estimate(tmp_path: Path, capsys) -> None:
    spec = gmmc.NetworkSpec(input_dim=2, widths=(2,), activations=())
    checkpoint = tmp_path / "raw.gmmc"
    gmmc.save_checkpoint(checkpoint, gmmc.build_model(spec, gmmc.generate_opt_means(2, 2)))

    args = ["sample", "--checkpoint", str(checkpoint), "--class", "0", "--count", "2"]
    args += ["--estimated-gamma2", "--out", str(tmp_path / "out")]
    assert cli.main(args) == cli.EXIT_USAGE
    assert "gamma" in capsys.readouterr().err


# -----eval--------------------------------------------------------------------


def test_eval_calibration_suite(trained_run: Path, tmp_path: Path, capsys) -> None:
    args = ["eval", "--checkpoint", str(trained_run / "model.gmmc"), "--dataset", "toy2d-disc"]
    args += ["--suite", "calibration", "--out", str(tmp_path)]
    assert cli.main(args) == cli.EXIT_OK

    rows = _csv_rows(tmp_path / "calibration.csv")
    assert [int(r["bucket"]) for r in rows] == list(range(10))
    assert sum(int(r["count"]) for r in rows) == 80
    assert capsys.readouterr().out.startswith("ECE")
    assert not (tmp_path / "robustness.csv").exists()


def test_eval_all_suites(trained_run: Path, tmp_path: Path) -> None:
    args = ["eval", "--checkpoint", str(trained_run / "model.gmmc"), "--dataset", "toy2d-disc"]
    args += ["--out", str(tmp_path)]
    assert cli.main(args) == cli.EXIT_OK

    ood = {r["score_fn"]: float(r["auroc"]) for r in _csv_rows(tmp_path / "ood.csv")}
    assert set(ood) == {score.value for score in gmmc.OodScore}
    assert all(0.0 <= auroc <= 1.0 for auroc in ood.values())
    for score in gmmc.OodScore:
        assert (tmp_path / f"ood-hist-{score.value}.csv").is_file()

    robustness = _csv_rows(tmp_path / "robustness.csv")
    assert [float(r["epsilon"]) for r in robustness] == [0.0, 0.05, 0.1, 0.2]
    accs = [float(r["robust_acc"]) for r in robustness]
    assert accs[0] >= 0.98
    assert all(b <= a for a, b in zip(accs, accs[1:]))

    perturbations = _csv_rows(tmp_path / "perturbations.csv")
    assert 0 < len(perturbations) <= 10
    assert all(r["l2"] == "" or float(r["l2"]) > 0 for r in perturbations)


def test_eval_missing_checkpoint(tmp_path: Path) -> None:
    args = ["eval", "--checkpoint", str(tmp_path / "absent.gmmc"), "--dataset", "toy2d-disc"]
    assert cli.main(args) == cli.EXIT_USAGE


@pytest.mark.parametrize(
    ("classes", "dim", "message"),
    [(3, 2, "classifies 2 classes"), (2, 3, "expects inputs in R^2")],
)
def test_eval_rejects_mismatched_dataset(
    trained_run: Path, tmp_path: Path, capsys, classes: int, dim: int, message: str
) -> None:
    """Test that a dataset the checkpoint cannot score is a usage error, not a crash."""
    config = tmp_path / "mismatch.ini"
    text = SMALL_CONFIG.format(epochs=1, checkpoint_every=0)
    text = text.replace("classes = 2", f"classes = {classes}").replace("dim = 2", f"dim = {dim}")
    config.write_text(text)
    args = [
        "eval", "--checkpoint", str(trained_run / "model.gmmc"),
        "--dataset", str(config), "--out", str(tmp_path / "eval"),
    ]

    assert cli.main(args) == cli.EXIT_USAGE
    assert message in capsys.readouterr().err


# -----Parsing-----------------------------------------------------------------


@pytest.mark.parametrize(
    "argv",
    [
        [],
        ["fly"],
        ["train"],
        ["means", "--classes", "3", "--dim", "2"],
        ["eval", "--checkpoint", "x", "--dataset", "y", "--suite", "speed"],
    ],
)
def test_usage_errors(argv: list[str]) -> None:
    assert cli.main(argv) == cli.EXIT_USAGE


def test_help_exits_cleanly(capsys) -> None:
    assert cli.main(["--help"]) == cli.EXIT_OK
    assert "means" in capsys.readouterr().out
