"""
Command-line front end.

    gmmc means  --classes C --dim d [--scale S] --out FILE
    gmmc train  --config NAME_OR_PATH [--out DIR]
    gmmc sample --checkpoint FILE --class Y --count N [--mode MODE] --out DIR
    gmmc eval   --checkpoint FILE --dataset NAME_OR_PATH [--suite SUITE] [--out DIR]

Exit codes: 0 success, 2 usage, configuration or load errors, 3 numerical
divergence.
"""

import argparse
import logging
import math
import sys
from pathlib import Path
from typing import Callable
from typing import Optional
from typing import Sequence

import numpy as np

from gmmc import events
from gmmc import handlers
from gmmc import reports
from gmmc import sampler
from gmmc.centroids import generate_opt_means
from gmmc.centroids import pairwise_cosines
from gmmc.centroids import save_centroids
from gmmc.checkpoint import load_checkpoint
from gmmc.checkpoint import save_checkpoint
from gmmc.config import ExperimentConfig
from gmmc.config import ExperimentData
from gmmc.config import load_config
from gmmc.config import load_datasets
from gmmc.config import resolve_config
from gmmc.data import LabeledDataset
from gmmc.errors import ConfigError
from gmmc.errors import DivergenceError
from gmmc.errors import GmmcError
from gmmc.errors import TrainingDivergedError
from gmmc.evaluation import AttackConfig
from gmmc.evaluation import MinL2SearchConfig
from gmmc.evaluation import OodResult
from gmmc.evaluation import OodScore
from gmmc.evaluation import calibration_buckets
from gmmc.evaluation import calibration_input
from gmmc.evaluation import ece
from gmmc.evaluation import min_l2_perturbations
from gmmc.evaluation import ood_evaluate
from gmmc.evaluation import robust_accuracy
from gmmc.model import GammaMode
from gmmc.model import GmmcModel
from gmmc.model import build_model
from gmmc.model import energies
from gmmc.model import estimate_gamma2
from gmmc.model import with_gamma2
from gmmc.training import fit

__all__ = [
    "EXIT_OK",
    "EXIT_USAGE",
    "EXIT_DIVERGED",
    "SUITES",
    "build_parser",
    "cmd_means",
    "cmd_train",
    "cmd_sample",
    "cmd_eval",
    "main",
]

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_DIVERGED = 3

SUITES = ("calibration", "ood", "robustness", "perturbation", "all")

_OOD_NOISE_SEED_OFFSET = 7919


# -----means-------------------------------------------------------------------


def cmd_means(args: argparse.Namespace) -> int:
    cs = generate_opt_means(args.classes, args.dim, args.scale)
    save_centroids(cs, args.out)

    cosines = pairwise_cosines(cs)
    off_diagonal = cosines[~np.eye(cs.num_classes, dtype=bool)]
    expected = -1.0 / (cs.num_classes - 1)
    print(f"wrote {cs.num_classes} means in R^{cs.feature_dim} (S={cs.scale:g}) to {args.out}")
    print(
        f"pairwise cosine: min {off_diagonal.min():.12g} max {off_diagonal.max():.12g} "
        f"(expected {expected:.12g})"
    )
    return EXIT_OK


# -----train-------------------------------------------------------------------


def _context(cfg: ExperimentConfig) -> reports.ReportContext:
    return reports.ReportContext(config_hash=cfg.hash, seed=cfg.seed)


def _build_model(cfg: ExperimentConfig, data: ExperimentData) -> GmmcModel:
    spec = cfg.network.spec_for(data.train.input_dim)
    centroids = generate_opt_means(data.train.num_classes, spec.feature_dim, cfg.network.scale)
    return build_model(spec, centroids)


def cmd_train(args: argparse.Namespace) -> int:
    cfg = load_config(args.config)
    out_dir = Path(args.out) if args.out else cfg.output_dir
    out_dir.mkdir(parents=True, exist_ok=True)
    ctx = _context(cfg)

    data = load_datasets(cfg)
    model = _build_model(cfg, data)
    text, _ = resolve_config(args.config)
    (out_dir / "config.ini").write_text(text, encoding="utf-8")

    epoch_writer = reports.EpochCsvWriter(
        out_dir / "epochs.csv", ctx, include_seconds=cfg.report_wall_time
    )

    def write_periodic_checkpoint(
        epoch: int, model: GmmcModel, buffer: Optional[sampler.ReplayBuffer]
    ) -> None:
        save_checkpoint(out_dir / f"checkpoint-epoch{epoch:04d}.gmmc", model, buffer)

    events.register_subscriber(events.TRAIN_EPOCH, epoch_writer)
    events.register_subscriber(events.TRAIN_CHECKPOINT, write_periodic_checkpoint)
    try:
        model, report = fit(model, data.train, data.test, cfg.train)
    except TrainingDivergedError as exc:
        print(
            f"training diverged at epoch {exc.epoch}, batch {exc.batch_index}; "
            f"{len(exc.report.records)} completed epochs kept in {out_dir / 'epochs.csv'}",
            file=sys.stderr,
        )
        return EXIT_DIVERGED
    finally:
        events.unregister_subscriber(events.TRAIN_EPOCH, epoch_writer)
        events.unregister_subscriber(events.TRAIN_CHECKPOINT, write_periodic_checkpoint)
        epoch_writer.close()

    assert model.gamma2 is not None
    save_checkpoint(out_dir / "model.gmmc", model)
    reports.write_gamma2_csv(out_dir / "gamma2.csv", model.gamma2, ctx)

    last = report.records[-1] if report.records else None
    print(f"trained {cfg.name} ({cfg.train.mode.value}) for {len(report.records)} epochs")
    if last is not None:
        test_acc = "n/a" if last.test_acc is None else f"{last.test_acc:.4f}"
        print(f"final train_acc {last.train_acc:.4f} test_acc {test_acc}")
    print(f"gamma^2 {model.gamma2:.6g}; outputs in {out_dir}")
    return EXIT_OK


# -----sample------------------------------------------------------------------


def _is_square(n: int) -> bool:
    side = math.isqrt(n)
    return side * side == n


def cmd_sample(args: argparse.Namespace) -> int:
    model = load_checkpoint(args.checkpoint).model()
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    if not 0 <= args.label < model.num_classes:
        raise GmmcError(f"--class {args.label} outside [0, {model.num_classes})")
    if args.count < 0:
        raise GmmcError(f"--count must be >= 0, got {args.count}")

    cfg = sampler.SamplerConfig(
        num_steps=args.steps,
        step_size=args.step_size,
        mode=sampler.SamplingMode(args.mode),
        use_estimated_gamma2=args.estimated_gamma2,
    )
    gamma_mode = GammaMode.ESTIMATED if args.estimated_gamma2 else GammaMode.UNIT
    rng = np.random.default_rng(args.seed)
    x0 = rng.uniform(-1.0, 1.0, size=(args.count, model.input_dim))
    labels = np.full(args.count, args.label, dtype=np.int64)

    previous = sampler.chain_exception_handler
    sampler.set_chain_exception_handler(handlers.log_and_continue_chain_exception)
    try:
        result = sampler.sample_chains(model, x0, labels, cfg, rng)
    finally:
        sampler.set_chain_exception_handler(previous)

    initial = (
        energies(model, x0, gamma_mode)[:, args.label] if args.count else np.empty(0)
    )
    final: list[Optional[float]] = [None] * args.count
    ok = result.ok
    if np.any(ok):
        final_values = energies(model, result.samples[ok], gamma_mode)[:, args.label]
        for i, value in zip(np.flatnonzero(ok), final_values):
            final[int(i)] = float(value)

    ctx = reports.ReportContext(config_hash="-", seed=args.seed)
    reports.write_samples_csv(
        out_dir / "samples.csv",
        args.label,
        result.samples,
        result.status,
        [float(v) for v in initial],
        final,
        ctx,
    )
    if args.count and _is_square(model.input_dim):
        reports.write_pgm_grid(out_dir / "samples.pgm", result.samples, math.isqrt(model.input_dim))

    diverged = sum(1 for s in result.status if s != "ok")
    if args.count:
        finished = [v for v in final if v is not None]
        mean_final = f"{np.mean(finished):.6g}" if finished else "n/a"
        print(
            f"{args.count} chains for class {args.label}: {diverged} diverged; "
            f"mean energy {np.mean(initial):.6g} -> {mean_final}"
        )
    return EXIT_OK


# -----eval--------------------------------------------------------------------


def _noise_out_set(test: LabeledDataset, seed: int) -> LabeledDataset:
    rng = np.random.default_rng(seed + _OOD_NOISE_SEED_OFFSET)
    return LabeledDataset(
        inputs=rng.uniform(-1.0, 1.0, size=test.inputs.shape),
        labels=np.zeros(len(test), dtype=np.int64),
        num_classes=test.num_classes,
        name="uniform-noise",
        source=f"uniform noise, seed {seed + _OOD_NOISE_SEED_OFFSET}",
    )


def _check_model_fits(model: GmmcModel, data: ExperimentData, checkpoint: str) -> None:
    if model.num_classes != data.train.num_classes:
        raise ConfigError(
            f"{checkpoint} classifies {model.num_classes} classes but dataset "
            f"'{data.train.name}' has {data.train.num_classes}"
        )
    for ds in (data.train, data.test, data.out):
        if ds is not None and ds.input_dim != model.input_dim:
            raise ConfigError(
                f"{checkpoint} expects inputs in R^{model.input_dim} but dataset "
                f"'{ds.name}' is in R^{ds.input_dim}"
            )


def cmd_eval(args: argparse.Namespace) -> int:
    model = load_checkpoint(args.checkpoint).model()
    cfg = load_config(args.dataset)
    data = load_datasets(cfg)
    _check_model_fits(model, data, args.checkpoint)
    train, test, out_set = data.train, data.test, data.out
    out_dir = Path(args.out) if args.out else cfg.output_dir / "eval"
    out_dir.mkdir(parents=True, exist_ok=True)
    ctx = _context(cfg)
    suites = set(SUITES[:-1]) if args.suite == "all" else {args.suite}

    if model.gamma2 is None:
        model = with_gamma2(model, estimate_gamma2(model, train))

    summary: list[tuple[str, str]] = []
    if "calibration" in suites:
        ci = calibration_input(model, test, cfg.eval.num_buckets)
        reports.write_calibration_csv(out_dir / "calibration.csv", calibration_buckets(ci), ctx)
        summary.append(("ECE", f"{ece(ci):.6f}"))

    if "ood" in suites:
        if out_set is None:
            out_set = _noise_out_set(test, cfg.seed)
        results: list[OodResult] = []
        for score in OodScore:
            result = ood_evaluate(model, test, out_set, score, cfg.eval.histogram_bins)
            reports.write_histogram_csv(out_dir / f"ood-hist-{score.value}.csv", result, ctx)
            results.append(result)
            summary.append((f"AUROC {score.value}", f"{result.auroc:.6f}"))
        reports.write_ood_csv(out_dir / "ood.csv", results, ctx)

    if "robustness" in suites:
        rows = []
        for eps in cfg.eval.epsilons:
            attack = AttackConfig(
                norm=cfg.eval.attack_norm,
                epsilon=eps,
                steps=cfg.eval.attack_steps,
                random_start=cfg.eval.random_start,
                seed=cfg.seed,
            )
            acc = robust_accuracy(model, test, attack)
            rows.append((eps, acc))
            summary.append((f"robust_acc eps={eps:g}", f"{acc:.4f}"))
        reports.write_robustness_csv(out_dir / "robustness.csv", rows, ctx)

    if "perturbation" in suites:
        search = MinL2SearchConfig(halvings=cfg.eval.halvings, steps=cfg.eval.attack_steps)
        norms = min_l2_perturbations(model, test, search, limit=cfg.eval.perturbation_examples)
        reports.write_perturbation_csv(out_dir / "perturbations.csv", norms, ctx)
        found = [l2 for _, l2 in norms if l2 is not None]
        summary.append(
            ("median min L2", f"{float(np.median(found)):.6f}" if found else "n/a")
        )

    width = max((len(name) for name, _ in summary), default=0)
    for name, value in summary:
        print(f"{name:<{width}}  {value}")
    return EXIT_OK


# -----Entry point-------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="gmmc", description="Generative Max-Mahalanobis classifier."
    )
    parser.add_argument(
        "--log-level",
        default="WARNING",
        choices=("DEBUG", "INFO", "WARNING", "ERROR"),
        help="logging level (default: WARNING)",
    )
    commands = parser.add_subparsers(dest="command", required=True)

    means = commands.add_parser("means", help="generate Max-Mahalanobis centroids")
    means.add_argument("--classes", type=int, required=True)
    means.add_argument("--dim", type=int, required=True)
    means.add_argument("--scale", type=float, default=10.0)
    means.add_argument("--out", required=True)
    means.set_defaults(handler=cmd_means)

    train = commands.add_parser("train", help="train a model from a config")
    train.add_argument("--config", required=True, help="config file or bundled config name")
    train.add_argument("--out", help="output directory (default: from the config)")
    train.set_defaults(handler=cmd_train)

    sample = commands.add_parser("sample", help="draw class-conditional samples")
    sample.add_argument("--checkpoint", required=True)
    sample.add_argument("--class", dest="label", type=int, required=True)
    sample.add_argument("--count", type=int, required=True)
    sample.add_argument(
        "--mode", default="staged", choices=[m.value for m in sampler.SamplingMode]
    )
    sample.add_argument("--steps", type=int, default=sampler.DEFAULT_NUM_STEPS)
    sample.add_argument("--step-size", type=float, default=sampler.DEFAULT_STEP_SIZE)
    sample.add_argument("--seed", type=int, default=0)
    sample.add_argument(
        "--estimated-gamma2",
        action="store_true",
        help="sample with the model's estimated gamma^2 instead of 1",
    )
    sample.add_argument("--out", required=True)
    sample.set_defaults(handler=cmd_sample)

    evaluate = commands.add_parser("eval", help="evaluate a checkpoint")
    evaluate.add_argument("--checkpoint", required=True)
    evaluate.add_argument(
        "--dataset", required=True, help="config file or bundled config name"
    )
    evaluate.add_argument("--suite", default="all", choices=SUITES)
    evaluate.add_argument("--out", help="output directory (default: <config output>/eval)")
    evaluate.set_defaults(handler=cmd_eval)

    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code) if isinstance(exc.code, int) else EXIT_USAGE

    logging.basicConfig(
        level=getattr(logging, args.log_level),
        format="%(levelname)s %(name)s: %(message)s",
    )
    handler: Callable[[argparse.Namespace], int] = args.handler
    try:
        return handler(args)
    except DivergenceError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except (GmmcError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
