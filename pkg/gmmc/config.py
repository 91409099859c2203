"""
Experiment configuration.

An experiment is one INI document with the sections [experiment], [dataset],
[network], [train], [sampler] and [eval]. Every section except [experiment]
and [dataset] may be omitted, in which case module defaults apply.

``--config`` accepts either a path or the name of a bundled config
(``toy2d-disc``, ``toy2d-gen``, ``toy2d-joint``, ``toy4-ood``,
``mnist-small``). Relative data paths resolve against the config file's
directory, or against the working directory for bundled configs.
"""

import configparser
import enum
import hashlib
import os
from dataclasses import dataclass
from dataclasses import field
from importlib import resources
from pathlib import Path
from typing import Callable
from typing import Optional
from typing import TypeVar
from typing import Union

import numpy as np

from gmmc.centroids import DEFAULT_SCALE
from gmmc.data import LabeledDataset
from gmmc.data import load_csv
from gmmc.data import load_idx_pair
from gmmc.data import make_ood_pair
from gmmc.data import split
from gmmc.data import synth_mixture
from gmmc.errors import ArgumentError
from gmmc.errors import ConfigError
from gmmc.evaluation import DEFAULT_ATTACK_STEPS
from gmmc.evaluation import DEFAULT_HALVINGS
from gmmc.evaluation import DEFAULT_NUM_BUCKETS
from gmmc.evaluation import AttackNorm
from gmmc.network import Activation
from gmmc.network import NetworkSpec
from gmmc.sampler import SamplerConfig
from gmmc.sampler import SamplingMode
from gmmc.schedule import TrainMode
from gmmc.training import TrainConfig

__all__ = [
    "OUTPUT_ROOT_ENV",
    "DEFAULT_OUTPUT_ROOT",
    "DatasetKind",
    "DatasetConfig",
    "NetworkConfig",
    "EvalConfig",
    "ExperimentConfig",
    "bundled_config_names",
    "resolve_config",
    "parse_config",
    "load_config",
    "config_hash",
    "ExperimentData",
    "load_datasets",
]

OUTPUT_ROOT_ENV = "GMMC_OUTPUT_ROOT"
DEFAULT_OUTPUT_ROOT = "runs"

_BUNDLED_PACKAGE = "gmmc"
_BUNDLED_DIR = "configs"

T = TypeVar("T")


class DatasetKind(str, enum.Enum):
    SYNTH = "synth"
    IDX = "idx"
    CSV = "csv"


@dataclass(frozen=True)
class DatasetConfig(object):
    kind: DatasetKind
    num_classes: int

    dim: int = 2
    """Input dimension of synthetic data."""

    n_per_class: int = 200
    spread: float = 0.05
    test_fraction: float = 0.2

    train_images: Optional[Path] = None
    train_labels: Optional[Path] = None
    test_images: Optional[Path] = None
    """Optional IDX test pair; the training files are split when absent."""

    test_labels: Optional[Path] = None
    csv_path: Optional[Path] = None
    max_examples: Optional[int] = None
    """Keep only the first N training examples (desk-scale runs on large files)."""

    held_out_classes: tuple[int, ...] = ()
    """Classes removed from training and used as the out-of-distribution set."""


@dataclass(frozen=True)
class NetworkConfig(object):
    widths: tuple[int, ...]
    activations: tuple[Activation, ...]
    init_seed: int
    scale: float = DEFAULT_SCALE
    """Centroid norm S."""

    def spec_for(self, input_dim: int) -> NetworkSpec:
        return NetworkSpec(input_dim, self.widths, self.activations, self.init_seed)


@dataclass(frozen=True)
class EvalConfig(object):
    num_buckets: int = DEFAULT_NUM_BUCKETS
    attack_norm: AttackNorm = AttackNorm.LINF
    epsilons: tuple[float, ...] = (0.0, 0.05, 0.1, 0.2)
    attack_steps: int = DEFAULT_ATTACK_STEPS
    random_start: bool = False
    histogram_bins: int = 20
    perturbation_examples: int = 10
    halvings: int = DEFAULT_HALVINGS

    def __post_init__(self) -> None:
        if self.num_buckets < 1:
            raise ArgumentError(f"num_buckets must be >= 1, got {self.num_buckets}")
        if self.attack_steps < 1:
            raise ArgumentError(f"attack_steps must be >= 1, got {self.attack_steps}")
        if any(not eps >= 0 for eps in self.epsilons):
            raise ArgumentError(f"epsilons must be non-negative: {self.epsilons}")
        if self.histogram_bins < 1 or self.perturbation_examples < 0 or self.halvings < 0:
            raise ArgumentError(
                "histogram_bins must be >= 1; perturbation_examples and halvings >= 0"
            )


@dataclass(frozen=True)
class ExperimentConfig(object):
    name: str
    seed: int
    output_dir: Path
    dataset: DatasetConfig
    network: NetworkConfig
    train: TrainConfig
    eval: EvalConfig = field(default_factory=EvalConfig)
    report_wall_time: bool = False
    """Write the seconds column of the epoch CSV; off keeps reruns byte-identical."""

    source: str = "<string>"
    hash: str = ""
    """config_hash of the document this config was parsed from."""


# -----Locating configs--------------------------------------------------------


def bundled_config_names() -> list[str]:
    folder = resources.files(_BUNDLED_PACKAGE).joinpath(_BUNDLED_DIR)
    return sorted(
        entry.name[: -len(".ini")]
        for entry in folder.iterdir()
        if entry.name.endswith(".ini")
    )


def resolve_config(name_or_path: Union[str, Path]) -> tuple[str, Path]:
    """
    Return (document text, base directory for relative paths).

    Raises:
        ConfigError: If neither a file nor a bundled config matches.
    """
    path = Path(name_or_path)
    if path.is_file():
        return path.read_text(encoding="utf-8"), path.resolve().parent

    stem = path.name[: -len(".ini")] if path.name.endswith(".ini") else path.name
    bundled = resources.files(_BUNDLED_PACKAGE).joinpath(_BUNDLED_DIR, f"{stem}.ini")
    if bundled.is_file():
        return bundled.read_text(encoding="utf-8"), Path.cwd()

    raise ConfigError(
        f"No config file '{name_or_path}' and no bundled config of that name "
        f"(bundled: {', '.join(bundled_config_names())})"
    )


# -----Parsing-----------------------------------------------------------------


def _split_list(raw: str) -> list[str]:
    return [item.strip() for item in raw.split(",") if item.strip()]


def _get(
    parser: configparser.ConfigParser,
    section: str,
    key: str,
    convert: Callable[[str], T],
    default: T,
) -> T:
    if not parser.has_option(section, key):
        return default
    raw = parser.get(section, key)
    try:
        return convert(raw)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"[{section}] {key} = {raw!r}: {exc}") from exc


def _get_bool(parser: configparser.ConfigParser, section: str, key: str, default: bool) -> bool:
    if not parser.has_option(section, key):
        return default
    try:
        return parser.getboolean(section, key)
    except ValueError as exc:
        raise ConfigError(f"[{section}] {key}: {exc}") from exc


def _optional_int(raw: str) -> Optional[int]:
    return None if raw.strip().lower() in ("", "none") else int(raw)


def _int_tuple(raw: str) -> tuple[int, ...]:
    return tuple(int(v) for v in _split_list(raw))


def _float_tuple(raw: str) -> tuple[float, ...]:
    return tuple(float(v) for v in _split_list(raw))


def _path(base: Path, section: str, key: str, raw: Optional[str]) -> Optional[Path]:
    if raw is None or not raw.strip():
        return None
    path = Path(raw.strip())
    path = path if path.is_absolute() else base / path
    if not path.is_file():
        raise ConfigError(f"[{section}] {key}: file {path} does not exist")
    return path


def _parse_dataset(
    parser: configparser.ConfigParser, base: Path
) -> DatasetConfig:
    s = "dataset"
    if not parser.has_section(s):
        raise ConfigError("Missing [dataset] section")
    kind = _get(parser, s, "kind", DatasetKind, DatasetKind.SYNTH)

    def path(key: str) -> Optional[Path]:
        return _path(base, s, key, parser.get(s, key, fallback=None))

    cfg = DatasetConfig(
        kind=kind,
        num_classes=_get(parser, s, "classes", int, 10 if kind is DatasetKind.IDX else 2),
        dim=_get(parser, s, "dim", int, 2),
        n_per_class=_get(parser, s, "n_per_class", int, 200),
        spread=_get(parser, s, "spread", float, 0.05),
        test_fraction=_get(parser, s, "test_fraction", float, 0.2),
        train_images=path("train_images"),
        train_labels=path("train_labels"),
        test_images=path("test_images"),
        test_labels=path("test_labels"),
        csv_path=path("path"),
        max_examples=_get(parser, s, "max_examples", _optional_int, None),
        held_out_classes=_get(parser, s, "held_out_classes", _int_tuple, ()),
    )

    if kind is DatasetKind.IDX and (cfg.train_images is None or cfg.train_labels is None):
        raise ConfigError("[dataset] kind = idx needs train_images and train_labels")
    if kind is DatasetKind.IDX and (cfg.test_images is None) != (cfg.test_labels is None):
        raise ConfigError("[dataset] test_images and test_labels go together")
    if kind is DatasetKind.CSV and cfg.csv_path is None:
        raise ConfigError("[dataset] kind = csv needs path")
    if not 0.0 < cfg.test_fraction < 1.0:
        raise ConfigError(f"[dataset] test_fraction must be in (0, 1): {cfg.test_fraction}")
    if cfg.num_classes < 2:
        raise ConfigError(f"[dataset] classes must be >= 2: {cfg.num_classes}")
    return cfg


def _parse_network(parser: configparser.ConfigParser, seed: int) -> NetworkConfig:
    s = "network"
    widths = _get(parser, s, "widths", _int_tuple, (32, 32, 2))
    activations = _get(
        parser,
        s,
        "activations",
        lambda raw: tuple(Activation(a) for a in _split_list(raw)),
        tuple(Activation.TANH for _ in widths[:-1]),
    )
    network = NetworkConfig(
        widths=widths,
        activations=activations,
        init_seed=_get(parser, s, "init_seed", int, seed),
        scale=_get(parser, s, "scale", float, DEFAULT_SCALE),
    )
    # Input dim is only known once data is loaded; check the rest now.
    network.spec_for(1)
    return network


def _parse_sampler(parser: configparser.ConfigParser) -> SamplerConfig:
    s = "sampler"
    defaults = SamplerConfig()
    return SamplerConfig(
        num_steps=_get(parser, s, "num_steps", int, defaults.num_steps),
        step_size=_get(parser, s, "step_size", float, defaults.step_size),
        mode=_get(parser, s, "mode", SamplingMode, defaults.mode),
        clip_to_domain=_get_bool(parser, s, "clip_to_domain", defaults.clip_to_domain),
    )


def _parse_train(
    parser: configparser.ConfigParser, seed: int, sampler_cfg: SamplerConfig
) -> TrainConfig:
    s = "train"
    defaults = TrainConfig()
    return TrainConfig(
        mode=_get(parser, s, "mode", TrainMode, defaults.mode),
        epochs=_get(parser, s, "epochs", int, defaults.epochs),
        batch_size=_get(parser, s, "batch_size", int, defaults.batch_size),
        learning_rate=_get(parser, s, "learning_rate", float, defaults.learning_rate),
        lr_decay=_get(parser, s, "lr_decay", float, defaults.lr_decay),
        decay_epochs=_get(parser, s, "decay_epochs", _int_tuple, defaults.decay_epochs),
        beta=_get(parser, s, "beta", float, defaults.beta),
        joint_switch_epoch=_get(parser, s, "joint_switch_epoch", _optional_int, None),
        beta_ramp_epochs=_get(parser, s, "beta_ramp_epochs", int, defaults.beta_ramp_epochs),
        sampler=sampler_cfg,
        buffer_capacity=_get(parser, s, "buffer_capacity", int, defaults.buffer_capacity),
        reinit_prob=_get(parser, s, "reinit_prob", float, defaults.reinit_prob),
        seed=seed,
        checkpoint_every=_get(parser, s, "checkpoint_every", int, defaults.checkpoint_every),
    )


def _parse_eval(parser: configparser.ConfigParser) -> EvalConfig:
    s = "eval"
    defaults = EvalConfig()
    return EvalConfig(
        num_buckets=_get(parser, s, "num_buckets", int, defaults.num_buckets),
        attack_norm=_get(parser, s, "attack_norm", AttackNorm, defaults.attack_norm),
        epsilons=_get(parser, s, "epsilons", _float_tuple, defaults.epsilons),
        attack_steps=_get(parser, s, "attack_steps", int, defaults.attack_steps),
        random_start=_get_bool(parser, s, "random_start", defaults.random_start),
        histogram_bins=_get(parser, s, "histogram_bins", int, defaults.histogram_bins),
        perturbation_examples=_get(
            parser, s, "perturbation_examples", int, defaults.perturbation_examples
        ),
        halvings=_get(parser, s, "halvings", int, defaults.halvings),
    )


def config_hash(text: str) -> str:
    """
    First 16 hex digits of the SHA-256 of the canonical document.

    Sections and keys are sorted and values stripped, so comments, ordering
    and whitespace do not change the hash.
    """
    parser = _read(text, "<hash>")
    lines = []
    for section in sorted(parser.sections()):
        lines.append(f"[{section}]")
        for key, value in sorted(parser.items(section)):
            lines.append(f"{key}={value.strip()}")
    return hashlib.sha256("\n".join(lines).encode("utf-8")).hexdigest()[:16]


def _read(text: str, source: str) -> configparser.ConfigParser:
    parser = configparser.ConfigParser(interpolation=None)
    try:
        parser.read_string(text, source=source)
    except configparser.Error as exc:
        raise ConfigError(f"Cannot parse {source}: {exc}") from exc
    return parser


def parse_config(
    text: str,
    base_dir: Optional[Path] = None,
    source: str = "<string>",
) -> ExperimentConfig:
    """
    Build an ExperimentConfig from INI text.

    Raises:
        ConfigError: On syntax errors, missing sections, unreadable values,
            missing data files, or values the owning module rejects.
    """
    base = base_dir if base_dir is not None else Path.cwd()
    parser = _read(text, source)
    if not parser.has_section("experiment"):
        raise ConfigError(f"{source}: missing [experiment] section")

    name = parser.get("experiment", "name", fallback=Path(source).stem or "experiment")
    seed = _get(parser, "experiment", "seed", int, 0)
    output_raw = parser.get("experiment", "output_dir", fallback="").strip()
    if output_raw:
        output_dir = Path(output_raw)
    else:
        output_dir = Path(os.environ.get(OUTPUT_ROOT_ENV, DEFAULT_OUTPUT_ROOT)) / name

    try:
        sampler_cfg = _parse_sampler(parser)
        return ExperimentConfig(
            name=name,
            seed=seed,
            output_dir=output_dir,
            dataset=_parse_dataset(parser, base),
            network=_parse_network(parser, seed),
            train=_parse_train(parser, seed, sampler_cfg),
            eval=_parse_eval(parser),
            report_wall_time=_get_bool(parser, "experiment", "report_wall_time", False),
            source=source,
            hash=config_hash(text),
        )
    except ConfigError:
        raise
    except ValueError as exc:
        raise ConfigError(f"{source}: {exc}") from exc


def load_config(name_or_path: Union[str, Path]) -> ExperimentConfig:
    """Load a config file, or a bundled config by name."""
    text, base = resolve_config(name_or_path)
    return parse_config(text, base_dir=base, source=str(name_or_path))


# -----Datasets----------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class ExperimentData(object):
    """Train and test sets, plus the held-out classes when configured."""

    train: LabeledDataset
    test: LabeledDataset
    out: Optional[LabeledDataset] = None
    """Held-out test examples, original labels kept."""


def _read_dataset(
    cfg: DatasetConfig, seed: int
) -> tuple[LabeledDataset, Optional[LabeledDataset]]:
    if cfg.kind is DatasetKind.SYNTH:
        return synth_mixture(cfg.num_classes, cfg.dim, cfg.n_per_class, cfg.spread, seed), None

    if cfg.kind is DatasetKind.CSV:
        assert cfg.csv_path is not None
        return load_csv(cfg.csv_path, cfg.num_classes), None

    assert cfg.train_images is not None and cfg.train_labels is not None
    train = load_idx_pair(cfg.train_images, cfg.train_labels, cfg.num_classes)
    test = None
    if cfg.test_images is not None and cfg.test_labels is not None:
        test = load_idx_pair(cfg.test_images, cfg.test_labels, cfg.num_classes)
    return train, test


def load_datasets(cfg: ExperimentConfig) -> ExperimentData:
    """
    Materialise the configured data.

    Without a dedicated test file the data is split with the experiment seed.
    With held_out_classes, both sides lose those classes (relabelled densely
    from 0) and the held-out test examples become the out set.
    """
    full, test = _read_dataset(cfg.dataset, cfg.seed)
    if cfg.dataset.max_examples is not None:
        full = full.subset(np.arange(min(cfg.dataset.max_examples, len(full))))
    if test is None:
        train, test = split(full, cfg.dataset.test_fraction, cfg.seed)
    else:
        train = full

    if not cfg.dataset.held_out_classes:
        return ExperimentData(train=train, test=test)

    train_in, _ = make_ood_pair(train, cfg.dataset.held_out_classes)
    test_in, test_out = make_ood_pair(test, cfg.dataset.held_out_classes)
    return ExperimentData(train=train_in, test=test_in, out=test_out)
