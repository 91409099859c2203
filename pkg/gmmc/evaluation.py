"""
Calibration, out-of-distribution detection and adversarial robustness.

ECE buckets confidences into M equal-width intervals [m/M, (m+1)/M), the last
one closed at 1. AUROC is the Mann-Whitney statistic with half credit for
ties, computed from average ranks so it matches the pairwise count exactly.

Attacks maximise the cross-entropy of the posterior (estimated gamma^2) at
the true label with projected gradient ascent. Every attacked point lies in
the epsilon ball around its origin and in [-1, 1]^D.
"""

import enum
import logging
import math
from dataclasses import dataclass
from typing import Optional
from typing import Sequence

import numpy as np
from numpy.typing import ArrayLike
from numpy.typing import NDArray
from scipy.special import softmax
from scipy.stats import rankdata

from gmmc import network
from gmmc.centroids import squared_distances
from gmmc.data import LabeledDataset
from gmmc.errors import ArgumentError
from gmmc.errors import AttackError
from gmmc.errors import DimensionError
from gmmc.errors import EmptyDatasetError
from gmmc.errors import GammaNotEstimatedError
from gmmc.errors import PreconditionError
from gmmc.model import GmmcModel
from gmmc.model import approx_mass_score
from gmmc.model import classify
from gmmc.model import logpx_score
from gmmc.model import posterior
from gmmc.model import predictive_score

__all__ = [
    "DEFAULT_NUM_BUCKETS",
    "DEFAULT_ATTACK_STEPS",
    "DEFAULT_HALVINGS",
    "CalibrationInput",
    "CalibrationBucket",
    "calibration_input",
    "calibration_buckets",
    "ece",
    "auroc",
    "OodScore",
    "ScoreHistogram",
    "OodResult",
    "ood_evaluate",
    "AttackNorm",
    "AttackConfig",
    "pgd_attack",
    "robust_accuracy",
    "MinL2SearchConfig",
    "Perturbation",
    "min_l2_perturbation",
    "min_l2_perturbations",
]

logger = logging.getLogger(__name__)

DEFAULT_NUM_BUCKETS = 20
DEFAULT_ATTACK_STEPS = 40
DEFAULT_HALVINGS = 12
_CHUNK = 4096


# -----Calibration-------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class CalibrationInput(object):
    """Prediction confidences, whether each prediction was right, and M."""

    confidences: NDArray[np.float64]
    correct: NDArray[np.bool_]
    num_buckets: int = DEFAULT_NUM_BUCKETS

    def __post_init__(self) -> None:
        confidences = np.asarray(self.confidences, dtype=np.float64)
        correct = np.asarray(self.correct, dtype=bool)
        if confidences.ndim != 1 or confidences.shape != correct.shape:
            raise DimensionError(
                f"confidences {confidences.shape} and correct {correct.shape} "
                "must be parallel vectors"
            )
        if confidences.size == 0:
            raise EmptyDatasetError("Calibration needs at least one prediction")
        if np.any(~np.isfinite(confidences)) or np.any(
            (confidences < 0.0) | (confidences > 1.0)
        ):
            raise ArgumentError("Confidences must lie in [0, 1]")
        if self.num_buckets < 1:
            raise ArgumentError(f"num_buckets must be >= 1, got {self.num_buckets}")
        object.__setattr__(self, "confidences", confidences)
        object.__setattr__(self, "correct", correct)


@dataclass(frozen=True)
class CalibrationBucket(object):
    """One row of a reliability diagram. Empty buckets report 0 accuracy and confidence."""

    index: int
    lower: float
    upper: float
    count: int
    accuracy: float
    confidence: float


def calibration_input(
    m: GmmcModel, dataset: LabeledDataset, num_buckets: int = DEFAULT_NUM_BUCKETS
) -> CalibrationInput:
    """Max-posterior confidence and correctness of every prediction on ``dataset``."""
    if len(dataset) == 0:
        raise EmptyDatasetError(f"Dataset '{dataset.name}' is empty")
    confidences = []
    correct = []
    for start in range(0, len(dataset), _CHUNK):
        probs = posterior(m, dataset.inputs[start : start + _CHUNK])
        confidences.append(np.max(probs, axis=1))
        correct.append(np.argmax(probs, axis=1) == dataset.labels[start : start + _CHUNK])
    return CalibrationInput(
        np.concatenate(confidences), np.concatenate(correct), num_buckets
    )


def _bucket_indices(ci: CalibrationInput) -> NDArray[np.int64]:
    indices = np.floor(ci.confidences * ci.num_buckets).astype(np.int64)
    return np.minimum(indices, ci.num_buckets - 1)


def calibration_buckets(ci: CalibrationInput) -> tuple[CalibrationBucket, ...]:
    # Bucket statistics must not depend on the order of the predictions.
    indices = _bucket_indices(ci)
    rows = []
    for b in range(ci.num_buckets):
        members = indices == b
        count = int(np.sum(members))
        rows.append(
            CalibrationBucket(
                index=b,
                lower=b / ci.num_buckets,
                upper=(b + 1) / ci.num_buckets,
                count=count,
                accuracy=int(np.count_nonzero(ci.correct[members])) / count if count else 0.0,
                confidence=math.fsum(ci.confidences[members].tolist()) / count if count else 0.0,
            )
        )
    return tuple(rows)


def ece(ci: CalibrationInput) -> float:
    """Expected calibration error: sum over buckets of |B|/n * |acc(B) - conf(B)|."""
    n = ci.confidences.shape[0]
    return math.fsum(
        bucket.count / n * abs(bucket.accuracy - bucket.confidence)
        for bucket in calibration_buckets(ci)
        if bucket.count
    )


# -----Out-of-distribution detection-------------------------------------------


def auroc(scores_in: ArrayLike, scores_out: ArrayLike) -> float:
    """
    Probability that an in-distribution score beats an out-of-distribution one.

    Equal to (#{in > out} + 0.5 * #{in == out}) / (n_in * n_out).
    """
    s_in = np.asarray(scores_in, dtype=np.float64).ravel()
    s_out = np.asarray(scores_out, dtype=np.float64).ravel()
    if s_in.size == 0 or s_out.size == 0:
        raise EmptyDatasetError("auroc needs non-empty in and out score lists")
    if np.any(np.isnan(s_in)) or np.any(np.isnan(s_out)):
        raise ArgumentError("auroc scores must not be NaN")

    # Average ranks are half-integers, so the rank sum is exact in float64.
    ranks = rankdata(np.concatenate([s_in, s_out]), method="average")
    n_in = s_in.size
    u_statistic = float(np.sum(ranks[:n_in])) - n_in * (n_in + 1) / 2.0
    return u_statistic / (n_in * s_out.size)


class OodScore(str, enum.Enum):
    LOGPX = "logpx"
    PREDICTIVE = "predictive"
    APPROX_MASS = "approx_mass"


_SCORE_FUNCTIONS = {
    OodScore.LOGPX: logpx_score,
    OodScore.PREDICTIVE: predictive_score,
    OodScore.APPROX_MASS: approx_mass_score,
}


@dataclass(frozen=True, eq=False)
class ScoreHistogram(object):
    """Counts of in- and out-of-distribution scores over shared bin edges."""

    edges: NDArray[np.float64]
    in_counts: NDArray[np.int64]
    out_counts: NDArray[np.int64]


@dataclass(frozen=True, eq=False)
class OodResult(object):
    score: OodScore
    auroc: float
    histogram: ScoreHistogram
    scores_in: NDArray[np.float64]
    scores_out: NDArray[np.float64]


def _scores(m: GmmcModel, ds: LabeledDataset, score: OodScore) -> NDArray[np.float64]:
    func = _SCORE_FUNCTIONS[score]
    parts = [
        np.atleast_1d(np.asarray(func(m, ds.inputs[start : start + _CHUNK])))
        for start in range(0, len(ds), _CHUNK)
    ]
    return np.concatenate(parts).astype(np.float64)


def ood_evaluate(
    m: GmmcModel,
    in_set: LabeledDataset,
    out_set: LabeledDataset,
    score: OodScore,
    num_bins: int = 20,
) -> OodResult:
    """
    Score both sets with one of the model's OOD scores and compare them.

    Higher scores mean "more in-distribution" for every score function.

    Raises:
        GammaNotEstimatedError: If the model has no gamma^2 estimate.
        EmptyDatasetError: If either set is empty.
    """
    if m.gamma2 is None:
        raise GammaNotEstimatedError("OOD evaluation needs an estimated gamma^2")
    if len(in_set) == 0 or len(out_set) == 0:
        raise EmptyDatasetError("OOD evaluation needs non-empty in and out sets")
    score = OodScore(score)

    scores_in = _scores(m, in_set, score)
    scores_out = _scores(m, out_set, score)
    edges = np.histogram_bin_edges(np.concatenate([scores_in, scores_out]), bins=num_bins)
    in_counts, _ = np.histogram(scores_in, bins=edges)
    out_counts, _ = np.histogram(scores_out, bins=edges)
    result = OodResult(
        score=score,
        auroc=auroc(scores_in, scores_out),
        histogram=ScoreHistogram(
            edges=edges,
            in_counts=in_counts.astype(np.int64),
            out_counts=out_counts.astype(np.int64),
        ),
        scores_in=scores_in,
        scores_out=scores_out,
    )
    logger.info(f"OOD {score.value}: AUROC {result.auroc:.4f}")
    return result


# -----Attacks-----------------------------------------------------------------


class AttackNorm(str, enum.Enum):
    LINF = "Linf"
    L2 = "L2"


@dataclass(frozen=True)
class AttackConfig(object):
    norm: AttackNorm = AttackNorm.LINF
    epsilon: float = 0.0
    steps: int = DEFAULT_ATTACK_STEPS

    step_size: Optional[float] = None
    """Defaults to epsilon / 10."""

    random_start: bool = False
    seed: int = 0
    """Seeds the random start."""

    def __post_init__(self) -> None:
        object.__setattr__(self, "norm", AttackNorm(self.norm))
        if not (self.epsilon >= 0 and math.isfinite(self.epsilon)):
            raise ArgumentError(f"epsilon must be finite and >= 0, got {self.epsilon}")
        if self.steps < 1:
            raise ArgumentError(f"steps must be >= 1, got {self.steps}")
        if self.step_size is not None and not self.step_size > 0:
            raise ArgumentError(f"step_size must be positive, got {self.step_size}")

    @property
    def effective_step_size(self) -> float:
        return self.step_size if self.step_size is not None else self.epsilon / 10.0


def _loss_input_gradient(
    m: GmmcModel, x: NDArray[np.float64], y: NDArray[np.int64]
) -> NDArray[np.float64]:
    """
    d/dx of -log p(y|x) for a batch, divided by 1 - p(y|x) per example.

    The cross-entropy gradient is sum_{k != y} p_k (mu_k - mu_y) / gamma^2
    pulled back through phi. Normalising the wrong-class weights keeps the
    direction when p(y|x) rounds to 1; attacks only use the direction.
    """
    if m.gamma2 is None:
        raise GammaNotEstimatedError("Attacks use the estimated gamma^2; estimate it first")
    tape = network.record(m.params, m.spec, x)
    phi = tape.output
    logits = -squared_distances(m.centroids, phi) / (2.0 * m.gamma2)
    logits[np.arange(y.shape[0]), y] = -np.inf
    wrong = softmax(logits, axis=-1)
    upstream = (wrong @ m.centroids.means - m.centroids.means[y]) / m.gamma2
    _, grad = tape.backward(upstream, need_params=False)
    if not np.all(np.isfinite(grad)):
        raise AttackError("Non-finite attack gradient")
    return grad


def _project(
    x: NDArray[np.float64], origin: NDArray[np.float64], norm: AttackNorm, epsilon: float
) -> NDArray[np.float64]:
    """Project onto the epsilon ball around ``origin`` intersected with [-1, 1]^D."""
    if norm is AttackNorm.LINF:
        x = np.clip(np.clip(x, origin - epsilon, origin + epsilon), -1.0, 1.0)
        # Rounding in origin +/- epsilon can leave a coordinate one ulp outside.
        bad = np.abs(x - origin) > epsilon
        while np.any(bad):
            x = np.where(bad, np.nextafter(x, origin), x)
            bad = np.abs(x - origin) > epsilon
        return x

    delta = x - origin
    lengths = np.linalg.norm(delta, axis=1, keepdims=True)
    scale = np.where(lengths > epsilon, epsilon / np.maximum(lengths, 1e-300), 1.0)
    x = np.clip(origin + delta * scale, -1.0, 1.0)
    bad = np.linalg.norm(x - origin, axis=1) > epsilon
    while np.any(bad):
        x[bad] = origin[bad] + (x[bad] - origin[bad]) * (1.0 - 1e-9)
        bad = np.linalg.norm(x - origin, axis=1) > epsilon
    return x


def pgd_attack(
    m: GmmcModel, x: ArrayLike, y_true: ArrayLike, cfg: AttackConfig
) -> NDArray[np.float64]:
    """
    Projected gradient ascent on the cross-entropy at the true label.

    Linf steps move by step_size * sign(grad); L2 steps by step_size along the
    normalised gradient. Takes a (D,) input with an int label or an (N, D)
    batch with (N,) labels; returns the same shape.

    Raises:
        ArgumentError: If an input lies outside [-1, 1]^D.
        AttackError: If a gradient becomes non-finite.
    """
    single = np.ndim(x) == 1
    origin = np.atleast_2d(np.asarray(x, dtype=np.float64))
    labels = np.atleast_1d(np.asarray(y_true, dtype=np.int64))
    if labels.shape != (origin.shape[0],):
        raise DimensionError(f"{origin.shape[0]} inputs but labels of shape {labels.shape}")
    if np.any(np.abs(origin) > 1.0):
        raise ArgumentError("Attack inputs must lie in [-1, 1]^D")

    if cfg.epsilon == 0.0:
        return origin[0].copy() if single else origin.copy()

    adv = origin.copy()
    if cfg.random_start:
        rng = np.random.default_rng(cfg.seed)
        adv = _project(
            adv + rng.uniform(-cfg.epsilon, cfg.epsilon, size=adv.shape),
            origin, cfg.norm, cfg.epsilon,
        )

    step = cfg.effective_step_size
    for _ in range(cfg.steps):
        grad = _loss_input_gradient(m, adv, labels)
        if cfg.norm is AttackNorm.LINF:
            adv = adv + step * np.sign(grad)
        else:
            lengths = np.linalg.norm(grad, axis=1, keepdims=True)
            adv = adv + step * np.divide(
                grad, lengths, out=np.zeros_like(grad), where=lengths > 0
            )
        adv = _project(adv, origin, cfg.norm, cfg.epsilon)

    return adv[0] if single else adv


def robust_accuracy(m: GmmcModel, dataset: LabeledDataset, cfg: AttackConfig) -> float:
    """Fraction of ``dataset`` still classified correctly after pgd_attack."""
    if len(dataset) == 0:
        raise EmptyDatasetError(f"Dataset '{dataset.name}' is empty")
    correct = 0
    for start in range(0, len(dataset), _CHUNK):
        x = dataset.inputs[start : start + _CHUNK]
        y = dataset.labels[start : start + _CHUNK]
        adv = pgd_attack(m, x, y, cfg)
        correct += int(np.sum(classify(m, adv) == y))
    accuracy = correct / len(dataset)
    logger.info(f"Robust accuracy at {cfg.norm.value} eps={cfg.epsilon:g}: {accuracy:.4f}")
    return accuracy


# -----Minimal L2 perturbation-------------------------------------------------


@dataclass(frozen=True)
class MinL2SearchConfig(object):
    """Binary search over the L2 radius of a PGD attack."""

    max_epsilon: Optional[float] = None
    """Largest radius tried; None means the diameter of [-1, 1]^D."""

    halvings: int = DEFAULT_HALVINGS
    steps: int = DEFAULT_ATTACK_STEPS

    def __post_init__(self) -> None:
        if self.max_epsilon is not None and not self.max_epsilon > 0:
            raise ArgumentError(f"max_epsilon must be positive, got {self.max_epsilon}")
        if self.halvings < 0:
            raise ArgumentError(f"halvings must be >= 0, got {self.halvings}")
        if self.steps < 1:
            raise ArgumentError(f"steps must be >= 1, got {self.steps}")


@dataclass(frozen=True, eq=False)
class Perturbation(object):
    x_adv: NDArray[np.float64]
    l2: float
    """||x_adv - x||_2."""

    epsilon: float
    """Search radius that produced x_adv."""


def _attempt(
    m: GmmcModel, x: NDArray[np.float64], y: int, epsilon: float, steps: int
) -> Optional[Perturbation]:
    cfg = AttackConfig(norm=AttackNorm.L2, epsilon=epsilon, steps=steps)
    adv = pgd_attack(m, x, y, cfg)
    if classify(m, adv) == y:
        return None
    return Perturbation(x_adv=adv, l2=float(np.linalg.norm(adv - x)), epsilon=epsilon)


def min_l2_perturbation(
    m: GmmcModel,
    x: ArrayLike,
    y_true: int,
    search_cfg: Optional[MinL2SearchConfig] = None,
) -> Optional[Perturbation]:
    """
    Smallest successful L2 perturbation found by bisecting the attack radius.

    Starts at max_epsilon; returns None if even that fails. Each halving
    attacks at the midpoint of the current bracket and keeps the successful
    point with the smallest norm, so more halvings never give a larger norm.

    Raises:
        PreconditionError: If ``x`` is already misclassified.
    """
    cfg = search_cfg if search_cfg is not None else MinL2SearchConfig()
    x_arr = np.asarray(x, dtype=np.float64)
    if x_arr.ndim != 1:
        raise DimensionError("min_l2_perturbation takes a single (D,) input")
    if classify(m, x_arr) != y_true:
        raise PreconditionError(f"Input is already misclassified (label {y_true})")

    hi = cfg.max_epsilon if cfg.max_epsilon is not None else 2.0 * math.sqrt(x_arr.size)
    best = _attempt(m, x_arr, y_true, hi, cfg.steps)
    if best is None:
        return None

    lo = 0.0
    for _ in range(cfg.halvings):
        mid = 0.5 * (lo + hi)
        found = _attempt(m, x_arr, y_true, mid, cfg.steps)
        if found is None:
            lo = mid
            continue
        hi = mid
        if found.l2 < best.l2:
            best = found
    return best


def min_l2_perturbations(
    m: GmmcModel,
    dataset: LabeledDataset,
    search_cfg: Optional[MinL2SearchConfig] = None,
    limit: Optional[int] = None,
) -> list[tuple[int, Optional[float]]]:
    """
    (example index, norm or None) for correctly classified examples.

    Misclassified examples are skipped.
    """
    rows: list[tuple[int, Optional[float]]] = []
    indices: Sequence[int] = range(len(dataset) if limit is None else min(limit, len(dataset)))
    for i in indices:
        x, y = dataset.inputs[i], int(dataset.labels[i])
        if classify(m, x) != y:
            continue
        found = min_l2_perturbation(m, x, y, search_cfg)
        rows.append((i, None if found is None else found.l2))
    return rows
