"""
Unit tests for calibration, AUROC, OOD scoring and adversarial attacks.

Attack tests share one discriminatively trained toy model so the constraint
and monotonicity checks run against a realistic decision boundary.
"""

import itertools
import math

import numpy as np
import pytest

import gmmc
from gmmc import evaluation
from gmmc.errors import ArgumentError
from gmmc.errors import DimensionError
from gmmc.errors import EmptyDatasetError
from gmmc.errors import GammaNotEstimatedError
from gmmc.errors import PreconditionError
from gmmc.evaluation import AttackConfig
from gmmc.evaluation import AttackNorm
from gmmc.evaluation import CalibrationInput
from gmmc.evaluation import MinL2SearchConfig
from gmmc.evaluation import OodScore
from gmmc.network import Activation
from gmmc.network import NetworkSpec
from gmmc.schedule import TrainMode
from gmmc.training import TrainConfig


def _toy_model() -> gmmc.GmmcModel:
    spec = NetworkSpec(
        input_dim=2, widths=(16, 16, 2), activations=(Activation.TANH,) * 2, init_seed=0
    )
    return gmmc.build_model(spec, gmmc.generate_opt_means(2, 2, 4.0))


@pytest.fixture(scope="module")
def toy_data():
    return gmmc.split(gmmc.synth_mixture(2, 2, 200, 0.1, seed=0), 0.2, seed=0)


@pytest.fixture(scope="module")
def trained(toy_data):
    """Discriminatively trained toy model with gamma^2 estimated."""
    train, test = toy_data
    cfg = TrainConfig(epochs=30, batch_size=32, learning_rate=0.01)
    model, _ = gmmc.fit(_toy_model(), train, test, cfg)
    return model


def _identity_model(gamma2: float = 0.5) -> gmmc.GmmcModel:
    """phi(x) = x with centroids (1, 0) and (-1, 0)."""
    spec = NetworkSpec(input_dim=2, widths=(2,), activations=())
    params = gmmc.init_params(spec).replace_values(np.array([1.0, 0.0, 0.0, 1.0, 0.0, 0.0]))
    return gmmc.GmmcModel(
        spec=spec, params=params, centroids=gmmc.generate_opt_means(2, 2, 1.0), gamma2=gamma2
    )


# -----Calibration-------------------------------------------------------------


def test_ece_perfect_predictions_is_zero() -> None:
    ci = CalibrationInput(np.ones(5), np.ones(5, dtype=bool))
    assert gmmc.ece(ci) == 0.0


def test_ece_single_wrong_prediction() -> None:
    ci = CalibrationInput(np.array([0.8]), np.array([False]))
    assert gmmc.ece(ci) == pytest.approx(0.8)


def test_ece_two_predictions_share_a_bucket() -> None:
    """Test |0.5 - 0.75| = 0.25 when 0.7 and 0.8 fall into one bucket."""
    ci = CalibrationInput(np.array([0.7, 0.8]), np.array([True, False]), num_buckets=2)
    assert gmmc.ece(ci) == pytest.approx(0.25)


def test_ece_is_permutation_invariant() -> None:
    rng = np.random.default_rng(0)
    conf = rng.uniform(0, 1, 200)
    correct = rng.uniform(0, 1, 200) < conf
    order = rng.permutation(200)

    a = gmmc.ece(CalibrationInput(conf, correct, 10))
    b = gmmc.ece(CalibrationInput(conf[order], correct[order], 10))
    assert a == b
    assert 0.0 <= a <= 1.0


def test_bucket_edges_are_left_closed_and_last_is_closed() -> None:
    ci = CalibrationInput(np.array([0.0, 0.5, 1.0]), np.array([True, True, True]), 2)
    buckets = gmmc.calibration_buckets(ci)

    assert [b.count for b in buckets] == [1, 2]
    assert (buckets[1].lower, buckets[1].upper) == (0.5, 1.0)
    assert buckets[1].confidence == pytest.approx(0.75)


def test_empty_buckets_report_zero() -> None:
    ci = CalibrationInput(np.array([0.95]), np.array([True]), 4)
    buckets = gmmc.calibration_buckets(ci)
    assert [(b.count, b.accuracy, b.confidence) for b in buckets[:3]] == [(0, 0.0, 0.0)] * 3


def _reference_ece(confidences, correct, num_buckets: int) -> float:
    buckets: dict[int, list[tuple[float, bool]]] = {}
    for c, ok in zip(confidences.tolist(), correct.tolist()):
        buckets.setdefault(min(math.floor(c * num_buckets), num_buckets - 1), []).append((c, ok))
    total = 0.0
    for members in buckets.values():
        acc = sum(ok for _, ok in members) / len(members)
        conf = math.fsum(c for c, _ in members) / len(members)
        total += len(members) / len(confidences) * abs(acc - conf)
    return total


def test_ece_matches_reference_on_random_cases() -> None:
    """Test ECE against a direct bucket-by-bucket computation on 1000 random inputs."""
    rng = np.random.default_rng(12)
    for _ in range(1000):
        n = int(rng.integers(1, 120))
        num_buckets = int(rng.integers(1, 25))
        conf = rng.uniform(0, 1, n)
        # Some confidences sit exactly on bucket edges, including 0 and 1.
        edges = rng.random(n) < 0.2
        conf[edges] = rng.integers(0, num_buckets + 1, int(edges.sum())) / num_buckets
        correct = rng.random(n) < conf

        ci = CalibrationInput(conf, correct, num_buckets)
        assert gmmc.ece(ci) == pytest.approx(_reference_ece(conf, correct, num_buckets), abs=1e-12)
        assert sum(b.count for b in gmmc.calibration_buckets(ci)) == n


@pytest.mark.parametrize(
    ("conf", "correct", "buckets", "error"),
    [
        ([0.5, 0.6], [True], 10, DimensionError),
        ([], [], 10, EmptyDatasetError),
        ([1.2], [True], 10, ArgumentError),
        ([np.nan], [True], 10, ArgumentError),
        ([0.5], [True], 0, ArgumentError),
    ],
)
def test_calibration_input_validation(conf, correct, buckets, error) -> None:
    with pytest.raises(error):
        CalibrationInput(np.array(conf, dtype=float), np.array(correct, dtype=bool), buckets)


def test_calibration_input_from_model(trained, toy_data) -> None:
    _, test = toy_data
    ci = gmmc.calibration_input(trained, test, 10)

    assert ci.confidences.shape == (len(test),)
    assert np.all(ci.confidences >= 0.5)
    assert np.mean(ci.correct) == pytest.approx(gmmc.accuracy(trained, test))


# -----AUROC-------------------------------------------------------------------


def _brute_force_auroc(scores_in, scores_out) -> float:
    wins = sum(
        1.0 if a > b else 0.5 if a == b else 0.0
        for a, b in itertools.product(scores_in, scores_out)
    )
    return wins / (len(scores_in) * len(scores_out))


def test_auroc_examples() -> None:
    assert gmmc.auroc([5, 6, 7], [1, 2]) == 1.0
    assert gmmc.auroc([3, 3, 3], [3, 3]) == 0.5
    assert gmmc.auroc([3, 1], [2, 0]) == 0.75


@pytest.mark.parametrize("seed", range(5))
def test_auroc_matches_pairwise_count_exactly(seed: int) -> None:
    """Test exact agreement with the pairwise definition, ties included."""
    rng = np.random.default_rng(seed)
    scores_in = rng.integers(0, 15, size=int(rng.integers(1, 200)))
    scores_out = rng.integers(0, 15, size=int(rng.integers(1, 200)))
    assert gmmc.auroc(scores_in, scores_out) == _brute_force_auroc(scores_in, scores_out)


def test_auroc_matches_pairwise_count_on_random_cases() -> None:
    rng = np.random.default_rng(13)
    for case in range(1000):
        n_in, n_out = int(rng.integers(1, 40)), int(rng.integers(1, 40))
        if case % 2:
            scores_in = rng.integers(0, 6, size=n_in).astype(float)
            scores_out = rng.integers(0, 6, size=n_out).astype(float)
        else:
            scores_in = rng.standard_normal(n_in)
            scores_out = rng.standard_normal(n_out) - 0.5
        assert gmmc.auroc(scores_in, scores_out) == _brute_force_auroc(scores_in, scores_out)


def test_auroc_is_antisymmetric_without_ties() -> None:
    rng = np.random.default_rng(7)
    a, b = rng.standard_normal(50), rng.standard_normal(60)
    assert gmmc.auroc(a, b) + gmmc.auroc(b, a) == pytest.approx(1.0)


def test_auroc_rejects_empty_and_nan() -> None:
    with pytest.raises(EmptyDatasetError):
        gmmc.auroc([], [1.0])
    with pytest.raises(ArgumentError):
        gmmc.auroc([np.nan], [1.0])


# -----OOD---------------------------------------------------------------------


@pytest.mark.parametrize("score", list(OodScore))
def test_identical_sets_give_half(score: OodScore, trained, toy_data) -> None:
    _, test = toy_data
    result = gmmc.ood_evaluate(trained, test, test, score)

    assert result.auroc == 0.5
    assert result.histogram.in_counts.sum() == len(test)
    assert result.histogram.out_counts.sum() == len(test)
    assert result.histogram.edges.shape == (21,)


def test_logpx_separates_points_far_from_every_centroid() -> None:
    """Test that inputs near centroids score higher log-density than inputs between them."""
    m = _identity_model()
    near = gmmc.LabeledDataset(
        inputs=np.array([[0.9, 0.0], [-0.9, 0.05], [1.0, -0.05]]),
        labels=np.array([0, 1, 0]),
        num_classes=2,
    )
    far = gmmc.LabeledDataset(
        inputs=np.array([[0.0, 1.0], [0.0, -1.0]]), labels=np.array([0, 0]), num_classes=2
    )

    result = gmmc.ood_evaluate(m, near, far, OodScore.LOGPX, num_bins=5)
    assert result.auroc == 1.0
    assert result.scores_in.shape == (3,) and result.scores_out.shape == (2,)


def test_ood_needs_gamma2_and_data(toy_data) -> None:
    _, test = toy_data
    with pytest.raises(GammaNotEstimatedError):
        gmmc.ood_evaluate(_toy_model(), test, test, OodScore.LOGPX)
    empty = test.subset([])
    with pytest.raises(EmptyDatasetError):
        gmmc.ood_evaluate(_identity_model(), test, empty, OodScore.PREDICTIVE)


# -----PGD---------------------------------------------------------------------


def test_zero_epsilon_returns_inputs(trained, toy_data) -> None:
    _, test = toy_data
    adv = gmmc.pgd_attack(trained, test.inputs, test.labels, AttackConfig(epsilon=0.0))
    assert np.array_equal(adv, test.inputs)
    assert gmmc.robust_accuracy(trained, test, AttackConfig(epsilon=0.0)) == gmmc.accuracy(
        trained, test
    )


@pytest.mark.parametrize("norm", list(AttackNorm))
@pytest.mark.parametrize("random_start", [False, True])
def test_attacks_respect_ball_and_box_exactly(trained, toy_data, norm, random_start) -> None:
    """Test that every attacked coordinate stays inside the epsilon ball and [-1, 1]."""
    _, test = toy_data
    eps = 0.3
    cfg = AttackConfig(norm=norm, epsilon=eps, steps=10, random_start=random_start, seed=1)
    adv = gmmc.pgd_attack(trained, test.inputs, test.labels, cfg)

    assert np.all(np.abs(adv) <= 1.0)
    if norm is AttackNorm.LINF:
        assert np.all(np.abs(adv - test.inputs) <= eps)
    else:
        assert np.all(np.linalg.norm(adv - test.inputs, axis=1) <= eps)


def test_single_input_attack_keeps_shape(trained, toy_data) -> None:
    _, test = toy_data
    adv = gmmc.pgd_attack(trained, test.inputs[0], int(test.labels[0]), AttackConfig(epsilon=0.1))
    assert adv.shape == (2,)


def test_robust_accuracy_non_increasing_in_epsilon(trained, toy_data) -> None:
    _, test = toy_data
    accuracies = [
        gmmc.robust_accuracy(trained, test, AttackConfig(epsilon=eps, steps=20))
        for eps in (0.0, 0.05, 0.1, 0.2)
    ]
    assert all(a >= b for a, b in zip(accuracies, accuracies[1:]))


def test_attack_validation(trained) -> None:
    with pytest.raises(ArgumentError):
        AttackConfig(epsilon=-0.1)
    with pytest.raises(ArgumentError):
        AttackConfig(epsilon=0.1, steps=0)
    with pytest.raises(ArgumentError):
        AttackConfig(epsilon=0.1, step_size=0.0)
    with pytest.raises(ArgumentError):
        gmmc.pgd_attack(trained, np.array([1.5, 0.0]), 0, AttackConfig(epsilon=0.1))
    with pytest.raises(DimensionError):
        gmmc.pgd_attack(trained, np.zeros((2, 2)), [0], AttackConfig(epsilon=0.1))
    with pytest.raises(GammaNotEstimatedError):
        gmmc.pgd_attack(_toy_model(), np.zeros(2), 0, AttackConfig(epsilon=0.1))


def test_default_step_size_is_tenth_of_epsilon() -> None:
    assert AttackConfig(epsilon=0.2).effective_step_size == pytest.approx(0.02)
    assert AttackConfig(epsilon=0.2, step_size=0.5).effective_step_size == 0.5


# -----Minimal L2 perturbation-------------------------------------------------


def _correct_examples(m, ds, count):
    predicted = gmmc.classify(m, ds.inputs)
    return [i for i in range(len(ds)) if predicted[i] == ds.labels[i]][:count]


def test_found_perturbation_misclassifies(trained, toy_data) -> None:
    _, test = toy_data
    for i in _correct_examples(trained, test, 5):
        found = gmmc.min_l2_perturbation(trained, test.inputs[i], int(test.labels[i]))
        assert found is not None
        assert gmmc.classify(trained, found.x_adv) != test.labels[i]
        assert found.l2 == pytest.approx(np.linalg.norm(found.x_adv - test.inputs[i]))
        assert found.l2 <= found.epsilon + 1e-12


def test_more_halvings_never_increase_the_norm(trained, toy_data) -> None:
    _, test = toy_data
    i = _correct_examples(trained, test, 1)[0]
    x, y = test.inputs[i], int(test.labels[i])

    norms = [
        gmmc.min_l2_perturbation(trained, x, y, MinL2SearchConfig(halvings=h, steps=20)).l2
        for h in (0, 2, 4, 8)
    ]
    assert all(a >= b for a, b in zip(norms, norms[1:]))


def test_norm_within_factor_two_of_grid_search(trained, toy_data) -> None:
    """Test the bisection result against a dense grid of fixed-radius attacks."""
    _, test = toy_data
    grid = np.linspace(0.01, 2.0 * np.sqrt(2.0), 300)
    for i in _correct_examples(trained, test, 5):
        x, y = test.inputs[i], int(test.labels[i])
        found = gmmc.min_l2_perturbation(trained, x, y, MinL2SearchConfig(steps=20))
        oracle = min(
            float(np.linalg.norm(adv - x))
            for eps in grid
            for adv in [gmmc.pgd_attack(trained, x, y, AttackConfig(AttackNorm.L2, eps, steps=20))]
            if gmmc.classify(trained, adv) != y
        )
        assert found is not None
        assert oracle / 2.0 <= found.l2 <= 2.0 * oracle


def test_misclassified_input_rejected(trained) -> None:
    x = np.array([0.77, 0.0])
    wrong = 1 - int(gmmc.classify(trained, x))
    with pytest.raises(PreconditionError):
        gmmc.min_l2_perturbation(trained, x, wrong)


def test_unreachable_boundary_returns_none() -> None:
    """Test that a search capped below the boundary distance finds nothing."""
    m = _identity_model()
    cfg = MinL2SearchConfig(max_epsilon=0.1)
    assert gmmc.min_l2_perturbation(m, np.array([0.9, 0.0]), 0, cfg) is None


def test_min_l2_perturbations_rows(trained, toy_data) -> None:
    _, test = toy_data
    cfg = MinL2SearchConfig(halvings=4, steps=10)
    rows = gmmc.min_l2_perturbations(trained, test, cfg, limit=6)

    assert len(rows) <= 6
    assert all(0 <= i < 6 for i, _ in rows)
    assert all(l2 is None or l2 > 0 for _, l2 in rows)


@pytest.mark.slow
def test_generative_training_is_at_least_as_robust(toy_data) -> None:
    """Test robust accuracy of a generatively trained model against a discriminative one."""
    train, test = toy_data
    common = dict(epochs=30, batch_size=32, learning_rate=0.01)
    disc, _ = gmmc.fit(_toy_model(), train, test, TrainConfig(**common))
    gen, _ = gmmc.fit(
        _toy_model(),
        train,
        test,
        TrainConfig(
            mode=TrainMode.GENERATIVE,
            sampler=gmmc.SamplerConfig(num_steps=20, step_size=0.01),
            buffer_capacity=1000,
            **common,
        ),
    )
    cfg = AttackConfig(epsilon=0.2, steps=40)
    assert gmmc.robust_accuracy(gen, test, cfg) >= gmmc.robust_accuracy(disc, test, cfg)


@pytest.mark.slow
def test_held_out_class_scores_lower_logpx() -> None:
    """Test that a class never seen in training is separated by logpx."""
    cfg = gmmc.load_config("toy4-ood")
    data = gmmc.load_datasets(cfg)
    spec = cfg.network.spec_for(data.train.input_dim)
    m = gmmc.build_model(
        spec, gmmc.generate_opt_means(data.train.num_classes, spec.feature_dim, cfg.network.scale)
    )
    m, _ = gmmc.fit(m, data.train, data.test, cfg.train)

    result = gmmc.ood_evaluate(m, data.test, data.out, OodScore.LOGPX)
    assert result.auroc >= 0.70
