"""
Unit tests for the classifier core.

Covers energies and posteriors, the gamma^2 estimate, classification and the
three out-of-distribution scores.
"""

import math

import numpy as np
import pytest

import gmmc
from gmmc.errors import ArgumentError
from gmmc.errors import ClassIndexError
from gmmc.errors import DegenerateVarianceError
from gmmc.errors import DimensionError
from gmmc.errors import EmptyDatasetError
from gmmc.errors import GammaNotEstimatedError
from gmmc.model import GammaMode
from gmmc.network import Activation
from gmmc.network import NetworkSpec


def _model(C: int = 3, gamma2=None) -> gmmc.GmmcModel:
    spec = NetworkSpec(input_dim=2, widths=(8, 2), activations=(Activation.TANH,), init_seed=5)
    m = gmmc.build_model(spec, gmmc.generate_opt_means(C, 2, 2.0))
    return gmmc.with_gamma2(m, gamma2)


def _identity_model(C: int = 2, S: float = 1.0) -> gmmc.GmmcModel:
    """One linear layer with identity weights, so phi(x) = x."""
    spec = NetworkSpec(input_dim=2, widths=(2,), activations=())
    params = gmmc.init_params(spec).replace_values(np.array([1.0, 0.0, 0.0, 1.0, 0.0, 0.0]))
    return gmmc.GmmcModel(spec=spec, params=params, centroids=gmmc.generate_opt_means(C, 2, S))


def test_energy_matches_definition() -> None:
    """Test that energy is half the squared feature distance over gamma^2."""
    m = _model(gamma2=0.25)
    x = np.array([0.3, -0.4])
    phi = gmmc.features(m, x)
    for y in range(3):
        d2 = float(np.sum((phi - m.centroids.means[y]) ** 2))
        assert gmmc.energy(m, x, y) == pytest.approx(d2 / 2)
        assert gmmc.energy(m, x, y, GammaMode.ESTIMATED) == pytest.approx(d2 / 0.5)


def test_energy_rejects_bad_class_and_batches() -> None:
    m = _model()
    with pytest.raises(ClassIndexError):
        gmmc.energy(m, np.zeros(2), 3)
    with pytest.raises(ClassIndexError):
        gmmc.energy(m, np.zeros(2), -1)
    with pytest.raises(DimensionError):
        gmmc.energy(m, np.zeros((2, 2)), 0)


def test_energies_need_estimated_gamma2() -> None:
    m = _model()
    with pytest.raises(GammaNotEstimatedError):
        gmmc.energies(m, np.zeros(2))
    assert gmmc.energies(m, np.zeros(2), GammaMode.UNIT).shape == (3,)


def test_posterior_sums_to_one_and_is_stable() -> None:
    """Test that posteriors are finite simplex points even for tiny gamma^2."""
    m = _model(gamma2=1e-8)
    x = np.random.default_rng(0).uniform(-1, 1, size=(10, 2))
    p = gmmc.posterior(m, x)
    assert np.all(np.isfinite(p))
    np.testing.assert_allclose(p.sum(axis=1), 1.0)


def test_classify_agrees_with_posterior_argmax() -> None:
    m = _model(gamma2=0.7)
    x = np.random.default_rng(1).uniform(-1, 1, size=(20, 2))
    np.testing.assert_array_equal(gmmc.classify(m, x), np.argmax(gmmc.posterior(m, x), axis=1))
    assert isinstance(gmmc.classify(m, x[0]), int)


def test_classify_ties_go_to_lowest_index() -> None:
    """Test that a point equidistant from both centroids is class 0."""
    m = _identity_model()
    assert gmmc.classify(m, np.array([0.0, 0.5])) == 0


def test_classify_ignores_gamma2() -> None:
    x = np.random.default_rng(2).uniform(-1, 1, size=(15, 2))
    np.testing.assert_array_equal(
        gmmc.classify(_model(gamma2=None), x), gmmc.classify(_model(gamma2=3.0), x)
    )


def test_accuracy_on_identity_model() -> None:
    m = _identity_model()
    ds = gmmc.LabeledDataset(
        inputs=np.array([[0.9, 0.0], [-0.9, 0.0], [0.5, 0.1], [0.5, 0.1]]),
        labels=np.array([0, 1, 0, 1]),
        num_classes=2,
    )
    assert gmmc.accuracy(m, ds) == 0.75


def test_accuracy_rejects_empty_dataset() -> None:
    ds = gmmc.LabeledDataset(inputs=np.zeros((0, 2)), labels=np.zeros(0), num_classes=2)
    with pytest.raises(EmptyDatasetError):
        gmmc.accuracy(_model(), ds)


def test_estimate_gamma2_is_mean_squared_residual_per_dimension() -> None:
    """Test gamma^2 = (1/d) mean ||phi - mu_y||^2 against a hand computation."""
    m = _identity_model()
    ds = gmmc.LabeledDataset(
        inputs=np.array([[0.5, 0.0], [-1.0, 0.5]]), labels=np.array([0, 1]), num_classes=2
    )
    # residuals (-0.5, 0) and (0, 0.5): squared norms 0.25 each
    assert gmmc.estimate_gamma2(m, ds) == pytest.approx(0.125)


def test_estimate_gamma2_degenerate_and_empty() -> None:
    m = _identity_model()
    exact = gmmc.LabeledDataset(
        inputs=m.centroids.means.copy(), labels=np.array([0, 1]), num_classes=2
    )
    with pytest.raises(DegenerateVarianceError):
        gmmc.estimate_gamma2(m, exact)
    empty = gmmc.LabeledDataset(inputs=np.zeros((0, 2)), labels=np.zeros(0), num_classes=2)
    with pytest.raises(EmptyDatasetError):
        gmmc.estimate_gamma2(m, empty)


def test_gamma2_must_be_positive() -> None:
    with pytest.raises(ArgumentError):
        _model(gamma2=0.0)
    with pytest.raises(ArgumentError):
        _model(gamma2=math.inf)


def test_centroid_dimension_must_match_network() -> None:
    spec = NetworkSpec(input_dim=2, widths=(3,), activations=())
    with pytest.raises(DimensionError):
        gmmc.build_model(spec, gmmc.generate_opt_means(2, 2))


def test_logpx_score_is_logsumexp_of_negative_energies() -> None:
    m = _model(gamma2=0.5)
    x = np.array([0.1, 0.2])
    e = gmmc.energies(m, x)
    assert gmmc.logpx_score(m, x) == pytest.approx(math.log(np.sum(np.exp(-e))))


def test_logpx_score_stable_far_from_data() -> None:
    """Test that very large energies give a finite log-density."""
    m = _model(gamma2=1e-6)
    scores = gmmc.logpx_score(m, np.ones((4, 2)))
    assert np.all(np.isfinite(scores))


def test_approx_mass_matches_finite_difference_gradient_norm() -> None:
    """Test that approx_mass is minus the norm of the numeric logpx gradient."""
    m = _model(gamma2=0.4)
    x = np.array([0.2, -0.3])
    h = 1e-6
    grad = np.array(
        [
            (gmmc.logpx_score(m, x + h * e) - gmmc.logpx_score(m, x - h * e)) / (2 * h)
            for e in np.eye(2)
        ]
    )
    assert gmmc.approx_mass_score(m, x) == pytest.approx(-np.linalg.norm(grad), rel=1e-5)
    assert np.all(gmmc.approx_mass_score(m, np.zeros((3, 2))) <= 0.0)


def test_predictive_score_is_max_posterior() -> None:
    m = _model(gamma2=0.9)
    x = np.random.default_rng(3).uniform(-1, 1, size=(6, 2))
    np.testing.assert_allclose(gmmc.predictive_score(m, x), gmmc.posterior(m, x).max(axis=1))
    assert 1.0 / 3.0 <= gmmc.predictive_score(m, x[0]) <= 1.0


def test_with_params_returns_new_model() -> None:
    m = _model()
    params = m.params.replace_values(np.zeros_like(m.params.values))
    m2 = m.with_params(params)
    assert m2 is not m
    assert np.all(m2.params.values == 0)
    assert not np.all(m.params.values == 0)
