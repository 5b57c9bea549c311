import numpy as np
import pytest
from hypothesis import given, strategies as st

from deepide.grid import GridFunction, GridMismatchError, SpatialGrid
from deepide.output import (Classifier, DensityError, DuplicateDataError, Predictor, TrainingSet,
                            cross_entropy_floor, evaluate_loss, loss_cross_entropy, loss_mse, network_output,
                            output_sensitivity, predict)


def test_delta_classifier_reproduces_state():
    g = SpatialGrid.uniform(6)
    f = np.linspace(-1, 2, 6)
    assert np.allclose(network_output(f, Classifier.delta(g)), f, atol=1e-14)
    assert np.allclose(network_output(GridFunction(g, f), Classifier.delta(g)), f, atol=1e-14)


def test_network_output_constant_weights():
    Y, U = SpatialGrid.uniform(4), SpatialGrid.uniform(3)
    cls = Classifier(U, Y, np.ones((3, 4)), np.array([1.0, 2.0, 3.0]))
    assert np.allclose(network_output(np.full(4, 2.0), cls), [3.0, 4.0, 5.0])
    with pytest.raises(GridMismatchError):
        network_output(np.ones(5), cls)
    with pytest.raises(GridMismatchError):
        network_output(GridFunction(SpatialGrid.uniform(4, lower=1, upper=2), np.ones(4)), cls)


def test_softmax_of_constant_is_uniform_density():
    U = SpatialGrid.uniform(5, lower=0, upper=2)
    assert np.allclose(predict(np.full(5, 3.7), Predictor("softmax"), U), 0.5)


def test_softmax_stable_for_large_outputs():
    U = SpatialGrid.uniform(4)
    p = predict(np.array([1e4, -1e4, 0.0, 5.0]), Predictor("softmax"), U)
    assert np.all(np.isfinite(p)) and p @ U.weights == pytest.approx(1.0)
    with pytest.raises(ValueError):
        predict(np.array([np.inf, 0, 0, 0]), Predictor("softmax"), U)


def test_predictor_rejects_unknown():
    with pytest.raises(ValueError):
        Predictor("tanh")


def test_mse_example():
    U = SpatialGrid.uniform(2)
    # per-datum costs 0.5 * (1 * 0.5 + 4 * 0.5) = 1.25 and 0
    assert loss_mse(np.array([[1.0, 2.0], [0, 0]]), np.zeros((2, 2)), U) == pytest.approx(0.625)


def test_cross_entropy_floor_attained_and_bounded():
    rng = np.random.default_rng(0)
    U = SpatialGrid.uniform(5)
    P = rng.random((3, 5)) + 0.1
    P /= (P @ U.weights)[:, None]
    floor = cross_entropy_floor(P, U)
    assert loss_cross_entropy(-np.log(P), P, U) == pytest.approx(floor, abs=1e-12)
    for _ in range(200):
        assert loss_cross_entropy(4 * rng.standard_normal((3, 5)), P, U) >= floor - 1e-12


def test_cross_entropy_zero_target_cells():
    U = SpatialGrid.uniform(4)
    P = np.array([[4.0, 0, 0, 0]])
    assert np.isfinite(cross_entropy_floor(P, U))
    assert cross_entropy_floor(P, U) == pytest.approx(-np.log(4.0))


def test_density_targets_checked():
    U = SpatialGrid.uniform(4)
    with pytest.raises(DensityError):
        loss_cross_entropy(np.zeros((1, 4)), np.array([[1.0, 1, 1, 0]]), U)
    with pytest.raises(DensityError):
        loss_cross_entropy(np.zeros((1, 4)), np.array([[5.0, -1, 0, 0]]), U)


@pytest.mark.parametrize("kind,loss", [("identity", "mse"), ("logistic", "mse"), ("softmax", "mse"),
                                       ("identity", "cross_entropy")])
def test_output_sensitivity_matches_finite_differences(kind, loss):
    rng = np.random.default_rng(1)
    U = SpatialGrid.uniform(5)
    Z = rng.standard_normal((1, 5))
    P = rng.random((1, 5))
    if loss == "cross_entropy":
        P /= P @ U.weights
    h = Predictor(kind)
    d = output_sensitivity(Z, P, h, loss, U)
    e = 1e-6
    for k in range(5):
        dz = np.zeros_like(Z)
        dz[0, k] = e
        fd = (evaluate_loss(Z + dz, P, h, loss, U) - evaluate_loss(Z - dz, P, h, loss, U)) / (2 * e)
        assert fd == pytest.approx(d[0, k] * U.weights[k], rel=1e-6, abs=1e-10)


def test_training_set_rejects_duplicates():
    Y, U = SpatialGrid.uniform(3), SpatialGrid.uniform(2)
    with pytest.raises(DuplicateDataError) as info:
        TrainingSet(Y, U, [[1.0, 2, 3], [0, 0, 0], [1.0, 2, 3]], np.zeros((3, 2)))
    assert info.value.pair == (0, 2)
    with pytest.raises(GridMismatchError):
        TrainingSet(Y, U, [[1.0, 2, 3]], [[1.0, 2, 3]])
    with pytest.raises(ValueError):
        TrainingSet(Y, U, [[1.0, np.nan, 3]], [[1.0, 2]])


@given(st.integers(0, 2**32 - 1), st.floats(-50, 50))
def test_softmax_shift_invariance(seed, c):
    rng = np.random.default_rng(seed)
    U = SpatialGrid.uniform(6)
    Z = 5 * rng.standard_normal(6)
    p = predict(Z, Predictor("softmax"), U)
    assert np.all(p >= 0) and p @ U.weights == pytest.approx(1.0, abs=1e-12)
    assert np.allclose(predict(Z + c, Predictor("softmax"), U), p, rtol=1e-9, atol=1e-12)


def test_mse_zero_iff_equal():
    U = SpatialGrid.uniform(3)
    P = np.array([[1.0, -2.0, 0.5]])
    assert loss_mse(P, P, U) == 0.0
    assert loss_mse(P + 1e-5, P, U) > 0.0


def test_uniform_target_constant_output():
    U = SpatialGrid.uniform(4, lower=0, upper=3)
    P = np.full((1, 4), 1.0 / 3.0)
    assert loss_cross_entropy(np.full((1, 4), -0.7), P, U) == pytest.approx(np.log(3.0), abs=1e-12)


@given(st.integers(0, 2**32 - 1))
def test_logistic_monotone(seed):
    rng = np.random.default_rng(seed)
    Z1 = 10 * rng.standard_normal(6)
    Z2 = Z1 + np.abs(rng.standard_normal(6))
    assert np.all(predict(Z1, Predictor("logistic")) <= predict(Z2, Predictor("logistic")))
