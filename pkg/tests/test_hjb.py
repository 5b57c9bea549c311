import itertools

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from deepide.activations import Activation
from deepide.dynamics import ControlPath, solve_forward_euler
from deepide.grid import SpatialGrid
from deepide.hjb import (TerminalCost, empirical_lipschitz, estimate_value, finite_difference_gradient,
                         hjb_hamiltonian, hjb_hamiltonian_single, integrate_feedback)
from deepide.output import Classifier
from deepide.pontryagin import BoxSet

BOX = BoxSet(-1.0, 1.0, -1.0, 1.0)
ONE = SpatialGrid.uniform(1)


def _one_cell_cost(target=5.0):
    return TerminalCost(Classifier.delta(ONE), np.array([[target]]))


def lattice_value(v, steps, T, target, box, n=21):
    """Exhaustive search over constant-per-step lattice controls for one cell, identity sigma."""
    dt = T / steps
    a_vals = np.linspace(box.a_min, box.a_max, n)
    b_vals = np.linspace(box.b_min, box.b_max, n)
    pairs = [(a, b) for a in a_vals for b in b_vals]
    best = np.inf
    for seq in itertools.product(pairs, repeat=steps):
        f = v
        for a, b in seq:
            f = f + dt * (a - b * f)
        best = min(best, 0.5 * (f - target) ** 2)
    return best


def test_one_cell_value_matches_lattice_search():
    sig = Activation("identity")
    est = estimate_value(np.array([0.3]), 0.0, 1.0, 2, _one_cell_cost(), sig, BOX, ONE)
    assert est.value == pytest.approx(lattice_value(0.3, 2, 1.0, 5.0, BOX), abs=1e-9)
    # pushing up as fast as possible: f1 = 0.95, f2 = 1.925
    assert est.value == pytest.approx(0.5 * (5.0 - 1.925) ** 2, abs=1e-12)


def test_value_at_final_time_is_terminal_cost():
    cost = _one_cell_cost(2.0)
    est = estimate_value(np.array([0.5]), 1.0, 1.0, 4, cost, Activation("sigmoid"), BOX, ONE)
    assert est.value == pytest.approx(0.5 * 1.5**2) and est.ctrl is None
    with pytest.raises(ValueError):
        estimate_value(np.array([0.5]), 2.0, 1.0, 4, cost, Activation("sigmoid"), BOX, ONE)


def test_value_is_below_every_admissible_path():
    rng = np.random.default_rng(0)
    g = SpatialGrid.uniform(3)
    sig = Activation("sigmoid")
    cost = TerminalCost(Classifier.delta(g), np.array([[1.5, -0.5, 0.8]]))
    v = rng.standard_normal(3)
    est = estimate_value(v, 0.0, 1.0, 4, cost, sig, BOX, g, n_starts=6, iters=100)
    for _ in range(30):
        c = ControlPath(g, 1.0, rng.uniform(-1, 1, (5, 3)), rng.uniform(-1, 1, (5, 3, 3)))
        assert est.value <= cost(solve_forward_euler(v, c, sig).terminal) + 1e-12


def test_value_decreases_with_larger_box():
    sig = Activation("tanh")
    cost = _one_cell_cost(3.0)
    vals = [estimate_value(np.array([0.2]), 0.0, 1.0, 4, cost, sig, BOX.scaled(k), ONE).value for k in (0.5, 1, 2)]
    assert vals[0] >= vals[1] - 1e-12 >= vals[2] - 2e-12


def test_dynamic_programming_principle():
    sig = Activation("identity")
    cost = _one_cell_cost()
    v = np.array([0.3])
    whole = estimate_value(v, 0.0, 1.0, 2, cost, sig, BOX, ONE).value
    best_split = np.inf
    for a, b in itertools.product(np.linspace(-1, 1, 11), repeat=2):
        f1 = v + 0.5 * (a - b * v)
        tail = estimate_value(f1, 0.5, 1.0, 1, cost, sig, BOX, ONE).value
        assert whole <= tail + 1e-9
        best_split = min(best_split, tail)
    assert best_split == pytest.approx(whole, abs=1e-9)


def test_hamiltonian_closed_form_and_concavity():
    rng = np.random.default_rng(1)
    g = SpatialGrid.uniform(4)
    sig = Activation("sigmoid")
    for _ in range(20):
        v, r1, r2 = rng.standard_normal((3, 4))
        assert hjb_hamiltonian(v, r1, BOX, sig, g, rng) == pytest.approx(hjb_hamiltonian_single(v, r1, BOX, sig, g),
                                                                         abs=1e-10)
        th = rng.uniform()
        mix = hjb_hamiltonian(v, th * r1 + (1 - th) * r2, BOX, sig, g, rng)
        assert mix >= th * hjb_hamiltonian(v, r1, BOX, sig, g, rng) \
            + (1 - th) * hjb_hamiltonian(v, r2, BOX, sig, g, rng) - 1e-10


@settings(max_examples=20)
@given(st.integers(0, 2**32 - 1))
def test_hamiltonian_is_positively_homogeneous(seed):
    rng = np.random.default_rng(seed)
    g = SpatialGrid.uniform(3)
    V, R = rng.standard_normal((2, 2, 3))
    sig = Activation("tanh")
    assert hjb_hamiltonian(V, 3.0 * R, BOX, sig, g, rng) == pytest.approx(3.0 * hjb_hamiltonian(V, R, BOX, sig, g, rng),
                                                                          rel=1e-7, abs=1e-12)


def test_finite_difference_gradient_of_quadratic():
    g = SpatialGrid.uniform(3)
    v = np.array([[1.0, -2.0, 0.5]])
    # value = 0.5 ||v||^2 has L2 gradient v
    grad = finite_difference_gradient(lambda u: 0.5 * float(np.sum(u**2 * g.weights)), v, g)
    assert np.allclose(grad, v, atol=1e-8)


def test_empirical_lipschitz_of_linear_functional():
    g = SpatialGrid.uniform(4)
    rng = np.random.default_rng(2)
    # |<1, v>| is 1-Lipschitz in L2 on the unit interval
    rep = empirical_lipschitz(lambda v, t: float(np.sum(v * g.weights)), np.zeros((1, 4)), np.array([0.0]), g,
                              1.0, 50, rng)
    assert rep["trials"] == 50 and 0 < rep["max_ratio"] <= 1.0 + 1e-12


def test_value_is_locally_lipschitz():
    sig = Activation("sigmoid")
    cost = _one_cell_cost(2.0)
    rng = np.random.default_rng(3)
    sampler = lambda v, t: estimate_value(v, t, 1.0, 2, cost, sig, BOX, ONE, n_starts=4, iters=50).value
    rep = empirical_lipschitz(sampler, np.array([[0.5]]), np.array([0.0, 0.5]), ONE, 0.5, 10, rng)
    # |dV/dv| <= |f_T - target| * |df_T/dv| and |dV/dt| <= |f_T - target| * sup sigma, both below 10 here
    assert rep["max_ratio"] <= 10.0


def test_feedback_realizes_the_value():
    sig = Activation("identity")
    cost = _one_cell_cost()
    v = np.array([0.3])

    def oracle(F, t, remaining):
        value = lambda u: estimate_value(u, t, 1.0, remaining, cost, sig, BOX, ONE, n_starts=4, iters=100).value
        return finite_difference_gradient(value, F, ONE)
    run = integrate_feedback(v, 0.0, 1.0, 2, oracle, BOX, sig, ONE, cost)
    est = estimate_value(v, 0.0, 1.0, 2, cost, sig, BOX, ONE).value
    assert abs(run.cost - est) <= 0.1 * est
    assert integrate_feedback(v, 1.0, 1.0, 2, oracle, BOX, sig, ONE, cost).cost == pytest.approx(cost(v[None]))


def test_hamiltonian_is_infimum_over_controls():
    from deepide.pontryagin import hamiltonian
    rng = np.random.default_rng(4)
    g = SpatialGrid.uniform(4)
    sig = Activation("sigmoid")
    for _ in range(10):
        V, R = rng.standard_normal((2, 2, 4))
        H = hjb_hamiltonian(V, R, BOX, sig, g, rng)
        for _ in range(20):
            a, b = rng.uniform(-1, 1, 4), rng.uniform(-1, 1, (4, 4))
            assert H <= hamiltonian(V, R, a, b, sig, g) + 1e-12


def test_argmin_unchanged_by_positive_scaling():
    rng = np.random.default_rng(5)
    g = SpatialGrid.uniform(4)
    sig = Activation("sigmoid")
    v, r = rng.standard_normal((2, 4))
    _, res1 = hjb_hamiltonian(v, r, BOX, sig, g, return_argmin=True)
    _, res2 = hjb_hamiltonian(v, 2.5 * r, BOX, sig, g, return_argmin=True)
    assert np.array_equal(res1.a, res2.a) and np.array_equal(res1.b, res2.b)


def test_perfect_fit_has_zero_value():
    cost = _one_cell_cost(0.3)
    assert estimate_value(np.array([0.3]), 0.5, 1.0, 2, cost, Activation("identity"), BOX, ONE).value \
        == pytest.approx(0.0, abs=1e-20)


def test_zero_gradient_oracle_uses_flagged_defaults():
    sig = Activation("sigmoid")
    cost = _one_cell_cost()
    run = integrate_feedback(np.array([0.3]), 0.0, 1.0, 4, lambda F, t, k: np.zeros_like(F), BOX, sig, ONE, cost)
    assert run.flags.all()
    assert np.all(run.ctrl.a == BOX.a_min) and np.all(run.ctrl.b == BOX.b_min)
