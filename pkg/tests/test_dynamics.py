import numpy as np
import pytest
from hypothesis import given, strategies as st

from deepide.activations import Activation
from deepide.dynamics import (ControlPath, NonFiniteStateError, PicardConvergenceError, apply_kernel,
                              check_apriori_bound, solve_forward_euler, solve_forward_picard)
from deepide.grid import GridMismatchError, Kernel, SpatialGrid
from oracles import expm_propagator, linear_propagator, naive_apply

LATTICE = np.linspace(-50, 50, 10_001)


@pytest.mark.parametrize("kind", ["sigmoid", "tanh", "smoothed_relu", "identity"])
def test_activation_derivative_bounds(kind):
    s = Activation(kind)
    d = s.d1(LATTICE)
    assert d.min() >= 0 and d.max() <= s.lipschitz + 1e-15
    assert np.all(np.diff(s(LATTICE)) >= -1e-15)
    # derivatives agree with central differences
    x = np.linspace(-3, 3, 13)
    h = 1e-6
    assert np.allclose(s.d1(x), (s(x + h) - s(x - h)) / (2 * h), atol=1e-7)
    assert np.allclose(s.d2(x), (s.d1(x + h) - s.d1(x - h)) / (2 * h), atol=1e-5)


def test_smoothed_relu_zero_derivative_means_small_value():
    s = Activation("smoothed_relu")
    flat = s.d1(LATTICE) < 1e-8
    assert np.all(np.abs(s(LATTICE[flat])) <= s.eps)
    assert s(0.0) == 0.0


def test_activation_rejects_unknown():
    with pytest.raises(ValueError):
        Activation("relu")


def test_apply_kernel_examples():
    g = SpatialGrid.uniform(8)
    f = g.function(np.full(8, 3.0))
    assert np.allclose(apply_kernel(Kernel(g, g, np.zeros((8, 8))), f).values, 0)
    assert np.allclose(apply_kernel(Kernel(g, g, np.ones((8, 8))), f).values, 3.0)
    rng = np.random.default_rng(0)
    b, v = rng.standard_normal((8, 8)), rng.standard_normal(8)
    assert np.allclose(apply_kernel(Kernel(g, g, b), g.function(v)).values, naive_apply(b, v, g.weights))
    with pytest.raises(GridMismatchError):
        apply_kernel(Kernel(g, g, b), SpatialGrid.uniform(4).function(np.ones(4)))


def test_control_path_validation():
    g = SpatialGrid.uniform(3)
    with pytest.raises(GridMismatchError):
        ControlPath(g, 1.0, np.zeros((1, 3)), np.zeros((1, 3, 3)))
    with pytest.raises(GridMismatchError):
        ControlPath(g, 1.0, np.zeros((3, 3)), np.zeros((2, 3, 3)))
    c = ControlPath.constant(g, 2.0, 8)
    assert c.dt * c.steps == pytest.approx(2.0, abs=1e-12)


def test_euler_zero_kernel_exact():
    g = SpatialGrid.uniform(5)
    sig = Activation("sigmoid")
    c = ControlPath.constant(g, 1.0, 10, a=0.7, b=0.0)
    f0 = np.linspace(-1, 1, 5)
    tr = solve_forward_euler(f0, c, sig)
    expect = f0[None, :] + c.times[:, None] * float(sig(0.7))
    assert np.allclose(tr.states[:, 0, :], expect, atol=1e-14)
    pic = solve_forward_picard(f0, c, sig)
    assert np.allclose(pic.states[:, 0, :], expect, atol=1e-12)


def _linear_instance(S, seed=0):
    rng = np.random.default_rng(seed)
    g = SpatialGrid.uniform(6)
    a = rng.standard_normal(6)
    b = rng.standard_normal((6, 6))
    return g, ControlPath.constant(g, 1.0, S, a=a, b=b), rng.standard_normal(6), a, b


def test_euler_linear_matches_matrix_exponential():
    errs = []
    for S in (32, 64, 128):
        g, c, f0, a, b = _linear_instance(S)
        K = b * g.weights
        x_star = np.linalg.solve(K, a)
        exact = x_star + linear_propagator(K, 1.0) @ (f0 - x_star)
        assert np.allclose(linear_propagator(K, 1.0), expm_propagator(K, 1.0), atol=1e-10)
        tr = solve_forward_euler(f0, c, Activation("identity"))
        errs.append(np.linalg.norm(tr.terminal[0] - exact))
    assert errs[0] < 0.1
    assert 1.8 <= errs[0] / errs[1] <= 2.2 and 1.8 <= errs[1] / errs[2] <= 2.2


def test_euler_self_convergence_order():
    rng = np.random.default_rng(3)
    g = SpatialGrid.uniform(8)
    sig = Activation("sigmoid")
    tt = np.linspace(0, 1, 1024 + 1)
    a0, a1 = rng.standard_normal((2, 8))
    b0 = rng.standard_normal((8, 8))

    def ctrl(S):
        t = tt[:: 1024 // S][:, None]
        return ControlPath(g, 1.0, a0 + np.sin(2 * t) * a1, b0[None] * np.cos(t)[:, :, None])
    f0 = rng.standard_normal(8)
    ref = solve_forward_euler(f0, ctrl(1024), sig).terminal[0]
    e = [np.linalg.norm(solve_forward_euler(f0, ctrl(S), sig).terminal[0] - ref) for S in (8, 16)]
    assert 1.8 <= e[0] / e[1] <= 2.2


def test_picard_fast_contraction():
    rng = np.random.default_rng(4)
    g = SpatialGrid.uniform(6)
    sig = Activation("sigmoid")
    b = rng.standard_normal((6, 6))
    w2 = np.outer(g.weights, g.weights)
    b *= (0.1 / sig.lipschitz) / np.sqrt(np.sum(b**2 * w2))
    c = ControlPath.constant(g, 1.0, 32, a=rng.standard_normal(6), b=b)
    tr = solve_forward_picard(rng.standard_normal(6), c, sig, tol=1e-12)
    assert tr.meta["iterations"] <= 30 and tr.meta["restarts"] == 0


def test_picard_restarts_on_strong_coupling():
    g = SpatialGrid.uniform(4)
    sig = Activation("identity")
    c = ControlPath.constant(g, 1.0, 64, a=0.0, b=20 * np.eye(4) / g.weights[0])
    tr = solve_forward_picard(np.ones(4), c, sig, max_iter=60)
    assert tr.meta["restarts"] >= 1
    # a converged Picard solution satisfies the trapezoid relation on every step
    K = c.operators()
    g_ = sig(c.a[:, None, :] - np.einsum("skl,sjl->sjk", K, tr.states))
    assert np.allclose(tr.states[1:] - tr.states[:-1], 0.5 * c.dt * (g_[1:] + g_[:-1]), atol=1e-10)
    assert np.allclose(tr.terminal, np.exp(-20.0), rtol=0.2)


def test_picard_raises_when_max_iter_tiny():
    g = SpatialGrid.uniform(4)
    c = ControlPath.constant(g, 1.0, 1, a=0.0, b=50.0)
    with pytest.raises(PicardConvergenceError):
        solve_forward_picard(np.ones(4), c, Activation("identity"), max_iter=3)


def test_nonfinite_reported():
    g = SpatialGrid.uniform(2)
    c = ControlPath.constant(g, 1.0, 400, a=0.0, b=-1e6)
    with pytest.raises(NonFiniteStateError) as info:
        solve_forward_euler(np.array([[0.0, 0.0], [1.0, 1.0]]), c, Activation("identity"))
    assert info.value.datum == 1


def test_permutation_of_data_permutes_states():
    rng = np.random.default_rng(6)
    g = SpatialGrid.uniform(5)
    c = ControlPath.random(g, 1.0, 8, rng)
    F = rng.standard_normal((4, 5))
    perm = [2, 0, 3, 1]
    sig = Activation("tanh")
    assert np.array_equal(solve_forward_euler(F, c, sig).states[:, perm], solve_forward_euler(F[perm], c, sig).states)


def test_apriori_zero_control_equality():
    g = SpatialGrid.uniform(6)
    c = ControlPath.constant(g, 1.0, 8)
    tr = solve_forward_euler(np.arange(6.0), c, Activation("tanh"))
    rep = check_apriori_bound(tr, c, Activation("tanh"))
    assert np.allclose(tr.norms(), tr.norms()[0])
    assert np.allclose(rep.growth, 0.0, atol=1e-12)


@given(st.integers(0, 2**32 - 1), st.sampled_from(["sigmoid", "tanh", "smoothed_relu", "identity"]))
def test_apriori_margins_nonnegative(seed, kind):
    rng = np.random.default_rng(seed)
    g = SpatialGrid.uniform(5)
    sig = Activation(kind)
    c1 = ControlPath.random(g, 1.0, 8, rng)
    F1 = rng.standard_normal((2, 5))
    t1 = solve_forward_euler(F1, c1, sig)
    # runs differing only in the initial data
    t2 = solve_forward_euler(F1 + rng.standard_normal((2, 5)), c1, sig)
    assert check_apriori_bound(t1, c1, sig, (t2, c1)).ok()


def test_picard_euler_agree_in_contraction_regime():
    rng = np.random.default_rng(7)
    g = SpatialGrid.uniform(6)
    sig = Activation("sigmoid")
    c = ControlPath.random(g, 1.0, 64, rng, 1.0, 0.2)
    f0 = rng.standard_normal((2, 6))
    e = solve_forward_euler(f0, c, sig).terminal
    p = solve_forward_picard(f0, c, sig).terminal
    assert np.linalg.norm(e - p) <= 10 * (c.dt + 1e-12) * np.linalg.norm(p)
