"""Hamilton-Jacobi-Bellman side of the control problem at toy scale.

The value functional V(v, t) is the smallest terminal cost reachable from
the states v at time t with admissible controls on [t, T]; the classifier
is held fixed. V is estimated by direct optimization over control paths,
its Hamiltonian is evaluated cellwise, and a feedback loop is closed with
a supplied value gradient.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .activations import Activation
from .adjoint import adjoint_terminal, loss_gradient, solve_backward
from .dynamics import ControlPath, NonFiniteStateError, Trajectory, solve_forward_euler, stack_states
from .grid import GridMismatchError, SpatialGrid, weighted_norm
from .output import Classifier, Predictor, evaluate_loss, network_output
from .pontryagin import BoxSet, argmin_T


def hjb_hamiltonian(V: np.ndarray, R: np.ndarray, box: BoxSet, sigma: Activation, grid: SpatialGrid,
                    rng: np.random.Generator | None = None, return_argmin: bool = False):
    """H_HJB(v, r) = int_Y min_{(a, b) admissible} sum_j sigma(a - <b, v_j>) r_j(y) dy."""
    V = np.atleast_2d(V)
    R = np.atleast_2d(R)
    if V.shape != R.shape or V.shape[1] != grid.size:
        raise GridMismatchError("states and co-states must both have shape (N, M)")
    res = argmin_T(V, R.T, box, sigma, grid.weights, rng=rng)
    H = float(np.dot(res.value, grid.weights))
    return (H, res) if return_argmin else H


def hjb_hamiltonian_single(v: np.ndarray, r: np.ndarray, box: BoxSet, sigma: Activation,
                           grid: SpatialGrid) -> float:
    """Closed form for one datum and nondecreasing sigma.

    With v+ = max(v, 0), v- = max(-v, 0):
      H = sigma(a_min - b_max int v+ + b_min int v-) int_{r>0} r
        + sigma(a_max - b_min int v+ + b_max int v-) int_{r<0} r
    """
    v = np.asarray(v, dtype=float).ravel()
    r = np.asarray(r, dtype=float).ravel()
    w = grid.weights
    vp = float(np.dot(np.maximum(v, 0.0), w))
    vm = float(np.dot(np.maximum(-v, 0.0), w))
    rp = float(np.dot(np.maximum(r, 0.0), w))
    rm = float(np.dot(np.minimum(r, 0.0), w))
    lo = float(sigma(box.a_min - box.b_max * vp + box.b_min * vm))
    hi = float(sigma(box.a_max - box.b_min * vp + box.b_max * vm))
    return lo * rp + hi * rm


@dataclass(frozen=True)
class TerminalCost:
    """g(v) = (1/N) sum_j C(Z^j, P^j) with the classifier held fixed."""

    cls: Classifier
    targets: np.ndarray
    h: Predictor = Predictor("identity")
    loss: str = "mse"

    def __call__(self, F: np.ndarray) -> float:
        return evaluate_loss(network_output(F, self.cls), np.atleast_2d(self.targets), self.h, self.loss,
                             self.cls.u_grid)


@dataclass
class ValueSample:
    v: np.ndarray
    t: float
    value: float
    ctrl: ControlPath | None
    start_values: list = field(default_factory=list)

    def to_dict(self) -> dict:
        return {"t": self.t, "value": self.value, "start_values": self.start_values}


def _path_objective(F0, ctrl, sigma, cost: TerminalCost):
    traj = solve_forward_euler(F0, ctrl, sigma)
    return cost(traj.terminal), traj


def _project(ctrl: ControlPath, box: BoxSet) -> ControlPath:
    return ControlPath(ctrl.grid, ctrl.T, box.clip_a(ctrl.a), box.clip_b(ctrl.b))


def estimate_value(v, t: float, T: float, steps: int, cost: TerminalCost, sigma: Activation, box: BoxSet,
                   grid: SpatialGrid, n_starts: int = 8, iters: int = 200, seed: int = 0,
                   step_tol: float = 1e-12) -> ValueSample:
    """Estimate V(v, t) by projected gradient descent over control paths on [t, T].

    ``steps`` Euler steps cover [t, T]. Starts are the four constant box
    corners followed by random admissible paths; every start runs Armijo
    projected gradient in the time-weighted L2 metric with gradients from
    the co-state equation. The best (value, start index) wins.
    """
    F0 = stack_states(v, grid)
    if t > T + 1e-12:
        raise ValueError("t must not exceed T")
    if T - t <= 1e-12 * max(1.0, abs(T)):
        return ValueSample(F0, t, cost(F0), None, [])
    horizon = T - t
    rng = np.random.default_rng(seed)
    starts = [ControlPath.constant(grid, horizon, steps, ca, cb) for ca, cb in box.corners()]
    while len(starts) < n_starts:
        starts.append(ControlPath(grid, horizon, rng.uniform(box.a_min, box.a_max, (steps + 1, grid.size)),
                                  rng.uniform(box.b_min, box.b_max, (steps + 1, grid.size, grid.size))))
    best = (np.inf, None)
    values = []
    wt = np.full(steps + 1, horizon / steps)
    wt[-1] = 0.0
    w = grid.weights
    for k, ctrl in enumerate(starts[:max(n_starts, 1)]):
        J, traj = _path_objective(F0, ctrl, sigma, cost)
        tau = 1.0
        for _ in range(iters):
            co = solve_backward(traj, ctrl, sigma,
                                adjoint_terminal(traj.terminal, cost.cls, cost.h, cost.targets, cost.loss))
            g = loss_gradient(traj, co, ctrl, sigma, cost.cls, cost.h, cost.targets, cost.loss)
            moved = False
            trial = 2.0 * tau
            for _ in range(50):
                cand = _project(ControlPath(grid, horizon, ctrl.a - trial * g.d_a, ctrl.b - trial * g.d_b), box)
                da, db = cand.a - ctrl.a, cand.b - ctrl.b
                lin = float(np.einsum("s,sk,k->", wt, g.d_a * da, w) + np.einsum("s,skl,k,l->", wt, g.d_b * db, w, w))
                try:
                    J2, traj2 = _path_objective(F0, cand, sigma, cost)
                except (NonFiniteStateError, FloatingPointError):
                    J2 = np.inf
                if J2 <= J + 1e-4 * lin:
                    change = max(np.max(np.abs(da[:-1])), np.max(np.abs(db[:-1])))
                    ctrl, traj, J, tau = cand, traj2, J2, trial
                    moved = change > step_tol
                    break
                trial *= 0.5
            if not moved:
                break
        values.append(J)
        if J < best[0]:
            best = (J, ctrl)
    return ValueSample(F0, t, float(best[0]), best[1], values)


def empirical_lipschitz(sampler: Callable[[np.ndarray, float], float], center: np.ndarray, times: np.ndarray,
                        grid: SpatialGrid, radius: float, trials: int, rng: np.random.Generator) -> dict:
    """Largest observed |V1 - V2| / (sum_j ||v1_j - v2_j|| + |t1 - t2|) over random pairs.

    States are drawn uniformly from the L2 ball of ``radius`` around
    ``center`` (shape (N, M)); times from ``times``. Identical pairs are skipped.
    """
    center = np.atleast_2d(center)
    w = grid.weights

    def draw():
        d = rng.standard_normal(center.shape)
        d /= max(float(np.sqrt(np.sum(weighted_norm(d, w) ** 2))), 1e-300)
        return center + radius * rng.uniform() ** (1.0 / d.size) * d, float(rng.choice(times))

    ratios = []
    for _ in range(trials):
        v1, t1 = draw()
        v2, t2 = draw()
        dist = float(np.sum(weighted_norm(v1 - v2, w)) + abs(t1 - t2))
        if dist == 0.0:
            continue
        ratios.append(abs(sampler(v1, t1) - sampler(v2, t2)) / dist)
    return {"radius": radius, "trials": len(ratios), "max_ratio": float(max(ratios)) if ratios else 0.0,
            "mean_ratio": float(np.mean(ratios)) if ratios else 0.0}


def finite_difference_gradient(value: Callable[[np.ndarray], float], v: np.ndarray, grid: SpatialGrid,
                               rel_step: float = 1e-4) -> np.ndarray:
    """L2 representative of D_v V by central differences (nodal derivative over the cell weights)."""
    v = np.atleast_2d(np.asarray(v, dtype=float))
    h = rel_step * max(1.0, float(np.sqrt(np.sum(weighted_norm(v, grid.weights) ** 2))))
    out = np.zeros_like(v)
    for j in range(v.shape[0]):
        for k in range(v.shape[1]):
            e = np.zeros_like(v)
            e[j, k] = h
            out[j, k] = (value(v + e) - value(v - e)) / (2.0 * h) / grid.weights[k]
    return out


@dataclass
class FeedbackRun:
    trajectory: Trajectory
    ctrl: ControlPath
    cost: float
    flags: np.ndarray


def integrate_feedback(v, t: float, T: float, steps: int, gradient_oracle: Callable, box: BoxSet,
                       sigma: Activation, grid: SpatialGrid, cost: TerminalCost,
                       rng: np.random.Generator | None = None) -> FeedbackRun:
    """Closed loop F_{s+1} = F_s + dt sigma(a~ - B_{b~} F_s) with (a~, b~) minimizing
    the Hamiltonian integrand against r = gradient_oracle(F_s, t_s, remaining_steps).
    """
    F = stack_states(v, grid)
    if T - t <= 1e-12 * max(1.0, abs(T)):
        traj = Trajectory(grid, 1.0, np.stack([F, F]), {"solver": "feedback", "t0": t})
        return FeedbackRun(traj, ControlPath.constant(grid, 1.0, 1), cost(F), np.zeros((1, grid.size), bool))
    dt = (T - t) / steps
    states = [F]
    a_path = np.empty((steps + 1, grid.size))
    b_path = np.empty((steps + 1, grid.size, grid.size))
    flags = np.zeros((steps + 1, grid.size), bool)
    for s in range(steps):
        r = np.atleast_2d(gradient_oracle(F, t + s * dt, steps - s))
        res = argmin_T(F, r.T, box, sigma, grid.weights, rng=rng)
        a_path[s], b_path[s], flags[s] = res.a, res.b, res.flag_a
        F = F + dt * sigma(res.a[None, :] - F @ (res.b * grid.weights).T)
        states.append(F)
    a_path[steps], b_path[steps] = a_path[steps - 1], b_path[steps - 1]
    flags[steps] = flags[steps - 1]
    traj = Trajectory(grid, T - t, np.stack(states), {"solver": "feedback", "t0": t})
    return FeedbackRun(traj, ControlPath(grid, T - t, a_path, b_path), cost(F), flags)
