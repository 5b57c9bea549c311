"""Linearized dynamics: evolution operators, controllability Gramians and the
multi-state obstruction experiment.

Operators act on nodal values. A nodal matrix X represents an operator on
L2(Y); its symmetric form W^{1/2} X W^{-1/2} (W the quadrature weights) has
the same spectrum and the Euclidean norm of the symmetric form is the L2
operator norm.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.linalg import expm

from .activations import Activation
from .dynamics import ControlPath, Trajectory, solve_forward_euler, stack_states
from .grid import GridFunction, GridMismatchError, Kernel, SpatialGrid, weighted_norm


class StationarityError(ValueError):
    """The supplied state is not an equilibrium of the dynamics."""


def _check_nodes(ctrl: ControlPath, *indices: int) -> None:
    for k in indices:
        if not (isinstance(k, (int, np.integer)) and 0 <= k <= ctrl.steps):
            raise ValueError(f"time index {k} is not a node of the time grid (0..{ctrl.steps})")


def step_matrices(ctrl: ControlPath, states: np.ndarray, sigma: Activation) -> np.ndarray:
    """Euler factors I - dt diag(sigma'(xi_k)) K_k for one datum, shape (S, M, M)."""
    states = np.asarray(states, dtype=float)
    if states.shape != (ctrl.steps + 1, ctrl.grid.size):
        raise GridMismatchError("states must have shape (S+1, M) for a single datum")
    K = ctrl.operators()
    xi = ctrl.a - np.einsum("skl,sl->sk", K, states)
    D = sigma.d1(xi)
    eye = np.eye(ctrl.grid.size)
    return eye[None] - ctrl.dt * D[:-1, :, None] * K[:-1]


def propagator(ctrl: ControlPath, states: np.ndarray, sigma: Activation, t: int, s: int) -> np.ndarray:
    """Nodal matrix of M(t_t, t_s) solving dM/dt = -sigma'(xi) B_b M, M(s, s) = I."""
    _check_nodes(ctrl, t, s)
    if t < s:
        raise ValueError("propagator needs t >= s")
    steps = step_matrices(ctrl, states, sigma)
    out = np.eye(ctrl.grid.size)
    for k in range(s, t):
        out = steps[k] @ out
    return out


def propagators_to_final(ctrl: ControlPath, states: np.ndarray, sigma: Activation) -> np.ndarray:
    """M(T, t_k) for every node k, shape (S+1, M, M)."""
    steps = step_matrices(ctrl, states, sigma)
    S = ctrl.steps
    out = np.empty((S + 1, ctrl.grid.size, ctrl.grid.size))
    out[S] = np.eye(ctrl.grid.size)
    for k in range(S - 1, -1, -1):
        out[k] = out[k + 1] @ steps[k]
    return out


def symmetric_form(X: np.ndarray, weights: np.ndarray) -> np.ndarray:
    sq = np.sqrt(weights)
    return sq[:, None] * X / sq[None, :]


def operator_norm(X: np.ndarray, weights: np.ndarray) -> float:
    """L2(Y) operator norm of a nodal matrix."""
    return float(np.linalg.norm(symmetric_form(X, weights), 2))


@dataclass
class Gramian:
    """Controllability Gramian stored in symmetric form with its spectrum."""

    grid: SpatialGrid
    matrix: np.ndarray
    eigenvalues: np.ndarray
    meta: dict

    @classmethod
    def from_symmetric(cls, grid: SpatialGrid, G: np.ndarray, meta: dict | None = None) -> "Gramian":
        G = 0.5 * (G + G.T)
        return cls(grid, G, np.linalg.eigvalsh(G), dict(meta or {}))

    @property
    def min_eigenvalue(self) -> float:
        return float(self.eigenvalues[0])

    @property
    def max_eigenvalue(self) -> float:
        return float(self.eigenvalues[-1])

    def nodal(self) -> np.ndarray:
        """Nodal matrix of the operator (inverse of the symmetric form map)."""
        sq = np.sqrt(self.grid.weights)
        return self.matrix / sq[:, None] * sq[None, :]


def coercivity_bound(f_inf: GridFunction, b_inf: Kernel, sigma: Activation, T: float) -> float:
    """sigma'(0)^2 (1 + ||f||^2) T exp(-2 sigma'(0) T ||b||), a lower bound on the Gramian spectrum."""
    s1 = float(sigma.d1(0.0))
    return s1**2 * (1.0 + f_inf.norm() ** 2) * T * np.exp(-2.0 * s1 * T * b_inf.norm())


def gramian_stationary(f_inf: GridFunction, b_inf: Kernel, sigma: Activation, T: float, steps: int = 64,
                       a_inf: GridFunction | None = None, tol: float = 1e-8) -> Gramian:
    """Gramian of the system linearized at an equilibrium (f_inf, a_inf, b_inf).

    G = sigma'(0)^2 (1 + ||f||^2) int_0^T e^{-s'(0)(T-tau)B} e^{-s'(0)(T-tau)B*} dtau,
    with the time integral by the trapezoidal rule on ``steps`` intervals.
    ``a_inf`` defaults to B f_inf, which makes (f_inf, a_inf, b_inf) stationary.
    """
    grid = f_inf.grid
    if b_inf.row_grid != grid or b_inf.col_grid != grid:
        raise GridMismatchError("kernel and state grids differ")
    if float(sigma(0.0)) != 0.0 or not float(sigma.d1(0.0)) > 0:
        raise ValueError("the equilibrium Gramian needs sigma(0) = 0 and sigma'(0) > 0")
    K = b_inf.operator()
    a = K @ f_inf.values if a_inf is None else a_inf.values
    drift = weighted_norm(sigma(a - K @ f_inf.values), grid.weights)
    if drift > tol:
        raise StationarityError(f"||sigma(a - B f)|| = {drift:.3e} exceeds {tol:.1e}")
    s1 = float(sigma.d1(0.0))
    c = s1**2 * (1.0 + f_inf.norm() ** 2)
    Ks = symmetric_form(K, grid.weights)
    taus = np.linspace(0.0, T, steps + 1)
    tw = np.full(steps + 1, T / steps)
    tw[[0, -1]] *= 0.5
    G = np.zeros_like(Ks)
    for tau, wt in zip(taus, tw):
        E = expm(-s1 * (T - tau) * Ks)
        G += wt * (E @ E.T)
    return Gramian.from_symmetric(grid, c * G, {"kind": "stationary", "T": T, "steps": steps,
                                                "bound": coercivity_bound(f_inf, b_inf, sigma, T)})


def gramian_trajectory(ctrl: ControlPath, traj: Trajectory, sigma: Activation, datum: int = 0) -> Gramian:
    """int_0^T M(T, tau) delta^2(tau) M(T, tau)^* dtau along the trajectory of one datum.

    delta^2(y, t) = sigma'(xi(y, t))^2 (1 + ||f(t)||^2); trapezoidal rule in tau.
    """
    if traj.steps != ctrl.steps or traj.grid != ctrl.grid:
        raise GridMismatchError("trajectory and controls do not share grids")
    states = traj.states[:, datum, :]
    w = ctrl.grid.weights
    Ms = propagators_to_final(ctrl, states, sigma)
    xi = ctrl.a - np.einsum("skl,sl->sk", ctrl.operators(), states)
    d2 = sigma.d1(xi) ** 2 * (1.0 + weighted_norm(states, w) ** 2)[:, None]
    S = ctrl.steps
    tw = np.full(S + 1, ctrl.dt)
    tw[[0, -1]] *= 0.5
    G = np.zeros((ctrl.grid.size, ctrl.grid.size))
    for k in range(S + 1):
        Mk = symmetric_form(Ms[k], w)
        G += tw[k] * (Mk * d2[k][None, :]) @ Mk.T
    return Gramian.from_symmetric(ctrl.grid, G, {"kind": "trajectory", "T": ctrl.T, "steps": S})


def propagator_norm_bound(ctrl: ControlPath, sigma: Activation, t: int, s: int) -> float:
    """exp(L ||b||_{L1((t_s, t_t); L2)}) with the left-rectangle rule."""
    nb = ctrl.b_norms()[s:t]
    return float(np.exp(sigma.lipschitz * ctrl.dt * np.sum(nb)))


@dataclass
class ObstructionReport:
    """Second-order residual ||(f_eps^j(T) - f_eps^1(T)) - eps M(T,0) g^j|| / eps per eps and datum."""

    eps: np.ndarray
    residuals: np.ndarray
    target_gaps: np.ndarray
    slope: float
    intercept: float

    def to_dict(self) -> dict:
        return {"eps": self.eps.tolist(), "residuals": self.residuals.tolist(),
                "target_gaps": self.target_gaps.tolist(), "slope": self.slope, "intercept": self.intercept}


def multistate_obstruction(ctrl: ControlPath, base, directions, eps_list, sigma: Activation) -> ObstructionReport:
    """Compare perturbed data differences with their linearization.

    ``base`` is f_I^1; ``directions`` holds g^j (j = 2..N). For every eps the
    data f_I^1 + eps g^j are propagated with the fixed control; the residual
    is ||nu||/eps with nu = (f^j(T) - f^1(T)) - eps M(T, 0) g^j, which is
    O(eps) when sigma'' does not vanish and zero for linear sigma. The gap to
    the targets eps M(T, 0) g^j / 2 is reported as well. ``slope`` is the
    least-squares slope of log(residual) against log(eps) over the nonzero
    eps (nan when fewer than two positive residuals exist).
    """
    f1 = stack_states(base, ctrl.grid)
    G = stack_states(directions, ctrl.grid)
    ref = solve_forward_euler(f1, ctrl, sigma)
    M = propagators_to_final(ctrl, ref.states[:, 0, :], sigma)[0]
    MG = G @ M.T
    w = ctrl.grid.weights
    eps = np.asarray(list(eps_list), dtype=float)
    res = np.zeros((eps.size, G.shape[0]))
    gaps = np.zeros_like(res)
    for i, e in enumerate(eps):
        if e == 0.0:
            continue
        traj = solve_forward_euler(f1 + e * G, ctrl, sigma)
        diff = traj.terminal - ref.terminal[0]
        res[i] = weighted_norm(diff - e * MG, w) / e
        gaps[i] = weighted_norm(diff - 0.5 * e * MG, w) / e
    mean_res = res.mean(axis=1)
    ok = (eps > 0) & (mean_res > 0)
    if ok.sum() >= 2:
        slope, intercept = np.polyfit(np.log(eps[ok]), np.log(mean_res[ok]), 1)
    else:
        slope, intercept = float("nan"), float("nan")
    return ObstructionReport(eps, res, gaps, float(slope), float(intercept))
