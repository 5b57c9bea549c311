"""Co-state equation, loss gradients, gradient-flow training and stationary classifiers.

The backward solver is the exact transpose of the forward Euler scheme:
r_s = r_{s+1} - dt * B_{b_s}^* (sigma'(xi_s) r_{s+1}). Gradients pair the
pre-activation xi_s with r_{s+1}, so they coincide with the derivative of
the discrete loss and finite differences agree to rounding accuracy.
"""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .activations import Activation
from .dynamics import (ControlPath, NonFiniteStateError, Trajectory, _check_finite,
                       preactivation, solve_forward_euler, stack_states)
from .grid import DEFAULT_RANK_TOL, GridMismatchError, SpatialGrid, pseudo_inverse, weighted_norm
from .output import (Classifier, Predictor, TrainingSet, evaluate_loss, network_output,
                     output_sensitivity, predict)

log = logging.getLogger(__name__)


class StepUnderflowError(RuntimeError):
    """Backtracking could not find a step that does not increase the loss."""

    def __init__(self, iteration: int, step: float, loss: float):
        self.iteration = iteration
        self.step = step
        self.loss = loss
        super().__init__(f"backtracking exhausted at iteration {iteration} (step {step:.3e}, loss {loss:.6e})")


class DegenerateDataError(ValueError):
    """Terminal states carry no information that separates the data."""


@dataclass(eq=False)
class AdjointTerminal:
    """Co-state at t = T for every datum, shape (N, M)."""

    grid: SpatialGrid
    values: np.ndarray

    def __post_init__(self):
        self.values = np.atleast_2d(np.asarray(self.values, dtype=float))
        if self.values.shape[1] != self.grid.size:
            raise GridMismatchError("terminal co-state does not match the grid")
        if not np.all(np.isfinite(self.values)):
            raise ValueError("terminal co-state must be finite")


def adjoint_terminal(fT, cls: Classifier, h: Predictor, targets: np.ndarray,
                     loss: str = "mse") -> AdjointTerminal:
    """r(y, T) = int_U delta(u) w(u, y) du with delta the output sensitivity.

    For MSE delta = (P_pre - P) h'(Z); see :func:`output.output_sensitivity`.
    """
    F = stack_states(fT, cls.y_grid)
    targets = np.atleast_2d(targets)
    if targets.shape != (F.shape[0], cls.u_grid.size):
        raise GridMismatchError("targets do not match the data count or the U grid")
    Z = network_output(F, cls)
    delta = output_sensitivity(Z, targets, h, loss, cls.u_grid)
    return AdjointTerminal(cls.y_grid, (delta * cls.u_grid.weights) @ cls.w)


def solve_backward(traj: Trajectory, ctrl: ControlPath, sigma: Activation,
                   terminal: AdjointTerminal | np.ndarray) -> Trajectory:
    """Backward Euler sweep from T to 0 using the stored forward states for xi."""
    if traj.steps != ctrl.steps or traj.grid != ctrl.grid:
        raise GridMismatchError("trajectory and controls do not share time and space grids")
    R = terminal.values if isinstance(terminal, AdjointTerminal) else np.atleast_2d(terminal)
    if R.shape != traj.states.shape[1:]:
        raise GridMismatchError(f"terminal co-state shape {R.shape} != {traj.states.shape[1:]}")
    dsig = sigma.d1(preactivation(ctrl, traj.states))
    # (B*_s g)(z) = sum_k b_s(y_k, z) g(y_k) |Y_k|
    w = ctrl.grid.weights
    S = ctrl.steps
    out = np.empty_like(traj.states)
    out[S] = R
    for s in range(S - 1, -1, -1):
        g = dsig[s] * out[s + 1]
        out[s] = out[s + 1] - ctrl.dt * (g * w) @ ctrl.b[s]
        _check_finite(out[s], s, "co-state")
    return Trajectory(ctrl.grid, ctrl.T, out, {"solver": "adjoint_euler"})


@dataclass(eq=False)
class LossGradient:
    """L2 representatives of the loss derivatives.

    The control parts are sampled at the time nodes and paired with the
    left-rectangle time weights, so entry ``S`` carries no weight.
    """

    y_grid: SpatialGrid
    u_grid: SpatialGrid
    T: float
    d_a: np.ndarray
    d_b: np.ndarray
    d_w: np.ndarray
    d_mu: np.ndarray

    @property
    def steps(self) -> int:
        return self.d_a.shape[0] - 1

    @property
    def time_weights(self) -> np.ndarray:
        w = np.full(self.steps + 1, self.T / self.steps)
        w[-1] = 0.0
        return w

    def pair(self, d_ctrl: ControlPath, d_cls: Classifier) -> float:
        """<DJ, (da, db, dw, dmu)> in L2((0,T)xY) x L2((0,T)xYxY) x L2(UxY) x L2(U)."""
        wy, wu, wt = self.y_grid.weights, self.u_grid.weights, self.time_weights
        ta = np.einsum("s,sk,k->", wt, self.d_a * d_ctrl.a, wy)
        tb = np.einsum("s,skl,k,l->", wt, self.d_b * d_ctrl.b, wy, wy)
        tw = np.einsum("uk,u,k->", self.d_w * d_cls.w, wu, wy)
        tm = float(np.dot(self.d_mu * d_cls.mu, wu))
        return float(ta + tb + tw + tm)

    def norms(self) -> dict:
        wy, wu, wt = self.y_grid.weights, self.u_grid.weights, self.time_weights
        return {
            "a": float(np.sqrt(np.einsum("s,sk,k->", wt, self.d_a**2, wy))),
            "b": float(np.sqrt(np.einsum("s,skl,k,l->", wt, self.d_b**2, wy, wy))),
            "w": float(np.sqrt(np.einsum("uk,u,k->", self.d_w**2, wu, wy))),
            "mu": float(np.sqrt(np.dot(self.d_mu**2, wu))),
        }

    def squared_norm(self) -> float:
        return float(sum(v**2 for v in self.norms().values()))


def loss_gradient(traj: Trajectory, co: Trajectory, ctrl: ControlPath, sigma: Activation,
                  cls: Classifier, h: Predictor, targets: np.ndarray, loss: str = "mse") -> LossGradient:
    """The four first variations of J at the run (traj, co).

    D_a J_s = (1/N) sum_j sigma'(xi_s) r_{s+1}
    D_b J_s(y, z) = -(1/N) sum_j f_s(z) sigma'(xi_s(y)) r_{s+1}(y)
    D_w J(u, y) = (1/N) sum_j delta_j(u) f_T(y),   D_mu J = (1/N) sum_j delta_j
    At the last node r_S is used in place of r_{S+1}.
    """
    if co.states.shape != traj.states.shape:
        raise GridMismatchError("forward and co-state trajectories differ in shape")
    N = traj.n_data
    dsig = sigma.d1(preactivation(ctrl, traj.states))
    r_next = np.concatenate([co.states[1:], co.states[-1:]], axis=0)
    g = dsig * r_next
    d_a = g.mean(axis=1)
    d_b = -np.einsum("sjk,sjl->skl", g, traj.states) / N
    Z = network_output(traj.terminal, cls)
    delta = output_sensitivity(Z, np.atleast_2d(targets), h, loss, cls.u_grid)
    d_w = delta.T @ traj.terminal / N
    d_mu = delta.mean(axis=0)
    return LossGradient(ctrl.grid, cls.u_grid, ctrl.T, d_a, d_b, d_w, d_mu)


@dataclass(frozen=True)
class LearningProblem:
    """Training data together with the fixed modelling choices."""

    data: TrainingSet
    sigma: Activation = Activation("sigmoid")
    h: Predictor = Predictor("identity")
    loss: str = "mse"

    def forward(self, ctrl: ControlPath) -> Trajectory:
        return solve_forward_euler(self.data.initial, ctrl, self.sigma)

    def objective(self, ctrl: ControlPath, cls: Classifier) -> float:
        traj = self.forward(ctrl)
        return evaluate_loss(network_output(traj.terminal, cls), self.data.targets, self.h, self.loss, cls.u_grid)

    def per_datum(self, traj: Trajectory, cls: Classifier) -> np.ndarray:
        Z = network_output(traj.terminal, cls)
        return np.array([evaluate_loss(Z[j:j + 1], self.data.targets[j:j + 1], self.h, self.loss, cls.u_grid)
                         for j in range(traj.n_data)])

    def evaluate(self, ctrl: ControlPath, cls: Classifier):
        """Loss, gradient, forward and co-state trajectories."""
        traj = self.forward(ctrl)
        Z = network_output(traj.terminal, cls)
        J = evaluate_loss(Z, self.data.targets, self.h, self.loss, cls.u_grid)
        term = adjoint_terminal(traj.terminal, cls, self.h, self.data.targets, self.loss)
        co = solve_backward(traj, ctrl, self.sigma, term)
        grad = loss_gradient(traj, co, ctrl, self.sigma, cls, self.h, self.data.targets, self.loss)
        return J, grad, traj, co


def stationarity_residuals(grad: LossGradient, n_data: int) -> dict:
    """L2 norms of the summed stationarity expressions, i.e. N times the gradient norms.

    sum_j sigma'(xi) r,  sum_j f(z) sigma'(xi(y)) r(y),
    sum_j (P_pre - P) h'(Z) f_T,  sum_j (P_pre - P) h'(Z).
    """
    return {k: n_data * v for k, v in grad.norms().items()}


@dataclass
class TrainingResult:
    ctrl: ControlPath
    cls: Classifier
    history: list
    steps: list
    residuals: dict
    iterations: int
    converged: bool
    records: list = field(default_factory=list)


def _descend(ctrl: ControlPath, cls: Classifier, grad: LossGradient, tau: float):
    return (ControlPath(ctrl.grid, ctrl.T, ctrl.a - tau * grad.d_a, ctrl.b - tau * grad.d_b),
            Classifier(cls.u_grid, cls.y_grid, cls.w - tau * grad.d_w, cls.mu - tau * grad.d_mu))


def train_gradient_flow(problem: LearningProblem, ctrl: ControlPath, cls: Classifier, step: float = 1.0,
                        iters: int = 500, max_halvings: int = 30, growth: float = 2.0, tol: float = 0.0,
                        log_path=None, callback: Callable | None = None) -> TrainingResult:
    """Steepest descent x <- x - tau DJ(x) jointly in (a, b, w, mu) with backtracking.

    Each trial step is ``growth`` times the last accepted one (never more than
    ``step``); it is halved up to ``max_halvings`` times until J does not
    increase. Training stops after ``iters`` accepted steps or once every
    stationarity residual is at most ``tol``. With ``log_path`` a JSON line
    with the loss and per-datum losses is appended per iteration.
    """
    if step <= 0:
        raise ValueError("step must be positive")
    fh = open(log_path, "a", encoding="utf-8") if log_path is not None else None
    try:
        J, grad, traj, _ = problem.evaluate(ctrl, cls)
        history, steps, records = [J], [], []
        tau = step
        converged = False
        it = 0
        for it in range(1, iters + 1):
            res = stationarity_residuals(grad, problem.data.n)
            if max(res.values()) <= tol:
                converged = True
                it -= 1
                break
            g2 = grad.squared_norm()
            trial = min(step, tau * growth)
            accepted = None
            for _ in range(max_halvings + 1):
                c2, w2 = _descend(ctrl, cls, grad, trial)
                try:
                    J2 = problem.objective(c2, w2)
                except (NonFiniteStateError, FloatingPointError, ValueError):
                    J2 = np.inf
                if J2 <= J:
                    accepted = (c2, w2, J2)
                    break
                trial *= 0.5
            if accepted is None:
                # the predicted decrease is below rounding of J: treat as converged
                if trial * g2 <= 1e-13 * max(abs(J), 1e-300):
                    converged = True
                    it -= 1
                    break
                raise StepUnderflowError(it, trial, J)
            ctrl, cls, _ = accepted
            tau = trial
            J, grad, traj, _ = problem.evaluate(ctrl, cls)
            history.append(J)
            steps.append(tau)
            rec = {"iter": it, "loss": J, "step": tau,
                   "per_datum": problem.per_datum(traj, cls).tolist()}
            records.append(rec)
            if fh is not None:
                fh.write(json.dumps(rec) + "\n")
            if callback is not None:
                callback(rec)
        res = stationarity_residuals(grad, problem.data.n)
        if max(res.values()) <= tol:
            converged = True
        return TrainingResult(ctrl, cls, history, steps, res, it, converged, records)
    finally:
        if fh is not None:
            fh.close()


def orthonormal_basis(F: np.ndarray, weights: np.ndarray, tol: float = DEFAULT_RANK_TOL) -> np.ndarray:
    """Gram-Schmidt (applied twice) on the rows of F in the weighted L2 product.

    A vector is dropped when its remainder is below ``tol`` times the largest
    input norm. Returns shape (K, M).
    """
    F = np.atleast_2d(F)
    scale = float(np.max(weighted_norm(F, weights))) if F.size else 0.0
    basis: list[np.ndarray] = []
    if scale == 0.0:
        return np.zeros((0, F.shape[1]))
    for f in F:
        v = f.copy()
        for _ in range(2):
            for q in basis:
                v = v - np.dot(v * weights, q) * q
        nv = float(weighted_norm(v, weights))
        if nv > tol * scale:
            basis.append(v / nv)
    return np.array(basis).reshape(len(basis), F.shape[1])


@dataclass
class StationaryClassifier:
    """Least-squares classifier w(u, y) = sum_k c_k(u) e_k(y) with bias mu(u).

    ``basis`` (K, M) is orthonormal on Y, ``coeffs`` has shape (|U|, K),
    ``residuals`` holds ||W f_T^j + mu - P^j||_{L2(U)} per datum.
    """

    classifier: Classifier
    basis: np.ndarray
    coeffs: np.ndarray
    omega: np.ndarray
    A: np.ndarray
    residuals: np.ndarray

    @property
    def rank(self) -> int:
        return self.basis.shape[0]


def stationary_classifier(fT, targets: np.ndarray, y_grid: SpatialGrid, u_grid: SpatialGrid,
                          tol: float = DEFAULT_RANK_TOL) -> StationaryClassifier:
    """Classifier that zeroes D_w J and D_mu J for h = identity and MSE.

    Omega_jk = <f_T^j, e_k>, A = (I - e e^T / N) Omega, c(u) = A^+ P(u) and
    mu(u) = mean_j (P^j(u) - Omega_j c(u)). The component of w orthogonal to
    the terminal states is set to zero.
    """
    F = stack_states(fT, y_grid)
    P = np.atleast_2d(np.asarray(targets, dtype=float))
    N = F.shape[0]
    if P.shape != (N, u_grid.size):
        raise GridMismatchError("targets do not match the data count or the U grid")
    E = orthonormal_basis(F, y_grid.weights, tol)
    K = E.shape[0]
    if N > 1 and K == 0:
        raise DegenerateDataError("all terminal states vanish")
    omega = (F * y_grid.weights) @ E.T
    A = omega - omega.mean(axis=0, keepdims=True)
    if N > 1 and np.max(np.abs(A), initial=0.0) <= tol * max(1.0, np.max(np.abs(omega), initial=0.0)):
        raise DegenerateDataError("all terminal states coincide; the data cannot be separated")
    coeffs = (pseudo_inverse(A, tol) @ P).T if K else np.zeros((u_grid.size, 0))
    mu = (P - omega @ coeffs.T).mean(axis=0)
    w = coeffs @ E
    resid = weighted_norm(omega @ coeffs.T + mu - P, u_grid.weights)
    return StationaryClassifier(Classifier(u_grid, y_grid, w, mu), E, coeffs, omega, A, resid)


def reduced_control_forward(f_init, a: np.ndarray, b_coeffs: np.ndarray, grid: SpatialGrid, T: float,
                            sigma: Activation) -> Trajectory:
    """Euler for df^j/dt = sigma(a - sum_l b_l(y, t) <f^l, f^j>), coupled across j.

    ``a`` has shape (S+1, M), ``b_coeffs`` shape (S+1, N, M).
    """
    F = stack_states(f_init, grid)
    a = np.asarray(a, dtype=float)
    bc = np.asarray(b_coeffs, dtype=float)
    S = a.shape[0] - 1
    N = F.shape[0]
    if S < 1 or a.shape != (S + 1, grid.size) or bc.shape != (S + 1, N, grid.size):
        raise GridMismatchError("reduced controls have inconsistent shapes")
    dt = T / S
    out = np.empty((S + 1,) + F.shape)
    out[0] = F
    for s in range(S):
        G = (F * grid.weights) @ F.T
        F = F + dt * sigma(a[s][None, :] - G @ bc[s])
        _check_finite(F, s + 1)
        out[s + 1] = F
    return Trajectory(grid, T, out, {"solver": "reduced_euler"})


def predictions(traj: Trajectory, cls: Classifier, h: Predictor) -> np.ndarray:
    return predict(network_output(traj.terminal, cls), h, cls.u_grid)
