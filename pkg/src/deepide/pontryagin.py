"""Box-constrained optimal control through the minimum principle.

The pointwise objective is T(a, b) = sum_j sigma(a - <b, f_j>) r_j for a
fixed label y; minimizing it at every (y, t) against the current co-state
gives the control update of the method of successive approximations.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .activations import Activation
from .adjoint import LearningProblem, adjoint_terminal, solve_backward
from .dynamics import ControlPath, Trajectory
from .grid import GridMismatchError, SpatialGrid
from .output import Classifier, evaluate_loss, network_output

log = logging.getLogger(__name__)


class MSADivergenceError(RuntimeError):
    def __init__(self, losses: list):
        self.losses = list(losses)
        super().__init__(f"loss increased for 10 consecutive sweeps; last losses {self.losses[-11:]}")


@dataclass(frozen=True)
class BoxSet:
    """Admissible values [a_min, a_max] x [b_min, b_max]."""

    a_min: float
    a_max: float
    b_min: float
    b_max: float

    def __post_init__(self):
        if not (self.a_min < self.a_max and self.b_min < self.b_max):
            raise ValueError("box needs a_min < a_max and b_min < b_max")
        if not np.all(np.isfinite([self.a_min, self.a_max, self.b_min, self.b_max])):
            raise ValueError("box bounds must be finite")

    @classmethod
    def parse(cls, text: str) -> "BoxSet":
        parts = [float(p) for p in text.split(",")]
        if len(parts) != 4:
            raise ValueError("box must be given as a_min,a_max,b_min,b_max")
        return cls(*parts)

    def corners(self) -> list[tuple[float, float]]:
        return [(self.a_min, self.b_min), (self.a_min, self.b_max),
                (self.a_max, self.b_min), (self.a_max, self.b_max)]

    def clip_a(self, a):
        return np.clip(a, self.a_min, self.a_max)

    def clip_b(self, b):
        return np.clip(b, self.b_min, self.b_max)

    def scaled(self, factor: float) -> "BoxSet":
        """Box with the same centre and half-widths multiplied by ``factor``."""
        ca, ha = 0.5 * (self.a_min + self.a_max), 0.5 * (self.a_max - self.a_min)
        cb, hb = 0.5 * (self.b_min + self.b_max), 0.5 * (self.b_max - self.b_min)
        return BoxSet(ca - factor * ha, ca + factor * ha, cb - factor * hb, cb + factor * hb)

    def to_dict(self) -> dict:
        return {"a_min": self.a_min, "a_max": self.a_max, "b_min": self.b_min, "b_max": self.b_max}


def hamiltonian(F: np.ndarray, r: np.ndarray, a: np.ndarray, b: np.ndarray, sigma: Activation,
                grid: SpatialGrid) -> float:
    """H(F, r, a, b) = sum_j int_Y sigma(a - B_b f_j) r_j dy."""
    F = np.atleast_2d(F)
    r = np.atleast_2d(r)
    if F.shape != r.shape or F.shape[1] != grid.size or np.shape(a) != (grid.size,) \
            or np.shape(b) != (grid.size, grid.size):
        raise GridMismatchError("hamiltonian arguments have inconsistent shapes")
    xi = a[None, :] - F @ (b * grid.weights).T
    return float(np.sum(sigma(xi) * r * grid.weights))


def pointwise_objective(a: np.ndarray, b: np.ndarray, F: np.ndarray, r: np.ndarray, sigma: Activation,
                        weights: np.ndarray) -> np.ndarray:
    """T(a, b) for a batch: a (B,), b (B, M), r (B, N), F (N, M) shared."""
    xi = a[:, None] - b @ (F * weights).T
    return np.sum(sigma(xi) * r, axis=1)


@dataclass
class ArgminResult:
    """Minimizers of T per batch entry with tie flags.

    ``flag_a`` marks entries with r = 0 (every control is optimal);
    ``flag_b`` marks z with f_j(z) = 0 for all j or entries with r = 0.
    """

    a: np.ndarray
    b: np.ndarray
    value: np.ndarray
    flag_a: np.ndarray
    flag_b: np.ndarray


def _lmo(ga: np.ndarray, gb: np.ndarray, box: BoxSet):
    """Box vertex minimizing the linearization; zero slopes resolve to the lower bound."""
    a = np.where(ga < 0, box.a_max, box.a_min)
    b = np.where(gb < 0, box.b_max, box.b_min)
    return a, b


def argmin_T(F: np.ndarray, r: np.ndarray, box: BoxSet, sigma: Activation, weights: np.ndarray,
             rng: np.random.Generator | None = None, n_random: int = 4, max_iter: int = 400,
             step_tol: float = 1e-13, zero_tol: float = 0.0, tie_tol: float = 1e-12) -> ArgminResult:
    """Minimize T_{F, r}(a, b) = sum_j sigma(a - <b, f_j>) r_j over the box.

    ``F`` (N, M) holds the states on the z grid with quadrature ``weights``;
    ``r`` has shape (N,) for one label or (C, N) for C labels solved at once.
    Projected gradient descent in the L2 metric with Armijo backtracking is
    started from the four box corners (b constant) and ``n_random`` random
    points; the box vertices selected by the sign of the gradient at every
    end point are evaluated too. The smallest value wins; within
    ``tie_tol`` vertex candidates and earlier starts are preferred.
    """
    F = np.atleast_2d(np.asarray(F, dtype=float))
    r = np.asarray(r, dtype=float)
    single = r.ndim == 1
    r = np.atleast_2d(r)
    C, N = r.shape
    M = F.shape[1]
    if F.shape[0] != N or weights.shape != (M,):
        raise GridMismatchError("argmin_T arguments have inconsistent shapes")
    rng = rng if rng is not None else np.random.default_rng(0)

    starts_a = [np.full(C, ca) for ca, _ in box.corners()]
    starts_b = [np.full((C, M), cb) for _, cb in box.corners()]
    for _ in range(n_random):
        starts_a.append(rng.uniform(box.a_min, box.a_max, C))
        starts_b.append(rng.uniform(box.b_min, box.b_max, (C, M)))
    n_starts = len(starts_a)
    a = np.concatenate(starts_a)
    b = np.concatenate(starts_b)
    R = np.tile(r, (n_starts, 1))
    FW = F * weights
    scale = sigma.lipschitz * np.sum(np.abs(R), axis=1) * (1.0 + np.sum(FW * F))
    alpha = 1.0 / np.maximum(scale, 1e-300)

    def value_and_grad(a_, b_, R_):
        xi = a_[:, None] - b_ @ FW.T
        lam = sigma.d1(xi) * R_
        return np.sum(sigma(xi) * R_, axis=1), lam.sum(axis=1), -lam @ F

    val, ga, gb = value_and_grad(a, b, R)
    active = np.ones(a.shape[0], dtype=bool)
    for _ in range(max_iter):
        if not active.any():
            break
        idx = np.flatnonzero(active)
        al = alpha[idx] * 2.0
        accepted = np.zeros(idx.size, dtype=bool)
        na, nb = a[idx].copy(), b[idx].copy()
        nval = val[idx].copy()
        for _ in range(60):
            todo = ~accepted
            if not todo.any():
                break
            ii = idx[todo]
            ta = box.clip_a(a[ii] - al[todo] * ga[ii])
            tb = box.clip_b(b[ii] - al[todo, None] * gb[ii])
            tv, _, _ = value_and_grad(ta, tb, R[ii])
            lin = ga[ii] * (ta - a[ii]) + np.sum(gb[ii] * (tb - b[ii]) * weights, axis=1)
            ok = tv <= val[ii] + 1e-4 * lin
            pos = np.flatnonzero(todo)
            good = pos[ok]
            na[good], nb[good], nval[good] = ta[ok], tb[ok], tv[ok]
            accepted[good] = True
            al[pos[~ok]] *= 0.5
        moved = np.maximum(np.abs(na - a[idx]), np.max(np.abs(nb - b[idx]), axis=1))
        a[idx], b[idx] = na, nb
        alpha[idx] = al
        v2, ga2, gb2 = value_and_grad(a[idx], b[idx], R[idx])
        val[idx], ga[idx], gb[idx] = v2, ga2, gb2
        done = (~accepted) | (moved <= step_tol)
        active[idx[done]] = False

    # vertex candidates from the gradient sign at each end point, ordered first
    va, vb = _lmo(ga, gb, box)
    vval, _, _ = value_and_grad(va, vb, R)
    cand_a = np.concatenate([va, a]).reshape(2 * n_starts, C)
    cand_b = np.concatenate([vb, b]).reshape(2 * n_starts, C, M)
    cand_v = np.concatenate([vval, val]).reshape(2 * n_starts, C)
    best_v = cand_v.min(axis=0)
    thresh = best_v + tie_tol * (1.0 + np.abs(best_v))
    pick = np.argmax(cand_v <= thresh[None, :], axis=0)
    cols = np.arange(C)
    out_a, out_b, out_v = cand_a[pick, cols], cand_b[pick, cols], cand_v[pick, cols]

    r_zero = np.all(np.abs(r) <= zero_tol, axis=1)
    f_zero = np.all(np.abs(F) <= zero_tol, axis=0)
    flag_b = r_zero[:, None] | f_zero[None, :]
    # on flagged sets every value is optimal: resolve to the lower bounds
    out_a = np.where(r_zero, box.a_min, out_a)
    out_b = np.where(flag_b, box.b_min, out_b)
    out_v = pointwise_objective(out_a, out_b, F, r, sigma, weights)
    if single:
        return ArgminResult(out_a[0], out_b[0], out_v[0], r_zero[0], flag_b[0])
    return ArgminResult(out_a, out_b, out_v, r_zero, flag_b)


def bang_bang_control(f: np.ndarray, r: np.ndarray, box: BoxSet):
    """Closed-form minimizer for one datum and increasing sigma.

    a = a_min where r > 0 and a_max where r < 0; b(y, z) = b_max where
    r(y) f(z) > 0 and b_min where r(y) f(z) < 0. Ties resolve to the lower
    bound and are returned as flags ``(flag_a, flag_b)``.
    """
    f = np.asarray(f, dtype=float)
    r = np.asarray(r, dtype=float)
    a = np.where(r < 0, box.a_max, box.a_min)
    rf = np.outer(r, f)
    b = np.where(rf > 0, box.b_max, box.b_min)
    return a, b, r == 0, rf == 0


def _control_argmin(F: np.ndarray, r: np.ndarray, box: BoxSet, sigma: Activation, grid: SpatialGrid,
                    rng: np.random.Generator, zero_tol: float) -> ArgminResult:
    """Argmin at every label y for states F (N, M) and co-states r (N, M)."""
    return argmin_T(F, r.T, box, sigma, grid.weights, rng=rng, zero_tol=zero_tol)


@dataclass
class PontryaginState:
    ctrl: ControlPath
    forward: Trajectory
    co: Trajectory
    hamiltonian_history: list = field(default_factory=list)
    loss_history: list = field(default_factory=list)
    change_history: list = field(default_factory=list)
    flag_a: np.ndarray | None = None
    flag_b: np.ndarray | None = None
    converged: bool = False
    sweeps: int = 0

    @property
    def hamiltonian(self) -> np.ndarray:
        return self.hamiltonian_history[-1]

    def hamiltonian_span(self) -> float:
        H = self.hamiltonian
        return float(H.max() - H.min())


def node_hamiltonians(traj: Trajectory, co: Trajectory, ctrl: ControlPath, sigma: Activation) -> np.ndarray:
    """H on each control interval [t_s, t_{s+1}], s = 0..S-1.

    The state and control at t_s are paired with the interval mean of the
    co-state, (r_s + r_{s+1}) / 2, which cancels the leading O(dt) drift of
    either one-sided pairing. The control at t_S carries no weight and is
    left out.
    """
    S = ctrl.steps
    out = np.empty(S)
    for s in range(S):
        rs = 0.5 * (co.states[s] + co.states[s + 1])
        out[s] = hamiltonian(traj.states[s], rs, ctrl.a[s], ctrl.b[s], sigma, ctrl.grid)
    return out


def corner_fraction(state: PontryaginState, box: BoxSet, tol: float = 1e-6) -> float:
    """Fraction of unflagged control values within ``tol`` of a box bound."""
    a, b = state.ctrl.a, state.ctrl.b
    near_a = (np.abs(a - box.a_min) <= tol) | (np.abs(a - box.a_max) <= tol)
    near_b = (np.abs(b - box.b_min) <= tol) | (np.abs(b - box.b_max) <= tol)
    fa = state.flag_a if state.flag_a is not None else np.zeros(a.shape, bool)
    fb = state.flag_b if state.flag_b is not None else np.zeros(b.shape, bool)
    total = np.sum(~fa) + np.sum(~fb)
    if total == 0:
        return 1.0
    return float((np.sum(near_a & ~fa) + np.sum(near_b & ~fb)) / total)


def boundary_contact_fraction(ctrl: ControlPath, box: BoxSet, tol: float = 1e-9) -> float:
    """Fraction of (y, t) at which a or some b(y, ., t) sits on the box boundary."""
    on_a = (np.abs(ctrl.a - box.a_min) <= tol) | (np.abs(ctrl.a - box.a_max) <= tol)
    on_b = np.any((np.abs(ctrl.b - box.b_min) <= tol) | (np.abs(ctrl.b - box.b_max) <= tol), axis=2)
    return float(np.mean(on_a | on_b))


def solve_msa(problem: LearningProblem, cls: Classifier, box: BoxSet, init: ControlPath, sweeps: int = 200,
              relax: float = 0.5, tol: float = 1e-6, seed: int = 0, zero_tol: float = 1e-12,
              callback=None) -> PontryaginState:
    """Method of successive approximations for the coupled state/co-state system.

    Each sweep solves forward, solves backward, minimizes the Hamiltonian
    integrand at every (y, t) and moves the controls a fraction ``relax``
    towards the minimizer. Stops once the sup-norm distance between the
    controls and the pointwise minimizer is at most ``tol``. ``zero_tol`` (relative to max |r|) defines the flagged
    set where r vanishes.
    """
    if not 0 < relax <= 1:
        raise ValueError("relax must lie in (0, 1]")
    rng = np.random.default_rng(seed)
    ctrl = ControlPath(init.grid, init.T, box.clip_a(init.a), box.clip_b(init.b))
    targets = problem.data.targets
    state = None
    ups = 0
    S = ctrl.steps
    for sweep in range(1, sweeps + 1):
        traj = problem.forward(ctrl)
        Z = network_output(traj.terminal, cls)
        J = evaluate_loss(Z, targets, problem.h, problem.loss, cls.u_grid)
        co = solve_backward(traj, ctrl, problem.sigma,
                            adjoint_terminal(traj.terminal, cls, problem.h, targets, problem.loss))
        if state is None:
            state = PontryaginState(ctrl, traj, co)
        else:
            ups = ups + 1 if J > state.loss_history[-1] else 0
        state.loss_history.append(J)
        state.hamiltonian_history.append(node_hamiltonians(traj, co, ctrl, problem.sigma))
        scale = float(np.max(np.abs(co.states)))
        ztol = zero_tol * scale if scale > 0 else 0.0
        new_a = np.empty_like(ctrl.a)
        new_b = np.empty_like(ctrl.b)
        fa = np.zeros(ctrl.a.shape, bool)
        fb = np.zeros(ctrl.b.shape, bool)
        for s in range(S + 1):
            res = _control_argmin(traj.states[s], co.states[min(s + 1, S)], box, problem.sigma,
                                  ctrl.grid, rng, ztol)
            new_a[s], new_b[s], fa[s], fb[s] = res.a, res.b, res.flag_a, res.flag_b
        upd_a = (1 - relax) * ctrl.a + relax * new_a
        upd_b = (1 - relax) * ctrl.b + relax * new_b
        # distance to the pointwise minimizer, i.e. the control change at relax = 1
        change = float(max(np.max(np.abs(new_a - ctrl.a)), np.max(np.abs(new_b - ctrl.b))))
        state.change_history.append(change)
        state.flag_a, state.flag_b = fa, fb
        state.ctrl, state.forward, state.co, state.sweeps = ctrl, traj, co, sweep
        if callback is not None:
            callback({"sweep": sweep, "loss": J, "change": change,
                      "hamiltonian_span": state.hamiltonian_span(),
                      "boundary_contact": boundary_contact_fraction(ctrl, box)})
        if ups >= 10:
            raise MSADivergenceError(state.loss_history)
        if change <= tol:
            state.converged = True
            break
        ctrl = ControlPath(ctrl.grid, ctrl.T, upd_a, upd_b)
    return state
