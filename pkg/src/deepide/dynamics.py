"""Forward propagation of the continuous-depth network.

Each datum evolves by df/dt = sigma(a - B_b f) with (B_b f)(y) = int b(y,z) f(z) dz.
Controls are sampled on a uniform time grid; explicit Euler uses the control
at the left node of each step, so node ``S`` of a control path never
influences the state. Time integrals of controls use the matching
left-endpoint rectangle rule (:func:`time_weights`).
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .activations import Activation
from .grid import GridFunction, GridMismatchError, Kernel, SpatialGrid, weighted_norm

log = logging.getLogger(__name__)


class NonFiniteStateError(FloatingPointError):
    """A solver produced a non-finite value."""

    def __init__(self, step: int, datum: int, what: str = "state"):
        self.step = step
        self.datum = datum
        super().__init__(f"non-finite {what} at time index {step}, datum {datum}")


class PicardConvergenceError(RuntimeError):
    def __init__(self, residual: float, iterations: int):
        self.residual = residual
        self.iterations = iterations
        super().__init__(f"Picard iteration did not converge after {iterations} iterations (residual {residual:.3e})")


def time_weights(steps: int, T: float) -> np.ndarray:
    """Left-endpoint rectangle weights on the nodes 0..steps (last node gets 0)."""
    w = np.full(steps + 1, T / steps)
    w[-1] = 0.0
    return w


@dataclass(eq=False)
class ControlPath:
    """Bias a(y, t) and weight b(y, z, t) sampled at the time nodes t_s = s*T/S.

    ``a`` has shape (S+1, M), ``b`` has shape (S+1, M, M).
    """

    grid: SpatialGrid
    T: float
    a: np.ndarray
    b: np.ndarray

    def __post_init__(self):
        self.a = np.array(self.a, dtype=float)
        self.b = np.array(self.b, dtype=float)
        M = self.grid.size
        if self.a.ndim != 2 or self.a.shape[1] != M or self.a.shape[0] < 2:
            raise GridMismatchError(f"a must have shape (S+1, {M}) with S >= 1, got {self.a.shape}")
        if self.b.shape != (self.a.shape[0], M, M):
            raise GridMismatchError(f"b must have shape {(self.a.shape[0], M, M)}, got {self.b.shape}")
        if not self.T > 0:
            raise ValueError("T must be positive")
        if not (np.all(np.isfinite(self.a)) and np.all(np.isfinite(self.b))):
            raise ValueError("controls must be finite")

    @classmethod
    def constant(cls, grid: SpatialGrid, T: float, steps: int, a=0.0, b=0.0) -> "ControlPath":
        M = grid.size
        a_arr = np.broadcast_to(np.asarray(a, dtype=float), (M,))
        b_arr = np.broadcast_to(np.asarray(b, dtype=float), (M, M))
        return cls(grid, T, np.tile(a_arr, (steps + 1, 1)), np.tile(b_arr, (steps + 1, 1, 1)))

    @classmethod
    def random(cls, grid: SpatialGrid, T: float, steps: int, rng: np.random.Generator,
               a_scale: float = 1.0, b_scale: float = 1.0) -> "ControlPath":
        M = grid.size
        a = a_scale * rng.standard_normal((steps + 1, M))
        b = b_scale * rng.standard_normal((steps + 1, M, M))
        return cls(grid, T, a, b)

    @property
    def steps(self) -> int:
        return self.a.shape[0] - 1

    @property
    def dt(self) -> float:
        return self.T / self.steps

    @property
    def times(self) -> np.ndarray:
        return np.linspace(0.0, self.T, self.steps + 1)

    @property
    def time_weights(self) -> np.ndarray:
        return time_weights(self.steps, self.T)

    def operators(self) -> np.ndarray:
        """Quadrature matrices of B_b at every node, shape (S+1, M, M)."""
        return self.b * self.grid.weights[None, None, :]

    def a_at(self, s: int) -> GridFunction:
        return GridFunction(self.grid, self.a[s])

    def b_at(self, s: int) -> Kernel:
        return Kernel(self.grid, self.grid, self.b[s])

    def a_norms(self) -> np.ndarray:
        return weighted_norm(self.a, self.grid.weights)

    def b_norms(self) -> np.ndarray:
        w2 = np.outer(self.grid.weights, self.grid.weights)
        return np.sqrt(np.sum(self.b**2 * w2, axis=(1, 2)))

    def copy(self) -> "ControlPath":
        return ControlPath(self.grid, self.T, self.a.copy(), self.b.copy())

    def bv_norm(self) -> float:
        """Total variation in time of (a, b) in the L2(Y) / L2(YxY) norms."""
        da = weighted_norm(np.diff(self.a, axis=0), self.grid.weights)
        w2 = np.outer(self.grid.weights, self.grid.weights)
        db = np.sqrt(np.sum(np.diff(self.b, axis=0) ** 2 * w2, axis=(1, 2)))
        return float(np.sum(da) + np.sum(db))


@dataclass(eq=False)
class Trajectory:
    """States (or co-states) of N data at every time node, shape (S+1, N, M)."""

    grid: SpatialGrid
    T: float
    states: np.ndarray
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.states = np.asarray(self.states, dtype=float)
        if self.states.ndim != 3 or self.states.shape[2] != self.grid.size:
            raise GridMismatchError(f"states must have shape (S+1, N, {self.grid.size}), got {self.states.shape}")

    @property
    def steps(self) -> int:
        return self.states.shape[0] - 1

    @property
    def n_data(self) -> int:
        return self.states.shape[1]

    @property
    def dt(self) -> float:
        return self.T / self.steps

    @property
    def times(self) -> np.ndarray:
        return np.linspace(0.0, self.T, self.steps + 1)

    @property
    def initial(self) -> np.ndarray:
        return self.states[0]

    @property
    def terminal(self) -> np.ndarray:
        return self.states[-1]

    def state(self, s: int, j: int) -> GridFunction:
        return GridFunction(self.grid, self.states[s, j])

    def norms(self) -> np.ndarray:
        """L2(Y) norms, shape (S+1, N)."""
        return weighted_norm(self.states, self.grid.weights)


def stack_states(data, grid: SpatialGrid) -> np.ndarray:
    """Turn a list of GridFunctions (or an array) into an (N, M) array."""
    if isinstance(data, GridFunction):
        data = [data]
    if isinstance(data, np.ndarray):
        arr = np.array(data, dtype=float)
        if arr.ndim == 1:
            arr = arr[None, :]
    else:
        for f in data:
            if isinstance(f, GridFunction) and f.grid != grid:
                raise GridMismatchError("initial data live on a different grid than the controls")
        arr = np.stack([f.values if isinstance(f, GridFunction) else np.asarray(f, float) for f in data])
    if arr.ndim != 2 or arr.shape[1] != grid.size:
        raise GridMismatchError(f"expected data of shape (N, {grid.size}), got {arr.shape}")
    return arr


def apply_kernel(b: Kernel, f: GridFunction) -> GridFunction:
    """(B_b f)(y_k) = sum_l b(y_k, z_l) f(z_l) |Y_l|."""
    if b.col_grid != f.grid:
        raise GridMismatchError("kernel column grid differs from the function grid")
    return GridFunction(b.row_grid, b.operator() @ f.values)


def _check_finite(x: np.ndarray, step: int, what: str = "state") -> None:
    if not np.all(np.isfinite(x)):
        bad = np.argwhere(~np.isfinite(x.reshape(x.shape[0], -1)).all(axis=1))
        raise NonFiniteStateError(step, int(bad[0, 0]) if bad.size else -1, what)


def preactivation(ctrl: ControlPath, states: np.ndarray) -> np.ndarray:
    """xi = a - B_b f at every node, for states of shape (S+1, N, M)."""
    K = ctrl.operators()
    return ctrl.a[:, None, :] - np.einsum("skl,sjl->sjk", K, states)


def solve_forward_euler(f_init, ctrl: ControlPath, sigma: Activation) -> Trajectory:
    """Explicit Euler: f_{s+1} = f_s + dt * sigma(a_s - B_{b_s} f_s), all data at once."""
    F = stack_states(f_init, ctrl.grid)
    K = ctrl.operators()
    dt = ctrl.dt
    out = np.empty((ctrl.steps + 1,) + F.shape)
    out[0] = F
    for s in range(ctrl.steps):
        # blow-up is reported by _check_finite, not by numpy warnings
        with np.errstate(over="ignore", invalid="ignore"):
            xi = ctrl.a[s] - F @ K[s].T
            F = F + dt * sigma(xi)
        _check_finite(F, s + 1)
        out[s + 1] = F
    return Trajectory(ctrl.grid, ctrl.T, out, {"solver": "euler"})


def solve_forward_picard(f_init, ctrl: ControlPath, sigma: Activation, max_iter: int = 200,
                         tol: float = 1e-12, stall_ratio: float = 0.9) -> Trajectory:
    """Fixed-point iteration f <- f_I + int_0^t sigma(a - B_b f) ds.

    The time integral is the trapezoidal rule on the control nodes. Iterates
    until the sup-in-time L2 distance between successive iterates is below
    ``tol``. When the contraction stalls the current window is halved and the
    iteration restarted from its left end.
    """
    F0 = stack_states(f_init, ctrl.grid)
    K = ctrl.operators()
    dt = ctrl.dt
    S = ctrl.steps
    w = ctrl.grid.weights
    out = np.empty((S + 1,) + F0.shape)
    out[0] = F0
    start, window = 0, S
    iterations, restarts = 0, 0
    history: list[float] = []
    while start < S:
        end = min(start + window, S)
        f = np.repeat(out[start][None], end - start + 1, axis=0)
        prev_res = np.inf
        converged = stalled = False
        for it in range(1, max_iter + 1):
            g = sigma(ctrl.a[start:end + 1, None, :] - np.einsum("skl,sjl->sjk", K[start:end + 1], f))
            incr = 0.5 * dt * (g[1:] + g[:-1])
            new = np.empty_like(f)
            new[0] = out[start]
            new[1:] = out[start] + np.cumsum(incr, axis=0)
            _check_finite(new.reshape(-1, new.shape[-1]), start, "Picard iterate")
            res = float(np.max(weighted_norm(new - f, w)))
            f = new
            iterations += 1
            history.append(res)
            if res <= tol:
                converged = True
                break
            if it > 5 and res > stall_ratio * prev_res:
                stalled = True
                break
            prev_res = res
        if converged:
            out[start:end + 1] = f
            start = end
            continue
        if window == 1:
            raise PicardConvergenceError(history[-1], iterations)
        window = max(1, window // 2)
        restarts += 1
        log.debug("Picard %s on window of %d steps; halving", "stalled" if stalled else "hit max_iter", end - start)
    return Trajectory(ctrl.grid, ctrl.T, out, {"solver": "picard", "iterations": iterations,
                                                "restarts": restarts, "residuals": history})


@dataclass
class AprioriReport:
    """Margins (bound minus observed) of the three a-priori estimates.

    ``growth`` has shape (S+1, N); ``time_continuity`` holds the smallest
    margin over all node pairs per datum; ``stability`` (S+1, N) is filled
    only when a second run is supplied.
    """

    growth: np.ndarray
    time_continuity: np.ndarray
    stability: np.ndarray | None = None

    @property
    def min_margin(self) -> float:
        parts = [self.growth.min(), self.time_continuity.min()]
        if self.stability is not None:
            parts.append(self.stability.min())
        return float(min(parts))

    def ok(self, threshold: float = -1e-8) -> bool:
        return self.min_margin >= threshold

    def to_dict(self) -> dict:
        d = {"growth_min_margin": float(self.growth.min()),
             "time_continuity_min_margin": float(self.time_continuity.min()),
             "ok": self.ok()}
        if self.stability is not None:
            d["stability_min_margin"] = float(self.stability.min())
        return d


def _cumulative(values: np.ndarray, weights: np.ndarray) -> np.ndarray:
    """Left-rectangle integrals from 0 to each node."""
    out = np.zeros_like(values)
    out[1:] = np.cumsum(values[:-1] * weights[:-1])
    return out


def check_apriori_bound(traj: Trajectory, ctrl: ControlPath, sigma: Activation,
                        other: tuple[Trajectory, ControlPath] | None = None) -> AprioriReport:
    """Evaluate both sides of the growth, stability and time-continuity estimates.

    growth:      ||f(t)|| <= (||f_I|| + |s(0)| |Y|^.5 t + L||a||_{L1(0,t)}) exp(L ||b||_{L1(0,t)})
    stability:   ||f1 - f2|| <= (||dF_I|| + L||da||) exp(L||b2||)
                                + L E1(t) ||db|| exp(L(||b1|| + ||b2||))
    continuity:  ||f(t1) - f(t2)|| <= |s(0)| |Y|^.5 |t2 - t1|
                                + L(||a||_{L1(t1,t2)} + max ||f|| ||b||_{L1(t1,t2)})
    """
    if traj.steps != ctrl.steps:
        raise GridMismatchError("trajectory and controls use different time grids")
    L = sigma.lipschitz
    c0 = abs(float(sigma(0.0))) * np.sqrt(ctrl.grid.total_measure)
    wt = ctrl.time_weights
    t = ctrl.times
    A = _cumulative(ctrl.a_norms(), wt)
    B = _cumulative(ctrl.b_norms(), wt)
    nf = traj.norms()
    E = nf[0][None, :] + c0 * t[:, None] + L * A[:, None]
    growth = E * np.exp(L * B)[:, None] - nf

    S = traj.steps
    tc = np.full(traj.n_data, np.inf)
    an = ctrl.a_norms() * wt
    bn = ctrl.b_norms() * wt
    for s1 in range(S):
        diff = weighted_norm(traj.states[s1 + 1:] - traj.states[s1], ctrl.grid.weights)
        a_int = np.cumsum(an[s1:S])[:, None]
        b_int = np.cumsum(bn[s1:S])[:, None]
        fmax = np.maximum.accumulate(nf[s1:], axis=0)[1:]
        rhs = c0 * (t[s1 + 1:] - t[s1])[:, None] + L * (a_int + fmax * b_int)
        tc = np.minimum(tc, np.min(rhs - diff, axis=0))

    stability = None
    if other is not None:
        traj2, ctrl2 = other
        if traj2.states.shape != traj.states.shape:
            raise GridMismatchError("runs to compare must have identical shapes")
        d = weighted_norm(traj.states - traj2.states, ctrl.grid.weights)
        dfi = d[0][None, :]
        dA = _cumulative(weighted_norm(ctrl.a - ctrl2.a, ctrl.grid.weights), wt)
        w2 = np.outer(ctrl.grid.weights, ctrl.grid.weights)
        dB = _cumulative(np.sqrt(np.sum((ctrl.b - ctrl2.b) ** 2 * w2, axis=(1, 2))), wt)
        B2 = _cumulative(ctrl2.b_norms(), wt)
        rhs = (dfi + L * dA[:, None]) * np.exp(L * B2)[:, None] \
            + L * E * dB[:, None] * np.exp(L * (B + B2))[:, None]
        stability = rhs - d
    return AprioriReport(growth, tc, stability)
