"""Final layer: classifier, prediction functions and loss functionals."""
from __future__ import annotations

from dataclasses import dataclass, field
from itertools import combinations

import numpy as np
from scipy.special import expit, logsumexp, xlogy

from .grid import GridFunction, GridMismatchError, Kernel, SpatialGrid, weighted_norm

PREDICTORS = ("identity", "logistic", "softmax")
LOSSES = ("mse", "cross_entropy")


class DuplicateDataError(ValueError):
    def __init__(self, i: int, j: int):
        self.pair = (i, j)
        super().__init__(f"initial data {i} and {j} coincide")


class DensityError(ValueError):
    """A target that should be a probability density is not one."""


@dataclass(eq=False)
class Classifier:
    """Output weights w(u, y) on U x Y and bias mu(u) on U."""

    u_grid: SpatialGrid
    y_grid: SpatialGrid
    w: np.ndarray
    mu: np.ndarray

    def __post_init__(self):
        self.w = np.array(self.w, dtype=float)
        self.mu = np.array(self.mu, dtype=float)
        if self.w.shape != (self.u_grid.size, self.y_grid.size) or self.mu.shape != (self.u_grid.size,):
            raise GridMismatchError("classifier shapes do not match the U and Y grids")

    @classmethod
    def delta(cls, grid: SpatialGrid) -> "Classifier":
        """U = Y, w(u_k, y_l) = delta_kl / |Y_l| and mu = 0, so that Z = f(T)."""
        return cls(grid, grid, np.diag(1.0 / grid.weights), np.zeros(grid.size))

    @classmethod
    def zeros(cls, u_grid: SpatialGrid, y_grid: SpatialGrid) -> "Classifier":
        return cls(u_grid, y_grid, np.zeros((u_grid.size, y_grid.size)), np.zeros(u_grid.size))

    @property
    def kernel(self) -> Kernel:
        return Kernel(self.u_grid, self.y_grid, self.w)

    def copy(self) -> "Classifier":
        return Classifier(self.u_grid, self.y_grid, self.w.copy(), self.mu.copy())


@dataclass(frozen=True)
class Predictor:
    kind: str = "identity"

    def __post_init__(self):
        if self.kind not in PREDICTORS:
            raise ValueError(f"unknown predictor {self.kind!r}; choose from {PREDICTORS}")


@dataclass(eq=False)
class TrainingSet:
    """Pairs (initial state on Y, label function on U); initial data pairwise distinct."""

    y_grid: SpatialGrid
    u_grid: SpatialGrid
    initial: np.ndarray
    targets: np.ndarray
    names: list = field(default_factory=list)

    def __post_init__(self):
        self.initial = np.atleast_2d(np.array(self.initial, dtype=float))
        self.targets = np.atleast_2d(np.array(self.targets, dtype=float))
        n = self.initial.shape[0]
        if n < 1:
            raise ValueError("a training set needs at least one datum")
        if self.initial.shape != (n, self.y_grid.size) or self.targets.shape != (n, self.u_grid.size):
            raise GridMismatchError("training data shapes do not match the grids")
        if not (np.all(np.isfinite(self.initial)) and np.all(np.isfinite(self.targets))):
            raise ValueError("training data must be finite")
        for i, j in combinations(range(n), 2):
            if weighted_norm(self.initial[i] - self.initial[j], self.y_grid.weights) <= 1e-12:
                raise DuplicateDataError(i, j)

    @property
    def n(self) -> int:
        return self.initial.shape[0]


def network_output(fT, cls: Classifier) -> np.ndarray:
    """Z(u) = int_Y w(u, y) f(y, T) dy + mu(u) for one state (M,) or a stack (N, M)."""
    values = fT.values if isinstance(fT, GridFunction) else np.asarray(fT, dtype=float)
    if isinstance(fT, GridFunction) and fT.grid != cls.y_grid:
        raise GridMismatchError("terminal state and classifier use different Y grids")
    if values.shape[-1] != cls.y_grid.size:
        raise GridMismatchError("terminal state has the wrong number of cells")
    return values @ (cls.w * cls.y_grid.weights).T + cls.mu


def predict(Z: np.ndarray, h: Predictor, u_grid: SpatialGrid | None = None) -> np.ndarray:
    """Prediction P_pre = h(Z), elementwise except for softmax.

    softmax is exp(-Z) / int_U exp(-Z) du, evaluated after shifting by max(-Z).
    """
    Z = np.asarray(Z, dtype=float)
    if not np.all(np.isfinite(Z)):
        raise ValueError("network output must be finite")
    if h.kind == "identity":
        return Z.copy()
    if h.kind == "logistic":
        return expit(Z)
    if u_grid is None:
        raise ValueError("softmax needs the U grid for its normalization")
    shift = np.max(-Z, axis=-1, keepdims=True)
    e = np.exp(-Z - shift)
    denom = np.sum(e * u_grid.weights, axis=-1, keepdims=True)
    if not np.all(denom > 0) or not np.all(np.isfinite(denom)):
        raise FloatingPointError(f"softmax normalization underflow after shift {shift.ravel()}")
    return e / denom


def loss_mse(p_pre: np.ndarray, targets: np.ndarray, u_grid: SpatialGrid) -> float:
    """(1/2N) sum_j ||P_pre_j - P_j||^2_{L2(U)}."""
    p_pre = np.atleast_2d(p_pre)
    targets = np.atleast_2d(targets)
    if p_pre.shape != targets.shape:
        raise ValueError(f"prediction/target mismatch {p_pre.shape} vs {targets.shape}")
    return float(0.5 * np.mean(np.sum((p_pre - targets) ** 2 * u_grid.weights, axis=1)))


def _check_density(targets: np.ndarray, u_grid: SpatialGrid, tol: float = 1e-8) -> None:
    if np.any(targets < 0):
        raise DensityError("targets must be nonnegative")
    mass = targets @ u_grid.weights
    if np.any(np.abs(mass - 1.0) > tol):
        raise DensityError(f"targets must integrate to 1 over U, masses {mass}")


def log_softmax(Z: np.ndarray, u_grid: SpatialGrid) -> np.ndarray:
    """log(exp(-Z) / int exp(-Z) du), row-wise."""
    return -Z - logsumexp(-Z, b=u_grid.weights, axis=-1, keepdims=True)


def loss_cross_entropy(Z: np.ndarray, targets: np.ndarray, u_grid: SpatialGrid) -> float:
    """-(1/N) sum_j int log(softmax(Z_j)) P_j du."""
    Z = np.atleast_2d(np.asarray(Z, dtype=float))
    targets = np.atleast_2d(targets)
    if Z.shape != targets.shape:
        raise ValueError(f"output/target mismatch {Z.shape} vs {targets.shape}")
    _check_density(targets, u_grid)
    return float(-np.mean(np.sum(log_softmax(Z, u_grid) * targets * u_grid.weights, axis=1)))


def cross_entropy_floor(targets: np.ndarray, u_grid: SpatialGrid) -> float:
    """Smallest attainable cross-entropy, -(1/N) sum_j int P_j log P_j du."""
    targets = np.atleast_2d(targets)
    _check_density(targets, u_grid)
    return float(-np.mean(np.sum(xlogy(targets, targets) * u_grid.weights, axis=1)))


def evaluate_loss(Z: np.ndarray, targets: np.ndarray, h: Predictor, loss: str, u_grid: SpatialGrid) -> float:
    if loss == "mse":
        return loss_mse(predict(Z, h, u_grid), targets, u_grid)
    if loss == "cross_entropy":
        return loss_cross_entropy(Z, targets, u_grid)
    raise ValueError(f"unknown loss {loss!r}")


def output_sensitivity(Z: np.ndarray, targets: np.ndarray, h: Predictor, loss: str,
                       u_grid: SpatialGrid) -> np.ndarray:
    """L2(U) derivative of the per-datum cost with respect to Z, shape (N, |U|).

    For MSE with a pointwise predictor this is (P_pre - P) h'(Z). The softmax
    predictor couples all u, so its Jacobian is applied explicitly. Cross
    entropy differentiates log-softmax directly: P - softmax(Z) int P du.
    """
    Z = np.atleast_2d(np.asarray(Z, dtype=float))
    targets = np.atleast_2d(targets)
    if loss == "cross_entropy":
        q = predict(Z, Predictor("softmax"), u_grid)
        return targets - q * (targets @ u_grid.weights)[:, None]
    if loss != "mse":
        raise ValueError(f"unknown loss {loss!r}")
    p = predict(Z, h, u_grid)
    resid = p - targets
    if h.kind == "identity":
        return resid
    if h.kind == "logistic":
        return resid * p * (1.0 - p)
    # d q(u) / d Z(v) = -q(u) delta(u - v) + q(u) q(v)
    return p * (np.sum(resid * p * u_grid.weights, axis=1, keepdims=True) - resid)
