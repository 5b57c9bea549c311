"""Activation functions with their first two derivatives."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import expit

KINDS = ("sigmoid", "tanh", "smoothed_relu", "identity")


@dataclass(frozen=True)
class Activation:
    """Nondecreasing Lipschitz activation.

    ``smoothed_relu`` is ``0.5 * (x + sqrt(x^2 + eps^2)) - 0.5 * eps``; it
    vanishes at 0 and tends to ``-eps/2`` at minus infinity.
    """

    kind: str = "sigmoid"
    eps: float = 1e-2

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown activation {self.kind!r}; choose from {KINDS}")
        if self.eps <= 0:
            raise ValueError("eps must be positive")

    @property
    def lipschitz(self) -> float:
        return 0.25 if self.kind == "sigmoid" else 1.0

    @property
    def is_linear(self) -> bool:
        return self.kind == "identity"

    def __call__(self, x):
        x = np.asarray(x, dtype=float)
        if self.kind == "sigmoid":
            return expit(x)
        if self.kind == "tanh":
            return np.tanh(x)
        if self.kind == "smoothed_relu":
            return 0.5 * (x + np.hypot(x, self.eps)) - 0.5 * self.eps
        return x.copy()

    def d1(self, x):
        x = np.asarray(x, dtype=float)
        if self.kind == "sigmoid":
            s = expit(x)
            return s * (1.0 - s)
        if self.kind == "tanh":
            return 1.0 - np.tanh(x) ** 2
        if self.kind == "smoothed_relu":
            return 0.5 * (1.0 + x / np.hypot(x, self.eps))
        return np.ones_like(x)

    def d2(self, x):
        x = np.asarray(x, dtype=float)
        if self.kind == "sigmoid":
            s = expit(x)
            return s * (1.0 - s) * (1.0 - 2.0 * s)
        if self.kind == "tanh":
            t = np.tanh(x)
            return -2.0 * t * (1.0 - t**2)
        if self.kind == "smoothed_relu":
            return 0.5 * self.eps**2 / np.hypot(x, self.eps) ** 3
        return np.zeros_like(x)

    def to_dict(self) -> dict:
        return {"kind": self.kind, "eps": self.eps}
