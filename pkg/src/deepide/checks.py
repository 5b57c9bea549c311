"""Fast self-checks of the numerical invariants, run by the ``check`` command."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .activations import Activation
from .adjoint import LearningProblem, stationary_classifier
from .controllability import gramian_stationary, multistate_obstruction
from .dynamics import ControlPath, check_apriori_bound, solve_forward_euler
from .grid import GridFunction, Kernel, SpatialGrid, pseudo_inverse
from .hjb import hjb_hamiltonian, hjb_hamiltonian_single
from .output import (Classifier, Predictor, TrainingSet, cross_entropy_floor, loss_cross_entropy,
                     network_output, output_sensitivity, predict)
from .pontryagin import BoxSet, argmin_T, bang_bang_control


@dataclass
class CheckResult:
    name: str
    passed: bool
    detail: dict

    def to_dict(self) -> dict:
        return {"name": self.name, "passed": bool(self.passed), "detail": self.detail}


def check_penrose(rng) -> CheckResult:
    worst = 0.0
    for _ in range(10):
        M = rng.standard_normal((6, 4))
        X = pseudo_inverse(M)
        n = np.linalg.norm(M)
        worst = max(worst, np.linalg.norm(M @ X @ M - M) / n, np.linalg.norm(X @ M @ X - X) / n,
                    np.linalg.norm((M @ X).T - M @ X) / n, np.linalg.norm((X @ M).T - X @ M) / n)
    return CheckResult("penrose_identities", worst <= 1e-8, {"worst_residual": worst})


def check_gradient(rng) -> CheckResult:
    Y, U = SpatialGrid.uniform(8), SpatialGrid.uniform(3)
    data = TrainingSet(Y, U, rng.standard_normal((2, 8)), rng.standard_normal((2, 3)))
    pb = LearningProblem(data, Activation("sigmoid"), Predictor("identity"))
    ctrl = ControlPath.random(Y, 1.0, 8, rng)
    cls = Classifier(U, Y, rng.standard_normal((3, 8)), rng.standard_normal(3))
    _, grad, _, _ = pb.evaluate(ctrl, cls)
    worst = 0.0
    for _ in range(5):
        dc = ControlPath.random(Y, 1.0, 8, rng)
        dw = Classifier(U, Y, rng.standard_normal((3, 8)), rng.standard_normal(3))
        e = 1e-5

        def shifted(t):
            return (ControlPath(Y, 1.0, ctrl.a + t * dc.a, ctrl.b + t * dc.b),
                    Classifier(U, Y, cls.w + t * dw.w, cls.mu + t * dw.mu))
        fd = (pb.objective(*shifted(e)) - pb.objective(*shifted(-e))) / (2 * e)
        an = grad.pair(dc, dw)
        worst = max(worst, abs(fd - an) / max(abs(fd), 1e-12))
    return CheckResult("gradient_vs_finite_differences", worst <= 1e-4, {"worst_relative_error": worst})


def check_apriori(rng) -> CheckResult:
    Y = SpatialGrid.uniform(8)
    worst = np.inf
    for kind in ("sigmoid", "tanh", "smoothed_relu"):
        sig = Activation(kind)
        c1, c2 = ControlPath.random(Y, 1.0, 16, rng), ControlPath.random(Y, 1.0, 16, rng)
        F1, F2 = rng.standard_normal((2, 8)), rng.standard_normal((2, 8))
        t1, t2 = solve_forward_euler(F1, c1, sig), solve_forward_euler(F2, c2, sig)
        worst = min(worst, check_apriori_bound(t1, c1, sig, (t2, c2)).min_margin)
    return CheckResult("apriori_estimates", worst >= -1e-8, {"min_margin": float(worst)})


def check_softmax_and_floor(rng) -> CheckResult:
    U = SpatialGrid.uniform(5)
    P = rng.random((3, 5))
    P /= (P @ U.weights)[:, None]
    floor = cross_entropy_floor(P, U)
    gap = np.inf
    mass = 0.0
    for _ in range(100):
        Z = 3 * rng.standard_normal((3, 5))
        gap = min(gap, loss_cross_entropy(Z, P, U) - floor)
        mass = max(mass, float(np.max(np.abs(predict(Z, Predictor("softmax"), U) @ U.weights - 1))))
    exact = abs(loss_cross_entropy(-np.log(P), P, U) - floor)
    ok = gap >= -1e-10 and mass <= 1e-10 and exact <= 1e-10
    return CheckResult("softmax_mass_and_cross_entropy_floor", ok,
                       {"min_gap": float(gap), "mass_error": mass, "equality_error": exact})


def check_stationary_classifier(rng) -> CheckResult:
    Y, U = SpatialGrid.uniform(8), SpatialGrid.uniform(4)
    F = rng.standard_normal((3, 8))
    P = rng.standard_normal((3, 4))
    sc = stationary_classifier(F, P, Y, U)
    delta = output_sensitivity(network_output(F, sc.classifier), P, Predictor("identity"), "mse", U)
    dw = float(np.max(np.abs(delta.T @ F)))
    dmu = float(np.max(np.abs(delta.sum(axis=0))))
    return CheckResult("stationary_classifier", max(dw, dmu) <= 1e-8, {"d_w": dw, "d_mu": dmu})


def check_bang_bang(rng) -> CheckResult:
    Y = SpatialGrid.uniform(6)
    box = BoxSet(-1.0, 1.0, -2.0, 2.0)
    sig = Activation("sigmoid")
    mism = 0
    for _ in range(50):
        f, r = rng.standard_normal(6), rng.standard_normal(6)
        res = argmin_T(f[None], r[:, None], box, sig, Y.weights, rng=rng)
        a, b, _, _ = bang_bang_control(f, r, box)
        mism += int(not (np.array_equal(a, res.a) and np.array_equal(b, res.b)))
    return CheckResult("bang_bang_equivalence", mism == 0, {"mismatches": mism})


def check_gramian(rng) -> CheckResult:
    Y = SpatialGrid.uniform(6)
    sig = Activation("tanh")
    margin = np.inf
    for _ in range(3):
        f = GridFunction(Y, rng.standard_normal(6))
        b = Kernel(Y, Y, rng.uniform(-1, 1, (6, 6)))
        G = gramian_stationary(f, b, sig, 1.0, 32)
        margin = min(margin, G.min_eigenvalue - G.meta["bound"])
    return CheckResult("gramian_coercivity", margin >= 0, {"min_margin": float(margin)})


def check_obstruction(rng) -> CheckResult:
    Y = SpatialGrid.uniform(6)
    ctrl = ControlPath.random(Y, 1.0, 8, rng)
    rep = multistate_obstruction(ctrl, rng.standard_normal(6), rng.standard_normal((1, 6)),
                                 [1e-1, 1e-2, 1e-3, 1e-4], Activation("sigmoid"))
    return CheckResult("obstruction_slope", 0.8 <= rep.slope <= 1.2, {"slope": rep.slope})


def check_hjb(rng) -> CheckResult:
    Y = SpatialGrid.uniform(5)
    box = BoxSet(-1.0, 1.0, -1.0, 1.0)
    sig = Activation("sigmoid")
    err = 0.0
    conc = np.inf
    for _ in range(10):
        v, r1, r2 = rng.standard_normal((3, 5))
        err = max(err, abs(hjb_hamiltonian(v[None], r1[None], box, sig, Y, rng)
                           - hjb_hamiltonian_single(v, r1, box, sig, Y)))
        th = rng.uniform()
        lhs = hjb_hamiltonian(v[None], (th * r1 + (1 - th) * r2)[None], box, sig, Y, rng)
        rhs = th * hjb_hamiltonian(v[None], r1[None], box, sig, Y, rng) \
            + (1 - th) * hjb_hamiltonian(v[None], r2[None], box, sig, Y, rng)
        conc = min(conc, lhs - rhs)
    return CheckResult("hjb_hamiltonian", err <= 1e-8 and conc >= -1e-8,
                       {"closed_form_error": err, "min_concavity_margin": float(conc)})


ALL_CHECKS = (check_penrose, check_gradient, check_apriori, check_softmax_and_floor, check_stationary_classifier,
              check_bang_bang, check_gramian, check_obstruction, check_hjb)


def run_checks(seed: int = 0) -> list[CheckResult]:
    rng = np.random.default_rng(seed)
    return [chk(rng) for chk in ALL_CHECKS]
