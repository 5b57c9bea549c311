"""Command-line driver.

Usage: ``deepide COMMAND [--config FILE] [--out DIR] [--seed N] [--threads N] [--no-plot]``.
Every run writes CSV/JSON results, optional PNG figures and a manifest to
the output directory. Exit status: 0 success, 1 runtime error, 2 usage error.
"""
from __future__ import annotations

import argparse
import copy
import json
import logging
import sys
from contextlib import nullcontext
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import io, plotting
from .activations import Activation
from .adjoint import LearningProblem, train_gradient_flow
from .controllability import gramian_stationary, gramian_trajectory, multistate_obstruction
from .datasets import regression_toy, toy_bundle_path
from .dynamics import ControlPath, check_apriori_bound, solve_forward_euler, solve_forward_picard
from .grid import GridFunction, Kernel, SpatialGrid
from .hjb import TerminalCost, estimate_value, hjb_hamiltonian
from .output import Classifier, Predictor, TrainingSet, cross_entropy_floor
from .pontryagin import BoxSet, boundary_contact_fraction, corner_fraction, solve_msa

log = logging.getLogger("deepide")

COMMANDS = ("forward", "train", "pontryagin", "controllability", "hjb-eval", "hjb-value", "check")

DEFAULT_CONFIG = {
    "data": {"source": "toy", "n_data": 1, "cells": 8, "u_cells": 4},
    "time": {"T": 1.0, "steps": 16},
    "activation": {"kind": "sigmoid", "eps": 1e-2},
    "predictor": "identity",
    "loss": "mse",
    "classifier": "zeros",
    "init": {"a_scale": 0.1, "b_scale": 0.1},
    "training": {"step": 10.0, "iters": 500, "tol": 0.0},
    "box": None,
    "pontryagin": {"sweeps": 200, "relax": 0.5},
    "controllability": {"eps": [1e-1, 1e-2, 1e-3, 1e-4], "gramian_steps": 64},
    "hjb": {"t": 0.0, "n_starts": 8, "iters": 200},
    "seed": 0,
}


class UsageError(Exception):
    """Invalid command line or configuration."""


def _merge(base: dict, over: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in over.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = v
    return out


@dataclass
class ExperimentConfig:
    """Validated configuration; ``raw`` is the merged JSON dictionary."""

    raw: dict

    @classmethod
    def load(cls, path: str | None, overrides: dict | None = None) -> "ExperimentConfig":
        cfg = copy.deepcopy(DEFAULT_CONFIG)
        if path is not None:
            p = Path(path)
            if not p.is_file():
                raise UsageError(f"config file {path} does not exist")
            try:
                user = json.loads(p.read_text(encoding="utf-8"))
            except json.JSONDecodeError as exc:
                raise UsageError(f"config file {path} is not valid JSON: {exc}") from exc
            unknown = set(user) - set(DEFAULT_CONFIG)
            if unknown:
                raise UsageError(f"unknown config keys: {sorted(unknown)}")
            cfg = _merge(cfg, user)
        cfg = _merge(cfg, overrides or {})
        out = cls(cfg)
        out.validate()
        return out

    def validate(self) -> None:
        c = self.raw
        if int(c["time"]["steps"]) < 1 or float(c["time"]["T"]) <= 0:
            raise UsageError("time.steps must be >= 1 and time.T > 0")
        try:
            Activation(c["activation"]["kind"], float(c["activation"].get("eps", 1e-2)))
            Predictor(c["predictor"])
        except ValueError as exc:
            raise UsageError(str(exc)) from exc
        if c["loss"] not in ("mse", "cross_entropy"):
            raise UsageError(f"unknown loss {c['loss']!r}")
        if c["classifier"] not in ("zeros", "delta", "random"):
            raise UsageError("classifier must be zeros, delta or random")
        src = c["data"].get("source")
        if src not in ("toy", "bundle", "toy2"):
            raise UsageError("data.source must be toy, toy2 or bundle")
        if src == "bundle":
            path = c["data"].get("path")
            if not path or not (Path(path) / "bundle.json").is_file():
                raise UsageError(f"data.path {path!r} is not a training-set bundle")
        if c["box"] is not None:
            try:
                self.box
            except (TypeError, ValueError) as exc:
                raise UsageError(f"invalid box: {exc}") from exc

    @property
    def seed(self) -> int:
        return int(self.raw["seed"])

    @property
    def sigma(self) -> Activation:
        a = self.raw["activation"]
        return Activation(a["kind"], float(a.get("eps", 1e-2)))

    @property
    def h(self) -> Predictor:
        return Predictor(self.raw["predictor"])

    @property
    def box(self) -> BoxSet | None:
        b = self.raw["box"]
        if b is None:
            return None
        return BoxSet.parse(b) if isinstance(b, str) else BoxSet(*map(float, b))

    def training_set(self) -> TrainingSet:
        d = self.raw["data"]
        if d["source"] == "toy":
            return regression_toy(int(d.get("n_data", 1)), int(d.get("cells", 8)), int(d.get("u_cells", 4)))
        path = toy_bundle_path() if d["source"] == "toy2" else Path(d["path"])
        return io.load_training_set(path)

    def initial_controls(self, grid: SpatialGrid, rng: np.random.Generator) -> ControlPath:
        t = self.raw["time"]
        i = self.raw["init"]
        return ControlPath.random(grid, float(t["T"]), int(t["steps"]), rng, float(i["a_scale"]),
                                  float(i["b_scale"]))

    def initial_classifier(self, data: TrainingSet, rng: np.random.Generator) -> Classifier:
        kind = self.raw["classifier"]
        if kind == "delta":
            if data.u_grid != data.y_grid:
                raise UsageError("the delta classifier needs U and Y to coincide")
            return Classifier.delta(data.y_grid)
        if kind == "random":
            return Classifier(data.u_grid, data.y_grid, rng.standard_normal((data.u_grid.size, data.y_grid.size)),
                              rng.standard_normal(data.u_grid.size))
        return Classifier.zeros(data.u_grid, data.y_grid)

    def problem(self, data: TrainingSet) -> LearningProblem:
        return LearningProblem(data, self.sigma, self.h, self.raw["loss"])


class Run:
    """Output directory bookkeeping for one command."""

    def __init__(self, out: Path, plot: bool):
        self.out = out
        self.plot = plot
        self.outputs: list[str] = []
        out.mkdir(parents=True, exist_ok=True)

    def table(self, name, header, rows):
        io.write_table(self.out / name, header, rows)
        self.outputs.append(name)

    def json(self, name, obj):
        io.write_json(self.out / name, obj)
        self.outputs.append(name)

    def figure(self, name, fn, *args, **kw):
        if self.plot:
            fn(self.out / name, *args, **kw)
            self.outputs.append(name)


def cmd_forward(cfg: ExperimentConfig, run: Run, args) -> dict:
    rng = np.random.default_rng(cfg.seed)
    data = cfg.training_set()
    ctrl = cfg.initial_controls(data.y_grid, rng)
    solver = solve_forward_picard if args.solver == "picard" else solve_forward_euler
    traj = solver(data.initial, ctrl, cfg.sigma)
    io.write_trajectory(run.out / "trajectory", traj)
    run.outputs.append("trajectory/")
    norms = traj.norms()
    run.table("norms.csv", ["node", "t"] + [f"datum_{j}" for j in range(traj.n_data)],
              ([s, float(traj.times[s])] + [float(v) for v in norms[s]] for s in range(traj.steps + 1)))
    rep = check_apriori_bound(traj, ctrl, cfg.sigma)
    run.json("apriori.json", rep.to_dict())
    run.figure("norms.png", plotting.state_norms, traj.times, norms)
    if data.y_grid.dim == 1:
        run.figure("terminal.png", plotting.terminal_states, data.y_grid.centers, traj.terminal)
    return {"solver": args.solver, "apriori_ok": rep.ok(), "max_terminal_norm": float(norms[-1].max())}


def cmd_train(cfg: ExperimentConfig, run: Run, args) -> dict:
    rng = np.random.default_rng(cfg.seed)
    data = cfg.training_set()
    ctrl = cfg.initial_controls(data.y_grid, rng)
    cls = cfg.initial_classifier(data, rng)
    tr = cfg.raw["training"]
    log_path = run.out / "results.jsonl"
    log_path.unlink(missing_ok=True)
    res = train_gradient_flow(cfg.problem(data), ctrl, cls, step=float(tr["step"]), iters=int(tr["iters"]),
                              tol=float(tr.get("tol", 0.0)), log_path=log_path)
    run.outputs.append("results.jsonl")
    steps = [float("nan")] + res.steps
    run.table("loss.csv", ["iteration", "loss", "step"],
              ([k, float(J), float(s)] for k, (J, s) in enumerate(zip(res.history, steps))))
    io.save_checkpoint(run.out / "checkpoint", res.ctrl, res.cls, res.iterations)
    run.outputs.append("checkpoint/")
    # cross entropy is compared through its excess over the attainable floor
    floor = cross_entropy_floor(data.targets, data.u_grid) if cfg.raw["loss"] == "cross_entropy" else 0.0
    first, last = res.history[0] - floor, res.history[-1] - floor
    summary = {"initial_loss": res.history[0], "final_loss": res.history[-1], "loss_floor": floor,
               "ratio": last / first if first > 0 else 0.0,
               "iterations": res.iterations, "residuals": res.residuals, "bv_norm": res.ctrl.bv_norm()}
    run.json("summary.json", summary)
    run.figure("loss.png", plotting.loss_history, res.history)
    return summary


def cmd_pontryagin(cfg: ExperimentConfig, run: Run, args) -> dict:
    box = BoxSet.parse(args.box) if args.box else cfg.box
    if box is None:
        raise UsageError("pontryagin needs --box a_min,a_max,b_min,b_max or a box in the config")
    p = cfg.raw["pontryagin"]
    sweeps = args.sweeps if args.sweeps is not None else int(p["sweeps"])
    relax = args.relax if args.relax is not None else float(p["relax"])
    if not 0 < relax <= 1:
        raise UsageError("--relax must lie in (0, 1]")
    rng = np.random.default_rng(cfg.seed)
    data = cfg.training_set()
    cls = cfg.initial_classifier(data, rng)
    init = cfg.initial_controls(data.y_grid, rng)
    rows = []
    state = solve_msa(cfg.problem(data), cls, box, init, sweeps=sweeps, relax=relax, seed=cfg.seed,
                      callback=rows.append)
    run.table("sweeps.csv", ["sweep", "loss", "hamiltonian_span", "boundary_contact", "change"],
              ([r["sweep"], float(r["loss"]), float(r["hamiltonian_span"]), float(r["boundary_contact"]),
                float(r["change"])] for r in rows))
    times = state.ctrl.times
    run.table("hamiltonian.csv", ["node", "t", "H"],
              ([s, float(times[s]), float(h)] for s, h in enumerate(state.hamiltonian)))
    summary = {"converged": state.converged, "sweeps": state.sweeps, "final_loss": state.loss_history[-1],
               "hamiltonian_span": state.hamiltonian_span(),
               "hamiltonian_mean": float(np.mean(state.hamiltonian)),
               "corner_fraction": corner_fraction(state, box),
               "boundary_contact": boundary_contact_fraction(state.ctrl, box), "box": box.to_dict()}
    run.json("summary.json", summary)
    run.figure("hamiltonian.png", plotting.hamiltonian, times[:-1], state.hamiltonian)
    run.figure("bias.png", plotting.control_heatmap, state.ctrl.a, times, "a(y, t)")
    return summary


def cmd_controllability(cfg: ExperimentConfig, run: Run, args) -> dict:
    rng = np.random.default_rng(cfg.seed)
    data = cfg.training_set()
    sig = cfg.sigma
    grid = data.y_grid
    t = cfg.raw["time"]
    cc = cfg.raw["controllability"]
    ctrl = cfg.initial_controls(grid, rng)
    traj = solve_forward_euler(data.initial[:1], ctrl, sig)
    gt = gramian_trajectory(ctrl, traj, sig)
    rows = [["trajectory", k, float(v)] for k, v in enumerate(gt.eigenvalues)]
    summary = {"trajectory_min_eigenvalue": gt.min_eigenvalue}
    if float(sig(0.0)) == 0.0 and float(sig.d1(0.0)) > 0:
        f_inf = GridFunction(grid, data.initial[0])
        b_inf = Kernel(grid, grid, ctrl.b[0])
        gs = gramian_stationary(f_inf, b_inf, sig, float(t["T"]), int(cc["gramian_steps"]))
        rows += [["stationary", k, float(v)] for k, v in enumerate(gs.eigenvalues)]
        summary.update({"stationary_min_eigenvalue": gs.min_eigenvalue, "coercivity_bound": gs.meta["bound"]})
        run.figure("spectrum.png", plotting.spectrum, gs.eigenvalues, gs.meta["bound"])
    run.table("spectrum.csv", ["gramian", "index", "eigenvalue"], rows)
    dirs = data.initial[1:] - data.initial[0] if data.n > 1 else rng.standard_normal((1, grid.size))
    rep = multistate_obstruction(ctrl, data.initial[0], dirs, cc["eps"], sig)
    run.json("obstruction.json", rep.to_dict())
    run.figure("obstruction.png", plotting.obstruction, rep.eps, rep.residuals.mean(axis=1))
    summary["obstruction_slope"] = rep.slope
    return summary


def cmd_hjb_eval(cfg: ExperimentConfig, run: Run, args) -> dict:
    box = BoxSet.parse(args.box) if args.box else cfg.box
    if box is None:
        raise UsageError("hjb-eval needs --box or a box in the config")
    if not args.state or not args.costate:
        raise UsageError("hjb-eval needs --state and --costate CSV files")
    grid = cfg.training_set().y_grid
    V = io.read_states(args.state, grid)
    R = io.read_states(args.costate, grid)
    H, res = hjb_hamiltonian(V, R, box, cfg.sigma, grid, np.random.default_rng(cfg.seed), return_argmin=True)
    out = {"H_HJB": H, "a": res.a.tolist(), "flagged_cells": int(np.sum(res.flag_a))}
    run.json("hjb_eval.json", out)
    return {"H_HJB": H}


def cmd_hjb_value(cfg: ExperimentConfig, run: Run, args) -> dict:
    box = BoxSet.parse(args.box) if args.box else cfg.box
    if box is None:
        raise UsageError("hjb-value needs --box or a box in the config")
    rng = np.random.default_rng(cfg.seed)
    data = cfg.training_set()
    cls = cfg.initial_classifier(data, rng)
    hc = cfg.raw["hjb"]
    T = float(cfg.raw["time"]["T"])
    steps = int(cfg.raw["time"]["steps"])
    t0 = float(hc["t"])
    cost = TerminalCost(cls, data.targets, cfg.h, cfg.raw["loss"])
    vs = estimate_value(data.initial, t0, T, steps, cost, cfg.sigma, box, data.y_grid,
                        n_starts=int(hc["n_starts"]), iters=int(hc["iters"]), seed=cfg.seed)
    out = {"t": t0, "T": T, "value": vs.value, "start_values": vs.start_values, "terminal_cost": cost(data.initial)}
    run.json("hjb_value.json", out)
    return {"value": vs.value}


def cmd_check(cfg: ExperimentConfig, run: Run, args) -> dict:
    from .checks import run_checks

    results = run_checks(cfg.seed)
    run.json("check.json", {"results": [r.to_dict() for r in results]})
    failed = [r.name for r in results if not r.passed]
    for r in results:
        print(f"{'PASS' if r.passed else 'FAIL'} {r.name}")
    if failed:
        raise RuntimeError(f"checks failed: {failed}")
    return {"passed": len(results)}


HANDLERS = {"forward": cmd_forward, "train": cmd_train, "pontryagin": cmd_pontryagin,
            "controllability": cmd_controllability, "hjb-eval": cmd_hjb_eval, "hjb-value": cmd_hjb_value,
            "check": cmd_check}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON experiment configuration")
    common.add_argument("--out", default="out", help="output directory (default: %(default)s)")
    common.add_argument("--seed", type=int, help="seed of the single random generator")
    common.add_argument("--threads", type=int, help="cap on BLAS/OpenMP worker threads")
    common.add_argument("--no-plot", action="store_true", help="skip PNG figures")
    common.add_argument("--log-level", default="WARNING")
    parser = argparse.ArgumentParser(prog="deepide", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", metavar="COMMAND")
    sub.required = True
    p = sub.add_parser("forward", parents=[common], help="propagate the training data")
    p.add_argument("--solver", choices=("euler", "picard"), default="euler")
    sub.add_parser("train", parents=[common], help="gradient-flow training with backtracking")
    for name, hlp in (("pontryagin", "box-constrained successive approximations"),
                      ("hjb-eval", "HJB Hamiltonian at given state and co-state"),
                      ("hjb-value", "estimate the value functional")):
        p = sub.add_parser(name, parents=[common], help=hlp)
        p.add_argument("--box", help="a_min,a_max,b_min,b_max")
        if name == "pontryagin":
            p.add_argument("--sweeps", type=int)
            p.add_argument("--relax", type=float)
        if name == "hjb-eval":
            p.add_argument("--state", help="CSV of states (one value column per datum)")
            p.add_argument("--costate", help="CSV of co-states (one value column per datum)")
    sub.add_parser("controllability", parents=[common], help="Gramian spectra and obstruction scaling")
    sub.add_parser("check", parents=[common], help="run the invariant self-checks")
    return parser


def _thread_limit(n):
    if n is None:
        return nullcontext()
    try:
        from threadpoolctl import threadpool_limits
    except ImportError:
        log.warning("threadpoolctl not installed; --threads ignored")
        return nullcontext()
    return threadpool_limits(limits=n)


def _join_box(argv: list) -> list:
    """Let ``--box -1,1,-2,2`` through: argparse would read the value as an option."""
    out = []
    it = iter(argv)
    for tok in it:
        if tok == "--box":
            nxt = next(it, None)
            out.append(tok if nxt is None else f"--box={nxt}")
        else:
            out.append(tok)
    return out


def main(argv=None) -> int:
    parser = build_parser()
    argv = list(sys.argv[1:] if argv is None else argv)
    try:
        args = parser.parse_args(_join_box(argv))
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=args.log_level.upper(), format="%(levelname)s %(name)s: %(message)s")
    out = Path(args.out)
    try:
        overrides = {"seed": args.seed} if args.seed is not None else {}
        cfg = ExperimentConfig.load(args.config, overrides)
        if args.threads is not None and args.threads < 1:
            raise UsageError("--threads must be positive")
        run = Run(out, plot=not args.no_plot)
        with _thread_limit(args.threads):
            summary = HANDLERS[args.command](cfg, run, args)
        io.write_manifest(out, args.command, cfg.raw, cfg.seed, run.outputs,
                          {"argv": argv, "summary": summary})
        print(json.dumps(summary, sort_keys=True, default=float))
        return 0
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        _error(out, "usage", exc)
        return 2
    except Exception as exc:  # noqa: BLE001 - every failure becomes an error report
        log.debug("command failed", exc_info=True)
        _error(out, type(exc).__name__, exc)
        return 1


def _error(out: Path, kind: str, exc: Exception) -> None:
    report = {"error": kind, "message": str(exc)}
    print(json.dumps(report), file=sys.stderr)
    try:
        io.write_json(out / "error.json", report)
    except OSError:
        pass


if __name__ == "__main__":
    sys.exit(main())
