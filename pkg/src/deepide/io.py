"""CSV/JSON persistence for grid fields, trajectories, checkpoints and training sets.

Floats are written with ``repr`` so that files round-trip exactly and equal
inputs give byte-identical files.
"""
from __future__ import annotations

import csv
import hashlib
import json
import platform
import sys
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from .dynamics import ControlPath, Trajectory
from .grid import GridFunction, GridMismatchError, Kernel, SpatialGrid
from .output import Classifier, TrainingSet


def fmt(x) -> str:
    return repr(float(x))


def write_table(path, header: list, rows) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(header)
        for row in rows:
            wr.writerow([fmt(v) if isinstance(v, (float, np.floating)) else v for v in row])
    return path


def read_table(path) -> tuple[list, list]:
    with open(path, newline="", encoding="utf-8") as fh:
        rd = csv.reader(fh)
        header = next(rd)
        rows = [r for r in rd if r]
    return header, rows


def write_json(path, obj) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return path


def _coord_header(grid: SpatialGrid) -> list:
    return ["index"] + [f"x{i}" for i in range(grid.dim)]


def write_columns(path, grid: SpatialGrid, columns: dict) -> Path:
    """Cell index, coordinates, then one column per entry of ``columns``."""
    header = _coord_header(grid) + list(columns)
    cols = [np.asarray(c, dtype=float).reshape(grid.size) for c in columns.values()]
    rows = ([k] + [fmt(c) for c in grid.centers[k]] + [fmt(c[k]) for c in cols] for k in range(grid.size))
    return write_table(path, header, rows)


def read_columns(path, grid: SpatialGrid | None = None, tol: float = 1e-9) -> dict:
    """Inverse of :func:`write_columns`; checks coordinates against ``grid`` when given."""
    header, rows = read_table(path)
    if not header or header[0] != "index":
        raise ValueError(f"{path}: first column must be 'index'")
    dim = sum(1 for h in header if h.startswith("x") and h[1:].isdigit())
    data = np.array([[float(v) for v in r] for r in rows]).reshape(len(rows), len(header))
    if not np.all(np.isfinite(data)):
        raise ValueError(f"{path}: non-finite entries")
    if grid is not None:
        if data.shape[0] != grid.size or dim != grid.dim:
            raise GridMismatchError(f"{path}: {data.shape[0]} cells in {dim}D, grid has {grid.size} in {grid.dim}D")
        if not np.array_equal(data[:, 0], np.arange(grid.size)):
            raise GridMismatchError(f"{path}: cell indices out of order")
        if np.max(np.abs(data[:, 1:1 + dim] - grid.centers)) > tol:
            raise GridMismatchError(f"{path}: coordinates do not match the grid")
    return {h: data[:, i] for i, h in enumerate(header) if i > dim}


def write_grid_function(path, f: GridFunction) -> Path:
    return write_columns(path, f.grid, {"value": f.values})


def read_grid_function(path, grid: SpatialGrid) -> GridFunction:
    cols = read_columns(path, grid)
    if "value" not in cols:
        raise ValueError(f"{path}: missing 'value' column")
    return GridFunction(grid, cols["value"])


def write_kernel(path, k: Kernel) -> Path:
    """Dense matrix: one row per row-grid cell, one column per column-grid cell."""
    header = ["row"] + [f"c{l}" for l in range(k.col_grid.size)]
    rows = ([i] + [fmt(v) for v in k.values[i]] for i in range(k.row_grid.size))
    return write_table(path, header, rows)


def read_kernel(path, row_grid: SpatialGrid, col_grid: SpatialGrid) -> Kernel:
    _, rows = read_table(path)
    vals = np.array([[float(v) for v in r[1:]] for r in rows])
    return Kernel(row_grid, col_grid, vals)


def grid_function_envelope(f: GridFunction) -> dict:
    return {"grid": f.grid.to_dict(), "values": [float(v) for v in f.values]}


def kernel_envelope(k: Kernel) -> dict:
    return {"row_grid": k.row_grid.to_dict(), "col_grid": k.col_grid.to_dict(),
            "values": k.values.tolist()}


def grid_function_from_envelope(d: dict) -> GridFunction:
    return GridFunction(SpatialGrid.from_dict(d["grid"]), d["values"])


def kernel_from_envelope(d: dict) -> Kernel:
    return Kernel(SpatialGrid.from_dict(d["row_grid"]), SpatialGrid.from_dict(d["col_grid"]), d["values"])


def write_trajectory(directory, traj: Trajectory, name: str = "state") -> Path:
    """One CSV per time node (columns datum_0..datum_{N-1}) plus manifest.json."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    for s in range(traj.steps + 1):
        write_columns(d / f"{name}_{s:04d}.csv", traj.grid,
                      {f"datum_{j}": traj.states[s, j] for j in range(traj.n_data)})
    write_json(d / "manifest.json", {"T": traj.T, "steps": traj.steps, "dt": traj.dt, "N": traj.n_data,
                                     "grid": traj.grid.to_dict(), "name": name})
    return d


def read_trajectory(directory) -> Trajectory:
    d = Path(directory)
    man = json.loads((d / "manifest.json").read_text(encoding="utf-8"))
    grid = SpatialGrid.from_dict(man["grid"])
    states = np.empty((man["steps"] + 1, man["N"], grid.size))
    for s in range(man["steps"] + 1):
        cols = read_columns(d / f"{man['name']}_{s:04d}.csv", grid)
        for j in range(man["N"]):
            states[s, j] = cols[f"datum_{j}"]
    return Trajectory(grid, man["T"], states)


def read_states(path, grid: SpatialGrid) -> np.ndarray:
    """All value columns of a cell CSV as an (N, M) array."""
    cols = read_columns(path, grid)
    return np.stack(list(cols.values()))


def save_checkpoint(directory, ctrl: ControlPath, cls: Classifier, iteration: int, extra: dict | None = None) -> Path:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    S, M = ctrl.steps, ctrl.grid.size
    write_table(d / "a.csv", ["node"] + [f"y{k}" for k in range(M)],
                ([s] + [fmt(v) for v in ctrl.a[s]] for s in range(S + 1)))
    write_table(d / "b.csv", ["node", "row"] + [f"z{l}" for l in range(M)],
                ([s, k] + [fmt(v) for v in ctrl.b[s, k]] for s in range(S + 1) for k in range(M)))
    write_kernel(d / "w.csv", cls.kernel)
    write_columns(d / "mu.csv", cls.u_grid, {"value": cls.mu})
    write_json(d / "checkpoint.json", {"iteration": iteration, "T": ctrl.T, "steps": S,
                                       "y_grid": ctrl.grid.to_dict(), "u_grid": cls.u_grid.to_dict(),
                                       **(extra or {})})
    return d


def load_checkpoint(directory):
    d = Path(directory)
    meta = json.loads((d / "checkpoint.json").read_text(encoding="utf-8"))
    yg, ug = SpatialGrid.from_dict(meta["y_grid"]), SpatialGrid.from_dict(meta["u_grid"])
    S, M = meta["steps"], yg.size
    _, rows = read_table(d / "a.csv")
    a = np.array([[float(v) for v in r[1:]] for r in rows])
    _, rows = read_table(d / "b.csv")
    b = np.array([[float(v) for v in r[2:]] for r in rows]).reshape(S + 1, M, M)
    ctrl = ControlPath(yg, meta["T"], a, b)
    w = read_kernel(d / "w.csv", ug, yg)
    mu = read_columns(d / "mu.csv", ug)["value"]
    return ctrl, Classifier(ug, yg, w.values, mu), meta


def write_training_set(directory, data: TrainingSet) -> Path:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    names = data.names or [f"datum_{j}" for j in range(data.n)]
    for j in range(data.n):
        write_columns(d / f"initial_{j:03d}.csv", data.y_grid, {"value": data.initial[j]})
        write_columns(d / f"target_{j:03d}.csv", data.u_grid, {"value": data.targets[j]})
    write_json(d / "bundle.json", {"y_grid": data.y_grid.to_dict(), "u_grid": data.u_grid.to_dict(),
                                   "N": data.n, "names": names})
    return d


def load_training_set(path, y_grid: SpatialGrid | None = None, u_grid: SpatialGrid | None = None) -> TrainingSet:
    """Read a bundle directory (bundle.json + initial_XXX.csv + target_XXX.csv).

    Raises on shape mismatch, non-finite entries or duplicated initial data.
    """
    d = Path(path)
    meta_path = d / "bundle.json"
    if not meta_path.is_file():
        raise FileNotFoundError(f"{meta_path} not found")
    meta = json.loads(meta_path.read_text(encoding="utf-8"))
    yg, ug = SpatialGrid.from_dict(meta["y_grid"]), SpatialGrid.from_dict(meta["u_grid"])
    if y_grid is not None and y_grid != yg:
        raise GridMismatchError(f"bundle Y grid {yg} differs from configured {y_grid}")
    if u_grid is not None and u_grid != ug:
        raise GridMismatchError(f"bundle U grid {ug} differs from configured {u_grid}")
    n = int(meta["N"])
    init = [read_grid_function(d / f"initial_{j:03d}.csv", yg).values for j in range(n)]
    targ = [read_grid_function(d / f"target_{j:03d}.csv", ug).values for j in range(n)]
    return TrainingSet(yg, ug, np.array(init), np.array(targ), list(meta.get("names", [])))


def config_hash(config: dict) -> str:
    return hashlib.sha256(json.dumps(config, sort_keys=True).encode("utf-8")).hexdigest()


def versions() -> dict:
    import matplotlib
    import scipy

    from . import __version__
    return {"python": sys.version.split()[0], "platform": platform.platform(), "numpy": np.__version__,
            "scipy": scipy.__version__, "matplotlib": matplotlib.__version__, "deepide": __version__}


def write_manifest(directory, command: str, config: dict, seed: int, outputs: list, extra: dict | None = None) -> Path:
    return write_json(Path(directory) / "manifest.json", {
        "command": command, "config": config, "config_hash": config_hash(config), "seed": seed,
        "versions": versions(), "outputs": sorted(outputs),
        "timestamp": datetime.now(timezone.utc).isoformat(timespec="seconds"), **(extra or {})})
