import json

import numpy as np
import pytest

from deepide import io
from deepide.cli import main
from deepide.datasets import digits_training_set, toy_bundle_path, two_datum_toy
from deepide.dynamics import ControlPath, solve_forward_euler
from deepide.activations import Activation
from deepide.grid import GridMismatchError, Kernel, SpatialGrid
from deepide.output import Classifier, DuplicateDataError

FAST = {"time": {"T": 1.0, "steps": 4}, "training": {"iters": 5},
        "pontryagin": {"sweeps": 5}, "hjb": {"n_starts": 2, "iters": 5}}


def _config(tmp_path, extra=None):
    cfg = dict(FAST, **(extra or {}))
    p = tmp_path / "config.json"
    p.write_text(json.dumps(cfg))
    return str(p)


def test_grid_function_round_trip_is_exact(tmp_path):
    g = SpatialGrid.uniform((3, 2))
    f = g.function(np.random.default_rng(0).standard_normal(6) / 3.0)
    io.write_grid_function(tmp_path / "f.csv", f)
    back = io.read_grid_function(tmp_path / "f.csv", g)
    assert np.array_equal(back.values, f.values)
    with pytest.raises(GridMismatchError):
        io.read_grid_function(tmp_path / "f.csv", SpatialGrid.uniform(6))


def test_kernel_and_envelope_round_trip(tmp_path):
    g, u = SpatialGrid.uniform(3), SpatialGrid.uniform(2)
    k = Kernel(u, g, np.arange(6.0).reshape(2, 3) / 7)
    io.write_kernel(tmp_path / "k.csv", k)
    assert np.array_equal(io.read_kernel(tmp_path / "k.csv", u, g).values, k.values)
    env = json.loads(json.dumps(io.kernel_envelope(k)))
    assert np.array_equal(io.kernel_from_envelope(env).values, k.values)


def test_trajectory_and_checkpoint_round_trip(tmp_path):
    rng = np.random.default_rng(1)
    g, u = SpatialGrid.uniform(4), SpatialGrid.uniform(2)
    c = ControlPath.random(g, 1.0, 3, rng)
    tr = solve_forward_euler(rng.standard_normal((2, 4)), c, Activation("tanh"))
    io.write_trajectory(tmp_path / "traj", tr)
    back = io.read_trajectory(tmp_path / "traj")
    assert np.array_equal(back.states, tr.states) and back.T == tr.T
    cls = Classifier(u, g, rng.standard_normal((2, 4)), rng.standard_normal(2))
    io.save_checkpoint(tmp_path / "ck", c, cls, 7)
    c2, cls2, meta = io.load_checkpoint(tmp_path / "ck")
    assert meta["iteration"] == 7
    assert np.array_equal(c2.a, c.a) and np.array_equal(c2.b, c.b)
    assert np.array_equal(cls2.w, cls.w) and np.array_equal(cls2.mu, cls.mu)


def test_bundle_round_trip_and_duplicates(tmp_path):
    data = two_datum_toy()
    io.write_training_set(tmp_path / "b", data)
    back = io.load_training_set(tmp_path / "b")
    assert np.array_equal(back.initial, data.initial) and back.names == data.names
    # the shipped bundle is the same data
    shipped = io.load_training_set(toy_bundle_path())
    assert np.array_equal(shipped.initial, data.initial) and np.array_equal(shipped.targets, data.targets)
    (tmp_path / "b" / "initial_001.csv").write_text((tmp_path / "b" / "initial_000.csv").read_text())
    with pytest.raises(DuplicateDataError):
        io.load_training_set(tmp_path / "b")
    with pytest.raises(FileNotFoundError):
        io.load_training_set(tmp_path / "missing")


def test_columns_reject_nonfinite(tmp_path):
    g = SpatialGrid.uniform(2)
    io.write_columns(tmp_path / "c.csv", g, {"value": [1.0, np.nan]})
    with pytest.raises(ValueError):
        io.read_columns(tmp_path / "c.csv", g)


def test_digits_fixture():
    data = digits_training_set()
    assert data.n == 10 and data.y_grid.size == 64 and data.u_grid.size == 10
    assert np.allclose(data.initial.max(axis=1), 1.0) and np.all(data.initial >= 0)
    assert np.allclose(data.targets @ data.u_grid.weights, 1.0)


def test_cli_usage_errors(tmp_path, capsys):
    assert main(["nonsense"]) == 2
    assert main(["train", "--config", str(tmp_path / "nope.json"), "--out", str(tmp_path / "o")]) == 2
    assert json.loads((tmp_path / "o" / "error.json").read_text())["error"] == "usage"
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"loss": "hinge"}))
    assert main(["train", "--config", str(bad), "--out", str(tmp_path / "o2")]) == 2
    assert main(["pontryagin", "--out", str(tmp_path / "o3")]) == 2
    assert main(["forward", "--threads", "0", "--out", str(tmp_path / "o4")]) == 2


def test_cli_runtime_error_exit_code(tmp_path, capsys):
    b = tmp_path / "bundle"
    io.write_training_set(b, two_datum_toy())
    (b / "initial_001.csv").write_text((b / "initial_000.csv").read_text())
    cfg = _config(tmp_path, {"data": {"source": "bundle", "path": str(b)}})
    assert main(["train", "--config", cfg, "--out", str(tmp_path / "o")]) == 1
    assert json.loads((tmp_path / "o" / "error.json").read_text())["error"] == "DuplicateDataError"
    # a delta classifier on differing U and Y is a configuration problem
    cfg = _config(tmp_path, {"classifier": "delta"})
    assert main(["train", "--config", cfg, "--out", str(tmp_path / "o2")]) == 2


@pytest.mark.parametrize("command,extra", [
    (["forward"], []), (["forward"], ["--solver", "picard"]), (["train"], []),
    (["pontryagin"], ["--box", "-1,1,-1,1"]), (["controllability"], []), (["hjb-value"], ["--box", "-1,1,-1,1"]),
    (["check"], [])])
def test_cli_commands_write_manifest(tmp_path, capsys, command, extra):
    cfg = _config(tmp_path, {"activation": {"kind": "tanh"}} if command == ["controllability"] else None)
    out = tmp_path / "out"
    assert main(command + ["--config", cfg, "--out", str(out), "--no-plot"] + extra) == 0
    man = json.loads((out / "manifest.json").read_text())
    assert man["command"] == command[0] and man["seed"] == 0
    for name in man["outputs"]:
        assert (out / name.rstrip("/")).exists()


def test_cli_hjb_eval(tmp_path, capsys):
    g = SpatialGrid.uniform(8)
    io.write_columns(tmp_path / "v.csv", g, {"datum_0": np.linspace(-1, 1, 8)})
    io.write_columns(tmp_path / "r.csv", g, {"datum_0": np.cos(np.arange(8.0))})
    out = tmp_path / "out"
    assert main(["hjb-eval", "--box", "-1,1,-1,1", "--state", str(tmp_path / "v.csv"),
                 "--costate", str(tmp_path / "r.csv"), "--out", str(out)]) == 0
    assert np.isfinite(json.loads((out / "hjb_eval.json").read_text())["H_HJB"])


def test_cli_train_writes_figures(tmp_path, capsys):
    out = tmp_path / "out"
    assert main(["train", "--config", _config(tmp_path), "--out", str(out)]) == 0
    assert (out / "loss.png").stat().st_size > 0
    assert len((out / "results.jsonl").read_text().splitlines()) == 5
