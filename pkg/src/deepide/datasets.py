"""Small built-in training sets and the glyph-image bundle generator."""
from __future__ import annotations

from importlib import resources
from pathlib import Path

import numpy as np

from .grid import SpatialGrid
from .output import TrainingSet

TOY_BUNDLE = "toy2"


def regression_toy(n_data: int = 1, cells: int = 8, u_cells: int = 4) -> TrainingSet:
    """Smooth initial states on Y = (0, 1) with smooth targets on U = (0, 1).

    Datum j starts from 0.5 + 0.5 sin(pi (j + 1) y) and should be mapped to
    cos(pi (j + 1) u) / (j + 1).
    """
    yg = SpatialGrid.uniform(cells)
    ug = SpatialGrid.uniform(u_cells)
    y, u = yg.centers[:, 0], ug.centers[:, 0]
    init = np.array([0.5 + 0.5 * np.sin(np.pi * (j + 1) * y) for j in range(n_data)])
    targ = np.array([np.cos(np.pi * (j + 1) * u) / (j + 1) for j in range(n_data)])
    return TrainingSet(yg, ug, init, targ, [f"toy_{j}" for j in range(n_data)])


def toy_bundle_path() -> Path:
    """Directory of the two-datum bundle shipped with the package."""
    return Path(str(resources.files("deepide") / "data" / TOY_BUNDLE))


def render_glyph(char: str, size: int = 28) -> np.ndarray:
    """Grayscale raster (values in [0, 1], ink = 1) of one character drawn by matplotlib."""
    import matplotlib

    matplotlib.use("Agg")
    from matplotlib.figure import Figure
    from matplotlib.backends.backend_agg import FigureCanvasAgg

    fig = Figure(figsize=(1, 1), dpi=size)
    canvas = FigureCanvasAgg(fig)
    fig.patch.set_facecolor("white")
    fig.text(0.5, 0.5, char, ha="center", va="center", fontsize=0.8 * size, color="black", family="DejaVu Sans")
    canvas.draw()
    rgba = np.asarray(canvas.buffer_rgba(), dtype=float)[..., :3]
    return 1.0 - rgba.mean(axis=2) / 255.0


def downsample(image: np.ndarray, size: int = 8) -> np.ndarray:
    """Area-average resampling with Pillow's box filter."""
    from PIL import Image

    im = Image.fromarray(np.asarray(image, dtype=np.float32), mode="F")
    return np.asarray(im.resize((size, size), Image.Resampling.BOX), dtype=float)


def digits_training_set(size: int = 8, raster: int = 28) -> TrainingSet:
    """Ten glyphs "0".."9" rendered at ``raster`` pixels and box-downsampled.

    Y = (0, 1)^2 with ``size`` x ``size`` cells, pixel row i and column j at
    cell (i, j), each image scaled to peak value 1. U = (0, 1) with ten
    cells; target j is the probability density of cell j (value 10 there,
    0 elsewhere), usable with both losses.
    """
    yg = SpatialGrid.uniform((size, size))
    ug = SpatialGrid.uniform(10)
    init = np.array([downsample(render_glyph(str(d), raster), size).ravel() for d in range(10)])
    init /= init.max(axis=1, keepdims=True)
    targ = np.eye(10) / ug.weights[0]
    return TrainingSet(yg, ug, init, targ, [f"digit_{d}" for d in range(10)])


def two_datum_toy() -> TrainingSet:
    """Source of the shipped two-datum bundle."""
    yg = SpatialGrid.uniform(8)
    ug = SpatialGrid.uniform(2)
    y = yg.centers[:, 0]
    init = np.array([np.exp(-8 * (y - 0.3) ** 2), np.exp(-8 * (y - 0.7) ** 2)])
    targ = np.array([[2.0, 0.0], [0.0, 2.0]])
    return TrainingSet(yg, ug, init, targ, ["left_bump", "right_bump"])
