"""Procedural stand-in for a tile dataset, small enough to train on a laptop CPU.

Three colourful texture classes (closed-set candidates) and one class of
low-saturation grey noise (open-set candidate). Each closed class has a fixed
palette, so the untransformed look of a class is learnable, and a distinct
texture, so classification survives hue and saturation shifts.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np
from PIL import Image

CLOSED_CLASSES = ("blobs", "checker", "stripes")
OPEN_CLASSES = ("graynoise",)

# One saturated colour per class; the rest of each tile is grey noise drawn
# like the open class, so grey regions never carry evidence about a transform.
_COLORS = {
    "stripes": (0.55, 0.05, 0.35),
    "blobs": (1.00, 0.80, 0.30),
    "checker": (0.05, 0.25, 0.65),
}


def _grid(side):
    yy, xx = np.mgrid[0:side, 0:side].astype(np.float64)
    return yy / side, xx / side


def _gray(rng, side):
    level = rng.uniform(0.35, 0.65)
    amp = rng.uniform(0.05, 0.18)
    g = level + amp * rng.standard_normal((side, side))
    return np.repeat(g[..., None], 3, axis=2)


FAINT_PROB = 0.2


def _mix(rng, weight, name):
    w = weight[..., None]
    color = np.asarray(_COLORS[name]) * rng.uniform(0.98, 1.02)
    if rng.uniform() < FAINT_PROB:
        # faintly stained tile: colour pulled towards its own luma, pattern kept
        k = rng.uniform(0.0, 0.15)
        y = (0.299 * color[0] + 0.587 * color[1] + 0.114 * color[2])
        color = y + k * (color - y)
    return (1 - w) * _gray(rng, weight.shape[0]) + w * color


def _stripes(rng, side):
    yy, xx = _grid(side)
    theta = rng.uniform(0, np.pi)
    freq = rng.uniform(3.0, 5.0)
    phase = rng.uniform(0, 2 * np.pi)
    u = np.cos(theta) * xx + np.sin(theta) * yy
    w = np.clip(1.5 * np.sin(2 * np.pi * freq * u + phase) + 0.5, 0, 1)
    return _mix(rng, w, "stripes")


def _blobs(rng, side):
    yy, xx = _grid(side)
    w = np.zeros((side, side))
    for _ in range(rng.integers(5, 9)):
        cy, cx = rng.uniform(0, 1, 2)
        r = rng.uniform(0.12, 0.20)
        w = np.maximum(w, np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * r * r)))
    return _mix(rng, np.clip(2.0 * w - 0.3, 0, 1), "blobs")


def _checker(rng, side):
    yy, xx = _grid(side)
    cells = rng.integers(3, 6)
    oy, ox = rng.uniform(0, 1, 2)
    w = ((np.floor(yy * cells + oy) + np.floor(xx * cells + ox)) % 2).astype(np.float64)
    return _mix(rng, w, "checker")


def _graynoise(rng, side):
    return _gray(rng, side)


_MAKERS = {"stripes": _stripes, "blobs": _blobs, "checker": _checker, "graynoise": _graynoise}


def render_tile(name: str, rng: np.random.Generator, side: int) -> np.ndarray:
    x = _MAKERS[name](rng, side)
    return np.clip(np.floor(x * 255 + 0.5), 0, 255).astype(np.uint8)


def make_synthetic(dest: str | Path, n_per_class: int = 100, tile_side: int = 32, seed: int = 0) -> Path:
    """Write ``<dest>/<class>/<class>_<i>.png`` for the four synthetic classes."""
    if n_per_class < 20:
        raise ValueError("n_per_class must be >= 20")
    dest = Path(dest)
    for ci, name in enumerate(CLOSED_CLASSES + OPEN_CLASSES):
        folder = dest / name
        folder.mkdir(parents=True, exist_ok=True)
        for i in range(n_per_class):
            rng = np.random.default_rng([seed, ci, i])
            Image.fromarray(render_tile(name, rng, tile_side)).save(folder / f"{name}_{i:04d}.png")
    return dest


def synthetic_split_dict(seed: int = 0) -> dict:
    return {
        "dataset": "synthetic",
        "name": "S1",
        "closed_classes": list(CLOSED_CLASSES),
        "open_classes": list(OPEN_CLASSES),
        "fractions": [0.70, 0.15, 0.15],
        "seed": seed,
    }
