"""Tile datasets on disk, closed/open splits and batch iteration."""

from __future__ import annotations

import csv
import json
import logging
import math
from fractions import Fraction
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterator, Sequence

import numpy as np
from PIL import Image

from . import xforms
from .xforms import Family, TransformSpace

log = logging.getLogger(__name__)

IMAGE_SUFFIXES = {".png", ".tif", ".tiff", ".jpg", ".jpeg", ".bmp"}
OPEN_INDEX = -1


class DatasetError(ValueError):
    """Bad dataset layout, split config, or manifest."""


def read_tile(path: str | Path) -> np.ndarray:
    with Image.open(path) as im:
        im.load()
        return np.asarray(im.convert("RGB"), dtype=np.uint8).copy()


@dataclass(frozen=True)
class DatasetIndex:
    root: Path
    class_names: tuple[str, ...]
    files: dict[str, tuple[Path, ...]]
    side: int | None = None
    warnings: tuple[str, ...] = ()

    def __len__(self):
        return sum(len(v) for v in self.files.values())


def scan_dataset(root: str | Path, expected_geometry: int | tuple[int, int] | None = None) -> DatasetIndex:
    """Index ``<root>/<class>/<tile>`` folders; classes sorted by folder name.

    Files that fail to decode or have the wrong geometry are skipped and
    reported in ``index.warnings``.
    """
    root = Path(root)
    if not root.is_dir():
        raise DatasetError(f"dataset root {root} does not exist")
    if isinstance(expected_geometry, int):
        expected_geometry = (expected_geometry, expected_geometry)
    classes = sorted(p.name for p in root.iterdir() if p.is_dir())
    if len(classes) < 2:
        raise DatasetError(f"{root}: need at least 2 classes, found {len(classes)}")
    files: dict[str, tuple[Path, ...]] = {}
    warnings = []
    for name in classes:
        ok = []
        for p in sorted((root / name).iterdir()):
            if p.suffix.lower() not in IMAGE_SUFFIXES:
                continue
            try:
                with Image.open(p) as im:
                    im.load()
                    size = im.size[::-1]
            except Exception as exc:  # PIL raises a zoo of types on corrupt files
                warnings.append(f"{p}: cannot decode ({exc})")
                continue
            if expected_geometry is not None and tuple(size) != tuple(expected_geometry):
                warnings.append(f"{p}: geometry {size} != expected {tuple(expected_geometry)}")
                continue
            ok.append(p)
        if not ok:
            raise DatasetError(f"{root / name}: class folder holds no usable tiles")
        files[name] = tuple(ok)
    for w in warnings:
        log.warning(w)
    side = expected_geometry[0] if expected_geometry else None
    return DatasetIndex(root, tuple(classes), files, side, tuple(warnings))


@dataclass(frozen=True)
class SplitConfig:
    dataset: str
    closed_classes: tuple[str, ...]
    open_classes: tuple[str, ...] = ()
    fractions: tuple[float, float, float] = (0.70, 0.15, 0.15)
    seed: int = 0
    open_cap: int | None = None
    name: str = ""
    aliases: tuple[str, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "closed_classes", tuple(self.closed_classes))
        object.__setattr__(self, "open_classes", tuple(self.open_classes))
        object.__setattr__(self, "fractions", tuple(float(f) for f in self.fractions))
        object.__setattr__(self, "aliases", tuple(self.aliases))
        if len(set(self.closed_classes)) < 2:
            raise DatasetError("need at least 2 closed classes")
        overlap = set(self.closed_classes) & set(self.open_classes)
        if overlap:
            raise DatasetError(f"classes both closed and open: {sorted(overlap)}")
        if len(self.fractions) != 3 or abs(sum(self.fractions) - 1.0) > 1e-9:
            raise DatasetError(f"fractions must be 3 values summing to 1, got {self.fractions}")
        if min(self.fractions) < 0:
            raise DatasetError("fractions must be nonnegative")

    @classmethod
    def from_dict(cls, d: dict) -> "SplitConfig":
        known = {"dataset", "closed_classes", "open_classes", "fractions", "seed", "open_cap", "name", "aliases"}
        return cls(**{k: v for k, v in d.items() if k in known})

    @classmethod
    def load(cls, path: str | Path) -> "SplitConfig":
        with open(path) as fh:
            return cls.from_dict(json.load(fh))

    def to_dict(self) -> dict:
        return {
            "dataset": self.dataset,
            "name": self.name,
            "aliases": list(self.aliases),
            "closed_classes": list(self.closed_classes),
            "open_classes": list(self.open_classes),
            "fractions": list(self.fractions),
            "seed": self.seed,
            "open_cap": self.open_cap,
        }


@dataclass(frozen=True)
class SplitAssignment:
    closed_classes: tuple[str, ...]
    train: tuple[tuple[Path, int], ...]
    val: tuple[tuple[Path, int], ...]
    test_closed: tuple[tuple[Path, int], ...]
    test_open: tuple[tuple[Path, str], ...]

    PARTS = ("train", "val", "test_closed", "test_open")

    @property
    def n_classes(self) -> int:
        return len(self.closed_classes)

    def part(self, name: str):
        if name not in self.PARTS:
            raise KeyError(name)
        return getattr(self, name)


def partition_counts(n: int, fractions: Sequence[float]) -> tuple[int, int, int]:
    """Split ``n`` by cumulative half-up rounding; each part within 1 of its share.

    Fractions are read as exact decimals so that e.g. 45 * 0.7 rounds up to 32.
    """
    f0, f1 = (Fraction(str(f)) for f in fractions[:2])
    c1 = math.floor(n * f0 + Fraction(1, 2))
    c2 = math.floor(n * (f0 + f1) + Fraction(1, 2))
    c2 = min(max(c2, c1), n)
    return c1, c2 - c1, n - c2


def build_split(index: DatasetIndex, cfg: SplitConfig) -> SplitAssignment:
    missing = [c for c in cfg.closed_classes + cfg.open_classes if c not in index.files]
    if missing:
        raise DatasetError(f"classes not in dataset {index.root}: {', '.join(missing)}")
    # class indices follow dataset (lexicographic) order, not config order
    closed = tuple(c for c in index.class_names if c in cfg.closed_classes)
    rng = np.random.default_rng(cfg.seed)
    train, val, test = [], [], []
    for ci, name in enumerate(closed):
        files = list(index.files[name])
        order = rng.permutation(len(files))
        n_tr, n_va, _ = partition_counts(len(files), cfg.fractions)
        shuffled = [(files[i], ci) for i in order]
        train += shuffled[:n_tr]
        val += shuffled[n_tr : n_tr + n_va]
        test += shuffled[n_tr + n_va :]
    opened = []
    for name in (c for c in index.class_names if c in cfg.open_classes):
        opened += [(p, name) for p in index.files[name]]
    if cfg.open_cap is not None and len(opened) > cfg.open_cap:
        keep = np.sort(rng.choice(len(opened), size=cfg.open_cap, replace=False))
        opened = [opened[i] for i in keep]
    return SplitAssignment(closed, tuple(train), tuple(val), tuple(test), tuple(opened))


# ---------------------------------------------------------------------------
# manifest


def write_manifest(assignment: SplitAssignment, path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["path", "part", "class", "class_index"])
        # closed classes listed explicitly so empty parts keep the class order
        for ci, name in enumerate(assignment.closed_classes):
            w.writerow(["", "classes", name, ci])
        for part in ("train", "val", "test_closed"):
            for p, ci in assignment.part(part):
                w.writerow([str(p), part, assignment.closed_classes[ci], ci])
        for p, name in assignment.test_open:
            w.writerow([str(p), "test_open", name, OPEN_INDEX])


def read_manifest(path: str | Path) -> SplitAssignment:
    parts: dict[str, list] = {k: [] for k in SplitAssignment.PARTS}
    classes: list[tuple[int, str]] = []
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            part, ci = row["part"], int(row["class_index"])
            if part == "classes":
                classes.append((ci, row["class"]))
            elif part == "test_open":
                parts[part].append((Path(row["path"]), row["class"]))
            elif part in parts:
                parts[part].append((Path(row["path"]), ci))
            else:
                raise DatasetError(f"{path}: unknown part {part!r}")
    names = tuple(n for _, n in sorted(classes))
    return SplitAssignment(names, *(tuple(parts[k]) for k in SplitAssignment.PARTS))


# ---------------------------------------------------------------------------
# iteration


class TileLoader:
    """Decode tiles on demand, optionally memoising them."""

    def __init__(self, cache: bool = True):
        self.cache = cache
        self._tiles: dict[Path, np.ndarray] = {}
        self.failures: list[str] = []

    def __call__(self, path: Path) -> np.ndarray | None:
        tile = self._tiles.get(path)
        if tile is not None:
            return tile
        try:
            tile = read_tile(path)
        except Exception as exc:
            msg = f"{path}: cannot decode ({exc})"
            log.warning(msg)
            self.failures.append(msg)
            return None
        if self.cache:
            self._tiles[path] = tile
        return tile


@dataclass
class Batch:
    tiles: np.ndarray  # (B, H, W, 3) uint8
    class_labels: np.ndarray
    transform_labels: np.ndarray | None = None
    paths: list = field(default_factory=list)

    def __len__(self):
        return len(self.class_labels)


def augment(tile: np.ndarray, rng: np.random.Generator, space: TransformSpace) -> tuple[np.ndarray, int]:
    """One geometric then one appearance transform; returns the appearance label."""
    g = xforms.sample_transform(rng, Family.GEOMETRIC, space)
    a = xforms.sample_transform(rng, Family.APPEARANCE, space)
    out = xforms.apply_appearance(xforms.apply_geometric(tile, g), a)
    return out, xforms.transform_label(a)


def train_iterator(
    assignment: SplitAssignment,
    xform_space: TransformSpace | None,
    batch_size: int,
    seed: int,
    epoch: int = 0,
    loader: Callable[[Path], np.ndarray | None] | None = None,
) -> Iterator[Batch]:
    """Yield augmented training batches for one epoch.

    The shuffle and every per-sample transform draw are seeded from
    ``(seed, epoch, position)``, so batch content does not depend on how or
    where it is computed. The last partial batch is kept.
    """
    if not assignment.train:
        raise DatasetError("training part is empty")
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    space = xform_space or TransformSpace()
    loader = loader or TileLoader()
    order = np.random.default_rng([seed, epoch]).permutation(len(assignment.train))
    for start in range(0, len(order), batch_size):
        tiles, ys, ts, paths = [], [], [], []
        for pos in range(start, min(start + batch_size, len(order))):
            path, ci = assignment.train[order[pos]]
            tile = loader(path)
            if tile is None:
                continue
            rng = np.random.default_rng([seed, epoch, pos])
            out, t = augment(tile, rng, space)
            tiles.append(out)
            ys.append(ci)
            ts.append(t)
            paths.append(path)
        if tiles:
            yield Batch(np.stack(tiles), np.asarray(ys, dtype=np.int64), np.asarray(ts, dtype=np.int64), paths)


def eval_iterator(
    assignment: SplitAssignment,
    part: str,
    batch_size: int,
    loader: Callable[[Path], np.ndarray | None] | None = None,
) -> Iterator[Batch]:
    """Untransformed tiles in manifest order. Open-set tiles get label -1."""
    if part not in ("val", "test_closed", "test_open"):
        raise ValueError(f"cannot evaluate on part {part!r}")
    items = assignment.part(part)
    loader = loader or TileLoader()
    for start in range(0, len(items), batch_size):
        tiles, ys, paths = [], [], []
        for path, label in items[start : start + batch_size]:
            tile = loader(path)
            if tile is None:
                continue
            tiles.append(tile)
            ys.append(label if part != "test_open" else OPEN_INDEX)
            paths.append(path)
        if tiles:
            yield Batch(np.stack(tiles), np.asarray(ys, dtype=np.int64), None, paths)
