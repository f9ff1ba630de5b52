"""Single-transform augmentation space with decoupled geometry and appearance.

Tiles are ``uint8`` arrays of shape ``(H, W, 3)``. Every appearance op works on
channels scaled to [0, 1] in float64, then rounds half-up back to 8 bit and
clamps, so outputs are bit-reproducible.
"""

from __future__ import annotations

import enum
import hashlib
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy import ndimage

MIN_SIDE = 8


class Family(str, enum.Enum):
    GEOMETRIC = "geometric"
    APPEARANCE = "appearance"


class Kind(str, enum.Enum):
    IDENTITY = "Identity"
    BRIGHTNESS = "Brightness"
    CONTRAST = "Contrast"
    SATURATION = "Saturation"
    HUE = "Hue"
    GAMMA = "Gamma"
    SHARPNESS = "Sharpness"
    IDENTITY_GEOM = "IdentityGeom"
    ROTATE = "Rotate"
    SHEAR_X = "ShearX"
    SHEAR_Y = "ShearY"
    TRANSLATE_X = "TranslateX"
    TRANSLATE_Y = "TranslateY"

    @property
    def family(self) -> Family:
        return Family.APPEARANCE if self in APPEARANCE_KINDS else Family.GEOMETRIC


# Order defines the transform labels 0..6 and must never change.
APPEARANCE_KINDS: tuple[Kind, ...] = (
    Kind.IDENTITY,
    Kind.BRIGHTNESS,
    Kind.CONTRAST,
    Kind.SATURATION,
    Kind.HUE,
    Kind.GAMMA,
    Kind.SHARPNESS,
)
GEOMETRIC_KINDS: tuple[Kind, ...] = (
    Kind.IDENTITY_GEOM,
    Kind.ROTATE,
    Kind.SHEAR_X,
    Kind.SHEAR_Y,
    Kind.TRANSLATE_X,
    Kind.TRANSLATE_Y,
)
N_TRANSFORMS = len(APPEARANCE_KINDS)


@dataclass(frozen=True)
class StrengthRange:
    lo: float
    hi: float
    identity: float
    margin: float
    log: bool = False

    def contains(self, value: float) -> bool:
        return self.lo <= value <= self.hi


# Translate strengths are fractions of the side length; rotation in degrees.
DEFAULT_RANGES: dict[Kind, StrengthRange] = {
    Kind.IDENTITY: StrengthRange(0.0, 0.0, 0.0, 0.0),
    Kind.BRIGHTNESS: StrengthRange(0.5, 1.5, 1.0, 0.05),
    Kind.CONTRAST: StrengthRange(0.5, 1.5, 1.0, 0.05),
    Kind.SATURATION: StrengthRange(0.3, 1.7, 1.0, 0.05),
    Kind.HUE: StrengthRange(-0.25, 0.25, 0.0, 0.02),
    Kind.GAMMA: StrengthRange(0.5, 2.0, 1.0, 0.05, log=True),
    Kind.SHARPNESS: StrengthRange(0.0, 2.0, 1.0, 0.05),
    Kind.IDENTITY_GEOM: StrengthRange(0.0, 0.0, 0.0, 0.0),
    Kind.ROTATE: StrengthRange(-30.0, 30.0, 0.0, 0.0),
    Kind.SHEAR_X: StrengthRange(-0.2, 0.2, 0.0, 0.0),
    Kind.SHEAR_Y: StrengthRange(-0.2, 0.2, 0.0, 0.0),
    Kind.TRANSLATE_X: StrengthRange(-0.15, 0.15, 0.0, 0.0),
    Kind.TRANSLATE_Y: StrengthRange(-0.15, 0.15, 0.0, 0.0),
}


@dataclass(frozen=True)
class TransformSpec:
    family: Family
    kind: Kind
    strength: float = 0.0
    # off for probing the kernels outside the sampling range (e.g. Brightness 0)
    check_range: bool = field(default=True, compare=False, repr=False)

    def __post_init__(self):
        object.__setattr__(self, "family", Family(self.family))
        object.__setattr__(self, "kind", Kind(self.kind))
        if self.kind.family is not self.family:
            raise ValueError(f"{self.kind.value} is not a {self.family.value} transform")
        if self.check_range and not DEFAULT_RANGES[self.kind].contains(self.strength):
            r = DEFAULT_RANGES[self.kind]
            raise ValueError(
                f"strength {self.strength} outside [{r.lo}, {r.hi}] for {self.kind.value}"
            )

    @classmethod
    def of(cls, kind: Kind | str, strength: float = 0.0, check_range: bool = True) -> "TransformSpec":
        kind = Kind(kind)
        return cls(kind.family, kind, float(strength), check_range)


@dataclass(frozen=True)
class TransformSpace:
    """Kinds eligible for sampling plus their strength ranges.

    Restricting ``appearance_kinds`` (e.g. to Identity only) changes which
    kinds get drawn, never the label a kind maps to.
    """

    appearance_kinds: tuple[Kind, ...] = APPEARANCE_KINDS
    geometric_kinds: tuple[Kind, ...] = GEOMETRIC_KINDS
    ranges: dict = None

    def __post_init__(self):
        if self.ranges is None:
            object.__setattr__(self, "ranges", dict(DEFAULT_RANGES))
        object.__setattr__(self, "appearance_kinds", tuple(Kind(k) for k in self.appearance_kinds))
        object.__setattr__(self, "geometric_kinds", tuple(Kind(k) for k in self.geometric_kinds))
        for k in self.appearance_kinds + self.geometric_kinds:
            if k not in self.ranges:
                raise ValueError(f"no strength range for {k.value}")
        if any(k.family is not Family.APPEARANCE for k in self.appearance_kinds):
            raise ValueError("appearance_kinds holds a geometric kind")
        if any(k.family is not Family.GEOMETRIC for k in self.geometric_kinds):
            raise ValueError("geometric_kinds holds an appearance kind")

    def kinds(self, family: Family) -> tuple[Kind, ...]:
        return self.appearance_kinds if Family(family) is Family.APPEARANCE else self.geometric_kinds


def check_tile(tile: np.ndarray) -> np.ndarray:
    tile = np.asarray(tile)
    if tile.dtype != np.uint8:
        raise TypeError(f"tile must be uint8, got {tile.dtype}")
    if tile.ndim != 3 or tile.shape[2] != 3:
        raise ValueError(f"tile must have shape (H, W, 3), got {tile.shape}")
    if tile.shape[0] < MIN_SIDE or tile.shape[1] < MIN_SIDE:
        raise ValueError(f"tile sides must be >= {MIN_SIDE}, got {tile.shape[:2]}")
    return tile


def _draw_strength(rng: np.random.Generator, r: StrengthRange) -> float:
    if r.lo == r.hi:
        return float(r.lo)
    to = math.log if r.log else float
    lo, hi = to(r.lo), to(r.hi)
    if r.margin > 0:
        a, b = to(r.identity - r.margin), to(r.identity + r.margin)
        # uniform over [lo, a] U [b, hi]
        u = rng.uniform(0.0, (a - lo) + (hi - b))
        v = lo + u if u < a - lo else b + (u - (a - lo))
    else:
        v = rng.uniform(lo, hi)
    return float(math.exp(v)) if r.log else float(v)


def sample_transform(
    rng: np.random.Generator, family: Family | str, space: TransformSpace | None = None
) -> TransformSpec:
    """Draw one transform of the given family: kind uniform, then its strength.

    Gamma strengths are log-uniform. Strengths within the kind's
    identity-exclusion margin are never drawn.
    """
    space = space or TransformSpace()
    family = Family(family)
    kinds = space.kinds(family)
    kind = kinds[int(rng.integers(len(kinds)))]
    return TransformSpec(family, kind, _draw_strength(rng, space.ranges[kind]))


def transform_label(spec: TransformSpec) -> int:
    if spec.family is not Family.APPEARANCE:
        raise ValueError("only appearance transforms carry a label")
    return APPEARANCE_KINDS.index(spec.kind)


def kind_from_label(label: int) -> Kind:
    if not 0 <= label < N_TRANSFORMS:
        raise ValueError(f"transform label {label} outside [0, {N_TRANSFORMS - 1}]")
    return APPEARANCE_KINDS[label]


# ---------------------------------------------------------------------------
# appearance


def _to_unit(tile: np.ndarray) -> np.ndarray:
    return tile.astype(np.float64) / 255.0


def _to_uint8(x: np.ndarray) -> np.ndarray:
    return np.clip(np.floor(x * 255.0 + 0.5), 0, 255).astype(np.uint8)


def luma(x: np.ndarray) -> np.ndarray:
    return (299.0 * x[..., 0] + 587.0 * x[..., 1] + 114.0 * x[..., 2]) / 1000.0


def rgb_to_hsv(x: np.ndarray) -> np.ndarray:
    r, g, b = x[..., 0], x[..., 1], x[..., 2]
    v = x.max(axis=-1)
    c = v - x.min(axis=-1)
    safe_c = np.where(c > 0, c, 1.0)
    s = np.where(v > 0, c / np.where(v > 0, v, 1.0), 0.0)
    h = np.where(
        v == r,
        (g - b) / safe_c,
        np.where(v == g, 2.0 + (b - r) / safe_c, 4.0 + (r - g) / safe_c),
    )
    h = np.where(c > 0, (h / 6.0) % 1.0, 0.0)
    return np.stack([h, s, v], axis=-1)


def hsv_to_rgb(x: np.ndarray) -> np.ndarray:
    h, s, v = x[..., 0], x[..., 1], x[..., 2]
    h6 = (h % 1.0) * 6.0
    i = np.floor(h6)
    f = h6 - i
    p = v * (1.0 - s)
    q = v * (1.0 - s * f)
    t = v * (1.0 - s * (1.0 - f))
    i = i.astype(np.int64) % 6
    r = np.choose(i, [v, q, p, p, t, v])
    g = np.choose(i, [t, v, v, q, p, p])
    b = np.choose(i, [p, p, t, v, v, q])
    return np.stack([r, g, b], axis=-1)


def _smooth(x: np.ndarray) -> np.ndarray:
    out = x.copy()
    k = np.ones((3, 3), dtype=np.float64)
    k[1, 1] = 5.0
    k /= 13.0
    for c in range(3):
        full = ndimage.correlate(x[..., c], k, mode="nearest")
        out[1:-1, 1:-1, c] = full[1:-1, 1:-1]
    return out


def _blend(a: np.ndarray, b: np.ndarray, f: float) -> np.ndarray:
    return (1.0 - f) * a + f * b


def apply_appearance(tile: np.ndarray, spec: TransformSpec) -> np.ndarray:
    if spec.family is not Family.APPEARANCE:
        raise ValueError(f"{spec.kind.value} is not an appearance transform")
    tile = check_tile(tile)
    kind, s = spec.kind, spec.strength
    if kind is Kind.IDENTITY:
        return tile.copy()
    x = _to_unit(tile)
    if kind is Kind.BRIGHTNESS:
        y = s * x
    elif kind is Kind.CONTRAST:
        y = _blend(luma(x).mean(), x, s)
    elif kind is Kind.SATURATION:
        y = _blend(luma(x)[..., None], x, s)
    elif kind is Kind.HUE:
        hsv = rgb_to_hsv(x)
        hsv[..., 0] = (hsv[..., 0] + s) % 1.0
        y = hsv_to_rgb(hsv)
    elif kind is Kind.GAMMA:
        y = x**s
    elif kind is Kind.SHARPNESS:
        y = _blend(_smooth(x), x, s)
    else:  # pragma: no cover - enum is closed
        raise AssertionError(kind)
    return _to_uint8(y)


# ---------------------------------------------------------------------------
# geometric


def _affine_matrix(spec: TransformSpec, shape: tuple[int, int]) -> tuple[np.ndarray, np.ndarray]:
    """Matrix/offset mapping output (row, col) to input (row, col)."""
    h, w = shape
    kind, s = spec.kind, spec.strength
    m = np.eye(2)
    shift = np.zeros(2)
    if kind is Kind.ROTATE:
        t = math.radians(s)
        c, sn = math.cos(t), math.sin(t)
        m = np.array([[c, -sn], [sn, c]])
    elif kind is Kind.SHEAR_X:
        m = np.array([[1.0, 0.0], [s, 1.0]])
    elif kind is Kind.SHEAR_Y:
        m = np.array([[1.0, s], [0.0, 1.0]])
    elif kind is Kind.TRANSLATE_X:
        shift = np.array([0.0, -float(round(s * w))])
    elif kind is Kind.TRANSLATE_Y:
        shift = np.array([-float(round(s * h)), 0.0])
    center = np.array([(h - 1) / 2.0, (w - 1) / 2.0])
    offset = center - m @ center + shift
    return m, offset


def apply_geometric(tile: np.ndarray, spec: TransformSpec) -> np.ndarray:
    """Affine warp about the tile centre; bilinear, reflection padding.

    Translation offsets are rounded to whole pixels.
    """
    if spec.family is not Family.GEOMETRIC:
        raise ValueError(f"{spec.kind.value} is not a geometric transform")
    tile = check_tile(tile)
    if spec.kind is Kind.IDENTITY_GEOM:
        return tile.copy()
    m, offset = _affine_matrix(spec, tile.shape[:2])
    x = tile.astype(np.float64)
    out = np.empty_like(x)
    for c in range(3):
        out[..., c] = ndimage.affine_transform(x[..., c], m, offset=offset, order=1, mode="mirror")
    return np.clip(np.floor(out + 0.5), 0, 255).astype(np.uint8)


def apply(tile: np.ndarray, spec: TransformSpec) -> np.ndarray:
    if spec.family is Family.APPEARANCE:
        return apply_appearance(tile, spec)
    return apply_geometric(tile, spec)


# ---------------------------------------------------------------------------
# golden corpus


def tile_checksum(tile: np.ndarray) -> str:
    tile = check_tile(tile)
    h = hashlib.sha256()
    h.update(f"{tile.shape[0]}x{tile.shape[1]}:".encode())
    h.update(np.ascontiguousarray(tile).tobytes())
    return h.hexdigest()


def write_golden_manifest(
    path: str | Path,
    inputs: dict[str, np.ndarray],
    specs: Sequence[TransformSpec],
) -> list[tuple[str, float, str, str]]:
    """Write ``kind strength input-file checksum`` lines for every input x spec."""
    rows = []
    for name in sorted(inputs):
        for spec in specs:
            out = apply(inputs[name], spec)
            rows.append((spec.kind.value, spec.strength, name, tile_checksum(out)))
    with open(path, "w") as fh:
        fh.write("# kind strength input-file sha256\n")
        for kind, strength, name, digest in rows:
            fh.write(f"{kind} {strength!r} {name} {digest}\n")
    return rows


def read_golden_manifest(path: str | Path) -> list[tuple[str, float, str, str]]:
    rows = []
    for line in Path(path).read_text().splitlines():
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        kind, strength, name, digest = line.split()
        rows.append((kind, float(strength), name, digest))
    return rows


def verify_golden_manifest(path: str | Path, inputs: dict[str, np.ndarray]) -> list[str]:
    """Return a description of every manifest entry whose output drifted."""
    failures = []
    for kind, strength, name, digest in read_golden_manifest(path):
        got = tile_checksum(apply(inputs[name], TransformSpec.of(kind, strength)))
        if got != digest:
            failures.append(f"{kind}({strength}) on {name}: {got[:12]} != {digest[:12]}")
    return failures
