"""Domain types, value-range conventions, dataset ingestion and synthetic scenes."""

from __future__ import annotations

import colorsys
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
from PIL import Image

from .errors import FormatError, LabelRangeError, NotFound, RangeError, SizeError

# Class order follows the FMB segmentation table.
FMB_CLASSES = (
    "unlabelled", "road", "sidewalk", "building", "lamp", "sign", "vegetation",
    "sky", "person", "car", "truck", "bus", "motorcycle", "pole",
)
THERMAL_IDS = frozenset({4, 8, 9, 10, 11, 12})

IR_DIR, VIS_DIR, LABEL_DIR = "Infrared", "Visible", "Label"


@dataclass(frozen=True)
class LabelPalette:
    names: tuple = FMB_CLASSES
    thermal_ids: frozenset = THERMAL_IDS

    def __post_init__(self):
        object.__setattr__(self, "names", tuple(self.names))
        object.__setattr__(self, "thermal_ids", frozenset(int(t) for t in self.thermal_ids))
        if not self.names:
            raise ValueError("palette needs at least one class")
        bad = [t for t in self.thermal_ids if not 0 <= t < len(self.names)]
        if bad:
            raise LabelRangeError(f"thermal ids {sorted(bad)} outside [0, {len(self.names)})")

    @property
    def n(self) -> int:
        return len(self.names)

    def to_dict(self) -> dict:
        return {"names": list(self.names), "thermal_ids": sorted(self.thermal_ids)}

    @classmethod
    def from_dict(cls, d: dict) -> "LabelPalette":
        return cls(names=tuple(d["names"]), thermal_ids=frozenset(d["thermal_ids"]))


FMB_PALETTE = LabelPalette()


@dataclass
class ImagePair:
    """Registered infrared/visible pair. ``ir`` is HxWx1, ``vis`` HxWx3, both in [0, 1]."""

    id: str
    ir: np.ndarray
    vis: np.ndarray
    label: Optional[np.ndarray] = None

    def __post_init__(self):
        if self.ir.ndim != 3 or self.ir.shape[2] != 1:
            raise FormatError(f"{self.id}: infrared must be HxWx1, got {self.ir.shape}")
        if self.vis.ndim != 3 or self.vis.shape[2] != 3:
            raise FormatError(f"{self.id}: visible must be HxWx3, got {self.vis.shape}")
        if self.ir.shape[:2] != self.vis.shape[:2]:
            raise SizeError(f"{self.id}: ir {self.ir.shape[:2]} vs vis {self.vis.shape[:2]}")
        if self.label is not None and self.label.shape != self.ir.shape[:2]:
            raise SizeError(f"{self.id}: label {self.label.shape} vs image {self.ir.shape[:2]}")

    @property
    def size(self) -> tuple:
        return self.ir.shape[:2]


@dataclass
class SegMap:
    """Per-pixel class scores, HxWxn."""

    scores: np.ndarray
    normalized: bool = False

    @property
    def n(self) -> int:
        return self.scores.shape[-1]

    def probs(self) -> np.ndarray:
        if self.normalized:
            return self.scores
        s = np.clip(self.scores, 0.0, None)
        total = s.sum(axis=-1, keepdims=True)
        out = np.full_like(s, 1.0 / self.n)
        np.divide(s, total, out=out, where=total > 0)
        return out


@dataclass
class DatasetSplit:
    root: Path
    role: str
    ids: list = field(default_factory=list)

    @classmethod
    def discover(cls, root, role: str) -> "DatasetSplit":
        """Scan ``<root>/<role>/Visible`` for ids, sorted lexicographically."""
        root = Path(root)
        vis_dir = root / role / VIS_DIR
        if not vis_dir.is_dir():
            raise NotFound(f"no visible directory at {vis_dir}")
        ids = sorted(p.stem for p in vis_dir.glob("*.png"))
        return cls(root=root, role=role, ids=ids)

    def path(self, kind: str, id: str) -> Path:
        return self.root / self.role / kind / f"{id}.png"

    def has_labels(self) -> bool:
        return all(self.path(LABEL_DIR, i).is_file() for i in self.ids)


def _read_png(path: Path) -> np.ndarray:
    if not path.is_file():
        raise NotFound(f"missing file {path}")
    with Image.open(path) as im:
        return np.asarray(im)


def load_pair(split: DatasetSplit, id: str, palette: LabelPalette = FMB_PALETTE) -> ImagePair:
    if id not in split.ids:
        raise NotFound(f"id {id!r} not in {split.role} split at {split.root}")
    ir = _read_png(split.path(IR_DIR, id))
    vis = _read_png(split.path(VIS_DIR, id))
    if ir.ndim == 3:
        if ir.shape[2] != 1:
            raise FormatError(f"{id}: infrared has {ir.shape[2]} channels, expected 1")
        ir = ir[..., 0]
    if vis.ndim != 3 or vis.shape[2] != 3:
        got = 1 if vis.ndim == 2 else vis.shape[2]
        raise FormatError(f"{id}: visible has {got} channels, expected 3")
    if ir.dtype != np.uint8 or vis.dtype != np.uint8:
        raise FormatError(f"{id}: expected 8-bit images")
    label = None
    label_path = split.path(LABEL_DIR, id)
    if label_path.is_file():
        label = _read_png(label_path)
        if label.ndim != 2:
            raise FormatError(f"{id}: label must be single-channel")
        label = label.astype(np.int64)
        if label.size and label.max() >= palette.n:
            raise LabelRangeError(f"{id}: label value {label.max()} >= {palette.n}")
    elif split.role == "train":
        raise NotFound(f"missing label file {label_path}")
    return ImagePair(
        id=id,
        ir=(ir.astype(np.float32) / 255.0)[..., None],
        vis=vis.astype(np.float32) / 255.0,
        label=label,
    )


def to_uint8(x: np.ndarray) -> np.ndarray:
    return np.round(np.clip(x, 0.0, 1.0) * 255.0).astype(np.uint8)


def save_pair(root, role: str, pair: ImagePair) -> None:
    base = Path(root) / role
    for kind in (IR_DIR, VIS_DIR, LABEL_DIR):
        (base / kind).mkdir(parents=True, exist_ok=True)
    Image.fromarray(to_uint8(pair.ir[..., 0])).save(base / IR_DIR / f"{pair.id}.png")
    Image.fromarray(to_uint8(pair.vis)).save(base / VIS_DIR / f"{pair.id}.png")
    if pair.label is not None:
        Image.fromarray(pair.label.astype(np.uint8)).save(base / LABEL_DIR / f"{pair.id}.png")


def _check_range(x, lo: float, hi: float) -> None:
    if x.size == 0:
        return
    if float(x.min()) < lo or float(x.max()) > hi:
        raise RangeError(f"values outside [{lo}, {hi}]: min {float(x.min())}, max {float(x.max())}")


def to_signed(x):
    """Map [0, 1] to [-1, 1]. Works on numpy arrays and torch tensors."""
    _check_range(x, 0.0, 1.0)
    return 2 * x - 1


def from_signed(x):
    _check_range(x, -1.0, 1.0)
    return (x + 1) / 2


def onehot(label: np.ndarray, n: int) -> SegMap:
    label = np.asarray(label)
    if label.size and (label.min() < 0 or label.max() >= n):
        raise LabelRangeError(f"label values must lie in [0, {n})")
    scores = np.zeros(label.shape + (n,), dtype=np.float32)
    np.put_along_axis(scores, label[..., None].astype(np.int64), 1.0, axis=-1)
    return SegMap(scores=scores, normalized=True)


def argmax_decode(seg: SegMap) -> np.ndarray:
    # np.argmax returns the first maximal index, which is the tie rule we want.
    return np.argmax(seg.scores, axis=-1).astype(np.int64)


# -- synthetic scenes ---------------------------------------------------------

# Infrared levels: thermal classes spread over the bright band, the rest over the dark one.
IR_HOT_RANGE = (1.0, 0.5)
IR_COLD_RANGE = (0.0, 0.4)


def _class_levels(palette: LabelPalette):
    """Infrared level per class: thermal classes bright, everything else dim."""
    thermal = sorted(palette.thermal_ids)
    cold = [c for c in range(palette.n) if c not in palette.thermal_ids]
    levels = np.zeros(palette.n)
    levels[thermal] = np.linspace(*IR_HOT_RANGE, len(thermal)) if thermal else []
    levels[cold] = np.linspace(*IR_COLD_RANGE, len(cold)) if cold else []
    return levels


def _class_colors(palette: LabelPalette):
    colors = np.zeros((palette.n, 3))
    for c in range(palette.n):
        hue = (c * 0.381966) % 1.0
        sat = 0.35 + 0.4 * ((c * 7) % 5) / 4
        val = 0.55 + 0.35 * ((c * 3) % 4) / 3
        colors[c] = colorsys.hsv_to_rgb(hue, sat, val)
    return colors


# Texture of non-thermal classes in the visible image and the sensor noise in dim
# (thermal) regions. Amplitudes are in [0, 1] intensity units.
TEXTURE_AMPLITUDE = 0.04
DIM_FACTOR = 0.35
DIM_NOISE = 0.06


def synth_scene(seed: int, size=(128, 128), palette: LabelPalette = FMB_PALETTE, stride: int = 8) -> ImagePair:
    """Render a street-like scene of flat regions and object primitives.

    The label map is exact by construction. Thermal classes are bright in the
    infrared image and dark and noisy in the visible one; the other classes are
    flat in infrared and carry oriented stripe texture in the visible image.
    """
    h, w = size
    if h % stride or w % stride:
        raise SizeError(f"scene size {size} not divisible by stride {stride}")
    rng = np.random.default_rng(seed)
    n = palette.n
    ids = set(range(n))
    thermal = sorted(palette.thermal_ids)
    cold = [c for c in range(n) if c not in palette.thermal_ids]

    def pick(preferred, fallback):
        return preferred if preferred in ids and preferred not in palette.thermal_ids else fallback

    sky, road, sidewalk = pick(7, cold[0]), pick(1, cold[-1]), pick(2, cold[len(cold) // 2])
    building, veg, pole, sign = pick(3, cold[0]), pick(6, cold[-1]), pick(13, cold[0]), pick(5, cold[-1])

    label = np.zeros((h, w), dtype=np.int64)
    yy, xx = np.mgrid[0:h, 0:w]
    horizon = int(h * rng.uniform(0.22, 0.38))
    walk = int(h * rng.uniform(0.55, 0.62))
    street = walk + int(h * rng.uniform(0.06, 0.1))
    label[:horizon] = sky
    # skyline of buildings and trees between the horizon and the sidewalk
    x = 0
    while x < w:
        seg_w = int(w * rng.uniform(0.15, 0.35))
        top = int(horizon - h * rng.uniform(0.0, 0.15))
        label[max(top, 0):walk, x:x + seg_w] = building if rng.random() < 0.6 else veg
        x += seg_w
    label[walk:street] = sidewalk
    label[street:] = road
    if 0 in ids and 0 not in (sky, road, sidewalk, building, veg):
        r0 = int(rng.integers(street, h - h // 16))
        c0 = int(rng.integers(0, w - w // 8))
        label[r0:r0 + h // 16, c0:c0 + w // 8] = 0

    # poles with signs
    for _ in range(int(rng.integers(1, 3))):
        px = int(rng.integers(2, w - 6))
        pw = max(3, w // 40)
        ptop = int(h * rng.uniform(0.15, 0.3))
        label[ptop:street, px:px + pw] = pole
        if rng.random() < 0.7:
            sh = max(6, h // 14)
            label[ptop:ptop + sh, max(px - sh // 2, 0):px + pw + sh // 2] = sign

    # thermal objects in the street band, drawn back to front
    n_obj = int(rng.integers(2, 6))
    for _ in range(n_obj):
        cls = thermal[int(rng.integers(len(thermal)))] if thermal else cold[0]
        base = int(rng.integers(walk, h))
        if cls == 4:  # lamp: small bright disc above street level
            cy, cx = int(h * rng.uniform(0.12, 0.35)), int(rng.integers(6, w - 6))
            r = max(3, h // 24)
            label[(yy - cy) ** 2 + (xx - cx) ** 2 <= r * r] = cls
            continue
        oh = int(h * {8: 0.28, 9: 0.14, 10: 0.22, 11: 0.26, 12: 0.12}.get(cls, 0.15))
        ow = int(w * {8: 0.08, 9: 0.26, 10: 0.32, 11: 0.42, 12: 0.16}.get(cls, 0.15))
        cx = int(rng.integers(0, w))
        top, left = max(base - oh, 0), max(cx - ow // 2, 0)
        if cls in (8, 12):
            cy = top + oh / 2
            mask = ((yy - cy) / max(oh / 2, 1)) ** 2 + ((xx - cx) / max(ow / 2, 1)) ** 2 <= 1
            label[mask] = cls
        else:
            label[top:base, left:left + ow] = cls

    levels = _class_levels(palette)
    colors = _class_colors(palette)
    ir = levels[label]

    vis = colors[label].copy()
    is_hot = np.isin(label, thermal)
    for c in np.unique(label):
        region = label == c
        if c in palette.thermal_ids:
            continue
        theta = (c * 0.7) % np.pi
        freq = 2 * np.pi / (4 + (c * 5) % 9)
        phase = rng.uniform(0, 2 * np.pi)
        stripes = np.sin(freq * (xx * np.cos(theta) + yy * np.sin(theta)) + phase)
        vis[region] += TEXTURE_AMPLITUDE * stripes[region][:, None]
    vis[is_hot] *= DIM_FACTOR
    vis[is_hot] += rng.uniform(-DIM_NOISE, DIM_NOISE, size=(int(is_hot.sum()), 1))
    # quantize to the 8-bit grid so PNG round trips are lossless
    vis = to_uint8(vis).astype(np.float32) / 255.0
    ir = to_uint8(ir).astype(np.float32) / 255.0

    return ImagePair(
        id=f"synth{seed:06d}",
        ir=ir[..., None].astype(np.float32),
        vis=vis.astype(np.float32),
        label=label,
    )
