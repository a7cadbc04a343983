"""Synthetic overhead scenes with fully attributed targets, chip sampling, and
hot-pixel annotation ingestion.

Coordinates: pixel ``(row j, col i)`` has its centre at ``(x=i, y=j)``.
Orientation: 0 deg points along -y (up), angles grow clockwise.
"""

from __future__ import annotations

import colorsys
import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
from scipy import ndimage

from .codec import TruthVector, encode_cell_truth
from .errors import DimensionMismatchError, GeometryError, PlacementError
from .geometry import (
    AnchorLayout,
    CellOrigin,
    TargetTruth,
    assign_targets,
    extract_chip,
    targets_in_cell,
)

CAPACITY_WINDOW = 32
CAPACITY = 5
MAX_ATTEMPTS_PER_TARGET = 2000


@dataclass(frozen=True)
class SceneSpec:
    width: int = 512
    height: int = 512
    target_count: int = 100
    target_length: float = 30.0
    target_width: float = 10.0
    background_level: float = 0.35
    noise_amplitude: float = 0.08
    min_separation: float = 12.0
    # centres keep at least this distance from the image edge
    margin: float = 0.0

    def __post_init__(self):
        if self.width <= 0 or self.height <= 0:
            raise GeometryError("scene dimensions must be positive")
        if self.target_count < 0:
            raise GeometryError("target_count must be >= 0")
        if self.target_length <= 0 or self.target_width <= 0:
            raise GeometryError("target dimensions must be positive")
        if not 0.0 <= self.background_level <= 1.0 or self.noise_amplitude < 0:
            raise GeometryError("background level must lie in [0, 1], noise >= 0")
        if self.min_separation < 0 or self.margin < 0:
            raise GeometryError("min_separation and margin must be >= 0")
        if 2 * self.margin >= min(self.width, self.height):
            raise GeometryError("margin leaves no room for targets")


@dataclass
class SceneTruth:
    targets: list[TargetTruth]
    width: int
    height: int


@dataclass
class ChipSample:
    chip: np.ndarray  # (chip, chip, 3) uint8
    truth: TruthVector
    origin: CellOrigin
    targets: list[TargetTruth] = field(default_factory=list)


# ---------------------------------------------------------------- placement


def _window_overload(p: tuple[float, float], others: np.ndarray, window: float, cap: int) -> bool:
    """True if adding ``p`` creates a half-open window x window square with > cap points."""
    if len(others) == 0:
        return False
    near = others[(np.abs(others[:, 0] - p[0]) < window) & (np.abs(others[:, 1] - p[1]) < window)]
    if len(near) < cap:
        return False
    pts = np.vstack([near, np.asarray(p)[None]])
    # a maximal window can always be slid until its left/top edge touches a point
    for a in pts[:, 0]:
        if not a <= p[0] < a + window:
            continue
        col = pts[(pts[:, 0] >= a) & (pts[:, 0] < a + window)]
        for b in col[:, 1]:
            if not b <= p[1] < b + window:
                continue
            if np.count_nonzero((col[:, 1] >= b) & (col[:, 1] < b + window)) > cap:
                return True
    return False


def _corners(x, y, length, width, theta_deg):
    t = math.radians(theta_deg)
    fwd = np.array([math.sin(t), -math.cos(t)])
    side = np.array([math.cos(t), math.sin(t)])
    c = np.array([x, y])
    hl, hw = length / 2, width / 2
    return np.array([c + fwd * sx * hl + side * sy * hw for sx, sy in ((1, 1), (1, -1), (-1, -1), (-1, 1))])


def _rects_overlap(a: np.ndarray, b: np.ndarray) -> bool:
    """Separating-axis test for two convex quadrilaterals."""
    for poly in (a, b):
        for i in range(4):
            edge = poly[(i + 1) % 4] - poly[i]
            axis = np.array([-edge[1], edge[0]])
            pa, pb = a @ axis, b @ axis
            if pa.max() <= pb.min() or pb.max() <= pa.min():
                return False
    return True


# ---------------------------------------------------------------- rendering


def hsv_to_rgb(hue: float, sat: float, val: float) -> tuple[float, float, float]:
    return colorsys.hsv_to_rgb((hue % 360.0) / 360.0, sat, val)


def _background(spec: SceneSpec, rng: np.random.Generator) -> np.ndarray:
    h, w = spec.height, spec.width
    coarse = rng.standard_normal((h // 16 + 2, w // 16 + 2, 3))
    smooth = ndimage.zoom(coarse, (16, 16, 1), order=1)[:h, :w]
    tint = 0.4 * smooth.mean(axis=2, keepdims=True) + 0.6 * smooth
    fine = rng.standard_normal((h, w, 1))
    img = spec.background_level + spec.noise_amplitude * (0.8 * tint + 0.5 * fine)
    return img


def _render_target(img: np.ndarray, t: TargetTruth, spec: SceneSpec) -> None:
    h, w = img.shape[:2]
    r = int(math.ceil(math.hypot(spec.target_length, spec.target_width) / 2)) + 1
    x0, x1 = max(0, int(math.floor(t.x)) - r), min(w, int(math.ceil(t.x)) + r + 1)
    y0, y1 = max(0, int(math.floor(t.y)) - r), min(h, int(math.ceil(t.y)) + r + 1)
    if x0 >= x1 or y0 >= y1:
        return
    yy, xx = np.mgrid[y0:y1, x0:x1]
    th = math.radians(t.orientation)
    dx, dy = xx - t.x, yy - t.y
    along = dx * math.sin(th) - dy * math.cos(th)
    across = dx * math.cos(th) + dy * math.sin(th)
    half_l, half_w = spec.target_length / 2, spec.target_width / 2
    body = (np.abs(along) <= half_l) & (np.abs(across) <= half_w)
    front = body & (along > half_l - spec.target_length / 3)
    rgb = np.array(hsv_to_rgb(t.hue, t.saturation, t.value))
    light = rgb + 0.5 * (1.0 - rgb)
    region = img[y0:y1, x0:x1]
    region[body] = rgb
    region[front] = light


def to_uint8(img: np.ndarray) -> np.ndarray:
    return np.clip(np.rint(img * 255.0), 0, 255).astype(np.uint8)


def generate_scene(spec: SceneSpec, seed: int) -> tuple[np.ndarray, SceneTruth]:
    """Render a textured background with ``target_count`` non-overlapping targets.

    Centres sit on a quarter-pixel lattice, keep ``min_separation`` from each
    other, and no 32x32 window ever holds more than 5 of them.
    """
    rng = np.random.default_rng(seed)
    img = _background(spec, rng)
    targets: list[TargetTruth] = []
    pts = np.empty((0, 2))
    polys = []
    lo_x, hi_x = spec.margin, spec.width - 1 - spec.margin
    lo_y, hi_y = spec.margin, spec.height - 1 - spec.margin
    pad = 1.0  # keep a one-pixel gap between rendered bodies
    for _ in range(spec.target_count):
        for _attempt in range(MAX_ATTEMPTS_PER_TARGET):
            x = np.floor(rng.uniform(lo_x, hi_x) * 4) / 4
            y = np.floor(rng.uniform(lo_y, hi_y) * 4) / 4
            ori = float(rng.uniform(0.0, 360.0))
            if len(pts):
                d = np.hypot(pts[:, 0] - x, pts[:, 1] - y)
                if d.min() < spec.min_separation:
                    continue
            if _window_overload((x, y), pts, CAPACITY_WINDOW, CAPACITY):
                continue
            poly = _corners(x, y, spec.target_length + pad, spec.target_width + pad, ori)
            reach = spec.target_length + pad
            if any(
                abs(px - x) < reach and abs(py - y) < reach and _rects_overlap(poly, q)
                for (px, py), q in zip(pts, polys)
            ):
                continue
            break
        else:
            raise PlacementError(
                f"placed {len(targets)} of {spec.target_count} targets before giving up"
            )
        t = TargetTruth(
            x=float(x),
            y=float(y),
            hue=float(rng.uniform(0.0, 360.0)),
            saturation=float(rng.uniform(0.5, 1.0)),
            value=float(rng.uniform(0.5, 1.0)),
            orientation=ori,
        )
        targets.append(t)
        pts = np.vstack([pts, [x, y]])
        polys.append(poly)
    for t in targets:
        _render_target(img, t, spec)
    return to_uint8(img), SceneTruth(targets, spec.width, spec.height)


def max_window_count(targets: Sequence[TargetTruth], width: int, height: int, window: int = 32) -> int:
    """Largest number of centres inside any axis-aligned window (brute-force scan).

    Scans every window position on the quarter-pixel lattice the synthesiser
    uses; a maximal window always has its edges on that lattice.
    """
    if not targets:
        return 0
    q = 4
    gw, gh = width * q + 1, height * q + 1
    grid = np.zeros((gh, gw), dtype=np.int32)
    for t in targets:
        grid[int(round(t.y * q)), int(round(t.x * q))] += 1
    s = np.zeros((gh + 1, gw + 1), dtype=np.int64)
    s[1:, 1:] = grid.cumsum(0).cumsum(1)
    k = window * q
    # half-open window [a, a + window): k lattice steps
    a = np.arange(0, gh)
    b = np.arange(0, gw)
    a1 = np.minimum(a + k, gh)
    b1 = np.minimum(b + k, gw)
    counts = s[a1][:, b1] - s[a][:, b1] - s[a1][:, b] + s[a][:, b]
    return int(counts.max())


# ---------------------------------------------------------------- chips


@dataclass(frozen=True)
class ChipPolicy:
    count: int = 256
    positive_fraction: float = 0.5
    aligned: bool = False

    def __post_init__(self):
        if self.count < 0 or not 0.0 <= self.positive_fraction <= 1.0:
            raise ValueError("count >= 0 and positive_fraction in [0, 1] required")


def label_cell(
    scene: np.ndarray, truth: Sequence[TargetTruth], origin: CellOrigin, layout: AnchorLayout
) -> ChipSample:
    inside = targets_in_cell(truth, origin, layout)
    vec = encode_cell_truth(assign_targets(inside, origin, layout), layout)
    return ChipSample(extract_chip(scene, origin, layout), vec, origin, inside)


def sample_chips(
    scene: np.ndarray,
    truth: SceneTruth,
    layout: AnchorLayout,
    policy: ChipPolicy = ChipPolicy(),
    seed: int = 0,
) -> list[ChipSample]:
    """Random cell origins labelled through the geometry + codec pipeline.

    Positives (>= 1 target in the cell) and negatives are balanced to
    ``policy.positive_fraction``; if the scene cannot supply enough of one
    kind within a bounded number of draws the other kind fills the remainder.
    """
    h, w = scene.shape[:2]
    c = layout.cell_size
    if w < layout.chip_size or h < layout.chip_size:
        raise GeometryError("scene must be larger than a chip")
    rng = np.random.default_rng(seed)
    want_pos = int(round(policy.count * policy.positive_fraction))
    want_neg = policy.count - want_pos
    pos: list[ChipSample] = []
    neg: list[ChipSample] = []
    spare: list[ChipSample] = []
    for _ in range(policy.count * 50):
        if len(pos) >= want_pos and len(neg) >= want_neg:
            break
        if policy.aligned:
            row, col = int(rng.integers(0, h // c)), int(rng.integers(0, w // c))
            origin = CellOrigin(col * c, row * c, row, col)
        else:
            x0, y0 = int(rng.integers(0, w - c + 1)), int(rng.integers(0, h - c + 1))
            origin = CellOrigin(x0, y0, y0 // c, x0 // c)
        sample = label_cell(scene, truth.targets, origin, layout)
        if sample.truth.mask.any():
            (pos if len(pos) < want_pos else spare).append(sample)
        else:
            (neg if len(neg) < want_neg else spare).append(sample)
    out = pos + neg
    out += spare[: max(0, policy.count - len(out))]
    order = rng.permutation(len(out))
    return [out[i] for i in order]


def augment_sample(sample: ChipSample, rot90: int, flip: bool, layout: AnchorLayout) -> ChipSample:
    """Rotate the chip by ``rot90`` quarter turns clockwise (then mirror left-right if ``flip``).

    Target positions are transformed about the cell centre, orientations are
    co-rotated, and the cell is relabelled, so truth stays consistent.
    """
    c = sample.origin
    half = (layout.cell_size - 1) / 2.0  # pixel-centre convention: cell spans x0 .. x0+cell-1
    cx, cy = c.x0 + half, c.y0 + half
    chip = sample.chip
    moved = []
    for t in sample.targets:
        x, y, ori = t.x - cx, t.y - cy, t.orientation
        for _ in range(rot90 % 4):
            x, y = -y, x
            ori = None if ori is None else (ori + 90.0) % 360.0
        if flip:
            x = -x
            ori = None if ori is None else (360.0 - ori) % 360.0
        moved.append(TargetTruth(x + cx, y + cy, t.hue, t.saturation, t.value, ori))
    chip = np.rot90(chip, k=-(rot90 % 4), axes=(0, 1))
    if flip:
        chip = chip[:, ::-1]
    chip = np.ascontiguousarray(chip)
    vec = encode_cell_truth(assign_targets(moved, c, layout), layout)
    return ChipSample(chip, vec, c, moved)


# ---------------------------------------------------------------- annotations


def ingest_hotpixel_annotations(image: np.ndarray, mask: np.ndarray) -> SceneTruth:
    """One attribute-less target per nonzero mask pixel, in row-major order."""
    if image.shape[:2] != mask.shape[:2]:
        raise DimensionMismatchError(f"image {image.shape[:2]} vs mask {mask.shape[:2]}")
    m = mask if mask.ndim == 2 else mask[..., 0]
    rows, cols = np.nonzero(m)
    targets = [TargetTruth(float(x), float(y)) for y, x in zip(rows, cols)]
    return SceneTruth(targets, image.shape[1], image.shape[0])
