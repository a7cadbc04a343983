"""Chip / cell / anchor-point geometry and recursive target-to-anchor assignment."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .errors import CapacityExceededError, GeometryError, TooManyTargetsError


@dataclass(frozen=True)
class AnchorLayout:
    cell_size: int = 32
    chip_size: int = 80
    anchors: tuple[tuple[float, float], ...] = ((8, 8), (24, 8), (16, 16), (8, 24), (24, 24))
    offset_radius: float = 16.0

    def __post_init__(self):
        if self.cell_size <= 0 or self.chip_size < self.cell_size:
            raise GeometryError(f"chip {self.chip_size} must be >= cell {self.cell_size} > 0")
        if (self.chip_size - self.cell_size) % 2:
            raise GeometryError("chip_size - cell_size must be even")
        if self.offset_radius <= 0:
            raise GeometryError("offset_radius must be positive")
        for ax, ay in self.anchors:
            if not (0 <= ax < self.cell_size and 0 <= ay < self.cell_size):
                raise GeometryError(f"anchor ({ax}, {ay}) outside the cell")
        if len(set(self.anchors)) != len(self.anchors):
            raise GeometryError("anchor coordinates must be distinct")

    @property
    def n_anchors(self) -> int:
        return len(self.anchors)

    @property
    def border(self) -> int:
        return (self.chip_size - self.cell_size) // 2


@dataclass(frozen=True)
class TargetTruth:
    """One object: global pixel center plus colour and heading.

    Attribute fields are ``None`` when unknown (hot-pixel annotations).
    """

    x: float
    y: float
    hue: Optional[float] = None
    saturation: Optional[float] = None
    value: Optional[float] = None
    orientation: Optional[float] = None

    @property
    def has_attributes(self) -> bool:
        return None not in (self.hue, self.saturation, self.value, self.orientation)


@dataclass(frozen=True)
class CellOrigin:
    x0: int
    y0: int
    row: int
    col: int


@dataclass(frozen=True)
class Slot:
    target: TargetTruth
    dx: float
    dy: float


@dataclass(frozen=True)
class Assignment:
    slots: tuple[Optional[Slot], ...]

    @property
    def filled(self) -> int:
        return sum(s is not None for s in self.slots)


def build_layout(cell_size: int = 32, chip_size: int = 80) -> AnchorLayout:
    """Quincunx layout: quarter points plus centre, ordered TL, TR, C, BL, BR."""
    if cell_size <= 0 or chip_size < cell_size or (chip_size - cell_size) % 2:
        raise GeometryError(f"invalid geometry cell={cell_size} chip={chip_size}")
    if cell_size % 4:
        q, h = cell_size / 4, cell_size / 2
    else:
        q, h = cell_size // 4, cell_size // 2
    anchors = ((q, q), (3 * q, q), (h, h), (q, 3 * q), (3 * q, 3 * q))
    return AnchorLayout(cell_size, chip_size, anchors, cell_size / 2)


def cell_origin(row: int, col: int, layout: AnchorLayout) -> CellOrigin:
    return CellOrigin(col * layout.cell_size, row * layout.cell_size, row, col)


def grid_shape(width: int, height: int, layout: AnchorLayout) -> tuple[int, int]:
    """(rows, cols) of cells needed to cover a width x height image."""
    c = layout.cell_size
    return -(-height // c), -(-width // c)


def cells_covering(width: int, height: int, layout: AnchorLayout) -> list[CellOrigin]:
    rows, cols = grid_shape(width, height, layout)
    return [cell_origin(r, q, layout) for r in range(rows) for q in range(cols)]


def in_cell(t: TargetTruth, origin: CellOrigin, layout: AnchorLayout) -> bool:
    c = layout.cell_size
    return origin.x0 <= t.x < origin.x0 + c and origin.y0 <= t.y < origin.y0 + c


def targets_in_cell(
    truth: Sequence[TargetTruth], origin: CellOrigin, layout: AnchorLayout
) -> list[TargetTruth]:
    found = [t for t in truth if in_cell(t, origin, layout)]
    if len(found) > layout.n_anchors:
        raise TooManyTargetsError(
            f"{len(found)} targets in cell ({origin.x0}, {origin.y0}); "
            f"at most {layout.n_anchors} allowed"
        )
    return found


def assign_targets(
    targets: Sequence[TargetTruth], origin: CellOrigin, layout: AnchorLayout
) -> Assignment:
    """Greedy global-nearest assignment of targets to anchor-points.

    Repeatedly binds the closest remaining (target, anchor) pair. Ties go to the
    lower anchor index, then the earlier target.
    """
    n = layout.n_anchors
    if len(targets) > n:
        raise CapacityExceededError(f"{len(targets)} targets for {n} anchor-points")
    ax = [origin.x0 + a[0] for a in layout.anchors]
    ay = [origin.y0 + a[1] for a in layout.anchors]
    pairs = []
    for ti, t in enumerate(targets):
        for ai in range(n):
            d2 = (t.x - ax[ai]) ** 2 + (t.y - ay[ai]) ** 2
            pairs.append((d2, ai, ti))
    pairs.sort()
    slots: list[Optional[Slot]] = [None] * n
    used_t: set[int] = set()
    for _, ai, ti in pairs:
        if slots[ai] is not None or ti in used_t:
            continue
        t = targets[ti]
        slots[ai] = Slot(t, t.x - ax[ai], t.y - ay[ai])
        used_t.add(ti)
        if len(used_t) == len(targets):
            break
    return Assignment(tuple(slots))


def reflect_indices(start: int, length: int, n: int) -> np.ndarray:
    """Indices ``start .. start+length`` folded into ``[0, n)`` by mirror reflection.

    Matches ``numpy.pad(mode="reflect")``: the edge sample is not repeated.
    """
    idx = np.arange(start, start + length)
    if n == 1:
        return np.zeros(length, dtype=np.intp)
    period = 2 * (n - 1)
    idx = np.mod(idx, period)
    return np.where(idx >= n, period - idx, idx).astype(np.intp)


def extract_chip(image: np.ndarray, origin: CellOrigin, layout: AnchorLayout) -> np.ndarray:
    """chip_size x chip_size window centred on the cell, reflect-padded at edges."""
    h, w = image.shape[:2]
    if h == 0 or w == 0:
        raise GeometryError("empty image")
    b, s = layout.border, layout.chip_size
    y0, x0 = origin.y0 - b, origin.x0 - b
    if y0 >= 0 and x0 >= 0 and y0 + s <= h and x0 + s <= w:
        return image[y0 : y0 + s, x0 : x0 + s].copy()
    rows = reflect_indices(y0, s, h)
    cols = reflect_indices(x0, s, w)
    return image[np.ix_(rows, cols)]

