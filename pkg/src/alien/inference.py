"""Fully convolutional inference over arbitrarily large images.

The network is evaluated once per cell with stride equal to the cell size.
Execution is chip-wise: every chip uses the same weights and valid padding,
so this is the same computation as one big convolution, but memory stays
bounded by a single band of chips (one cell row) at a time.
"""

from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Iterable, Optional, Sequence

import numpy as np

from .codec import Detection, decode_detections
from .errors import FormatError
from .fileio import atomic_write_text
from .geometry import (
    AnchorLayout,
    CellOrigin,
    cell_origin,
    cells_covering,
    extract_chip,
    grid_shape,
    reflect_indices,
)
from .model import Model, forward_chip, normalize_chip

DETECTION_HEADER = "x y conf hue sat val ori cell_row cell_col anchor"


@dataclass(frozen=True)
class InferenceConfig:
    threshold: float = 0.5
    merge_radius: float = 8.0
    tile_parallelism: int = 1

    def __post_init__(self):
        if not 0.0 < self.threshold < 1.0:
            raise ValueError("threshold must lie in (0, 1)")
        if self.merge_radius < 0:
            raise ValueError("merge_radius must be >= 0")
        if self.tile_parallelism < 1:
            raise ValueError("tile_parallelism must be >= 1")


def default_parallelism() -> int:
    try:
        return max(1, int(os.environ.get("ALIEN_THREADS", "1")))
    except ValueError:
        return 1


def pad_for_tiling(image: np.ndarray, layout: AnchorLayout) -> tuple[np.ndarray, tuple[int, int]]:
    """Reflect-pad to whole cells plus a context border on every side.

    Returns the padded image and the ``(x, y)`` offset to subtract from padded
    coordinates to get original ones.
    """
    h, w = image.shape[:2]
    rows, cols = grid_shape(w, h, layout)
    b = layout.border
    c = layout.cell_size
    ri = reflect_indices(-b, rows * c + 2 * b, h)
    ci = reflect_indices(-b, cols * c + 2 * b, w)
    return image[np.ix_(ri, ci)], (b, b)


def raw_output_count(width: int, height: int, layout: AnchorLayout, n_features: int = 9) -> int:
    rows, cols = grid_shape(width, height, layout)
    return layout.n_anchors * n_features * rows * cols


def _row_band(image: np.ndarray, row: int, layout: AnchorLayout) -> np.ndarray:
    """Padded-image rows feeding every chip of one cell row."""
    h, w = image.shape[:2]
    _, cols = grid_shape(w, h, layout)
    b, s, c = layout.border, layout.chip_size, layout.cell_size
    ri = reflect_indices(row * c - b, s, h)
    ci = reflect_indices(-b, cols * c + 2 * b, w)
    return image[np.ix_(ri, ci)]


def _infer_row(model: Model, image: np.ndarray, row: int, layout: AnchorLayout) -> list[np.ndarray]:
    h, w = image.shape[:2]
    _, cols = grid_shape(w, h, layout)
    band = _row_band(image, row, layout)
    s, c = layout.chip_size, layout.cell_size
    outs = []
    for col in range(cols):
        chip = normalize_chip(band[:, col * c : col * c + s])
        outs.append(model.forward(chip[None])[0])
    return outs


def _in_bounds(d: Detection, width: int, height: int) -> bool:
    # pixel-centre convention: valid coordinates span [-0.5, size - 0.5)
    return -0.5 <= d.x < width - 0.5 and -0.5 <= d.y < height - 0.5


def cell_predictions(model: Model, image: np.ndarray, layout: AnchorLayout, parallelism: int = 1):
    """Raw network output for every covering cell, as ``(CellOrigin, 45 values)`` in row-major order."""
    h, w = image.shape[:2]
    rows, cols = grid_shape(w, h, layout)
    if parallelism > 1 and rows > 1:
        with ThreadPoolExecutor(max_workers=parallelism) as pool:
            per_row = list(pool.map(lambda r: _infer_row(model, image, r, layout), range(rows)))
    else:
        per_row = [_infer_row(model, image, r, layout) for r in range(rows)]
    for r, outs in enumerate(per_row):
        for q, pred in enumerate(outs):
            yield cell_origin(r, q, layout), pred


def sort_detections(dets: Iterable[Detection]) -> list[Detection]:
    return sorted(dets, key=lambda d: (d.y, d.x, -d.confidence))


def infer_image(
    model: Model,
    image: np.ndarray,
    layout: AnchorLayout,
    config: InferenceConfig = InferenceConfig(),
) -> list[Detection]:
    h, w = image.shape[:2]
    dets = []
    for origin, pred in cell_predictions(model, image, layout, config.tile_parallelism):
        dets.extend(
            d for d in decode_detections(pred, layout, origin, config.threshold) if _in_bounds(d, w, h)
        )
    return merge_duplicates(dets, config.merge_radius)


def infer_reference(
    model: Model, image: np.ndarray, layout: AnchorLayout, config: InferenceConfig = InferenceConfig()
) -> list[Detection]:
    """Chip-by-chip path through extract_chip, used to cross-check :func:`infer_image`."""
    h, w = image.shape[:2]
    dets = []
    for origin in cells_covering(w, h, layout):
        pred = forward_chip(model, extract_chip(image, origin, layout), mode="infer")
        dets.extend(
            d for d in decode_detections(pred, layout, origin, config.threshold) if _in_bounds(d, w, h)
        )
    return merge_duplicates(dets, config.merge_radius)


def merge_duplicates(detections: Sequence[Detection], radius: float) -> list[Detection]:
    """Greedy confidence-descending suppression of detections within ``radius``."""
    if radius < 0:
        raise ValueError("radius must be >= 0")
    if radius == 0 or len(detections) < 2:
        return sort_detections(detections)
    order = sorted(range(len(detections)), key=lambda i: (-detections[i].confidence, i))
    kept: list[Detection] = []
    kx = np.empty(len(detections))
    ky = np.empty(len(detections))
    r2 = radius * radius
    for i in order:
        d = detections[i]
        n = len(kept)
        if n and np.any((kx[:n] - d.x) ** 2 + (ky[:n] - d.y) ** 2 <= r2):
            continue
        kx[n], ky[n] = d.x, d.y
        kept.append(d)
    return sort_detections(kept)


# ---------------------------------------------------------------- files


def format_detections(dets: Iterable[Detection]) -> str:
    lines = [DETECTION_HEADER]
    for d in dets:
        row = d.cell.row if d.cell is not None else -1
        col = d.cell.col if d.cell is not None else -1
        lines.append(
            f"{d.x:.4f} {d.y:.4f} {d.confidence:.4f} {d.hue:.4f} {d.saturation:.4f} "
            f"{d.value:.4f} {d.orientation:.4f} {row} {col} {d.anchor_index}"
        )
    return "\n".join(lines) + "\n"


def parse_detections(text: str, layout: Optional[AnchorLayout] = None) -> list[Detection]:
    lines = [l for l in text.splitlines() if l.strip()]
    if not lines or lines[0].split() != DETECTION_HEADER.split():
        raise FormatError(f"detection file must start with '{DETECTION_HEADER}'")
    c = layout.cell_size if layout is not None else 32
    out = []
    for no, line in enumerate(lines[1:], start=2):
        parts = line.split()
        if len(parts) != 10:
            raise FormatError(f"line {no}: expected 10 fields, got {len(parts)}")
        try:
            x, y, conf, hue, sat, val, ori = (float(p) for p in parts[:7])
            row, col, anchor = (int(p) for p in parts[7:])
        except ValueError as exc:
            raise FormatError(f"line {no}: {exc}") from exc
        out.append(Detection(x, y, conf, hue, sat, val, ori, CellOrigin(col * c, row * c, row, col), anchor))
    return out


def write_detections(path, dets: Iterable[Detection]) -> None:
    atomic_write_text(path, format_detections(dets))


def read_detections(path, layout: Optional[AnchorLayout] = None) -> list[Detection]:
    with open(path, encoding="utf-8") as fh:
        return parse_detections(fh.read(), layout)
