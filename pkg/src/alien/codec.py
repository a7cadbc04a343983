"""Per-cell truth encoding into the anchor-major prediction layout, and decoding back.

Every anchor owns a contiguous block of ``M = 9`` values::

    [exists, dx, dy, hue_sin, hue_cos, saturation, value, ori_sin, ori_cos]

All values live in [0, 1] so they can be matched against sigmoid outputs.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .geometry import AnchorLayout, Assignment, CellOrigin

FEATURES = (
    "exists",
    "dx",
    "dy",
    "hue_sin",
    "hue_cos",
    "saturation",
    "value",
    "ori_sin",
    "ori_cos",
)
EXISTS, DX, DY, HUE_SIN, HUE_COS, SAT, VAL, ORI_SIN, ORI_COS = range(len(FEATURES))
PLACEHOLDER = 0.5


@dataclass(frozen=True)
class FeatureSpec:
    names: tuple[str, ...] = FEATURES
    # feature 0 is categorical (BCE); the rest are regression (squared error)
    kinds: tuple[str, ...] = ("categorical",) + ("regression",) * (len(FEATURES) - 1)

    def __post_init__(self):
        if len(self.names) != len(self.kinds):
            raise ValueError("names and kinds differ in length")
        if self.kinds[0] != "categorical" or "categorical" in self.kinds[1:]:
            raise ValueError("exactly feature 0 must be categorical")

    @property
    def n_features(self) -> int:
        return len(self.names)

    def vector_length(self, layout: AnchorLayout) -> int:
        return self.n_features * layout.n_anchors


DEFAULT_SPEC = FeatureSpec()


@dataclass
class TruthVector:
    """Encoded truth for one cell (float64) and its per-anchor existence mask."""

    values: np.ndarray
    mask: np.ndarray

    def blocks(self) -> np.ndarray:
        return self.values.reshape(len(self.mask), -1)


@dataclass(frozen=True)
class Detection:
    x: float
    y: float
    confidence: float
    hue: float
    saturation: float
    value: float
    orientation: float
    cell: Optional[CellOrigin] = field(default=None, compare=False)
    anchor_index: int = 0


def encode_offset(delta: float, radius: float) -> float:
    if radius <= 0:
        raise ValueError("radius must be positive")
    return min(max((delta + radius) / (2.0 * radius), 0.0), 1.0)


def decode_offset(u: float, radius: float) -> float:
    return 2.0 * radius * u - radius


def encode_angle(theta: float) -> tuple[float, float]:
    r = math.radians(theta % 360.0)
    return (math.sin(r) + 1.0) / 2.0, (math.cos(r) + 1.0) / 2.0


def decode_angle(u: float, v: float) -> float:
    s, c = 2.0 * u - 1.0, 2.0 * v - 1.0
    if s == 0.0 and c == 0.0:
        return 0.0
    deg = math.degrees(math.atan2(s, c)) % 360.0
    return 0.0 if deg >= 360.0 else deg


def encode_cell_truth(
    assignment: Assignment, layout: AnchorLayout, spec: FeatureSpec = DEFAULT_SPEC
) -> TruthVector:
    n, m = layout.n_anchors, spec.n_features
    values = np.full((n, m), PLACEHOLDER, dtype=np.float64)
    values[:, EXISTS] = 0.0
    mask = np.zeros(n, dtype=bool)
    r = layout.offset_radius
    for i, slot in enumerate(assignment.slots):
        if slot is None:
            continue
        t = slot.target
        mask[i] = True
        values[i, EXISTS] = 1.0
        values[i, DX] = encode_offset(slot.dx, r)
        values[i, DY] = encode_offset(slot.dy, r)
        if t.has_attributes:
            values[i, HUE_SIN], values[i, HUE_COS] = encode_angle(t.hue)
            values[i, SAT] = t.saturation
            values[i, VAL] = t.value
            values[i, ORI_SIN], values[i, ORI_COS] = encode_angle(t.orientation)
    return TruthVector(values.reshape(-1), mask)


def decode_detections(
    pred: np.ndarray,
    layout: AnchorLayout,
    origin: CellOrigin,
    threshold: float = 0.5,
    spec: FeatureSpec = DEFAULT_SPEC,
) -> list[Detection]:
    """Detections for every anchor whose existence score exceeds ``threshold``."""
    if not 0.0 < threshold < 1.0:
        raise ValueError("threshold must lie in (0, 1)")
    blocks = np.asarray(pred, dtype=np.float64).reshape(layout.n_anchors, spec.n_features)
    r = layout.offset_radius
    out = []
    for i in np.flatnonzero(blocks[:, EXISTS] > threshold):
        b = blocks[i]
        ax, ay = layout.anchors[i]
        out.append(
            Detection(
                x=origin.x0 + ax + decode_offset(b[DX], r),
                y=origin.y0 + ay + decode_offset(b[DY], r),
                confidence=float(b[EXISTS]),
                hue=decode_angle(b[HUE_SIN], b[HUE_COS]),
                saturation=float(b[SAT]),
                value=float(b[VAL]),
                orientation=decode_angle(b[ORI_SIN], b[ORI_COS]),
                cell=origin,
                anchor_index=int(i),
            )
        )
    return out
