"""On-disk formats: binary PPM/PGM rasters, truth text files, atomic writes."""

from __future__ import annotations

import os
import re
import tempfile
from pathlib import Path
from typing import Iterable, Optional

import numpy as np

from .errors import FormatError
from .geometry import TargetTruth

TRUTH_HEADER = "x y hue sat val ori"


def atomic_write_bytes(path, data: bytes) -> None:
    """Write to a temp file in the same directory, then rename over ``path``."""
    path = Path(path)
    fd, tmp = tempfile.mkstemp(dir=str(path.parent), prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def atomic_write_text(path, text: str) -> None:
    atomic_write_bytes(path, text.encode("utf-8"))


# ---------------------------------------------------------------- netpbm

_TOKEN = re.compile(rb"\s*(?:#[^\n]*\n\s*)*(\S+)")


def _parse_netpbm(data: bytes, magic: bytes, channels: int) -> np.ndarray:
    pos = 0
    fields = []
    for _ in range(4):
        m = _TOKEN.match(data, pos)
        if not m:
            raise FormatError("truncated netpbm header")
        fields.append(m.group(1))
        pos = m.end()
    if fields[0] != magic:
        raise FormatError(f"expected {magic.decode()} raster, found {fields[0][:2]!r}")
    try:
        w, h, maxval = (int(f) for f in fields[1:])
    except ValueError as exc:
        raise FormatError("malformed netpbm header") from exc
    if maxval != 255:
        raise FormatError(f"only 8-bit rasters are supported (maxval {maxval})")
    pos += 1  # single whitespace byte before the raster
    n = w * h * channels
    if len(data) - pos < n:
        raise FormatError("raster data truncated")
    arr = np.frombuffer(data, dtype=np.uint8, count=n, offset=pos)
    return arr.reshape((h, w, channels) if channels > 1 else (h, w)).copy()


def encode_ppm(image: np.ndarray) -> bytes:
    if image.ndim != 3 or image.shape[2] != 3:
        raise FormatError(f"PPM needs an (H, W, 3) raster, got {image.shape}")
    h, w = image.shape[:2]
    return b"P6\n%d %d\n255\n" % (w, h) + np.ascontiguousarray(image, dtype=np.uint8).tobytes()


def encode_pgm(image: np.ndarray) -> bytes:
    if image.ndim != 2:
        raise FormatError(f"PGM needs an (H, W) raster, got {image.shape}")
    h, w = image.shape
    return b"P5\n%d %d\n255\n" % (w, h) + np.ascontiguousarray(image, dtype=np.uint8).tobytes()


def read_ppm(path) -> np.ndarray:
    return _parse_netpbm(Path(path).read_bytes(), b"P6", 3)


def read_pgm(path) -> np.ndarray:
    return _parse_netpbm(Path(path).read_bytes(), b"P5", 1)


def write_ppm(path, image: np.ndarray) -> None:
    atomic_write_bytes(path, encode_ppm(image))


def write_pgm(path, image: np.ndarray) -> None:
    atomic_write_bytes(path, encode_pgm(image))


# ---------------------------------------------------------------- truth files


def _fmt(v: Optional[float]) -> str:
    if v is None:
        return "-"
    return repr(float(v))


def format_truth(targets: Iterable[TargetTruth]) -> str:
    lines = [TRUTH_HEADER]
    for t in targets:
        lines.append(
            " ".join(_fmt(v) for v in (t.x, t.y, t.hue, t.saturation, t.value, t.orientation))
        )
    return "\n".join(lines) + "\n"


def parse_truth(text: str) -> list[TargetTruth]:
    lines = [l for l in text.splitlines() if l.strip()]
    if not lines or lines[0].split() != TRUTH_HEADER.split():
        raise FormatError(f"truth file must start with '{TRUTH_HEADER}'")
    out = []
    for no, line in enumerate(lines[1:], start=2):
        parts = line.split()
        if len(parts) != 6:
            raise FormatError(f"line {no}: expected 6 fields, got {len(parts)}")
        try:
            vals = [None if p == "-" else float(p) for p in parts]
        except ValueError as exc:
            raise FormatError(f"line {no}: {exc}") from exc
        if vals[0] is None or vals[1] is None:
            raise FormatError(f"line {no}: position is required")
        out.append(TargetTruth(*vals))
    return out


def write_truth(path, targets: Iterable[TargetTruth]) -> None:
    atomic_write_text(path, format_truth(targets))


def read_truth(path) -> list[TargetTruth]:
    return parse_truth(Path(path).read_text(encoding="utf-8"))
