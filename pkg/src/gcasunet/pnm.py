"""Minimal readers/writers for binary PPM (P6) and plain PGM (P2)."""

from __future__ import annotations

import os
import re
from typing import Optional, Tuple, Union

import numpy as np

PathLike = Union[str, os.PathLike]


class PNMError(ValueError):
    pass


def write_ppm(path: PathLike, pixels: np.ndarray) -> None:
    """Write ``(H, W, 3)`` floats in [0, 1] as 8-bit P6."""
    pixels = np.asarray(pixels)
    if pixels.ndim != 3 or pixels.shape[2] != 3:
        raise PNMError(f"expected (H, W, 3) pixels, got {pixels.shape}")
    h, w, _ = pixels.shape
    data = np.clip(np.rint(pixels * 255.0), 0, 255).astype(np.uint8)
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        fh.write(data.tobytes())


def _header_tokens(blob: bytes, n: int) -> Tuple[list, int]:
    """First ``n`` whitespace-separated header tokens, skipping ``#`` comments."""
    tokens, comments, pos = [], [], 0
    while len(tokens) < n:
        while pos < len(blob) and blob[pos:pos + 1].isspace():
            pos += 1
        if pos >= len(blob):
            raise PNMError("truncated header")
        if blob[pos:pos + 1] == b"#":
            end = blob.find(b"\n", pos)
            end = len(blob) if end < 0 else end
            comments.append(blob[pos + 1:end].decode("ascii", "replace").strip())
            pos = end
            continue
        m = re.match(rb"\S+", blob[pos:])
        tokens.append(m.group(0).decode("ascii"))
        pos += m.end()
    return tokens + [comments], pos


def read_ppm(path: PathLike) -> np.ndarray:
    """Read a P6 file to ``(H, W, 3)`` floats in [0, 1]."""
    with open(path, "rb") as fh:
        blob = fh.read()
    (magic, w, h, maxval, _), pos = _header_tokens(blob, 4)
    if magic != "P6":
        raise PNMError(f"{path}: not a P6 file")
    w, h, maxval = int(w), int(h), int(maxval)
    if maxval != 255:
        raise PNMError(f"{path}: only maxval 255 is supported")
    pos += 1
    data = np.frombuffer(blob[pos:pos + w * h * 3], dtype=np.uint8)
    if data.size != w * h * 3:
        raise PNMError(f"{path}: pixel data truncated")
    return data.reshape(h, w, 3).astype(np.float32) / 255.0


def write_pgm_density(path: PathLike, density: np.ndarray, maxval: int = 65535) -> float:
    """Write a nonnegative map as P2, quantised to ``maxval`` with a per-file scale.

    The scale is stored in a ``# scale=`` header comment; ``value * scale``
    recovers the density. Returns the scale.
    """
    density = np.asarray(density, dtype=np.float64)
    if density.ndim != 2:
        raise PNMError(f"expected a 2-D map, got {density.shape}")
    peak = float(density.max(initial=0.0))
    scale = peak / maxval if peak > 0 else 1.0
    q = np.clip(np.rint(density / scale), 0, maxval).astype(np.int64)
    h, w = density.shape
    lines = ["P2", f"# scale={scale!r}", f"{w} {h}", str(maxval)]
    lines += [" ".join(str(v) for v in row) for row in q]
    with open(path, "w", encoding="ascii") as fh:
        fh.write("\n".join(lines) + "\n")
    return scale


def read_pgm(path: PathLike) -> Tuple[np.ndarray, Optional[float]]:
    """Read a P2 file; returns the integer grid and the ``scale`` comment if present."""
    with open(path, "rb") as fh:
        blob = fh.read()
    (magic, w, h, maxval, comments), pos = _header_tokens(blob, 4)
    if magic != "P2":
        raise PNMError(f"{path}: not a P2 file")
    w, h = int(w), int(h)
    values = np.array(blob[pos:].split(), dtype=np.int64)
    if values.size != w * h:
        raise PNMError(f"{path}: expected {w * h} values, found {values.size}")
    scale = None
    for c in comments:
        if c.startswith("scale="):
            scale = float(c.split("=", 1)[1])
    return values.reshape(h, w), scale
