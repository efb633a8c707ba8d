"""Annotated images: synthetic generation, density targets, ingestion, augmentation.

Pixel coordinates follow the pixel-centre convention: pixel ``(row i, col j)``
sits at ``(x=j, y=i)``; valid points satisfy ``0 <= x <= W-1`` and
``0 <= y <= H-1``.
"""

from __future__ import annotations

import math
import os
import re
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np

from .pnm import read_ppm, write_ppm

PathLike = Union[str, os.PathLike]

DEFAULT_SIGMA = 2.0
TRUNCATE = 4.0
ANNOTATION_FILE = "annotations.txt"

TARGET_COLOUR = np.array([0.95, 0.85, 0.20])
DISTRACTOR_COLOUR = np.array([0.20, 0.45, 0.95])


class DataError(ValueError):
    pass


class PlacementError(DataError):
    """The requested objects cannot be placed without excessive overlap."""


class AnnotationParseError(DataError):
    pass


class MissingImageError(DataError):
    pass


class OutOfBoundsError(DataError):
    pass


@dataclass
class AnnotatedImage:
    """Image ``(H, W, 3)`` in [0, 1] with ``(k, 2)`` object centres as ``(x, y)``."""

    pixels: np.ndarray
    points: np.ndarray
    name: str = ""

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64).reshape(-1, 2)
        check_points_in_bounds(self.points, self.height, self.width, self.name)

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @property
    def width(self) -> int:
        return self.pixels.shape[1]

    @property
    def true_count(self) -> int:
        return len(self.points)


def check_points_in_bounds(points: np.ndarray, h: int, w: int, name: str = "") -> None:
    x, y = points[:, 0], points[:, 1]
    bad = (x < 0) | (x > w - 1) | (y < 0) | (y > h - 1) | ~np.isfinite(points).all(axis=1)
    if bad.any():
        px, py = points[np.argmax(bad)]
        raise OutOfBoundsError(f"record {name!r}: point ({px:g}, {py:g}) lies outside the {w}x{h} image")


# ---------------------------------------------------------------------------
# synthetic data


@dataclass
class SynthSpec:
    image_size: int = 64
    count_range: Tuple[int, int] = (1, 20)
    object_radius_range: Tuple[float, float] = (2.0, 3.5)
    distractor_count_range: Tuple[int, int] = (0, 5)
    background_noise: float = 0.05
    seed: int = 0
    max_overlap: float = 0.5

    def __post_init__(self):
        self.count_range = tuple(int(v) for v in self.count_range)
        self.object_radius_range = tuple(float(v) for v in self.object_radius_range)
        self.distractor_count_range = tuple(int(v) for v in self.distractor_count_range)
        self.validate()

    def validate(self) -> None:
        for label in ("count_range", "object_radius_range", "distractor_count_range"):
            lo, hi = getattr(self, label)
            if lo > hi:
                raise DataError(f"{label}: min {lo} exceeds max {hi}")
            if lo < 0:
                raise DataError(f"{label}: negative bound {lo}")
        if self.object_radius_range[0] <= 0:
            raise DataError("object radii must be positive")
        if self.image_size < 4:
            raise DataError(f"image_size {self.image_size} too small")
        if self.background_noise < 0:
            raise DataError("background_noise must be >= 0")
        if not 0.0 <= self.max_overlap < 1.0:
            raise DataError("max_overlap must lie in [0, 1)")
        # densest packing bound for discs of the minimum allowed spacing
        r = self.object_radius_range[1] * (1.0 - self.max_overlap)
        side = self.image_size - 2 * self.object_radius_range[1]
        if self.count_range[1] * math.pi * r * r > 0.6 * max(side, 0) ** 2 + 1e-12 and self.count_range[1] > 1:
            raise PlacementError(
                f"{self.count_range[1]} objects of radius {self.object_radius_range[1]} "
                f"cannot fit in a {self.image_size}px image"
            )

    def to_dict(self) -> dict:
        return asdict(self)


def _image_rng(seed: int, index: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, index]))


def _place(rng, n, radii, size, placed, max_overlap, tries=2000):
    """Rejection-sample ``n`` centres; ``placed`` holds ``(x, y, r)`` already used."""
    out = []
    for k in range(n):
        r = radii[k]
        for _ in range(tries):
            x, y = rng.uniform(r, size - 1 - r, size=2)
            if all(math.hypot(x - px, y - py) >= (1.0 - max_overlap) * (r + pr) for px, py, pr in placed):
                placed.append((x, y, r))
                out.append((x, y, r))
                break
        else:
            return out, False
    return out, True


def render_synthetic(spec: SynthSpec, index: int) -> AnnotatedImage:
    """Render image ``index`` of the dataset defined by ``spec``."""
    rng = _image_rng(spec.seed, index)
    s = spec.image_size
    k = int(rng.integers(spec.count_range[0], spec.count_range[1] + 1))
    nd = int(rng.integers(spec.distractor_count_range[0], spec.distractor_count_range[1] + 1))
    lo, hi = spec.object_radius_range
    placed: list = []
    targets, ok = _place(rng, k, rng.uniform(lo, hi, size=k), s, placed, spec.max_overlap)
    if not ok:
        raise PlacementError(f"image {index}: could not place {k} objects in {s}x{s}")
    # distractors that do not fit are dropped; they carry no annotation
    distractors, _ = _place(rng, nd, rng.uniform(lo, hi, size=nd), s, placed, spec.max_overlap)

    yy, xx = np.mgrid[0:s, 0:s].astype(np.float64)
    img = np.full((s, s, 3), rng.uniform(0.25, 0.45))
    img += rng.normal(0.0, spec.background_noise, size=(s, s, 3))
    for x, y, r in distractors:
        alpha = np.clip(r + 0.5 - np.maximum(np.abs(xx - x), np.abs(yy - y)), 0.0, 1.0)[..., None]
        colour = DISTRACTOR_COLOUR + rng.normal(0.0, 0.03, size=3)
        img = img * (1 - alpha) + colour * alpha
    for x, y, r in targets:
        alpha = np.clip(r + 0.5 - np.hypot(xx - x, yy - y), 0.0, 1.0)[..., None]
        colour = TARGET_COLOUR + rng.normal(0.0, 0.03, size=3)
        img = img * (1 - alpha) + colour * alpha
    # quantise to 8 bits so a P6 round trip is lossless
    img = (np.rint(np.clip(img, 0.0, 1.0) * 255.0) / 255.0).astype(np.float32)
    points = np.array([(x, y) for x, y, _ in targets], dtype=np.float64).reshape(-1, 2)
    return AnnotatedImage(img, points, name=f"img{index:05d}.ppm")


def synth_generate(spec: SynthSpec, n: int, start: int = 0) -> List[AnnotatedImage]:
    """``n`` images; image ``i`` depends only on ``(spec, start + i)``."""
    spec.validate()
    return [render_synthetic(spec, start + i) for i in range(n)]


# ---------------------------------------------------------------------------
# density targets


def density_target(points, height: int, width: int, sigma: float = DEFAULT_SIGMA) -> np.ndarray:
    """Sum of per-point Gaussians, each truncated at ``4 sigma`` and the image, then renormalised to unit mass."""
    if sigma <= 0:
        raise DataError(f"sigma must be positive, got {sigma}")
    out = np.zeros((height, width), dtype=np.float64)
    rad = TRUNCATE * sigma
    reach = int(math.ceil(rad)) + 1
    for x, y in np.asarray(points, dtype=np.float64).reshape(-1, 2):
        cx, cy = int(round(x)), int(round(y))
        x0, x1 = max(cx - reach, 0), min(cx + reach, width - 1)
        y0, y1 = max(cy - reach, 0), min(cy + reach, height - 1)
        gy, gx = np.mgrid[y0:y1 + 1, x0:x1 + 1].astype(np.float64)
        d2 = (gx - x) ** 2 + (gy - y) ** 2
        g = np.where(d2 <= rad * rad, np.exp(-d2 / (2.0 * sigma * sigma)), 0.0)
        total = g.sum()
        if total <= 0:
            # point further than the truncation radius from every pixel centre cannot happen in-bounds
            raise DataError(f"point ({x}, {y}) has no mass inside the image")
        out[y0:y1 + 1, x0:x1 + 1] += g / total
    return out


def stack_dataset(records: Sequence[AnnotatedImage], sigma: float = DEFAULT_SIGMA):
    """Images ``(n, H, W, 3)`` float32, densities ``(n, H, W)`` float32, counts ``(n,)``."""
    if not records:
        raise DataError("empty dataset")
    images = np.stack([r.pixels for r in records]).astype(np.float32)
    dens = np.stack([density_target(r.points, r.height, r.width, sigma) for r in records]).astype(np.float32)
    counts = np.array([r.true_count for r in records], dtype=np.float64)
    return images, dens, counts


# ---------------------------------------------------------------------------
# annotation files

_POINT = re.compile(r"\(\s*([^,()\s]+)\s*,\s*([^,()\s]+)\s*\)")


def parse_annotation_line(line: str, lineno: int) -> Optional[Tuple[str, np.ndarray]]:
    body = line.split("#", 1)[0].strip()
    if not body:
        return None
    if ";" not in body:
        raise AnnotationParseError(f"line {lineno}: expected 'path; (x,y) ...', got {line.strip()!r}")
    path, rest = (s.strip() for s in body.split(";", 1))
    if not path:
        raise AnnotationParseError(f"line {lineno}: missing image path")
    pts = []
    pos = 0
    for m in _POINT.finditer(rest):
        if rest[pos:m.start()].strip():
            raise AnnotationParseError(f"line {lineno}: unexpected text {rest[pos:m.start()].strip()!r}")
        try:
            pts.append((float(m.group(1)), float(m.group(2))))
        except ValueError:
            raise AnnotationParseError(f"line {lineno}: bad coordinate in {m.group(0)!r}") from None
        pos = m.end()
    if rest[pos:].strip():
        raise AnnotationParseError(f"line {lineno}: unexpected text {rest[pos:].strip()!r}")
    return path, np.array(pts, dtype=np.float64).reshape(-1, 2)


def format_annotation_line(name: str, points: np.ndarray) -> str:
    pts = " ".join(f"({float(x)!r},{float(y)!r})" for x, y in np.asarray(points, dtype=np.float64).reshape(-1, 2))
    return f"{name}; {pts}".rstrip()


def resize_image(pixels: np.ndarray, size: int) -> np.ndarray:
    """Bilinear resize to ``size x size`` (half-pixel centres)."""
    h, w, _ = pixels.shape

    def axis(n_in):
        pos = np.clip((np.arange(size) + 0.5) * n_in / size - 0.5, 0, n_in - 1)
        i0 = np.floor(pos).astype(int)
        i1 = np.minimum(i0 + 1, n_in - 1)
        return i0, i1, pos - i0

    y0, y1, fy = axis(h)
    x0, x1, fx = axis(w)
    top = pixels[y0][:, x0] * (1 - fx)[None, :, None] + pixels[y0][:, x1] * fx[None, :, None]
    bot = pixels[y1][:, x0] * (1 - fx)[None, :, None] + pixels[y1][:, x1] * fx[None, :, None]
    return (top * (1 - fy)[:, None, None] + bot * fy[:, None, None]).astype(np.float32)


def ingest_annotations(image_dir: PathLike, annotation_file: PathLike,
                       input_size: Optional[int] = None) -> List[AnnotatedImage]:
    """Load point-annotated P6 images listed in ``annotation_file``.

    Images are resized to ``input_size`` (if given) with points mapped
    accordingly.
    """
    image_dir = Path(image_dir)
    records = []
    with open(annotation_file, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            parsed = parse_annotation_line(line, lineno)
            if parsed is None:
                continue
            name, pts = parsed
            path = image_dir / name
            if not path.is_file():
                raise MissingImageError(f"line {lineno}: image {str(path)!r} not found")
            pixels = read_ppm(path)
            h, w, _ = pixels.shape
            check_points_in_bounds(pts, h, w, name)
            if input_size is not None and (h, w) != (input_size, input_size):
                pixels = resize_image(pixels, input_size)
                pts = pts.copy()
                pts[:, 0] = np.clip((pts[:, 0] + 0.5) * input_size / w - 0.5, 0, input_size - 1)
                pts[:, 1] = np.clip((pts[:, 1] + 0.5) * input_size / h - 0.5, 0, input_size - 1)
            records.append(AnnotatedImage(pixels, pts, name=name))
    return records


def write_dataset(directory: PathLike, records: Iterable[AnnotatedImage]) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    lines = []
    for r in records:
        write_ppm(directory / r.name, r.pixels)
        lines.append(format_annotation_line(r.name, r.points))
    ann = directory / ANNOTATION_FILE
    ann.write_text("".join(line + "\n" for line in lines), encoding="utf-8")
    return ann


def load_dataset(directory: PathLike, input_size: Optional[int] = None) -> List[AnnotatedImage]:
    directory = Path(directory)
    return ingest_annotations(directory, directory / ANNOTATION_FILE, input_size)


# ---------------------------------------------------------------------------
# augmentation

AUGMENT_OPS = ("hflip", "vflip", "crop")


def hflip(img: AnnotatedImage) -> AnnotatedImage:
    pts = img.points.copy()
    pts[:, 0] = img.width - 1 - pts[:, 0]
    return AnnotatedImage(img.pixels[:, ::-1].copy(), pts, img.name)


def vflip(img: AnnotatedImage) -> AnnotatedImage:
    pts = img.points.copy()
    pts[:, 1] = img.height - 1 - pts[:, 1]
    return AnnotatedImage(img.pixels[::-1].copy(), pts, img.name)


def crop(img: AnnotatedImage, top: int, left: int, height: int, width: int) -> AnnotatedImage:
    if height <= 0 or width <= 0:
        raise DataError(f"degenerate crop {height}x{width}")
    if top < 0 or left < 0 or top + height > img.height or left + width > img.width:
        raise DataError(f"crop ({top}, {left}, {height}, {width}) exceeds the {img.width}x{img.height} image")
    pts = img.points - np.array([left, top], dtype=np.float64)
    keep = (pts[:, 0] >= 0) & (pts[:, 0] <= width - 1) & (pts[:, 1] >= 0) & (pts[:, 1] <= height - 1)
    return AnnotatedImage(img.pixels[top:top + height, left:left + width].copy(), pts[keep], img.name)


def augment(img: AnnotatedImage, ops: Sequence[str], seed: int = 0,
            crop_box: Optional[Tuple[int, int, int, int]] = None,
            crop_size: Optional[Tuple[int, int]] = None) -> AnnotatedImage:
    """Apply ``ops`` in order.

    ``crop`` uses ``crop_box = (top, left, height, width)`` if given, else a
    seeded random placement of ``crop_size`` (default three quarters of each side).
    """
    rng = np.random.default_rng(seed)
    for op in ops:
        if op == "hflip":
            img = hflip(img)
        elif op == "vflip":
            img = vflip(img)
        elif op == "crop":
            if crop_box is None:
                ch, cw = crop_size or (img.height * 3 // 4, img.width * 3 // 4)
                if ch <= 0 or cw <= 0:
                    raise DataError(f"degenerate crop {ch}x{cw}")
                top = int(rng.integers(0, img.height - ch + 1)) if ch <= img.height else -1
                left = int(rng.integers(0, img.width - cw + 1)) if cw <= img.width else -1
                img = crop(img, top, left, ch, cw)
            else:
                img = crop(img, *crop_box)
        else:
            raise DataError(f"unknown augmentation {op!r}; expected one of {AUGMENT_OPS}")
    return img


__all__ = [
    "AnnotatedImage",
    "SynthSpec",
    "synth_generate",
    "render_synthetic",
    "density_target",
    "stack_dataset",
    "ingest_annotations",
    "parse_annotation_line",
    "format_annotation_line",
    "write_dataset",
    "load_dataset",
    "augment",
    "hflip",
    "vflip",
    "crop",
]
