"""Input validation for image batches and count targets."""

from __future__ import annotations

from typing import Optional

import numpy as np
from sklearn.utils.validation import check_array

from .data import check_points_in_bounds, density_target


def check_images(X, input_size: Optional[int] = None) -> np.ndarray:
    """Validate a batch of RGB images and return it as float32 ``(n, H, W, 3)``.

    Pixel values must lie in ``[0, 1]``; ``input_size`` additionally pins
    ``H == W == input_size``.
    """
    X = check_array(X, allow_nd=True, dtype=np.float32, ensure_all_finite=True, ensure_min_samples=1)
    if X.ndim != 4 or X.shape[-1] != 3:
        raise ValueError(f"expected images of shape (n, H, W, 3), got {X.shape}")
    if X.shape[1] != X.shape[2]:
        raise ValueError(f"images must be square, got {X.shape[1]}x{X.shape[2]}")
    if input_size is not None and X.shape[1] != input_size:
        raise ValueError(f"images are {X.shape[1]}px but the model expects {input_size}px")
    if X.min() < 0.0 or X.max() > 1.0:
        raise ValueError("pixel values must lie in [0, 1]")
    return X


def check_targets(y, n: int, height: int, width: int, sigma: float) -> np.ndarray:
    """Turn count targets into float32 density maps ``(n, H, W)``.

    ``y`` is either an array of density maps or a sequence of ``(k, 2)`` point
    arrays (object centres as ``(x, y)``).
    """
    if isinstance(y, np.ndarray) and y.ndim == 3 and y.dtype != object:
        if y.shape != (n, height, width):
            raise ValueError(f"density targets {y.shape} do not match images ({n}, {height}, {width})")
        if not np.isfinite(y).all() or y.min() < 0:
            raise ValueError("density targets must be finite and nonnegative")
        return y.astype(np.float32)
    y = list(y)
    if len(y) != n:
        raise ValueError(f"got {len(y)} point sets for {n} images")
    out = np.empty((n, height, width), dtype=np.float32)
    for i, pts in enumerate(y):
        pts = np.asarray(pts, dtype=np.float64).reshape(-1, 2)
        check_points_in_bounds(pts, height, width, f"target {i}")
        out[i] = density_target(pts, height, width, sigma)
    return out
