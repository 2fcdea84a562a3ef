"""Segmentation quality metrics: Dice overlap and average surface distance.

Both are defined so a brute-force oracle can verify them: Dice by set
counting, ASD by all-pairs nearest-boundary distances. ASD uses the
symmetric variant with 4-connectivity boundaries; image borders count as
background, so a foreground pixel on the edge is boundary.
"""

from __future__ import annotations

import numpy as np

from .errors import ShapeError, UndefinedMetricError


def _as_mask(arr, name: str) -> np.ndarray:
    mask = np.asarray(arr)
    if mask.ndim != 2:
        raise ShapeError(f"{name} must be 2D, got shape {mask.shape}")
    return mask.astype(bool)


def dice(pred, gt) -> float:
    """2|P intersect G| / (|P| + |G|); two empty masks count as a perfect 1.0."""
    p = _as_mask(pred, "pred")
    g = _as_mask(gt, "gt")
    if p.shape != g.shape:
        raise ShapeError(f"mask shapes differ: {p.shape} vs {g.shape}")
    denom = int(p.sum()) + int(g.sum())
    if denom == 0:
        return 1.0
    return 2.0 * int((p & g).sum()) / denom


def boundary_mask(mask) -> np.ndarray:
    """Foreground pixels with at least one 4-neighbor background or off-image."""
    m = _as_mask(mask, "mask")
    padded = np.zeros((m.shape[0] + 2, m.shape[1] + 2), dtype=bool)
    padded[1:-1, 1:-1] = m
    interior = (
        padded[:-2, 1:-1] & padded[2:, 1:-1] & padded[1:-1, :-2] & padded[1:-1, 2:]
    )
    return m & ~interior


def asd(pred, gt) -> float:
    """Symmetric average surface distance in pixels.

    (sum of nearest-boundary distances P->G plus G->P) / (|bP| + |bG|).
    Raises UndefinedMetricError when either mask is empty; callers that need
    a finite batch statistic substitute their own sentinel.
    """
    p = _as_mask(pred, "pred")
    g = _as_mask(gt, "gt")
    if p.shape != g.shape:
        raise ShapeError(f"mask shapes differ: {p.shape} vs {g.shape}")
    if not p.any() or not g.any():
        raise UndefinedMetricError("asd undefined for an empty mask")

    bp = np.argwhere(boundary_mask(p)).astype(np.float64)
    bg = np.argwhere(boundary_mask(g)).astype(np.float64)
    # all-pairs distances; boundaries are small (O(H+W) pixels) so this is fine
    d2 = ((bp[:, None, :] - bg[None, :, :]) ** 2).sum(axis=2)
    d = np.sqrt(d2)
    total = d.min(axis=1).sum() + d.min(axis=0).sum()
    return float(total / (len(bp) + len(bg)))
