"""Mask boundary overlays: prediction in green, ground truth in blue."""
from __future__ import annotations

import numpy as np
from scipy import ndimage

GREEN = (0, 255, 0)
BLUE = (0, 0, 255)


def boundary(mask: np.ndarray) -> np.ndarray:
    """Inner boundary: mask pixels with at least one 4-neighbour outside the mask."""
    m = np.asarray(mask).reshape(mask.shape[0], mask.shape[1]) != 0
    return m & ~ndimage.binary_erosion(m, border_value=0)


def render_overlay(image: np.ndarray, gt_mask: np.ndarray, pred_mask: np.ndarray) -> np.ndarray:
    """Draw both boundaries on an 8-bit RGB image.

    Pixels on both boundaries get green and blue at once (cyan), so each
    boundary stays recoverable from its own channel.
    """
    out = np.array(image, dtype=np.uint8, copy=True)
    if out.ndim == 2:
        out = np.repeat(out[..., None], 3, axis=-1)
    if gt_mask.shape[:2] != out.shape[:2] or pred_mask.shape[:2] != out.shape[:2]:
        raise ValueError("masks and image must share height and width")
    gt_b, pred_b = boundary(gt_mask), boundary(pred_mask)
    out[gt_b] = BLUE
    out[pred_b, 0] = 0
    out[pred_b, 1] = 255
    out[pred_b & ~gt_b, 2] = 0
    return out


def drawn_boundaries(rendered: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Recover (green, blue) boundary pixel sets from a rendered overlay."""
    r, g, b = (rendered[..., k].astype(int) for k in range(3))
    green = (r == 0) & (g == 255)
    blue = (r == 0) & (b == 255) & ((g == 0) | green)
    return green, blue
