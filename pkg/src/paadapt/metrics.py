"""Binary mask morphology and the IoU / boundary-IoU evaluation metrics.

Conventions (shared with the brute-force oracles in the test suite):
pixels outside the image count as background, boundaries are 4-adjacency
disagreements seen from both sides, and dilation uses Chebyshev distance.
"""

from __future__ import annotations

import numpy as np


def _as_bool(mask):
    return np.asarray(mask, dtype=bool).reshape(np.asarray(mask).shape[-2:])


def _shift_or(mask, neighborhood):
    """OR of the mask over the given (dy, dx) offsets, zero-filled borders."""
    h, w = mask.shape
    padded = np.zeros((h + 2, w + 2), dtype=bool)
    padded[1:-1, 1:-1] = mask
    out = np.zeros_like(mask)
    for dy, dx in neighborhood:
        out |= padded[1 + dy : 1 + dy + h, 1 + dx : 1 + dx + w]
    return out

_N4 = ((-1, 0), (1, 0), (0, -1), (0, 1))
_N8 = _N4 + ((-1, -1), (-1, 1), (1, -1), (1, 1))


def boundary_pixels(mask):
    """Foreground pixels 4-adjacent to background (off-image counts as
    background) plus background pixels 4-adjacent to foreground."""
    m = _as_bool(mask)
    h, w = m.shape
    padded = np.zeros((h + 2, w + 2), dtype=bool)
    padded[1:-1, 1:-1] = m
    fg_next_to_bg = np.zeros_like(m)
    for dy, dx in _N4:
        fg_next_to_bg |= ~padded[1 + dy : 1 + dy + h, 1 + dx : 1 + dx + w]
    out = (m & fg_next_to_bg) | (~m & _shift_or(m, _N4))
    return out


def dilate(mask, d):
    """Chebyshev dilation by radius d (d iterations of the 3x3 OR)."""
    out = _as_bool(mask).copy()
    for _ in range(int(d)):
        out = out | _shift_or(out, _N8)
    return out


def erode(mask, d):
    m = _as_bool(mask)
    return ~dilate(~m, d)


def boundary_dilate(mask, d):
    """All pixels within Chebyshev distance d of a boundary pixel."""
    if d < 1:
        raise ValueError(f"dilation radius must be >= 1, got {d}")
    return dilate(boundary_pixels(mask), d)


def iou(pred, gt):
    """Intersection over union; two empty masks count as a perfect match."""
    p, g = _as_bool(pred), _as_bool(gt)
    union = (p | g).sum()
    if union == 0:
        return 1.0
    return float((p & g).sum() / union)


def default_boundary_radius(shape):
    """2% of the image diagonal, at least one pixel."""
    h, w = shape[-2:]
    return max(1, int(round(0.02 * np.hypot(h, w))))


def boundary_iou(pred, gt, d=None):
    """IoU restricted to the band within distance d of either mask's boundary."""
    p, g = _as_bool(pred), _as_bool(gt)
    if d is None:
        d = default_boundary_radius(p.shape)
    band = dilate(boundary_pixels(p), d) | dilate(boundary_pixels(g), d)
    union = (p | g) & band
    if union.sum() == 0:
        return 1.0
    return float(((p & g) & band).sum() / union.sum())


def mean_iou(pairs):
    vals = [iou(p, g) for p, g in pairs]
    return float(np.mean(vals)) if vals else 0.0


def mean_boundary_iou(pairs, d=None):
    vals = [boundary_iou(p, g, d) for p, g in pairs]
    return float(np.mean(vals)) if vals else 0.0


def maxpool_binary(mask, k):
    """Max-pool a binary mask by an integer factor (keeps thin structures)."""
    m = _as_bool(mask)
    h, w = m.shape
    if h % k or w % k:
        raise ValueError(f"mask dims {h}x{w} not divisible by pool factor {k}")
    return m.reshape(h // k, k, w // k, k).any(axis=(1, 3))
