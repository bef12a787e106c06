"""Visualization artifacts: intermediate masks, sampling reference map, and
the input image with mined points overlaid."""

from __future__ import annotations

from pathlib import Path

import numpy as np
from PIL import Image

from . import metrics, positional, sampler as sampler_mod


def _to_u8(gray):
    arr = np.asarray(gray, dtype=np.float64)
    return np.clip(arr * 255, 0, 255).round().astype(np.uint8)


def _upscale_nearest(gray, target):
    k = target // gray.shape[0]
    return np.repeat(np.repeat(gray, k, axis=0), k, axis=1)


def _save_gray(path, gray, target=None):
    arr = np.asarray(gray, dtype=np.float64)
    if target is not None and arr.shape[0] != target:
        arr = _upscale_nearest(arr, target)
    Image.fromarray(_to_u8(arr), mode="L").save(path)


def _normalize_signed(phi):
    peak = np.abs(phi).max()
    if peak <= 0:
        return np.full_like(phi, 0.5)
    return 0.5 + phi / (2 * peak)


POSITIVE_COLOR = (40, 90, 255)  # blue
NEGATIVE_COLOR = (40, 220, 90)  # green


def draw_points(image, cells, grid_hw, color, canvas=None, radius=2):
    """Stamp colored squares at grid-cell centers on an (3,H,W) image."""
    h_img = image.shape[1]
    out = canvas if canvas is not None else (image * 255).round().astype(np.uint8).transpose(1, 2, 0).copy()
    gh, gw = grid_hw
    for flat in cells:
        cx, cy = positional.cell_center(flat, gh, gw)
        px, py = int(cx * h_img), int(cy * h_img)
        y0, y1 = max(0, py - radius), min(h_img, py + radius + 1)
        x0, x1 = max(0, px - radius), min(h_img, px + radius + 1)
        out[y0:y1, x0:x1] = color
    return out


def uncertain_band_ratio(m_u_grid, gt_mask, d):
    """Fraction of confident uncertainty cells that sit in the dilated
    ground-truth boundary band (pooled to the prediction grid)."""
    m_u = np.asarray(m_u_grid)
    band = metrics.boundary_dilate(gt_mask, d)
    k = gt_mask.shape[0] // m_u.shape[0]
    pooled = metrics.maxpool_binary(band, k)
    hot = m_u > 0.5
    if hot.sum() == 0:
        return 0.0
    return float((hot & pooled).sum() / hot.sum())


def write_visualization(out_dir, sample, output):
    """Write the six inspection PNGs for one model output; returns the paths."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    res = sample.gt_mask.shape[0]
    inter = output.intermediates
    masks = inter.masks

    paths = {
        "m_gt": out / "m_gt.png",
        "m_pa": out / "m_pa.png",
        "m_c": out / "m_c.png",
        "m_u": out / "m_u.png",
        "phi0": out / "phi0.png",
        "points": out / "points.png",
    }
    _save_gray(paths["m_gt"], sample.gt_mask.astype(np.float64))
    _save_gray(paths["m_pa"], masks.m_pa.data, target=res)
    _save_gray(paths["m_c"], masks.m_c.data, target=res)
    _save_gray(paths["m_u"], masks.m_u.data, target=res)

    grid = masks.m_u.data.shape
    phi0 = masks.m_u.data * (masks.m_r.data - masks.m_c.data)
    _save_gray(paths["phi0"], _normalize_signed(phi0), target=res)
    pos_state = inter.sampler_states.get(sampler_mod.POSITIVE)

    canvas = (sample.image * 255).round().astype(np.uint8).transpose(1, 2, 0).copy()
    if pos_state is not None:
        canvas = draw_points(sample.image, pos_state.selected, grid, POSITIVE_COLOR, canvas)
    neg_state = inter.sampler_states.get(sampler_mod.NEGATIVE)
    if neg_state is not None:
        canvas = draw_points(sample.image, neg_state.selected, grid, NEGATIVE_COLOR, canvas)
    Image.fromarray(canvas, mode="RGB").save(paths["points"])
    return paths
