"""Synthetic thin-structure segmentation data.

Each sample is a textured scene containing one prompted object built from a
few blobs, always decorated with hair-thin protrusions (1-3 px wide) and
sometimes interior holes, over a low-frequency background with distractor
shapes. Prompts are intentionally degraded: an outward-jittered box, a few
interior points, and a morphologically corrupted coarse mask.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from . import metrics
from . import tensor as T
from .tensor import Tensor


@dataclass
class GeoConfig:
    resolution: int = 128
    n_shapes: tuple = (1, 3)
    protrusions_per_shape: tuple = (1, 3)
    protrusion_width: tuple = (1, 3)
    protrusion_length: tuple = (10, 30)
    hole_prob: float = 0.5
    n_distractors: tuple = (1, 3)
    n_points: tuple = (1, 3)
    box_jitter: float = 0.05
    coarse_radius: tuple = (1, 3)
    coarse_shift: int = 3
    pixel_noise: float = 0.02
    dilation_d: int = 3


@dataclass
class Sample:
    image: np.ndarray  # (3, H, W) float32 in [0, 1]
    gt_mask: np.ndarray  # (H, W) bool
    gt_uncertain: np.ndarray  # (H, W) bool
    points: list  # [(x, y, label)]
    box: tuple  # (x0, y0, x1, y1)
    coarse_mask: np.ndarray  # (H, W) bool


def _grid(res):
    ys, xs = np.meshgrid(np.arange(res), np.arange(res), indexing="ij")
    return xs.astype(np.float64), ys.astype(np.float64)


def _ellipse(res, rng, center, radii):
    xs, ys = _grid(res)
    cx, cy = center
    a, b = radii
    theta = rng.uniform(0, np.pi)
    dx, dy = xs - cx, ys - cy
    u = dx * np.cos(theta) + dy * np.sin(theta)
    v = -dx * np.sin(theta) + dy * np.cos(theta)
    return (u / a) ** 2 + (v / b) ** 2 <= 1.0


def _polygon(res, rng, center, radius):
    n = rng.integers(5, 9)
    angles = np.sort(rng.uniform(0, 2 * np.pi, size=n))
    radii = rng.uniform(0.5, 1.0, size=n) * radius
    vx = center[0] + radii * np.cos(angles)
    vy = center[1] + radii * np.sin(angles)
    xs, ys = _grid(res)
    inside = np.zeros((res, res), dtype=bool)
    for i in range(n):
        x1, y1 = vx[i], vy[i]
        x2, y2 = vx[(i + 1) % n], vy[(i + 1) % n]
        if y1 == y2:
            continue
        crosses = (y1 > ys) != (y2 > ys)
        xint = x1 + (ys - y1) * (x2 - x1) / (y2 - y1)
        inside ^= crosses & (xs < xint)
    return inside


def _stamp_stroke(mask, pts, width):
    """Rasterize a polyline of float points as a width-px stroke."""
    res = mask.shape[0]
    r0 = (width - 1) // 2
    r1 = width // 2
    for x, y in pts:
        xi, yi = int(round(x)), int(round(y))
        x0, x1 = max(0, xi - r0), min(res, xi + r1 + 1)
        y0, y1 = max(0, yi - r0), min(res, yi + r1 + 1)
        if x0 < x1 and y0 < y1:
            mask[y0:y1, x0:x1] = True


def _add_protrusion(mask, rng, geo):
    res = mask.shape[0]
    border = metrics.boundary_pixels(mask) & mask
    cand = np.argwhere(border)
    if len(cand) == 0:
        return
    y0, x0 = cand[rng.integers(len(cand))]
    cy, cx = np.argwhere(mask).mean(axis=0)
    base = np.arctan2(y0 - cy, x0 - cx) + rng.uniform(-0.6, 0.6)
    length = rng.uniform(*geo.protrusion_length)
    width = int(rng.integers(geo.protrusion_width[0], geo.protrusion_width[1] + 1))
    ex = x0 + length * np.cos(base)
    ey = y0 + length * np.sin(base)
    # quadratic bezier with a sideways bend for kite-string curvature
    bend = rng.uniform(-0.35, 0.35) * length
    mx = (x0 + ex) / 2 - bend * np.sin(base)
    my = (y0 + ey) / 2 + bend * np.cos(base)
    ts = np.linspace(0, 1, max(8, int(3 * length)))
    px = (1 - ts) ** 2 * x0 + 2 * ts * (1 - ts) * mx + ts**2 * ex
    py = (1 - ts) ** 2 * y0 + 2 * ts * (1 - ts) * my + ts**2 * ey
    keep = (px >= 0) & (px < res) & (py >= 0) & (py < res)
    _stamp_stroke(mask, zip(px[keep], py[keep]), width)


def _random_blob(res, rng, center_range, radius_range):
    center = rng.uniform(*center_range, size=2)
    if rng.random() < 0.5:
        radii = rng.uniform(*radius_range, size=2)
        return _ellipse(res, rng, center, radii)
    return _polygon(res, rng, center, rng.uniform(*radius_range))


def _low_freq(res, rng, cells=8, lo=0.0, hi=1.0):
    small = rng.uniform(lo, hi, size=(cells, cells)).astype(np.float32)
    return T.bilinear_upsample(Tensor(small), res // cells).data


def _geometry(rng, geo):
    res = geo.resolution
    mask = np.zeros((res, res), dtype=bool)
    n_shapes = int(rng.integers(geo.n_shapes[0], geo.n_shapes[1] + 1))
    anchor = rng.uniform(0.3 * res, 0.7 * res, size=2)
    for _ in range(n_shapes):
        center = np.clip(anchor + rng.uniform(-0.15 * res, 0.15 * res, size=2), 12, res - 12)
        blob = _random_blob(res, rng, (center.min(), center.max()), (8, 0.18 * res))
        if not blob.any():
            continue
        mask |= blob
    if not mask.any():
        return None
    for _ in range(n_shapes):
        for _ in range(int(rng.integers(geo.protrusions_per_shape[0], geo.protrusions_per_shape[1] + 1))):
            _add_protrusion(mask, rng, geo)
    if rng.random() < geo.hole_prob:
        interior = metrics.erode(mask, 4)
        cand = np.argwhere(interior)
        if len(cand):
            y, x = cand[rng.integers(len(cand))]
            hole = _ellipse(res, rng, (x, y), rng.uniform(2, 6, size=2))
            mask &= ~hole
    fg = mask.sum()
    if fg < 32 or fg > 0.6 * res * res:
        return None
    return mask


def _render(rng, geo, mask):
    res = geo.resolution
    image = np.stack([_low_freq(res, rng, 8, 0.1, 0.9) for _ in range(3)])
    bg_mean = image.mean(axis=(1, 2))
    obj_color = np.clip(bg_mean + np.where(bg_mean > 0.5, -1, 1) * rng.uniform(0.3, 0.55, 3), 0, 1)
    texture = np.stack([_low_freq(res, rng, 16, -0.08, 0.08) for _ in range(3)])
    for c in range(3):
        image[c][mask] = obj_color[c] + texture[c][mask]

    n_distract = int(rng.integers(geo.n_distractors[0], geo.n_distractors[1] + 1))
    for _ in range(n_distract):
        blob = _random_blob(res, rng, (0.1 * res, 0.9 * res), (5, 0.12 * res))
        blob &= ~mask
        color = np.clip(rng.uniform(0, 1, 3), 0, 1)
        for c in range(3):
            image[c][blob] = color[c] + texture[c][blob]

    image += rng.normal(0, geo.pixel_noise, size=image.shape)
    return np.clip(image, 0, 1).astype(np.float32)


def _degrade_prompts(rng, geo, mask):
    res = geo.resolution
    ys, xs = np.nonzero(mask)
    x0, x1 = xs.min(), xs.max()
    y0, y1 = ys.min(), ys.max()
    bw, bh = x1 - x0 + 1, y1 - y0 + 1
    jit = geo.box_jitter
    box = (
        max(0.0, x0 - rng.uniform(0, jit) * bw),
        max(0.0, y0 - rng.uniform(0, jit) * bh),
        min(float(res), x1 + 1 + rng.uniform(0, jit) * bw),
        min(float(res), y1 + 1 + rng.uniform(0, jit) * bh),
    )

    interior = metrics.erode(mask, 1)
    cand = np.argwhere(interior if interior.any() else mask)
    k = int(rng.integers(geo.n_points[0], geo.n_points[1] + 1))
    picks = cand[rng.integers(len(cand), size=k)]
    points = [(float(x), float(y), 1) for y, x in picks]

    r = int(rng.integers(geo.coarse_radius[0], geo.coarse_radius[1] + 1))
    coarse = metrics.erode(mask, r) if rng.random() < 0.5 else metrics.dilate(mask, r)
    if geo.coarse_shift:
        dy, dx = rng.integers(-geo.coarse_shift, geo.coarse_shift + 1, size=2)
        coarse = _shift2d(coarse, int(dy), int(dx))
    if not coarse.any():
        coarse = metrics.dilate(mask, 1)
    return points, box, coarse


def _shift2d(mask, dy, dx):
    out = np.zeros_like(mask)
    h, w = mask.shape
    ys = slice(max(0, dy), min(h, h + dy))
    xs = slice(max(0, dx), min(w, w + dx))
    ys_src = slice(max(0, -dy), min(h, h - dy))
    xs_src = slice(max(0, -dx), min(w, w - dx))
    out[ys, xs] = mask[ys_src, xs_src]
    return out


def generate_sample(seed_seq, geo):
    rng = np.random.default_rng(seed_seq)
    for _ in range(64):
        mask = _geometry(rng, geo)
        if mask is not None:
            break
    else:
        raise RuntimeError("could not generate non-degenerate geometry in 64 attempts")
    image = _render(rng, geo, mask)
    points, box, coarse = _degrade_prompts(rng, geo, mask)
    return Sample(
        image=image,
        gt_mask=mask,
        gt_uncertain=metrics.boundary_dilate(mask, geo.dilation_d),
        points=points,
        box=box,
        coarse_mask=coarse,
    )


def generate_dataset(n, geo=None, seed=0):
    """n samples, bit-reproducible for a given (seed, geo)."""
    if n < 1:
        raise ValueError(f"need n >= 1 samples, got {n}")
    geo = geo if geo is not None else GeoConfig()
    return [generate_sample(np.random.SeedSequence([seed, i]), geo) for i in range(n)]


def has_thin_structure(mask, min_pixels=12):
    """True when removing everything wider than ~3 px leaves a real residue.

    Opening with a Chebyshev radius-2 square erases structures up to three
    or four pixels wide; a residue bigger than corner rounding indicates a
    genuinely thin part.
    """
    m = np.asarray(mask, dtype=bool)
    opened = metrics.dilate(metrics.erode(m, 2), 2)
    return int((m & ~opened).sum()) >= min_pixels


# --------------------------------------------------------------------------
# disk format: PNG triples plus a JSON prompt sidecar per sample

def _write_png(path, array, rgb=False):
    if rgb:
        arr = (np.asarray(array) * 255).round().astype(np.uint8).transpose(1, 2, 0)
        Image.fromarray(arr, mode="RGB").save(path)
    else:
        arr = (np.asarray(array, dtype=np.uint8) * 255)
        Image.fromarray(arr, mode="L").save(path)


def save_dataset(samples, out_dir):
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for i, s in enumerate(samples):
        stem = out / f"sample_{i:05d}"
        _write_png(f"{stem}.png", s.image, rgb=True)
        _write_png(f"{stem}_mask.png", s.gt_mask)
        _write_png(f"{stem}_coarse.png", s.coarse_mask)
        prompts = {
            "points": [[float(x), float(y), int(l)] for x, y, l in s.points],
            "box": [float(v) for v in s.box],
        }
        with open(f"{stem}.json", "w", encoding="utf-8") as fh:
            json.dump(prompts, fh, sort_keys=True, separators=(",", ":"))
            fh.write("\n")


def load_dataset(data_dir, dilation_d=3):
    data = Path(data_dir)
    stems = sorted(p.stem for p in data.glob("sample_*.png") if not p.stem.endswith(("_mask", "_coarse")))
    if not stems:
        raise FileNotFoundError(f"no samples found under {data}")
    samples = []
    for stem in stems:
        image = np.asarray(Image.open(data / f"{stem}.png"), dtype=np.float32) / 255.0
        image = image.transpose(2, 0, 1)
        gt = np.asarray(Image.open(data / f"{stem}_mask.png")) > 127
        coarse = np.asarray(Image.open(data / f"{stem}_coarse.png")) > 127
        with open(data / f"{stem}.json", encoding="utf-8") as fh:
            prompts = json.load(fh)
        samples.append(
            Sample(
                image=image,
                gt_mask=gt,
                gt_uncertain=metrics.boundary_dilate(gt, dilation_d),
                points=[(p[0], p[1], int(p[2])) for p in prompts["points"]],
                box=tuple(prompts["box"]),
                coarse_mask=coarse,
            )
        )
    return samples
