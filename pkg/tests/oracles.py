"""Independent brute-force references used to check the package's fast paths.

Everything here is written with explicit nested loops and no shared helpers
from the package, so a bug cannot cancel between implementation and check.
"""

import numpy as np


def conv2d_reference(x, kernel, bias=None, stride=1, padding=0):
    cin, h, w = x.shape
    cout, _, kh, kw = kernel.shape
    hp, wp = h + 2 * padding, w + 2 * padding
    xp = np.zeros((cin, hp, wp), dtype=np.float64)
    xp[:, padding : padding + h, padding : padding + w] = x
    ho = (hp - kh) // stride + 1
    wo = (wp - kw) // stride + 1
    out = np.zeros((cout, ho, wo), dtype=np.float64)
    for co in range(cout):
        for oy in range(ho):
            for ox in range(wo):
                acc = 0.0
                for ci in range(cin):
                    for dy in range(kh):
                        for dx in range(kw):
                            acc += xp[ci, oy * stride + dy, ox * stride + dx] * kernel[co, ci, dy, dx]
                out[co, oy, ox] = acc + (bias[co] if bias is not None else 0.0)
    return out


def sobel_reference(gray):
    kx = [[-1, 0, 1], [-2, 0, 2], [-1, 0, 1]]
    h, w = gray.shape
    out = np.zeros((h, w), dtype=np.float64)
    for y in range(h):
        for x in range(w):
            gx = gy = 0.0
            for dy in (-1, 0, 1):
                for dx in (-1, 0, 1):
                    yy = min(max(y + dy, 0), h - 1)
                    xx = min(max(x + dx, 0), w - 1)
                    gx += kx[dy + 1][dx + 1] * gray[yy, xx]
                    gy += kx[dx + 1][dy + 1] * gray[yy, xx]
            out[y, x] = np.sqrt(gx * gx + gy * gy)
    return out


def attention_reference(q, k, v, scale):
    """Single-head scaled dot-product attention on already-projected inputs."""
    nq, d = q.shape
    nk = k.shape[0]
    out = np.zeros((nq, v.shape[1]), dtype=np.float64)
    for i in range(nq):
        logits = np.array([sum(q[i, a] * k[j, a] for a in range(d)) * scale for j in range(nk)])
        logits -= logits.max()
        weights = np.exp(logits)
        weights /= weights.sum()
        for j in range(nk):
            out[i] += weights[j] * v[j]
    return out


def boundary_pixels_reference(mask):
    """4-adjacency disagreement pixels; outside the image is background."""
    m = np.asarray(mask, dtype=bool)
    h, w = m.shape
    out = np.zeros_like(m)
    for y in range(h):
        for x in range(w):
            for dy, dx in ((-1, 0), (1, 0), (0, -1), (0, 1)):
                yy, xx = y + dy, x + dx
                neighbor = m[yy, xx] if 0 <= yy < h and 0 <= xx < w else False
                if m[y, x] != neighbor:
                    out[y, x] = True
                    break
    return out


def boundary_dilate_reference(mask, d):
    boundary = boundary_pixels_reference(mask)
    h, w = boundary.shape
    out = np.zeros_like(boundary)
    for y in range(h):
        for x in range(w):
            for yy in range(max(0, y - d), min(h, y + d + 1)):
                for xx in range(max(0, x - d), min(w, x + d + 1)):
                    if boundary[yy, xx]:
                        out[y, x] = True
    return out


def iou_reference(pred, gt):
    p = np.asarray(pred, dtype=bool)
    g = np.asarray(gt, dtype=bool)
    inter = union = 0
    for y in range(p.shape[0]):
        for x in range(p.shape[1]):
            if p[y, x] and g[y, x]:
                inter += 1
            if p[y, x] or g[y, x]:
                union += 1
    if union == 0:
        return 1.0
    return inter / union


def boundary_iou_reference(pred, gt, d):
    p = np.asarray(pred, dtype=bool)
    g = np.asarray(gt, dtype=bool)
    band = boundary_dilate_reference(p, d) | boundary_dilate_reference(g, d)
    inter = union = 0
    for y in range(p.shape[0]):
        for x in range(p.shape[1]):
            if not band[y, x]:
                continue
            if p[y, x] and g[y, x]:
                inter += 1
            if p[y, x] or g[y, x]:
                union += 1
    if union == 0:
        return 1.0
    return inter / union


def bce_reference(pred, target):
    p = np.asarray(pred, dtype=np.float64).reshape(-1)
    t = np.asarray(target, dtype=np.float64).reshape(-1)
    total = 0.0
    for pi, ti in zip(p, t):
        pi = min(max(pi, 1e-7), 1 - 1e-7)
        total += ti * np.log(pi) + (1 - ti) * np.log(1 - pi)
    return -total / len(p)


def dice_reference(pred, target):
    p = np.asarray(pred, dtype=np.float64).reshape(-1)
    t = np.asarray(target, dtype=np.float64).reshape(-1)
    inter = float(sum(a * b for a, b in zip(p, t)))
    return 1.0 - (2 * inter + 1.0) / (float(p.sum()) + float(t.sum()) + 1.0)
