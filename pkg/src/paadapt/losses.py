"""BCE + Dice supervision for the output mask, the intermediate composed
mask, and the uncertainty map."""

from __future__ import annotations

import numpy as np

from . import metrics
from . import tensor as T
from .tensor import Tensor

CLAMP_EPS = 1e-7
DICE_EPS = 1.0


def bce_loss(pred, target):
    """Mean binary cross entropy; predictions clamped to [1e-7, 1 - 1e-7]."""
    if pred.data.shape != target.data.shape:
        raise T.ShapeError(f"bce shapes differ: {pred.data.shape} vs {target.data.shape}")
    p = T.clamp(pred, min=CLAMP_EPS, max=1.0 - CLAMP_EPS)
    pos = T.mul(target, T.log(p))
    neg = T.mul(T.one_minus(target), T.log(T.one_minus(p)))
    return T.scale(T.tmean(T.add(pos, neg)), -1.0)


def dice_loss(pred, target):
    """1 - soft Dice with additive smoothing of 1."""
    if pred.data.shape != target.data.shape:
        raise T.ShapeError(f"dice shapes differ: {pred.data.shape} vs {target.data.shape}")
    inter = T.tsum(T.mul(pred, target))
    denom = T.add(T.tsum(pred), T.tsum(target))
    ratio = T.div(T.add(T.scale(inter, 2.0), DICE_EPS), T.add(denom, DICE_EPS))
    return T.one_minus(ratio)


def bce_dice(pred, target):
    return T.add(bce_loss(pred, target), dice_loss(pred, target))


def _target(arr):
    return Tensor(np.asarray(arr, dtype=np.float32))


def total_loss(m_sam, m_pa, m_u, gt_mask, gt_uncertain, weights):
    """Weighted sum of the three supervision terms.

    ``m_sam`` (H/4 grid) is bilinearly upsampled to ground-truth resolution;
    ``m_pa`` (H/16 grid) is upsampled 4x against a max-pooled target;
    ``m_u`` is supervised at its own grid against the pooled dilated band.
    Masks are numpy binaries, predictions tensors; any weight of zero skips
    its branch entirely.
    """
    w_sam, w_pa, w_u = weights
    gt = np.asarray(gt_mask, dtype=bool).reshape(np.asarray(gt_mask).shape[-2:])
    h = gt.shape[0]
    terms = []
    if w_sam:
        up = T.bilinear_upsample(m_sam, h // m_sam.data.shape[0])
        terms.append(T.scale(bce_dice(up, _target(gt)), w_sam))
    if w_pa:
        up = T.bilinear_upsample(m_pa, 4)
        pooled = metrics.maxpool_binary(gt, h // up.data.shape[0])
        terms.append(T.scale(bce_dice(up, _target(pooled)), w_pa))
    if w_u:
        gu = np.asarray(gt_uncertain, dtype=bool).reshape(gt.shape)
        pooled = metrics.maxpool_binary(gu, h // m_u.data.shape[0])
        terms.append(T.scale(bce_loss(m_u, _target(pooled)), w_u))
    total = terms[0]
    for t in terms[1:]:
        total = T.add(total, t)
    return total
