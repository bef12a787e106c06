"""Two-phase protocol: pretrain the backbone, freeze it, train the adapter.

Phase "baseline" fits every backbone parameter with the output-mask loss plus
an L2 IoU-prediction target. Phase "adapter" reloads a baseline checkpoint,
freezes the backbone except the mask-prediction upsampling convs, and trains
the adapter, the sampler embeddings, and those convs with the full
three-branch loss. Frozen-path activations are precomputed once per sample,
which makes the adapter phase cheap.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from . import losses, metrics, nn
from . import tensor as T
from .adapter import SamplerOptions
from .tensor import Tensor


class NumericsError(RuntimeError):
    """Training produced a non-finite loss."""


@dataclass
class TrainConfig:
    learning_rate: float = 0.001
    batch_size: int = 4
    epochs: int = 40
    w_sam: float = 1.0
    w_pa: float = 1.0
    w_u: float = 1.0
    w_iou: float = 1.0
    dilation_d: int = 3
    seed: int = 0
    n_sample: int = 4
    temperature: float = 1.0
    st_mode: str = "per_step"

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ValueError(f"learning_rate must be > 0, got {self.learning_rate}")
        if self.dilation_d < 1:
            raise ValueError(f"dilation_d must be >= 1, got {self.dilation_d}")


def _forward(model, sample, use_adapter, opts, cache=None):
    return model.forward(
        sample.image,
        points=sample.points,
        box=sample.box,
        coarse_mask=sample.coarse_mask[None].astype(np.float32),
        sampler_opts=opts,
        use_adapter=use_adapter,
        cached=cache,
    )


def _upsampled_pred(m_sam, resolution):
    return T.bilinear_upsample(m_sam, resolution // m_sam.data.shape[0])


def evaluate(model, samples, use_adapter, config, caches=None, with_loss=False):
    """Deterministic metrics of the output mask against ground truth."""
    opts = SamplerOptions(
        n_sample=config.n_sample if use_adapter else 0,
        temperature=config.temperature,
        mode="infer_deterministic",
        st_mode=config.st_mode,
    )
    ious, bious, loss_vals = [], [], []
    for i, sample in enumerate(samples):
        cache = caches[i] if caches is not None else None
        out = _forward(model, sample, use_adapter, opts, cache)
        res = sample.gt_mask.shape[0]
        pred = _upsampled_pred(out.m_sam, res).data >= 0.5
        ious.append(metrics.iou(pred, sample.gt_mask))
        bious.append(metrics.boundary_iou(pred, sample.gt_mask))
        if with_loss:
            phase = "adapter" if use_adapter else "baseline"
            loss_vals.append(_phase_loss(model, sample, out, phase, config).item())
    mean_loss = float(np.mean(loss_vals)) if loss_vals else float("nan")
    return float(np.mean(ious)), float(np.mean(bious)), mean_loss


def _phase_loss(model, sample, out, phase, config):
    res = sample.gt_mask.shape[0]
    if phase == "baseline":
        up = _upsampled_pred(out.m_sam, res)
        loss = T.scale(losses.bce_dice(up, losses._target(sample.gt_mask)), config.w_sam)
        if config.w_iou:
            actual = metrics.iou(_upsampled_pred(out.m_sam, res).data >= 0.5, sample.gt_mask)
            diff = T.sub(out.iou_pred, float(actual))
            loss = T.add(loss, T.scale(T.tsum(T.mul(diff, diff)), config.w_iou))
        return loss
    inter = out.intermediates
    return losses.total_loss(
        out.m_sam,
        inter.masks.m_pa,
        inter.masks.m_u,
        sample.gt_mask,
        sample.gt_uncertain,
        (config.w_sam, config.w_pa, config.w_u),
    )


def snapshot_bytes(model, names):
    params = model.parameters()
    return {n: params[n].data.tobytes() for n in names}


def run_phase(
    model,
    phase,
    train_samples,
    val_samples,
    config,
    csv_path=None,
    eval_every=1,
    grad_audit=False,
    max_steps=None,
):
    """Train one phase; returns (history rows, audit set or None).

    History rows mirror the CSV schema: (epoch, split, miou, mbiou, loss).
    """
    if phase not in ("baseline", "adapter"):
        raise ValueError(f"unknown phase {phase!r}")
    use_adapter = phase == "adapter"

    if use_adapter:
        if model.adapter is None:
            raise ValueError("adapter phase needs a model built with an adapter")
        frozen_names = set(model.frozen_parameter_names())
        for name, p in model.parameters().items():
            p.requires_grad = name not in frozen_names
        params = model.adapter_phase_parameters()
        train_caches = [
            model.precompute_frozen(s.image, s.points, s.box, s.coarse_mask[None].astype(np.float32))
            for s in train_samples
        ]
        val_caches = [
            model.precompute_frozen(s.image, s.points, s.box, s.coarse_mask[None].astype(np.float32))
            for s in val_samples
        ]
    else:
        params = {
            k: v for k, v in model.parameters().items() if not k.startswith("adapter.")
        }
        for p in params.values():
            p.requires_grad = True
        train_caches = val_caches = None

    opt = nn.Adam(params, lr=config.learning_rate)
    rows = []
    audit = set() if grad_audit else None
    sample_counter = 0
    steps = 0

    for epoch in range(1, config.epochs + 1):
        shuffle_rng = np.random.default_rng(np.random.SeedSequence([config.seed, 0x5F00D, epoch]))
        order = shuffle_rng.permutation(len(train_samples))
        epoch_losses = []
        for start in range(0, len(order), config.batch_size):
            batch = order[start : start + config.batch_size]
            terms = []
            for j in batch:
                seed = int(
                    np.random.SeedSequence([config.seed, 0xD1CE, sample_counter]).generate_state(1)[0]
                )
                sample_counter += 1
                opts = SamplerOptions(
                    n_sample=config.n_sample if use_adapter else 0,
                    temperature=config.temperature,
                    mode="train_stochastic",
                    rng_seed=seed,
                    st_mode=config.st_mode,
                )
                cache = train_caches[j] if train_caches is not None else None
                out = _forward(model, train_samples[j], use_adapter, opts, cache)
                terms.append(_phase_loss(model, train_samples[j], out, phase, config))
            batch_loss = terms[0]
            for t in terms[1:]:
                batch_loss = T.add(batch_loss, t)
            batch_loss = T.scale(batch_loss, 1.0 / len(terms))
            value = batch_loss.item()
            if not np.isfinite(value):
                raise NumericsError(f"non-finite loss {value} at epoch {epoch}")
            batch_loss.backward()
            if audit is not None and epoch == 1:
                for k, p in params.items():
                    if p.grad is not None and np.any(p.grad):
                        audit.add(k)
            opt.step()
            opt.zero_grad()
            epoch_losses.append(value)
            steps += 1
            if max_steps is not None and steps >= max_steps:
                break

        if eval_every and (epoch % eval_every == 0 or epoch == config.epochs):
            tr_miou, tr_mbiou, _ = evaluate(model, train_samples, use_adapter, config, train_caches)
            va_miou, va_mbiou, va_loss = evaluate(
                model, val_samples, use_adapter, config, val_caches, with_loss=True
            )
            rows.append((epoch, "train", tr_miou, tr_mbiou, float(np.mean(epoch_losses))))
            rows.append((epoch, "val", va_miou, va_mbiou, va_loss))
        if max_steps is not None and steps >= max_steps:
            break

    if csv_path is not None:
        write_metric_log(csv_path, rows)
    return rows, audit


def write_metric_log(path, rows):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["epoch", "split", "miou", "mbiou", "loss"])
        for epoch, split, miou, mbiou, loss in rows:
            writer.writerow([epoch, split, f"{miou:.6f}", f"{mbiou:.6f}", f"{loss:.6f}"])
