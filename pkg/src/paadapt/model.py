"""Miniature promptable segmentation backbone with adapter hooks.

A 16x-downsampling conv encoder, point/box/mask prompt encoders, and a
two-block attention decoder in the segment-anything style: token
self-attention, token-to-image and image-to-token cross attention, and a
hypernetwork mask head over a learned 4x upsampler. The prompt adapter, when
present, runs right after each enabled block's self-attention.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import adapter as adapter_mod
from . import nn, positional, tokens as tok
from . import tensor as T
from .adapter import SamplerOptions
from .tensor import Tensor
from .tokens import AdapterOutputs, SparseTokens


class ConfigError(ValueError):
    """A configuration value is inconsistent with the model contract."""


@dataclass
class ModelConfig:
    resolution: int = 128
    channels: int = 64
    heads: int = 2
    mlp_width: int = 128
    n_blocks: int = 2
    n_mask_tokens: int = 4
    adapter_connection: str = adapter_mod.PARALLEL
    adapter_blocks: str = "second_only"  # or "both"
    crm: str = adapter_mod.GUIDED_GATE

    def __post_init__(self):
        if self.resolution % 16:
            raise ConfigError(f"resolution {self.resolution} not divisible by 16")
        if self.adapter_blocks not in ("second_only", "both"):
            raise ConfigError(f"unknown adapter_blocks {self.adapter_blocks!r}")

    @property
    def grid(self):
        return self.resolution // 16

    def adapter_active_blocks(self):
        if self.adapter_blocks == "both":
            return set(range(self.n_blocks))
        return {1} if self.n_blocks >= 2 else set()


class ImageEncoder(nn.Module):
    """Four stride-2 conv stages: (3, H, W) -> (C, H/16, W/16)."""

    def __init__(self, rng, c):
        widths = [3, 16, 32, 64, c]
        self.stages = [
            nn.Conv2d(rng, widths[i], widths[i + 1], 3, stride=2, padding=1) for i in range(4)
        ]

    def __call__(self, image):
        h, w = image.data.shape[1:]
        if h % 16 or w % 16:
            raise ConfigError(f"image dims {h}x{w} not divisible by 16")
        x = image
        for i, stage in enumerate(self.stages):
            x = stage(x)
            if i < len(self.stages) - 1:
                x = T.relu(x)
        return x


class MaskPromptEncoder(nn.Module):
    """Downsamples a (1, H, W) coarse mask 16x into a dense prompt."""

    def __init__(self, rng, c):
        widths = [1, 8, 16, 32, c]
        self.stages = [
            nn.Conv2d(rng, widths[i], widths[i + 1], 3, stride=2, padding=1) for i in range(4)
        ]

    def __call__(self, mask):
        x = mask
        for i, stage in enumerate(self.stages):
            x = stage(x)
            if i < len(self.stages) - 1:
                x = T.relu(x)
        return x


class SparsePromptEncoder(nn.Module):
    """Static output tokens plus positional point/box tokens."""

    def __init__(self, rng, c, n_mask_tokens=4):
        scale = 1.0 / np.sqrt(c)
        self.iou_token = nn.param(rng.normal(0, scale, size=c))
        self.mask_tokens = nn.param(rng.normal(0, scale, size=(n_mask_tokens, c)))
        self.refine_token = nn.param(rng.normal(0, scale, size=c))
        self.uncertain_token = nn.param(rng.normal(0, scale, size=c))
        self.pos_label = nn.param(rng.normal(0, scale, size=c))
        self.neg_label = nn.param(rng.normal(0, scale, size=c))
        self.box_corner_a = nn.param(rng.normal(0, scale, size=c))
        self.box_corner_b = nn.param(rng.normal(0, scale, size=c))

    def __call__(self, points, box, image_hw):
        h, w = image_hw
        c = self.iou_token.data.shape[0]
        n_mask = self.mask_tokens.data.shape[0]
        rows = [
            T.reshape(self.iou_token, (1, c)),
            self.mask_tokens,
            T.reshape(self.refine_token, (1, c)),
            T.reshape(self.uncertain_token, (1, c)),
        ]
        roles = [tok.IOU] + [tok.MASK] * n_mask + [tok.REFINE, tok.UNCERTAIN]

        for x, y, label in points or []:
            if not (0 <= x <= w and 0 <= y <= h):
                raise ValueError(f"point ({x}, {y}) outside image bounds {w}x{h}")
            pe = positional.encode_points([(x / w, y / h)], c)
            emb = self.pos_label if int(label) == 1 else self.neg_label
            rows.append(T.add(Tensor(pe), T.reshape(emb, (1, c))))
            roles.append(tok.POINT)

        if box is not None:
            x0, y0, x1, y1 = box
            for x, y in ((x0, y0), (x1, y1)):
                if not (0 <= x <= w and 0 <= y <= h):
                    raise ValueError(f"box corner ({x}, {y}) outside image bounds {w}x{h}")
            pe_a = positional.encode_points([(x0 / w, y0 / h)], c)
            pe_b = positional.encode_points([(x1 / w, y1 / h)], c)
            rows.append(T.add(Tensor(pe_a), T.reshape(self.box_corner_a, (1, c))))
            rows.append(T.add(Tensor(pe_b), T.reshape(self.box_corner_b, (1, c))))
            roles.extend([tok.BOX, tok.BOX])

        return SparseTokens(T.concat(rows, axis=0), roles)


class DecoderBlock(nn.Module):
    def __init__(self, rng, c, heads, mlp_width):
        self.self_attn = nn.MultiheadAttention(rng, c, heads)
        self.cross_t2i = nn.MultiheadAttention(rng, c, heads)
        self.cross_i2t = nn.MultiheadAttention(rng, c, heads)
        self.mlp = nn.Mlp(rng, c, mlp_width, c)
        self.norm1 = nn.LayerNorm(c)
        self.norm2 = nn.LayerNorm(c)
        self.norm3 = nn.LayerNorm(c)
        self.norm4 = nn.LayerNorm(c)


class MaskDecoder(nn.Module):
    """Two-way attention blocks, 4x learned upsampling, hypernetwork head."""

    def __init__(self, rng, config):
        c = config.channels
        self.config = config
        self.blocks = [
            DecoderBlock(rng, c, config.heads, config.mlp_width) for _ in range(config.n_blocks)
        ]
        self.up1 = nn.ConvTranspose2d(rng, c, c // 2, 2)
        self.up2 = nn.ConvTranspose2d(rng, c // 2, c // 4, 2)
        self.hyper_mlp = nn.Mlp(rng, c, c, c // 4)
        self.iou_mlp = nn.Mlp(rng, c, c, 1)

    def __call__(self, feature, dense_prompt, tokens, adapter=None, guide_flat=None,
                 sampler_opts=None, statics=None):
        config = self.config
        c, h, w = feature.data.shape
        if dense_prompt.data.shape != feature.data.shape:
            raise T.ShapeError(
                f"dense prompt {dense_prompt.data.shape} != feature {feature.data.shape}"
            )
        active = config.adapter_active_blocks()
        if adapter is not None and not active:
            raise ConfigError("adapter present but no decoder block is enabled for it")

        tok.validate_decoder_stream(tokens)
        pe = Tensor(positional.grid_encoding(h, w, c))
        img = adapter_mod._to_flat(T.add(feature, dense_prompt))

        stream = tokens
        intermediates = AdapterOutputs()
        for i, block in enumerate(self.blocks):
            t = stream.mat
            t = T.layer_norm(T.add(t, block.self_attn(t, t, t)), block.norm1.gamma, block.norm1.beta)
            stream = stream.with_mat(t)

            if adapter is not None and i in active:
                opts = sampler_opts if sampler_opts is not None else SamplerOptions()
                stream, img, intermediates = adapter.apply(
                    stream, img, guide_flat, (h, w), opts, statics
                )
                t = stream.mat

            img_pe = T.add(img, pe)
            t = T.layer_norm(
                T.add(t, block.cross_t2i(t, img_pe, img)), block.norm2.gamma, block.norm2.beta
            )
            t = T.layer_norm(T.add(t, block.mlp(t)), block.norm3.gamma, block.norm3.beta)
            img = T.layer_norm(
                T.add(img, block.cross_i2t(T.add(img, pe), t, t)),
                block.norm4.gamma,
                block.norm4.beta,
            )
            stream = stream.with_mat(t)

        up = T.relu(self.up1(adapter_mod._to_chw(img, h, w)))
        up = self.up2(up)
        cq, hq, wq = up.data.shape

        mask_row = T.reshape(
            T.gather_rows(stream.mat, [stream.indices_of(tok.MASK)[0]]), (1, config.channels)
        )
        hyper = self.hyper_mlp(mask_row)
        logits = T.matmul(hyper, T.reshape(up, (cq, hq * wq)))
        m_sam = T.sigmoid(T.reshape(logits, (hq, wq)))

        iou_row = T.reshape(T.gather_rows(stream.mat, [stream.index_of(tok.IOU)]), (1, config.channels))
        iou_pred = T.sigmoid(T.reshape(self.iou_mlp(iou_row), (1,)))
        return m_sam, iou_pred, intermediates


@dataclass
class ModelOutput:
    m_sam: Tensor
    iou_pred: Tensor
    intermediates: AdapterOutputs
    t_in: SparseTokens


class PaSam(nn.Module):
    """Full model: encoders + decoder + optional prompt adapter."""

    def __init__(self, config=None, seed=0, with_adapter=True):
        config = config if config is not None else ModelConfig()
        rng = np.random.default_rng(np.random.SeedSequence([seed, 0xA11CE]))
        self.config = config
        self.image_encoder = ImageEncoder(rng, config.channels)
        self.mask_prompt_encoder = MaskPromptEncoder(rng, config.channels)
        self.sparse_encoder = SparsePromptEncoder(rng, config.channels, config.n_mask_tokens)
        self.decoder = MaskDecoder(rng, config)
        self.adapter = (
            adapter_mod.PromptAdapter(
                rng, config.channels, crm=config.crm, connection=config.adapter_connection
            )
            if with_adapter
            else None
        )

    def encode_image(self, image):
        return self.image_encoder(image)

    def encode_mask_prompt(self, mask):
        return self.mask_prompt_encoder(mask)

    def encode_sparse_prompts(self, points, box):
        r = self.config.resolution
        return self.sparse_encoder(points, box, (r, r))

    def forward(
        self,
        image,
        points=None,
        box=None,
        coarse_mask=None,
        sampler_opts=None,
        use_adapter=True,
        cached=None,
    ):
        """Run the full pipeline on one sample.

        ``cached`` may carry precomputed frozen-path activations (see
        ``precompute_frozen``); training with a frozen backbone uses it to
        skip re-encoding.
        """
        if cached is not None:
            feature = Tensor(cached["feature"])
            dense = Tensor(cached["dense"])
            t_in = SparseTokens(Tensor(cached["t_in"]), list(cached["roles"]))
        else:
            image_t = image if isinstance(image, Tensor) else Tensor(image)
            feature = self.image_encoder(image_t)
            if coarse_mask is not None:
                mask_t = coarse_mask if isinstance(coarse_mask, Tensor) else Tensor(coarse_mask)
                dense = self.mask_prompt_encoder(mask_t)
            else:
                dense = Tensor(np.zeros(feature.data.shape, dtype=np.float32))
            t_in = self.encode_sparse_prompts(points, box)

        adapter = self.adapter if use_adapter else None
        guide_flat = None
        if adapter is not None:
            image_t = image if isinstance(image, Tensor) else Tensor(image)
            if cached is not None and "guide_input" in cached:
                stacked = Tensor(cached["guide_input"])
                guide = adapter.guide_encoder(stacked)
            else:
                guide = adapter.encode_guide(image_t)
            guide_flat = adapter_mod._to_flat(guide)

        statics = (self.sparse_encoder.refine_token, self.sparse_encoder.uncertain_token)
        m_sam, iou_pred, inter = self.decoder(
            feature,
            dense,
            t_in,
            adapter=adapter,
            guide_flat=guide_flat,
            sampler_opts=sampler_opts,
            statics=statics,
        )
        return ModelOutput(m_sam=m_sam, iou_pred=iou_pred, intermediates=inter, t_in=t_in)

    def precompute_frozen(self, image, points=None, box=None, coarse_mask=None):
        """Frozen-path activations as plain arrays, reusable across epochs."""
        image_t = image if isinstance(image, Tensor) else Tensor(image)
        feature = self.image_encoder(image_t)
        if coarse_mask is not None:
            mask_t = coarse_mask if isinstance(coarse_mask, Tensor) else Tensor(coarse_mask)
            dense = self.mask_prompt_encoder(mask_t)
        else:
            dense = Tensor(np.zeros(feature.data.shape, dtype=np.float32))
        t_in = self.encode_sparse_prompts(points, box)
        cache = {
            "feature": feature.data,
            "dense": dense.data,
            "t_in": t_in.mat.data,
            "roles": list(t_in.roles),
        }
        if self.adapter is not None:
            edge = adapter_mod.image_gradient(image_t.data)
            cache["guide_input"] = np.concatenate(
                [image_t.data.astype(np.float32), edge], axis=0
            )
        return cache

    def frozen_parameter_names(self):
        """Backbone parameters locked during the adapter phase.

        Everything outside the adapter stays frozen except the mask-prediction
        upsampling convs, which the protocol keeps trainable.
        """
        names = []
        for name in self.parameters():
            if name.startswith("adapter."):
                continue
            if name.startswith("decoder.up1.") or name.startswith("decoder.up2."):
                continue
            names.append(name)
        return names

    def adapter_phase_parameters(self):
        params = self.parameters()
        frozen = set(self.frozen_parameter_names())
        return {k: v for k, v in params.items() if k not in frozen}
