"""Prompt adapter: detail injection into dense and sparse prompts.

The adapter never touches the frozen decoder weights. It gates image-gradient
guidance into the dense prompt (the consistency module), rewrites the sparse
tokens by attending to that enhanced map, derives refine/uncertain tokens
that predict a three-mask decomposition, and mines hard points from the
disagreement map. All injection paths start at zero, so a fresh adapter is an
exact no-op on the decoder streams.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass

import numpy as np

from . import nn, sampler as sampler_mod, tokens as tok
from . import tensor as T
from .tensor import Tensor
from .tokens import AdapterOutputs, MaskTriple, SparseTokens

GUIDED_GATE = "guided_gate"
CROSS_ATTENTION = "cross_attention"

SERIAL = "serial"
PARALLEL = "parallel"
FUSION = "fusion"


# --------------------------------------------------------------------------
# image gradient guidance (plain data prep, not part of the tape)

_SOBEL_X = np.array([[-1, 0, 1], [-2, 0, 2], [-1, 0, 1]], dtype=np.float64)
_SOBEL_Y = _SOBEL_X.T


def _filter2_replicate(img, kernel):
    padded = np.pad(img, 1, mode="edge")
    out = np.zeros_like(img)
    for di in range(3):
        for dj in range(3):
            out += kernel[di, dj] * padded[di : di + img.shape[0], dj : dj + img.shape[1]]
    return out


def sobel_magnitude(gray):
    gx = _filter2_replicate(gray, _SOBEL_X)
    gy = _filter2_replicate(gray, _SOBEL_Y)
    return np.sqrt(gx * gx + gy * gy)


def image_gradient(image, mode="sobel"):
    """Edge map of a (3, H, W) image in [0, 1], shape (1, H, W).

    Sobel (default) gives a magnitude map normalized by its max; canny gives
    a binary map after non-max suppression and 0.1/0.2-of-max hysteresis.
    """
    gray = np.asarray(image, dtype=np.float64).mean(axis=0)
    mag = sobel_magnitude(gray)
    peak = mag.max()
    if mode == "sobel":
        out = mag / peak if peak > 0 else mag
        return out[None].astype(np.float32)
    if mode != "canny":
        raise ValueError(f"unknown edge mode {mode!r}")
    return _canny(gray)[None].astype(np.float32)


def _canny(gray):
    blur_k = np.outer([1, 2, 1], [1, 2, 1]) / 16.0
    smooth = _filter2_replicate(gray, blur_k)
    gx = _filter2_replicate(smooth, _SOBEL_X)
    gy = _filter2_replicate(smooth, _SOBEL_Y)
    mag = np.sqrt(gx * gx + gy * gy)
    peak = mag.max()
    if peak <= 0:
        return np.zeros_like(gray)

    angle = np.arctan2(gy, gx)
    sector = np.round(angle / (np.pi / 4)).astype(int) % 4
    offsets = {0: (0, 1), 1: (1, 1), 2: (1, 0), 3: (1, -1)}
    h, w = gray.shape
    padded = np.pad(mag, 1)
    thin = np.zeros_like(mag)
    for s, (dy, dx) in offsets.items():
        sel = sector == s
        ahead = padded[1 + dy : 1 + dy + h, 1 + dx : 1 + dx + w]
        behind = padded[1 - dy : 1 - dy + h, 1 - dx : 1 - dx + w]
        keep = sel & (mag >= ahead) & (mag >= behind)
        thin[keep] = mag[keep]

    strong = thin >= 0.2 * peak
    weak = thin >= 0.1 * peak
    out = strong.copy()
    queue = deque(zip(*np.nonzero(strong)))
    while queue:
        y, x = queue.popleft()
        for dy in (-1, 0, 1):
            for dx in (-1, 0, 1):
                ny, nx = y + dy, x + dx
                if 0 <= ny < h and 0 <= nx < w and weak[ny, nx] and not out[ny, nx]:
                    out[ny, nx] = True
                    queue.append((ny, nx))
    return out.astype(np.float64)


# --------------------------------------------------------------------------
# dense prompt compensation

def _to_flat(x_chw):
    c = x_chw.data.shape[0]
    hw = x_chw.data.shape[1] * x_chw.data.shape[2]
    return T.transpose(T.reshape(x_chw, (c, hw)))


def _to_chw(x_flat, h, w):
    c = x_flat.data.shape[1]
    return T.reshape(T.transpose(x_flat), (c, h, w))


class GuideEncoder(nn.Module):
    """Convolutional encoding of (image, edge map) down to the decoder grid."""

    def __init__(self, rng, c, in_ch=4):
        widths = [in_ch, 8, 16, 32, c]
        self.stages = [
            nn.Conv2d(rng, widths[i], widths[i + 1], 3, stride=2, padding=1) for i in range(4)
        ]

    def __call__(self, guide_input):
        x = guide_input
        for i, stage in enumerate(self.stages):
            x = stage(x)
            if i < len(self.stages) - 1:
                x = T.relu(x)
        return x


class GuidedGateCrm(nn.Module):
    """Sigmoid-gated residual injection of guidance into the dense prompt."""

    def __init__(self, rng, c):
        self.gate = nn.Linear(rng, c, c)
        self.value = nn.Linear(rng, c, c, zero_init=True)

    def delta_flat(self, guide_flat, x_flat):
        return T.mul(T.sigmoid(self.gate(guide_flat)), self.value(guide_flat))

    def apply_flat(self, guide_flat, x_flat):
        return T.add(x_flat, self.delta_flat(guide_flat, x_flat))


class CrossAttentionCrm(nn.Module):
    """Image-to-guidance cross-attention variant of the consistency module."""

    def __init__(self, rng, c):
        self.attn = nn.SingleHeadAttention(rng, c)

    def delta_flat(self, guide_flat, x_flat):
        return self.attn(x_flat, guide_flat, guide_flat)

    def apply_flat(self, guide_flat, x_flat):
        return T.add(x_flat, self.delta_flat(guide_flat, x_flat))


def _check_dense_shapes(guide, x):
    if guide.data.shape != x.data.shape:
        raise T.ShapeError(f"guide shape {guide.data.shape} != feature shape {x.data.shape}")


def crm_guided_gate(crm, guide, x):
    """Gated compensation on (C, h, w) maps; returns the enhanced dense prompt."""
    _check_dense_shapes(guide, x)
    c, h, w = x.data.shape
    return _to_chw(crm.apply_flat(_to_flat(guide), _to_flat(x)), h, w)


def crm_cross_attention(crm, guide, x):
    """Cross-attention compensation on (C, h, w) maps."""
    _check_dense_shapes(guide, x)
    c, h, w = x.data.shape
    return _to_chw(crm.apply_flat(_to_flat(guide), _to_flat(x)), h, w)


# --------------------------------------------------------------------------
# sparse prompt optimization and mask triple

def optimize_sparse_prompts(attn, t_in, x_pa_flat):
    """Token-to-image attention residual; keeps the original guidance."""
    return T.add(t_in, attn(t_in, x_pa_flat, x_pa_flat))


def derive_refine_uncertain_tokens(mlp_r, mlp_u, mask_tokens, static_refine, static_uncertain):
    """Refine/uncertain tokens from mean-pooled mask tokens and the statics."""
    n = mask_tokens.data.shape[0]
    c = mask_tokens.data.shape[1]
    pool = T.matmul(Tensor(np.full((1, n), 1.0 / n, dtype=np.float32)), mask_tokens)
    r = mlp_r(T.concat([pool, T.reshape(static_refine, (1, c))], axis=1))
    u = mlp_u(T.concat([pool, T.reshape(static_uncertain, (1, c))], axis=1))
    return T.reshape(r, (c,)), T.reshape(u, (c,))


def compose_mask_triple(m_c, m_r, m_u):
    """Uncertainty-weighted blend of the refined and coarse masks."""
    return T.add(T.mul(m_u, m_r), T.mul(T.one_minus(m_u), m_c))


def _pixel_dot_mask(feature_flat, token, h, w):
    c = token.data.shape[0]
    logits = T.matmul(feature_flat, T.reshape(token, (c, 1)))
    return T.sigmoid(T.reshape(logits, (h, w)))


def predict_mask_triple(feature, mask_token, r_pa, u_pa):
    """Coarse/refined/uncertain masks from per-pixel channel dots on (C, h, w)."""
    c, h, w = feature.data.shape
    flat = _to_flat(feature)
    m_c = _pixel_dot_mask(flat, mask_token, h, w)
    m_r = _pixel_dot_mask(flat, r_pa, h, w)
    m_u = _pixel_dot_mask(flat, u_pa, h, w)
    return MaskTriple(m_c=m_c, m_r=m_r, m_u=m_u, m_pa=compose_mask_triple(m_c, m_r, m_u))


def assemble_pa_tokens(iou_pa, r_pa, p_pa, p_sample, b_pa):
    """Order the adapter's sparse output: [iou, refine, points, samples, boxes]."""
    c = iou_pa.data.shape[0]
    rows = [T.reshape(iou_pa, (1, c)), T.reshape(r_pa, (1, c))]
    roles = [tok.IOU, tok.REFINE]
    for group, role in ((p_pa, tok.POINT), (p_sample, tok.SAMPLE), (b_pa, tok.BOX)):
        for t in group:
            rows.append(T.reshape(t, (1, c)))
            roles.append(role)
    return SparseTokens(T.concat(rows, axis=0), roles)


# --------------------------------------------------------------------------
# the adapter proper

@dataclass
class SamplerOptions:
    n_sample: int = 4
    temperature: float = 1.0
    mode: str = "train_stochastic"
    rng_seed: int = 0
    st_mode: str = "per_step"


class PromptAdapter(nn.Module):
    def __init__(self, rng, c, crm=GUIDED_GATE, connection=PARALLEL):
        if crm not in (GUIDED_GATE, CROSS_ATTENTION):
            raise ValueError(f"unknown crm variant {crm!r}")
        if connection not in (SERIAL, PARALLEL, FUSION):
            raise ValueError(f"unknown connection {connection!r}")
        self.c = c
        self.crm_kind = crm
        self.connection = connection
        self.guide_encoder = GuideEncoder(rng, c)
        self.crm = GuidedGateCrm(rng, c) if crm == GUIDED_GATE else CrossAttentionCrm(rng, c)
        self.token_attn = nn.SingleHeadAttention(rng, c)
        self.mlp_refine = nn.Mlp(rng, 2 * c, 2 * c, c, zero_init_out=True)
        self.mlp_uncertain = nn.Mlp(rng, 2 * c, 2 * c, c, zero_init_out=True)
        self.point_embeddings = sampler_mod.PointTokenEmbeddings(rng, c)
        if connection == FUSION:
            # blend starts as "keep the original stream" so the frozen decoder
            # statistics survive the projection at step zero
            eye_zero = np.concatenate([np.eye(c), np.zeros((c, c))], axis=0)
            self.fuse_tokens = nn.Linear(rng, 2 * c, c)
            self.fuse_image = nn.Linear(rng, 2 * c, c)
            self.fuse_tokens.weight.data[:] = eye_zero
            self.fuse_image.weight.data[:] = eye_zero

    def encode_guide(self, image):
        """(3, H, W) image tensor -> (C, H/16, W/16) guidance features."""
        edge = image_gradient(image.data)
        stacked = T.concat([image, Tensor(edge)], axis=0)
        return self.guide_encoder(stacked)

    def apply(self, stream, img_flat, guide_flat, grid_hw, opts, statics):
        """Run the adapter at a decoder hook and integrate into both streams.

        ``stream`` is the current token sequence, ``img_flat`` the (hw, C)
        image feature, ``guide_flat`` the encoded guidance, ``statics`` the
        learned static refine/uncertain parameter vectors. Returns the new
        (stream, img_flat, AdapterOutputs).
        """
        h, w = grid_hw
        static_refine, static_uncertain = statics

        x_pa_flat = self.crm.apply_flat(guide_flat, img_flat)
        attn_out = self.token_attn(stream.mat, x_pa_flat, x_pa_flat)
        t_attn = T.add(stream.mat, attn_out)
        attn_tokens = stream.with_mat(t_attn)

        r_pa, u_pa = derive_refine_uncertain_tokens(
            self.mlp_refine,
            self.mlp_uncertain,
            attn_tokens.rows(tok.MASK),
            static_refine,
            static_uncertain,
        )

        primary_mask_slot = stream.indices_of(tok.MASK)[0]
        mask_token = T.reshape(T.gather_rows(t_attn, [primary_mask_slot]), (self.c,))
        masks = predict_mask_triple(_to_chw(x_pa_flat, h, w), mask_token, r_pa, u_pa)

        states = {}
        p_sample = []
        sample_rows = []
        if opts.n_sample > 0:
            for i, polarity in enumerate((sampler_mod.POSITIVE, sampler_mod.NEGATIVE)):
                seed = int(np.random.SeedSequence([opts.rng_seed & 0x7FFFFFFF, i]).generate_state(1)[0])
                cfg = sampler_mod.SamplerConfig(
                    n_sample=opts.n_sample,
                    temperature=opts.temperature,
                    polarity=polarity,
                    mode=opts.mode,
                    rng_seed=seed,
                    st_mode=opts.st_mode,
                )
                phi0 = sampler_mod.init_guidance(masks, polarity)
                state = sampler_mod.gumbel_topk(phi0, cfg)
                states[polarity] = state
                toks = sampler_mod.sample_point_tokens(
                    state, x_pa_flat, self.point_embeddings, polarity, grid_hw
                )
                p_sample.extend(toks)
                sample_rows.extend(toks)

        t_pa = assemble_pa_tokens(
            iou_pa=attn_tokens.row(tok.IOU),
            r_pa=r_pa,
            p_pa=[
                T.reshape(T.gather_rows(t_attn, [i]), (self.c,))
                for i in stream.indices_of(tok.POINT)
            ],
            p_sample=p_sample,
            b_pa=[
                T.reshape(T.gather_rows(t_attn, [i]), (self.c,))
                for i in stream.indices_of(tok.BOX)
            ],
        )

        new_stream, new_img = self._integrate(stream, img_flat, x_pa_flat, attn_out, t_attn, r_pa)
        new_stream = new_stream.appended(sample_rows, tok.SAMPLE)

        outputs = AdapterOutputs(
            x_pa=_to_chw(x_pa_flat, h, w),
            t_pa=t_pa,
            masks=masks,
            r_pa=r_pa,
            u_pa=u_pa,
            sampler_states=states,
            n_appended=len(sample_rows),
        )
        return new_stream, new_img, outputs

    def _integrate(self, stream, img_flat, x_pa_flat, attn_out, t_attn, r_pa):
        n, c = stream.mat.data.shape
        keep = np.zeros((n, c), dtype=np.float32)
        for role in (tok.IOU, tok.POINT, tok.BOX):
            for i in stream.indices_of(role):
                keep[i] = 1.0
        refine_col = np.zeros((n, 1), dtype=np.float32)
        refine_col[stream.index_of(tok.REFINE)] = 1.0
        refine_term = T.matmul(Tensor(refine_col), T.reshape(r_pa, (1, c)))

        if self.connection == PARALLEL:
            new_mat = T.add(T.add(stream.mat, T.mul(attn_out, Tensor(keep))), refine_term)
            return stream.with_mat(new_mat), x_pa_flat

        replaced = T.add(T.mul(t_attn, Tensor(1.0 - refine_col * np.ones((1, c), np.float32))), refine_term)
        if self.connection == SERIAL:
            return stream.with_mat(replaced), x_pa_flat

        fused_tokens = self.fuse_tokens(T.concat([stream.mat, replaced], axis=1))
        fused_img = self.fuse_image(T.concat([img_flat, x_pa_flat], axis=1))
        return stream.with_mat(fused_tokens), fused_img
