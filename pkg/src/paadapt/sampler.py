"""Hard point mining: iterative Gumbel top-k over the mask-disagreement map.

Sampling guidance starts from the uncertainty-gated disagreement between the
refined and coarse masks. One Gumbel draw perturbs it, then each subsequent
step suppresses the mass already taken with a log(1 - g) update, and the
chosen cells are emitted as hard one-hot rows whose backward pass follows the
soft softmax path (straight-through).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import nn, positional
from . import tensor as T
from .tensor import Tensor

POSITIVE = "positive"
NEGATIVE = "negative"

SOFTMAX_CLAMP = 1.0 - 1e-7


@dataclass
class SamplerConfig:
    n_sample: int = 4
    temperature: float = 1.0
    polarity: str = POSITIVE
    mode: str = "train_stochastic"
    rng_seed: int = 0
    st_mode: str = "per_step"  # or "combined": route every row's backward via g_sum

    def __post_init__(self):
        if self.temperature <= 0:
            raise ValueError(f"temperature must be > 0, got {self.temperature}")
        if self.n_sample < 0:
            raise ValueError(f"n_sample must be >= 0, got {self.n_sample}")
        if self.polarity not in (POSITIVE, NEGATIVE):
            raise ValueError(f"unknown polarity {self.polarity!r}")
        if self.mode not in ("train_stochastic", "infer_deterministic"):
            raise ValueError(f"unknown mode {self.mode!r}")
        if self.st_mode not in ("per_step", "combined"):
            raise ValueError(f"unknown st_mode {self.st_mode!r}")


@dataclass
class SamplerState:
    phi: Tensor
    gumbel_noise: np.ndarray
    g_steps: list = field(default_factory=list)
    g_sum: Tensor | None = None
    g_hat: Tensor | None = None
    g_hat_rows: list = field(default_factory=list)
    selected: list = field(default_factory=list)


def init_guidance(masks, polarity):
    """Flattened sampling guidance; positive looks where refine > coarse."""
    if polarity == POSITIVE:
        diff = T.sub(masks.m_r, masks.m_c)
    elif polarity == NEGATIVE:
        diff = T.sub(masks.m_c, masks.m_r)
    else:
        raise ValueError(f"unknown polarity {polarity!r}")
    return T.flatten(T.mul(masks.m_u, diff))


def _gumbel(rng, n, dtype):
    u = np.clip(rng.random(n), 1e-12, 1.0 - 1e-12)
    return (-np.log(-np.log(u))).astype(dtype)


def _masked_argmax(values, taken):
    masked = values.copy()
    masked[list(taken)] = -np.inf
    return int(np.argmax(masked))


def gumbel_topk(phi0, config):
    """Draw ``n_sample`` distinct cells from guidance logits.

    Training mode adds Gumbel(0,1) noise once, then walks the iterative
    top-k recursion; inference mode is a plain deterministic top-N. Each
    emitted row is exactly one-hot in value, with the straight-through soft
    term carrying the gradient.
    """
    n = phi0.data.size
    if not 1 <= config.n_sample <= n:
        raise ValueError(f"n_sample must lie in [1, {n}], got {config.n_sample}")

    dtype = phi0.data.dtype
    if config.mode == "infer_deterministic":
        noise = np.zeros(n, dtype=dtype)
        state = SamplerState(phi=phi0, gumbel_noise=noise)
        state.selected = T.top_k_indices(phi0, config.n_sample)
        state.g_hat_rows = [T.one_hot(i, n, dtype=dtype) for i in state.selected]
        state.g_sum = Tensor(np.zeros(n, dtype=dtype))
        state.g_hat = T.concat([T.reshape(r, (1, n)) for r in state.g_hat_rows], axis=0)
        return state

    rng = np.random.default_rng(config.rng_seed)
    noise = _gumbel(rng, n, dtype)
    state = SamplerState(phi=phi0, gumbel_noise=noise)

    phi = T.add(phi0, Tensor(noise, dtype=dtype))
    for step in range(config.n_sample):
        if step > 0:
            g_prev = state.g_steps[-1]
            phi = T.add(phi, T.log(T.one_minus(T.clamp(g_prev, max=SOFTMAX_CLAMP))))
        g = T.softmax(phi, temperature=config.temperature)
        idx = _masked_argmax(phi.data, state.selected)
        state.selected.append(idx)
        state.g_steps.append(g)

    state.g_sum = state.g_steps[0]
    for g in state.g_steps[1:]:
        state.g_sum = T.add(state.g_sum, g)

    for idx, g in zip(state.selected, state.g_steps):
        soft = state.g_sum if config.st_mode == "combined" else g
        row = T.add(T.one_hot(idx, n, dtype=dtype), T.sub(soft, T.stop_gradient(soft)))
        state.g_hat_rows.append(row)

    state.phi = phi
    state.g_hat = T.concat([T.reshape(r, (1, n)) for r in state.g_hat_rows], axis=0)
    return state


class PointTokenEmbeddings(nn.Module):
    """Learned polarity embeddings for mined point tokens."""

    def __init__(self, rng, c):
        self.positive = nn.param(rng.normal(0.0, 0.5 / np.sqrt(c), size=c))
        self.negative = nn.param(rng.normal(0.0, 0.5 / np.sqrt(c), size=c))

    def get(self, polarity):
        return self.positive if polarity == POSITIVE else self.negative


def sample_point_tokens(state, x_pa_flat, embeddings, polarity, grid_hw):
    """Turn sampled cells into prompt tokens.

    Each token is the soft gather of the flattened dense prompt by its
    straight-through row (so gradients reach the mask triple), plus the
    position code of the cell center and the polarity embedding.
    """
    h, w = grid_hw
    n = h * w
    if x_pa_flat.data.shape[0] != n:
        raise T.ShapeError(
            f"sampler grid {h}x{w} does not match dense prompt rows {x_pa_flat.data.shape[0]}"
        )
    c = x_pa_flat.data.shape[1]
    label = embeddings.get(polarity)
    tokens = []
    for row, idx in zip(state.g_hat_rows, state.selected):
        gathered = T.reshape(T.matmul(T.reshape(row, (1, n)), x_pa_flat), (c,))
        pe = positional.encode_points([positional.cell_center(idx, h, w)], c)[0]
        tokens.append(T.add(T.add(gathered, Tensor(pe, dtype=np.float32)), label))
    return tokens
