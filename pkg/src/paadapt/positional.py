"""Deterministic 2D sinusoidal position codes shared by prompts and the grid."""

from __future__ import annotations

import numpy as np

_GRID_CACHE = {}


def encode_points(coords, c):
    """Sinusoidal code of normalized (x, y) pairs, shape (len(coords), c).

    Half the channels encode x, half y; per axis the frequencies are
    pi * 2**i, so the code is resolution independent.
    """
    coords = np.atleast_2d(np.asarray(coords, dtype=np.float64))
    d = c // 2
    n_freq = d // 2
    freqs = np.pi * (2.0 ** np.arange(n_freq))
    out = np.zeros((coords.shape[0], c), dtype=np.float32)
    for axis in range(2):
        phase = coords[:, axis : axis + 1] * freqs[None, :]
        out[:, axis * d : axis * d + n_freq] = np.sin(phase)
        out[:, axis * d + n_freq : (axis + 1) * d] = np.cos(phase)
    return out


def grid_encoding(h, w, c):
    """Position codes of all cell centers of an (h, w) grid, shape (h*w, c)."""
    key = (h, w, c)
    cached = _GRID_CACHE.get(key)
    if cached is None:
        ys, xs = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
        coords = np.stack([(xs.reshape(-1) + 0.5) / w, (ys.reshape(-1) + 0.5) / h], axis=1)
        cached = encode_points(coords, c)
        _GRID_CACHE[key] = cached
    return cached


def cell_center(flat_index, h, w):
    """Normalized (x, y) center of a flat grid index."""
    row, col = divmod(int(flat_index), w)
    return (col + 0.5) / w, (row + 0.5) / h
