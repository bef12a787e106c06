"""Token-sequence and mask-triple containers shared by decoder and adapter."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .tensor import Tensor

IOU = "iou"
MASK = "mask"
REFINE = "refine"
UNCERTAIN = "uncertain"
POINT = "point"
BOX = "box"
SAMPLE = "sample"

_SINGLETON_ROLES = (IOU, REFINE, UNCERTAIN)


@dataclass
class SparseTokens:
    """A (T, C) token matrix with one role tag per row."""

    mat: Tensor
    roles: list

    def __post_init__(self):
        if self.mat.data.shape[0] != len(self.roles):
            raise T.ShapeError(
                f"{self.mat.data.shape[0]} token rows but {len(self.roles)} role tags"
            )
        for role in _SINGLETON_ROLES:
            if self.roles.count(role) > 1:
                raise ValueError(f"role-tag collision: more than one {role!r} token")

    def __len__(self):
        return len(self.roles)

    @property
    def channels(self):
        return self.mat.data.shape[1]

    def indices_of(self, role):
        return [i for i, r in enumerate(self.roles) if r == role]

    def index_of(self, role):
        idx = self.indices_of(role)
        if len(idx) != 1:
            raise ValueError(f"expected exactly one {role!r} token, found {len(idx)}")
        return idx[0]

    def rows(self, role):
        return T.gather_rows(self.mat, self.indices_of(role))

    def row(self, role):
        return T.reshape(T.gather_rows(self.mat, [self.index_of(role)]), (self.channels,))

    def appended(self, rows, role):
        """New sequence with extra rows of one role appended."""
        if not rows:
            return SparseTokens(self.mat, list(self.roles))
        extra = T.concat([T.reshape(r, (1, self.channels)) for r in rows], axis=0)
        return SparseTokens(T.concat([self.mat, extra], axis=0), list(self.roles) + [role] * len(rows))

    def with_mat(self, mat):
        return SparseTokens(mat, list(self.roles))


def validate_decoder_stream(tokens):
    """The decoder requires the full static block to be present."""
    for role in (IOU, REFINE, UNCERTAIN):
        tokens.index_of(role)
    if not tokens.indices_of(MASK):
        raise ValueError("decoder stream has no mask tokens")


@dataclass
class MaskTriple:
    """Coarse / refined / uncertain masks plus their composition, all in (0,1)."""

    m_c: Tensor
    m_r: Tensor
    m_u: Tensor
    m_pa: Tensor


@dataclass
class AdapterOutputs:
    x_pa: Tensor | None = None
    t_pa: SparseTokens | None = None
    masks: MaskTriple | None = None
    r_pa: Tensor | None = None
    u_pa: Tensor | None = None
    sampler_states: dict = field(default_factory=dict)
    n_appended: int = 0

    @property
    def empty(self):
        return self.x_pa is None
