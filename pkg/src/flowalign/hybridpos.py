"""Hybrid positional embeddings: 2D rotary for the patch grid, identity
rotary for global tokens, and learnable additive embeddings for the globals.

Axis split convention: the first head_dim/2 coordinates rotate with the row
index, the second half with the column index. Within each half, coordinates
are rotated in consecutive pairs (2m, 2m+1) at frequency
theta_m = base^(-2m / (head_dim/2)).
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ShapeMismatchError


class OddHeadDimError(ShapeMismatchError):
    """head_dim not divisible by 4 (two halves, each rotated in pairs)."""


@dataclass
class RopeTable:
    """Precomputed per-axis rotation angles for positions up to max_pos."""

    head_dim: int
    max_pos: int
    base: float = 10000.0
    freqs: np.ndarray = field(init=False)   # [head_dim/4]
    angles: np.ndarray = field(init=False)  # [max_pos, head_dim/4]

    def __post_init__(self):
        if self.head_dim % 4 != 0:
            raise OddHeadDimError(f"head_dim {self.head_dim} must be divisible by 4")
        n_pairs = self.head_dim // 4  # pairs per axis half
        m = np.arange(n_pairs)
        self.freqs = self.base ** (-2.0 * m / (self.head_dim / 2))
        self.angles = np.arange(self.max_pos)[:, None] * self.freqs[None, :]


def _rotate_pairs(x, cos, sin):
    """Rotate consecutive pairs of the last axis; cos/sin broadcast to pairs."""
    shape = x.shape
    xp = x.reshape(*shape[:-1], shape[-1] // 2, 2)
    even, odd = xp[..., 0], xp[..., 1]
    out = np.empty_like(xp)
    out[..., 0] = even * cos - odd * sin
    out[..., 1] = even * sin + odd * cos
    return out.reshape(shape)


def rope2d_apply(x: np.ndarray, pos: tuple[int, int], table: RopeTable) -> np.ndarray:
    """Rotate one head vector [head_dim] for grid position (i, j).

    First half rotates by theta_m * i, second half by theta_m * j. Rotations
    are isometries, so the norm is preserved and attention logits between
    rotated queries/keys depend only on the positional offset.
    """
    if x.shape[-1] != table.head_dim:
        raise ShapeMismatchError(f"vector dim {x.shape[-1]} != head_dim {table.head_dim}")
    i, j = pos
    half = table.head_dim // 2
    ang_i = table.angles[i]
    ang_j = table.angles[j]
    out = np.empty_like(x)
    out[..., :half] = _rotate_pairs(x[..., :half], np.cos(ang_i), np.sin(ang_i))
    out[..., half:] = _rotate_pairs(x[..., half:], np.cos(ang_j), np.sin(ang_j))
    return out


def identity_rotary(x: np.ndarray) -> np.ndarray:
    """Global tokens bypass rotation entirely; exact identity."""
    return x


def stream_rope_tables(cfg, head_dim: int, base: float = 10000.0, dtype=np.float32):
    """Per-token cos/sin tables [L, head_dim/2] for the full token stream.

    Stream order is [CLS, registers, patches row-major]; global tokens get
    identity factors (cos=1, sin=0), patch token (i, j) gets row angles in
    the first half's pairs and column angles in the second half's.
    """
    table = RopeTable(head_dim=head_dim, max_pos=max(cfg.h, cfg.w), base=base)
    n_pairs = head_dim // 4
    length = cfg.n_tokens
    angles = np.zeros((length, head_dim // 2))
    k = 1 + cfg.n_reg
    for i in range(cfg.h):
        for j in range(cfg.w):
            angles[k, :n_pairs] = table.angles[i]
            angles[k, n_pairs:] = table.angles[j]
            k += 1
    return np.cos(angles).astype(dtype), np.sin(angles).astype(dtype)


def apply_rope_stream(x, cos, sin):
    """Rotate [B, H, L, head_dim] with per-token tables [L, head_dim/2]."""
    c = cos[None, None, :, :]
    s = sin[None, None, :, :]
    return _rotate_pairs(x, c, s)


def apply_rope_stream_bwd(dy, cos, sin):
    """Backward of apply_rope_stream: rotate the gradient by the inverse."""
    c = cos[None, None, :, :]
    s = sin[None, None, :, :]
    return _rotate_pairs(dy, c, -s)


@dataclass
class GlobalPosEmbeddings:
    """Trainable additive position table [1 + n_reg, d_model] for globals."""

    table: np.ndarray

    @staticmethod
    def init(n_reg: int, d_model: int, rng) -> "GlobalPosEmbeddings":
        return GlobalPosEmbeddings(
            table=rng.normal(0.0, 0.02, (1 + n_reg, d_model)).astype(np.float32)
        )


def add_global_pos(tokens: np.ndarray, g: GlobalPosEmbeddings) -> np.ndarray:
    """Elementwise sum of the global tokens with the learnable table."""
    if tokens.shape[-2:] != g.table.shape:
        raise ShapeMismatchError(
            f"tokens {tokens.shape[-2:]} vs table {g.table.shape}"
        )
    return tokens + g.table
