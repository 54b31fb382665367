"""Windowed self-attention: partition/reverse, shift masking, and the CST block.

The shifted unit cyclically rolls the map by -shift before tiling and adds
a -100 logit bias between any two tokens whose pre-shift window ids differ,
so cross-origin attention weights vanish. Padding to a window multiple is
zero-filled bottom/right and recorded for exact reversal.
"""

from dataclasses import dataclass

import numpy as np

from . import functional as F
from .blocks import CBS
from .errors import ContractError, ShapeError
from .nn import LayerNorm, Linear, Module
from .tensor import Tensor


@dataclass
class WindowGrid:
    """Tokenized windows plus everything needed to reverse the tiling."""

    windows: Tensor  # (B * num_windows, M*M, C)
    m: int
    shift: int
    batch: int
    origin_hw: tuple
    padded_hw: tuple

    @property
    def num_windows(self):
        hp, wp = self.padded_hw
        return (hp // self.m) * (wp // self.m)


def _pad_to_multiple(hw, m):
    h, w = hw
    return (-h % m, -w % m)


def _partition_tokens(t, m, shift):
    """(B,H,W,C) tokens -> WindowGrid of (B*nW, M*M, C)."""
    b, h, w, c = t.shape
    ph, pw = _pad_to_multiple((h, w), m)
    if ph or pw:
        t = t.pad(((0, 0), (0, ph), (0, pw), (0, 0)))
    hp, wp = h + ph, w + pw
    if shift:
        t = t.roll((-shift, -shift), (1, 2))
    nh, nw = hp // m, wp // m
    win = t.reshape(b, nh, m, nw, m, c).transpose(0, 1, 3, 2, 4, 5).reshape(b * nh * nw, m * m, c)
    return WindowGrid(win, m, shift, b, (h, w), (hp, wp))


def _reverse_tokens(grid, windows=None):
    """Inverse of :func:`_partition_tokens`, back to (B,H,W,C)."""
    win = grid.windows if windows is None else windows
    m, b = grid.m, grid.batch
    h, w = grid.origin_hw
    hp, wp = grid.padded_hw
    nh, nw = hp // m, wp // m
    if win.shape != (b * nh * nw, m * m, win.shape[-1]):
        raise ContractError(f"window tensor {win.shape} inconsistent with grid {(b * nh * nw, m * m)}")
    t = win.reshape(b, nh, nw, m, m, win.shape[-1]).transpose(0, 1, 3, 2, 4, 5).reshape(b, hp, wp, win.shape[-1])
    if grid.shift:
        t = t.roll((grid.shift, grid.shift), (1, 2))
    if (hp, wp) != (h, w):
        t = t[:, :h, :w, :]
    return t


def window_partition(x, m, shift=0):
    """Tile a (B,C,H,W) map into M x M token windows, padding as needed."""
    if m < 1:
        raise ContractError(f"window size must be >= 1, got {m}")
    if shift not in (0, m // 2):
        raise ContractError(f"shift must be 0 or {m // 2} for window size {m}, got {shift}")
    return _partition_tokens(x.transpose(0, 2, 3, 1), m, shift)


def window_reverse(grid):
    """Reconstruct the original (B,C,H,W) map from a WindowGrid."""
    return _reverse_tokens(grid).transpose(0, 3, 1, 2)


def shift_attention_mask(hp, wp, m, shift, dtype=np.float32):
    """Additive (nW, 1, M*M, M*M) logit bias: -100 across pre-shift origins."""
    ids = (np.arange(hp)[:, None] // m) * (wp // m) + (np.arange(wp)[None, :] // m)
    ids = np.roll(ids, (-shift, -shift), (0, 1))
    nh, nw = hp // m, wp // m
    ids = ids.reshape(nh, m, nw, m).transpose(0, 2, 1, 3).reshape(nh * nw, m * m)
    mask = np.where(ids[:, :, None] != ids[:, None, :], -100.0, 0.0).astype(dtype)
    return mask[:, None, :, :]


class Mlp(Module):
    def __init__(self, dim, ratio=2, rng=None):
        super().__init__()
        self.fc1 = Linear(dim, dim * ratio, rng=rng)
        self.fc2 = Linear(dim * ratio, dim, rng=rng)

    def forward(self, x):
        return self.fc2(F.silu(self.fc1(x)))


class SwinUnit(Module):
    """One pre-norm attention+MLP unit over window tokens of a (B,C,H,W) map."""

    def __init__(self, dim, m, heads, shift, mlp_ratio=2, rng=None):
        super().__init__()
        if dim % heads:
            raise ShapeError(f"channels {dim} not divisible by {heads} heads")
        self.dim = dim
        self.m = m
        self.heads = heads
        self.shift = shift
        self.norm1 = LayerNorm(dim)
        self.qkv = Linear(dim, 3 * dim, rng=rng)
        self.proj = Linear(dim, dim, rng=rng)
        self.norm2 = LayerNorm(dim)
        self.mlp = Mlp(dim, mlp_ratio, rng=rng)

    def _attend(self, tokens):
        b = tokens.shape[0]
        grid = _partition_tokens(tokens, self.m, self.shift)
        qkv = self.qkv(grid.windows)
        d = self.dim
        q, k, v = qkv[:, :, :d], qkv[:, :, d : 2 * d], qkv[:, :, 2 * d :]
        mask = None
        if self.shift:
            mask = shift_attention_mask(*grid.padded_hw, self.m, self.shift, dtype=tokens.dtype)
            mask = np.tile(mask, (b, 1, 1, 1))
        attended = F.attention(q, k, v, self.heads, mask=mask)
        return _reverse_tokens(grid, self.proj(attended))

    def forward(self, x):
        t = x.transpose(0, 2, 3, 1)
        t = t + self._attend(self.norm1(t))
        t = t + self.mlp(self.norm2(t))
        return t.transpose(0, 3, 1, 2)


class SwinBlock(Module):
    """Plain-window unit followed by a half-window-shifted unit."""

    def __init__(self, dim, m=4, heads=4, mlp_ratio=2, rng=None):
        super().__init__()
        self.unit1 = SwinUnit(dim, m, heads, 0, mlp_ratio, rng=rng)
        self.unit2 = SwinUnit(dim, m, heads, m // 2, mlp_ratio, rng=rng)

    def forward(self, x):
        return self.unit2(self.unit1(x))


class CST(Module):
    """Parallel 1x1 CBS branches, one routed through windowed attention.

    The branches are concatenated and merged back to the slot width by a
    trailing 1x1 CBS so the block is a drop-in replacement.
    """

    def __init__(self, c1, c2, m=4, heads=4, rng=None):
        super().__init__()
        c_ = c2 // 2
        self.cv_a = CBS(c1, c_, 1, rng=rng)
        self.cv_b = CBS(c1, c_, 1, rng=rng)
        self.swin = SwinBlock(c_, m=m, heads=heads, rng=rng)
        self.cv_out = CBS(2 * c_, c2, 1, rng=rng)
        self.c2 = c2

    def forward(self, x):
        a = self.cv_a(x)
        b = self.swin(self.cv_b(x))
        return self.cv_out(F.concat([a, b], axis=1))
