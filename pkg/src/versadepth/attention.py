"""Windowed multi-head self-attention on image-shaped features.

Features are (batch, channels, height, width). Attention runs inside
non-overlapping square windows; alternate layers cyclically shift the
grid by half a window so information crosses window borders. Extents
that do not divide the window size are zero-padded and the padded
tokens are masked out of the score matrix.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import ShapeError
from .rng import Rng
from .tensor import Module, Tensor


@dataclass(frozen=True)
class WindowConfig:
    window_size: int
    shift: int
    heads: int


# -- window geometry -----------------------------------------------------

_mask_cache: dict = {}


def _padded_extent(n: int, w: int) -> int:
    return ((n + w - 1) // w) * w


def window_key_mask(h: int, w_extent: int, cfg: WindowConfig) -> np.ndarray | None:
    """Additive score mask (windows, 1, 1, tokens); None when nothing is padded."""
    w = cfg.window_size
    hp, wp = _padded_extent(h, w), _padded_extent(w_extent, w)
    if hp == h and wp == w_extent:
        return None
    key = (h, w_extent, w, cfg.shift)
    if key not in _mask_cache:
        valid = np.zeros((hp, wp), dtype=bool)
        valid[:h, :w_extent] = True
        if cfg.shift:
            valid = np.roll(valid, (-cfg.shift, -cfg.shift), axis=(0, 1))
        blocks = valid.reshape(hp // w, w, wp // w, w).transpose(0, 2, 1, 3)
        flat = blocks.reshape(-1, w * w)
        bias = np.where(flat, 0.0, -1e30)
        _mask_cache[key] = bias[:, None, None, :]
    return _mask_cache[key]


def partition_windows(x: Tensor, cfg: WindowConfig) -> Tensor:
    """(b, c, h, w) -> (b * windows, window_size**2, c) token stacks.

    Shifted configs roll the grid by -shift in both spatial axes before
    cutting windows, so with shift=1 the token at (0, 0) comes from
    source pixel (1, 1). Padding, when needed, happens before the roll.
    """
    return T.window_partition(x, cfg.window_size, cfg.shift)


def merge_windows(tokens: Tensor, cfg: WindowConfig, b: int, h: int, wid: int) -> Tensor:
    """Exact inverse of partition_windows for the same geometry."""
    return T.window_merge(tokens, cfg.window_size, cfg.shift, b, h, wid)


# -- relative position bias ----------------------------------------------

def relative_index_map(w: int) -> np.ndarray:
    """(w*w, w*w) table indices for pairwise relative offsets."""
    coords = np.stack(np.meshgrid(np.arange(w), np.arange(w), indexing="ij"), axis=-1)
    coords = coords.reshape(-1, 2)
    rel = coords[:, None, :] - coords[None, :, :] + (w - 1)
    return rel[..., 0] * (2 * w - 1) + rel[..., 1]


class PositionBias(Module):
    """Learnable bias over relative offsets, one scalar per head per offset."""

    def __init__(self, w: int, heads: int, rng: Rng):
        self.table = Tensor(rng.normal(((2 * w - 1) ** 2, heads), std=0.02), requires_grad=True)
        self._index = relative_index_map(w)

    def bias(self) -> Tensor:
        gathered = T.take_rows(self.table, self._index)  # (n, n, heads)
        return T.transpose(gathered, (2, 0, 1))


# -- core attention --------------------------------------------------------

def attention_scale(q_tokens: Tensor, heads: int, scale_mode: str) -> float:
    """Score divisor: "head_dim" uses sqrt(per-head width), "token_count"
    uses sqrt(tokens per window)."""
    if scale_mode == "head_dim":
        return 1.0 / math.sqrt(q_tokens.shape[-1] // heads)
    if scale_mode == "token_count":
        return 1.0 / math.sqrt(q_tokens.shape[-2])
    raise ShapeError(f"unknown scale_mode {scale_mode!r}")


def attend(
    q: Tensor,
    k: Tensor,
    v: Tensor,
    out_w: Tensor,
    out_b: Tensor,
    heads: int,
    bias: Tensor | None = None,
    scale_mode: str = "head_dim",
    key_mask: np.ndarray | None = None,
) -> Tensor:
    """Multi-head attention over (groups, tokens, channels) stacks.

    Heads are split off inside the fused core, re-concatenated, and
    passed through the output projection.
    """
    scale = attention_scale(q, heads, scale_mode)
    ctx = T.attention_core(q, k, v, heads, scale, bias=bias, key_mask=key_mask)
    return T.linear(ctx, out_w, out_b)


class Mlp(Module):
    """Two-layer pointwise feed-forward with GELU, hidden = ratio * width."""

    def __init__(self, dim: int, rng: Rng, ratio: int = 4, out_dim: int | None = None):
        hidden = dim * ratio
        out_dim = dim if out_dim is None else out_dim
        self.w1 = Tensor(rng.normal((hidden, dim), std=0.02), requires_grad=True)
        self.b1 = Tensor(np.zeros(hidden), requires_grad=True)
        self.w2 = Tensor(rng.normal((out_dim, hidden), std=0.02), requires_grad=True)
        self.b2 = Tensor(np.zeros(out_dim), requires_grad=True)

    def forward(self, x: Tensor) -> Tensor:
        return T.mlp_pair(x, self.w1, self.b1, self.w2, self.b2)


class AttentionLayer(Module):
    """One pre-norm windowed attention sub-layer plus its MLP sub-layer."""

    def __init__(self, dim: int, cfg: WindowConfig, rng: Rng, mlp_ratio: int = 4,
                 scale_mode: str = "head_dim"):
        self.cfg = cfg
        self.scale_mode = scale_mode
        self.norm1_g = Tensor(np.ones(dim), requires_grad=True)
        self.norm1_b = Tensor(np.zeros(dim), requires_grad=True)
        self.wq = Tensor(rng.normal((dim, dim), std=0.02), requires_grad=True)
        self.wk = Tensor(rng.normal((dim, dim), std=0.02), requires_grad=True)
        self.wv = Tensor(rng.normal((dim, dim), std=0.02), requires_grad=True)
        self.bq = Tensor(np.zeros(dim), requires_grad=True)
        self.bk = Tensor(np.zeros(dim), requires_grad=True)
        self.bv = Tensor(np.zeros(dim), requires_grad=True)
        self.wo = Tensor(rng.normal((dim, dim), std=0.02), requires_grad=True)
        self.bo = Tensor(np.zeros(dim), requires_grad=True)
        self.bias = PositionBias(cfg.window_size, cfg.heads, rng.split("bias"))
        self.norm2_g = Tensor(np.ones(dim), requires_grad=True)
        self.norm2_b = Tensor(np.zeros(dim), requires_grad=True)
        self.mlp = Mlp(dim, rng.split("mlp"), ratio=mlp_ratio)

    def forward(self, x: Tensor) -> Tensor:
        b, c, h, wid = x.shape
        tokens = partition_windows(x, self.cfg)
        mask = window_key_mask(h, wid, self.cfg)
        t = T.layer_norm(tokens, self.norm1_g, self.norm1_b)
        q = T.linear(t, self.wq, self.bq)
        k = T.linear(t, self.wk, self.bk)
        v = T.linear(t, self.wv, self.bv)
        ctx = attend(q, k, v, self.wo, self.bo, self.cfg.heads, bias=self.bias.bias(),
                     scale_mode=self.scale_mode, key_mask=mask)
        tokens = tokens + ctx
        tokens = tokens + self.mlp.forward(T.layer_norm(tokens, self.norm2_g, self.norm2_b))
        return merge_windows(tokens, self.cfg, b, h, wid)


class TransformerBlock(Module):
    """Unshifted attention layer followed by a half-window shifted one."""

    def __init__(self, dim: int, window: int, heads: int, rng: Rng, mlp_ratio: int = 4,
                 scale_mode: str = "head_dim"):
        self.layer1 = AttentionLayer(
            dim, WindowConfig(window, 0, heads), rng.split("l1"), mlp_ratio, scale_mode)
        self.layer2 = AttentionLayer(
            dim, WindowConfig(window, window // 2, heads), rng.split("l2"), mlp_ratio, scale_mode)

    def forward(self, x: Tensor) -> Tensor:
        return self.layer2.forward(self.layer1.forward(x))
