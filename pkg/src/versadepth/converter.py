"""Per-camera converter heads: relative depth features to metric depth.

Each camera owns a small converter. Its first conversion layer attends
from the relative-depth feature onto a learnable anchor matrix (one per
head, shared across windows, every entry initialized to 2e-2): the
attention weights form convex combinations of anchor rows, which are
output-projected and residually merged into the feature. The second
conversion layer repeats the pattern under a half-window shift, using
the first layer's attended-anchor map as its value source. A standard
transformer block and a positive 1x1 head finish the metric estimate.

Converters are independent per camera: adding one never touches the
trunk or the other cameras' parameters.
"""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .attention import (Mlp, PositionBias, TransformerBlock, WindowConfig,
                        attention_scale, merge_windows, partition_windows,
                        window_key_mask)
from .rng import Rng
from .tensor import Module, Tensor

ANCHOR_INIT = 2e-2


class ConversionLayer(Module):
    """Windowed attention whose values come from an anchor or a supplied map.

    value_source is one of:
      "anchor"   - learnable (heads, tokens, head_dim) matrix, shared by windows
      "supplied" - a pixel-aligned feature map passed to forward()
      "self"     - ordinary projection of the input tokens (ablation path)
    """

    def __init__(self, dim: int, cfg: WindowConfig, rng: Rng, value_source: str,
                 mlp_ratio: int = 4, scale_mode: str = "head_dim"):
        if value_source not in ("anchor", "supplied", "self"):
            raise ValueError(f"unknown value_source {value_source!r}")
        self.cfg = cfg
        self.scale_mode = scale_mode
        self.value_source = value_source
        self.wq = Tensor(rng.normal((dim, dim), std=0.02), requires_grad=True)
        self.bq = Tensor(np.zeros(dim), requires_grad=True)
        self.wk = Tensor(rng.normal((dim, dim), std=0.02), requires_grad=True)
        self.bk = Tensor(np.zeros(dim), requires_grad=True)
        # self-projection exists regardless of mode so the ablation flag can
        # flip without changing the parameter inventory
        self.wv = Tensor(rng.normal((dim, dim), std=0.02), requires_grad=True)
        self.bv = Tensor(np.zeros(dim), requires_grad=True)
        n = cfg.window_size * cfg.window_size
        p = dim // cfg.heads
        if value_source == "anchor":
            self.anchor = Tensor(np.full((cfg.heads, n, p), ANCHOR_INIT), requires_grad=True)
        self.wo = Tensor(rng.normal((dim, dim), std=0.02), requires_grad=True)
        self.bo = Tensor(np.zeros(dim), requires_grad=True)
        self.bias = PositionBias(cfg.window_size, cfg.heads, rng.split("bias"))
        self.norm2_g = Tensor(np.ones(dim), requires_grad=True)
        self.norm2_b = Tensor(np.zeros(dim), requires_grad=True)
        self.mlp = Mlp(dim, rng.split("mlp"), ratio=mlp_ratio)

    def forward(self, x: Tensor, value_map: Tensor | None = None):
        """Returns (output feature map, attended-value map).

        The attended-value map is the pre-residual attention output
        merged back to pixel layout; the caller may feed it to a
        following layer as that layer's value source.
        """
        b, _, h, wid = x.shape
        heads = self.cfg.heads
        tokens = partition_windows(x, self.cfg)
        mask = window_key_mask(h, wid, self.cfg)
        q = T.linear(tokens, self.wq, self.bq)
        k = T.linear(tokens, self.wk, self.bk)
        v_layout = "tokens"
        if self.value_source == "anchor":
            v = self.anchor  # (heads, n, p); broadcasts across window groups
            v_layout = "heads"
        elif self.value_source == "supplied":
            if value_map is None:
                raise ValueError("value_source='supplied' needs a value_map")
            v = partition_windows(value_map, self.cfg)
        else:
            v = T.linear(tokens, self.wv, self.bv)

        scale = attention_scale(q, heads, self.scale_mode)
        attended_tokens = T.attention_core(q, k, v, heads, scale, bias=self.bias.bias(),
                                           key_mask=mask, v_layout=v_layout)
        attended_map = merge_windows(attended_tokens, self.cfg, b, h, wid)

        out = tokens + T.linear(attended_tokens, self.wo, self.bo)
        out = out + self.mlp.forward(T.layer_norm(out, self.norm2_g, self.norm2_b))
        return merge_windows(out, self.cfg, b, h, wid), attended_map


class Converter(Module):
    """One camera's relative-to-metric conversion head."""

    def __init__(self, in_dim: int, dim: int, window: int, heads: int, rng: Rng,
                 mlp_ratio: int = 4, scale_mode: str = "head_dim",
                 use_anchor: bool = True):
        self.use_anchor = use_anchor
        self.in_w = Tensor(rng.normal((dim, in_dim), std=0.02), requires_grad=True)
        self.in_b = Tensor(np.zeros(dim), requires_grad=True)
        src1 = "anchor" if use_anchor else "self"
        src2 = "supplied" if use_anchor else "self"
        self.layer1 = ConversionLayer(dim, WindowConfig(window, 0, heads),
                                      rng.split("conv1"), src1, mlp_ratio, scale_mode)
        self.layer2 = ConversionLayer(dim, WindowConfig(window, window // 2, heads),
                                      rng.split("conv2"), src2, mlp_ratio, scale_mode)
        self.block = TransformerBlock(dim, window, heads, rng.split("block"),
                                      mlp_ratio, scale_mode)
        self.head_w = Tensor(rng.normal((1, dim), std=0.02), requires_grad=True)
        self.head_b = Tensor(np.zeros(1), requires_grad=True)

    def forward(self, z_rel: Tensor) -> Tensor:
        """(b, c, h, w) relative feature -> (b, h, w) positive metric depth."""
        x = T.channel_linear(z_rel, self.in_w, self.in_b)
        f1, attended = self.layer1.forward(x)
        f2, _ = self.layer2.forward(f1, attended)
        zm = self.block.forward(f2)
        logd = T.channel_linear(zm, self.head_w, self.head_b)
        depth = T.exp(T.clip(logd, -10.0, 10.0))
        b, _, h, w = depth.shape
        return T.reshape(depth, (b, h, w))
