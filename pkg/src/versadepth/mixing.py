"""Decoder stages that mix encoder and decoder attention streams.

Each mixing layer forms its queries and keys as learnable convex-style
blends of encoder-derived and decoder-derived projections,

    q = alpha * norm(q_enc) + (1 - alpha) * norm(q_dec)
    k = beta  * norm(k_enc) + (1 - beta)  * norm(k_dec)
    v = gamma * v_enc       + (1 - gamma) * v_dec

where norm is layer normalization over the projected width and the
values stay unnormalized. The blend weights are scalar parameters,
initialized to 0.5 and trained without clamping. With all three at 0
the layer collapses to plain windowed self-attention over the decoder
stream; with alpha = beta = 1, gamma = 0 it reproduces the fixed
encoder-queries/decoder-values wiring that earlier decoders hard-coded.

A mixer stage doubles spatial resolution first: sub-pixel rearrangement
(r = 2) followed by a 1x1 projection to half the incoming channel
count, then two mixing layers, unshifted and half-window shifted.
"""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .attention import (Mlp, PositionBias, WindowConfig, attend, merge_windows,
                        partition_windows, window_key_mask)
from .rng import Rng
from .tensor import Module, Tensor


class MixCoefficients(Module):
    """Scalar blend weights for queries, keys, values."""

    def __init__(self, alpha: float = 0.5, beta: float = 0.5, gamma: float = 0.5,
                 learnable: bool = True):
        self.alpha = Tensor(np.float64(alpha), requires_grad=learnable)
        self.beta = Tensor(np.float64(beta), requires_grad=learnable)
        self.gamma = Tensor(np.float64(gamma), requires_grad=learnable)

    def values(self) -> tuple:
        return (float(self.alpha.data), float(self.beta.data), float(self.gamma.data))


class MixingLayer(Module):
    """One windowed cross-stream attention layer with residual MLP.

    enc_dim is the channel width of the encoder skip feature; dim is the
    operating width (the decoder stream width), and both projections map
    into dim so the per-head blend is well typed.
    """

    def __init__(self, enc_dim: int, dim: int, cfg: WindowConfig, rng: Rng,
                 mlp_ratio: int = 4, scale_mode: str = "head_dim",
                 coefficients: MixCoefficients | None = None):
        self.cfg = cfg
        self.scale_mode = scale_mode
        self.disable_mixing = False
        self.coef = coefficients if coefficients is not None else MixCoefficients()
        for name in ("q", "k", "v"):
            setattr(self, f"w{name}e",
                    Tensor(rng.normal((dim, enc_dim), std=0.02), requires_grad=True))
            setattr(self, f"b{name}e", Tensor(np.zeros(dim), requires_grad=True))
            setattr(self, f"w{name}d",
                    Tensor(rng.normal((dim, dim), std=0.02), requires_grad=True))
            setattr(self, f"b{name}d", Tensor(np.zeros(dim), requires_grad=True))
        # separate normalizers for each of the four normalized streams
        for name in ("qe", "qd", "ke", "kd"):
            setattr(self, f"ln_{name}_g", Tensor(np.ones(dim), requires_grad=True))
            setattr(self, f"ln_{name}_b", Tensor(np.zeros(dim), requires_grad=True))
        self.wo = Tensor(rng.normal((dim, dim), std=0.02), requires_grad=True)
        self.bo = Tensor(np.zeros(dim), requires_grad=True)
        self.bias = PositionBias(cfg.window_size, cfg.heads, rng.split("bias"))
        self.norm2_g = Tensor(np.ones(dim), requires_grad=True)
        self.norm2_b = Tensor(np.zeros(dim), requires_grad=True)
        self.mlp = Mlp(dim, rng.split("mlp"), ratio=mlp_ratio)

    def forward(self, z_enc: Tensor, z_dec: Tensor) -> Tensor:
        b, _, h, wid = z_dec.shape
        if z_enc.shape[2:] != z_dec.shape[2:]:
            from .errors import ShapeError
            raise ShapeError(
                f"mixing inputs disagree spatially: {z_enc.shape} vs {z_dec.shape}")
        tok_d = partition_windows(z_dec, self.cfg)
        mask = window_key_mask(h, wid, self.cfg)
        heads = self.cfg.heads

        q_d = T.layer_norm(T.linear(tok_d, self.wqd, self.bqd), self.ln_qd_g, self.ln_qd_b)
        k_d = T.layer_norm(T.linear(tok_d, self.wkd, self.bkd), self.ln_kd_g, self.ln_kd_b)
        v_d = T.linear(tok_d, self.wvd, self.bvd)
        if self.disable_mixing:
            q, k, v = q_d, k_d, v_d
        else:
            tok_e = partition_windows(z_enc, self.cfg)
            q_e = T.layer_norm(T.linear(tok_e, self.wqe, self.bqe), self.ln_qe_g, self.ln_qe_b)
            k_e = T.layer_norm(T.linear(tok_e, self.wke, self.bke), self.ln_ke_g, self.ln_ke_b)
            v_e = T.linear(tok_e, self.wve, self.bve)
            q = T.blend(self.coef.alpha, q_e, q_d)
            k = T.blend(self.coef.beta, k_e, k_d)
            v = T.blend(self.coef.gamma, v_e, v_d)

        ctx = attend(q, k, v, self.wo, self.bo, heads, bias=self.bias.bias(),
                     scale_mode=self.scale_mode, key_mask=mask)
        tokens = tok_d + ctx
        tokens = tokens + self.mlp.forward(T.layer_norm(tokens, self.norm2_g, self.norm2_b))
        return merge_windows(tokens, self.cfg, b, h, wid)


class FrequencyMixer(Module):
    """Upsample the decoder stream 2x and fuse it with an encoder skip.

    Input decoder width c_d becomes c_d // 4 after sub-pixel shuffling
    and is projected to c_d // 2, the stage's operating width; the stage
    output keeps that width, so three chained stages walk the channel
    ladder c, c/2, c/4, c/8.
    """

    def __init__(self, enc_dim: int, dec_dim: int, window: int, heads: int, rng: Rng,
                 mlp_ratio: int = 4, scale_mode: str = "head_dim"):
        if dec_dim % 4 != 0:
            from .errors import ShapeError
            raise ShapeError(f"decoder width {dec_dim} must be divisible by 4")
        self.out_dim = dec_dim // 2
        self.up_w = Tensor(rng.normal((self.out_dim, dec_dim // 4), std=0.02),
                           requires_grad=True)
        self.up_b = Tensor(np.zeros(self.out_dim), requires_grad=True)
        self.mix1 = MixingLayer(enc_dim, self.out_dim, WindowConfig(window, 0, heads),
                                rng.split("mix1"), mlp_ratio, scale_mode)
        self.mix2 = MixingLayer(enc_dim, self.out_dim,
                                WindowConfig(window, window // 2, heads),
                                rng.split("mix2"), mlp_ratio, scale_mode)

    def upsample(self, z_dec: Tensor) -> Tensor:
        return T.channel_linear(T.pixel_shuffle(z_dec, 2), self.up_w, self.up_b)

    def forward(self, z_enc: Tensor, z_dec: Tensor) -> Tensor:
        up = self.upsample(z_dec)
        x = self.mix1.forward(z_enc, up)
        return self.mix2.forward(z_enc, x)
