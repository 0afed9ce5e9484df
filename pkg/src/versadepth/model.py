"""Model assembly: encoder trunk, pooled decoder stem, heads, checkpoints.

The trunk (encoder + pyramid pooling + three mixer stages + normalized
head) is camera agnostic: it maps an RGB image to a relative-depth
feature at quarter resolution and a normalized depth estimate at full
resolution. Metric output comes either from per-camera converter heads
attached to the trunk, from a direct metric head (single-network and
separate-network baselines), or from per-camera decoder stacks sharing
one encoder (multi-decoder baseline).

Checkpoint layout (little-endian throughout):
    magic b"VDE1" | u32 version | u32 json_len | config json (utf-8)
    u32 entry_count | entries: u16 name_len, name, u8 ndim, u32 dims...,
    u64 offset | raw float32 parameter blobs, offsets relative to blob start
"""

from __future__ import annotations

import dataclasses
import json
import struct
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .attention import TransformerBlock
from .converter import Converter
from .errors import (CameraLookupError, DuplicateCameraError, FormatError,
                     ShapeError)
from .mixing import FrequencyMixer
from .rng import Rng
from .tensor import Module, Tensor


@dataclass(frozen=True)
class ModelConfig:
    widths: tuple = (32, 64, 128, 256)
    depths: tuple = (1, 1, 1, 1)
    enc_heads: tuple = (2, 2, 2, 2)
    window: int = 4
    patch: int = 4
    decoder_width: int = 256
    mixer_heads: tuple = (2, 2, 2)
    norm_head_heads: int = 2
    converter_width: int = 32
    converter_heads: int = 2
    mlp_ratio: int = 4
    scale_mode: str = "head_dim"

    @property
    def zr_width(self) -> int:
        return self.decoder_width // 8

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @staticmethod
    def from_dict(d: dict) -> "ModelConfig":
        d = dict(d)
        for key in ("widths", "depths", "enc_heads", "mixer_heads"):
            d[key] = tuple(d[key])
        return ModelConfig(**d)


def micro_config() -> ModelConfig:
    """Smallest config that exercises every code path; for gradient checks."""
    return ModelConfig(widths=(4, 8, 16, 32), depths=(1, 1, 1, 1),
                       enc_heads=(1, 2, 2, 2), window=2, decoder_width=32,
                       mixer_heads=(2, 2, 1), norm_head_heads=2,
                       converter_width=8, converter_heads=2)


def toy_config() -> ModelConfig:
    return ModelConfig()


def paper_scale_config() -> ModelConfig:
    """Full-size config: 480x640 inputs, quarter-resolution 64-wide output.

    depths counts shifted pairs, so (1, 1, 18, 1) is 2/2/36/2 attention
    layers per stage.
    """
    return ModelConfig(widths=(128, 256, 512, 1024), depths=(1, 1, 18, 1),
                       enc_heads=(4, 8, 16, 32), window=7, decoder_width=512,
                       mixer_heads=(8, 4, 2), norm_head_heads=6,
                       converter_width=184, converter_heads=8)


# -- encoder ----------------------------------------------------------------


class PatchEmbed(Module):
    def __init__(self, width: int, patch: int, rng: Rng):
        self.patch = patch
        self.w = Tensor(rng.normal((width, 3 * patch * patch), std=0.02), requires_grad=True)
        self.b = Tensor(np.zeros(width), requires_grad=True)
        self.norm_g = Tensor(np.ones(width), requires_grad=True)
        self.norm_b = Tensor(np.zeros(width), requires_grad=True)

    def forward(self, image: Tensor) -> Tensor:
        x = T.channel_linear(T.pixel_unshuffle(image, self.patch), self.w, self.b)
        return _channel_layer_norm(x, self.norm_g, self.norm_b)


class PatchMerging(Module):
    def __init__(self, width: int, rng: Rng):
        self.norm_g = Tensor(np.ones(4 * width), requires_grad=True)
        self.norm_b = Tensor(np.zeros(4 * width), requires_grad=True)
        self.w = Tensor(rng.normal((2 * width, 4 * width), std=0.02), requires_grad=True)

    def forward(self, x: Tensor) -> Tensor:
        x = T.pixel_unshuffle(x, 2)
        x = _channel_layer_norm(x, self.norm_g, self.norm_b)
        return T.channel_linear(x, self.w)


def _channel_layer_norm(x: Tensor, g: Tensor, b: Tensor) -> Tensor:
    perm = (0, 2, 3, 1)
    back = (0, 3, 1, 2)
    return T.transpose(T.layer_norm(T.transpose(x, perm), g, b), back)


class Encoder(Module):
    """Four windowed-attention stages with patch merging between them."""

    def __init__(self, cfg: ModelConfig, rng: Rng):
        self.embed = PatchEmbed(cfg.widths[0], cfg.patch, rng.split("embed"))
        self.stages = []
        self.merges = []
        for i, width in enumerate(cfg.widths):
            blocks = [TransformerBlock(width, cfg.window, cfg.enc_heads[i],
                                       rng.split(f"s{i}b{j}"), cfg.mlp_ratio,
                                       cfg.scale_mode)
                      for j in range(cfg.depths[i])]
            self.stages.append(blocks)
            if i < len(cfg.widths) - 1:
                self.merges.append(PatchMerging(width, rng.split(f"merge{i}")))

    def forward(self, image: Tensor) -> list:
        x = self.embed.forward(image)
        skips = []
        for i, blocks in enumerate(self.stages):
            for block in blocks:
                x = block.forward(x)
            skips.append(x)
            if i < len(self.merges):
                x = self.merges[i].forward(x)
        return skips  # resolutions 1/4, 1/8, 1/16, 1/32


class PyramidPooling(Module):
    """Multi-bin average pooling fused to the decoder stem width."""

    BINS = (1, 2, 3, 6)

    def __init__(self, in_width: int, out_width: int, rng: Rng):
        branch = in_width // 4
        self.branch_ws = [Tensor(rng.normal((branch, in_width), std=0.02), requires_grad=True)
                          for _ in self.BINS]
        self.branch_bs = [Tensor(np.zeros(branch), requires_grad=True) for _ in self.BINS]
        self.fuse_w = Tensor(rng.normal((out_width, 2 * in_width), std=0.02), requires_grad=True)
        self.fuse_b = Tensor(np.zeros(out_width), requires_grad=True)

    def forward(self, x: Tensor) -> Tensor:
        h, w = x.shape[2], x.shape[3]
        parts = [x]
        for bins, bw, bb in zip(self.BINS, self.branch_ws, self.branch_bs):
            pooled = T.adaptive_avg_pool2d(x, bins)
            parts.append(T.bilinear_resize(T.channel_linear(pooled, bw, bb), h, w))
        return T.channel_linear(T.concat(parts, axis=1), self.fuse_w, self.fuse_b)


class DepthHead(Module):
    """Transformer block over concat(feature, first skip) plus a 1x1 head.

    positive=False emits an unconstrained normalized-depth map; True
    squashes through exp(clamp) for metric output.
    """

    def __init__(self, in_dim: int, window: int, heads: int, rng: Rng,
                 positive: bool, mlp_ratio: int = 4, scale_mode: str = "head_dim"):
        self.positive = positive
        self.block = TransformerBlock(in_dim, window, heads, rng.split("block"),
                                      mlp_ratio, scale_mode)
        self.w = Tensor(rng.normal((1, in_dim), std=0.02), requires_grad=True)
        self.b = Tensor(np.zeros(1), requires_grad=True)

    def forward(self, feat: Tensor, skip: Tensor) -> Tensor:
        x = self.block.forward(T.concat([feat, skip], axis=1))
        x = T.channel_linear(x, self.w, self.b)
        if self.positive:
            x = T.exp(T.clip(x, -10.0, 10.0))
        b, _, h, w = x.shape
        return T.reshape(x, (b, h, w))


def _resize_to(x_low: Tensor, h: int, w: int) -> Tensor:
    b, hl, wl = x_low.shape
    up = T.bilinear_resize(T.reshape(x_low, (b, 1, hl, wl)), h, w)
    return T.reshape(up, (b, h, w))


class Crde(Module):
    """Camera-invariant trunk: image -> (relative feature, normalized map)."""

    def __init__(self, cfg: ModelConfig, rng: Rng):
        self.cfg = cfg
        self.encoder = Encoder(cfg, rng.split("encoder"))
        self.pooling = PyramidPooling(cfg.widths[3], cfg.decoder_width, rng.split("pool"))
        widths = [cfg.decoder_width, cfg.decoder_width // 2, cfg.decoder_width // 4]
        enc_dims = [cfg.widths[2], cfg.widths[1], cfg.widths[0]]
        self.mixers = [FrequencyMixer(enc_dims[i], widths[i], cfg.window,
                                      cfg.mixer_heads[i], rng.split(f"mixer{i}"),
                                      cfg.mlp_ratio, cfg.scale_mode)
                       for i in range(3)]
        self.norm_head = DepthHead(cfg.zr_width + cfg.widths[0], cfg.window,
                                   cfg.norm_head_heads, rng.split("norm_head"),
                                   positive=False, mlp_ratio=cfg.mlp_ratio,
                                   scale_mode=cfg.scale_mode)

    def trunk(self, image: Tensor):
        """Returns (z_rel, e1, (h, w)) with z_rel and e1 cropped to ceil(hw/4)."""
        b, c, h, w = image.shape
        if c != 3:
            raise ShapeError(f"expected (b, 3, h, w) image, got {image.shape}")
        h32 = ((h + 31) // 32) * 32
        w32 = ((w + 31) // 32) * 32
        if h32 != h or w32 != w:
            image = T.pad(image, ((0, 0), (0, 0), (0, h32 - h), (0, w32 - w)))
        skips = self.encoder.forward(image)
        x = self.pooling.forward(skips[3])
        for mixer, skip in zip(self.mixers, (skips[2], skips[1], skips[0])):
            x = mixer.forward(skip, x)
        h4, w4 = -(-h // 4), -(-w // 4)
        z_rel = x[:, :, :h4, :w4]
        e1 = skips[0][:, :, :h4, :w4]
        return z_rel, e1, (h, w)

    def forward(self, image: Tensor):
        z_rel, e1, (h, w) = self.trunk(image)
        n_low = self.norm_head.forward(z_rel, e1)
        return z_rel, e1, _resize_to(n_low, h, w)


MODEL_KINDS = {}


class VdeModel(Module):
    """Trunk plus per-camera converters and an optional direct metric head."""

    kind = "vde"

    def __init__(self, cfg: ModelConfig, rng: Rng, with_direct_head: bool = False,
                 use_anchor: bool = True):
        self.cfg = cfg
        self.use_anchor = use_anchor
        self.crde = Crde(cfg, rng.split("crde"))
        self.r2mcs: dict[str, Converter] = {}
        self.direct_head = None
        if with_direct_head:
            self.direct_head = DepthHead(cfg.zr_width + cfg.widths[0], cfg.window,
                                         cfg.norm_head_heads, rng.split("direct_head"),
                                         positive=True, mlp_ratio=cfg.mlp_ratio,
                                         scale_mode=cfg.scale_mode)

    def add_camera(self, camera: str, rng: Rng) -> Converter:
        if camera in self.r2mcs:
            raise DuplicateCameraError(camera)
        conv = Converter(self.cfg.zr_width, self.cfg.converter_width, self.cfg.window,
                         self.cfg.converter_heads, rng, self.cfg.mlp_ratio,
                         self.cfg.scale_mode, use_anchor=self.use_anchor)
        self.r2mcs[camera] = conv
        return conv

    def cameras(self) -> list:
        return list(self.r2mcs.keys())

    def forward(self, image: Tensor, camera: str | None = None):
        """Returns (metric map or None, normalized map), both (b, h, w)."""
        z_rel, e1, n_hat = self.crde.forward(image)
        h, w = image.shape[2], image.shape[3]
        if camera is None:
            return None, n_hat
        if camera not in self.r2mcs:
            raise CameraLookupError(f"camera {camera!r} not registered; have {self.cameras()}")
        m_low = self.r2mcs[camera].forward(z_rel)
        return _resize_to(m_low, h, w), n_hat

    def direct_forward(self, image: Tensor) -> Tensor:
        if self.direct_head is None:
            raise CameraLookupError("model has no direct metric head")
        z_rel, e1, (h, w) = self.crde.trunk(image)
        return _resize_to(self.direct_head.forward(z_rel, e1), h, w)

    def count_params(self) -> dict:
        counts = {"crde": self.crde.param_count()}
        if self.direct_head is not None:
            counts["direct_head"] = self.direct_head.param_count()
        for cam, conv in self.r2mcs.items():
            counts[f"r2mc.{cam}"] = conv.param_count()
        counts["total"] = sum(counts.values())
        return counts

    def meta(self) -> dict:
        return {"kind": self.kind, "config": self.cfg.to_dict(),
                "cameras": self.cameras(), "direct_head": self.direct_head is not None,
                "use_anchor": self.use_anchor}

    @staticmethod
    def build(meta: dict, rng: Rng) -> "VdeModel":
        model = VdeModel(ModelConfig.from_dict(meta["config"]), rng,
                         with_direct_head=meta.get("direct_head", False),
                         use_anchor=meta.get("use_anchor", True))
        for cam in meta.get("cameras", []):
            model.add_camera(cam, rng.split(f"r2mc.{cam}"))
        return model


class MultiDecoderModel(Module):
    """Shared encoder and pooling, one full decoder stack per camera."""

    kind = "multi_decoder"

    def __init__(self, cfg: ModelConfig, rng: Rng):
        self.cfg = cfg
        self.encoder = Encoder(cfg, rng.split("encoder"))
        self.pooling = PyramidPooling(cfg.widths[3], cfg.decoder_width, rng.split("pool"))
        self.decoders: dict[str, Module] = {}

    def add_camera(self, camera: str, rng: Rng):
        if camera in self.decoders:
            raise DuplicateCameraError(camera)
        self.decoders[camera] = _DecoderStack(self.cfg, rng)
        return self.decoders[camera]

    def cameras(self) -> list:
        return list(self.decoders.keys())

    def trunk(self, image: Tensor):
        b, c, h, w = image.shape
        h32, w32 = ((h + 31) // 32) * 32, ((w + 31) // 32) * 32
        if h32 != h or w32 != w:
            image = T.pad(image, ((0, 0), (0, 0), (0, h32 - h), (0, w32 - w)))
        skips = self.encoder.forward(image)
        z_dec = self.pooling.forward(skips[3])
        return skips, z_dec, (h, w)

    def forward(self, image: Tensor, camera: str) -> Tensor:
        if camera not in self.decoders:
            raise CameraLookupError(f"camera {camera!r} not registered; have {self.cameras()}")
        skips, z_dec, (h, w) = self.trunk(image)
        m_low = self.decoders[camera].forward(skips, z_dec, (h, w))
        return _resize_to(m_low, h, w)

    def count_params(self) -> dict:
        counts = {"encoder": self.encoder.param_count() + self.pooling.param_count()}
        for cam, dec in self.decoders.items():
            counts[f"decoder.{cam}"] = dec.param_count()
        counts["total"] = sum(counts.values())
        return counts

    def meta(self) -> dict:
        return {"kind": self.kind, "config": self.cfg.to_dict(), "cameras": self.cameras()}

    @staticmethod
    def build(meta: dict, rng: Rng) -> "MultiDecoderModel":
        model = MultiDecoderModel(ModelConfig.from_dict(meta["config"]), rng)
        for cam in meta.get("cameras", []):
            model.add_camera(cam, rng.split(f"decoder.{cam}"))
        return model


class _DecoderStack(Module):
    """Three mixer stages plus a positive depth head; one camera's decoder."""

    def __init__(self, cfg: ModelConfig, rng: Rng):
        widths = [cfg.decoder_width, cfg.decoder_width // 2, cfg.decoder_width // 4]
        enc_dims = [cfg.widths[2], cfg.widths[1], cfg.widths[0]]
        self.mixers = [FrequencyMixer(enc_dims[i], widths[i], cfg.window,
                                      cfg.mixer_heads[i], rng.split(f"mixer{i}"),
                                      cfg.mlp_ratio, cfg.scale_mode)
                       for i in range(3)]
        self.head = DepthHead(cfg.zr_width + cfg.widths[0], cfg.window,
                              cfg.norm_head_heads, rng.split("head"), positive=True,
                              mlp_ratio=cfg.mlp_ratio, scale_mode=cfg.scale_mode)

    def forward(self, skips: list, z_dec: Tensor, hw: tuple) -> Tensor:
        x = z_dec
        for mixer, skip in zip(self.mixers, (skips[2], skips[1], skips[0])):
            x = mixer.forward(skip, x)
        h4, w4 = -(-hw[0] // 4), -(-hw[1] // 4)
        return self.head.forward(x[:, :, :h4, :w4], skips[0][:, :, :h4, :w4])


MODEL_KINDS["vde"] = VdeModel
MODEL_KINDS["multi_decoder"] = MultiDecoderModel


# -- checkpoint I/O ----------------------------------------------------------

MAGIC = b"VDE1"
VERSION = 1


def checkpoint_bytes(model) -> bytes:
    meta_json = json.dumps(model.meta(), sort_keys=True).encode("utf-8")
    entries = sorted(model.named_parameters(), key=lambda kv: kv[0])
    head = [MAGIC, struct.pack("<I", VERSION), struct.pack("<I", len(meta_json)), meta_json,
            struct.pack("<I", len(entries))]
    blobs = []
    offset = 0
    for name, p in entries:
        nb = name.encode("utf-8")
        head.append(struct.pack("<H", len(nb)))
        head.append(nb)
        head.append(struct.pack("<B", p.ndim))
        head.append(struct.pack(f"<{p.ndim}I", *p.shape) if p.ndim else b"")
        head.append(struct.pack("<Q", offset))
        blob = np.ascontiguousarray(p.data, dtype="<f4").tobytes()
        blobs.append(blob)
        offset += len(blob)
    return b"".join(head) + b"".join(blobs)


def save_checkpoint(model, path: str):
    with open(path, "wb") as fh:
        fh.write(checkpoint_bytes(model))


def load_checkpoint(path: str, dtype=np.float32):
    with open(path, "rb") as fh:
        raw = fh.read()
    return checkpoint_from_bytes(raw, dtype=dtype)


def checkpoint_from_bytes(raw: bytes, dtype=np.float32):
    if raw[:4] != MAGIC:
        raise FormatError(f"bad checkpoint magic {raw[:4]!r} at byte offset 0")
    pos = 4
    (version,) = struct.unpack_from("<I", raw, pos)
    pos += 4
    if version != VERSION:
        raise FormatError(f"unsupported checkpoint version {version} at byte offset 4")
    (json_len,) = struct.unpack_from("<I", raw, pos)
    pos += 4
    meta = json.loads(raw[pos:pos + json_len].decode("utf-8"))
    pos += json_len
    (count,) = struct.unpack_from("<I", raw, pos)
    pos += 4
    entries = []
    for _ in range(count):
        (name_len,) = struct.unpack_from("<H", raw, pos)
        pos += 2
        name = raw[pos:pos + name_len].decode("utf-8")
        pos += name_len
        (ndim,) = struct.unpack_from("<B", raw, pos)
        pos += 1
        shape = struct.unpack_from(f"<{ndim}I", raw, pos) if ndim else ()
        pos += 4 * ndim
        (offset,) = struct.unpack_from("<Q", raw, pos)
        pos += 8
        entries.append((name, shape, offset))
    blob_start = pos

    kind = meta.get("kind")
    if kind not in MODEL_KINDS:
        raise FormatError(f"unknown model kind {kind!r} in checkpoint")
    model = MODEL_KINDS[kind].build(meta, Rng(0))
    params = dict(model.named_parameters())
    if set(params) != {name for name, _, _ in entries}:
        missing = set(params) ^ {name for name, _, _ in entries}
        raise FormatError(f"checkpoint parameter names do not match model: {sorted(missing)[:5]}")
    for name, shape, offset in entries:
        p = params[name]
        n = int(np.prod(shape)) if shape else 1
        start = blob_start + offset
        end = start + 4 * n
        if end > len(raw):
            raise FormatError(f"checkpoint truncated: blob for {name} ends at byte {end}, "
                              f"file has {len(raw)}")
        arr = np.frombuffer(raw[start:end], dtype="<f4").reshape(shape)
        if tuple(p.shape) != tuple(shape):
            raise FormatError(f"shape mismatch for {name}: file {shape}, model {tuple(p.shape)}")
        p.data = arr.astype(dtype)
    return model
