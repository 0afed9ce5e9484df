"""Depth map container, normalization, and training losses.

Normalized depth is (d - mean) / std over the valid pixels, with the
population standard deviation. The scale-invariant log loss follows
the usual form

    loss = a * sqrt( mean(e^2) - lam * mean(e)^2 ),   e_i = log p_i - log d_i

with a = 10 and lam = 0.85; the trunk's normalized-depth loss applies
the same formula to plain differences (no logs) by default since
normalized values take both signs.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .errors import DegenerateInputError, ShapeError
from .tensor import Tensor

SIGMA_MIN = 1e-6


@dataclass
class DepthMap:
    """Metric depth with a validity mask. Invalid pixels carry no meaning."""

    depths: np.ndarray
    valid: np.ndarray
    camera: str = ""

    def __post_init__(self):
        self.depths = np.asarray(self.depths, dtype=np.float64)
        self.valid = np.asarray(self.valid, dtype=bool)
        if self.depths.shape != self.valid.shape:
            raise ShapeError(
                f"depths {self.depths.shape} and valid {self.valid.shape} disagree")

    @property
    def shape(self):
        return self.depths.shape

    def valid_values(self) -> np.ndarray:
        return self.depths[self.valid]


@dataclass
class NormalizationStats:
    mean: float
    std: float


@dataclass
class LossConfig:
    alpha: float = 10.0
    lam: float = 0.85
    crde_mode: str = "linear"  # or "log"
    log_margin: float = 0.1


def normalize(depth: DepthMap) -> tuple:
    """Returns (normalized map masked to valid pixels, stats)."""
    vals = depth.valid_values()
    if vals.size < 2:
        raise DegenerateInputError(f"need at least 2 valid pixels, got {vals.size}")
    mean = float(vals.mean())
    std = float(vals.std())  # population form
    if std < SIGMA_MIN:
        raise DegenerateInputError(
            f"depth is (near) constant: std {std:.3e} < {SIGMA_MIN}")
    out = np.zeros_like(depth.depths)
    out[depth.valid] = (vals - mean) / std
    return out, NormalizationStats(mean, std)


def denormalize(normalized: np.ndarray, stats: NormalizationStats) -> np.ndarray:
    return normalized * stats.std + stats.mean


def _masked_silog_core(e: Tensor, mask: np.ndarray, cfg: LossConfig) -> Tensor:
    n = float(mask.sum())
    if n < 1:
        raise DegenerateInputError("loss needs at least one valid pixel")
    m = Tensor(mask.astype(e.dtype))
    em = e * m
    s2 = T.tsum(em * em) / n
    s1 = T.tsum(em) / n
    return cfg.alpha * T.sqrt(s2 - cfg.lam * (s1 * s1))


def silog_loss(pred, gt: DepthMap, cfg: LossConfig | None = None) -> Tensor:
    """Scale-invariant log loss between positive predictions and metric truth."""
    cfg = cfg or LossConfig()
    pred = pred if isinstance(pred, Tensor) else Tensor(pred)
    if pred.shape != gt.shape:
        raise ShapeError(f"prediction {pred.shape} vs ground truth {gt.shape}")
    safe_gt = np.where(gt.valid, gt.depths, 1.0)
    if np.any(safe_gt <= 0):
        raise DegenerateInputError("ground truth has non-positive valid depths")
    log_gt = np.log(safe_gt).astype(pred.dtype)
    e = T.log(pred) - Tensor(log_gt)
    return _masked_silog_core(e, gt.valid, cfg)


def crde_loss(pred, target: np.ndarray, mask: np.ndarray,
              cfg: LossConfig | None = None) -> Tensor:
    """Trunk loss on normalized depth.

    linear mode: e = pred - target directly. log mode: both sides are
    shifted by 1 + max(0, -min(target)) + margin to land strictly
    positive, then the log form applies; predictions are floored at
    1e-6 after shifting so the log stays defined early in training.
    """
    cfg = cfg or LossConfig()
    pred = pred if isinstance(pred, Tensor) else Tensor(pred)
    if pred.shape != target.shape:
        raise ShapeError(f"prediction {pred.shape} vs target {target.shape}")
    if cfg.crde_mode == "linear":
        e = pred - Tensor(target.astype(pred.dtype))
    elif cfg.crde_mode == "log":
        tv = target[mask]
        shift = 1.0 + max(0.0, -float(tv.min())) + cfg.log_margin
        shifted_t = np.where(mask, target + shift, 1.0)
        e = T.log(T.clip(pred + shift, 1e-6, np.inf)) - Tensor(
            np.log(shifted_t).astype(pred.dtype))
    else:
        raise ValueError(f"unknown crde mode {cfg.crde_mode!r}")
    return _masked_silog_core(e, mask, cfg)


@dataclass
class Sample:
    """One RGB-D training example."""

    rgb: np.ndarray  # (h, w, 3) in [0, 1]
    depth: DepthMap
    scene_id: str = ""
    split: str = "train"
    norm_target: np.ndarray | None = field(default=None, repr=False)
    norm_stats: NormalizationStats | None = field(default=None, repr=False)

    def ensure_norm(self):
        if self.norm_target is None:
            self.norm_target, self.norm_stats = normalize(self.depth)
        return self.norm_target


def model_input(samples: list, dtype) -> Tensor:
    """Stack samples into a (b, 3, h, w) network input, centered at zero."""
    arr = np.stack([s.rgb for s in samples]).transpose(0, 3, 1, 2)
    return Tensor(arr.astype(dtype) - 0.5)


def overall_loss(batch: list, model, cfg: LossConfig | None = None,
                 include_metric: bool = True) -> Tensor:
    """Sum of per-sample trunk losses plus per-camera metric losses.

    Additive over samples, so a multi-camera batch equals the sum of the
    per-camera batches evaluated separately.
    """
    cfg = cfg or LossConfig()
    dtype = next(model.parameters()).dtype
    images = model_input(batch, dtype)
    z_rel, e1, n_hat = model.crde.forward(images)
    total = None
    for i, s in enumerate(batch):
        target = s.ensure_norm()
        term = crde_loss(n_hat[i], target, s.depth.valid, cfg)
        total = term if total is None else total + term
    if include_metric:
        h, w = images.shape[2], images.shape[3]
        by_cam: dict = {}
        for i, s in enumerate(batch):
            by_cam.setdefault(s.depth.camera, []).append(i)
        for cam, idxs in by_cam.items():
            m_low = model.r2mcs[cam].forward(z_rel[np.asarray(idxs)])
            m_hat = _upsample_maps(m_low, h, w)
            for j, i in enumerate(idxs):
                total = total + silog_loss(m_hat[j], batch[i].depth, cfg)
    return total


def _upsample_maps(low: Tensor, h: int, w: int) -> Tensor:
    b, hl, wl = low.shape
    return T.reshape(T.bilinear_resize(T.reshape(low, (b, 1, hl, wl)), h, w), (b, h, w))
