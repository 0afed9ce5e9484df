"""Experiment orchestration: training, evaluation, setting comparisons.

Training follows a two-step schedule for the full model: step one fits
the relative trunk alone on the union of all cameras' data, step two
fits the complete network with one converter per camera. Three baseline
settings share the harness: a single network with a direct metric head
on pooled data, one full network per camera, and a shared encoder with
one decoder stack per camera. Iteration budgets are equalized across
settings by counting optimizer steps, not by approximating epochs.

The optimizer is Adam with a linear learning-rate ramp per step and
decoupled weight decay. Parameters that received no gradient in a step
are skipped entirely (no moment update, no decay), which keeps
converters of cameras absent from a batch bit-identical.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import math
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .depth_math import LossConfig, model_input, overall_loss, silog_loss
from .errors import (CameraLookupError, ConfigError, DegenerateInputError,
                     NumericError)
from .metrics import MetricsReport, basic_metrics, kendall_tau, relative_metrics
from .mixing import MixingLayer
from .model import (MultiDecoderModel, VdeModel, _resize_to, checkpoint_bytes,
                    load_checkpoint, micro_config, paper_scale_config,
                    save_checkpoint, toy_config)
from .rng import Rng
from .synth import load_manifest
from .tensor import no_grad

SETTINGS = ("vde", "single_network", "separate_networks", "multiple_decoders")
PRESETS = {"micro": micro_config, "toy": toy_config, "paper": paper_scale_config}
EVAL_BATCH = 8


@dataclass
class ExperimentConfig:
    """One training run, fully determined together with the seed."""

    setting: str = "vde"
    preset: str = "toy"
    seed: int = 0
    precision: str = "f32"
    train_manifest: str = ""
    test_manifest: str = ""  # empty: test split of the train manifest
    epochs_step1: int = 20
    epochs_step2: int = 20
    batch_size: int = 4
    lr_start: float = 2e-5
    lr_end: float = 1e-6
    weight_decay: float = 1e-2
    fix_alpha: float | None = None
    fix_beta: float | None = None
    fix_gamma: float | None = None
    no_anchor: bool = False
    direct_metric: bool = False
    disable_mixing: bool = False
    crde_loss_mode: str = "linear"
    tau_mode: str = "paper"
    scale_mode: str = "head_dim"

    def validate(self):
        if self.setting not in SETTINGS:
            raise ConfigError(f"setting must be one of {SETTINGS}, got {self.setting!r}")
        if self.preset not in PRESETS:
            raise ConfigError(f"preset must be one of {sorted(PRESETS)}, got {self.preset!r}")
        if self.precision not in ("f32", "f64"):
            raise ConfigError(f"precision must be f32 or f64, got {self.precision!r}")
        if self.epochs_step1 < 0 or self.epochs_step2 < 0:
            raise ConfigError("epoch counts must be non-negative")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.lr_start <= 0 or self.lr_end <= 0:
            raise ConfigError("learning rates must be positive")
        if self.weight_decay < 0:
            raise ConfigError("weight_decay must be non-negative")
        if self.crde_loss_mode not in ("linear", "log"):
            raise ConfigError(f"crde_loss_mode must be linear or log, got {self.crde_loss_mode!r}")
        if self.tau_mode not in ("paper", "classical"):
            raise ConfigError(f"tau_mode must be paper or classical, got {self.tau_mode!r}")
        if self.scale_mode not in ("head_dim", "token_count"):
            raise ConfigError(f"scale_mode must be head_dim or token_count, got {self.scale_mode!r}")
        return self

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @staticmethod
    def from_dict(d: dict) -> "ExperimentConfig":
        known = {f.name for f in dataclasses.fields(ExperimentConfig)}
        extra = set(d) - known
        if extra:
            raise ConfigError(f"unknown config fields: {sorted(extra)}")
        return ExperimentConfig(**d).validate()

    def hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode("utf-8")
        return hashlib.sha256(blob).hexdigest()


@dataclass
class RunReport:
    """Everything a run produced, reproducible bit-for-bit from config+seed
    in 64-bit mode. Wall-clock timings live in `timing` and are excluded
    from the canonical byte form, which is what determinism is judged on."""

    config: dict = field(default_factory=dict)
    config_hash: str = ""
    setting: str = ""
    cameras: list = field(default_factory=list)
    phases: list = field(default_factory=list)  # {"name", "steps", "epoch_losses"}
    param_counts: dict = field(default_factory=dict)
    metrics: dict = field(default_factory=dict)
    coefficients: dict = field(default_factory=dict)
    checkpoints: dict = field(default_factory=dict)
    timing: dict = field(default_factory=dict)

    def total_steps(self) -> int:
        return sum(p["steps"] for p in self.phases)

    def canonical_dict(self) -> dict:
        d = {k: v for k, v in dataclasses.asdict(self).items() if k != "timing"}
        return d

    def canonical_bytes(self) -> bytes:
        return json.dumps(self.canonical_dict(), sort_keys=True).encode("utf-8")

    def to_json(self) -> str:
        full = dataclasses.asdict(self)
        return json.dumps(full, sort_keys=True, indent=2)

    def to_csv(self) -> str:
        lines = ["section,key,value"]
        for ph in self.phases:
            for i, v in enumerate(ph["epoch_losses"]):
                lines.append(f"loss,{ph['name']}/epoch{i},{v!r}")
            lines.append(f"steps,{ph['name']},{ph['steps']}")
        for ds, row in self.metrics.get("per_dataset", {}).items():
            for m in sorted(row):
                lines.append(f"metric,{ds}/{m},{row[m]!r}")
        for m, v in sorted(self.metrics.get("aggregates", {}).items()):
            lines.append(f"metric,__aggregate__/{m},{v!r}")
        for k, v in sorted(self.param_counts.items()):
            lines.append(f"params,{k},{v}")
        for label, (a, b, g) in sorted(self.coefficients.items()):
            lines.append(f"coefficients,{label}/alpha,{a!r}")
            lines.append(f"coefficients,{label}/beta,{b!r}")
            lines.append(f"coefficients,{label}/gamma,{g!r}")
        return "\n".join(lines) + "\n"

    def save(self, out_dir):
        out = Path(out_dir)
        (out / "report.json").write_text(self.to_json())
        (out / "report.csv").write_text(self.to_csv())


# -- optimizer -----------------------------------------------------------


class Adam:
    """Adam with decoupled weight decay and sparse-update semantics.

    A parameter whose gradient is absent or identically zero in a step is
    not touched at all: no moment update, no bias-correction tick, no
    decay. Decay applies only to matrix-shaped weights; gains, biases,
    blend coefficients, anchors, and position tables are exempt.
    """

    def __init__(self, named_params: dict, weight_decay: float = 0.0,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.params = dict(named_params)
        self.weight_decay = weight_decay
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m = {k: np.zeros_like(p.data) for k, p in self.params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in self.params.items()}
        self.t = {k: 0 for k in self.params}
        self.decayed = {k: self._wants_decay(k, p) for k, p in self.params.items()}

    @staticmethod
    def _wants_decay(name: str, p) -> bool:
        if p.ndim < 2:
            return False
        return ".anchor" not in name and not name.endswith(".table")

    def step(self, lr: float):
        b1, b2 = self.beta1, self.beta2
        for name, p in self.params.items():
            g = p.grad
            if g is None or not np.any(g):
                continue
            t = self.t[name] = self.t[name] + 1
            m = self.m[name]
            v = self.v[name]
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * (g * g)
            denom = np.sqrt(v / (1.0 - b2 ** t))
            denom += self.eps
            upd = m / denom
            upd *= lr / (1.0 - b1 ** t)
            p.data -= upd
            if self.weight_decay > 0.0 and self.decayed[name]:
                p.data *= 1.0 - lr * self.weight_decay


def _lr_at(step: int, total: int, lr0: float, lr1: float) -> float:
    if total <= 1:
        return lr0
    return lr0 + (lr1 - lr0) * (step / (total - 1))


# -- training ------------------------------------------------------------


def _mixing_layers(model) -> list:
    return [m for m in model.modules() if isinstance(m, MixingLayer)]


def _apply_ablations(model, cfg: ExperimentConfig):
    for layer in _mixing_layers(model):
        if cfg.disable_mixing:
            layer.disable_mixing = True
        for attr, value in (("alpha", cfg.fix_alpha), ("beta", cfg.fix_beta),
                            ("gamma", cfg.fix_gamma)):
            if value is not None:
                coef = getattr(layer.coef, attr)
                coef.data = np.asarray(value, dtype=coef.dtype)
                coef.requires_grad = False


def mixing_coefficients(model) -> dict:
    """Blend-coefficient triples per mixer stage per layer."""
    out = {}
    if isinstance(model, VdeModel):
        stacks = {"crde": model.crde.mixers}
    elif isinstance(model, MultiDecoderModel):
        stacks = {f"decoder.{cam}": dec.mixers for cam, dec in model.decoders.items()}
    else:
        return out
    for prefix, mixers in stacks.items():
        for i, mixer in enumerate(mixers):
            out[f"{prefix}.mixer{i}.layer1"] = mixer.mix1.coef.values()
            out[f"{prefix}.mixer{i}.layer2"] = mixer.mix2.coef.values()
    return out


class _Aborted(Exception):
    def __init__(self, step: int, last_good: bytes):
        self.step = step
        self.last_good = last_good


def _train_steps(model, opt: Adam, samples: list, loss_fn, total_steps: int,
                 lr0: float, lr1: float, batch: int, rng: Rng, label: str) -> list:
    """Run exactly total_steps optimizer steps, reshuffling every epoch.

    Returns per-epoch mean losses. Raises _Aborted on a non-finite loss,
    carrying the checkpoint taken at the last completed epoch.
    """
    if total_steps <= 0:
        return []
    n = len(samples)
    bs = min(batch, n)
    last_good = checkpoint_bytes(model)
    epoch_means = []
    step = 0
    epoch = 0
    while step < total_steps:
        order = rng.split(f"{label}-epoch{epoch}").permutation(n)
        losses = []
        for start in range(0, n - bs + 1, bs):
            if step >= total_steps:
                break
            chunk = [samples[i] for i in order[start:start + bs]]
            loss = loss_fn(chunk)
            lv = float(loss.data)
            if not math.isfinite(lv):
                raise _Aborted(step, last_good)
            loss.backward()
            opt.step(_lr_at(step, total_steps, lr0, lr1))
            model.zero_grad()
            losses.append(lv)
            step += 1
        epoch_means.append(float(np.mean(losses)))
        last_good = checkpoint_bytes(model)
        epoch += 1
    return epoch_means


def _direct_loss(model, batch, loss_cfg, dtype):
    m_hat = model.direct_forward(model_input(batch, dtype))
    total = None
    for i, s in enumerate(batch):
        term = silog_loss(m_hat[i], s.depth, loss_cfg)
        total = term if total is None else total + term
    return total


def _multi_decoder_loss(model, batch, loss_cfg, dtype):
    images = model_input(batch, dtype)
    skips, z_dec, (h, w) = model.trunk(images)
    by_cam: dict = {}
    for i, s in enumerate(batch):
        by_cam.setdefault(s.depth.camera, []).append(i)
    total = None
    for cam, idxs in sorted(by_cam.items()):
        sel = np.asarray(idxs)
        sub_skips = [sk[sel] for sk in skips]
        m_low = model.decoders[cam].forward(sub_skips, z_dec[sel], (h, w))
        m_hat = _resize_to(m_low, h, w)
        for j, i in enumerate(idxs):
            term = silog_loss(m_hat[j], batch[i].depth, loss_cfg)
            total = term if total is None else total + term
    return total


class SeparatePool:
    """Per-camera independent models from the separate-networks setting."""

    def __init__(self, models: dict):
        self.models = models

    def count_params(self) -> dict:
        counts = {f"model.{cam}": m.param_count() for cam, m in self.models.items()}
        counts["total"] = sum(counts.values())
        return counts


def _load_splits(cfg: ExperimentConfig, train_samples, test_samples):
    if train_samples is None:
        if not cfg.train_manifest:
            raise ConfigError("config has no train_manifest and no samples were passed")
        train_samples = load_manifest(cfg.train_manifest, split="train")
    if test_samples is None:
        test_samples = load_manifest(cfg.test_manifest or cfg.train_manifest,
                                     split="test")
    return train_samples, test_samples


def train(cfg: ExperimentConfig, out_dir, train_samples: list | None = None,
          test_samples: list | None = None) -> RunReport:
    """Train one setting end to end and write report + checkpoints."""
    cfg.validate()
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.json").write_text(json.dumps(cfg.to_dict(), sort_keys=True, indent=2))
    train_samples, test_samples = _load_splits(cfg, train_samples, test_samples)
    cameras = sorted({s.depth.camera for s in train_samples})
    dtype = np.float64 if cfg.precision == "f64" else np.float32
    loss_cfg = LossConfig(crde_mode=cfg.crde_loss_mode)
    model_cfg = PRESETS[cfg.preset]()
    if cfg.scale_mode != model_cfg.scale_mode:
        model_cfg = dataclasses.replace(model_cfg, scale_mode=cfg.scale_mode)
    root = Rng(cfg.seed)
    model_rng = root.split("model")
    data_rng = root.split("data")

    spb = max(1, len(train_samples) // cfg.batch_size)  # pooled steps per epoch
    steps1 = cfg.epochs_step1 * spb
    steps2 = cfg.epochs_step2 * spb

    report = RunReport(config=cfg.to_dict(), config_hash=cfg.hash(),
                       setting=cfg.setting, cameras=cameras)
    wall0, cpu0 = time.time(), time.process_time()
    setting = cfg.setting
    if setting == "vde" and cfg.direct_metric:
        setting = "single_network"  # converters replaced by the direct head

    try:
        if setting == "vde":
            model = VdeModel(model_cfg, model_rng, use_anchor=not cfg.no_anchor)
            _apply_ablations(model, cfg)
            model.astype(dtype)
            opt = Adam(dict(model.named_parameters()), cfg.weight_decay)
            losses1 = _train_steps(
                model, opt, train_samples,
                lambda b: overall_loss(b, model, loss_cfg, include_metric=False),
                steps1, cfg.lr_start, cfg.lr_end, cfg.batch_size, data_rng, "step1")
            report.phases.append({"name": "step1", "steps": steps1,
                                  "epoch_losses": losses1})
            save_checkpoint(model, out / "step1.ckpt")
            report.checkpoints["step1"] = "step1.ckpt"
            for cam in cameras:
                conv = model.add_camera(cam, model_rng.split(f"r2mc.{cam}"))
                conv.astype(dtype)
            opt = Adam(dict(model.named_parameters()), cfg.weight_decay)
            losses2 = _train_steps(
                model, opt, train_samples,
                lambda b: overall_loss(b, model, loss_cfg, include_metric=True),
                steps2, cfg.lr_start, cfg.lr_end, cfg.batch_size, data_rng, "step2")
            report.phases.append({"name": "step2", "steps": steps2,
                                  "epoch_losses": losses2})
            final = model

        elif setting == "single_network":
            model = VdeModel(model_cfg, model_rng, with_direct_head=True)
            _apply_ablations(model, cfg)
            model.astype(dtype)
            opt = Adam(dict(model.named_parameters()), cfg.weight_decay)
            losses = _train_steps(
                model, opt, train_samples,
                lambda b: _direct_loss(model, b, loss_cfg, dtype),
                steps1 + steps2, cfg.lr_start, cfg.lr_end, cfg.batch_size,
                data_rng, "metric")
            report.phases.append({"name": "metric", "steps": steps1 + steps2,
                                  "epoch_losses": losses})
            final = model

        elif setting == "separate_networks":
            target = steps1 + steps2
            budgets = {cam: target // len(cameras) for cam in cameras}
            for cam in cameras[: target - sum(budgets.values())]:
                budgets[cam] += 1
            models = {}
            for cam in cameras:
                sub = [s for s in train_samples if s.depth.camera == cam]
                m = VdeModel(model_cfg, model_rng.split(f"net.{cam}"),
                             with_direct_head=True)
                _apply_ablations(m, cfg)
                m.astype(dtype)
                opt = Adam(dict(m.named_parameters()), cfg.weight_decay)
                losses = _train_steps(
                    m, opt, sub, lambda b, mm=m: _direct_loss(mm, b, loss_cfg, dtype),
                    budgets[cam], cfg.lr_start, cfg.lr_end, cfg.batch_size,
                    data_rng, f"metric.{cam}")
                report.phases.append({"name": f"metric.{cam}", "steps": budgets[cam],
                                      "epoch_losses": losses})
                save_checkpoint(m, out / f"final_{cam}.ckpt")
                report.checkpoints[f"final_{cam}"] = f"final_{cam}.ckpt"
                models[cam] = m
            final = SeparatePool(models)

        else:  # multiple_decoders
            model = MultiDecoderModel(model_cfg, model_rng)
            for cam in cameras:
                model.add_camera(cam, model_rng.split(f"decoder.{cam}"))
            _apply_ablations(model, cfg)
            model.astype(dtype)
            opt = Adam(dict(model.named_parameters()), cfg.weight_decay)
            losses = _train_steps(
                model, opt, train_samples,
                lambda b: _multi_decoder_loss(model, b, loss_cfg, dtype),
                steps1 + steps2, cfg.lr_start, cfg.lr_end, cfg.batch_size,
                data_rng, "metric")
            report.phases.append({"name": "metric", "steps": steps1 + steps2,
                                  "epoch_losses": losses})
            final = model
    except _Aborted as abort:
        (out / "aborted.ckpt").write_bytes(abort.last_good)
        raise NumericError(
            f"training loss went non-finite at step {abort.step}; last good "
            f"checkpoint written to {out / 'aborted.ckpt'}") from None

    if not isinstance(final, SeparatePool):
        save_checkpoint(final, out / "final.ckpt")
        report.checkpoints["final"] = "final.ckpt"

    report.param_counts = final.count_params()
    report.coefficients = {}
    models_for_coef = final.models.values() if isinstance(final, SeparatePool) else [final]
    for m in models_for_coef:
        report.coefficients.update(mixing_coefficients(m))
    eval_report = evaluate(final, test_samples, tau_mode=cfg.tau_mode)
    report.metrics = {
        "per_dataset": eval_report.per_dataset,
        "aggregates": eval_report.aggregates,
        "aggregate_fallback": eval_report.fallback_flags,
        "meta": eval_report.meta,
    }
    report.timing = {"wall_clock_sec": time.time() - wall0,
                     "cpu_sec": time.process_time() - cpu0}
    report.save(out)
    return report, final


# -- evaluation ----------------------------------------------------------


def _chunks(items: list, size: int):
    for i in range(0, len(items), size):
        yield items[i:i + size]


def _model_dtype(model):
    if isinstance(model, SeparatePool):
        model = next(iter(model.models.values()))
    return next(model.parameters()).dtype


def _predict_maps(model, samples: list, camera: str, batch: int = EVAL_BATCH):
    """Returns (metric maps or None, relative maps or None) as arrays."""
    dtype = _model_dtype(model)
    metric, relative = [], []
    have_metric = True
    have_relative = True
    with no_grad():
        for chunk in _chunks(samples, batch):
            images = model_input(chunk, dtype)
            h, w = images.shape[2], images.shape[3]
            if isinstance(model, SeparatePool):
                m = model.models.get(camera)
                if m is None:
                    return None, None
                maps = m.direct_forward(images).data
                metric.append(maps)
                relative.append(maps)
            elif isinstance(model, MultiDecoderModel):
                if camera not in model.decoders:
                    return None, None
                maps = model.forward(images, camera).data
                metric.append(maps)
                relative.append(maps)
            elif isinstance(model, VdeModel):
                if model.r2mcs or model.direct_head is None:
                    z_rel, e1, n_hat = model.crde.forward(images)
                    relative.append(n_hat.data)
                    if camera in model.r2mcs:
                        m_low = model.r2mcs[camera].forward(z_rel)
                        metric.append(_resize_to(m_low, h, w).data)
                    else:
                        have_metric = False
                else:
                    maps = model.direct_forward(images).data
                    metric.append(maps)
                    relative.append(maps)
            else:
                raise ConfigError(f"cannot evaluate model of type {type(model).__name__}")
    m_out = np.concatenate(metric) if have_metric and metric else None
    r_out = np.concatenate(relative) if have_relative and relative else None
    return m_out, r_out


def evaluate(model, samples: list, tau_mode: str = "paper",
             fallback_relative: bool = False, rmse_literal: bool = False,
             batch: int = EVAL_BATCH) -> MetricsReport:
    """Masked per-camera metric suite, averaged over images.

    Cameras the model cannot produce metric depth for either raise a
    lookup error or, with fallback_relative, contribute a relative-only
    row computed from the trunk's normalized output.
    """
    if not samples:
        raise DegenerateInputError("evaluation sample list is empty")
    by_cam: dict = {}
    for s in samples:
        by_cam.setdefault(s.depth.camera, []).append(s)
    report = MetricsReport(meta={"tau_mode": tau_mode,
                                 "relative_only_cameras": []})
    for cam in sorted(by_cam):
        sub = by_cam[cam]
        m_maps, r_maps = _predict_maps(model, sub, cam, batch)
        if m_maps is None and not (fallback_relative and r_maps is not None):
            raise CameraLookupError(
                f"camera {cam!r} is not supported by this model; "
                f"pass fallback_relative=True for relative-only metrics")
        rows = []
        for i, s in enumerate(sub):
            gt = s.depth
            row = {}
            if m_maps is not None:
                row.update(basic_metrics(m_maps[i], gt.depths, gt.valid,
                                         rmse_literal=rmse_literal))
                row["tau"] = kendall_tau(m_maps[i][gt.valid], gt.depths[gt.valid],
                                         mode=tau_mode)
                rel_src = r_maps[i] if r_maps is not None else m_maps[i]
            else:
                rel_src = r_maps[i]
                row["tau"] = kendall_tau(rel_src[gt.valid], gt.depths[gt.valid],
                                         mode=tau_mode)
            row.update(relative_metrics(rel_src, gt.depths, gt.valid))
            rows.append(row)
        keys = rows[0].keys()
        report.per_dataset[cam] = {k: float(np.mean([r[k] for r in rows])) for k in keys}
        if m_maps is None:
            report.meta["relative_only_cameras"].append(cam)
    return report.finalize()


def cross_eval(model, samples: list, tau_mode: str = "paper",
               batch: int = EVAL_BATCH) -> dict:
    """Rank-correlation matrix: every converter applied to every camera's
    test images. Cell (i, j) is the mean per-image tau of converter i's
    metric prediction against camera j's ground truth."""
    if not isinstance(model, VdeModel) or not model.r2mcs:
        raise ConfigError("cross-evaluation needs a trained model with converters")
    predictors = sorted(model.r2mcs)
    by_cam: dict = {}
    for s in samples:
        by_cam.setdefault(s.depth.camera, []).append(s)
    datasets = sorted(by_cam)
    dtype = _model_dtype(model)
    cells = {(i, j): [] for i in range(len(predictors)) for j in range(len(datasets))}
    with no_grad():
        for j, cam_j in enumerate(datasets):
            for chunk in _chunks(by_cam[cam_j], batch):
                images = model_input(chunk, dtype)
                h, w = images.shape[2], images.shape[3]
                z_rel, _, _ = model.crde.trunk(images)
                for i, cam_i in enumerate(predictors):
                    maps = _resize_to(model.r2mcs[cam_i].forward(z_rel), h, w).data
                    for b_i, s in enumerate(chunk):
                        v = s.depth.valid
                        cells[(i, j)].append(
                            kendall_tau(maps[b_i][v], s.depth.depths[v], mode=tau_mode))
    matrix = [[float(np.mean(cells[(i, j)])) for j in range(len(datasets))]
              for i in range(len(predictors))]
    return {
        "predictors": predictors,
        "datasets": datasets,
        "tau": matrix,
        "row_means": [float(np.mean(row)) for row in matrix],
        "tau_mode": tau_mode,
    }


def cross_eval_csv(result: dict) -> str:
    lines = ["predictor," + ",".join(result["datasets"]) + ",row_mean"]
    for name, row, mean in zip(result["predictors"], result["tau"], result["row_means"]):
        lines.append(name + "," + ",".join(repr(v) for v in row) + f",{mean!r}")
    return "\n".join(lines) + "\n"


# -- setting suite ---------------------------------------------------------


def run_setting_suite(base: ExperimentConfig, out_dir,
                      train_samples: list | None = None,
                      test_samples: list | None = None) -> dict:
    """Train all four settings at equalized iteration budgets and compare."""
    base.validate()
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    train_samples, test_samples = _load_splits(base, train_samples, test_samples)
    cameras = sorted({s.depth.camera for s in train_samples})
    if len(cameras) < 2:
        raise ConfigError(f"the setting suite needs >= 2 cameras, got {cameras}")

    results = {}
    budgets = {}
    for setting in SETTINGS:
        cfg = dataclasses.replace(base, setting=setting)
        report, _ = train(cfg, out / setting, train_samples, test_samples)
        results[setting] = report
        budgets[setting] = report.total_steps()
    if len(set(budgets.values())) != 1:
        raise NumericError(f"iteration budgets diverged: {budgets}")

    def agg(setting, metric):
        return results[setting].metrics["aggregates"].get(metric)

    vde_rows = results["vde"].metrics["per_dataset"]
    single_rows = results["single_network"].metrics["per_dataset"]
    delta1_wins = sum(1 for cam in cameras
                      if vde_rows[cam]["delta1"] > single_rows[cam]["delta1"])
    params = {s: results[s].param_counts["total"] for s in SETTINGS}
    comparisons = {
        "tau_aggregate": {s: agg(s, "tau") for s in SETTINGS},
        "tau_vde_ge_single": bool(agg("vde", "tau") >= agg("single_network", "tau")),
        "delta1_wins_vs_single": delta1_wins,
        "delta1_wins_needed": 2,
        "delta1_claim": bool(delta1_wins >= 2),
        "param_totals": params,
        "param_ordering": bool(params["separate_networks"] > params["multiple_decoders"]
                               > params["vde"]),
    }
    comparisons["all_pass"] = bool(comparisons["tau_vde_ge_single"]
                                   and comparisons["delta1_claim"]
                                   and comparisons["param_ordering"])
    suite = {
        "cameras": cameras,
        "iteration_budgets": budgets,
        "budgets_equal": True,
        "settings": {s: results[s].canonical_dict() for s in SETTINGS},
        "comparisons": comparisons,
    }
    (out / "suite.json").write_text(json.dumps(suite, sort_keys=True, indent=2))
    (out / "suite.csv").write_text(suite_csv(suite))
    return suite


def suite_csv(suite: dict) -> str:
    lines = ["setting,camera,metric,value"]
    for setting in sorted(suite["settings"]):
        rpt = suite["settings"][setting]
        for cam in sorted(rpt["metrics"]["per_dataset"]):
            row = rpt["metrics"]["per_dataset"][cam]
            for metric in sorted(row):
                lines.append(f"{setting},{cam},{metric},{row[metric]!r}")
        for metric, v in sorted(rpt["metrics"]["aggregates"].items()):
            lines.append(f"{setting},__aggregate__,{metric},{v!r}")
        lines.append(f"{setting},__all__,param_total,{rpt['param_counts']['total']}")
        lines.append(f"{setting},__all__,steps,{suite['iteration_budgets'][setting]}")
    return "\n".join(lines) + "\n"


# -- ablations -------------------------------------------------------------

DEFAULT_ABLATION_GRID = ((0.0, 0.0, 0.0), (1.0, 1.0, 0.0), (1.0, 1.0, 1.0))


def ablate(base: ExperimentConfig, out_dir, grid=None,
           train_samples: list | None = None,
           test_samples: list | None = None) -> dict:
    """Train one run per fixed-coefficient grid cell plus a learnable row,
    all sharing the base seed and budget; report metrics and the trained
    coefficient values."""
    base.validate()
    grid = DEFAULT_ABLATION_GRID if grid is None else tuple(tuple(c) for c in grid)
    for cell in grid:
        if len(cell) != 3:
            raise ConfigError(f"grid cells are (alpha, beta, gamma) triples, got {cell}")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    train_samples, test_samples = _load_splits(base, train_samples, test_samples)

    rows = []
    for cell in list(grid) + [None]:
        if cell is None:
            label = "learnable"
            cfg = dataclasses.replace(base, fix_alpha=None, fix_beta=None,
                                      fix_gamma=None)
        else:
            a, b, g = (float(x) for x in cell)
            label = f"a{a:g}_b{b:g}_g{g:g}"
            cfg = dataclasses.replace(base, fix_alpha=a, fix_beta=b, fix_gamma=g)
        report, _ = train(cfg, out / label, train_samples, test_samples)
        rows.append({
            "cell": label,
            "fixed": None if cell is None else [float(x) for x in cell],
            "aggregates": report.metrics["aggregates"],
            "coefficients": report.coefficients,
        })
    table = {"base_config": base.to_dict(), "rows": rows}
    (out / "ablation.json").write_text(json.dumps(table, sort_keys=True, indent=2))
    lines = ["cell,metric,value"]
    for row in rows:
        for metric in sorted(row["aggregates"]):
            lines.append(f"{row['cell']},{metric},{row['aggregates'][metric]!r}")
        for label in sorted(row["coefficients"]):
            a, b, g = row["coefficients"][label]
            lines.append(f"{row['cell']},coef/{label},{a!r}|{b!r}|{g!r}")
    (out / "ablation.csv").write_text("\n".join(lines) + "\n")
    return table


def evaluate_checkpoint(checkpoint_path, manifest_path, tau_mode: str = "paper",
                        split: str = "test", fallback_relative: bool = False,
                        precision: str = "f32") -> MetricsReport:
    dtype = np.float64 if precision == "f64" else np.float32
    model = load_checkpoint(checkpoint_path, dtype=dtype)
    samples = load_manifest(manifest_path, split=split)
    return evaluate(model, samples, tau_mode=tau_mode,
                    fallback_relative=fallback_relative)
