"""Evaluation metrics for metric and relative depth.

Accuracy metrics operate on valid pixels only. Relative predictions are
scored after a closed-form least-squares scale-and-shift fit against
ground truth. Rank agreement uses Kendall's tau computed by merge-sort
inversion counting, O(n log n), with explicit tie handling; "paper"
mode reports concordant pairs over all pairs (range [0, 1]), "classical"
mode reports (concordant - discordant) over all pairs.
"""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import DegenerateInputError, ShapeError

CALIBRATED_FLOOR = 1e-6
TAU_SUBSAMPLE = 50_000


def _flat_valid(pred, gt, valid):
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape:
        raise ShapeError(f"prediction {pred.shape} vs ground truth {gt.shape}")
    if valid is None:
        return pred.ravel(), gt.ravel()
    valid = np.asarray(valid, dtype=bool)
    return pred[valid], gt[valid]


def basic_metrics(pred, gt, valid=None, rmse_literal: bool = False) -> dict:
    """RMSE, mean absolute relative error, log10 error, threshold ratios.

    rmse_literal switches RMSE to sqrt(sum)/n, a printed-form variant
    kept behind a flag; the default is the conventional sqrt(mean).
    """
    p, d = _flat_valid(pred, gt, valid)
    if p.size == 0:
        raise DegenerateInputError("no valid pixels to score")
    if np.any(p <= 0) or np.any(d <= 0):
        raise DegenerateInputError("metric scoring needs positive depths")
    err = p - d
    if rmse_literal:
        rmse = math.sqrt(float(np.sum(err * err))) / p.size
    else:
        rmse = math.sqrt(float(np.mean(err * err)))
    rel = float(np.mean(np.abs(err) / d))
    log10 = float(np.mean(np.abs(np.log10(p) - np.log10(d))))
    ratio = np.maximum(p / d, d / p)
    out = {"rmse": rmse, "rel": rel, "log10": log10}
    for k in (1, 2, 3):
        out[f"delta{k}"] = float(np.mean(ratio < 1.25 ** k))
    return out


def calibrate_scale_shift(pred, gt, valid=None) -> tuple:
    """Least-squares (m, b) minimizing sum((m * pred + b - gt)^2)."""
    p, d = _flat_valid(pred, gt, valid)
    if p.size < 2:
        raise DegenerateInputError("calibration needs at least 2 valid pixels")
    n = float(p.size)
    sp, sd = float(p.sum()), float(d.sum())
    spp, spd = float((p * p).sum()), float((p * d).sum())
    det = n * spp - sp * sp
    if abs(det) < 1e-12 * max(1.0, n * spp):
        raise DegenerateInputError("calibration is singular: constant prediction")
    m = (n * spd - sp * sd) / det
    b = (sd - m * sp) / n
    return m, b


def relative_metrics(pred, gt, valid=None) -> dict:
    """Score a relative (affine-ambiguous) prediction against metric truth.

    The prediction is mapped through the fitted scale and shift, floored
    at a small positive value, then scored with delta1 and RMSE.
    """
    m, b = calibrate_scale_shift(pred, gt, valid)
    p, d = _flat_valid(pred, gt, valid)
    cal = np.maximum(m * p + b, CALIBRATED_FLOOR)
    ratio = np.maximum(cal / d, d / cal)
    err = cal - d
    return {
        "scale": m,
        "shift": b,
        "relative_delta1": float(np.mean(ratio < 1.25)),
        "relative_rmse": math.sqrt(float(np.mean(err * err))),
    }


# -- Kendall rank correlation ------------------------------------------------


def _count_inversions(a: np.ndarray) -> int:
    """Pairs (i < j) with a[i] > a[j], by divide and conquer."""
    n = a.size
    if n < 2:
        return 0
    mid = n // 2
    left, right = np.sort(a[:mid]), np.sort(a[mid:])
    inv = _count_inversions(a[:mid]) + _count_inversions(a[mid:])
    # for each element of the right half, count left elements strictly greater
    pos = np.searchsorted(left, right, side="right")
    inv += int((left.size - pos).sum())
    return inv


def _tie_pairs(x: np.ndarray) -> int:
    _, counts = np.unique(x, return_counts=True)
    return int((counts * (counts - 1) // 2).sum())


def kendall_tau(pred, gt, mode: str = "paper", subsample: int | None = TAU_SUBSAMPLE,
                seed: int = 0) -> float:
    """Rank agreement between two vectors; ties count as neither order.

    paper mode: concordant / total pairs, in [0, 1].
    classical mode: (concordant - discordant) / total pairs, in [-1, 1].
    Inputs longer than `subsample` are reduced to a seeded uniform
    sample so the cost stays bounded and reproducible.
    """
    p = np.asarray(pred, dtype=np.float64).ravel()
    d = np.asarray(gt, dtype=np.float64).ravel()
    if p.size != d.size:
        raise ShapeError(f"length mismatch: {p.size} vs {d.size}")
    if p.size < 2:
        raise DegenerateInputError("rank correlation needs at least 2 values")
    if subsample is not None and p.size > subsample:
        idx = np.random.default_rng(seed).choice(p.size, size=subsample, replace=False)
        p, d = p[idx], d[idx]
    n = p.size
    order = np.lexsort((d, p))  # sort by pred, ties broken by gt ascending
    ds = d[order]
    discordant = _count_inversions(ds)
    n0 = n * (n - 1) // 2
    n1 = _tie_pairs(p)
    n2 = _tie_pairs(d)
    both = p[order] + 1j * ds
    n3 = _tie_pairs(both)
    concordant = n0 - n1 - n2 + n3 - discordant
    if mode == "paper":
        return concordant / n0
    if mode == "classical":
        return (concordant - discordant) / n0
    raise ValueError(f"unknown tau mode {mode!r}")


def kendall_tau_brute(pred, gt, mode: str = "paper") -> float:
    """Quadratic reference implementation used to verify kendall_tau."""
    p = np.asarray(pred, dtype=np.float64).ravel()
    d = np.asarray(gt, dtype=np.float64).ravel()
    n = p.size
    sp = np.sign(p[:, None] - p[None, :])
    sd = np.sign(d[:, None] - d[None, :])
    prod = sp * sd
    iu = np.triu_indices(n, k=1)
    conc = int((prod[iu] > 0).sum())
    disc = int((prod[iu] < 0).sum())
    n0 = n * (n - 1) // 2
    return conc / n0 if mode == "paper" else (conc - disc) / n0


# -- aggregation and reports ---------------------------------------------


def aggregate(values: dict) -> tuple:
    """Geometric mean of per-dataset scores; arithmetic fallback when any
    value is non-positive. Returns (value, used_fallback)."""
    vals = np.asarray(list(values.values()), dtype=np.float64)
    if vals.size == 0:
        raise DegenerateInputError("nothing to aggregate")
    if np.any(vals <= 0):
        return float(vals.mean()), True
    return float(np.exp(np.mean(np.log(vals)))), False


@dataclass
class MetricsReport:
    """Per-dataset metric values plus cross-dataset aggregates."""

    per_dataset: dict = field(default_factory=dict)  # dataset -> {metric: value}
    aggregates: dict = field(default_factory=dict)   # metric -> value
    fallback_flags: dict = field(default_factory=dict)
    meta: dict = field(default_factory=dict)

    def finalize(self):
        metrics = sorted({m for row in self.per_dataset.values() for m in row})
        for metric in metrics:
            having = {ds: row[metric] for ds, row in self.per_dataset.items()
                      if metric in row}
            if having:
                value, fell_back = aggregate(having)
                self.aggregates[metric] = value
                self.fallback_flags[metric] = fell_back
        return self

    def to_json(self) -> str:
        return json.dumps({
            "per_dataset": self.per_dataset,
            "aggregates": self.aggregates,
            "aggregate_fallback": self.fallback_flags,
            "meta": self.meta,
        }, sort_keys=True, indent=2)

    def to_csv(self) -> str:
        """One row per dataset per metric: dataset, metric, value."""
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["dataset", "metric", "value"])
        for ds in sorted(self.per_dataset):
            for metric in sorted(self.per_dataset[ds]):
                writer.writerow([ds, metric, repr(self.per_dataset[ds][metric])])
        for metric in sorted(self.aggregates):
            writer.writerow(["__aggregate__", metric, repr(self.aggregates[metric])])
        return buf.getvalue()
