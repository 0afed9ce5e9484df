"""Command-line entry point.

Subcommands: gen-data, train, eval, cross-eval, suite, ablate. Config
and profile files are JSON; outputs are written as JSON + CSV pairs.
Exit codes: 0 success, 2 configuration/input error, 3 numeric failure.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from .errors import (CameraLookupError, ConfigError, DegenerateInputError,
                     DuplicateCameraError, FormatError, NumericError)
from .harness import (ExperimentConfig, ablate, cross_eval, cross_eval_csv,
                      evaluate, run_setting_suite, train)
from .model import load_checkpoint
from .synth import CameraProfile, default_profiles, generate_dataset, load_manifest

CONFIG_ERRORS = (ConfigError, FormatError, CameraLookupError, DuplicateCameraError,
                 FileNotFoundError, json.JSONDecodeError)
NUMERIC_ERRORS = (NumericError, DegenerateInputError)


def _load_profiles(path: str | None) -> list:
    if path is None:
        return default_profiles()
    raw = json.loads(Path(path).read_text())
    profiles = []
    for row in raw:
        try:
            profiles.append(CameraProfile(
                id=row["id"], depth_min=float(row["depth_min"]),
                depth_max=float(row["depth_max"]),
                noise_sigma=float(row.get("noise_sigma", 0.01)),
                resolution=tuple(row.get("resolution", (64, 64))),
                invalid_beyond_range=bool(row.get("invalid_beyond_range", True))))
        except KeyError as missing:
            raise ConfigError(f"camera profile missing field {missing}") from None
    return profiles


def _load_config(path: str) -> ExperimentConfig:
    return ExperimentConfig.from_dict(json.loads(Path(path).read_text()))


def _cmd_gen_data(args) -> int:
    profiles = _load_profiles(args.profiles)
    manifest = generate_dataset(profiles, args.out, args.scenes, args.seed,
                                test_scenes=args.test_scenes)
    print(f"wrote {manifest}")
    return 0


def _cmd_train(args) -> int:
    report, _ = train(_load_config(args.config), args.out)
    steps = report.total_steps()
    print(f"trained {report.setting} for {steps} steps; report in {args.out}")
    return 0


def _cmd_eval(args) -> int:
    dtype = np.float64 if args.precision == "f64" else np.float32
    model = load_checkpoint(args.checkpoint, dtype=dtype)
    samples = load_manifest(args.manifest, split=args.split)
    report = evaluate(model, samples, tau_mode=args.tau_mode,
                      fallback_relative=args.fallback_relative)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "metrics.json").write_text(report.to_json())
    (out / "metrics.csv").write_text(report.to_csv())
    print(f"evaluated {len(samples)} images; metrics in {out}")
    return 0


def _cmd_cross_eval(args) -> int:
    dtype = np.float64 if args.precision == "f64" else np.float32
    model = load_checkpoint(args.checkpoint, dtype=dtype)
    samples = load_manifest(args.manifest, split=args.split)
    result = cross_eval(model, samples, tau_mode=args.tau_mode)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "cross_eval.json").write_text(json.dumps(result, sort_keys=True, indent=2))
    (out / "cross_eval.csv").write_text(cross_eval_csv(result))
    print(f"cross-evaluated {len(result['predictors'])} converters; matrix in {out}")
    return 0


def _cmd_suite(args) -> int:
    suite = run_setting_suite(_load_config(args.config), args.out)
    verdict = "pass" if suite["comparisons"]["all_pass"] else "fail"
    print(f"suite complete ({verdict}); outputs in {args.out}")
    return 0


def _cmd_ablate(args) -> int:
    grid = None
    if args.grid is not None:
        grid = json.loads(Path(args.grid).read_text())
    table = ablate(_load_config(args.config), args.out, grid=grid)
    print(f"ablation table with {len(table['rows'])} rows in {args.out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="versadepth",
        description="Multi-camera depth estimation: data generation, training, "
                    "evaluation, and experiment suites.")
    sub = parser.add_subparsers(dest="command", required=True)

    gen = sub.add_parser("gen-data", help="render a synthetic multi-camera dataset")
    gen.add_argument("--profiles", default=None,
                     help="JSON list of camera profiles (default: built-in trio)")
    gen.add_argument("--out", required=True)
    gen.add_argument("--scenes", type=int, default=300,
                     help="training scenes per camera")
    gen.add_argument("--test-scenes", type=int, default=50)
    gen.add_argument("--seed", type=int, default=0)
    gen.set_defaults(fn=_cmd_gen_data)

    tr = sub.add_parser("train", help="train one setting from a JSON config")
    tr.add_argument("--config", required=True)
    tr.add_argument("--out", required=True)
    tr.set_defaults(fn=_cmd_train)

    ev = sub.add_parser("eval", help="evaluate a checkpoint on a manifest")
    ev.add_argument("--checkpoint", required=True)
    ev.add_argument("--manifest", required=True)
    ev.add_argument("--out", required=True)
    ev.add_argument("--tau-mode", choices=("paper", "classical"), default="paper")
    ev.add_argument("--split", default="test")
    ev.add_argument("--precision", choices=("f32", "f64"), default="f32")
    ev.add_argument("--fallback-relative", action="store_true",
                    help="score unsupported cameras with relative metrics only")
    ev.set_defaults(fn=_cmd_eval)

    ce = sub.add_parser("cross-eval",
                        help="tau matrix of every converter on every camera")
    ce.add_argument("--checkpoint", required=True)
    ce.add_argument("--manifest", required=True)
    ce.add_argument("--out", required=True)
    ce.add_argument("--tau-mode", choices=("paper", "classical"), default="paper")
    ce.add_argument("--split", default="test")
    ce.add_argument("--precision", choices=("f32", "f64"), default="f32")
    ce.set_defaults(fn=_cmd_cross_eval)

    su = sub.add_parser("suite", help="run all four settings and compare")
    su.add_argument("--config", required=True)
    su.add_argument("--out", required=True)
    su.set_defaults(fn=_cmd_suite)

    ab = sub.add_parser("ablate", help="coefficient-grid ablation study")
    ab.add_argument("--config", required=True)
    ab.add_argument("--grid", default=None,
                    help="JSON list of [alpha, beta, gamma] triples")
    ab.add_argument("--out", required=True)
    ab.set_defaults(fn=_cmd_ablate)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except CONFIG_ERRORS as err:
        print(f"configuration error: {err}", file=sys.stderr)
        return 2
    except NUMERIC_ERRORS as err:
        print(f"numeric failure: {err}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
