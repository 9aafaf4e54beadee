"""Command line interface.

Subcommands: synth, train, eval, locate, map. Exit codes: 0 success,
2 bad configuration or usage, 3 I/O failure, 4 runtime/domain failure.
"""
from __future__ import annotations

import argparse
import json
import math
import os
import sys
from dataclasses import asdict, fields, replace

from .audio_io import iter_events, read_clip
from .errors import ConfigError, IoFailure, VibrolocError
from .features import gcc_phat_all
from .geometry import CylinderSpec, default_layout, save_xyz
from .localize import (ModalityFlags, ablation_table,
                       evaluate, multilaterate, preprocessing_ablation,
                       required_max_lag, train_model)
from .mapping import default_scene, execute_mapping, plan_strikes, score_map
from .preprocess import (PipelineConfig, fit_noise_profile, peak_index,
                         slice_window, spectral_gate)
from .regressor import ContactRegressor, TrainConfig
from .simulate import SimConfig, default_plan, synth_dataset


def _load_config_file(path) -> dict:
    if path is None:
        return {}
    try:
        with open(path) as f:
            doc = json.load(f)
    except OSError as e:
        raise IoFailure(str(e)) from e
    except json.JSONDecodeError as e:
        raise ConfigError(f"{path}: {e}") from None
    if not isinstance(doc, dict):
        raise ConfigError(f"{path}: config root must be an object")
    return doc


def _build(dc_type, base, section: dict, overrides: dict):
    known = {f.name for f in fields(dc_type)}
    bad = set(section) - known
    if bad:
        raise ConfigError(f"unknown {dc_type.__name__} keys: {sorted(bad)}")
    merged = dict(section)
    merged.update({k: v for k, v in overrides.items() if v is not None})
    try:
        return replace(base, **{k: tuple(v) if isinstance(v, list) else v
                                for k, v in merged.items()})
    except (TypeError, ValueError) as e:
        raise ConfigError(str(e)) from None


def _echo_config(out_dir, payload: dict) -> None:
    os.makedirs(out_dir, exist_ok=True)
    with open(os.path.join(out_dir, "config.json"), "w") as f:
        json.dump(payload, f, indent=2, default=str)


def cmd_synth(args) -> int:
    doc = _load_config_file(args.config)
    sim = _build(SimConfig, SimConfig(), doc.get("sim", {}),
                 {"seed": args.seed})
    plan = default_plan(args.n_train, args.n_test,
                        seed=args.seed if args.seed is not None else 0,
                        leaf_level=args.leaf_level)

    def progress(split, i, total):
        if (i + 1) % 200 == 0 or i + 1 == total:
            print(f"  {split}: {i + 1}/{total}", flush=True)

    print(f"synthesizing dataset into {args.out}")
    manifests = synth_dataset(plan, sim, args.out, progress=progress)
    _echo_config(args.out, {"command": "synth", "sim": asdict(sim),
                            "n_train": args.n_train, "n_test": args.n_test,
                            "seed": args.seed, "leaf_level": args.leaf_level})
    for name, path in manifests.items():
        print(f"wrote {path}")
    return 0


def _dataset_events(data_dir, split: str):
    manifest = os.path.join(data_dir, f"manifest_{split}.jsonl")
    if not os.path.exists(manifest):
        raise IoFailure(f"no manifest for split {split!r} in {data_dir}")
    return (event for _, event in iter_events(manifest, data_dir))


def _dataset_splits(data_dir) -> list:
    names = []
    for fn in sorted(os.listdir(data_dir)):
        if fn.startswith("manifest_") and fn.endswith(".jsonl"):
            names.append(fn[len("manifest_"):-len(".jsonl")])
    return names


def cmd_train(args) -> int:
    doc = _load_config_file(args.config)
    pipe = _build(PipelineConfig, PipelineConfig(), doc.get("pipeline", {}), {})
    tc = _build(TrainConfig, TrainConfig(), doc.get("train", {}),
                {"epochs": args.epochs, "batch_size": args.batch_size,
                 "learning_rate": args.lr, "seed": args.seed,
                 "augment": False if args.no_augment else None})
    flags = ModalityFlags(use_proprio=not args.no_proprio)
    noise_ref = read_clip(os.path.join(args.data, "noise_reference.wav"))
    print(f"training on {args.data} (epochs={tc.epochs}, "
          f"proprio={'off' if args.no_proprio else 'on'})")
    model = train_model(_dataset_events(args.data, "train"), noise_ref, pipe, tc, flags)
    model.save(args.out)
    _echo_config(args.out, {"command": "train", "data": args.data,
                            "pipeline": asdict(pipe), "train": asdict(tc),
                            "proprio": not args.no_proprio})
    last = model.history[-1] if model.history else (0, float("nan"), float("nan"))
    print(f"saved model to {args.out} "
          f"(final train loss {last[1]:.5f}, val loss {last[2]:.5f})")
    return 0


def cmd_eval(args) -> int:
    model = ContactRegressor.load(args.model)
    cyl = CylinderSpec()
    splits = args.split or [s for s in _dataset_splits(args.data) if s != "train"]
    if not splits:
        raise ConfigError(f"no evaluation splits found in {args.data}")
    if args.out:
        os.makedirs(args.out, exist_ok=True)
    summary_lines = []
    for split in splits:
        report = evaluate(model, _dataset_events(args.data, split), cyl)
        line = f"{split}: {report.to_text()}"
        print(line)
        summary_lines.append(line)
        if args.out:
            report.write_csv(os.path.join(args.out, f"per_event_{split}.csv"))
    if args.ablate:
        ab_split = args.ablate_split or splits[-1]
        events = list(_dataset_events(args.data, ab_split))
        rows = preprocessing_ablation(model, events, cyl)
        table = ablation_table(rows)
        print(f"preprocessing ablation on {ab_split}:")
        print(table)
        summary_lines.append(f"preprocessing ablation on {ab_split}:")
        summary_lines.append(table)
        if args.out:
            with open(os.path.join(args.out, "ablation.csv"), "w") as f:
                f.write("variant,med_cm,median_cm,height_cm,angle_deg\n")
                for name, rep in rows:
                    f.write(f"{name},{rep.med_m * 100:.4f},{rep.median_m * 100:.4f},"
                            f"{rep.height_mean_m * 100:.4f},"
                            f"{math.degrees(rep.angle_mean_rad):.4f}\n")
    if args.out:
        with open(os.path.join(args.out, "summary.txt"), "w") as f:
            f.write("\n".join(summary_lines) + "\n")
    return 0


def cmd_locate(args) -> int:
    clip = read_clip(args.clip)
    pipe = PipelineConfig(apply_gate=args.noise_ref is not None)
    center = peak_index(clip)
    if args.noise_ref:
        profile = fit_noise_profile(read_clip(args.noise_ref))
        clip = spectral_gate(clip, profile, pipe.k_sigma, pipe.floor_db,
                             pipe.smooth_bins)
    window, _ = slice_window(clip, center, pipe.window_s)
    layout = default_layout()
    cyl = CylinderSpec()
    sim = SimConfig(wave_speed=args.wave_speed)
    lag = required_max_lag(layout, cyl, sim, window.sample_rate)
    gcc = gcc_phat_all(window, max_lag=lag)
    point, residual = multilaterate(gcc, layout, cyl, sim,
                                    sample_rate=window.sample_rate)
    print(f"{point.z * 100:.2f} {math.degrees(point.theta):.2f}")
    if args.noise_ref is None:
        print("note: no noise reference given; gating disabled", file=sys.stderr)
    print(f"note: rms residual {residual:.3f} samples", file=sys.stderr)
    return 0


def cmd_map(args) -> int:
    model = ContactRegressor.load(args.model)
    doc = _load_config_file(args.config)
    sim = _build(SimConfig, SimConfig(), doc.get("sim", {}), {})
    cyl = CylinderSpec()
    scene = default_scene(args.scene_seed)
    plan = plan_strikes(scene, cyl, args.strikes, [args.seed, 1])
    print(f"executing {len(plan.poses)} strikes")
    result = execute_mapping(plan, scene, model, sim, args.threshold,
                             [args.seed, 2], cyl=cyl)
    os.makedirs(args.out, exist_ok=True)
    save_xyz(result.predicted, os.path.join(args.out, "predicted.xyz"))
    save_xyz(result.truth, os.path.join(args.out, "truth.xyz"))
    if len(result.predicted) == 0:
        print("no accepted contacts; wrote empty clouds")
        return 0
    metrics = score_map(result, scene)
    with open(os.path.join(args.out, "report.json"), "w") as f:
        json.dump({"format_version": 1, "kind": "mapping_report",
                   "metrics": metrics}, f, indent=2)
    _echo_config(args.out, {"command": "map", "sim": asdict(sim),
                            "strikes": args.strikes, "seed": args.seed,
                            "threshold": args.threshold,
                            "scene_seed": args.scene_seed})
    print(f"chamfer {metrics['chamfer_cm']:.4f} cm  med {metrics['med_cm']:.4f} cm  "
          f"points {metrics['n_points']}/{metrics['attempted']} "
          f"(misses {metrics['misses']}, rejected {metrics['rejected']}, "
          f"out of band {metrics['out_of_band']})")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="vibroloc",
                                description="Acoustic contact localization toolkit")
    sub = p.add_subparsers(dest="command", required=True)

    sp = sub.add_parser("synth", help="synthesize a labeled dataset")
    sp.add_argument("--out", required=True)
    sp.add_argument("--config")
    sp.add_argument("--n-train", type=int, default=2000)
    sp.add_argument("--n-test", type=int, default=300)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--leaf-level", type=float, default=0.012)
    sp.set_defaults(func=cmd_synth)

    tp = sub.add_parser("train", help="train the contact regressor")
    tp.add_argument("--data", required=True)
    tp.add_argument("--out", required=True)
    tp.add_argument("--config")
    tp.add_argument("--epochs", type=int)
    tp.add_argument("--batch-size", type=int)
    tp.add_argument("--lr", type=float)
    tp.add_argument("--seed", type=int)
    tp.add_argument("--no-augment", action="store_true")
    tp.add_argument("--no-proprio", action="store_true")
    tp.set_defaults(func=cmd_train)

    ep = sub.add_parser("eval", help="evaluate a model on dataset splits")
    ep.add_argument("--data", required=True)
    ep.add_argument("--model", required=True)
    ep.add_argument("--split", action="append")
    ep.add_argument("--out")
    ep.add_argument("--ablate", action="store_true")
    ep.add_argument("--ablate-split")
    ep.set_defaults(func=cmd_eval)

    lp = sub.add_parser("locate", help="analytic localization of one clip")
    lp.add_argument("--clip", required=True)
    lp.add_argument("--noise-ref")
    lp.add_argument("--wave-speed", type=float, default=150.0)
    lp.set_defaults(func=cmd_locate)

    mp = sub.add_parser("map", help="blind mapping of the default branch scene")
    mp.add_argument("--model", required=True)
    mp.add_argument("--out", required=True)
    mp.add_argument("--config")
    mp.add_argument("--strikes", type=int, default=200)
    mp.add_argument("--seed", type=int, default=0)
    mp.add_argument("--threshold", type=float, default=0.005)
    mp.add_argument("--scene-seed", type=int, default=0)
    mp.set_defaults(func=cmd_map)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except IoFailure as e:
        print(f"error: {e}", file=sys.stderr)
        return 3
    except VibrolocError as e:
        print(f"error: {e}", file=sys.stderr)
        return 4


if __name__ == "__main__":
    sys.exit(main())
