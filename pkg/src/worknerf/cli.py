"""Batch entry points: dataset generation, training, rendering, evaluation,
and occupancy export.

Exit codes: 0 success, 1 runtime or data error, 2 usage error. Every command
is deterministic given its inputs and seed; all randomness flows from the
single seed through named substreams.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np
from PIL import Image

from . import __version__
from .errors import ConfigError, WorknerfError
from .geometry import GridSpec
from .model import load_checkpoint
from .renderer import extract_occupancy, render_model_view, write_occupancy
from .scenegen import DEFAULT_IMAGE_SIZE, generate_dataset, read_dataset
from .training import TrainConfig, select_source_views, train
from .evaluation import ModelPredictor, config_hash, evaluate_model, \
    reports_to_csv, run_matrix

GEN_CONFIG_KEYS = {"scenes", "objects", "seed", "image_width", "image_height"}
MATRIX_EXTRA_KEYS = {"settings", "n_train_list"}


def _load_json_config(path) -> dict:
    try:
        return json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as e:
        raise ConfigError(f"config file {path} is not valid JSON: {e}") from e


def _require_known_keys(config: dict, known: set, what: str):
    unknown = set(config) - known
    if unknown:
        raise ConfigError(f"unknown {what} config keys: {sorted(unknown)}")


def cmd_gen_data(args) -> int:
    out = Path(args.out)
    if out.exists() and any(out.iterdir()):
        raise ConfigError(f"output directory {out} is not empty")
    cfg = {"scenes": 60, "objects": 5, "seed": 0,
           "image_width": DEFAULT_IMAGE_SIZE[0], "image_height": DEFAULT_IMAGE_SIZE[1]}
    if args.config:
        file_cfg = _load_json_config(args.config)
        _require_known_keys(file_cfg, GEN_CONFIG_KEYS, "dataset")
        cfg.update(file_cfg)
    for key in ("scenes", "objects", "seed"):
        value = getattr(args, key)
        if value is not None:
            cfg[key] = value
    manifest = generate_dataset(out, n_scenes=int(cfg["scenes"]),
                                n_objects=int(cfg["objects"]),
                                seed=int(cfg["seed"]),
                                image_size=(int(cfg["image_width"]),
                                            int(cfg["image_height"])))
    print(f"wrote {len(manifest.scene_ids)} scenes "
          f"({len(manifest.train_scenes)} train / {len(manifest.eval_scenes)} eval) "
          f"to {out}")
    return 0


def cmd_train(args) -> int:
    dataset = read_dataset(args.data)
    config = TrainConfig.from_dict(_load_json_config(args.config))
    log_path = args.log or f"{args.out}.log.jsonl"
    _, log = train(dataset, config, log_path=log_path, checkpoint_path=args.out)
    last = log[-1] if log else {}
    print(f"trained {config.epochs} epochs, final loss {last.get('total', float('nan')):.5f}; "
          f"checkpoint at {args.out}")
    return 0


def _save_png8(path, array01):
    arr = np.clip(np.round(np.asarray(array01) * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(arr).save(path)


def _save_png16_mm(path, depth_m):
    mm = np.clip(np.round(depth_m * 1000.0), 0, 65535).astype(np.uint16)
    Image.fromarray(mm).save(path)


def _load_model_and_config(ckpt_path):
    model, train_cfg = load_checkpoint(ckpt_path)
    config = TrainConfig.from_dict(train_cfg) if train_cfg else TrainConfig()
    return model, config


def cmd_render(args) -> int:
    dataset = read_dataset(args.data)
    model, config = _load_model_and_config(args.ckpt)
    if args.scene not in dataset.manifest.scene_ids:
        raise ConfigError(f"unknown scene {args.scene!r}; valid ids: "
                          f"{', '.join(dataset.manifest.scene_ids)}")
    views = dataset.load_views(args.scene)
    by_id = {v.camera_id: v for v in views}
    if args.camera not in by_id:
        raise ConfigError(f"unknown camera {args.camera!r}; valid ids: "
                          f"{', '.join(sorted(by_id))}")
    view = by_id[args.camera]
    sources = select_source_views(views, config.source_view_setting)
    predictor = ModelPredictor(model, config.voxel_spacing, config.n_samples_per_ray)
    encoding = predictor.encode(sources, dataset.manifest.workspace)
    rgb, depth, opacity = render_model_view(model, encoding, view.intrinsics,
                                            view.pose, view.background_rgb,
                                            n_samples=config.n_samples_per_ray)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    _save_png8(out / "rgb.png", rgb)
    _save_png16_mm(out / "depth.png", depth)
    _save_png8(out / "opacity.png", opacity)
    print(f"wrote rgb.png, depth.png, opacity.png to {out}")
    return 0


def cmd_evaluate(args) -> int:
    dataset = read_dataset(args.data)
    model, config = _load_model_and_config(args.ckpt)
    if args.split == "train" and not args.allow_train_eval:
        raise ConfigError("evaluating on the training split requires --allow-train-eval")
    predictor = ModelPredictor(model, config.voxel_spacing, config.n_samples_per_ray)
    report = evaluate_model(predictor, dataset, args.setting, split=args.split,
                            n_train=config.n_train_scenes, seed=config.seed,
                            cfg_hash=config_hash(config))
    Path(args.report).write_text(json.dumps(report.to_dict(), indent=1, sort_keys=True),
                                 encoding="utf-8")
    if args.csv:
        Path(args.csv).write_text(reports_to_csv([report]), encoding="utf-8")
    print(f"mae_depth {report.mae_depth:.5f} m, psnr {report.psnr:.2f} dB "
          f"-> {args.report}")
    return 0


def cmd_matrix(args) -> int:
    dataset = read_dataset(args.data)
    raw = _load_json_config(args.config)
    extra = {k: raw.pop(k) for k in list(raw) if k in MATRIX_EXTRA_KEYS}
    config = TrainConfig.from_dict(raw)
    settings = extra.get("settings", ["single", "stereo", "three_poses"])
    n_train_list = extra.get("n_train_list", [40, 20, 10, 5])
    reports = run_matrix(dataset, settings, n_train_list, config)
    out = Path(args.report)
    out.mkdir(parents=True, exist_ok=True)
    (out / "matrix.json").write_text(
        json.dumps([r.to_dict() for r in reports], indent=1, sort_keys=True),
        encoding="utf-8")
    (out / "matrix.csv").write_text(reports_to_csv(reports), encoding="utf-8")
    print(f"wrote {len(reports)} matrix rows to {out}")
    return 0


def cmd_export_occupancy(args) -> int:
    dataset = read_dataset(args.data)
    model, config = _load_model_and_config(args.ckpt)
    if args.scene not in dataset.manifest.scene_ids:
        raise ConfigError(f"unknown scene {args.scene!r}; valid ids: "
                          f"{', '.join(dataset.manifest.scene_ids)}")
    views = dataset.load_views(args.scene)
    sources = select_source_views(views, args.setting)
    grid = GridSpec.from_workspace(dataset.manifest.workspace, config.voxel_spacing)
    predictor = ModelPredictor(model, config.voxel_spacing, config.n_samples_per_ray)
    encoding = predictor.encode(sources, dataset.manifest.workspace)
    alpha = extract_occupancy(model, encoding, grid)
    write_occupancy(args.out, grid, alpha)
    print(f"wrote occupancy grid {grid.dims} to {args.out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="worknerf",
        description="Learn and evaluate 3D workspace occupancy from posed RGB views.")
    parser.add_argument("--version", action="version",
                        version=f"worknerf {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate a synthetic dataset")
    p.add_argument("--out", required=True, help="output directory (must be empty)")
    p.add_argument("--scenes", type=int, default=None, help="number of scenes (default 60)")
    p.add_argument("--objects", type=int, default=None, help="objects per scene (default 5)")
    p.add_argument("--seed", type=int, default=None, help="generation seed (default 0)")
    p.add_argument("--config", default=None, help="JSON dataset config file")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train an occupancy predictor")
    p.add_argument("--data", required=True, help="dataset directory")
    p.add_argument("--config", required=True, help="JSON training config file")
    p.add_argument("--out", required=True, help="checkpoint output path")
    p.add_argument("--log", default=None, help="JSON-lines log path "
                   "(default: <out>.log.jsonl)")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("render", help="render rgb/depth/opacity for one view")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--scene", required=True)
    p.add_argument("--camera", required=True)
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_render)

    p = sub.add_parser("evaluate", help="masked depth MAE and PSNR on a split")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--setting", required=True,
                   choices=["single", "stereo", "three_poses"])
    p.add_argument("--report", required=True, help="output JSON report path")
    p.add_argument("--csv", default=None, help="optional CSV output path")
    p.add_argument("--split", default="eval", choices=["eval", "train"])
    p.add_argument("--allow-train-eval", action="store_true",
                   help="permit evaluating on the training split")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("matrix", help="train and evaluate the full experiment grid")
    p.add_argument("--data", required=True)
    p.add_argument("--config", required=True,
                   help="training config JSON, optionally with settings/n_train_list")
    p.add_argument("--report", required=True, help="output directory")
    p.set_defaults(func=cmd_matrix)

    p = sub.add_parser("export-occupancy", help="write the predicted occupancy grid")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--scene", required=True)
    p.add_argument("--setting", required=True,
                   choices=["single", "stereo", "three_poses"])
    p.add_argument("--out", required=True, help="output .occv path")
    p.set_defaults(func=cmd_export_occupancy)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (WorknerfError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
