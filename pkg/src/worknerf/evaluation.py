"""Masked depth error, PSNR, and the experiment matrix runner.

Depth is judged against the dataset's ground-truth depth maps through a
validity mask: a pixel counts when its sensor depth is valid (> 0) and its
back-projected world point lies inside the workspace box. Predicted-invalid
pixels are additionally excluded from the error, but their share is reported
(``valid_pixel_fraction``), and a view where the prediction leaves no valid
pixel at all scores infinite error, so a model cannot look good by predicting
nothing.

Every evaluation renders the same four viewpoints per scene: the three static
cameras plus the center arc pose of the head depth camera. PSNR uses peak 1.0
on the same four viewpoints. Aggregation is the unweighted mean over views,
then over scenes.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, replace

import numpy as np
import torch

from .errors import ConfigError, EmptyMask, ShapeError
from .geometry import Aabb, CameraIntrinsics, GridSpec, Pose, pixel_rays
from .model import OccupancyPredictor, encode_scene
from .renderer import render_model_view
from .scenegen import Dataset, HEAD_CENTER_INDEX, N_STATIC_CAMS
from .training import TrainConfig, select_source_views, train

EVAL_VIEW_IDS = tuple(f"static_{j}" for j in range(N_STATIC_CAMS)) + \
    (f"head_depth_p{HEAD_CENTER_INDEX:02d}",)


def validity_mask(gt_depth: np.ndarray, intrinsics: CameraIntrinsics,
                  pose: Pose, workspace: Aabb) -> np.ndarray:
    """Pixels whose valid sensor depth back-projects into the workspace."""
    h, w = gt_depth.shape
    uu, vv = np.meshgrid(np.arange(w, dtype=np.float64),
                         np.arange(h, dtype=np.float64))
    uv = np.stack([uu, vv], axis=-1).reshape(-1, 2)
    origin, dirs, dir_z = pixel_rays(intrinsics, pose, uv)
    t = gt_depth.reshape(-1) / dir_z
    points = origin[None, :] + t[:, None] * dirs
    inside = workspace.contains(points).reshape(h, w)
    return (gt_depth > 0) & inside


def depth_mae(pred: np.ndarray, gt: np.ndarray, mask: np.ndarray) -> float:
    """Mean absolute depth error over jointly valid pixels, in meters.

    Pixels where the prediction is invalid (depth 0) are excluded on top of
    the mask; raises :class:`EmptyMask` when nothing remains.
    """
    if pred.shape != gt.shape or mask.shape != gt.shape:
        raise ShapeError("pred, gt, and mask must share their shape")
    joint = mask & (pred > 0)
    if not np.any(joint):
        raise EmptyMask("no jointly valid pixels")
    return float(np.mean(np.abs(pred[joint] - gt[joint])))


def psnr(target: np.ndarray, rendered: np.ndarray) -> float:
    """10 * log10(1 / mse) with peak 1.0; +inf for identical images."""
    if target.shape != rendered.shape:
        raise ShapeError("target and rendered must share their shape")
    mse = float(np.mean((np.asarray(target, dtype=np.float64)
                         - np.asarray(rendered, dtype=np.float64)) ** 2))
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(1.0 / mse)


# ---------------------------------------------------------------------------
# reports


@dataclass(frozen=True)
class ViewResult:
    view_id: str
    mae_depth: float  # meters; inf when the prediction had no valid pixel
    psnr: float
    valid_pixel_fraction: float


@dataclass(frozen=True)
class SceneResult:
    scene_id: str
    views: tuple
    mae_depth: float
    psnr: float
    valid_pixel_fraction: float


@dataclass(frozen=True)
class EvalReport:
    source_view_setting: str
    n_train: int
    seed: int
    config_hash: str
    split: str
    scenes: tuple
    mae_depth: float
    psnr: float
    valid_pixel_fraction: float

    def to_dict(self) -> dict:
        return _json_safe({
            "source_view_setting": self.source_view_setting,
            "n_train": self.n_train,
            "seed": self.seed,
            "config_hash": self.config_hash,
            "split": self.split,
            "psnr_peak": 1.0,
            "eval_view_ids": list(EVAL_VIEW_IDS),
            "mae_depth": self.mae_depth,
            "psnr": self.psnr,
            "valid_pixel_fraction": self.valid_pixel_fraction,
            "scenes": [
                {"scene_id": s.scene_id, "mae_depth": s.mae_depth, "psnr": s.psnr,
                 "valid_pixel_fraction": s.valid_pixel_fraction,
                 "views": [vars(v) for v in s.views]}
                for s in self.scenes
            ],
        })


def _json_safe(value):
    """Standards-compliant JSON cannot carry inf/nan; encode them as strings."""
    if isinstance(value, dict):
        return {k: _json_safe(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_json_safe(v) for v in value]
    if isinstance(value, float) and not math.isfinite(value):
        return str(value)
    return value


def config_hash(config: TrainConfig) -> str:
    blob = json.dumps(config.to_dict(), sort_keys=True).encode("utf-8")
    return hashlib.sha256(blob).hexdigest()[:16]


# ---------------------------------------------------------------------------
# predictors


class ModelPredictor:
    """Renders evaluation views from a trained predictor."""

    def __init__(self, model: OccupancyPredictor, voxel_spacing: float,
                 n_samples: int):
        self.model = model
        self.voxel_spacing = voxel_spacing
        self.n_samples = n_samples

    def encode(self, source_views, workspace: Aabb):
        grid = GridSpec.from_workspace(workspace, self.voxel_spacing)
        with torch.no_grad():
            return encode_scene(self.model, source_views, grid)

    def render(self, encoding, view):
        rgb, depth, _ = render_model_view(self.model, encoding, view.intrinsics,
                                          view.pose, view.background_rgb,
                                          n_samples=self.n_samples)
        return rgb, depth


class OracleStubPredictor:
    """Self-test predictor that returns the ground truth unchanged."""

    def encode(self, source_views, workspace):
        return None

    def render(self, encoding, view):
        return view.rgb, view.depth


def evaluate_model(predictor, dataset: Dataset, setting: str,
                   split: str = "eval", n_train: int = 0, seed: int = 0,
                   cfg_hash: str = "") -> EvalReport:
    """Per eval scene: encode the setting's source views, render the four
    depth-capable viewpoints, score masked depth MAE and PSNR."""
    manifest = dataset.manifest
    scene_ids = manifest.eval_scenes if split == "eval" else manifest.train_scenes
    workspace = manifest.workspace
    scene_results = []
    for scene_id in scene_ids:
        views = dataset.load_views(scene_id)
        by_id = {v.camera_id: v for v in views}
        sources = select_source_views(views, setting)
        encoding = predictor.encode(sources, workspace)
        view_results = []
        for view_id in EVAL_VIEW_IDS:
            view = by_id[view_id]
            rgb, depth = predictor.render(encoding, view)
            mask = validity_mask(view.depth, view.intrinsics, view.pose, workspace)
            n_mask = int(mask.sum())
            n_joint = int((mask & (depth > 0)).sum())
            try:
                mae = depth_mae(depth, view.depth, mask)
            except EmptyMask:
                mae = math.inf
            view_results.append(ViewResult(
                view_id=view_id, mae_depth=mae, psnr=psnr(view.rgb, rgb),
                valid_pixel_fraction=n_joint / n_mask if n_mask else 0.0))
        scene_results.append(SceneResult(
            scene_id=scene_id, views=tuple(view_results),
            mae_depth=float(np.mean([v.mae_depth for v in view_results])),
            psnr=float(np.mean([v.psnr for v in view_results])),
            valid_pixel_fraction=float(np.mean(
                [v.valid_pixel_fraction for v in view_results]))))
    return EvalReport(
        source_view_setting=setting, n_train=n_train, seed=seed,
        config_hash=cfg_hash, split=split, scenes=tuple(scene_results),
        mae_depth=float(np.mean([s.mae_depth for s in scene_results])),
        psnr=float(np.mean([s.psnr for s in scene_results])),
        valid_pixel_fraction=float(np.mean(
            [s.valid_pixel_fraction for s in scene_results])))


# ---------------------------------------------------------------------------
# experiment matrix


def matrix_cells(settings, n_train_list) -> list:
    """The reported grid: every setting at the first (largest) training-set
    size, then the last setting at each remaining size."""
    cells = [(s, n_train_list[0]) for s in settings]
    cells += [(settings[-1], n) for n in n_train_list[1:]]
    return cells


def run_matrix(dataset: Dataset, settings, n_train_list,
               base_config: TrainConfig, progress=None) -> list:
    """Train one model per cell on the first n_train scenes and evaluate all
    of them on the shared eval split."""
    if max(n_train_list) > len(dataset.manifest.train_scenes):
        raise ConfigError("n_train exceeds the available training scenes")
    for s in settings:
        if s not in ("single", "stereo", "three_poses"):
            raise ConfigError(f"unknown setting {s!r}")
    reports = []
    for setting, n_train in matrix_cells(settings, n_train_list):
        config = replace(base_config, source_view_setting=setting,
                         n_train_scenes=n_train)
        model, _ = train(dataset, config, progress=progress)
        predictor = ModelPredictor(model, config.voxel_spacing,
                                   config.n_samples_per_ray)
        reports.append(evaluate_model(
            predictor, dataset, setting, split="eval", n_train=n_train,
            seed=config.seed, cfg_hash=config_hash(config)))
    return reports


_SETTING_LABELS = {
    "single": ("left_eye", "mid"),
    "stereo": ("left_eye+right_eye", "mid"),
    "three_poses": ("left_eye", "left+mid+right"),
}


def reports_to_csv(reports) -> str:
    """Result table as CSV with one row per matrix cell."""
    lines = ["source_cameras,head_pose,n_train,mae_depth,psnr"]
    for r in reports:
        cams, head = _SETTING_LABELS[r.source_view_setting]
        lines.append(f"{cams},{head},{r.n_train},{r.mae_depth:.5f},{r.psnr:.2f}")
    return "\n".join(lines) + "\n"
