"""Reconstruction loss, the view-selection protocol, and the training loop.

Each step works on one training scene: encode its source views into a feature
volume, pick a random depth-capable target view (uniform over the four
cameras, then uniform over the 15 arc poses when the head camera comes up),
render a random subset of target pixels, and take one adaptive-moment
gradient step on ``mse + 0.1 * beta`` where the beta term pushes per-sample
opacities toward 0 or 1.

All randomness flows from ``TrainConfig.seed`` through named substreams, so
identical configs produce bitwise-identical checkpoints.
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, asdict

import numpy as np
import torch

from .errors import ConfigError, ShapeError
from .geometry import GridSpec, pixel_rays
from .model import ArchConfig, OccupancyPredictor, encode_scene, grid_centers_t, \
    init_parameters, save_checkpoint
from .renderer import model_field_fn, render_rays
from .scenegen import Dataset, HEAD_CENTER_INDEX, N_ARC_POSES, N_STATIC_CAMS

SOURCE_VIEW_SETTINGS = ("single", "stereo", "three_poses")

# Substream tags hashed together with the user seed.
_STREAM_INIT = 0
_STREAM_EPOCH_ORDER = 1
_STREAM_TARGET = 2
_STREAM_PIXELS = 3
_STREAM_JITTER = 4


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 400
    learning_rate: float = 5e-4
    beta_weight: float = 0.1
    rays_per_step: int = 1024
    n_samples_per_ray: int = 64
    source_view_setting: str = "three_poses"
    n_train_scenes: int = 40
    seed: int = 0
    checkpoint_every: int = 100
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    voxel_spacing: float = 0.01
    include_valid_count: bool = False
    include_source_rgb: bool = False
    mlp_hidden: int = 128
    mlp_layers: int = 6

    def __post_init__(self):
        if self.epochs < 1:
            raise ConfigError("epochs must be >= 1")
        if self.learning_rate <= 0:
            raise ConfigError("learning_rate must be positive")
        if self.beta_weight < 0:
            raise ConfigError("beta_weight must be >= 0")
        if self.source_view_setting not in SOURCE_VIEW_SETTINGS:
            raise ConfigError(
                f"source_view_setting must be one of {SOURCE_VIEW_SETTINGS}, "
                f"got {self.source_view_setting!r}")

    def arch(self) -> ArchConfig:
        return ArchConfig(include_valid_count=self.include_valid_count,
                          include_source_rgb=self.include_source_rgb,
                          mlp_hidden=self.mlp_hidden, mlp_layers=self.mlp_layers)

    def to_dict(self) -> dict:
        return asdict(self)

    @staticmethod
    def from_dict(d: dict) -> "TrainConfig":
        known = set(TrainConfig.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown training config keys: {sorted(unknown)}")
        return TrainConfig(**d)


def substream(seed: int, tag: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, tag]))


@dataclass
class LossBreakdown:
    """Scalar loss terms; total = mse + beta_weight * beta."""

    mse: torch.Tensor
    beta: torch.Tensor
    total: torch.Tensor

    def item(self) -> dict:
        return {"mse": float(self.mse.detach()), "beta": float(self.beta.detach()),
                "total": float(self.total.detach())}


def compute_loss(target_pixels, rendered, all_alphas, beta_weight: float) -> LossBreakdown:
    """Mean squared color error plus the opacity binarization term.

    ``target_pixels`` and ``rendered`` are (N, 3) colors; the squared error is
    averaged over pixels and channels. ``all_alphas`` holds the opacity of
    every ray sample; the beta term is the mean of ``alpha * (1 - alpha)``.
    """
    target = torch.as_tensor(target_pixels)
    pred = torch.as_tensor(rendered)
    if target.shape != pred.shape:
        raise ShapeError(f"target shape {tuple(target.shape)} != rendered "
                         f"shape {tuple(pred.shape)}")
    if target.numel() == 0:
        raise ShapeError("loss requires at least one pixel")
    pred = pred.to(target.dtype)
    alphas = torch.as_tensor(all_alphas).to(target.dtype).reshape(-1)
    mse = ((target - pred) ** 2).mean()
    if alphas.numel() == 0:
        beta = torch.zeros((), dtype=target.dtype)
    else:
        beta = (alphas * (1.0 - alphas)).mean()
    return LossBreakdown(mse, beta, mse + beta_weight * beta)


# ---------------------------------------------------------------------------
# view selection protocol


def _views_by_id(views) -> dict:
    return {v.camera_id: v for v in views}


def _require_depth_rig(by_id: dict):
    needed = [f"static_{j}" for j in range(N_STATIC_CAMS)] + \
        [f"head_depth_p{i:02d}" for i in range(N_ARC_POSES)]
    missing = [v for v in needed if v not in by_id]
    if missing:
        raise ConfigError(f"scene is missing depth-capable views: {missing[:4]}...")


def select_target_view(views, rng: np.random.Generator, exclude=frozenset()):
    """Draw a target: uniform over the 4 depth-capable cameras, then uniform
    over the 15 arc poses when the head camera is drawn.

    ``exclude`` (view ids) is rejection-sampled away; it exists so a harness
    can hold out a pose while keeping the remaining draws conditionally
    uniform.
    """
    by_id = _views_by_id(views)
    _require_depth_rig(by_id)
    for _ in range(10_000):
        cam = int(rng.integers(4))
        if cam < N_STATIC_CAMS:
            view_id = f"static_{cam}"
        else:
            view_id = f"head_depth_p{int(rng.integers(N_ARC_POSES)):02d}"
        if view_id not in exclude:
            return by_id[view_id]
    raise ConfigError("target view exclusion rejected every draw")


def select_source_views(views, setting: str) -> list:
    """Fixed source views per setting: the mid-arc left eye, the mid-arc
    stereo pair, or the left eye at both arc ends plus the middle."""
    by_id = _views_by_id(views)
    mid = HEAD_CENTER_INDEX
    if setting == "single":
        ids = [f"eye_left_p{mid:02d}"]
    elif setting == "stereo":
        ids = [f"eye_left_p{mid:02d}", f"eye_right_p{mid:02d}"]
    elif setting == "three_poses":
        ids = [f"eye_left_p{0:02d}", f"eye_left_p{mid:02d}",
               f"eye_left_p{N_ARC_POSES - 1:02d}"]
    else:
        raise ConfigError(f"unknown source view setting {setting!r}")
    missing = [i for i in ids if i not in by_id]
    if missing:
        raise ConfigError(f"scene is missing source views: {missing}")
    return [by_id[i] for i in ids]


# ---------------------------------------------------------------------------
# training loop


@dataclass
class _TargetView:
    """Lightweight target candidate kept in memory during training."""

    camera_id: str
    intrinsics: object
    pose: object
    rgb: np.ndarray  # (H, W, 3) float32
    background_rgb: np.ndarray  # (H, W, 3) float32


@dataclass
class _TrainScene:
    scene_id: str
    source_views: list
    targets: list  # list[_TargetView]


def _load_train_scene(dataset: Dataset, scene_id: str, setting: str) -> _TrainScene:
    views = dataset.load_views(scene_id)
    sources = select_source_views(views, setting)
    targets = [_TargetView(v.camera_id, v.intrinsics, v.pose,
                           v.rgb.astype(np.float32),
                           v.background_rgb.astype(np.float32))
               for v in views if v.depth is not None]
    return _TrainScene(scene_id, sources, targets)


def train(dataset: Dataset, config: TrainConfig, log_path=None,
          checkpoint_path=None, holdout_view_ids=frozenset(), progress=None):
    """Train a predictor; returns (model, per-epoch log records).

    One step per training scene per epoch, scenes visited in a reshuffled
    order every epoch. ``holdout_view_ids`` are never drawn as targets.
    Writes JSON-lines logs and periodic checkpoints when paths are given.
    """
    manifest = dataset.manifest
    train_ids = list(manifest.train_scenes)[:config.n_train_scenes]
    if len(train_ids) < config.n_train_scenes:
        raise ConfigError(f"dataset has {len(manifest.train_scenes)} training scenes, "
                          f"config wants {config.n_train_scenes}")
    grid = GridSpec.from_workspace(manifest.workspace, config.voxel_spacing)

    model = OccupancyPredictor(config.arch())
    seed_init = int(substream(config.seed, _STREAM_INIT).integers(2 ** 62))
    init_parameters(model, seed_init)
    optimizer = torch.optim.Adam(model.parameters(), lr=config.learning_rate,
                                 betas=(config.adam_beta1, config.adam_beta2),
                                 eps=config.adam_eps)

    rng_order = substream(config.seed, _STREAM_EPOCH_ORDER)
    rng_target = substream(config.seed, _STREAM_TARGET)
    rng_pixels = substream(config.seed, _STREAM_PIXELS)
    rng_jitter = substream(config.seed, _STREAM_JITTER)

    scenes = [_load_train_scene(dataset, sid, config.source_view_setting)
              for sid in train_ids]
    centers = grid_centers_t(grid, torch.float32)
    bounds = grid.center_bounds()
    holdout = frozenset(holdout_view_ids)

    log_file = open(log_path, "w", encoding="utf-8") if log_path else None
    log = []
    try:
        for epoch in range(config.epochs):
            t0 = time.monotonic()
            order = rng_order.permutation(len(scenes))
            sums = {"mse": 0.0, "beta": 0.0, "total": 0.0}
            for si in order:
                scene = scenes[si]
                target = select_target_view(scene.targets, rng_target, exclude=holdout)
                h, w = target.intrinsics.height, target.intrinsics.width
                flat = rng_pixels.choice(h * w, size=min(config.rays_per_step, h * w),
                                         replace=False)
                uv = np.stack([flat % w, flat // w], axis=-1).astype(np.float64)

                encoding = encode_scene(model, scene.source_views, grid, centers=centers)
                origin, dirs, dir_z = pixel_rays(target.intrinsics, target.pose, uv)
                bg = target.background_rgb.reshape(-1, 3)[flat]
                out = render_rays(model_field_fn(model, encoding, check_bounds=False),
                                  origin, dirs, dir_z, bounds, bg,
                                  config.n_samples_per_ray, jitter_rng=rng_jitter)
                targets = target.rgb.reshape(-1, 3)[flat]
                loss = compute_loss(torch.as_tensor(targets), out["color"],
                                    out["alpha"], config.beta_weight)
                optimizer.zero_grad()
                loss.total.backward()
                optimizer.step()
                for k, v in loss.item().items():
                    sums[k] += v
            record = {"epoch": epoch,
                      "mse": sums["mse"] / len(scenes),
                      "beta": sums["beta"] / len(scenes),
                      "total": sums["total"] / len(scenes),
                      "wall_ms": int((time.monotonic() - t0) * 1000)}
            log.append(record)
            if log_file:
                log_file.write(json.dumps(record) + "\n")
                log_file.flush()
            if progress:
                progress(record)
            if checkpoint_path and config.checkpoint_every > 0 \
                    and (epoch + 1) % config.checkpoint_every == 0 \
                    and epoch + 1 < config.epochs:
                save_checkpoint(f"{checkpoint_path}.epoch{epoch + 1:04d}",
                                model, config.to_dict())
    finally:
        if log_file:
            log_file.close()
    if checkpoint_path:
        save_checkpoint(checkpoint_path, model, config.to_dict())
    return model, log
