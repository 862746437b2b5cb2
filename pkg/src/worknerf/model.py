"""Neural modules: 2D feature extractor, world-frame cost volume, 3D U-Net,
and the field MLP, trained end-to-end through the renderer.

Everything here runs on torch tensors so gradients flow from rendered pixels
back to all parameters; reverse-mode differentiation is delegated to torch
autograd and is verified against central finite differences in the test
suite. Array layout follows torch convention: feature maps are (C, H, W) and
volumes are (C, nz, ny, nx), matching the x-fastest voxel order used by
:class:`worknerf.geometry.GridSpec`.
"""

from __future__ import annotations

import io
import json
import struct
from dataclasses import dataclass, asdict, field

import numpy as np
import torch
import torch.nn as nn

from .errors import FormatError, GraphError, OutOfBounds, ShapeError
from .geometry import CameraIntrinsics, GridSpec, Pose

LEAKY_SLOPE = 0.01

EXTRACTOR_CHANNELS = (3, 8, 8, 16, 16, 16, 32, 32, 32, 32)
EXTRACTOR_STRIDES = (1, 1, 2, 1, 1, 2, 1, 1, 1)  # stride 2 at layers 3 and 6
UNET_ENCODER_CHANNELS = (32, 64, 128)
FEATURE_VOLUME_CHANNELS = 8
MLP_HIDDEN = 128
MLP_LAYERS = 6

CHECKPOINT_MAGIC = b"WNCP"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class ArchConfig:
    """Architecture hyperparameters; all shipped defaults are fixed here.

    ``include_valid_count`` adds the per-voxel observing-view count as an
    extra cost-volume channel. ``include_source_rgb`` switches the MLP to the
    variant that also sees the mean projected source color at each query
    point. Both are off by default.
    """

    feature_channels: int = 32
    volume_channels: int = FEATURE_VOLUME_CHANNELS
    mlp_hidden: int = MLP_HIDDEN
    mlp_layers: int = MLP_LAYERS
    include_valid_count: bool = False
    include_source_rgb: bool = False

    def to_dict(self) -> dict:
        return asdict(self)

    @staticmethod
    def from_dict(d: dict) -> "ArchConfig":
        known = {f for f in ArchConfig.__dataclass_fields__}
        unknown = set(d) - known
        if unknown:
            raise FormatError(f"unknown architecture config keys: {sorted(unknown)}")
        return ArchConfig(**d)

    @property
    def cost_channels(self) -> int:
        return self.feature_channels + (1 if self.include_valid_count else 0)

    @property
    def mlp_in(self) -> int:
        base = self.volume_channels + 3 + 3  # volume features + rel pos + view dir
        return base + (3 if self.include_source_rgb else 0)


# ---------------------------------------------------------------------------
# differentiable sampling (torch mirrors of geometry.bilinear/trilinear)


def bilinear_sample_t(feat: torch.Tensor, uv: torch.Tensor) -> torch.Tensor:
    """Sample a (C, H, W) map at pixel coordinates (N, 2), clamped to bounds.

    Gradients flow into ``feat``. Matches the numpy reference up to dtype.
    """
    _, h, w = feat.shape
    u = uv[:, 0].clamp(0.0, w - 1.0)
    v = uv[:, 1].clamp(0.0, h - 1.0)
    x0 = u.floor().long().clamp(0, max(w - 2, 0))
    y0 = v.floor().long().clamp(0, max(h - 2, 0))
    x1 = (x0 + 1).clamp(0, w - 1)
    y1 = (y0 + 1).clamp(0, h - 1)
    fx = (u - x0).unsqueeze(0)
    fy = (v - y0).unsqueeze(0)
    top = (1 - fx) * feat[:, y0, x0] + fx * feat[:, y0, x1]
    bot = (1 - fx) * feat[:, y1, x0] + fx * feat[:, y1, x1]
    return (1 - fy) * top + fy * bot  # (C, N)


def trilinear_sample_t(vol: torch.Tensor, idx: torch.Tensor) -> torch.Tensor:
    """Sample a (C, nz, ny, nx) volume at continuous indices (N, 3) = (ix, iy, iz).

    Indices are clamped to the voxel-center hull; gradients flow into ``vol``.
    """
    _, nz, ny, nx = vol.shape
    ix = idx[:, 0].clamp(0.0, nx - 1.0)
    iy = idx[:, 1].clamp(0.0, ny - 1.0)
    iz = idx[:, 2].clamp(0.0, nz - 1.0)
    x0 = ix.floor().long().clamp(0, max(nx - 2, 0))
    y0 = iy.floor().long().clamp(0, max(ny - 2, 0))
    z0 = iz.floor().long().clamp(0, max(nz - 2, 0))
    x1 = (x0 + 1).clamp(0, nx - 1)
    y1 = (y0 + 1).clamp(0, ny - 1)
    z1 = (z0 + 1).clamp(0, nz - 1)
    fx = (ix - x0).unsqueeze(0)
    fy = (iy - y0).unsqueeze(0)
    fz = (iz - z0).unsqueeze(0)
    c00 = (1 - fx) * vol[:, z0, y0, x0] + fx * vol[:, z0, y0, x1]
    c10 = (1 - fx) * vol[:, z0, y1, x0] + fx * vol[:, z0, y1, x1]
    c01 = (1 - fx) * vol[:, z1, y0, x0] + fx * vol[:, z1, y0, x1]
    c11 = (1 - fx) * vol[:, z1, y1, x0] + fx * vol[:, z1, y1, x1]
    c0 = (1 - fy) * c00 + fy * c10
    c1 = (1 - fy) * c01 + fy * c11
    return (1 - fz) * c0 + fz * c1  # (C, N)


def project_points_t(intrinsics: CameraIntrinsics, pose: Pose,
                     points: torch.Tensor):
    """Torch projection of (N, 3) world points.

    Returns (uv (N, 2), z (N,), valid (N,) bool) where valid means in front
    of the camera and inside the image bounds [0, W-1] x [0, H-1].
    """
    rot = torch.as_tensor(pose.rotation, dtype=points.dtype)
    t = torch.as_tensor(pose.translation, dtype=points.dtype)
    p_cam = (points - t) @ rot
    z = p_cam[:, 2]
    in_front = z > 1e-6
    z_safe = torch.where(in_front, z, torch.ones_like(z))
    u = intrinsics.fx * p_cam[:, 0] / z_safe + intrinsics.cx
    v = intrinsics.fy * p_cam[:, 1] / z_safe + intrinsics.cy
    valid = in_front & (u >= 0) & (u <= intrinsics.width - 1) \
        & (v >= 0) & (v <= intrinsics.height - 1)
    return torch.stack([u, v], dim=1), z, valid


# ---------------------------------------------------------------------------
# networks


class FeatureExtractor(nn.Module):
    """9-layer convolutional backbone with two stride-2 stages.

    Input (K, 3, H, W) with H, W divisible by 4; output pixel-aligned
    (K, 32, H/4, W/4) feature maps.
    """

    def __init__(self):
        super().__init__()
        layers = []
        for i, stride in enumerate(EXTRACTOR_STRIDES):
            layers.append(nn.Conv2d(EXTRACTOR_CHANNELS[i], EXTRACTOR_CHANNELS[i + 1],
                                    kernel_size=3, stride=stride, padding=1))
        self.convs = nn.ModuleList(layers)
        self.act = nn.LeakyReLU(LEAKY_SLOPE)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.dim() != 4 or x.shape[1] != 3:
            raise ShapeError(f"expected (K, 3, H, W) images, got {tuple(x.shape)}")
        if x.shape[2] % 4 or x.shape[3] % 4:
            raise ShapeError(f"image dims {tuple(x.shape[2:])} must be divisible by 4")
        for i, conv in enumerate(self.convs):
            x = conv(x)
            if i < len(self.convs) - 1:
                x = self.act(x)
        return x


class UNet3D(nn.Module):
    """Three stride-2 encoder stages, three nearest-upsample decoder stages
    with concatenated skips, and a final 1x1x1 projection to 8 channels."""

    def __init__(self, in_channels: int, out_channels: int = FEATURE_VOLUME_CHANNELS):
        super().__init__()
        c1, c2, c3 = UNET_ENCODER_CHANNELS
        self.enc1 = nn.Conv3d(in_channels, c1, 3, stride=2, padding=1)
        self.enc2 = nn.Conv3d(c1, c2, 3, stride=2, padding=1)
        self.enc3 = nn.Conv3d(c2, c3, 3, stride=2, padding=1)
        self.dec1 = nn.Conv3d(c3 + c2, c2, 3, padding=1)
        self.dec2 = nn.Conv3d(c2 + c1, c1, 3, padding=1)
        self.dec3 = nn.Conv3d(c1 + in_channels, c1, 3, padding=1)
        self.out = nn.Conv3d(c1, out_channels, 1)
        self.act = nn.LeakyReLU(LEAKY_SLOPE)
        self.up = nn.Upsample(scale_factor=2, mode="nearest")

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.dim() != 5:
            raise ShapeError(f"expected (1, C, nz, ny, nx), got {tuple(x.shape)}")
        if any(d % 8 for d in x.shape[2:]):
            raise ShapeError(f"volume dims {tuple(x.shape[2:])} must be divisible by 8")
        e1 = self.act(self.enc1(x))
        e2 = self.act(self.enc2(e1))
        e3 = self.act(self.enc3(e2))
        d1 = self.act(self.dec1(torch.cat([self.up(e3), e2], dim=1)))
        d2 = self.act(self.dec2(torch.cat([self.up(d1), e1], dim=1)))
        d3 = self.act(self.dec3(torch.cat([self.up(d2), x], dim=1)))
        return self.out(d3)


class FieldMLP(nn.Module):
    """128-wide MLP (6 hidden layers) regressing density and color.

    Input per point: interpolated volume features, relative position inside
    the volume in [0, 1]^3, and the unit view direction. Heads apply softplus
    (density >= 0) and a logistic squash (color in (0, 1)).
    """

    def __init__(self, in_dim: int, hidden: int = MLP_HIDDEN, depth: int = MLP_LAYERS):
        super().__init__()
        dims = [in_dim] + [hidden] * depth
        self.hidden = nn.ModuleList(
            nn.Linear(dims[i], dims[i + 1]) for i in range(depth))
        self.sigma_head = nn.Linear(hidden, 1)
        self.rgb_head = nn.Linear(hidden, 3)
        self.act = nn.LeakyReLU(LEAKY_SLOPE)

    def forward(self, x: torch.Tensor):
        for layer in self.hidden:
            x = self.act(layer(x))
        sigma = nn.functional.softplus(self.sigma_head(x)).squeeze(-1)
        rgb = torch.sigmoid(self.rgb_head(x))
        return sigma, rgb


class OccupancyPredictor(nn.Module):
    """The full predictor: extractor + cost volume + U-Net + field MLP."""

    def __init__(self, arch: ArchConfig = ArchConfig()):
        super().__init__()
        self.arch = arch
        self.extractor = FeatureExtractor()
        self.unet = UNet3D(arch.cost_channels, arch.volume_channels)
        self.mlp = FieldMLP(arch.mlp_in, arch.mlp_hidden, arch.mlp_layers)


# The density head starts strongly negative so the field begins essentially
# transparent even after 64 per-sample opacities accumulate along a ray
# (64 * alpha(-6) ~ 0.16). Any mid-density start collapses globally: the
# reconstruction term prefers the (exact) backgrounds almost everywhere and
# drives the head deep into softplus saturation before geometry can form,
# after which gradients are too small to recover within a practical budget.
SIGMA_BIAS_INIT = -6.0


def init_parameters(model: nn.Module, seed: int):
    """Deterministic fan-in-scaled uniform init for every conv/linear layer.

    Weights use the leaky-rectifier gain (sqrt(2), variance-preserving with
    no normalization layers in the network); biases use the plain 1/sqrt(fan_in)
    bound. The density head's bias starts at ``SIGMA_BIAS_INIT``.
    """
    gen = torch.Generator().manual_seed(int(seed) & 0x7FFFFFFFFFFFFFFF)
    gain = float(np.sqrt(2.0 / (1.0 + LEAKY_SLOPE ** 2)))
    for module in model.modules():
        if isinstance(module, (nn.Conv2d, nn.Conv3d, nn.Linear)):
            fan_in = module.weight.shape[1:].numel()
            w_bound = gain * float(np.sqrt(3.0 / fan_in))
            b_bound = 1.0 / float(np.sqrt(fan_in))
            with torch.no_grad():
                module.weight.uniform_(-w_bound, w_bound, generator=gen)
                if module.bias is not None:
                    module.bias.uniform_(-b_bound, b_bound, generator=gen)
    if isinstance(model, OccupancyPredictor):
        with torch.no_grad():
            model.mlp.sigma_head.bias.fill_(SIGMA_BIAS_INIT)
    return model


# ---------------------------------------------------------------------------
# cost volume


@dataclass
class CostVolume:
    """Per-voxel cross-view feature variance plus the observing-view count."""

    grid: GridSpec
    data: torch.Tensor  # (C, nz, ny, nx), C = 32 variance channels
    valid_count: torch.Tensor  # (nz, ny, nx), int64


@dataclass
class SourceView:
    """Tensors for one source view, kept for projection-based lookups."""

    image: torch.Tensor  # (3, H, W)
    features: torch.Tensor  # (32, H/4, W/4)
    intrinsics: CameraIntrinsics
    pose: Pose


def grid_centers_t(grid: GridSpec, dtype=torch.float32) -> torch.Tensor:
    """All voxel centers as a flat (nz*ny*nx, 3) tensor (x fastest)."""
    return torch.as_tensor(grid.voxel_centers().reshape(-1, 3)).to(dtype)


def build_cost_volume(sources: list[SourceView], grid: GridSpec,
                      centers: torch.Tensor | None = None) -> CostVolume:
    """Population variance of projected per-view features at every voxel.

    A view observes a voxel when its center projects in front of the camera
    and inside the image; voxels observed by fewer than two views get
    variance 0. Feature maps are addressed at 1/4 of the image coordinates
    (clamped to the map's bilinear domain).
    """
    if not sources:
        raise ValueError("at least one source view is required")
    feat_c = sources[0].features.shape[0]
    for s in sources:
        if s.features.shape[0] != feat_c:
            raise ShapeError("all source feature maps must share the channel count")
    dtype = sources[0].features.dtype
    if centers is None:
        centers = grid_centers_t(grid, dtype)
    n_vox = centers.shape[0]

    samples = []
    masks = []
    for s in sources:
        with torch.no_grad():
            uv, _, valid = project_points_t(s.intrinsics, s.pose, centers)
            uv_feat = uv / 4.0
        samples.append(bilinear_sample_t(s.features, uv_feat))  # (C, V)
        masks.append(valid)
    stack = torch.stack(samples)  # (K, C, V)
    mask = torch.stack(masks).to(dtype).unsqueeze(1)  # (K, 1, V)
    count = mask.sum(dim=0)  # (1, V)
    denom = count.clamp(min=1.0)
    mean = (stack * mask).sum(dim=0) / denom
    var = (((stack - mean.unsqueeze(0)) ** 2) * mask).sum(dim=0) / denom
    var = var * (count >= 2).to(dtype)

    nz, ny, nx = grid.nz, grid.ny, grid.nx
    data = var.reshape(feat_c, nz, ny, nx)
    valid_count = count.reshape(nz, ny, nx).long()
    assert n_vox == nz * ny * nx
    return CostVolume(grid, data, valid_count)


@dataclass
class SceneEncoding:
    """Everything the field needs to answer queries for one set of source views."""

    grid: GridSpec
    volume: torch.Tensor  # (8, nz, ny, nx) neural feature volume
    cost: CostVolume
    sources: list  # list[SourceView]


def make_sources(model: OccupancyPredictor, views, dtype=torch.float32) -> list[SourceView]:
    """Run the extractor over CameraViews and bundle tensors per view."""
    images = torch.stack([
        torch.as_tensor(v.rgb, dtype=dtype).permute(2, 0, 1) for v in views])
    feats = model.extractor(images)
    return [SourceView(images[i], feats[i], views[i].intrinsics, views[i].pose)
            for i in range(len(views))]


def encode_scene(model: OccupancyPredictor, views, grid: GridSpec,
                 centers: torch.Tensor | None = None,
                 dtype=torch.float32) -> SceneEncoding:
    """Source views -> features -> cost volume -> neural feature volume."""
    sources = make_sources(model, views, dtype=dtype)
    cost = build_cost_volume(sources, grid, centers=centers)
    unet_in = cost.data
    if model.arch.include_valid_count:
        unet_in = torch.cat([unet_in, cost.valid_count.to(dtype).unsqueeze(0)], dim=0)
    volume = model.unet(unet_in.unsqueeze(0)).squeeze(0)
    return SceneEncoding(grid, volume, cost, sources)


def _mean_source_rgb(sources: list[SourceView], points: torch.Tensor) -> torch.Tensor:
    """Mean projected source color per point, zeros where nothing observes it."""
    acc = torch.zeros(points.shape[0], 3, dtype=points.dtype)
    count = torch.zeros(points.shape[0], dtype=points.dtype)
    for s in sources:
        with torch.no_grad():
            uv, _, valid = project_points_t(s.intrinsics, s.pose, points)
        rgb = bilinear_sample_t(s.image, uv).T  # (N, 3)
        acc = acc + rgb * valid.to(points.dtype).unsqueeze(1)
        count = count + valid.to(points.dtype)
    return acc / count.clamp(min=1.0).unsqueeze(1)


def query_field(model: OccupancyPredictor, encoding: SceneEncoding,
                points: torch.Tensor, view_dirs: torch.Tensor,
                check_bounds: bool = True):
    """Evaluate density and color at world points (N, 3) with unit view
    directions (N, 3). Raises :class:`OutOfBounds` for points outside the
    grid's voxel-center hull (callers clip rays to the grid first)."""
    grid = encoding.grid
    origin = torch.as_tensor(grid.origin, dtype=points.dtype)
    idx = (points - origin) / grid.spacing
    if check_bounds:
        dims = torch.as_tensor(grid.dims, dtype=points.dtype)
        if bool((idx < -1e-6).any() or (idx > dims - 1 + 1e-6).any()):
            raise OutOfBounds("query point outside the feature volume")
    feats = trilinear_sample_t(encoding.volume, idx).T  # (N, 8)
    span = torch.as_tensor(
        [(d - 1) if d > 1 else 1 for d in grid.dims], dtype=points.dtype)
    rel = idx / span
    parts = [feats, rel, view_dirs]
    if model.arch.include_source_rgb:
        parts.append(_mean_source_rgb(encoding.sources, points))
    return model.mlp(torch.cat(parts, dim=1))


def parameter_gradients(loss: torch.Tensor, model: nn.Module) -> dict:
    """Reverse-mode gradients of a recorded scalar loss for every parameter.

    Parameters the loss does not depend on get exact zero gradients. Raises
    :class:`GraphError` when ``loss`` carries no autograd graph.
    """
    if loss.grad_fn is None:
        raise GraphError("loss has no recorded computation graph")
    params = dict(model.named_parameters())
    grads = torch.autograd.grad(loss, list(params.values()), allow_unused=True,
                                retain_graph=False)
    return {name: (g if g is not None else torch.zeros_like(p))
            for (name, p), g in zip(params.items(), grads)}


# ---------------------------------------------------------------------------
# checkpoints


def save_checkpoint(path, model: OccupancyPredictor, train_config: dict | None = None):
    """Write a versioned checkpoint: JSON header + raw float32 LE tensors."""
    names = [n for n, _ in model.named_parameters()]
    tensors = dict(model.named_parameters())
    header = {
        "format_version": CHECKPOINT_VERSION,
        "arch": model.arch.to_dict(),
        "train_config": train_config or {},
        "tensors": [{"name": n, "shape": list(tensors[n].shape)} for n in names],
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<BI", CHECKPOINT_VERSION, len(blob)))
        f.write(blob)
        for n in names:
            f.write(tensors[n].detach().to(torch.float32).numpy()
                    .astype("<f4").tobytes())


def load_checkpoint(path):
    """Read a checkpoint; returns (model, train_config dict).

    Tensor shapes are validated against the architecture config in the
    header; any mismatch raises :class:`FormatError`.
    """
    with open(path, "rb") as f:
        magic = f.read(4)
        if magic != CHECKPOINT_MAGIC:
            raise FormatError(f"bad checkpoint magic {magic!r}")
        version, hlen = struct.unpack("<BI", f.read(5))
        if version != CHECKPOINT_VERSION:
            raise FormatError(f"unsupported checkpoint version {version}")
        try:
            header = json.loads(f.read(hlen).decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as e:
            raise FormatError(f"malformed checkpoint header: {e}") from e
        arch = ArchConfig.from_dict(header["arch"])
        model = OccupancyPredictor(arch)
        expected = {n: tuple(p.shape) for n, p in model.named_parameters()}
        listed = {t["name"]: tuple(t["shape"]) for t in header["tensors"]}
        if expected != listed:
            raise FormatError("checkpoint tensor shapes do not match its architecture config")
        with torch.no_grad():
            for t in header["tensors"]:
                n_el = int(np.prod(t["shape"])) if t["shape"] else 1
                raw = f.read(4 * n_el)
                if len(raw) != 4 * n_el:
                    raise FormatError(f"checkpoint truncated at tensor {t['name']!r}")
                arr = np.frombuffer(raw, dtype="<f4").reshape(t["shape"])
                dict(model.named_parameters())[t["name"]].copy_(torch.from_numpy(arr.copy()))
    return model, header["train_config"]
