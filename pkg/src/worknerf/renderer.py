"""Volumetric rendering inside the workspace, and the exported occupancy grid.

Opacity uses the per-sample form ``alpha = 1 - exp(-sigma)`` with no sample
spacing term, so a trained field is tied to the per-ray sample count it was
trained with; that count travels in the checkpoint config. Rendered depth is
the camera z-depth of the first sample where the running sum of raw alphas
reaches 0.5 (not the compositing weights), and pixels that never reach 0.5
are invalid (encoded as 0 in depth images).

Pixels whose rays miss the workspace, and rays whose accumulated compositing
weight falls short of 1, take their color from the empty-scene background
image of the same camera pose.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from .errors import DomainError, NoIntersection
from .geometry import Aabb, CameraIntrinsics, GridSpec, Pose, Ray, \
    pixel_rays, ray_aabb_intersect, rays_aabb_intersect
from .model import OccupancyPredictor, SceneEncoding, grid_centers_t, query_field

OCCUPANCY_MAGIC = b"OCCV"
OCCUPANCY_VERSION = 1
DEFAULT_SAMPLES_PER_RAY = 64
_QUERY_CHUNK = 131072


# ---------------------------------------------------------------------------
# per-ray types (numpy, used at the single-ray API level)


@dataclass(frozen=True)
class RaySamples:
    """Ascending camera z-depths with densities, opacities, and colors."""

    z: np.ndarray  # (S,)
    sigma: np.ndarray  # (S,)
    alpha: np.ndarray  # (S,)
    rgb: np.ndarray  # (S, 3)

    def __post_init__(self):
        z = np.asarray(self.z, dtype=np.float64)
        sigma = np.asarray(self.sigma, dtype=np.float64)
        alpha = np.asarray(self.alpha, dtype=np.float64)
        rgb = np.asarray(self.rgb, dtype=np.float64)
        n = z.shape[0]
        if sigma.shape != (n,) or alpha.shape != (n,) or rgb.shape != (n, 3):
            raise ValueError("ray sample arrays must share their length")
        if n > 1 and not np.all(np.diff(z) > 0):
            raise ValueError("sample depths must be strictly increasing")
        if np.any(sigma < 0):
            raise DomainError("densities must be non-negative")
        if not np.allclose(alpha, 1.0 - np.exp(-sigma), atol=1e-9):
            raise ValueError("alpha must equal 1 - exp(-sigma)")
        for name, arr in (("z", z), ("sigma", sigma), ("alpha", alpha), ("rgb", rgb)):
            object.__setattr__(self, name, arr)

    @staticmethod
    def from_sigma(z, sigma, rgb) -> "RaySamples":
        sigma = np.asarray(sigma, dtype=np.float64)
        return RaySamples(z, sigma, 1.0 - np.exp(-sigma), rgb)


@dataclass(frozen=True)
class RenderedPixel:
    color: np.ndarray  # (3,)
    accumulated_opacity: float
    depth: float | None  # camera z-depth in meters, None when invalid


# ---------------------------------------------------------------------------
# scalar operations


def sample_along_ray(ray: Ray, box: Aabb, n: int, jitter=None) -> np.ndarray:
    """n ascending sample distances along the ray inside the box.

    Without jitter the samples are evenly spaced including both endpoints;
    with jitter (an int seed or numpy Generator) one uniform draw is taken
    per equal-width bin. Raises :class:`NoIntersection` on a miss.
    """
    if n < 2:
        raise ValueError("need at least 2 samples")
    hit = ray_aabb_intersect(ray, box)
    if hit is None:
        raise NoIntersection("ray does not intersect the box")
    t_near, t_far = hit
    if jitter is None:
        return np.linspace(t_near, t_far, n)
    rng = jitter if isinstance(jitter, np.random.Generator) \
        else np.random.default_rng(jitter)
    edges = np.linspace(t_near, t_far, n + 1)
    return edges[:-1] + rng.uniform(size=n) * (edges[1:] - edges[:-1])


def density_to_alpha(sigma):
    """alpha = 1 - exp(-sigma); raises :class:`DomainError` for sigma < 0."""
    arr = np.asarray(sigma, dtype=np.float64)
    if np.any(arr < 0):
        raise DomainError("sigma must be non-negative")
    out = 1.0 - np.exp(-arr)
    return float(out) if np.isscalar(sigma) or arr.ndim == 0 else out


def composite(samples: RaySamples, background) -> RenderedPixel:
    """Front-to-back alpha compositing with background fallback."""
    bg = np.asarray(background, dtype=np.float64) * np.ones(3)
    trans = np.cumprod(np.concatenate([[1.0], 1.0 - samples.alpha]))[:-1]
    weights = samples.alpha * trans
    acc = float(weights.sum())
    color = weights @ samples.rgb + (1.0 - acc) * bg
    return RenderedPixel(color, acc, extract_depth(samples))


def extract_depth(samples: RaySamples) -> float | None:
    """First sample depth where the running sum of raw alphas reaches 0.5."""
    csum = np.cumsum(samples.alpha)
    crossed = np.nonzero(csum >= 0.5)[0]
    if crossed.size == 0:
        return None
    return float(samples.z[crossed[0]])


# ---------------------------------------------------------------------------
# batched torch operations (shared by training and image rendering)


def composite_rays(alpha: torch.Tensor, rgb: torch.Tensor,
                   background: torch.Tensor):
    """Composite (R, S) opacities and (R, S, 3) colors over (R, 3) backgrounds.

    Returns (color (R, 3), weights (R, S), accumulated opacity (R,)).
    """
    ones = torch.ones_like(alpha[:, :1])
    trans = torch.cumprod(torch.cat([ones, 1.0 - alpha], dim=1), dim=1)[:, :-1]
    weights = alpha * trans
    acc = weights.sum(dim=1)
    color = (weights.unsqueeze(-1) * rgb).sum(dim=1) + (1.0 - acc).unsqueeze(-1) * background
    return color, weights, acc


def depth_from_alpha(alpha: torch.Tensor, z: torch.Tensor):
    """Batched opacity-sum depth rule.

    Returns (depth (R,), valid (R,)); depth is 0 where the cumulative raw
    alpha never reaches 0.5.
    """
    csum = alpha.cumsum(dim=1)
    crossed = csum >= 0.5
    valid = crossed.any(dim=1)
    first = torch.argmax(crossed.to(torch.int8), dim=1)
    depth = z.gather(1, first.unsqueeze(1)).squeeze(1)
    return torch.where(valid, depth, torch.zeros_like(depth)), valid


def model_field_fn(model: OccupancyPredictor, encoding: SceneEncoding,
                   check_bounds: bool = True):
    """Wrap a predictor + scene encoding as ``f(points, dirs) -> (sigma, rgb)``."""
    def field(points: torch.Tensor, dirs: torch.Tensor):
        return query_field(model, encoding, points, dirs, check_bounds=check_bounds)
    return field


def render_rays(field_fn, origin: np.ndarray, dirs: np.ndarray,
                dir_z: np.ndarray, bounds: Aabb, background: np.ndarray,
                n_samples: int, jitter_rng: np.random.Generator | None = None,
                dtype=torch.float32):
    """Render a batch of rays from one camera through a field.

    ``dirs`` are unit world directions (N, 3), ``dir_z`` their camera-frame z
    components, ``background`` the per-ray fallback colors (N, 3). Returns a
    dict of torch tensors: color (N, 3), depth (N,), acc (N,), alpha (H, S)
    and hit (N,) bool, where alpha covers only the H rays that hit the
    bounds. Differentiable through the field.
    """
    n = dirs.shape[0]
    t_near, t_far, hit = rays_aabb_intersect(origin, dirs, bounds)
    bg_t = torch.as_tensor(background, dtype=dtype)
    color = bg_t.clone()
    depth = torch.zeros(n, dtype=dtype)
    acc = torch.zeros(n, dtype=dtype)
    n_hit = int(hit.sum())
    if n_hit == 0:
        return {"color": color, "depth": depth, "acc": acc,
                "alpha": torch.zeros((0, n_samples), dtype=dtype),
                "hit": torch.as_tensor(hit)}

    tn = t_near[hit]
    tf = t_far[hit]
    if jitter_rng is None:
        frac = np.linspace(0.0, 1.0, n_samples)[None, :]
    else:
        edges = np.linspace(0.0, 1.0, n_samples + 1)
        u = jitter_rng.uniform(size=(n_hit, n_samples))
        frac = edges[:-1] + u * (edges[1:] - edges[:-1])
    t = tn[:, None] + (tf - tn)[:, None] * frac

    pts = origin[None, None, :] + t[..., None] * dirs[hit][:, None, :]
    pts_t = torch.as_tensor(pts.reshape(-1, 3), dtype=dtype)
    dirs_t = torch.as_tensor(np.broadcast_to(dirs[hit][:, None, :], pts.shape)
                             .reshape(-1, 3).copy(), dtype=dtype)

    sigmas = []
    rgbs = []
    for start in range(0, pts_t.shape[0], _QUERY_CHUNK):
        s, c = field_fn(pts_t[start:start + _QUERY_CHUNK],
                        dirs_t[start:start + _QUERY_CHUNK])
        sigmas.append(s)
        rgbs.append(c)
    sigma = torch.cat(sigmas).reshape(n_hit, n_samples)
    rgb = torch.cat(rgbs).reshape(n_hit, n_samples, 3)

    alpha = 1.0 - torch.exp(-sigma)
    z = torch.as_tensor(t * dir_z[hit][:, None], dtype=dtype)
    hit_color, _, hit_acc = composite_rays(alpha, rgb, bg_t[hit])
    hit_depth, _ = depth_from_alpha(alpha, z)

    hit_t = torch.as_tensor(hit)
    color[hit_t] = hit_color
    depth[hit_t] = hit_depth
    acc[hit_t] = hit_acc
    return {"color": color, "depth": depth, "acc": acc, "alpha": alpha,
            "hit": hit_t}


def render_view(field_fn, intrinsics: CameraIntrinsics, pose: Pose,
                background: np.ndarray, bounds: Aabb,
                n_samples: int = DEFAULT_SAMPLES_PER_RAY,
                jitter_rng: np.random.Generator | None = None,
                dtype=torch.float64):
    """Render a full image; returns (rgb (H, W, 3), depth (H, W), opacity (H, W)).

    Pixels whose rays miss ``bounds`` carry the background values unchanged
    and invalid (0) depth. Compositing runs in float64 by default so that a
    zero-density field reproduces the background image bit for bit; the field
    itself may compute in any dtype.
    """
    w, h = intrinsics.width, intrinsics.height
    uu, vv = np.meshgrid(np.arange(w, dtype=np.float64),
                         np.arange(h, dtype=np.float64))
    uv = np.stack([uu, vv], axis=-1).reshape(-1, 2)
    origin, dirs, dir_z = pixel_rays(intrinsics, pose, uv)
    bg = np.asarray(background, dtype=np.float64).reshape(-1, 3)

    def field64(points, dirs_t):
        s, c = field_fn(points, dirs_t)
        return s.to(torch.float64), c.to(torch.float64)

    with torch.no_grad():
        out = render_rays(field64, origin, dirs, dir_z, bounds, bg,
                          n_samples, jitter_rng=jitter_rng, dtype=torch.float64)
    rgb = out["color"].numpy().reshape(h, w, 3)
    # Misses never touch arithmetic: restore the exact background bytes.
    miss = ~out["hit"].numpy().reshape(h, w)
    rgb[miss] = background.reshape(h, w, 3)[miss]
    depth = out["depth"].numpy().reshape(h, w)
    opacity = out["acc"].numpy().reshape(h, w)
    return rgb, depth, opacity


def render_model_view(model: OccupancyPredictor, encoding: SceneEncoding,
                      intrinsics: CameraIntrinsics, pose: Pose,
                      background: np.ndarray,
                      n_samples: int = DEFAULT_SAMPLES_PER_RAY,
                      jitter_rng: np.random.Generator | None = None):
    """``render_view`` for a trained predictor and scene encoding."""
    def field(points, dirs_t):
        p32 = points.to(torch.float32)
        d32 = dirs_t.to(torch.float32)
        return query_field(model, encoding, p32, d32, check_bounds=False)
    return render_view(field, intrinsics, pose, background,
                       encoding.grid.center_bounds(), n_samples,
                       jitter_rng=jitter_rng)


# ---------------------------------------------------------------------------
# occupancy extraction and export

CANONICAL_VIEW_DIR = np.array([0.0, 0.0, 1.0])


def extract_occupancy(model: OccupancyPredictor, encoding: SceneEncoding,
                      grid: GridSpec | None = None) -> np.ndarray:
    """Opacity ``1 - exp(-sigma)`` at every voxel center, shape (nz, ny, nx).

    Density does not depend on the view direction by construction, but the
    field API takes one; the canonical +z world direction is used.
    """
    grid = grid or encoding.grid
    centers = grid_centers_t(grid, torch.float32)
    dirs = torch.as_tensor(CANONICAL_VIEW_DIR, dtype=torch.float32) \
        .expand(centers.shape[0], 3)
    alphas = []
    with torch.no_grad():
        for start in range(0, centers.shape[0], _QUERY_CHUNK):
            sigma, _ = query_field(model, encoding, centers[start:start + _QUERY_CHUNK],
                                   dirs[start:start + _QUERY_CHUNK], check_bounds=False)
            alphas.append(1.0 - torch.exp(-sigma))
    return torch.cat(alphas).reshape(grid.nz, grid.ny, grid.nx).numpy()


def write_occupancy(path, grid: GridSpec, alpha: np.ndarray):
    """Binary occupancy export: OCCV magic, u8 version, u32 dims (nx, ny, nz),
    f32 origin and spacing, then float32 alphas little-endian, x fastest."""
    if alpha.shape != (grid.nz, grid.ny, grid.nx):
        raise ValueError(f"alpha shape {alpha.shape} does not match grid dims")
    with open(path, "wb") as f:
        f.write(OCCUPANCY_MAGIC)
        f.write(np.uint8(OCCUPANCY_VERSION).tobytes())
        f.write(np.asarray(grid.dims, dtype="<u4").tobytes())
        f.write(np.asarray(grid.origin, dtype="<f4").tobytes())
        f.write(np.float32(grid.spacing).astype("<f4").tobytes())
        f.write(alpha.astype("<f4").tobytes())


def read_occupancy(path):
    """Inverse of :func:`write_occupancy`; returns (GridSpec, alpha array)."""
    from .errors import FormatError
    with open(path, "rb") as f:
        if f.read(4) != OCCUPANCY_MAGIC:
            raise FormatError("bad occupancy magic")
        version = np.frombuffer(f.read(1), dtype=np.uint8)[0]
        if version != OCCUPANCY_VERSION:
            raise FormatError(f"unsupported occupancy version {version}")
        dims = np.frombuffer(f.read(12), dtype="<u4").astype(int)
        origin = np.frombuffer(f.read(12), dtype="<f4").astype(np.float64)
        spacing = float(np.frombuffer(f.read(4), dtype="<f4")[0])
        grid = GridSpec(origin, spacing, tuple(dims))
        n = int(dims[0] * dims[1] * dims[2])
        raw = f.read(4 * n)
        if len(raw) != 4 * n:
            raise FormatError("occupancy file truncated")
        alpha = np.frombuffer(raw, dtype="<f4").reshape(grid.nz, grid.ny, grid.nx)
    return grid, alpha.copy()
