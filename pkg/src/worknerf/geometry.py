"""Camera models, rays, axis-aligned bounds, voxel grids, and interpolation.

Conventions used throughout the package:

* Poses are world-from-camera: ``p_world = R @ p_cam + t``.
* Camera frame: +z forward, +x right, +y down.
* Pixel centers sit at integer coordinates, so ``(u, v) = (0, 0)`` is the
  center of the top-left texel and the valid bilinear domain is
  ``[0, W-1] x [0, H-1]``.
* Voxel grids are indexed ``[iz, iy, ix]`` (x fastest in memory);
  ``GridSpec.dims`` is ``(nx, ny, nz)`` and ``GridSpec.origin`` is the world
  position of the center of voxel ``(0, 0, 0)``.

All functions here are pure and operate on float64 numpy arrays; the
differentiable torch mirrors used by the network live in :mod:`worknerf.model`.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import BehindCamera, OutOfBounds

_MIN_DEPTH = 1e-6


def _as_vec3(x) -> np.ndarray:
    v = np.asarray(x, dtype=np.float64)
    if v.shape != (3,):
        raise ValueError(f"expected 3-vector, got shape {v.shape}")
    return v


@dataclass(frozen=True)
class CameraIntrinsics:
    """Pinhole intrinsics in pixels."""

    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError("focal lengths must be positive")
        if not (0 < self.cx < self.width and 0 < self.cy < self.height):
            raise ValueError("principal point must lie inside the image")

    def to_dict(self) -> dict:
        return {
            "fx": self.fx,
            "fy": self.fy,
            "cx": self.cx,
            "cy": self.cy,
            "width": self.width,
            "height": self.height,
        }

    @staticmethod
    def from_dict(d: dict) -> "CameraIntrinsics":
        return CameraIntrinsics(
            fx=float(d["fx"]),
            fy=float(d["fy"]),
            cx=float(d["cx"]),
            cy=float(d["cy"]),
            width=int(d["width"]),
            height=int(d["height"]),
        )


@dataclass(frozen=True)
class Pose:
    """World-from-camera rigid transform.

    ``rotation`` must be orthonormal with determinant +1 (checked to 1e-6).
    """

    rotation: np.ndarray  # (3, 3)
    translation: np.ndarray  # (3,)

    def __post_init__(self):
        r = np.asarray(self.rotation, dtype=np.float64)
        t = _as_vec3(self.translation)
        if r.shape != (3, 3):
            raise ValueError(f"rotation must be 3x3, got {r.shape}")
        if not np.allclose(r.T @ r, np.eye(3), atol=1e-6):
            raise ValueError("rotation is not orthonormal")
        if np.linalg.det(r) < 0:
            raise ValueError("rotation determinant must be +1")
        object.__setattr__(self, "rotation", r)
        object.__setattr__(self, "translation", t)

    @staticmethod
    def identity() -> "Pose":
        return Pose(np.eye(3), np.zeros(3))

    @property
    def camera_center(self) -> np.ndarray:
        """Camera origin expressed in world coordinates."""
        return self.translation

    def matrix(self) -> np.ndarray:
        """4x4 row-major world-from-camera matrix."""
        m = np.eye(4)
        m[:3, :3] = self.rotation
        m[:3, 3] = self.translation
        return m

    @staticmethod
    def from_matrix(m) -> "Pose":
        m = np.asarray(m, dtype=np.float64)
        if m.shape != (4, 4):
            raise ValueError(f"pose matrix must be 4x4, got {m.shape}")
        return Pose(m[:3, :3], m[:3, 3])

    def compose(self, other: "Pose") -> "Pose":
        """Return self applied after ``other`` (matrix product self @ other)."""
        return Pose(self.rotation @ other.rotation,
                    self.rotation @ other.translation + self.translation)

    def inverse(self) -> "Pose":
        return Pose(self.rotation.T, -self.rotation.T @ self.translation)

    def world_to_camera(self, p_world: np.ndarray) -> np.ndarray:
        """Map world points (..., 3) into the camera frame."""
        p = np.asarray(p_world, dtype=np.float64)
        return (p - self.translation) @ self.rotation

    def camera_to_world(self, p_cam: np.ndarray) -> np.ndarray:
        p = np.asarray(p_cam, dtype=np.float64)
        return p @ self.rotation.T + self.translation


@dataclass(frozen=True)
class Aabb:
    """Axis-aligned box with ``min < max`` componentwise."""

    min: np.ndarray  # (3,)
    max: np.ndarray  # (3,)

    def __post_init__(self):
        lo = _as_vec3(self.min)
        hi = _as_vec3(self.max)
        if not np.all(lo < hi):
            raise ValueError("Aabb requires min < max componentwise")
        object.__setattr__(self, "min", lo)
        object.__setattr__(self, "max", hi)

    @property
    def center(self) -> np.ndarray:
        return 0.5 * (self.min + self.max)

    @property
    def extent(self) -> np.ndarray:
        return self.max - self.min

    @property
    def diagonal(self) -> float:
        return float(np.linalg.norm(self.extent))

    def corners(self) -> np.ndarray:
        """All 8 corners, shape (8, 3)."""
        lo, hi = self.min, self.max
        return np.array([[x, y, z] for x in (lo[0], hi[0])
                         for y in (lo[1], hi[1])
                         for z in (lo[2], hi[2])])

    def contains(self, points, dilate: float = 0.0) -> np.ndarray:
        """Closed-interval membership test for points (..., 3)."""
        p = np.asarray(points, dtype=np.float64)
        lo = self.min - dilate
        hi = self.max + dilate
        return np.all((p >= lo) & (p <= hi), axis=-1)

    def dilated(self, margin: float) -> "Aabb":
        return Aabb(self.min - margin, self.max + margin)

    def to_dict(self) -> dict:
        return {"min": self.min.tolist(), "max": self.max.tolist()}

    @staticmethod
    def from_dict(d: dict) -> "Aabb":
        return Aabb(np.asarray(d["min"]), np.asarray(d["max"]))


@dataclass(frozen=True)
class Ray:
    """Origin plus unit direction, both in world coordinates."""

    origin: np.ndarray  # (3,)
    direction: np.ndarray  # (3,)

    def __post_init__(self):
        o = _as_vec3(self.origin)
        d = _as_vec3(self.direction)
        if abs(np.linalg.norm(d) - 1.0) > 1e-9:
            raise ValueError("ray direction must be unit length")
        object.__setattr__(self, "origin", o)
        object.__setattr__(self, "direction", d)

    def at(self, t: float) -> np.ndarray:
        return self.origin + t * self.direction


@dataclass(frozen=True)
class GridSpec:
    """Regular voxel grid: ``origin`` is the center of voxel (0, 0, 0).

    ``dims`` is ``(nx, ny, nz)``. Grids fed to the 3D network additionally
    need every dim divisible by 8 (three stride-2 stages); that constraint is
    enforced where the network consumes the grid so that small grids remain
    usable for interpolation and tests.
    """

    origin: np.ndarray  # (3,)
    spacing: float
    dims: tuple  # (nx, ny, nz)

    def __post_init__(self):
        o = _as_vec3(self.origin)
        dims = tuple(int(d) for d in self.dims)
        if self.spacing <= 0:
            raise ValueError("spacing must be positive")
        if len(dims) != 3 or any(d < 1 for d in dims):
            raise ValueError("dims must be 3 positive integers")
        object.__setattr__(self, "origin", o)
        object.__setattr__(self, "spacing", float(self.spacing))
        object.__setattr__(self, "dims", dims)

    @staticmethod
    def from_workspace(workspace: Aabb, spacing: float) -> "GridSpec":
        """Grid whose voxel cells tile the workspace exactly.

        The workspace extent must be an integer multiple of ``spacing`` on
        every axis (rounded to the nearest voxel).
        """
        dims = np.round(workspace.extent / spacing).astype(int)
        if not np.allclose(dims * spacing, workspace.extent, atol=1e-9):
            raise ValueError("workspace extent is not a multiple of spacing")
        origin = workspace.min + 0.5 * spacing
        return GridSpec(origin, spacing, tuple(int(d) for d in dims))

    @property
    def nx(self) -> int:
        return self.dims[0]

    @property
    def ny(self) -> int:
        return self.dims[1]

    @property
    def nz(self) -> int:
        return self.dims[2]

    def center_bounds(self) -> Aabb:
        """Aabb spanned by the outer voxel centers (the interpolation domain)."""
        hi = self.origin + self.spacing * (np.array(self.dims) - 1)
        return Aabb(self.origin, hi)

    def cell_bounds(self) -> Aabb:
        """Aabb covered by the voxel cells (centers padded by spacing/2)."""
        return self.center_bounds().dilated(0.5 * self.spacing)

    def voxel_centers(self) -> np.ndarray:
        """World positions of all voxel centers, shape (nz, ny, nx, 3)."""
        nx, ny, nz = self.dims
        xs = self.origin[0] + self.spacing * np.arange(nx)
        ys = self.origin[1] + self.spacing * np.arange(ny)
        zs = self.origin[2] + self.spacing * np.arange(nz)
        zz, yy, xx = np.meshgrid(zs, ys, xs, indexing="ij")
        return np.stack([xx, yy, zz], axis=-1)

    def world_to_index(self, p_world) -> np.ndarray:
        """Continuous voxel-index coordinates (..., 3) in (ix, iy, iz) order."""
        p = np.asarray(p_world, dtype=np.float64)
        return (p - self.origin) / self.spacing

    def to_dict(self) -> dict:
        return {"origin": self.origin.tolist(), "spacing": self.spacing,
                "dims": list(self.dims)}

    @staticmethod
    def from_dict(d: dict) -> "GridSpec":
        return GridSpec(np.asarray(d["origin"]), float(d["spacing"]),
                        tuple(d["dims"]))


# ---------------------------------------------------------------------------
# projection


def project_point(intrinsics: CameraIntrinsics, world_from_camera: Pose,
                  p_world) -> tuple[float, float, float]:
    """Project a world point; returns (u, v, z_cam).

    Raises :class:`BehindCamera` when the camera-frame depth is <= 1e-6 m.
    """
    p_cam = world_from_camera.world_to_camera(_as_vec3(p_world))
    z = float(p_cam[2])
    if z <= _MIN_DEPTH:
        raise BehindCamera(f"point depth {z:.3g} m is not observable")
    u = intrinsics.fx * p_cam[0] / z + intrinsics.cx
    v = intrinsics.fy * p_cam[1] / z + intrinsics.cy
    return float(u), float(v), z


def project_points(intrinsics: CameraIntrinsics, world_from_camera: Pose,
                   p_world) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Vectorized projection of points (..., 3).

    Returns (uv (..., 2), z (...,), in_front (...,)). Points behind the camera
    get uv filled with NaN instead of raising.
    """
    p_cam = world_from_camera.world_to_camera(p_world)
    z = p_cam[..., 2]
    in_front = z > _MIN_DEPTH
    with np.errstate(divide="ignore", invalid="ignore"):
        u = intrinsics.fx * p_cam[..., 0] / z + intrinsics.cx
        v = intrinsics.fy * p_cam[..., 1] / z + intrinsics.cy
    uv = np.stack([u, v], axis=-1)
    uv[~in_front] = np.nan
    return uv, z, in_front


def pixel_to_ray(intrinsics: CameraIntrinsics, world_from_camera: Pose,
                 u: float, v: float) -> Ray:
    """World-space ray through pixel (u, v); sub-pixel coordinates allowed."""
    d_cam = np.array([(u - intrinsics.cx) / intrinsics.fx,
                      (v - intrinsics.cy) / intrinsics.fy,
                      1.0])
    d_world = world_from_camera.rotation @ d_cam
    d_world /= np.linalg.norm(d_world)
    return Ray(world_from_camera.camera_center, d_world)


def pixel_rays(intrinsics: CameraIntrinsics, world_from_camera: Pose,
               uv) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Vectorized rays for pixel coordinates (..., 2).

    Returns (origin (3,), directions (..., 3) unit, dir_z_cam (...,)) where
    ``dir_z_cam`` is the camera-frame z component of each unit direction
    (converts ray distance t into camera z-depth: z = t * dir_z_cam).
    """
    uv = np.asarray(uv, dtype=np.float64)
    d_cam = np.stack([(uv[..., 0] - intrinsics.cx) / intrinsics.fx,
                      (uv[..., 1] - intrinsics.cy) / intrinsics.fy,
                      np.ones(uv.shape[:-1])], axis=-1)
    norms = np.linalg.norm(d_cam, axis=-1, keepdims=True)
    d_cam_unit = d_cam / norms
    d_world = d_cam_unit @ world_from_camera.rotation.T
    return world_from_camera.camera_center, d_world, d_cam_unit[..., 2]


# ---------------------------------------------------------------------------
# ray / box intersection


def ray_aabb_intersect(ray: Ray, box: Aabb):
    """Slab test. Returns (t_near, t_far) with t_near clamped to 0, or None.

    None means the ray misses the box or the box lies entirely behind the
    origin.
    """
    res = rays_aabb_intersect(ray.origin, ray.direction[None, :], box)
    t_near, t_far, hit = res
    if not hit[0]:
        return None
    return float(t_near[0]), float(t_far[0])


def rays_aabb_intersect(origin, directions, box: Aabb):
    """Vectorized slab test for a shared origin and directions (..., 3).

    Returns (t_near, t_far, hit); entries of t_near/t_far are meaningless
    where hit is False.
    """
    o = _as_vec3(origin)
    d = np.asarray(directions, dtype=np.float64)
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / d
        t0 = (box.min - o) * inv
        t1 = (box.max - o) * inv
    # A zero direction component yields +/-inf or NaN (origin on slab plane);
    # NaN means the ray is parallel and inside that slab, which any finite
    # bound should win against, so replace NaN accordingly.
    lo = np.fmin(t0, t1)
    hi = np.fmax(t0, t1)
    lo = np.where(np.isnan(lo), -np.inf, lo)
    hi = np.where(np.isnan(hi), np.inf, hi)
    t_near = np.max(lo, axis=-1)
    t_far = np.min(hi, axis=-1)
    hit = (t_near <= t_far) & (t_far > 0)
    t_near = np.maximum(t_near, 0.0)
    return t_near, t_far, hit


# ---------------------------------------------------------------------------
# interpolation


def bilinear_sample(image: np.ndarray, u: float, v: float) -> np.ndarray:
    """Bilinear interpolation of an (H, W, C) map at pixel coordinates (u, v).

    Integer (u, v) addresses the center of texel (u, v). Raises
    :class:`OutOfBounds` outside ``[0, W-1] x [0, H-1]``.
    """
    img = np.asarray(image)
    if img.ndim == 2:
        img = img[..., None]
    h, w = img.shape[:2]
    if not (0.0 <= u <= w - 1 and 0.0 <= v <= h - 1):
        raise OutOfBounds(f"(u, v) = ({u}, {v}) outside [0, {w - 1}] x [0, {h - 1}]")
    x0 = min(int(np.floor(u)), w - 2) if w > 1 else 0
    y0 = min(int(np.floor(v)), h - 2) if h > 1 else 0
    x1 = min(x0 + 1, w - 1)
    y1 = min(y0 + 1, h - 1)
    fx = u - x0
    fy = v - y0
    top = (1 - fx) * img[y0, x0] + fx * img[y0, x1]
    bot = (1 - fx) * img[y1, x0] + fx * img[y1, x1]
    return (1 - fy) * top + fy * bot


def trilinear_sample(volume: np.ndarray, grid: GridSpec, p_world) -> np.ndarray:
    """Trilinear interpolation of a (nz, ny, nx, C) volume at a world point.

    The point must lie inside the box spanned by the outer voxel centers;
    otherwise :class:`OutOfBounds` is raised.
    """
    vol = np.asarray(volume)
    if vol.ndim == 3:
        vol = vol[..., None]
    nx, ny, nz = grid.dims
    if vol.shape[:3] != (nz, ny, nx):
        raise ValueError(f"volume shape {vol.shape[:3]} does not match grid dims "
                         f"(nz, ny, nx) = {(nz, ny, nx)}")
    idx = grid.world_to_index(_as_vec3(p_world))  # (ix, iy, iz), continuous
    eps = 1e-9
    if np.any(idx < -eps) or np.any(idx > np.array(grid.dims) - 1 + eps):
        raise OutOfBounds(f"point {np.asarray(p_world)} outside grid sampling domain")
    idx = np.clip(idx, 0.0, np.array(grid.dims, dtype=np.float64) - 1)
    base = np.minimum(np.floor(idx).astype(int), np.maximum(np.array(grid.dims) - 2, 0))
    frac = idx - base
    ix, iy, iz = base
    jx = min(ix + 1, nx - 1)
    jy = min(iy + 1, ny - 1)
    jz = min(iz + 1, nz - 1)
    fx, fy, fz = frac
    c00 = (1 - fx) * vol[iz, iy, ix] + fx * vol[iz, iy, jx]
    c10 = (1 - fx) * vol[iz, jy, ix] + fx * vol[iz, jy, jx]
    c01 = (1 - fx) * vol[jz, iy, ix] + fx * vol[jz, iy, jx]
    c11 = (1 - fx) * vol[jz, jy, ix] + fx * vol[jz, jy, jx]
    c0 = (1 - fy) * c00 + fy * c10
    c1 = (1 - fy) * c01 + fy * c11
    return (1 - fz) * c0 + fz * c1
