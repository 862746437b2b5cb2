"""Synthetic table-top scenes, an analytic RGB-D renderer, and the capture rig.

Scenes are arrangements of colored primitives (spheres and boxes) resting on
a floor plane inside a fixed workspace box. The analytic renderer intersects
camera rays with the primitives in closed form, which makes it an exact
ground-truth source for both images and depth.

The camera rig mirrors a humanoid capture session: two eye cameras and one
depth-capable head camera sweep a lateral arc of 15 poses in front of the
workspace, and three static depth-capable cameras watch it from the sides.

Dataset layout on disk::

    <root>/manifest.json
    <root>/scenes/<id>/meta.json
    <root>/scenes/<id>/scene.json
    <root>/scenes/<id>/rgb/<view>.png          8-bit linear RGB
    <root>/scenes/<id>/depth/<view>.png        16-bit, millimeters, 0 = invalid
    <root>/scenes/<id>/background/<view>.png   empty-scene RGB from the same pose
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from .errors import FormatError, PlacementFailed
from .geometry import Aabb, CameraIntrinsics, Pose, pixel_rays

# Workspace: 0.96 m x 0.96 m footprint, 0.48 m tall, floor at z = 0.
DEFAULT_WORKSPACE = Aabb(np.array([-0.48, -0.48, 0.0]),
                         np.array([0.48, 0.48, 0.48]))
DEFAULT_IMAGE_SIZE = (160, 128)  # (width, height)
DEFAULT_VOXEL_SPACING = 0.01

# Analytic renderer constants.
ORACLE_FAR = 6.0  # hits beyond this camera depth are reported invalid
BACKGROUND_COLOR = np.array([0.35, 0.45, 0.58])
LIGHT_DIR = np.array([0.25, -0.35, 0.9]) / np.linalg.norm([0.25, -0.35, 0.9])
AMBIENT = 0.35

# Rig constants (the capture protocol fixes the counts; the placement numbers
# are rig parameters with these defaults).
N_ARC_POSES = 15
N_STATIC_CAMS = 3
EYE_BASELINE = 0.065
ARC_RADIUS = 1.6
ARC_AZIMUTH_DEG = 40.0  # arc sweeps [-40, +40] degrees
ARC_ELEVATION_DEG = 25.0
STATIC_AZIMUTHS_DEG = (120.0, 180.0, 240.0)
STATIC_ELEVATION_DEG = 45.0
STATIC_RADIUS = 1.6
BASE_FOCAL = 110.0  # pixels at 160-wide images; scales with width

OBJECT_SIZE_RANGE = (0.03, 0.08)
# Objects cluster on the central part of the table (fraction of the xy
# half-extent); dense enough that arrangements regularly occlude one another
# from the shallow head viewpoints.
PLACEMENT_ZONE_FRACTION = 0.58
MAX_PLACEMENT_ATTEMPTS = 10_000

FORMAT_VERSION = 1


# ---------------------------------------------------------------------------
# scene types


@dataclass(frozen=True)
class Primitive:
    """A sphere or box with a rigid pose and a diffuse albedo.

    ``size`` is a scalar radius for spheres and a (3,) half-extent vector for
    boxes, both in meters.
    """

    kind: str  # "sphere" | "box"
    pose: Pose
    size: np.ndarray
    albedo: np.ndarray  # (3,) in [0, 1]

    def __post_init__(self):
        if self.kind not in ("sphere", "box"):
            raise ValueError(f"unknown primitive kind {self.kind!r}")
        size = np.atleast_1d(np.asarray(self.size, dtype=np.float64))
        if self.kind == "sphere" and size.shape != (1,):
            raise ValueError("sphere size must be a scalar radius")
        if self.kind == "box" and size.shape != (3,):
            raise ValueError("box size must be 3 half-extents")
        if np.any(size <= 0):
            raise ValueError("size components must be positive")
        albedo = np.asarray(self.albedo, dtype=np.float64)
        object.__setattr__(self, "size", size)
        object.__setattr__(self, "albedo", albedo)

    @property
    def bounding_radius(self) -> float:
        if self.kind == "sphere":
            return float(self.size[0])
        return float(np.linalg.norm(self.size))

    def to_dict(self) -> dict:
        return {
            "kind": self.kind,
            "pose": self.pose.matrix().tolist(),
            "size": self.size.tolist() if self.kind == "box" else float(self.size[0]),
            "albedo": self.albedo.tolist(),
        }

    @staticmethod
    def from_dict(d: dict) -> "Primitive":
        return Primitive(kind=d["kind"], pose=Pose.from_matrix(np.asarray(d["pose"])),
                         size=np.asarray(d["size"]), albedo=np.asarray(d["albedo"]))


@dataclass(frozen=True)
class Scene:
    id: str
    workspace: Aabb
    primitives: tuple
    floor_albedo: np.ndarray  # (3,)

    def empty(self) -> "Scene":
        """The same scene with every primitive removed (floor only)."""
        return Scene(self.id, self.workspace, (), self.floor_albedo)

    def to_dict(self) -> dict:
        return {
            "id": self.id,
            "workspace": self.workspace.to_dict(),
            "floor_albedo": np.asarray(self.floor_albedo).tolist(),
            "primitives": [p.to_dict() for p in self.primitives],
        }

    @staticmethod
    def from_dict(d: dict) -> "Scene":
        return Scene(id=d["id"], workspace=Aabb.from_dict(d["workspace"]),
                     primitives=tuple(Primitive.from_dict(p) for p in d["primitives"]),
                     floor_albedo=np.asarray(d["floor_albedo"]))


def generate_scene(seed: int, n_objects: int, workspace: Aabb = DEFAULT_WORKSPACE) -> Scene:
    """Rejection-sample ``n_objects`` non-overlapping primitives on the floor.

    Deterministic for a fixed seed. Raises :class:`PlacementFailed` once the
    total number of rejected placements reaches 10,000.
    """
    if n_objects < 0:
        raise ValueError("n_objects must be >= 0")
    rng = np.random.default_rng(seed)
    tint = rng.uniform(-0.04, 0.04, size=3)
    floor_albedo = np.clip(rng.uniform(0.37, 0.46) + tint, 0.05, 0.95)

    lo, hi = workspace.min, workspace.max
    floor_z = lo[2]
    center_xy = 0.5 * (lo[:2] + hi[:2])
    zone_half = PLACEMENT_ZONE_FRACTION * 0.5 * (hi[:2] - lo[:2])
    placed: list[Primitive] = []
    rejections = 0

    def reject(count):
        if count >= MAX_PLACEMENT_ATTEMPTS:
            raise PlacementFailed(
                f"placed {len(placed)}/{n_objects} objects after "
                f"{count} rejected attempts")
        return count

    while len(placed) < n_objects:
        kind = "sphere" if rng.uniform() < 0.5 else "box"
        if kind == "sphere":
            size = np.array([rng.uniform(*OBJECT_SIZE_RANGE)])
            xy_margin = size[0]
            center_z = floor_z + size[0]
            rot = np.eye(3)
            top = center_z + size[0]
        else:
            size = rng.uniform(*OBJECT_SIZE_RANGE, size=3)
            xy_margin = float(np.hypot(size[0], size[1]))
            center_z = floor_z + size[2]
            yaw = rng.uniform(0.0, 2.0 * np.pi)
            c, s = np.cos(yaw), np.sin(yaw)
            rot = np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])
            top = center_z + size[2]
        if np.any(zone_half <= xy_margin) or top > hi[2]:
            rejections = reject(rejections + 1)
            continue
        x = rng.uniform(center_xy[0] - zone_half[0] + xy_margin,
                        center_xy[0] + zone_half[0] - xy_margin)
        y = rng.uniform(center_xy[1] - zone_half[1] + xy_margin,
                        center_xy[1] + zone_half[1] - xy_margin)
        center = np.array([x, y, center_z])
        # Vivid, saturated albedos (dark or bright per channel): keeps every
        # object clearly separated from the mid-gray floor in all channels.
        albedo = np.where(rng.uniform(size=3) < 0.5,
                          rng.uniform(0.02, 0.2, size=3),
                          rng.uniform(0.75, 0.98, size=3))
        cand = Primitive(kind, Pose(rot, center), size, albedo)
        if all(np.linalg.norm(center - p.pose.translation) >= cand.bounding_radius + p.bounding_radius
               for p in placed):
            placed.append(cand)
        else:
            rejections = reject(rejections + 1)
    return Scene(f"scene_{seed:06d}", workspace, tuple(placed), floor_albedo)


# ---------------------------------------------------------------------------
# analytic renderer


def _intersect_sphere(origin, dirs, center, radius):
    """Smallest positive ray parameter per direction, inf where missed."""
    oc = origin - center
    b = dirs @ oc
    c = oc @ oc - radius * radius
    disc = b * b - c
    hit = disc >= 0.0
    sq = np.sqrt(np.where(hit, disc, 0.0))
    t = -b - sq
    t = np.where(hit & (t > 1e-9), t, np.inf)
    return t


def _intersect_box(origin, dirs, prim: Primitive):
    """Oriented-box slab test in the primitive's local frame."""
    r = prim.pose.rotation
    o_loc = (origin - prim.pose.translation) @ r
    d_loc = dirs @ r
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / d_loc
        t0 = (-prim.size - o_loc) * inv
        t1 = (prim.size - o_loc) * inv
    lo = np.fmin(t0, t1)
    hi = np.fmax(t0, t1)
    lo = np.where(np.isnan(lo), -np.inf, lo)
    hi = np.where(np.isnan(hi), np.inf, hi)
    t_near = lo.max(axis=-1)
    t_far = hi.min(axis=-1)
    hit = (t_near <= t_far) & (t_near > 1e-9)
    return np.where(hit, t_near, np.inf)


def _box_normal(p_world, prim: Primitive):
    """Outward normal of the box face containing the (surface) points."""
    r = prim.pose.rotation
    p_loc = (p_world - prim.pose.translation) @ r
    ratios = np.abs(p_loc) / prim.size
    axis = np.argmax(ratios, axis=-1)
    n_loc = np.zeros_like(p_loc)
    idx = np.arange(p_loc.shape[0])
    n_loc[idx, axis] = np.sign(p_loc[idx, axis])
    return n_loc @ r.T


def _trace(scene: Scene, origin, dirs):
    """Nearest-hit trace for unit directions (N, 3).

    Returns (t, prim_index, normal): ``prim_index`` is -1 for the floor and
    -2 for no hit; ``t`` is inf where nothing was hit.
    """
    n = dirs.shape[0]
    best_t = np.full(n, np.inf)
    best_idx = np.full(n, -2, dtype=np.int64)
    floor_z = scene.workspace.min[2]
    dz = dirs[:, 2]
    with np.errstate(divide="ignore", invalid="ignore"):
        t_floor = (floor_z - origin[2]) / dz
    t_floor = np.where((dz < 0) & (t_floor > 1e-9), t_floor, np.inf)
    closer = t_floor < best_t
    best_t[closer] = t_floor[closer]
    best_idx[closer] = -1
    for i, prim in enumerate(scene.primitives):
        if prim.kind == "sphere":
            t = _intersect_sphere(origin, dirs, prim.pose.translation, prim.size[0])
        else:
            t = _intersect_box(origin, dirs, prim)
        closer = t < best_t
        best_t[closer] = t[closer]
        best_idx[closer] = i

    normals = np.zeros((n, 3))
    hit_pts = origin + best_t[:, None] * dirs
    normals[best_idx == -1] = [0.0, 0.0, 1.0]
    for i, prim in enumerate(scene.primitives):
        sel = best_idx == i
        if not np.any(sel):
            continue
        if prim.kind == "sphere":
            normals[sel] = (hit_pts[sel] - prim.pose.translation) / prim.size[0]
        else:
            normals[sel] = _box_normal(hit_pts[sel], prim)
    return best_t, best_idx, normals


def oracle_render(scene: Scene, intrinsics: CameraIntrinsics, pose: Pose,
                  far: float = ORACLE_FAR):
    """Closed-form render of a scene: returns (rgb (H, W, 3), depth (H, W)).

    Depth is the camera z-depth of the nearest hit in meters, 0 where the ray
    hits nothing within ``far``. Shading is a fixed directional light with an
    ambient floor; no shadows.
    """
    w, h = intrinsics.width, intrinsics.height
    uu, vv = np.meshgrid(np.arange(w, dtype=np.float64),
                         np.arange(h, dtype=np.float64))
    uv = np.stack([uu, vv], axis=-1).reshape(-1, 2)
    origin, dirs, dir_z = pixel_rays(intrinsics, pose, uv)
    t, idx, normals = _trace(scene, origin, dirs)
    z = t * dir_z
    valid = np.isfinite(t) & (z <= far)

    albedo = np.empty((idx.shape[0], 3))
    albedo[:] = BACKGROUND_COLOR
    albedo[valid & (idx == -1)] = scene.floor_albedo
    for i, prim in enumerate(scene.primitives):
        albedo[valid & (idx == i)] = prim.albedo

    shade = AMBIENT + (1.0 - AMBIENT) * np.maximum(0.0, normals @ LIGHT_DIR)
    rgb = np.where(valid[:, None], albedo * shade[:, None], albedo)
    depth = np.where(valid, z, 0.0)
    return rgb.reshape(h, w, 3), depth.reshape(h, w)


def primitive_visibility(scene: Scene, intrinsics: CameraIntrinsics, pose: Pose):
    """Per-primitive pixel counts: (visible, reachable).

    ``visible[i]`` counts pixels whose nearest hit is primitive i;
    ``reachable[i]`` counts pixels that would hit primitive i if every other
    primitive were removed (floor kept). The difference is occlusion.
    """
    w, h = intrinsics.width, intrinsics.height
    uu, vv = np.meshgrid(np.arange(w, dtype=np.float64),
                         np.arange(h, dtype=np.float64))
    uv = np.stack([uu, vv], axis=-1).reshape(-1, 2)
    origin, dirs, _ = pixel_rays(intrinsics, pose, uv)
    _, idx, _ = _trace(scene, origin, dirs)
    visible = np.array([np.sum(idx == i) for i in range(len(scene.primitives))])
    reachable = np.empty(len(scene.primitives), dtype=np.int64)
    for i, prim in enumerate(scene.primitives):
        solo = Scene(scene.id, scene.workspace, (prim,), scene.floor_albedo)
        _, idx_solo, _ = _trace(solo, origin, dirs)
        reachable[i] = np.sum(idx_solo == 0)
    return visible, reachable


# ---------------------------------------------------------------------------
# camera rig


@dataclass(frozen=True)
class RigView:
    """One camera pose in the rig; ``view_id`` doubles as the pose identifier."""

    view_id: str
    intrinsics: CameraIntrinsics
    pose: Pose
    depth_capable: bool


@dataclass(frozen=True)
class CameraRig:
    eye_left: tuple  # 15 RigViews, RGB only
    eye_right: tuple  # 15 RigViews, RGB only
    head_depth: tuple  # 15 RigViews, RGB + depth
    static_cams: tuple  # 3 RigViews, RGB + depth

    def all_views(self) -> list[RigView]:
        return list(self.eye_left) + list(self.eye_right) + \
            list(self.head_depth) + list(self.static_cams)

    def depth_views(self) -> list[RigView]:
        return [v for v in self.all_views() if v.depth_capable]

    def view(self, view_id: str) -> RigView:
        for v in self.all_views():
            if v.view_id == view_id:
                return v
        raise KeyError(view_id)

    def to_dict(self) -> dict:
        def group(views):
            return [{"view_id": v.view_id,
                     "intrinsics": v.intrinsics.to_dict(),
                     "pose": v.pose.matrix().tolist(),
                     "depth_capable": v.depth_capable} for v in views]
        return {"eye_left": group(self.eye_left),
                "eye_right": group(self.eye_right),
                "head_depth": group(self.head_depth),
                "static_cams": group(self.static_cams)}

    @staticmethod
    def from_dict(d: dict) -> "CameraRig":
        def group(items):
            return tuple(RigView(view_id=i["view_id"],
                                 intrinsics=CameraIntrinsics.from_dict(i["intrinsics"]),
                                 pose=Pose.from_matrix(np.asarray(i["pose"])),
                                 depth_capable=bool(i["depth_capable"]))
                         for i in items)
        return CameraRig(eye_left=group(d["eye_left"]),
                         eye_right=group(d["eye_right"]),
                         head_depth=group(d["head_depth"]),
                         static_cams=group(d["static_cams"]))


def look_at_pose(eye, target, world_up=(0.0, 0.0, 1.0)) -> Pose:
    """World-from-camera pose looking from ``eye`` toward ``target``.

    Camera +z points at the target; +y points as far down as possible.
    """
    eye = np.asarray(eye, dtype=np.float64)
    fwd = np.asarray(target, dtype=np.float64) - eye
    fwd = fwd / np.linalg.norm(fwd)
    up = np.asarray(world_up, dtype=np.float64)
    right = np.cross(fwd, up)
    nr = np.linalg.norm(right)
    if nr < 1e-12:
        right = np.array([1.0, 0.0, 0.0])
    else:
        right = right / nr
    down = np.cross(fwd, right)
    rot = np.stack([right, down, fwd], axis=1)
    return Pose(rot, eye)


def default_intrinsics(image_size=DEFAULT_IMAGE_SIZE) -> CameraIntrinsics:
    w, h = image_size
    f = BASE_FOCAL * (w / 160.0)
    return CameraIntrinsics(fx=f, fy=f, cx=(w - 1) / 2.0, cy=(h - 1) / 2.0,
                            width=w, height=h)


def build_rig(workspace: Aabb = DEFAULT_WORKSPACE,
              image_size=DEFAULT_IMAGE_SIZE) -> CameraRig:
    """Deterministic rig: 15 arc poses for both eyes and the head depth
    camera, plus 3 static cameras, all aimed at the workspace center."""
    intr = default_intrinsics(image_size)
    target = workspace.center
    elev = np.deg2rad(ARC_ELEVATION_DEG)
    # Pose 0 starts on the observer's right; the sweep runs right to left.
    azimuths = np.deg2rad(np.linspace(ARC_AZIMUTH_DEG, -ARC_AZIMUTH_DEG, N_ARC_POSES))

    eye_left, eye_right, head_depth = [], [], []
    for i, az in enumerate(azimuths):
        offset = ARC_RADIUS * np.array([np.sin(az) * np.cos(elev),
                                        -np.cos(az) * np.cos(elev),
                                        np.sin(elev)])
        head_pose = look_at_pose(target + offset, target)
        right_axis = head_pose.rotation[:, 0]
        left_pose = Pose(head_pose.rotation, head_pose.translation - 0.5 * EYE_BASELINE * right_axis)
        right_pose = Pose(head_pose.rotation, head_pose.translation + 0.5 * EYE_BASELINE * right_axis)
        eye_left.append(RigView(f"eye_left_p{i:02d}", intr, left_pose, False))
        eye_right.append(RigView(f"eye_right_p{i:02d}", intr, right_pose, False))
        head_depth.append(RigView(f"head_depth_p{i:02d}", intr, head_pose, True))

    static_cams = []
    s_elev = np.deg2rad(STATIC_ELEVATION_DEG)
    for j, az_deg in enumerate(STATIC_AZIMUTHS_DEG):
        az = np.deg2rad(az_deg)
        offset = STATIC_RADIUS * np.array([np.sin(az) * np.cos(s_elev),
                                           -np.cos(az) * np.cos(s_elev),
                                           np.sin(s_elev)])
        static_cams.append(RigView(f"static_{j}", intr,
                                   look_at_pose(target + offset, target), True))

    return CameraRig(tuple(eye_left), tuple(eye_right), tuple(head_depth),
                     tuple(static_cams))


HEAD_CENTER_INDEX = N_ARC_POSES // 2  # pose 8 of 15, zero-based index 7


# ---------------------------------------------------------------------------
# observation type and dataset I/O


@dataclass(frozen=True)
class CameraView:
    """One posed observation: RGB, optional depth, and the empty-scene image."""

    camera_id: str
    intrinsics: CameraIntrinsics
    pose: Pose
    rgb: np.ndarray  # (H, W, 3) in [0, 1]
    background_rgb: np.ndarray  # (H, W, 3) in [0, 1]
    depth: np.ndarray | None = None  # (H, W) meters, 0 = invalid

    def __post_init__(self):
        h, w = self.intrinsics.height, self.intrinsics.width
        if self.rgb.shape != (h, w, 3) or self.background_rgb.shape != (h, w, 3):
            raise ValueError("rgb/background shape does not match intrinsics")
        if self.depth is not None and self.depth.shape != (h, w):
            raise ValueError("depth shape does not match intrinsics")


@dataclass(frozen=True)
class DatasetManifest:
    format_version: int
    seed: int
    image_size: tuple  # (w, h)
    workspace: Aabb
    scene_ids: tuple
    train_scenes: tuple
    eval_scenes: tuple
    rig: CameraRig
    n_objects: int

    def to_dict(self) -> dict:
        return {
            "format_version": self.format_version,
            "seed": self.seed,
            "image_size": list(self.image_size),
            "workspace": self.workspace.to_dict(),
            "scene_ids": list(self.scene_ids),
            "train_scenes": list(self.train_scenes),
            "eval_scenes": list(self.eval_scenes),
            "rig": self.rig.to_dict(),
            "n_objects": self.n_objects,
        }

    @staticmethod
    def from_dict(d: dict) -> "DatasetManifest":
        if d.get("format_version") != FORMAT_VERSION:
            raise FormatError(f"unsupported manifest version {d.get('format_version')!r}")
        return DatasetManifest(
            format_version=d["format_version"],
            seed=int(d["seed"]),
            image_size=tuple(d["image_size"]),
            workspace=Aabb.from_dict(d["workspace"]),
            scene_ids=tuple(d["scene_ids"]),
            train_scenes=tuple(d["train_scenes"]),
            eval_scenes=tuple(d["eval_scenes"]),
            rig=CameraRig.from_dict(d["rig"]),
            n_objects=int(d["n_objects"]),
        )


def _write_json(path: Path, obj: dict):
    path.write_text(json.dumps(obj, indent=1, sort_keys=True), encoding="utf-8")


def _save_rgb(path: Path, rgb: np.ndarray):
    arr = np.clip(np.round(rgb * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(arr, mode="RGB").save(path)


def _load_rgb(path: Path) -> np.ndarray:
    return np.asarray(Image.open(path), dtype=np.float64) / 255.0


def _save_depth(path: Path, depth_m: np.ndarray):
    mm = np.clip(np.round(depth_m * 1000.0), 0, 65535).astype(np.uint16)
    Image.fromarray(mm).save(path)


def _load_depth(path: Path) -> np.ndarray:
    return np.asarray(Image.open(path), dtype=np.float64) / 1000.0


def render_scene_views(scene: Scene, rig: CameraRig) -> list[CameraView]:
    """Render every rig view of a scene, including its empty-scene background."""
    empty = scene.empty()
    views = []
    for rv in rig.all_views():
        rgb, depth = oracle_render(scene, rv.intrinsics, rv.pose)
        bg, _ = oracle_render(empty, rv.intrinsics, rv.pose)
        views.append(CameraView(camera_id=rv.view_id, intrinsics=rv.intrinsics,
                                pose=rv.pose, rgb=rgb, background_rgb=bg,
                                depth=depth if rv.depth_capable else None))
    return views


def write_dataset(scenes: list[Scene], rig: CameraRig, out_dir,
                  n_eval: int | None = None, seed: int = 0,
                  n_objects: int = 5) -> DatasetManifest:
    """Render all scenes through the rig and write the on-disk dataset.

    The last ``n_eval`` scenes form the evaluation split (default: one third,
    so the stock 60-scene set splits 40/20).
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    ids = [s.id for s in scenes]
    if n_eval is None:
        n_eval = len(scenes) // 3
    if n_eval > len(scenes):
        raise ValueError("n_eval exceeds the number of scenes")
    train_ids = ids[:len(ids) - n_eval]
    eval_ids = ids[len(ids) - n_eval:]
    workspace = scenes[0].workspace if scenes else DEFAULT_WORKSPACE
    first = rig.all_views()[0].intrinsics
    manifest = DatasetManifest(FORMAT_VERSION, seed, (first.width, first.height),
                               workspace, tuple(ids), tuple(train_ids),
                               tuple(eval_ids), rig, n_objects)

    for scene in scenes:
        sdir = out / "scenes" / scene.id
        for sub in ("rgb", "depth", "background"):
            (sdir / sub).mkdir(parents=True, exist_ok=True)
        meta = {"scene_id": scene.id, "workspace": scene.workspace.to_dict(),
                "views": []}
        for view in render_scene_views(scene, rig):
            rgb_file = f"rgb/{view.camera_id}.png"
            bg_file = f"background/{view.camera_id}.png"
            _save_rgb(sdir / rgb_file, view.rgb)
            _save_rgb(sdir / bg_file, view.background_rgb)
            depth_file = None
            if view.depth is not None:
                depth_file = f"depth/{view.camera_id}.png"
                _save_depth(sdir / depth_file, view.depth)
            meta["views"].append({
                "camera_id": view.camera_id,
                "intrinsics": view.intrinsics.to_dict(),
                "pose": view.pose.matrix().tolist(),
                "rgb": rgb_file,
                "background": bg_file,
                "depth": depth_file,
            })
        _write_json(sdir / "meta.json", meta)
        _write_json(sdir / "scene.json", scene.to_dict())

    _write_json(out / "manifest.json", manifest.to_dict())
    return manifest


def generate_dataset(out_dir, n_scenes: int = 60, n_objects: int = 5,
                     seed: int = 0, workspace: Aabb = DEFAULT_WORKSPACE,
                     image_size=DEFAULT_IMAGE_SIZE) -> DatasetManifest:
    """Generate scenes seed+0 .. seed+n-1 and write them as a dataset."""
    rig = build_rig(workspace, image_size)
    scenes = [generate_scene(seed + i, n_objects, workspace) for i in range(n_scenes)]
    return write_dataset(scenes, rig, out_dir, seed=seed, n_objects=n_objects)


class Dataset:
    """Read access to a dataset directory."""

    def __init__(self, root, manifest: DatasetManifest):
        self.root = Path(root)
        self.manifest = manifest

    def scene_dir(self, scene_id: str) -> Path:
        return self.root / "scenes" / scene_id

    def load_views(self, scene_id: str) -> list[CameraView]:
        meta_path = self.scene_dir(scene_id) / "meta.json"
        if not meta_path.exists():
            raise FormatError(f"missing meta.json for scene {scene_id!r}")
        try:
            meta = json.loads(meta_path.read_text(encoding="utf-8"))
        except json.JSONDecodeError as e:
            raise FormatError(f"malformed meta.json for scene {scene_id!r}: {e}") from e
        views = []
        sdir = self.scene_dir(scene_id)
        for v in meta["views"]:
            intr = CameraIntrinsics.from_dict(v["intrinsics"])
            depth = _load_depth(sdir / v["depth"]) if v["depth"] else None
            views.append(CameraView(
                camera_id=v["camera_id"], intrinsics=intr,
                pose=Pose.from_matrix(np.asarray(v["pose"])),
                rgb=_load_rgb(sdir / v["rgb"]),
                background_rgb=_load_rgb(sdir / v["background"]),
                depth=depth))
        return views

    def load_view(self, scene_id: str, view_id: str) -> CameraView:
        for v in self.load_views(scene_id):
            if v.camera_id == view_id:
                return v
        raise KeyError(f"no view {view_id!r} in scene {scene_id!r}")

    def scene_ground_truth(self, scene_id: str) -> Scene:
        path = self.scene_dir(scene_id) / "scene.json"
        if not path.exists():
            raise FormatError(f"missing scene.json for scene {scene_id!r}")
        return Scene.from_dict(json.loads(path.read_text(encoding="utf-8")))


def read_dataset(root) -> Dataset:
    """Open a dataset directory; raises :class:`FormatError` if malformed."""
    root = Path(root)
    manifest_path = root / "manifest.json"
    if not manifest_path.exists():
        raise FormatError(f"no manifest.json under {root}")
    try:
        manifest = DatasetManifest.from_dict(
            json.loads(manifest_path.read_text(encoding="utf-8")))
    except (json.JSONDecodeError, KeyError) as e:
        raise FormatError(f"malformed manifest.json: {e}") from e
    for scene_id in manifest.scene_ids:
        if not (root / "scenes" / scene_id / "meta.json").exists():
            raise FormatError(f"scene {scene_id!r} listed in manifest but meta.json missing")
    return Dataset(root, manifest)
