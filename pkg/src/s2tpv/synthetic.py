"""Deterministic synthetic driving worlds: geometry, camera rig, ray-cast
feature rendering, LiDAR sampling and voxel ground truth.

The renderer stands in for an image backbone.  It rasterises per-pixel class
one-hot channels plus a normalised inverse depth, embeds them with a fixed
linear map and average-pools a feature pyramid.  Anything that produces
[n_cam, H_l, W_l, F] maps per level can replace it.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from functools import lru_cache
from pathlib import Path

import numpy as np

from .errors import ConfigError, RangeError
from .geometry import CameraModel, Grid, RigidTransform, camera_mount

CLASS_NAMES = ("drivable", "manmade", "vegetation", "car", "truck", "bus", "pedestrian", "barrier")
N_SEMANTIC = len(CLASS_NAMES)
EMPTY = N_SEMANTIC
TARGET_CLASSES = (3, 4, 6)  # car, truck, pedestrian

SCENE_FORMAT = "s2tpv-scenes"
SCENE_VERSION = 1


@dataclass
class Box:
    cls: int
    center: tuple  # (x, y, z_bottom) global metres
    size: tuple  # (length along yaw, width, height)
    yaw: float = 0.0


@dataclass
class Cylinder:
    cls: int
    center: tuple  # (x, y, z_bottom)
    radius: float
    height: float


@dataclass
class RigSpec:
    n_cams: int = 6
    width: int = 64
    height: int = 64
    hfov_deg: float = 70.0
    mount_height: float = 1.5
    mount_offset: float = 0.5
    lidar_height: float = 4.5

    def cameras(self) -> list[CameraModel]:
        yaws = 2 * np.pi * np.arange(self.n_cams) / self.n_cams
        return [CameraModel.pinhole(self.width, self.height, self.hfov_deg,
                                    camera_mount(y, self.mount_height, self.mount_offset)) for y in yaws]


@dataclass
class WorldSpec:
    seed: int
    trajectory: list  # [(timestamp, x, y, yaw)] ego -> global, planar
    boxes: list = field(default_factory=list)
    cylinders: list = field(default_factory=list)
    ground_class: int | None = 0  # None: no ground plane
    rig: RigSpec = field(default_factory=RigSpec)
    target: int | None = None  # index into boxes of the occlusion target

    def __post_init__(self):
        ts = [p[0] for p in self.trajectory]
        if len(ts) == 0 or any(b <= a for a, b in zip(ts, ts[1:])):
            raise ConfigError("trajectory timestamps must be non-empty and strictly increasing")

    def __len__(self) -> int:
        return len(self.trajectory)

    def pose(self, t: int) -> RigidTransform:
        if not 0 <= t < len(self.trajectory):
            raise RangeError(f"timestep {t} outside trajectory of length {len(self.trajectory)}")
        _, x, y, yaw = self.trajectory[t]
        return RigidTransform.planar(x, y, yaw)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["trajectory"] = [list(p) for p in self.trajectory]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "WorldSpec":
        return cls(
            seed=int(d["seed"]),
            trajectory=[tuple(float(v) for v in p) for p in d["trajectory"]],
            boxes=[Box(int(b["cls"]), tuple(b["center"]), tuple(b["size"]), float(b.get("yaw", 0.0)))
                   for b in d.get("boxes", [])],
            cylinders=[Cylinder(int(c["cls"]), tuple(c["center"]), float(c["radius"]), float(c["height"]))
                       for c in d.get("cylinders", [])],
            ground_class=None if d.get("ground_class", 0) is None else int(d.get("ground_class", 0)),
            rig=RigSpec(**d.get("rig", {})),
            target=d.get("target"),
        )


@dataclass
class SceneFrame:
    timestamp: float
    ego_pose: RigidTransform
    cameras: list
    world: WorldSpec
    t: int
    pyramids: list | None = None  # per level [n_cam, H_l, W_l, F]
    lidar_points: np.ndarray | None = None  # [N, 4]: ego xyz, class id


@dataclass
class VoxelLabelGrid:
    labels: np.ndarray  # [H, W, D] int
    grid: Grid
    empty: int = EMPTY


# -- ray casting ----------------------------------------------------------------

_EPS = 1e-9


def _ray_boxes(o, d, boxes):
    n = len(o)
    best = np.full(n, np.inf)
    who = np.full(n, -1)
    for k, b in enumerate(boxes):
        c = np.array([b.center[0], b.center[1], b.center[2] + b.size[2] / 2])
        half = np.array(b.size, dtype=np.float64) / 2
        cy, sy = np.cos(b.yaw), np.sin(b.yaw)
        rot_t = np.array([[cy, sy, 0.0], [-sy, cy, 0.0], [0.0, 0.0, 1.0]])
        lo_ = (o - c) @ rot_t.T
        ld = d @ rot_t.T
        with np.errstate(divide="ignore", invalid="ignore"):
            inv = 1.0 / np.where(np.abs(ld) < _EPS, np.copysign(_EPS, ld + 0.0), ld)
            t1 = (-half - lo_) * inv
            t2 = (half - lo_) * inv
        tmin = np.minimum(t1, t2).max(axis=1)
        tmax = np.maximum(t1, t2).min(axis=1)
        hit = (tmax >= tmin) & (tmin > _EPS)
        closer = hit & (tmin < best)
        best = np.where(closer, tmin, best)
        who = np.where(closer, k, who)
    return best, who


def _ray_cylinders(o, d, cylinders):
    n = len(o)
    best = np.full(n, np.inf)
    who = np.full(n, -1)
    for k, cy in enumerate(cylinders):
        cx, cyy, z0 = cy.center
        ox, oy, oz = o[:, 0] - cx, o[:, 1] - cyy, o[:, 2]
        dx, dy, dz = d[:, 0], d[:, 1], d[:, 2]
        a = dx * dx + dy * dy
        b = 2 * (ox * dx + oy * dy)
        c = ox * ox + oy * oy - cy.radius ** 2
        disc = b * b - 4 * a * c
        ok = (disc >= 0) & (a > _EPS)
        sq = np.sqrt(np.where(ok, disc, 0.0))
        with np.errstate(divide="ignore", invalid="ignore"):
            ts = np.where(ok, (-b - sq) / np.where(a > _EPS, 2 * a, 1.0), np.inf)
        z = oz + ts * dz
        side = ok & (ts > _EPS) & (z >= z0) & (z <= z0 + cy.height)
        t_hit = np.where(side, ts, np.inf)
        for zc in (z0, z0 + cy.height):
            with np.errstate(divide="ignore", invalid="ignore"):
                tc = np.where(np.abs(dz) > _EPS, (zc - oz) / np.where(np.abs(dz) > _EPS, dz, 1.0), np.inf)
            px, py = ox + tc * dx, oy + tc * dy
            cap = (tc > _EPS) & (px * px + py * py <= cy.radius ** 2)
            t_hit = np.where(cap & (tc < t_hit), tc, t_hit)
        closer = t_hit < best
        best = np.where(closer, t_hit, best)
        who = np.where(closer, k, who)
    return best, who


def cast_rays(world: WorldSpec, origins: np.ndarray, dirs: np.ndarray):
    """First hit of global-frame rays.

    Returns (distance along ``dirs``, class id or -1, object id) where object
    id is -1 for a miss, 0 for the ground, 1.. for boxes then cylinders.
    """
    o = np.asarray(origins, dtype=np.float64).reshape(-1, 3)
    d = np.asarray(dirs, dtype=np.float64).reshape(-1, 3)
    n = len(o)
    best = np.full(n, np.inf)
    obj = np.full(n, -1)
    down = (d[:, 2] < -_EPS) & (world.ground_class is not None)
    with np.errstate(divide="ignore", invalid="ignore"):
        tg = np.where(down, -o[:, 2] / np.where(down, d[:, 2], -1.0), np.inf)
    ground = down & (tg > _EPS)
    best = np.where(ground, tg, best)
    obj = np.where(ground, 0, obj)
    tb, wb = _ray_boxes(o, d, world.boxes)
    closer = tb < best
    best = np.where(closer, tb, best)
    obj = np.where(closer, 1 + wb, obj)
    tc, wc = _ray_cylinders(o, d, world.cylinders)
    closer = tc < best
    best = np.where(closer, tc, best)
    obj = np.where(closer, 1 + len(world.boxes) + wc, obj)
    ground_cls = -1 if world.ground_class is None else world.ground_class
    classes = np.array([ground_cls] + [b.cls for b in world.boxes] + [c.cls for c in world.cylinders])
    cls = np.where(obj >= 0, classes[np.maximum(obj, 0)], -1)
    return best, cls, obj


# -- frames -----------------------------------------------------------------------

def generate_scene(spec: WorldSpec, t: int) -> SceneFrame:
    """Geometry-only frame at timestep ``t``; see :func:`build_frame` for features."""
    pose = spec.pose(t)
    return SceneFrame(timestamp=spec.trajectory[t][0], ego_pose=pose, cameras=spec.rig.cameras(), world=spec, t=t)


def camera_rays(frame: SceneFrame, cam: int):
    """Global-frame rays through every pixel centre of camera ``cam``.

    Returns origins [h*w, 3], unit directions [h*w, 3] and the camera-frame
    z component of each unit direction (for z-depth).
    """
    camera = frame.cameras[cam]
    w, h = camera.image_size
    k = camera.intrinsics
    u, v = np.meshgrid(np.arange(w) + 0.5, np.arange(h) + 0.5)
    x = (u - k[0, 2]) / k[0, 0]
    y = (v - k[1, 2]) / k[1, 1]
    dc = np.stack([x, y, np.ones_like(x)], axis=-1).reshape(-1, 3)
    norm = np.linalg.norm(dc, axis=1, keepdims=True)
    dc = dc / norm
    to_global = frame.ego_pose.compose(camera.extrinsic)
    dirs = dc @ to_global.rotation.T
    origins = np.broadcast_to(to_global.translation, dirs.shape)
    return origins, dirs, dc[:, 2]


def render_semantics(frame: SceneFrame, cam: int):
    """Per-pixel (class id or -1, z-depth) for one camera at full resolution."""
    w, h = frame.cameras[cam].image_size
    origins, dirs, cz = camera_rays(frame, cam)
    dist, cls, _ = cast_rays(frame.world, origins, dirs)
    depth = np.where(np.isfinite(dist), dist * cz, np.inf)
    return cls.reshape(h, w), depth.reshape(h, w)


@lru_cache(maxsize=8)
def feature_embedding(n_in: int, feat_dim: int) -> np.ndarray:
    """Fixed map from (one-hot classes, inverse depth) to ``feat_dim`` channels."""
    rng = np.random.default_rng(20240)
    e = rng.normal(0.0, 1.0 / np.sqrt(n_in), size=(n_in, feat_dim))
    e.setflags(write=False)
    return e


def raster_channels(cls: np.ndarray, depth: np.ndarray, n_classes: int = N_SEMANTIC) -> np.ndarray:
    onehot = (cls[..., None] == np.arange(n_classes)).astype(np.float64)
    inv = np.where(np.isfinite(depth), 1.0 / np.maximum(depth, 1.0), 0.0)
    return np.concatenate([onehot, inv[..., None]], axis=-1)


def avg_pool(img: np.ndarray, factor: int) -> np.ndarray:
    if factor == 1:
        return img
    h, w = img.shape[-3:-1]
    if h % factor or w % factor:
        raise ConfigError(f"image {h}x{w} not divisible by pooling factor {factor}")
    lead = img.shape[:-3]
    c = img.shape[-1]
    return img.reshape(lead + (h // factor, factor, w // factor, factor, c)).mean(axis=(-4, -2))


def render_features(frame: SceneFrame, n_scale: int = 2, feat_dim: int = 16) -> list[np.ndarray]:
    """Feature pyramid: level j is [n_cam, H / 2^j, W / 2^j, feat_dim]."""
    if n_scale < 1:
        raise ConfigError("n_scale must be >= 1")
    emb = feature_embedding(N_SEMANTIC + 1, feat_dim)
    level0 = np.stack([raster_channels(*render_semantics(frame, i)) @ emb for i in range(len(frame.cameras))])
    return [avg_pool(level0, 2 ** j) for j in range(n_scale)]


def lidar_rays(n_rays: int, seed: int, n_beams: int = 32, elev_deg=(-40.0, 5.0)):
    """Unit directions of a rotating fan; the azimuth phase is jittered by ``seed``."""
    n_az = max(1, n_rays // n_beams)
    rng = np.random.default_rng(seed)
    phase = rng.uniform(0.0, 2 * np.pi / n_az)
    az = phase + 2 * np.pi * np.arange(n_az) / n_az
    el = np.radians(np.linspace(elev_deg[0], elev_deg[1], n_beams))
    a, e = np.meshgrid(az, el, indexing="ij")
    return np.stack([np.cos(e) * np.cos(a), np.cos(e) * np.sin(a), np.sin(e)], axis=-1).reshape(-1, 3)


def sample_lidar_from(world: WorldSpec, pose: RigidTransform, origin_ego: np.ndarray, dirs_ego: np.ndarray):
    """Cast ego-frame rays; returns [N, 4] ego xyz + class of the hits."""
    o = pose.apply(np.broadcast_to(origin_ego, dirs_ego.shape))
    d = dirs_ego @ pose.rotation.T
    dist, cls, _ = cast_rays(world, o, d)
    hit = np.isfinite(dist)
    pts = origin_ego + dirs_ego[hit] * dist[hit, None]
    return np.concatenate([pts, cls[hit, None].astype(np.float64)], axis=1)


def sample_lidar(frame: SceneFrame, n_rays: int = 11520, seed: int = 0) -> np.ndarray:
    if n_rays <= 0:
        raise ConfigError("n_rays must be positive")
    origin = np.array([0.0, 0.0, frame.world.rig.lidar_height])
    return sample_lidar_from(frame.world, frame.ego_pose, origin, lidar_rays(n_rays, seed))


def voxelize_labels(points: np.ndarray, grid: Grid, n_semantic: int = N_SEMANTIC) -> VoxelLabelGrid:
    """Majority class of the points in each voxel (ties -> smaller id); else empty."""
    points = np.asarray(points, dtype=np.float64).reshape(-1, 4)
    empty = n_semantic
    labels = np.full(grid.shape, empty, dtype=np.int64)
    if len(points) == 0:
        return VoxelLabelGrid(labels, grid, empty)
    idx, inside = grid.voxel_index(points[:, :3])
    idx = idx[inside]
    cls = points[inside, 3].astype(np.int64)
    if np.any((cls < 0) | (cls >= n_semantic)):
        raise ConfigError("point class outside semantic range")
    flat = np.ravel_multi_index(idx.T, grid.shape)
    counts = np.zeros((labels.size, n_semantic), dtype=np.int64)
    np.add.at(counts, (flat, cls), 1)
    occupied = counts.sum(axis=1) > 0
    lab = labels.reshape(-1)
    lab[occupied] = counts[occupied].argmax(axis=1)
    return VoxelLabelGrid(lab.reshape(grid.shape), grid, empty)


@dataclass(frozen=True)
class RenderConfig:
    n_scale: int = 2
    feat_dim: int = 16
    n_rays: int = 11520


def build_frame(spec: WorldSpec, t: int, render: RenderConfig = RenderConfig()) -> SceneFrame:
    frame = generate_scene(spec, t)
    frame.pyramids = render_features(frame, render.n_scale, render.feat_dim)
    frame.lidar_points = sample_lidar(frame, render.n_rays, seed=spec.seed * 1000 + t)
    return frame


class SceneDataset:
    """World specs plus a bounded cache of rendered frames."""

    def __init__(self, specs: list[WorldSpec], render: RenderConfig = RenderConfig(), cache_size: int = 256):
        self.specs = list(specs)
        self.render = render
        self._frame = lru_cache(maxsize=cache_size)(self._build)

    def _build(self, i: int, t: int) -> SceneFrame:
        return build_frame(self.specs[i], t, self.render)

    def __len__(self) -> int:
        return len(self.specs)

    def frame(self, i: int, t: int) -> SceneFrame:
        return self._frame(i, t)

    def history(self, i: int, t: int, m: int, strict: bool = False) -> list[SceneFrame]:
        """Frames [t-m .. t], oldest first; missing past frames repeat frame 0."""
        if not 0 <= t < len(self.specs[i]):
            raise RangeError(f"timestep {t} outside scene {i}")
        if strict and t - m < 0:
            raise RangeError(f"scene {i} has only {t} past frames before t={t}, need {m}")
        return [self.frame(i, max(k, 0)) for k in range(t - m, t + 1)]


# -- world generators ----------------------------------------------------------------

_TARGET_SIZES = {3: (4.2, 1.9, 1.6), 4: (5.5, 2.3, 2.6), 6: (0.8, 0.8, 1.8)}


def straight_trajectory(n: int, speed: float, end=(0.0, 0.0), yaw: float = 0.0, dt: float = 0.5,
                        yaw_jitter: np.ndarray | None = None) -> list:
    traj = []
    for k in range(n):
        back = (n - 1 - k) * speed
        jy = 0.0 if yaw_jitter is None else float(yaw_jitter[k])
        traj.append((k * dt, end[0] - back * np.cos(yaw), end[1] - back * np.sin(yaw), yaw + jy))
    return traj


def object_pixels(spec: WorldSpec, t: int, obj_id: int) -> int:
    """Number of camera pixels whose first hit is object ``obj_id`` (cast_rays ids)."""
    frame = generate_scene(spec, t)
    total = 0
    for cam in range(len(frame.cameras)):
        origins, dirs, _ = camera_rays(frame, cam)
        _, _, obj = cast_rays(spec, origins, dirs)
        total += int((obj == obj_id).sum())
    return total


def lidar_hits(spec: WorldSpec, t: int, obj_id: int, n_rays: int = 11520) -> int:
    frame = generate_scene(spec, t)
    origin = np.array([0.0, 0.0, spec.rig.lidar_height])
    dirs = lidar_rays(n_rays, spec.seed * 1000 + t)
    o = frame.ego_pose.apply(np.broadcast_to(origin, dirs.shape))
    _, _, obj = cast_rays(spec, o, dirs @ frame.ego_pose.rotation.T)
    return int((obj == obj_id).sum())


def _distractors(rng, pose: RigidTransform, n: int, p_vehicle: float = 0.2) -> tuple[list, list]:
    """Visible clutter around the ego: trees, buildings, barriers and occasional road users."""
    boxes, cyls = [], []
    kinds = rng.choice(4, size=n, p=[(1 - p_vehicle) * 0.4, (1 - p_vehicle) * 0.35, (1 - p_vehicle) * 0.25,
                                    p_vehicle])
    for kind in kinds:
        x = rng.uniform(5.0, 14.0) * rng.choice([-1, 1])
        y = rng.uniform(-2.0, 2.0) if abs(x) > 7 else rng.uniform(-13.0, -8.0)
        gx, gy, _ = pose.apply(np.array([x, y, 0.0]))
        yaw = pose.yaw() + float(rng.uniform(-0.3, 0.3))
        if kind == 0:
            cyls.append(Cylinder(2, (gx, gy, 0.0), rng.uniform(0.8, 1.5), rng.uniform(2.5, 4.0)))
        elif kind == 1:
            boxes.append(Box(1, (gx, gy, 0.0), (rng.uniform(2, 4), rng.uniform(2, 4), rng.uniform(3, 5)), yaw))
        elif kind == 2:
            boxes.append(Box(7, (gx, gy, 0.0), (rng.uniform(3, 6), 0.5, 1.0), yaw + np.pi / 2))
        else:
            cls = int(rng.choice(TARGET_CLASSES))
            size = _TARGET_SIZES[cls]
            if cls == 6:
                cyls.append(Cylinder(cls, (gx, gy, 0.0), 0.4, size[2]))
            else:
                boxes.append(Box(cls, (gx, gy, 0.0), size, yaw))
    return boxes, cyls


def occlusion_world(seed: int, n_frames: int = 3, speed: float = 6.0, n_distractors: int = 3,
                    max_tries: int = 50, decoy: bool = False) -> WorldSpec:
    """A target hidden from every camera at the last frame but visible one frame earlier.

    The occluder is a bus parked between the ego lane and the target; the
    LiDAR mast sees over it, so the target still carries ground truth.
    Candidates are rejection-sampled with ray-cast visibility checks.

    With ``decoy`` the same layout is built and accepted, then the target is
    removed: the bus hides empty road.  Mixing decoys into training data stops
    "there is always something behind the bus" from being learnable without
    looking at earlier frames.
    """
    rng = np.random.default_rng(seed)
    for _ in range(max_tries):
        side = rng.choice([-1.0, 1.0])
        yaw = float(rng.uniform(-np.pi, np.pi))
        jitter = rng.normal(0.0, 0.02, size=n_frames)
        jitter[-1] = 0.0
        traj = straight_trajectory(n_frames, speed, end=tuple(rng.uniform(-50, 50, size=2)), yaw=yaw,
                                   yaw_jitter=jitter)
        pose = RigidTransform.planar(traj[-1][1], traj[-1][2], traj[-1][3])
        occ_y = side * rng.uniform(3.3, 4.0)
        occ_x = rng.uniform(-0.5, 0.5)
        tgt_y = side * rng.uniform(8.5, 11.0)
        tgt_x = rng.uniform(-4.0, 4.0)
        cls = int(rng.choice(TARGET_CLASSES))
        size = _TARGET_SIZES[cls]
        occ = Box(5, tuple(pose.apply(np.array([occ_x, occ_y, 0.0]))), (7.0, 2.5, 3.0), yaw)
        tgt = Box(cls, tuple(pose.apply(np.array([tgt_x, tgt_y, 0.0]))), size, yaw + float(rng.uniform(-0.3, 0.3)))
        boxes, cyls = _distractors(rng, pose, n_distractors)
        spec = WorldSpec(seed=seed, trajectory=traj, boxes=[tgt, occ] + boxes, cylinders=cyls, target=0)
        target_id = 1
        if object_pixels(spec, n_frames - 1, target_id) != 0:
            continue
        if n_frames > 1 and object_pixels(spec, n_frames - 2, target_id) < 20:
            continue
        if lidar_hits(spec, n_frames - 1, target_id) < 5:
            continue
        if decoy:
            spec = WorldSpec(seed=seed, trajectory=traj, boxes=[occ] + boxes, cylinders=cyls, target=None)
        return spec
    raise ConfigError(f"could not build an occlusion world for seed {seed}")


def random_world(seed: int, n_frames: int = 3, speed: float = 4.0, n_objects: int = 6) -> WorldSpec:
    rng = np.random.default_rng(seed)
    yaw = float(rng.uniform(-np.pi, np.pi))
    traj = straight_trajectory(n_frames, speed, end=tuple(rng.uniform(-50, 50, size=2)), yaw=yaw,
                               yaw_jitter=rng.normal(0.0, 0.02, size=n_frames))
    pose = RigidTransform.planar(traj[-1][1], traj[-1][2], traj[-1][3])
    boxes, cyls = _distractors(rng, pose, n_objects)
    return WorldSpec(seed=seed, trajectory=traj, boxes=boxes, cylinders=cyls)


def occlusion_training_set(seed: int, n_scenes: int, n_frames: int = 2, decoy_rate: float = 0.5) -> list[WorldSpec]:
    """Occlusion scenes for training; a ``decoy_rate`` share has no hidden target."""
    rng = np.random.default_rng(seed)
    decoys = rng.random(n_scenes) < decoy_rate
    return [occlusion_world(seed + i, n_frames=n_frames, decoy=bool(d)) for i, d in enumerate(decoys)]


def occlusion_benchmark(seed: int, n_scenes: int = 20, n_frames: int = 9) -> list[WorldSpec]:
    return [occlusion_world(seed * 100003 + i, n_frames=n_frames) for i in range(n_scenes)]


# -- scene files -----------------------------------------------------------------------

def save_scenes(path, specs: list[WorldSpec]) -> None:
    doc = {"format": SCENE_FORMAT, "version": SCENE_VERSION, "scenes": [s.to_dict() for s in specs]}
    Path(path).write_text(json.dumps(doc, indent=1, sort_keys=True) + "\n")


def load_scenes(path) -> list[WorldSpec]:
    doc = json.loads(Path(path).read_text())
    if doc.get("format") != SCENE_FORMAT:
        raise ConfigError(f"{path}: not a scene file")
    if doc.get("version") != SCENE_VERSION:
        raise ConfigError(f"{path}: unsupported scene file version {doc.get('version')}")
    return [WorldSpec.from_dict(d) for d in doc["scenes"]]
