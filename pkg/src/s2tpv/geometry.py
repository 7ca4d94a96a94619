"""Rigid transforms, pinhole cameras, the virtual-view transform and BEV warping.

Frames used throughout:

* ego: x forward, y left, z up; origin on the ground under the vehicle.
* camera: OpenCV convention, z along the optical axis, x right, y down.
* grid: TPV/voxel indices (h, w, d) map to ego (x, y, z); integer grid
  coordinates sit on cell centres.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, GeometryError
from .tensor import Tensor, grid_sample2d

Z_NEAR = 0.1
_ORTHO_TOL = 1e-9
_SNAP = 1e-9

PLANES = ("hw", "dh", "wd")


@dataclass(frozen=True)
class RigidTransform:
    rotation: np.ndarray = field(default_factory=lambda: np.eye(3))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        object.__setattr__(self, "rotation", np.asarray(self.rotation, dtype=np.float64).reshape(3, 3))
        object.__setattr__(self, "translation", np.asarray(self.translation, dtype=np.float64).reshape(3))

    @classmethod
    def identity(cls) -> "RigidTransform":
        return cls(np.eye(3), np.zeros(3))

    @classmethod
    def from_matrix(cls, m: np.ndarray) -> "RigidTransform":
        m = np.asarray(m, dtype=np.float64)
        return cls(m[:3, :3], m[:3, 3])

    @classmethod
    def planar(cls, x: float, y: float, yaw: float, z: float = 0.0) -> "RigidTransform":
        c, s = np.cos(yaw), np.sin(yaw)
        rot = np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])
        return cls(rot, np.array([x, y, z], dtype=np.float64))

    def validate(self) -> "RigidTransform":
        r = self.rotation
        if not np.allclose(r.T @ r, np.eye(3), rtol=0.0, atol=_ORTHO_TOL):
            raise GeometryError("rotation is not orthonormal")
        if abs(np.linalg.det(r) - 1.0) > _ORTHO_TOL:
            raise GeometryError("rotation has det != 1")
        if not np.isfinite(self.translation).all():
            raise GeometryError("translation is not finite")
        return self

    def matrix(self) -> np.ndarray:
        m = np.eye(4)
        m[:3, :3] = self.rotation
        m[:3, 3] = self.translation
        return m

    def inverse(self) -> "RigidTransform":
        rt = self.rotation.T
        return RigidTransform(rt, -rt @ self.translation)

    def compose(self, other: "RigidTransform") -> "RigidTransform":
        """self after other: x -> self(other(x))."""
        return RigidTransform.from_matrix(self.matrix() @ other.matrix())

    def apply(self, points: np.ndarray) -> np.ndarray:
        points = np.asarray(points, dtype=np.float64)
        return points @ self.rotation.T + self.translation

    def yaw(self) -> float:
        return float(np.arctan2(self.rotation[1, 0], self.rotation[0, 0]))


@dataclass(frozen=True)
class CameraModel:
    intrinsics: np.ndarray
    extrinsic: RigidTransform  # camera -> ego
    image_size: tuple[int, int]  # (width, height) in px

    def __post_init__(self):
        k = np.asarray(self.intrinsics, dtype=np.float64).reshape(3, 3)
        object.__setattr__(self, "intrinsics", k)
        object.__setattr__(self, "image_size", (int(self.image_size[0]), int(self.image_size[1])))
        if np.any(np.tril(k, -1) != 0) or k[0, 0] <= 0 or k[1, 1] <= 0 or k[2, 2] != 1:
            raise GeometryError("intrinsics must be upper triangular with positive focal lengths")

    @classmethod
    def pinhole(cls, width: int, height: int, hfov_deg: float, extrinsic: RigidTransform) -> "CameraModel":
        f = 0.5 * width / np.tan(np.radians(hfov_deg) / 2)
        k = np.array([[f, 0.0, width / 2], [0.0, f, height / 2], [0.0, 0.0, 1.0]])
        return cls(k, extrinsic, (width, height))


# Camera axes expressed in ego axes for a camera looking along ego +x.
_CAM_TO_EGO_FORWARD = np.array([[0.0, 0.0, 1.0], [-1.0, 0.0, 0.0], [0.0, -1.0, 0.0]])


def camera_mount(yaw: float, height: float, offset: float = 0.0) -> RigidTransform:
    """Extrinsic (camera -> ego) of a level camera looking at ego bearing ``yaw``."""
    c, s = np.cos(yaw), np.sin(yaw)
    rz = np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])
    return RigidTransform(rz @ _CAM_TO_EGO_FORWARD, np.array([offset * c, offset * s, height]))


@dataclass(frozen=True)
class Grid:
    """Metric extent of ego space and its H x W x D discretisation."""

    H: int
    W: int
    D: int
    bounds: tuple = ((-16.0, 16.0), (-16.0, 16.0), (-0.5, 3.5))

    def __post_init__(self):
        b = tuple(tuple(float(v) for v in ax) for ax in self.bounds)
        object.__setattr__(self, "bounds", b)
        if min(self.H, self.W, self.D) < 1:
            raise ConfigError("grid extents must be positive")
        for lo, hi in b:
            if not hi > lo:
                raise GeometryError(f"degenerate ego bounds {lo}..{hi}")

    @property
    def shape(self) -> tuple[int, int, int]:
        return (self.H, self.W, self.D)

    @property
    def pitch(self) -> np.ndarray:
        n = np.array(self.shape, dtype=np.float64)
        lo = np.array([b[0] for b in self.bounds])
        hi = np.array([b[1] for b in self.bounds])
        return (hi - lo) / n

    @property
    def lower(self) -> np.ndarray:
        return np.array([b[0] for b in self.bounds])

    def centers(self, axis: int) -> np.ndarray:
        n = self.shape[axis]
        return self.lower[axis] + (np.arange(n) + 0.5) * self.pitch[axis]

    def voxel_centers(self) -> np.ndarray:
        xs, ys, zs = (self.centers(a) for a in range(3))
        return np.stack(np.meshgrid(xs, ys, zs, indexing="ij"), axis=-1)

    def metric_to_grid(self, xyz: np.ndarray) -> np.ndarray:
        """Continuous (h, w, d) coordinates; cell centres map to integers."""
        xyz = np.asarray(xyz, dtype=np.float64)
        g = (xyz - self.lower) / self.pitch - 0.5
        return snap(g)

    def voxel_index(self, xyz: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Integer voxel indices and an inside-bounds mask (half-open cells)."""
        xyz = np.asarray(xyz, dtype=np.float64)
        idx = np.floor((xyz - self.lower) / self.pitch).astype(np.int64)
        inside = np.all((idx >= 0) & (idx < np.array(self.shape)), axis=-1)
        return idx, inside


def snap(coords: np.ndarray) -> np.ndarray:
    """Round coordinates lying within 1e-9 of an integer onto it."""
    r = np.round(coords)
    return np.where(np.abs(coords - r) < _SNAP, r, coords)


def vvt(camera: RigidTransform, past_pose: RigidTransform, current_pose: RigidTransform) -> RigidTransform:
    """Map current-ego points into camera ``camera`` as it was at the past step.

    camera: camera -> ego; poses: ego -> global.  The result is
    M_cam^-1 . M_past^-1 . M_cur composed as 4x4 matrices.
    """
    for t in (camera, past_pose, current_pose):
        t.validate()
    # closed-form rigid inverses keep the rotation block orthonormal
    m = camera.inverse().matrix() @ past_pose.inverse().matrix() @ current_pose.matrix()
    return RigidTransform.from_matrix(m)


def _plane_axes(plane: str) -> tuple[int, int, int]:
    """(first cell axis, second cell axis, orthogonal axis) in (h=0, w=1, d=2)."""
    try:
        return {"hw": (0, 1, 2), "dh": (2, 0, 1), "wd": (1, 2, 0)}[plane]
    except KeyError:
        raise ConfigError(f"unknown plane {plane!r}") from None


def plane_shape(plane: str, grid: Grid) -> tuple[int, int]:
    a, b, _ = _plane_axes(plane)
    return grid.shape[a], grid.shape[b]


def sample_ego_refs(plane: str, grid: Grid, n_ref: int) -> np.ndarray:
    """Pillar reference points for every cell of ``plane``.

    Returns [A, B, n_ref, 3] ego points: the cell's metric centre on its two
    in-plane axes and ``n_ref`` depths at sub-cell centres along the
    orthogonal axis, ascending.
    """
    if n_ref < 1:
        raise ConfigError("n_ref must be >= 1")
    a, b, o = _plane_axes(plane)
    lo, hi = grid.bounds[o]
    depths = lo + (np.arange(n_ref) + 0.5) * (hi - lo) / n_ref
    ca, cb = grid.centers(a), grid.centers(b)
    A, B = len(ca), len(cb)
    pts = np.empty((A, B, n_ref, 3))
    pts[..., a] = ca[:, None, None]
    pts[..., b] = cb[None, :, None]
    pts[..., o] = depths[None, None, :]
    return pts


def project_refs(points: np.ndarray, view: RigidTransform, camera: CameraModel,
                 z_near: float = Z_NEAR) -> tuple[np.ndarray, np.ndarray]:
    """Project ego points through ``view`` (ego -> camera) and the intrinsics.

    Returns pixel coordinates [..., 2] as (u, v) and a validity mask.  Points
    at or behind the near plane get pixel (-1, -1) and are invalid.
    """
    pc = view.apply(points)
    z = pc[..., 2]
    front = z > z_near
    safe_z = np.where(front, z, 1.0)
    k = camera.intrinsics
    u = (k[0, 0] * pc[..., 0] + k[0, 1] * pc[..., 1]) / safe_z + k[0, 2]
    v = (k[1, 1] * pc[..., 1]) / safe_z + k[1, 2]
    pix = np.stack([np.where(front, u, -1.0), np.where(front, v, -1.0)], axis=-1)
    w, h = camera.image_size
    valid = front & (pix[..., 0] >= 0) & (pix[..., 0] < w) & (pix[..., 1] >= 0) & (pix[..., 1] < h)
    return pix, valid


def hit_views(points: np.ndarray, cameras, views) -> np.ndarray:
    """[n_cam, A, B] mask: camera i sees at least one reference of the cell."""
    if len(cameras) == 0:
        raise ConfigError("hit_views needs at least one camera")
    if len(cameras) != len(views):
        raise ConfigError("cameras and views differ in length")
    return np.stack([project_refs(points, v, c)[1].any(axis=-1) for c, v in zip(cameras, views)])


def bev_source_coords(prev_pose: RigidTransform, cur_pose: RigidTransform, grid: Grid) -> np.ndarray:
    """Grid (h, w) coordinates in the previous BEV of each current BEV cell centre."""
    xs, ys = grid.centers(0), grid.centers(1)
    pts = np.zeros((grid.H, grid.W, 3))
    pts[..., 0] = xs[:, None]
    pts[..., 1] = ys[None, :]
    rel = prev_pose.inverse().compose(cur_pose)
    src = rel.apply(pts)
    return grid.metric_to_grid(src)[..., :2]


def warp_bev(prev_bev: Tensor, prev_pose: RigidTransform, cur_pose: RigidTransform, grid: Grid) -> Tensor:
    """Resample last step's BEV plane into the current ego frame.

    Cells whose source falls outside the previous plane come back zero.
    """
    src = bev_source_coords(prev_pose, cur_pose, grid)
    H, W, C = prev_bev.shape
    return grid_sample2d(prev_bev, src.reshape(-1, 2)).reshape(H, W, C)
