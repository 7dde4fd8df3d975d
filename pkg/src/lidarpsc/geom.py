"""Rigid transforms, pinhole projection and voxel-grid addressing."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

_ORTHO_TOL = 1e-9


def _orthonormalize(r: np.ndarray) -> np.ndarray:
    u, _, vt = np.linalg.svd(r)
    out = u @ vt
    if np.linalg.det(out) < 0:
        u[:, -1] *= -1
        out = u @ vt
    return out


@dataclass(frozen=True, eq=False)
class RigidTransform:
    """x' = R x + t."""

    rotation: np.ndarray = field(default_factory=lambda: np.eye(3))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        r = np.array(self.rotation, dtype=np.float64).reshape(3, 3)
        t = np.array(self.translation, dtype=np.float64).reshape(3)
        if not (np.all(np.isfinite(r)) and np.all(np.isfinite(t))):
            raise ValueError("non-finite transform")
        err = np.abs(r.T @ r - np.eye(3)).max()
        if err > 1e-6 or np.linalg.det(r) < 0:
            raise ValueError(f"rotation is not a proper orthonormal matrix (err={err:.2e})")
        if err > _ORTHO_TOL:
            r = _orthonormalize(r)
        r.setflags(write=False)
        t.setflags(write=False)
        object.__setattr__(self, "rotation", r)
        object.__setattr__(self, "translation", t)

    @classmethod
    def identity(cls) -> "RigidTransform":
        return cls()

    @classmethod
    def from_matrix(cls, m) -> "RigidTransform":
        """Accepts a 3x4 or 4x4 matrix."""
        m = np.asarray(m, dtype=np.float64)
        return cls(m[:3, :3], m[:3, 3])

    @classmethod
    def rot_z(cls, angle: float, translation=(0.0, 0.0, 0.0)) -> "RigidTransform":
        c, s = np.cos(angle), np.sin(angle)
        return cls(np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]]), translation)

    def matrix(self) -> np.ndarray:
        m = np.eye(4)
        m[:3, :3] = self.rotation
        m[:3, 3] = self.translation
        return m

    def apply(self, points) -> np.ndarray:
        p = np.asarray(points, dtype=np.float64)
        return p @ self.rotation.T + self.translation

    def inverse(self) -> "RigidTransform":
        rt = self.rotation.T
        return RigidTransform(rt, -rt @ self.translation)

    def __matmul__(self, other: "RigidTransform") -> "RigidTransform":
        return compose(self, other)

    def __eq__(self, other):
        if not isinstance(other, RigidTransform):
            return NotImplemented
        return np.array_equal(self.rotation, other.rotation) and np.array_equal(
            self.translation, other.translation
        )

    def allclose(self, other: "RigidTransform", atol: float = 1e-9) -> bool:
        return np.allclose(self.rotation, other.rotation, atol=atol) and np.allclose(
            self.translation, other.translation, atol=atol
        )


def compose(a: RigidTransform, b: RigidTransform) -> RigidTransform:
    """Transform applying ``b`` first, then ``a``."""
    return RigidTransform(a.rotation @ b.rotation, a.rotation @ b.translation + a.translation)


@dataclass(frozen=True, eq=False)
class CameraModel:
    intrinsics: np.ndarray  # 3x4 projection matrix
    cam_from_lidar: RigidTransform
    image_size: tuple[int, int]  # (width, height)

    def __post_init__(self):
        p = np.array(self.intrinsics, dtype=np.float64)
        if p.shape == (3, 3):
            p = np.hstack([p, np.zeros((3, 1))])
        if p.shape != (3, 4):
            raise ValueError(f"intrinsics must be 3x4, got {p.shape}")
        if p[0, 0] <= 0 or p[1, 1] <= 0:
            raise ValueError("focal lengths must be positive")
        w, h = (int(v) for v in self.image_size)
        if w <= 0 or h <= 0:
            raise ValueError("image_size must be positive")
        p.setflags(write=False)
        object.__setattr__(self, "intrinsics", p)
        object.__setattr__(self, "image_size", (w, h))


@dataclass(frozen=True, eq=False)
class VoxelGridSpec:
    origin: tuple[float, float, float] = (0.0, -25.6, -2.0)
    voxel_size: float = 0.2
    dims: tuple[int, int, int] = (256, 256, 32)

    def __post_init__(self):
        origin = tuple(float(v) for v in self.origin)
        dims = tuple(int(v) for v in self.dims)
        if len(origin) != 3 or len(dims) != 3:
            raise ValueError("origin and dims must have 3 components")
        if not self.voxel_size > 0:
            raise ValueError("voxel_size must be positive")
        if min(dims) <= 0:
            raise ValueError("dims must be positive")
        object.__setattr__(self, "origin", origin)
        object.__setattr__(self, "dims", dims)
        object.__setattr__(self, "voxel_size", float(self.voxel_size))

    def __eq__(self, other):
        if not isinstance(other, VoxelGridSpec):
            return NotImplemented
        return (self.origin, self.voxel_size, self.dims) == (
            other.origin,
            other.voxel_size,
            other.dims,
        )

    def __hash__(self):
        return hash((self.origin, self.voxel_size, self.dims))

    @property
    def extent(self) -> np.ndarray:
        return np.asarray(self.dims) * self.voxel_size

    @property
    def n_cells(self) -> int:
        x, y, z = self.dims
        return x * y * z

    def voxel_center(self, idx) -> np.ndarray:
        idx = np.asarray(idx, dtype=np.float64)
        return np.asarray(self.origin) + (idx + 0.5) * self.voxel_size

    def to_linear(self, idx) -> np.ndarray:
        """x-fastest linear index of integer 3-indices (N, 3)."""
        idx = np.asarray(idx, dtype=np.int64).reshape(-1, 3)
        x, y, _ = self.dims
        return idx[:, 0] + x * (idx[:, 1] + y * idx[:, 2])

    def from_linear(self, lin) -> np.ndarray:
        lin = np.asarray(lin, dtype=np.int64).reshape(-1)
        x, y, _ = self.dims
        return np.stack([lin % x, (lin // x) % y, lin // (x * y)], axis=1)


@dataclass(frozen=True, eq=False)
class PointCloud:
    points: np.ndarray  # (N, 4): x, y, z, intensity

    def __post_init__(self):
        p = np.array(self.points, dtype=np.float64)
        if p.ndim == 1 and p.size == 0:
            p = p.reshape(0, 4)
        if p.ndim != 2 or p.shape[1] not in (3, 4):
            raise ValueError(f"points must be (N, 4), got {p.shape}")
        if p.shape[1] == 3:
            p = np.hstack([p, np.zeros((len(p), 1))])
        if not np.all(np.isfinite(p)):
            raise ValueError("point coordinates must be finite")
        p.setflags(write=False)
        object.__setattr__(self, "points", p)

    def __len__(self):
        return len(self.points)

    @property
    def xyz(self) -> np.ndarray:
        return self.points[:, :3]


def project_points(cloud: PointCloud, cam: CameraModel):
    """Project points into the image.

    Returns ``(point_index, u, v)`` arrays, with (u, v) the integer pixel
    each visible point falls into. Points at or behind the camera plane and
    points landing outside the image are dropped.
    """
    xyz = cloud.xyz if isinstance(cloud, PointCloud) else np.asarray(cloud, dtype=np.float64)[:, :3]
    pc = cam.cam_from_lidar.apply(xyz)
    hom = np.hstack([pc, np.ones((len(pc), 1))]) @ cam.intrinsics.T
    depth = pc[:, 2]
    front = (depth > 0) & (hom[:, 2] > 0)
    with np.errstate(divide="ignore", invalid="ignore"):
        u = hom[:, 0] / hom[:, 2]
        v = hom[:, 1] / hom[:, 2]
    w, h = cam.image_size
    keep = front & (u >= 0) & (u < w) & (v >= 0) & (v < h)
    idx = np.flatnonzero(keep)
    # floor() can still hit w for u just below w after rounding
    ui = np.minimum(np.floor(u[idx]).astype(np.int64), w - 1)
    vi = np.minimum(np.floor(v[idx]).astype(np.int64), h - 1)
    return idx, ui, vi


def voxel_indices(points, spec: VoxelGridSpec):
    """Vectorized ``voxel_index``: returns (indices (M, 3), mask of in-range rows)."""
    p = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    idx = np.floor((p - np.asarray(spec.origin)) / spec.voxel_size)
    inside = np.all((idx >= 0) & (idx < np.asarray(spec.dims)), axis=1)
    return idx[inside].astype(np.int64), inside


def voxel_index(p, spec: VoxelGridSpec):
    """Integer cell of ``p`` or None when outside the half-open volume."""
    idx, inside = voxel_indices(p, spec)
    if not inside[0]:
        return None
    return tuple(int(v) for v in idx[0])
