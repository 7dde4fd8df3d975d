"""Upright (z-axis aligned) 3D boxes: fitting and overlap."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from shapely.geometry import Polygon

from .errors import EmptyInput


@dataclass(frozen=True, eq=False)
class OrientedBox:
    center: np.ndarray
    size: np.ndarray  # along yaw, across yaw, height
    yaw: float

    def __post_init__(self):
        object.__setattr__(self, "center", np.asarray(self.center, dtype=np.float64).reshape(3))
        object.__setattr__(self, "size", np.asarray(self.size, dtype=np.float64).reshape(3))
        object.__setattr__(self, "yaw", float(self.yaw))
        if np.any(self.size <= 0):
            raise ValueError("box size must be positive")

    @property
    def volume(self) -> float:
        return float(np.prod(self.size))

    def corners_xy(self) -> np.ndarray:
        c, s = np.cos(self.yaw), np.sin(self.yaw)
        hx, hy = self.size[0] / 2, self.size[1] / 2
        local = np.array([[hx, hy], [-hx, hy], [-hx, -hy], [hx, -hy]])
        rot = np.array([[c, -s], [s, c]])
        return local @ rot.T + self.center[:2]

    def contains(self, points) -> np.ndarray:
        p = np.asarray(points, dtype=np.float64).reshape(-1, 3) - self.center
        c, s = np.cos(self.yaw), np.sin(self.yaw)
        lx = c * p[:, 0] + s * p[:, 1]
        ly = -s * p[:, 0] + c * p[:, 1]
        h = self.size / 2
        return (np.abs(lx) <= h[0]) & (np.abs(ly) <= h[1]) & (np.abs(p[:, 2]) <= h[2])

    def to_json(self) -> dict:
        return {
            "center": [float(v) for v in self.center],
            "size": [float(v) for v in self.size],
            "yaw": self.yaw,
        }


def convex_hull(points) -> np.ndarray:
    """Counter-clockwise hull of 2D points (monotone chain), collinear points dropped.

    Degenerate inputs return 1 or 2 vertices.
    """
    pts = np.unique(np.asarray(points, dtype=np.float64).reshape(-1, 2), axis=0)
    if len(pts) <= 2:
        return pts

    def half(seq):
        out = []
        for p in seq:
            while len(out) >= 2:
                (ax, ay), (bx, by) = out[-2], out[-1]
                if (bx - ax) * (p[1] - ay) - (by - ay) * (p[0] - ax) <= 0:
                    out.pop()
                else:
                    break
            out.append(p)
        return out

    pl = pts.tolist()
    lower = half(pl)
    upper = half(reversed(pl))
    return np.array(lower[:-1] + upper[:-1])


def _extreme_candidates(xy: np.ndarray) -> np.ndarray:
    # hull vertices of a large point set are among the per-x min/max y points
    if len(xy) < 64:
        return xy
    order = np.lexsort((xy[:, 1], xy[:, 0]))
    s = xy[order]
    first = np.r_[True, s[1:, 0] != s[:-1, 0]]
    last = np.r_[s[1:, 0] != s[:-1, 0], True]
    return np.concatenate([s[first], s[last]])


def min_area_rect(xy):
    """Minimum-area enclosing rectangle of 2D points via rotating calipers.

    Returns ``(center (2,), size (2,), angle)`` where ``size[0]`` is the
    extent along ``angle`` and angle lies in [0, pi/2). Ties between equally
    small rectangles go to the smallest angle.
    """
    xy = np.asarray(xy, dtype=np.float64).reshape(-1, 2)
    if len(xy) == 0:
        raise EmptyInput("no points")
    hull = convex_hull(_extreme_candidates(xy))
    if len(hull) == 1:
        return hull[0].copy(), np.zeros(2), 0.0
    edges = np.roll(hull, -1, axis=0) - hull
    angles = np.mod(np.arctan2(edges[:, 1], edges[:, 0]), np.pi / 2)
    angles = np.unique(np.round(angles, 12))
    angles = np.where(angles >= np.pi / 2, 0.0, angles)
    c, s = np.cos(angles), np.sin(angles)
    # projections of every hull vertex on each candidate axis pair
    u = hull[:, 0][None, :] * c[:, None] + hull[:, 1][None, :] * s[:, None]
    v = -hull[:, 0][None, :] * s[:, None] + hull[:, 1][None, :] * c[:, None]
    du = u.max(1) - u.min(1)
    dv = v.max(1) - v.min(1)
    area = du * dv
    best = np.flatnonzero(area <= area.min() * (1 + 1e-12) + 1e-15)
    k = best[np.argmin(angles[best])]
    a = float(angles[k])
    cu = (u[k].max() + u[k].min()) / 2
    cv = (v[k].max() + v[k].min()) / 2
    center = np.array([cu * np.cos(a) - cv * np.sin(a), cu * np.sin(a) + cv * np.cos(a)])
    return center, np.array([du[k], dv[k]]), a


def _canonical_yaw(size_xy, angle):
    """Long side first, yaw in [-pi/2, pi/2)."""
    sx, sy = size_xy
    if sy > sx * (1 + 1e-12):
        sx, sy = sy, sx
        angle = angle + np.pi / 2
    yaw = (angle + np.pi / 2) % np.pi - np.pi / 2
    return np.array([sx, sy]), float(yaw)


def fit_upright_box(points, pad: float = 0.0) -> OrientedBox:
    """Upright box around 3D points: min-area footprint, [min z, max z] height.

    ``pad`` is added to every side length (voxel size when fitting voxel centers).
    """
    p = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    if len(p) == 0:
        raise EmptyInput("cannot fit a box to zero points")
    center_xy, size_xy, angle = min_area_rect(p[:, :2])
    size_xy, yaw = _canonical_yaw(size_xy, angle)
    zmin, zmax = p[:, 2].min(), p[:, 2].max()
    size = np.array([size_xy[0], size_xy[1], zmax - zmin]) + pad
    # footprint of a degenerate point set still needs positive size for IoU
    size = np.maximum(size, 1e-6)
    return OrientedBox(np.array([center_xy[0], center_xy[1], (zmin + zmax) / 2]), size, yaw)


def box_iou_3d(a: OrientedBox, b: OrientedBox) -> float:
    pa, pb = Polygon(a.corners_xy()), Polygon(b.corners_xy())
    inter_xy = pa.intersection(pb).area
    za = (a.center[2] - a.size[2] / 2, a.center[2] + a.size[2] / 2)
    zb = (b.center[2] - b.size[2] / 2, b.center[2] + b.size[2] / 2)
    dz = max(0.0, min(za[1], zb[1]) - max(za[0], zb[0]))
    inter = inter_xy * dz
    union = a.volume + b.volume - inter
    return float(inter / union) if union > 0 else 0.0
