"""Pseudo-label geometry: lift 2D masklets onto Lidar points, clean them up in
3D, aggregate over a temporal window and voxelize."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import connected_components
from scipy.spatial import cKDTree

from .boxes import OrientedBox, box_iou_3d, fit_upright_box
from .errors import DegenerateInput, SizeMismatch
from .geom import CameraModel, PointCloud, RigidTransform, VoxelGridSpec, project_points, voxel_indices
from .grid import SparseVoxelGrid
from .io import MaskletFrame

DBSCAN_EPS = (1.2488, 0.8136, 0.6952, 0.594, 0.4353, 0.3221)


@dataclass(frozen=True)
class WindowConfig:
    """Frame counts for masklet propagation and occupancy accumulation."""

    t_fw: int = 32
    t_bw: int = 8
    stride: int = 2
    occ_fw: int = 72
    occ_bw: int = 1
    occ_stride: int = 1

    def __post_init__(self):
        if min(self.t_fw, self.t_bw, self.occ_fw, self.occ_bw) < 0:
            raise ValueError("window sizes must be non-negative")
        if self.stride < 1 or self.occ_stride < 1:
            raise ValueError("strides must be >= 1")

    def label_frames(self, t: int, n_frames: int) -> list[int]:
        lo, hi = t - self.t_bw * self.stride, t + self.t_fw * self.stride
        return [i for i in range(lo, hi + 1, self.stride) if 0 <= i < n_frames]

    def occupancy_frames(self, t: int, n_frames: int) -> list[int]:
        lo, hi = t - self.occ_bw * self.occ_stride, t + self.occ_fw * self.occ_stride
        return [i for i in range(lo, hi + 1, self.occ_stride) if 0 <= i < n_frames]


@dataclass
class LabeledPoints:
    points: np.ndarray  # (N, 3)
    instance_id: np.ndarray  # (N,) uint32, 0 = unlabelled
    source_frame: np.ndarray  # (N,) uint32

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64).reshape(-1, 3)
        self.instance_id = np.asarray(self.instance_id, dtype=np.uint32).reshape(-1)
        self.source_frame = np.asarray(self.source_frame, dtype=np.uint32).reshape(-1)
        if not (len(self.points) == len(self.instance_id) == len(self.source_frame)):
            raise ValueError("LabeledPoints arrays differ in length")

    def __len__(self):
        return len(self.points)

    @classmethod
    def empty(cls) -> "LabeledPoints":
        return cls(np.zeros((0, 3)), [], [])

    def select(self, mask) -> "LabeledPoints":
        return LabeledPoints(self.points[mask], self.instance_id[mask], self.source_frame[mask])


@dataclass(frozen=True, eq=False)
class TrackBox:
    frame_index: int
    center: np.ndarray
    size: np.ndarray
    yaw: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "center", np.asarray(self.center, dtype=np.float64).reshape(3))
        object.__setattr__(self, "size", np.asarray(self.size, dtype=np.float64).reshape(3))
        if np.any(self.size <= 0):
            raise ValueError("track box size must be positive")

    def box(self) -> OrientedBox:
        return OrientedBox(self.center, self.size, self.yaw)


# ---------------------------------------------------------------------------
# lifting


def lift_mask(frame: MaskletFrame, cloud: PointCloud, cam: CameraModel) -> np.ndarray:
    """Per-point instance IDs read from the raster pixel each point projects to."""
    if frame.size != cam.image_size:
        raise SizeMismatch(f"raster {frame.size} does not match camera image {cam.image_size}")
    ids = np.zeros(len(cloud), dtype=np.uint32)
    idx, u, v = project_points(cloud, cam)
    ids[idx] = frame.id_raster[v, u]
    return ids


# ---------------------------------------------------------------------------
# ground plane


def fit_ground_plane(
    cloud,
    threshold: float = 0.2,
    iterations: int = 200,
    seed: int = 0,
    max_tilt_deg: float | None = 30.0,
):
    """RANSAC plane ``normal . p = offset`` with the normal pointing to +z.

    Candidate planes tilted more than ``max_tilt_deg`` from horizontal are
    rejected. The winning hypothesis is refined by least squares on its
    inliers. Returns ``(normal, offset, inlier_mask)``.
    """
    xyz = cloud.xyz if isinstance(cloud, PointCloud) else np.asarray(cloud, dtype=np.float64)[:, :3]
    n = len(xyz)
    if n < 3:
        raise DegenerateInput("need at least 3 points for a plane")
    centered = xyz - xyz.mean(0)
    sv = np.linalg.svd(centered, compute_uv=False)
    scale = max(sv[0], 1e-12)
    if sv[1] / scale < 1e-9:
        raise DegenerateInput("points are collinear")
    min_nz = np.cos(np.deg2rad(max_tilt_deg)) if max_tilt_deg is not None else -1.0

    rng = np.random.default_rng(seed)
    best_count, best = -1, None
    for _ in range(iterations):
        a, b, c = xyz[rng.choice(n, 3, replace=False)]
        normal = np.cross(b - a, c - a)
        norm = np.linalg.norm(normal)
        if norm < 1e-12 * scale**2:
            continue
        normal /= norm
        if normal[2] < 0:
            normal = -normal
        if normal[2] < min_nz:
            continue
        offset = normal @ a
        count = int(np.count_nonzero(np.abs(xyz @ normal - offset) <= threshold))
        if count > best_count:
            best_count, best = count, (normal, offset)
    if best is None:
        raise DegenerateInput("no admissible plane hypothesis")

    normal, offset = best
    inliers = np.abs(xyz @ normal - offset) <= threshold
    pts = xyz[inliers]
    if len(pts) >= 3:
        c0 = pts.mean(0)
        _, s, vt = np.linalg.svd(pts - c0, full_matrices=False)
        if s[1] > 1e-12 * max(s[0], 1e-12):
            refined = vt[2] if vt[2][2] >= 0 else -vt[2]
            if refined[2] >= min_nz:
                normal, offset = refined, float(refined @ c0)
                inliers = np.abs(xyz @ normal - offset) <= threshold
    return normal, float(offset), inliers


# ---------------------------------------------------------------------------
# DBSCAN


def dbscan(xyz, eps: float, min_pts: int = 5) -> np.ndarray:
    """Density clustering; returns labels with -1 for noise.

    A point is core if at least ``min_pts`` points (itself included) lie
    within ``eps``. Clusters are connected components of core points; a
    border point joins the cluster of its nearest core neighbour (lowest
    index on ties). Clusters are numbered by their smallest point index, so
    the output does not depend on processing order.
    """
    xyz = np.asarray(xyz, dtype=np.float64).reshape(-1, 3)
    n = len(xyz)
    labels = np.full(n, -1, dtype=np.int64)
    if n == 0:
        return labels
    tree = cKDTree(xyz)
    counts = tree.query_ball_point(xyz, eps, return_length=True)
    core = np.flatnonzero(counts >= min_pts)
    if len(core) == 0:
        return labels
    ctree = cKDTree(xyz[core])
    pairs = ctree.query_pairs(eps, output_type="ndarray")
    g = coo_matrix(
        (np.ones(len(pairs), dtype=np.int8), (pairs[:, 0], pairs[:, 1])), shape=(len(core), len(core))
    )
    _, comp = connected_components(g, directed=False)
    labels[core] = comp

    is_core = np.zeros(n, dtype=bool)
    is_core[core] = True
    others = np.flatnonzero(~is_core)
    if len(others):
        neigh = ctree.query_ball_point(xyz[others], eps)
        for i, nb in zip(others, neigh):
            if nb:
                nb = np.sort(np.asarray(nb))
                d = np.linalg.norm(xyz[core[nb]] - xyz[i], axis=1)
                labels[i] = comp[nb[np.argmin(d)]]

    # renumber clusters by first occurrence
    valid = labels >= 0
    _, first, inv = np.unique(labels[valid], return_index=True, return_inverse=True)
    rank = np.argsort(np.argsort(first))
    labels[valid] = rank[inv]
    return labels


def best_cluster_iou(mask: np.ndarray, labels: np.ndarray):
    """(cluster label, IoU) of the cluster best overlapping a boolean point mask."""
    valid = labels >= 0
    if not np.any(valid) or not np.any(mask):
        return -1, 0.0
    k = labels.max() + 1
    inter = np.bincount(labels[mask & valid], minlength=k)
    size = np.bincount(labels[valid], minlength=k)
    iou = inter / (mask.sum() + size - inter)
    best = int(np.argmax(iou))
    return best, float(iou[best])


def dbscan_refine(
    cloud,
    ids,
    eps_list=DBSCAN_EPS,
    min_pts: int = 5,
    iou_thresh: float = 0.5,
    return_replaced: bool = False,
):
    """Replace each instance's points with its best-matching DBSCAN cluster.

    For every ε the best cluster (point IoU) is found; the ε with the
    highest IoU wins (earlier ε on ties) and the replacement happens when
    that IoU is at least ``iou_thresh``. When clusters of different
    instances overlap, higher-IoU replacements claim the shared points.
    Ground points are expected to be removed beforehand. With
    ``return_replaced`` the set of replaced instance IDs is returned too.
    """
    xyz = cloud.xyz if isinstance(cloud, PointCloud) else np.asarray(cloud, dtype=np.float64)[:, :3]
    ids = np.asarray(ids, dtype=np.uint32)
    out = ids.copy()
    inst = np.unique(ids[ids > 0])
    if len(inst) == 0 or len(xyz) == 0:
        return (out, set()) if return_replaced else out
    clusterings = [dbscan(xyz, eps, min_pts) for eps in eps_list]
    replacements = []
    for k in inst:
        mask = ids == k
        best = (0.0, None)
        for labels in clusterings:
            c, iou = best_cluster_iou(mask, labels)
            if c >= 0 and iou > best[0]:
                best = (iou, labels == c)
        if best[1] is not None and best[0] >= iou_thresh:
            replacements.append((best[0], int(k), best[1]))
    replacements.sort(key=lambda r: (-r[0], r[1]))
    claimed = np.zeros(len(xyz), dtype=bool)
    for _, k, _ in replacements:
        out[out == k] = 0
    for _, k, members in replacements:
        take = members & ~claimed
        out[take] = k
        claimed |= take
    if return_replaced:
        return out, {k for _, k, _ in replacements}
    return out


# ---------------------------------------------------------------------------
# dynamic objects


def filter_dynamic(per_frame_instances: dict, tracks, overlap_thresh: float = 0.5) -> set:
    """IDs of instances whose fitted box overlaps a dynamic track box.

    ``per_frame_instances`` maps frame index to ``{instance_id: (N, 3)
    points}`` in the same coordinate frame as the tracks. One hit in any
    frame discards the instance everywhere.
    """
    by_frame: dict[int, list] = {}
    for t in tracks:
        by_frame.setdefault(int(t.frame_index), []).append(t.box())
    discard = set()
    for frame, instances in sorted(per_frame_instances.items()):
        boxes = by_frame.get(int(frame))
        if not boxes:
            continue
        for iid, pts in sorted(instances.items()):
            if iid in discard or len(pts) == 0:
                continue
            fitted = fit_upright_box(pts)
            if any(box_iou_3d(fitted, b) >= overlap_thresh for b in boxes):
                discard.add(int(iid))
    return discard


# ---------------------------------------------------------------------------
# aggregation and voxelization


def aggregate_window(
    frames,
    poses,
    ref_pose: RigidTransform,
    alignment_shift=(0.0, 0.0, 0.0),
    discard=(),
) -> LabeledPoints:
    """Bring per-frame labelled points (sensor coordinates) into the reference frame.

    ``frames`` is a sequence of LabeledPoints whose ``source_frame`` is the
    frame index, ``poses`` maps frame index to its world-from-sensor pose.
    Output keeps frame order, then point order.
    """
    ref_inv = ref_pose.inverse()
    shift = np.asarray(alignment_shift, dtype=np.float64)
    discard = np.asarray(sorted(discard), dtype=np.int64)
    parts = []
    for lp in sorted(frames, key=lambda f: int(f.source_frame[0]) if len(f) else -1):
        if len(lp) == 0:
            continue
        frame = int(lp.source_frame[0])
        keep = ~np.isin(lp.instance_id, discard) if len(discard) else np.ones(len(lp), bool)
        sel = lp.select(keep)
        rel = ref_inv @ poses[frame]
        parts.append(LabeledPoints(rel.apply(sel.points) + shift, sel.instance_id, sel.source_frame))
    if not parts:
        return LabeledPoints.empty()
    return LabeledPoints(
        np.concatenate([p.points for p in parts]),
        np.concatenate([p.instance_id for p in parts]),
        np.concatenate([p.source_frame for p in parts]),
    )


def accumulate_occupancy(
    scans, poses, ref_pose: RigidTransform, spec: VoxelGridSpec, alignment_shift=(0.0, 0.0, 0.0)
) -> np.ndarray:
    """Sorted linear indices of every cell hit by any point of the given scans.

    ``scans`` maps (or pairs) frame index to a PointCloud.
    """
    ref_inv = ref_pose.inverse()
    shift = np.asarray(alignment_shift, dtype=np.float64)
    items = scans.items() if isinstance(scans, dict) else scans
    cells = []
    for frame, cloud in items:
        xyz = (ref_inv @ poses[frame]).apply(cloud.xyz) + shift
        idx, _ = voxel_indices(xyz, spec)
        cells.append(np.unique(spec.to_linear(idx)))
    if not cells:
        return np.zeros(0, dtype=np.int64)
    return np.unique(np.concatenate(cells))


def voxelize_majority(points: LabeledPoints, spec: VoxelGridSpec) -> SparseVoxelGrid:
    """Majority vote of nonzero instance IDs per cell, ties to the smallest ID.

    Every cell holding any point (labelled or not) enters the occupancy.
    """
    idx, inside = voxel_indices(points.points, spec)
    lin = spec.to_linear(idx)
    ids = points.instance_id[inside].astype(np.int64)
    occupancy = np.unique(lin)
    lab = ids > 0
    if not np.any(lab):
        return SparseVoxelGrid(spec, [], [], occupancy)
    pairs, counts = np.unique(np.stack([lin[lab], ids[lab]], axis=1), axis=0, return_counts=True)
    # sort by cell, then count descending, then ID ascending
    order = np.lexsort((pairs[:, 1], -counts, pairs[:, 0]))
    pairs = pairs[order]
    first = np.r_[True, pairs[1:, 0] != pairs[:-1, 0]]
    return SparseVoxelGrid(spec, pairs[first, 0], pairs[first, 1], occupancy)


def fuse(labels: SparseVoxelGrid, occupancy) -> SparseVoxelGrid:
    """Union the occupancy with the label support; labels are untouched."""
    if isinstance(occupancy, SparseVoxelGrid):
        if occupancy.spec != labels.spec:
            raise ValueError("grid specs differ")
        occupancy = occupancy.occupancy
    occ = np.unique(
        np.concatenate(
            [labels.occupancy, labels.label_index, np.asarray(occupancy, dtype=np.int64).reshape(-1)]
        )
    )
    return SparseVoxelGrid(labels.spec, labels.label_index, labels.label_ids, occ)
