"""A small ray-cast driving scene with everything the pipeline consumes.

The ego vehicle drives along +x past three thin static walls and a car
that overtakes on the left lane. Lidar returns and camera masklets are both
ray cast against the same geometry, so 2D masks, 3D points and the analytic
voxelization agree by construction. Objects float slightly above the
ground so RANSAC does not swallow their lowest rows.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .geom import PointCloud, RigidTransform, VoxelGridSpec
from .grid import FEATURE_DIM
from .io import (
    GroundTruthGrid,
    MaskletFrame,
    SequenceManifest,
    frame_name,
    write_calib,
    write_fvec,
    write_gt_grid,
    write_masklet_frame,
    write_poses,
    write_scan,
    write_tracks,
)
from .labeling import TrackBox

GROUND_Z = -1.95
ROAD_ID = 50
CAR_ID = 4


@dataclass(frozen=True)
class SceneObject:
    instance_id: int
    class_name: str
    lo: tuple
    hi: tuple


STATIC_OBJECTS = (
    SceneObject(1, "building", (10.05, 6.05, -1.65), (11.95, 6.15, -0.35)),
    SceneObject(2, "fence", (20.05, -6.15, -1.65), (21.95, -6.05, -0.35)),
    SceneObject(3, "vegetation", (30.05, 6.05, -1.65), (31.95, 6.15, -0.35)),
)
CAR_SIZE = (3.0, 1.6, 1.4)
CLASSES = (("building", False), ("fence", False), ("vegetation", False), ("car", True), ("road", False))
INSTANCE_CLASSES = {o.instance_id: o.class_name for o in STATIC_OBJECTS} | {CAR_ID: "car", ROAD_ID: "road"}


@dataclass
class SceneParams:
    n_frames: int = 89
    reference: int = 16
    ego_speed: float = 0.5
    car_speed: float = 0.8
    car_y: float = -2.5
    beams: int = 32
    azimuths: int = 720
    max_range: float = 40.0
    image_size: tuple = (240, 96)
    focal: float = 120.0
    feature_noise: float = 0.5
    prompt_noise: float = 0.3
    prompts_per_class: int = 3
    seed: int = 0


@dataclass
class SyntheticScene:
    root: Path
    manifest_path: Path
    vocabulary_path: Path
    gt_path: Path
    params: SceneParams
    spec: VoxelGridSpec = field(default_factory=VoxelGridSpec)

    def manifest(self) -> SequenceManifest:
        return SequenceManifest.load(self.manifest_path)

    def analytic_voxels(self, obj: SceneObject) -> np.ndarray:
        return analytic_voxels(obj, self.spec)


def ego_pose(i: int, p: SceneParams) -> RigidTransform:
    """World-from-sensor; the reference frame sits at the world origin."""
    s = i - p.reference
    return RigidTransform.rot_z(0.03 * np.sin(s / 8.0), (s * p.ego_speed, 0.0, 0.0))


def car_box(i: int, p: SceneParams) -> tuple[np.ndarray, np.ndarray]:
    x = 8.0 + p.car_speed * (i - p.reference)
    center = np.array([x, p.car_y, -0.95])
    half = np.asarray(CAR_SIZE) / 2
    return center - half, center + half


def camera_matrices(p: SceneParams):
    w, h = p.image_size
    k = np.array([[p.focal, 0, w / 2, 0], [0, p.focal, h / 2, 0], [0, 0, 1, 0]], dtype=np.float64)
    rot = np.array([[0.0, -1.0, 0.0], [0.0, 0.0, -1.0], [1.0, 0.0, 0.0]])
    cam_from_lidar = RigidTransform(rot, np.array([0.0, 0.08, -0.27]))
    return k, cam_from_lidar


def _cast(origin, dirs, boxes, max_range):
    """Nearest hit of each ray against the ground and axis-aligned boxes.

    Returns (distance, hit id); distance is inf and id 0 on a miss.
    """
    origin = np.broadcast_to(np.asarray(origin, dtype=np.float64), dirs.shape)
    best = np.full(len(dirs), np.inf)
    hit = np.zeros(len(dirs), dtype=np.uint32)
    with np.errstate(divide="ignore", invalid="ignore"):
        tg = (GROUND_Z - origin[:, 2]) / dirs[:, 2]
        ok = (tg > 0) & (tg < best)
        best[ok], hit[ok] = tg[ok], ROAD_ID
        for lo, hi, iid in boxes:
            t1 = (np.asarray(lo) - origin) / dirs
            t2 = (np.asarray(hi) - origin) / dirs
            tmin = np.nanmax(np.minimum(t1, t2), axis=1)
            tmax = np.nanmin(np.maximum(t1, t2), axis=1)
            ok = (tmax >= tmin) & (tmin > 0) & (tmin < best)
            best[ok], hit[ok] = tmin[ok], iid
    miss = best > max_range
    best[miss], hit[miss] = np.inf, 0
    return best, hit


def _scene_boxes(i: int, p: SceneParams):
    lo, hi = car_box(i, p)
    return [(o.lo, o.hi, o.instance_id) for o in STATIC_OBJECTS] + [(lo, hi, CAR_ID)]


def lidar_scan(i: int, p: SceneParams) -> PointCloud:
    pose = ego_pose(i, p)
    el = np.deg2rad(np.linspace(-24.0, 2.0, p.beams))
    az = np.linspace(-np.pi, np.pi, p.azimuths, endpoint=False)
    e, a = np.meshgrid(el, az, indexing="ij")
    dirs = np.stack([np.cos(e) * np.cos(a), np.cos(e) * np.sin(a), np.sin(e)], axis=-1).reshape(-1, 3)
    world_dirs = dirs @ pose.rotation.T
    t, _ = _cast(pose.translation, world_dirs, _scene_boxes(i, p), p.max_range)
    ok = np.isfinite(t)
    xyz = dirs[ok] * t[ok, None]
    return PointCloud(np.hstack([xyz, np.full((len(xyz), 1), 0.5)]))


def camera_raster(i: int, p: SceneParams) -> np.ndarray:
    pose = ego_pose(i, p)
    k, cam = camera_matrices(p)
    w, h = p.image_size
    u, v = np.meshgrid(np.arange(w) + 0.5, np.arange(h) + 0.5)
    d_cam = np.stack([(u - k[0, 2]) / k[0, 0], (v - k[1, 2]) / k[1, 1], np.ones_like(u)], axis=-1).reshape(-1, 3)
    lidar_from_cam = cam.inverse()
    origin = pose.apply(lidar_from_cam.translation[None])[0]
    dirs = d_cam @ (pose.rotation @ lidar_from_cam.rotation).T
    _, hit = _cast(origin, dirs, _scene_boxes(i, p), p.max_range)
    return hit.reshape(h, w)


def class_anchors(seed: int) -> dict[str, np.ndarray]:
    rng = np.random.default_rng(seed)
    out = {}
    for name, _ in CLASSES:
        v = rng.standard_normal(FEATURE_DIM)
        out[name] = v / np.linalg.norm(v)
    return out


def _noisy(anchor, scale, rng):
    v = anchor + scale * rng.standard_normal(len(anchor)) / np.sqrt(len(anchor))
    return v / np.linalg.norm(v)


def analytic_voxels(obj: SceneObject, spec: VoxelGridSpec) -> np.ndarray:
    """Sorted linear indices of cells whose centers fall inside the object."""
    lo = np.ceil((np.asarray(obj.lo) - spec.origin) / spec.voxel_size - 0.5).astype(int)
    hi = np.floor((np.asarray(obj.hi) - spec.origin) / spec.voxel_size - 0.5).astype(int)
    axes = [np.arange(max(a, 0), min(b, d - 1) + 1) for a, b, d in zip(lo, hi, spec.dims)]
    grid = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, 3)
    return np.sort(spec.to_linear(grid))


def ground_truth(p: SceneParams, spec: VoxelGridSpec) -> GroundTruthGrid:
    """Class codes follow CLASSES order (1-based); the car keeps its instance ID."""
    gt = GroundTruthGrid.empty(spec.dims)
    codes = {name: k + 1 for k, (name, _) in enumerate(CLASSES)}
    z0 = int((GROUND_Z - spec.origin[2]) // spec.voxel_size)
    gt.labels[:, :, z0] = codes["road"]
    for obj in STATIC_OBJECTS:
        ijk = spec.from_linear(analytic_voxels(obj, spec))
        gt.labels[ijk[:, 0], ijk[:, 1], ijk[:, 2]] = codes[obj.class_name]
    lo, hi = car_box(p.reference, p)
    car = SceneObject(CAR_ID, "car", tuple(lo), tuple(hi))
    ijk = spec.from_linear(analytic_voxels(car, spec))
    gt.labels[ijk[:, 0], ijk[:, 1], ijk[:, 2]] = codes["car"]
    gt.instance_ids[ijk[:, 0], ijk[:, 1], ijk[:, 2]] = CAR_ID
    return gt


def write_scene(root, params: SceneParams | None = None, dataset_profile: str = "semantic_kitti") -> SyntheticScene:
    """Generate and write the whole sequence under ``root``."""
    p = params or SceneParams()
    root = Path(root)
    for sub in ("scans", "masklets", "features", "vocab"):
        (root / sub).mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(p.seed + 1)
    anchors = class_anchors(p.seed)

    k, cam = camera_matrices(p)
    write_calib(root / "calib.txt", {"P2": k, "Tr": cam.matrix()[:3]})
    poses = [ego_pose(i, p) for i in range(p.n_frames)]
    write_poses(root / "poses.txt", poses)

    tracks = []
    for i in range(p.n_frames):
        write_scan(root / "scans" / f"{frame_name(i)}.bin", lidar_scan(i, p))
        raster = camera_raster(i, p)
        feats = {int(iid): _noisy(anchors[INSTANCE_CLASSES[int(iid)]], p.feature_noise, rng) for iid in np.unique(raster) if iid}
        write_masklet_frame(root / "masklets", root / "features", MaskletFrame(i, raster, feats))
        lo, hi = car_box(i, p)
        tracks.append(TrackBox(i, (lo + hi) / 2, CAR_SIZE, 0.0))
    write_tracks(root / "tracks.jsonl", tracks)

    classes = []
    for name, is_thing in CLASSES:
        prompts = np.stack([_noisy(anchors[name], p.prompt_noise, rng) for _ in range(p.prompts_per_class)])
        write_fvec(root / "vocab" / f"{name}.fvec", prompts)
        classes.append({"name": name, "kind": "thing" if is_thing else "stuff", "prompt_files": [f"{name}.fvec"]})
    with open(root / "vocab" / "vocab.json", "w") as f:
        json.dump({"classes": classes}, f, indent=1)

    spec = VoxelGridSpec()
    write_gt_grid(root / "gt.bin", ground_truth(p, spec))

    manifest = SequenceManifest(
        scan_paths=[f"scans/{frame_name(i)}.bin" for i in range(p.n_frames)],
        pose_path="poses.txt",
        calib_path="calib.txt",
        masklet_dir="masklets",
        feature_dir="features",
        tracks_path="tracks.jsonl",
        dataset_profile=dataset_profile,
        image_size=p.image_size,
        alignment_shift=(0.0, 0.0, 0.0),  # synthetic lidar and ground truth share one frame
    )
    with open(root / "manifest.json", "w") as f:
        json.dump(manifest.to_json(), f, indent=1)
    return SyntheticScene(root, root / "manifest.json", root / "vocab" / "vocab.json", root / "gt.bin", p, spec)
