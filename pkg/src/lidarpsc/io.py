"""Readers and writers for scans, poses, calibration, masklets, features,
ground-truth grids and the sparse pseudo-label container.

All binary formats are little endian. Layouts:

* scan: N x (f32 x, y, z, intensity), no header
* masklet raster ``IDM1``: u32 width, u32 height, width*height u32 IDs, row
  major with u (column) fastest
* features ``FVEC``: u32 count, u32 dim, count*dim f32; instance IDs live in a
  sidecar ``<name>.ids`` holding one u32 per record
* GT grid ``CALG``: dense u16 labels, dense u16 instance IDs, packed bit
  invalid mask (LSB first); all x-fastest
* pseudo labels ``CALP``: see :func:`write_pseudo_labels`
"""

from __future__ import annotations

import json
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import CountMismatch, DanglingInstanceReference, MalformedFile
from .geom import CameraModel, PointCloud, RigidTransform, VoxelGridSpec
from .grid import FEATURE_DIM, InstanceRecord, SparseVoxelGrid, check_consistent

PROFILE_SHIFTS = {
    "semantic_kitti": (0.0, 0.0, 0.0),
    "kitti360": (0.79, 0.3, -0.25),
    "custom": (0.0, 0.0, 0.0),
}


def _read_bytes(path) -> bytes:
    try:
        with open(path, "rb") as f:
            return f.read()
    except OSError as e:
        raise MalformedFile(f"{path}: {e}") from e


def _write_bytes(path, data: bytes) -> None:
    tmp = f"{path}.tmp{os.getpid()}"
    with open(tmp, "wb") as f:
        f.write(data)
    os.replace(tmp, path)


def _f32(x: float) -> float:
    # shortest decimal that survives the f32 round trip, so 0.2 reads back as 0.2
    return float(str(np.float32(x)))


# ---------------------------------------------------------------------------
# scans, poses, calibration


def read_scan(path) -> PointCloud:
    data = _read_bytes(path)
    if len(data) % 16:
        raise MalformedFile(f"{path}: {len(data)} bytes is not a multiple of 16")
    pts = np.frombuffer(data, dtype="<f4").reshape(-1, 4)
    if not np.all(np.isfinite(pts)):
        raise MalformedFile(f"{path}: non-finite coordinates")
    return PointCloud(pts.astype(np.float64))


def write_scan(path, cloud: PointCloud) -> None:
    _write_bytes(path, np.asarray(cloud.points, dtype="<f4").tobytes())


def read_poses(path) -> list[RigidTransform]:
    poses = []
    with open(path) as f:
        for lineno, line in enumerate(f, 1):
            if not line.strip():
                continue
            try:
                vals = np.array([float(v) for v in line.split()])
            except ValueError as e:
                raise MalformedFile(f"{path}:{lineno}: {e}") from e
            if vals.size != 12:
                raise MalformedFile(f"{path}:{lineno}: expected 12 values, got {vals.size}")
            try:
                poses.append(RigidTransform.from_matrix(vals.reshape(3, 4)))
            except ValueError as e:
                raise MalformedFile(f"{path}:{lineno}: {e}") from e
    return poses


def write_poses(path, poses) -> None:
    lines = []
    for p in poses:
        m = p.matrix()[:3].reshape(-1)
        lines.append(" ".join(repr(float(v)) for v in m))
    with open(path, "w") as f:
        f.write("\n".join(lines) + "\n")


def read_calib(path) -> dict[str, np.ndarray]:
    out = {}
    with open(path) as f:
        for lineno, line in enumerate(f, 1):
            if not line.strip():
                continue
            key, sep, rest = line.partition(":")
            if not sep:
                raise MalformedFile(f"{path}:{lineno}: missing ':'")
            try:
                out[key.strip()] = np.array([float(v) for v in rest.split()])
            except ValueError as e:
                raise MalformedFile(f"{path}:{lineno}: {e}") from e
    return out


def camera_from_calib(
    calib: dict, image_size, projection_key: str = "P2", transform_key: str = "Tr"
) -> CameraModel:
    for key in (projection_key, transform_key):
        if key not in calib or calib[key].size != 12:
            raise MalformedFile(f"calibration lacks a 12-value '{key}' entry")
    return CameraModel(
        calib[projection_key].reshape(3, 4),
        RigidTransform.from_matrix(calib[transform_key].reshape(3, 4)),
        tuple(image_size),
    )


def write_calib(path, entries: dict) -> None:
    with open(path, "w") as f:
        for key, vals in entries.items():
            flat = np.asarray(vals, dtype=np.float64).reshape(-1)
            f.write(f"{key}: " + " ".join(repr(float(v)) for v in flat) + "\n")


# ---------------------------------------------------------------------------
# masklets and features


@dataclass
class MaskletFrame:
    frame_index: int
    id_raster: np.ndarray  # (height, width) uint32, 0 = background
    per_instance_feature: dict = field(default_factory=dict)

    def __post_init__(self):
        self.id_raster = np.asarray(self.id_raster, dtype=np.uint32)
        if self.id_raster.ndim != 2:
            raise ValueError("id_raster must be 2-D")
        for k, v in self.per_instance_feature.items():
            if not np.all(np.isfinite(v)):
                raise ValueError(f"feature for instance {k} is not finite")

    @property
    def size(self) -> tuple[int, int]:
        h, w = self.id_raster.shape
        return w, h


def write_masklet_raster(path, raster) -> None:
    r = np.asarray(raster, dtype="<u4")
    h, w = r.shape
    _write_bytes(path, b"IDM1" + struct.pack("<II", w, h) + r.tobytes())


def read_masklet_raster(path) -> np.ndarray:
    data = _read_bytes(path)
    if len(data) < 12 or data[:4] != b"IDM1":
        raise MalformedFile(f"{path}: bad masklet magic")
    w, h = struct.unpack_from("<II", data, 4)
    if len(data) != 12 + 4 * w * h:
        raise MalformedFile(f"{path}: expected {12 + 4 * w * h} bytes, got {len(data)}")
    return np.frombuffer(data, dtype="<u4", offset=12).reshape(h, w).astype(np.uint32)


def write_fvec(path, vectors, ids=None) -> None:
    v = np.asarray(vectors, dtype="<f4")
    if v.ndim == 1:
        v = v.reshape(1, -1)
    count, dim = v.shape
    _write_bytes(path, b"FVEC" + struct.pack("<II", count, dim) + v.tobytes())
    if ids is not None:
        ids = np.asarray(ids, dtype="<u4").reshape(-1)
        if len(ids) != count:
            raise CountMismatch(f"{len(ids)} ids for {count} vectors")
        _write_bytes(f"{path}.ids", ids.tobytes())


def _unpack_fvec(data: bytes, offset: int, where):
    if data[offset : offset + 4] != b"FVEC":
        raise MalformedFile(f"{where}: bad feature magic")
    count, dim = struct.unpack_from("<II", data, offset + 4)
    end = offset + 12 + 4 * count * dim
    if end > len(data):
        raise MalformedFile(f"{where}: truncated feature block")
    vec = np.frombuffer(data, dtype="<f4", count=count * dim, offset=offset + 12)
    return vec.reshape(count, dim), end


def read_fvec(path, normalize: bool = True, with_ids: bool = False):
    """Read an FVEC file; returns the (count, dim) array, plus sidecar IDs if asked."""
    data = _read_bytes(path)
    vec, end = _unpack_fvec(data, 0, path)
    if end != len(data):
        raise MalformedFile(f"{path}: {len(data) - end} trailing bytes")
    vec = vec.astype(np.float64)
    if not np.all(np.isfinite(vec)):
        raise MalformedFile(f"{path}: non-finite feature values")
    if normalize:
        norms = np.linalg.norm(vec, axis=1, keepdims=True)
        if np.any(norms == 0):
            raise MalformedFile(f"{path}: zero feature vector")
        vec = vec / norms
    if not with_ids:
        return vec
    raw = _read_bytes(f"{path}.ids")
    if len(raw) != 4 * len(vec):
        raise MalformedFile(f"{path}.ids: expected {len(vec)} ids")
    ids = np.frombuffer(raw, dtype="<u4").astype(np.int64)
    if len(np.unique(ids)) != len(ids):
        raise MalformedFile(f"{path}.ids: duplicate instance ids")
    return vec, ids


def frame_name(index: int) -> str:
    return f"{index:06d}"


def load_masklet_frame(masklet_dir, feature_dir, index: int) -> MaskletFrame | None:
    """Frame ``index`` of a masklet directory, or None if no raster exists for it."""
    rpath = Path(masklet_dir) / f"{frame_name(index)}.idm"
    if not rpath.exists():
        return None
    raster = read_masklet_raster(rpath)
    feats = {}
    fpath = Path(feature_dir) / f"{frame_name(index)}.fvec" if feature_dir else None
    if fpath is not None and fpath.exists():
        vec, ids = read_fvec(fpath, with_ids=True)
        feats = {int(i): v for i, v in zip(ids, vec)}
    return MaskletFrame(index, raster, feats)


def write_masklet_frame(masklet_dir, feature_dir, frame: MaskletFrame) -> None:
    write_masklet_raster(Path(masklet_dir) / f"{frame_name(frame.frame_index)}.idm", frame.id_raster)
    if frame.per_instance_feature:
        ids = sorted(frame.per_instance_feature)
        vec = np.stack([frame.per_instance_feature[i] for i in ids])
        write_fvec(Path(feature_dir) / f"{frame_name(frame.frame_index)}.fvec", vec, ids)


# ---------------------------------------------------------------------------
# sequences


@dataclass
class SequenceManifest:
    scan_paths: list
    pose_path: str
    calib_path: str
    masklet_dir: str
    feature_dir: str
    grid_spec: VoxelGridSpec = field(default_factory=VoxelGridSpec)
    alignment_shift: tuple | None = None
    dataset_profile: str = "semantic_kitti"
    image_size: tuple = (1241, 376)
    projection_key: str = "P2"
    transform_key: str = "Tr"
    tracks_path: str | None = None

    def __post_init__(self):
        if self.dataset_profile not in PROFILE_SHIFTS:
            raise ValueError(f"unknown dataset profile {self.dataset_profile!r}")
        if self.alignment_shift is None:
            self.alignment_shift = PROFILE_SHIFTS[self.dataset_profile]
        self.alignment_shift = tuple(float(v) for v in self.alignment_shift)

    @classmethod
    def load(cls, path) -> "SequenceManifest":
        """Read a JSON manifest; relative paths resolve against its directory."""
        base = Path(path).parent
        with open(path) as f:
            raw = json.load(f)

        def rel(p):
            return None if p is None else str((base / p) if not os.path.isabs(p) else Path(p))

        grid = raw.pop("grid_spec", None)
        try:
            return cls(
                scan_paths=[rel(p) for p in raw.pop("scan_paths")],
                pose_path=rel(raw.pop("pose_path")),
                calib_path=rel(raw.pop("calib_path")),
                masklet_dir=rel(raw.pop("masklet_dir")),
                feature_dir=rel(raw.pop("feature_dir")),
                tracks_path=rel(raw.pop("tracks_path", None)),
                grid_spec=VoxelGridSpec(**grid) if grid else VoxelGridSpec(),
                **raw,
            )
        except (KeyError, TypeError) as e:
            raise MalformedFile(f"{path}: bad manifest ({e})") from e

    def to_json(self) -> dict:
        g = self.grid_spec
        return {
            "scan_paths": list(map(str, self.scan_paths)),
            "pose_path": str(self.pose_path),
            "calib_path": str(self.calib_path),
            "masklet_dir": str(self.masklet_dir),
            "feature_dir": str(self.feature_dir),
            "tracks_path": None if self.tracks_path is None else str(self.tracks_path),
            "grid_spec": {"origin": list(g.origin), "voxel_size": g.voxel_size, "dims": list(g.dims)},
            "alignment_shift": list(self.alignment_shift),
            "dataset_profile": self.dataset_profile,
            "image_size": list(self.image_size),
            "projection_key": self.projection_key,
            "transform_key": self.transform_key,
        }

    def camera(self) -> CameraModel:
        return camera_from_calib(
            read_calib(self.calib_path), self.image_size, self.projection_key, self.transform_key
        )

    def poses(self) -> list[RigidTransform]:
        poses = read_poses(self.pose_path)
        if len(poses) != len(self.scan_paths):
            raise CountMismatch(f"{len(poses)} poses for {len(self.scan_paths)} scans")
        return poses

    def __len__(self):
        return len(self.scan_paths)


def load_sequence(manifest: SequenceManifest):
    """Yield ``(PointCloud, pose, MaskletFrame | None)`` per scan.

    The alignment shift is not applied here; it is applied to aggregated
    points in the reference frame right before voxelization.
    """
    poses = manifest.poses()
    for i, (scan, pose) in enumerate(zip(manifest.scan_paths, poses)):
        yield read_scan(scan), pose, load_masklet_frame(manifest.masklet_dir, manifest.feature_dir, i)


# ---------------------------------------------------------------------------
# ground truth


@dataclass(eq=False)
class GroundTruthGrid:
    labels: np.ndarray  # (X, Y, Z) uint16 class codes, 0 = empty
    instance_ids: np.ndarray  # (X, Y, Z) uint16
    invalid_mask: np.ndarray  # (X, Y, Z) bool

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.uint16)
        self.instance_ids = np.asarray(self.instance_ids, dtype=np.uint16)
        self.invalid_mask = np.asarray(self.invalid_mask, dtype=bool)
        if not (self.labels.shape == self.instance_ids.shape == self.invalid_mask.shape):
            raise ValueError("ground-truth channels differ in shape")
        if self.labels.ndim != 3:
            raise ValueError("ground-truth arrays must be 3-D")

    @classmethod
    def empty(cls, dims) -> "GroundTruthGrid":
        return cls(np.zeros(dims, np.uint16), np.zeros(dims, np.uint16), np.zeros(dims, bool))

    @property
    def dims(self):
        return self.labels.shape

    def __eq__(self, other):
        if not isinstance(other, GroundTruthGrid):
            return NotImplemented
        return (
            np.array_equal(self.labels, other.labels)
            and np.array_equal(self.instance_ids, other.instance_ids)
            and np.array_equal(self.invalid_mask, other.invalid_mask)
        )


def write_gt_grid(path, gt: GroundTruthGrid) -> None:
    lab = gt.labels.reshape(-1, order="F").astype("<u2")
    ins = gt.instance_ids.reshape(-1, order="F").astype("<u2")
    inv = np.packbits(gt.invalid_mask.reshape(-1, order="F"), bitorder="little")
    _write_bytes(path, b"CALG" + lab.tobytes() + ins.tobytes() + inv.tobytes())


def read_gt_grid(path, spec: VoxelGridSpec) -> GroundTruthGrid:
    """Read a ``CALG`` file.

    The instance and invalid channels are optional trailing blocks: a file
    may carry labels only, labels + instances, or all three.
    """
    data = _read_bytes(path)
    if data[:4] != b"CALG":
        raise MalformedFile(f"{path}: bad ground-truth magic")
    n = spec.n_cells
    nbits = (n + 7) // 8
    body = len(data) - 4
    if body not in (2 * n, 4 * n, 4 * n + nbits):
        raise MalformedFile(f"{path}: {body} payload bytes do not match grid of {n} cells")
    shape = spec.dims
    labels = np.frombuffer(data, "<u2", n, 4).reshape(shape, order="F")
    ins = np.zeros(shape, np.uint16)
    inv = np.zeros(shape, bool)
    if body >= 4 * n:
        ins = np.frombuffer(data, "<u2", n, 4 + 2 * n).reshape(shape, order="F")
    if body == 4 * n + nbits:
        bits = np.frombuffer(data, np.uint8, nbits, 4 + 4 * n)
        inv = np.unpackbits(bits, count=n, bitorder="little").astype(bool).reshape(shape, order="F")
    return GroundTruthGrid(labels.copy(), ins.copy(), inv)


# ---------------------------------------------------------------------------
# pseudo labels


def write_pseudo_labels(grid: SparseVoxelGrid, instances, path) -> None:
    """Write the ``CALP`` container.

    Layout: magic, u32 version=1, f32x3 origin, f32 voxel size, u32x3 dims,
    u32 instance count, then per instance (ascending ID) u32 id, u32 voxel
    count, f32x768 feature, count x (u16 x, y, z) in x-fastest order;
    finally u32 occupancy count and that many u32 linear cell indices.
    """
    _write_bytes(path, encode_pseudo_labels(grid, instances))


def encode_pseudo_labels(grid: SparseVoxelGrid, instances) -> bytes:
    instances = sorted(instances, key=lambda r: r.instance_id)
    known = {r.instance_id for r in instances}
    if len(known) != len(instances):
        raise DanglingInstanceReference("duplicate instance IDs in record list")
    missing = set(grid.instance_ids().tolist()) - known
    if missing:
        raise DanglingInstanceReference(f"grid references unknown instance IDs {sorted(missing)[:10]}")
    check_consistent(grid, instances)
    spec = grid.spec
    if max(spec.dims) > 65535:
        raise ValueError("CALP stores u16 voxel coordinates")
    parts = [
        b"CALP",
        struct.pack("<I", 1),
        struct.pack("<4f", *spec.origin, spec.voxel_size),
        struct.pack("<3I", *spec.dims),
        struct.pack("<I", len(instances)),
    ]
    for rec in instances:
        if rec.feature.shape != (FEATURE_DIM,):
            raise ValueError(f"CALP features must have dimension {FEATURE_DIM}")
        parts.append(struct.pack("<II", rec.instance_id, len(rec.voxels)))
        parts.append(rec.feature.astype("<f4").tobytes())
        parts.append(rec.voxels.astype("<u2").tobytes())
    parts.append(struct.pack("<I", len(grid.occupancy)))
    parts.append(grid.occupancy.astype("<u4").tobytes())
    return b"".join(parts)


def read_pseudo_labels(path):
    """Inverse of :func:`write_pseudo_labels`: returns ``(grid, instances)``."""
    data = _read_bytes(path)
    try:
        return decode_pseudo_labels(data)
    except struct.error as e:
        raise MalformedFile(f"{path}: truncated ({e})") from e


def decode_pseudo_labels(data: bytes):
    if data[:4] != b"CALP":
        raise MalformedFile("bad pseudo-label magic")
    (version,) = struct.unpack_from("<I", data, 4)
    if version != 1:
        raise MalformedFile(f"unsupported pseudo-label version {version}")
    ox, oy, oz, vs = struct.unpack_from("<4f", data, 8)
    dims = struct.unpack_from("<3I", data, 24)
    (count,) = struct.unpack_from("<I", data, 36)
    spec = VoxelGridSpec((_f32(ox), _f32(oy), _f32(oz)), _f32(vs), dims)
    off = 40
    instances, lin, ids = [], [], []
    for _ in range(count):
        iid, nvox = struct.unpack_from("<II", data, off)
        off += 8
        end = off + 4 * FEATURE_DIM + 6 * nvox
        if end > len(data):
            raise MalformedFile("truncated instance record")
        feat = np.frombuffer(data, "<f4", FEATURE_DIM, off).astype(np.float32)
        off += 4 * FEATURE_DIM
        vox = np.frombuffer(data, "<u2", 3 * nvox, off).reshape(-1, 3).astype(np.int64)
        off = end
        if np.any(vox >= np.asarray(dims)):
            raise MalformedFile(f"instance {iid} has out-of-range voxels")
        instances.append(InstanceRecord(iid, vox, feat))
        lin.append(spec.to_linear(vox))
        ids.append(np.full(nvox, iid, dtype=np.int64))
    (nocc,) = struct.unpack_from("<I", data, off)
    off += 4
    if off + 4 * nocc != len(data):
        raise MalformedFile("occupancy block length mismatch")
    occ = np.frombuffer(data, "<u4", nocc, off).astype(np.int64)
    try:
        grid = SparseVoxelGrid(
            spec,
            np.concatenate(lin) if lin else [],
            np.concatenate(ids) if ids else [],
            occ,
        )
    except ValueError as e:
        raise MalformedFile(str(e)) from e
    return grid, instances


# ---------------------------------------------------------------------------
# dynamic object tracks (JSON lines: frame, center, size, yaw in world frame)


def read_tracks(path):
    from .labeling import TrackBox

    tracks = []
    with open(path) as f:
        for lineno, line in enumerate(f, 1):
            if not line.strip():
                continue
            try:
                d = json.loads(line)
                tracks.append(TrackBox(int(d["frame"]), d["center"], d["size"], float(d["yaw"])))
            except (KeyError, ValueError, TypeError) as e:
                raise MalformedFile(f"{path}:{lineno}: {e}") from e
    return tracks


def write_tracks(path, tracks) -> None:
    with open(path, "w") as f:
        for t in tracks:
            f.write(
                json.dumps(
                    {
                        "frame": int(t.frame_index),
                        "center": [float(v) for v in t.center],
                        "size": [float(v) for v in t.size],
                        "yaw": float(t.yaw),
                    }
                )
                + "\n"
            )
