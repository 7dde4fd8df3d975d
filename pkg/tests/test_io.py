import json
import struct

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from lidarpsc.errors import CountMismatch, DanglingInstanceReference, MalformedFile, SizeMismatch
from lidarpsc.geom import PointCloud, RigidTransform, VoxelGridSpec
from lidarpsc.grid import FEATURE_DIM, InstanceRecord, SparseVoxelGrid
from lidarpsc.io import (
    GroundTruthGrid,
    MaskletFrame,
    SequenceManifest,
    camera_from_calib,
    decode_pseudo_labels,
    encode_pseudo_labels,
    load_masklet_frame,
    load_sequence,
    read_calib,
    read_fvec,
    read_gt_grid,
    read_masklet_raster,
    read_poses,
    read_pseudo_labels,
    read_scan,
    read_tracks,
    write_calib,
    write_fvec,
    write_gt_grid,
    write_masklet_frame,
    write_masklet_raster,
    write_poses,
    write_pseudo_labels,
    write_scan,
    write_tracks,
)
from lidarpsc.labeling import TrackBox

SMALL = VoxelGridSpec((0.0, 0.0, 0.0), 0.5, (6, 5, 4))


def unit(rng, n=FEATURE_DIM):
    v = rng.standard_normal(n)
    return v / np.linalg.norm(v)


# -- scans, poses, calibration --------------------------------------------------


def test_two_point_scan_is_32_bytes(tmp_path):
    pts = np.array([[1, 2, 3, 0.5], [4, 5, 6, 0.25]], dtype="<f4")
    (tmp_path / "a.bin").write_bytes(pts.tobytes())
    cloud = read_scan(tmp_path / "a.bin")
    assert len(cloud) == 2
    np.testing.assert_array_equal(cloud.points, pts.astype(np.float64))


def test_truncated_scan_is_malformed(tmp_path):
    (tmp_path / "a.bin").write_bytes(b"\0" * 17)
    with pytest.raises(MalformedFile):
        read_scan(tmp_path / "a.bin")


def test_missing_scan_is_malformed(tmp_path):
    with pytest.raises(MalformedFile):
        read_scan(tmp_path / "nope.bin")


@given(hnp.arrays(np.float32, st.tuples(st.integers(0, 40), st.just(4)), elements=st.floats(-100, 100, width=32)))
def test_scan_round_trip(tmp_path_factory, pts):
    path = tmp_path_factory.mktemp("scan") / "s.bin"
    write_scan(path, PointCloud(pts.astype(np.float64)))
    np.testing.assert_array_equal(read_scan(path).points, pts.astype(np.float64))


def test_identity_pose_line(tmp_path):
    (tmp_path / "p.txt").write_text("1 0 0 0 0 1 0 0 0 0 1 0\n")
    (pose,) = read_poses(tmp_path / "p.txt")
    assert pose == RigidTransform.identity()


def test_pose_round_trip_and_errors(tmp_path):
    poses = [RigidTransform.rot_z(a, (a, -a, 2 * a)) for a in np.linspace(0, 3, 5)]
    write_poses(tmp_path / "p.txt", poses)
    back = read_poses(tmp_path / "p.txt")
    assert all(a.allclose(b, atol=1e-12) for a, b in zip(poses, back))
    (tmp_path / "bad.txt").write_text("1 0 0 0 0 1 0 0 0 0 1\n")
    with pytest.raises(MalformedFile):
        read_poses(tmp_path / "bad.txt")
    (tmp_path / "bad2.txt").write_text("1 0 0 0 0 1 0 0 0 0 x 0\n")
    with pytest.raises(MalformedFile):
        read_poses(tmp_path / "bad2.txt")


def test_calibration_to_camera(tmp_path):
    k = np.array([[700.0, 0, 600, 45], [0, 700, 180, -0.3], [0, 0, 1, 0.005]])
    tr = RigidTransform.rot_z(0.1, (0.2, -0.1, 0.3))
    write_calib(tmp_path / "c.txt", {"P0": np.eye(3, 4), "P2": k, "Tr": tr.matrix()[:3]})
    calib = read_calib(tmp_path / "c.txt")
    cam = camera_from_calib(calib, (1241, 376))
    np.testing.assert_array_equal(cam.intrinsics, k)
    assert cam.cam_from_lidar.allclose(tr, atol=1e-12)
    with pytest.raises(MalformedFile):
        camera_from_calib(calib, (1241, 376), projection_key="P3")
    (tmp_path / "bad.txt").write_text("P2 1 2 3\n")
    with pytest.raises(MalformedFile):
        read_calib(tmp_path / "bad.txt")


# -- masklets and features -----------------------------------------------------


@given(hnp.arrays(np.uint32, st.tuples(st.integers(1, 12), st.integers(1, 12))))
def test_masklet_raster_round_trip(tmp_path_factory, raster):
    path = tmp_path_factory.mktemp("idm") / "r.idm"
    write_masklet_raster(path, raster)
    data = path.read_bytes()
    assert data[:4] == b"IDM1"
    assert struct.unpack_from("<II", data, 4) == (raster.shape[1], raster.shape[0])
    np.testing.assert_array_equal(read_masklet_raster(path), raster)


def test_masklet_raster_errors(tmp_path):
    (tmp_path / "a.idm").write_bytes(b"IDM2" + b"\0" * 8)
    with pytest.raises(MalformedFile):
        read_masklet_raster(tmp_path / "a.idm")
    (tmp_path / "b.idm").write_bytes(b"IDM1" + struct.pack("<II", 2, 2) + b"\0" * 12)
    with pytest.raises(MalformedFile):
        read_masklet_raster(tmp_path / "b.idm")


def test_fvec_normalizes_and_reads_ids(tmp_path, rng):
    vec = rng.standard_normal((3, 8)) * 5
    write_fvec(tmp_path / "f.fvec", vec, ids=[7, 3, 9])
    back, ids = read_fvec(tmp_path / "f.fvec", with_ids=True)
    np.testing.assert_allclose(np.linalg.norm(back, axis=1), 1.0, atol=1e-12)
    np.testing.assert_allclose(back, vec / np.linalg.norm(vec, axis=1, keepdims=True), atol=1e-6)
    assert ids.tolist() == [7, 3, 9]
    raw = read_fvec(tmp_path / "f.fvec", normalize=False)
    np.testing.assert_allclose(raw, vec, rtol=1e-6)


def test_fvec_errors(tmp_path):
    write_fvec(tmp_path / "z.fvec", np.zeros((1, 4)))
    with pytest.raises(MalformedFile):
        read_fvec(tmp_path / "z.fvec")
    with pytest.raises(CountMismatch):
        write_fvec(tmp_path / "c.fvec", np.ones((2, 4)), ids=[1])
    write_fvec(tmp_path / "d.fvec", np.ones((2, 4)), ids=[1, 1])
    with pytest.raises(MalformedFile):
        read_fvec(tmp_path / "d.fvec", with_ids=True)
    (tmp_path / "t.fvec").write_bytes(b"FVEC" + struct.pack("<II", 2, 4) + b"\0" * 8)
    with pytest.raises(MalformedFile):
        read_fvec(tmp_path / "t.fvec")


def test_masklet_frame_round_trip(tmp_path, rng):
    raster = np.zeros((4, 5), np.uint32)
    raster[1:3, 1:4] = 7
    raster[0, 0] = 2
    feats = {7: unit(rng), 2: unit(rng)}
    write_masklet_frame(tmp_path, tmp_path, MaskletFrame(3, raster, feats))
    back = load_masklet_frame(tmp_path, tmp_path, 3)
    assert back.size == (5, 4)
    np.testing.assert_array_equal(back.id_raster, raster)
    assert sorted(back.per_instance_feature) == [2, 7]
    np.testing.assert_allclose(back.per_instance_feature[7], feats[7], atol=1e-6)
    assert load_masklet_frame(tmp_path, tmp_path, 4) is None


# -- ground truth -------------------------------------------------------------


def test_all_zero_gt_file(tmp_path):
    n = SMALL.n_cells
    (tmp_path / "g.bin").write_bytes(b"CALG" + b"\0" * (2 * n))
    gt = read_gt_grid(tmp_path / "g.bin", SMALL)
    assert gt.labels.shape == SMALL.dims and not gt.labels.any() and not gt.invalid_mask.any()


def test_gt_linear_index_zero_is_first_voxel(tmp_path):
    n = SMALL.n_cells
    lab = np.zeros(n, "<u2")
    lab[0] = 9
    lab[1] = 4  # x-fastest: next cell along x
    (tmp_path / "g.bin").write_bytes(b"CALG" + lab.tobytes())
    gt = read_gt_grid(tmp_path / "g.bin", SMALL)
    assert gt.labels[0, 0, 0] == 9 and gt.labels[1, 0, 0] == 4
    assert int(gt.labels.sum()) == 13


def test_gt_size_mismatch(tmp_path):
    (tmp_path / "g.bin").write_bytes(b"CALG" + b"\0" * 10)
    with pytest.raises(MalformedFile):
        read_gt_grid(tmp_path / "g.bin", SMALL)
    (tmp_path / "h.bin").write_bytes(b"XXXX" + b"\0" * (2 * SMALL.n_cells))
    with pytest.raises(MalformedFile):
        read_gt_grid(tmp_path / "h.bin", SMALL)


@given(st.integers(0, 2**32 - 1))
def test_gt_round_trip_is_byte_identical(tmp_path_factory, seed):
    rng = np.random.default_rng(seed)
    gt = GroundTruthGrid(
        rng.integers(0, 2**16, SMALL.dims),
        rng.integers(0, 2**16, SMALL.dims),
        rng.random(SMALL.dims) < 0.3,
    )
    d = tmp_path_factory.mktemp("gt")
    write_gt_grid(d / "a.bin", gt)
    back = read_gt_grid(d / "a.bin", SMALL)
    assert back == gt
    write_gt_grid(d / "b.bin", back)
    assert (d / "a.bin").read_bytes() == (d / "b.bin").read_bytes()


# -- pseudo labels -------------------------------------------------------------


def random_labels(seed, spec=SMALL, max_inst=4):
    rng = np.random.default_rng(seed)
    n = spec.n_cells
    occ = np.flatnonzero(rng.random(n) < 0.5)
    n_inst = int(rng.integers(0, max_inst + 1))
    ids = rng.integers(0, n_inst + 1, len(occ))
    lab = occ[ids > 0]
    lab_ids = (ids[ids > 0] * 11).astype(np.int64)
    grid = SparseVoxelGrid(spec, lab, lab_ids, occ)
    inst = [InstanceRecord(int(i), grid.voxels_of(int(i)), unit(rng)) for i in grid.instance_ids()]
    return grid, inst


def test_empty_grid_round_trip(tmp_path):
    grid = SparseVoxelGrid(SMALL)
    write_pseudo_labels(grid, [], tmp_path / "e.calp")
    data = (tmp_path / "e.calp").read_bytes()
    assert len(data) == 4 + 4 + 16 + 12 + 4 + 4
    g, inst = read_pseudo_labels(tmp_path / "e.calp")
    assert g == grid and inst == []


def test_single_instance_three_voxels(tmp_path, rng):
    vox = np.array([[1, 0, 0], [0, 1, 0], [0, 0, 1]])
    grid = SparseVoxelGrid(SMALL, SMALL.to_linear(vox), [5, 5, 5], SMALL.to_linear(vox))
    rec = InstanceRecord(5, vox, unit(rng), frame_count=3)
    write_pseudo_labels(grid, [rec], tmp_path / "one.calp")
    g, (back,) = read_pseudo_labels(tmp_path / "one.calp")
    assert g == grid and back == rec
    assert back.voxels.tolist() == [[1, 0, 0], [0, 1, 0], [0, 0, 1]]  # x-fastest order
    assert g.spec == SMALL


def test_dangling_reference_rejected(tmp_path, rng):
    grid = SparseVoxelGrid(SMALL, [0, 1], [3, 4], [0, 1])
    rec = InstanceRecord(3, SMALL.from_linear([0]), unit(rng))
    with pytest.raises(DanglingInstanceReference):
        write_pseudo_labels(grid, [rec], tmp_path / "x.calp")
    assert not (tmp_path / "x.calp").exists()


@given(st.integers(0, 2**32 - 1))
def test_pseudo_label_round_trip_is_byte_identical(seed):
    grid, inst = random_labels(seed)
    data = encode_pseudo_labels(grid, inst)
    g, back = decode_pseudo_labels(data)
    assert g == grid
    assert back == sorted(inst, key=lambda r: r.instance_id)
    assert encode_pseudo_labels(g, back) == data


def test_default_spec_survives_f32_header(rng):
    spec = VoxelGridSpec()
    grid = SparseVoxelGrid(spec, [5], [1], [5, 6])
    g, _ = decode_pseudo_labels(encode_pseudo_labels(grid, [InstanceRecord(1, spec.from_linear([5]), unit(rng))]))
    assert g.spec == spec and g.spec.origin == (0.0, -25.6, -2.0) and g.spec.voxel_size == 0.2


def test_corrupt_pseudo_labels(tmp_path):
    grid, inst = random_labels(3)
    data = encode_pseudo_labels(grid, inst)
    for bad in (b"XXXX" + data[4:], data[:-3], data[:30], data + b"\0"):
        (tmp_path / "c.calp").write_bytes(bad)
        with pytest.raises(MalformedFile):
            read_pseudo_labels(tmp_path / "c.calp")


# -- manifests, sequences, tracks ------------------------------------------


def write_tiny_sequence(root, n=3, n_poses=None):
    rng = np.random.default_rng(0)
    (root / "m").mkdir()
    for i in range(n):
        write_scan(root / f"{i}.bin", PointCloud(rng.normal(size=(10, 4))))
        if i != 1:
            write_masklet_frame(root / "m", root / "m", MaskletFrame(i, np.full((4, 6), i + 1), {i + 1: unit(rng)}))
    write_poses(root / "poses.txt", [RigidTransform.rot_z(0.1 * i) for i in range(n if n_poses is None else n_poses)])
    write_calib(root / "calib.txt", {"P2": np.eye(3, 4), "Tr": np.eye(3, 4)})
    manifest = {
        "scan_paths": [f"{i}.bin" for i in range(n)],
        "pose_path": "poses.txt",
        "calib_path": "calib.txt",
        "masklet_dir": "m",
        "feature_dir": "m",
        "image_size": [6, 4],
        "dataset_profile": "kitti360",
    }
    (root / "manifest.json").write_text(json.dumps(manifest))
    return root / "manifest.json"


def test_manifest_and_sequence(tmp_path):
    m = SequenceManifest.load(write_tiny_sequence(tmp_path))
    assert m.alignment_shift == (0.79, 0.3, -0.25)
    assert m.camera().image_size == (6, 4)
    frames = list(load_sequence(m))
    assert len(frames) == 3
    assert frames[1][2] is None
    assert frames[2][1].allclose(RigidTransform.rot_z(0.2), atol=1e-12)
    assert frames[2][2].id_raster.max() == 3
    again = SequenceManifest.load(tmp_path / "manifest.json")
    assert again.to_json() == m.to_json()


def test_manifest_profiles_and_override(tmp_path):
    base = dict(scan_paths=[], pose_path="p", calib_path="c", masklet_dir="m", feature_dir="f")
    assert SequenceManifest(**base).alignment_shift == (0.0, 0.0, 0.0)
    assert SequenceManifest(**base, dataset_profile="custom").alignment_shift == (0.0, 0.0, 0.0)
    assert SequenceManifest(**base, dataset_profile="kitti360", alignment_shift=(1, 2, 3)).alignment_shift == (1.0, 2.0, 3.0)
    with pytest.raises(ValueError):
        SequenceManifest(**base, dataset_profile="nuscenes")


def test_pose_count_mismatch(tmp_path):
    m = SequenceManifest.load(write_tiny_sequence(tmp_path, n=3, n_poses=2))
    with pytest.raises(CountMismatch):
        list(load_sequence(m))


def test_bad_manifest(tmp_path):
    (tmp_path / "m.json").write_text(json.dumps({"scan_paths": []}))
    with pytest.raises(MalformedFile):
        SequenceManifest.load(tmp_path / "m.json")


def test_tracks_round_trip(tmp_path):
    tracks = [TrackBox(0, (1, 2, 3), (4, 2, 1.5), 0.3), TrackBox(5, (0, 0, 0), (1, 1, 1), -1.0)]
    write_tracks(tmp_path / "t.jsonl", tracks)
    back = read_tracks(tmp_path / "t.jsonl")
    assert [(t.frame_index, t.center.tolist(), t.size.tolist(), t.yaw) for t in back] == [
        (0, [1, 2, 3], [4, 2, 1.5], 0.3),
        (5, [0, 0, 0], [1, 1, 1], -1.0),
    ]
    (tmp_path / "bad.jsonl").write_text('{"frame": 1}\n')
    with pytest.raises(MalformedFile):
        read_tracks(tmp_path / "bad.jsonl")


def test_lift_rejects_raster_of_wrong_size():
    from lidarpsc.geom import CameraModel
    from lidarpsc.labeling import lift_mask

    cam = CameraModel(np.eye(3), RigidTransform.identity(), (6, 4))
    with pytest.raises(SizeMismatch):
        lift_mask(MaskletFrame(0, np.zeros((5, 5))), PointCloud(np.ones((1, 3))), cam)
