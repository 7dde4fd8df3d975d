import dataclasses
import json
import logging

import numpy as np
import pytest

from lidarpsc.config import RunConfig
from lidarpsc.io import read_gt_grid, read_pseudo_labels
from lidarpsc.metrics import coverage
from lidarpsc.pipeline import SequenceLabeler, log_stage, reference_frames
from lidarpsc.semantics import ClassVocabulary, classify_instances
from lidarpsc.synthetic import CAR_ID, INSTANCE_CLASSES, STATIC_OBJECTS, ego_pose, write_scene

PROFILES = ("semantic_kitti", "kitti360")


def recovered(grid, scene, obj):
    want = scene.analytic_voxels(obj)
    return float(np.mean(grid.labels_at(want) == obj.instance_id))


@pytest.mark.parametrize("profile", PROFILES)
@pytest.mark.parametrize("stage", ["raw", "crf"])
def test_static_objects_are_recovered(labeled_scene, scene, profile, stage):
    grid, _, _ = labeled_scene[profile][stage]
    for obj in STATIC_OBJECTS:
        assert recovered(grid, scene, obj) >= 0.95, obj.class_name


@pytest.mark.parametrize("profile", PROFILES)
def test_window_sizes_and_fusion(labeled_scene, profile):
    grid, instances, stats = labeled_scene[profile]["raw"]
    assert stats["label_frames"] == 41  # frames 0..80 step 2 around frame 16
    assert stats["occupancy_frames"] == (74 if profile == "semantic_kitti" else 89)
    assert grid.is_fused() and stats["labeled_voxels"] == grid.n_labeled
    assert [r.instance_id for r in instances] == grid.instance_ids().tolist()
    for r in instances:
        assert abs(np.linalg.norm(r.feature) - 1) < 1e-6


def test_dynamic_car_only_dropped_under_kitti360(labeled_scene):
    sk = labeled_scene["semantic_kitti"]["raw"]
    k3 = labeled_scene["kitti360"]["raw"]
    assert sk[2]["discarded_dynamic"] == [] and CAR_ID in sk[0].instance_ids()
    assert k3[2]["discarded_dynamic"] == [CAR_ID] and CAR_ID not in k3[0].instance_ids()


@pytest.mark.parametrize("profile", PROFILES)
def test_crf_keeps_seeds_and_grows(labeled_scene, profile):
    raw, _, _ = labeled_scene[profile]["raw"]
    crf, instances, _ = labeled_scene[profile]["crf"]
    assert np.array_equal(crf.labels_at(raw.label_index), raw.label_ids)
    assert crf.n_labeled >= raw.n_labeled
    assert np.array_equal(crf.occupancy, raw.occupancy)
    for r in instances:
        assert len(r.voxels) == len(crf.voxels_of(r.instance_id))


@pytest.mark.parametrize("profile", PROFILES)
def test_zero_shot_recovers_planted_classes(labeled_scene, scene, profile):
    vocab = ClassVocabulary.load(scene.vocabulary_path)
    _, instances, _ = labeled_scene[profile]["crf"]
    result = classify_instances(instances, vocab)
    for iid, r in result.items():
        assert r["class"] == INSTANCE_CLASSES[iid]
        assert r["margin"] > 0.1


def test_coverage_of_ground_truth(labeled_scene, scene):
    gt = read_gt_grid(scene.gt_path, scene.spec)
    raw, _, _ = labeled_scene["kitti360"]["raw"]
    crf, _, _ = labeled_scene["kitti360"]["crf"]
    before, after = coverage(raw, gt), coverage(crf, gt)
    assert after[0] > 90.0 and after[0] >= before[0]
    assert after[1] == before[1]


def test_runs_are_byte_identical(pseudo_label_runs):
    a, b = pseudo_label_runs
    assert a.name == b.name == "000016.calp"
    assert a.read_bytes() == b.read_bytes()
    grid, instances = read_pseudo_labels(a)
    assert grid.n_labeled > 0 and len(instances) >= 3


def test_alignment_shift_comes_from_manifest(tmp_path):
    scene = write_scene(tmp_path, dataset_profile="kitti360")
    assert SequenceLabeler(scene.manifest(), RunConfig()).shift == (0.0, 0.0, 0.0)
    m = dataclasses.replace(scene.manifest(), alignment_shift=None)  # falls back to the profile
    assert SequenceLabeler(m, RunConfig()).shift == (0.79, 0.3, -0.25)
    assert SequenceLabeler(m, RunConfig(alignment_shift=(0, 0, 1))).shift == (0.0, 0.0, 1.0)


def test_frame_labels_lie_on_objects(scene):
    labeler = SequenceLabeler(scene.manifest(), RunConfig())
    fl = labeler.frame_labels(scene.params.reference)
    assert len(fl.ids) > 0 and set(np.unique(fl.ids).tolist()) <= set(INSTANCE_CLASSES)
    world = ego_pose(scene.params.reference, scene.params).apply(fl.points)
    for obj in STATIC_OBJECTS:
        pts = world[fl.ids == obj.instance_id]
        if len(pts):
            assert np.all(pts >= np.asarray(obj.lo) - 0.05) and np.all(pts <= np.asarray(obj.hi) + 0.05)


def test_reference_frames_helper():
    assert reference_frames(RunConfig(), 5) == [0, 1, 2, 3, 4]
    assert reference_frames(RunConfig(reference_stride=2), 5) == [0, 2, 4]
    assert reference_frames(RunConfig(reference_frames=[3, 1]), 5) == [3, 1]


def test_log_stage_is_one_json_object(caplog):
    with caplog.at_level(logging.INFO, logger="lidarpsc"):
        log_stage("demo", b=2, a=1)
    rec = json.loads(caplog.records[-1].getMessage())
    assert rec == {"stage": "demo", "a": 1, "b": 2}
