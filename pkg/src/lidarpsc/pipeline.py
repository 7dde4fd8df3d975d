"""End-to-end pseudo-label generation for one sequence."""

from __future__ import annotations

import json
import logging
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from functools import lru_cache
from pathlib import Path

import numpy as np

from .config import RunConfig
from .crf import crf_refine
from .errors import DegenerateInput
from .grid import InstanceRecord, SparseVoxelGrid, sync_instances
from .io import SequenceManifest, frame_name, load_masklet_frame, read_scan, read_tracks, write_pseudo_labels
from .labeling import (
    LabeledPoints,
    accumulate_occupancy,
    aggregate_window,
    dbscan_refine,
    filter_dynamic,
    fit_ground_plane,
    fuse,
    lift_mask,
    voxelize_majority,
)
from .semantics import aggregate_features

log = logging.getLogger("lidarpsc")


def log_stage(stage: str, **fields) -> None:
    """One JSON object per pipeline stage."""
    log.info(json.dumps({"stage": stage, **fields}, sort_keys=True, default=str))


@dataclass
class FrameLabels:
    """Lifted and refined instance labels of one scan, in sensor coordinates."""

    frame_index: int
    points: np.ndarray  # (N, 3) labelled points only
    ids: np.ndarray  # (N,)
    features: dict  # instance id -> feature vector seen in this frame


class SequenceLabeler:
    """Caches per-frame work so that overlapping windows reuse it."""

    def __init__(self, manifest: SequenceManifest, cfg: RunConfig):
        self.manifest = manifest
        self.cfg = cfg
        self.poses = manifest.poses()
        self.camera = manifest.camera()
        self.shift = cfg.alignment_shift if cfg.alignment_shift is not None else manifest.alignment_shift
        self.tracks = []
        if cfg.dynamic_removal and manifest.tracks_path and Path(manifest.tracks_path).exists():
            self.tracks = read_tracks(manifest.tracks_path)
        self._frames: dict[int, FrameLabels] = {}
        self._scan = lru_cache(maxsize=256)(self._read_scan)

    def __len__(self):
        return len(self.manifest)

    def _read_scan(self, i: int):
        return read_scan(self.manifest.scan_paths[i])

    def frame_labels(self, i: int) -> FrameLabels:
        if i not in self._frames:
            self._frames[i] = self._compute_frame(i)
        return self._frames[i]

    def _compute_frame(self, i: int) -> FrameLabels:
        cfg = self.cfg
        mframe = load_masklet_frame(self.manifest.masklet_dir, self.manifest.feature_dir, i)
        cloud = self._scan(i)
        if mframe is None:
            return FrameLabels(i, np.zeros((0, 3)), np.zeros(0, np.uint32), {})
        ids = lift_mask(mframe, cloud, self.camera)
        try:
            _, _, ground = fit_ground_plane(
                cloud, cfg.ground_threshold, cfg.ground_iterations, seed=cfg.seed + i
            )
        except DegenerateInput:
            ground = np.zeros(len(cloud), bool)
        above = ~ground
        refined, replaced = dbscan_refine(
            cloud.xyz[above], ids[above], cfg.dbscan_eps, cfg.dbscan_min_pts, cfg.dbscan_iou, return_replaced=True
        )
        out = ids.copy()
        out[above] = refined
        if replaced:
            # a replaced instance is exactly its cluster: drop its ground points
            out[ground & np.isin(ids, list(replaced))] = 0
        keep = out > 0
        return FrameLabels(i, cloud.xyz[keep], out[keep], mframe.per_instance_feature)

    def prepare(self, frames, jobs: int = 1) -> None:
        todo = [i for i in frames if i not in self._frames]
        if jobs > 1 and len(todo) > 1:
            with ThreadPoolExecutor(jobs) as ex:
                results = list(ex.map(self._compute_frame, todo))
        else:
            results = [self._compute_frame(i) for i in todo]
        for r in results:
            self._frames[r.frame_index] = r

    def discarded_dynamic(self, frames) -> set:
        if not self.tracks:
            return set()
        per_frame = {}
        for i in frames:
            fl = self.frame_labels(i)
            world = self.poses[i].apply(fl.points)
            per_frame[i] = {int(k): world[fl.ids == k] for k in np.unique(fl.ids)}
        return filter_dynamic(per_frame, self.tracks, self.cfg.dynamic_overlap)

    def label(self, t: int, crf: bool = False):
        """Pseudo labels for reference frame ``t``: ``(grid, instances, stats)``."""
        cfg, n = self.cfg, len(self)
        spec = self.manifest.grid_spec
        frames = cfg.window.label_frames(t, n)
        self.prepare(frames, cfg.jobs)
        discard = self.discarded_dynamic(frames)

        per_frame = []
        for i in frames:
            fl = self.frame_labels(i)
            if len(fl.ids):
                per_frame.append(LabeledPoints(fl.points, fl.ids, np.full(len(fl.ids), i)))
        agg = aggregate_window(per_frame, self.poses, self.poses[t], self.shift, discard)
        grid = voxelize_majority(agg, spec)

        occ_frames = cfg.window.occupancy_frames(t, n)
        occ = accumulate_occupancy(
            [(i, self._scan(i)) for i in occ_frames], self.poses, self.poses[t], spec, self.shift
        )
        grid = fuse(grid, occ)

        instances = []
        dropped = []
        for iid in grid.instance_ids().tolist():
            feats = [self.frame_labels(i).features[iid] for i in frames if iid in self.frame_labels(i).features]
            if not feats:
                dropped.append(iid)
                continue
            instances.append(InstanceRecord(iid, grid.voxels_of(iid), aggregate_features(feats), len(feats)))
        if dropped:
            keep = ~np.isin(grid.label_ids, dropped)
            grid = SparseVoxelGrid(spec, grid.label_index[keep], grid.label_ids[keep], grid.occupancy)
        stats = {
            "reference_frame": t,
            "label_frames": len(frames),
            "occupancy_frames": len(occ_frames),
            "discarded_dynamic": sorted(discard),
            "dropped_without_feature": dropped,
            "instances": len(instances),
            "labeled_voxels": grid.n_labeled,
            "occupied_voxels": len(grid.occupancy),
        }
        if crf:
            grid = crf_refine(grid, cfg.crf)
            instances = sync_instances(grid, instances)
            stats["labeled_voxels_crf"] = grid.n_labeled
        return grid, instances, stats


def reference_frames(cfg: RunConfig, n: int) -> list[int]:
    if cfg.reference_frames is not None:
        return [int(i) for i in cfg.reference_frames]
    return list(range(0, n, cfg.reference_stride))


def run_pseudo_labeling(manifest: SequenceManifest, cfg: RunConfig, out_dir, crf: bool = False) -> list[Path]:
    """Write one ``CALP`` file per reference frame into ``out_dir``."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    labeler = SequenceLabeler(manifest, cfg)
    written = []
    for t in reference_frames(cfg, len(labeler)):
        start = time.perf_counter()
        grid, instances, stats = labeler.label(t, crf=crf)
        path = out_dir / f"{frame_name(t)}.calp"
        write_pseudo_labels(grid, instances, path)
        written.append(path)
        log_stage("pseudo-label", output=str(path), seconds=round(time.perf_counter() - start, 3), **stats)
    return written
