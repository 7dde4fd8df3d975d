"""Panoptic and semantic scene-completion metrics on voxel grids.

PQ follows the usual recipe: within each class, segments match when their
voxel IoU exceeds 0.5 (which makes matches unique), SQ is the mean IoU of
matches, RQ = TP / (TP + FP/2 + FN/2). Stuff classes are one segment per
side. PQ† swaps the stuff term for the pooled class IoU with no 0.5 gate.
Invalid ground-truth voxels are dropped everywhere.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import InvariantViolation, SpecMismatch
from .geom import VoxelGridSpec
from .grid import SparseVoxelGrid
from .io import GroundTruthGrid

PQ_DAGGER_NOTE = "stuff classes scored by pooled class IoU without the 0.5 matching gate"


@dataclass(eq=False)
class PanopticGrid:
    """Dense (X, Y, Z) class codes and instance IDs; class 0 means empty."""

    spec: VoxelGridSpec
    classes: np.ndarray
    instances: np.ndarray

    def __post_init__(self):
        self.classes = np.asarray(self.classes, dtype=np.int64)
        self.instances = np.asarray(self.instances, dtype=np.int64)
        if self.classes.shape != tuple(self.spec.dims) or self.instances.shape != tuple(self.spec.dims):
            raise SpecMismatch("panoptic arrays do not match the grid spec")

    @classmethod
    def from_sparse(cls, grid: SparseVoxelGrid, class_of: dict) -> "PanopticGrid":
        """Labelled cells take ``class_of[instance_id]``; instances mapped to None stay empty."""
        ids = grid.label_ids.astype(np.int64)
        codes = np.array([class_of.get(int(i)) or 0 for i in ids], dtype=np.int64)
        keep = codes > 0
        cls_flat = np.zeros(grid.spec.n_cells, np.int64)
        ins_flat = np.zeros(grid.spec.n_cells, np.int64)
        cls_flat[grid.label_index[keep]] = codes[keep]
        ins_flat[grid.label_index[keep]] = ids[keep]
        shape = grid.spec.dims
        return cls(grid.spec, cls_flat.reshape(shape, order="F"), ins_flat.reshape(shape, order="F"))

    @classmethod
    def from_gt(cls, spec, gt: GroundTruthGrid) -> "PanopticGrid":
        return cls(spec, gt.labels, gt.instance_ids)


@dataclass
class ClassScore:
    code: int
    name: str
    is_thing: bool
    tp: int = 0
    fp: int = 0
    fn: int = 0
    iou_sum: float = 0.0
    class_iou: float = 0.0

    @property
    def sq(self) -> float:
        return self.iou_sum / self.tp if self.tp else 0.0

    @property
    def rq(self) -> float:
        denom = self.tp + 0.5 * self.fp + 0.5 * self.fn
        return self.tp / denom if denom else 0.0

    @property
    def pq(self) -> float:
        return self.sq * self.rq

    @property
    def pq_dagger(self) -> float:
        return self.pq if self.is_thing else self.class_iou

    def to_json(self) -> dict:
        return {
            "code": self.code,
            "name": self.name,
            "kind": "thing" if self.is_thing else "stuff",
            "PQ": self.pq,
            "PQ_dagger": self.pq_dagger,
            "SQ": self.sq,
            "RQ": self.rq,
            "IoU": self.class_iou,
            "TP": self.tp,
            "FP": self.fp,
            "FN": self.fn,
        }


def _mean(values) -> float:
    values = list(values)
    return float(np.mean(values)) if values else 0.0


@dataclass
class PanopticReport:
    per_class: list = field(default_factory=list)
    mIoU: float | None = None
    IoU: float | None = None
    coverage: dict | None = None
    metadata: dict = field(default_factory=dict)

    def _agg(self, classes) -> dict:
        classes = list(classes)
        return {
            "PQ": _mean(c.pq for c in classes),
            "PQ_dagger": _mean(c.pq_dagger for c in classes),
            "SQ": _mean(c.sq for c in classes),
            "RQ": _mean(c.rq for c in classes),
            "n_classes": len(classes),
        }

    @property
    def PQ(self) -> float:
        return self._agg(self.per_class)["PQ"]

    @property
    def PQ_dagger(self) -> float:
        return self._agg(self.per_class)["PQ_dagger"]

    @property
    def SQ(self) -> float:
        return self._agg(self.per_class)["SQ"]

    @property
    def RQ(self) -> float:
        return self._agg(self.per_class)["RQ"]

    def by_code(self, code: int) -> ClassScore:
        for c in self.per_class:
            if c.code == code:
                return c
        raise KeyError(code)

    def to_json(self) -> dict:
        return {
            "PQ": self.PQ,
            "PQ_dagger": self.PQ_dagger,
            "SQ": self.SQ,
            "RQ": self.RQ,
            "mIoU": self.mIoU,
            "IoU": self.IoU,
            "thing": self._agg(c for c in self.per_class if c.is_thing),
            "stuff": self._agg(c for c in self.per_class if not c.is_thing),
            "per_class": [c.to_json() for c in self.per_class],
            "coverage": self.coverage,
            "metadata": self.metadata,
        }


def _check_dims(spec_dims, gt: GroundTruthGrid):
    if tuple(spec_dims) != tuple(gt.dims):
        raise SpecMismatch(f"prediction grid {tuple(spec_dims)} vs ground truth {tuple(gt.dims)}")


def _segments_iou(pred_ids, gt_ids):
    """IoU table between the segments given as per-voxel IDs (-1 = absent)."""
    p_u, p_inv = np.unique(pred_ids[pred_ids >= 0], return_inverse=True)
    g_u, g_inv = np.unique(gt_ids[gt_ids >= 0], return_inverse=True)
    p_size = np.bincount(p_inv, minlength=len(p_u)).astype(np.int64)
    g_size = np.bincount(g_inv, minlength=len(g_u)).astype(np.int64)
    both = (pred_ids >= 0) & (gt_ids >= 0)
    inter = np.zeros((len(p_u), len(g_u)), dtype=np.int64)
    if np.any(both):
        pi = np.searchsorted(p_u, pred_ids[both])
        gi = np.searchsorted(g_u, gt_ids[both])
        np.add.at(inter, (pi, gi), 1)
    union = p_size[:, None] + g_size[None, :] - inter
    with np.errstate(invalid="ignore", divide="ignore"):
        iou = np.where(union > 0, inter / np.maximum(union, 1), 0.0)
    return iou, inter


def match_and_score(pred: PanopticGrid, gt: GroundTruthGrid, vocab, masked: bool = False, skip_absent: bool = True) -> PanopticReport:
    """Per-class PQ/SQ/RQ and PQ† of ``pred`` against ``gt``.

    With ``masked`` the ground truth is restricted to voxels the prediction
    labels. Classes without ground-truth voxels are skipped unless
    ``skip_absent`` is False.
    """
    _check_dims(pred.spec.dims, gt)
    valid = ~gt.invalid_mask
    if masked:
        valid &= pred.classes > 0
    pc = np.where(valid, pred.classes, 0).reshape(-1)
    pi = pred.instances.reshape(-1)
    gc = np.where(valid, gt.labels.astype(np.int64), 0).reshape(-1)
    gi = gt.instance_ids.astype(np.int64).reshape(-1)

    scores = []
    for vc in vocab.classes:
        c = vc.code
        pm, gm = pc == c, gc == c
        if skip_absent and not np.any(gm):
            continue
        s = ClassScore(c, vc.name, vc.is_thing)
        inter = np.count_nonzero(pm & gm)
        union = np.count_nonzero(pm | gm)
        s.class_iou = inter / union if union else 0.0
        if vc.is_thing:
            iou, _ = _segments_iou(np.where(pm, pi, -1), np.where(gm, gi, -1))
        else:
            iou, _ = _segments_iou(np.where(pm, 0, -1), np.where(gm, 0, -1))
        hit = iou > 0.5
        if np.any(hit.sum(0) > 1) or np.any(hit.sum(1) > 1):
            raise InvariantViolation(f"class {c}: a segment matched twice")
        s.tp = int(hit.sum())
        s.fp = int(iou.shape[0] - s.tp)
        s.fn = int(iou.shape[1] - s.tp)
        s.iou_sum = math.fsum(iou[hit].tolist())  # exactly rounded, so order free
        scores.append(s)
    return PanopticReport(
        per_class=scores,
        metadata={"masked": masked, "pq_dagger": PQ_DAGGER_NOTE, "skip_absent": skip_absent},
    )


def ssc_scores(pred_classes, gt: GroundTruthGrid, classes=None, skip_absent: bool = True):
    """(mIoU, completion IoU, per-class IoU dict) over valid voxels.

    ``classes`` defaults to the nonzero codes present in the ground truth.
    """
    pred = np.asarray(pred_classes, dtype=np.int64)
    _check_dims(pred.shape, gt)
    valid = ~gt.invalid_mask
    p = pred[valid]
    g = gt.labels[valid].astype(np.int64)
    if classes is None:
        classes = np.unique(g[g > 0])
    per_class = {}
    for c in classes:
        c = int(c)
        gm = g == c
        if skip_absent and not np.any(gm):
            continue
        pm = p == c
        union = np.count_nonzero(pm | gm)
        per_class[c] = np.count_nonzero(pm & gm) / union if union else 0.0
    miou = _mean(per_class.values())
    po, go = p > 0, g > 0
    union = np.count_nonzero(po | go)
    completion = np.count_nonzero(po & go) / union if union else 0.0
    return miou, completion, per_class


def coverage(labels: SparseVoxelGrid, gt: GroundTruthGrid):
    """Percent of valid occupied ground-truth voxels that carry a label / are occupied."""
    _check_dims(labels.spec.dims, gt)
    target = ((gt.labels > 0) & ~gt.invalid_mask).reshape(-1, order="F")
    total = int(target.sum())
    if total == 0:
        return 0.0, 0.0
    lab = np.zeros(labels.spec.n_cells, bool)
    lab[labels.label_index] = True
    occ = np.zeros(labels.spec.n_cells, bool)
    occ[labels.occupancy] = True
    occ[labels.label_index] = True
    return 100.0 * np.count_nonzero(lab & target) / total, 100.0 * np.count_nonzero(occ & target) / total
