"""Turn soft per-query instance masks into a panoptic grid, and fit amodal boxes."""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .boxes import OrientedBox, fit_upright_box
from .errors import EmptyInput, MalformedFile
from .geom import VoxelGridSpec
from .grid import InstanceRecord, SparseVoxelGrid
from .io import _read_bytes, _unpack_fvec, _write_bytes


@dataclass(eq=False)
class SoftPrediction:
    voxels: np.ndarray  # (V, 3) occupied cells
    probs: np.ndarray  # (Q, V) per-query voxel probabilities
    features: np.ndarray  # (Q, F)

    def __post_init__(self):
        self.voxels = np.asarray(self.voxels, dtype=np.int64).reshape(-1, 3)
        self.probs = np.asarray(self.probs, dtype=np.float32)
        if self.probs.ndim == 1:
            self.probs = self.probs.reshape(1, -1)
        self.features = np.asarray(self.features, dtype=np.float64)
        if self.features.ndim == 1:
            self.features = self.features.reshape(1, -1)
        q, v = self.probs.shape
        if v != len(self.voxels) or len(self.features) != q:
            raise ValueError("query/voxel counts disagree")
        if np.any(self.probs < 0) or np.any(self.probs > 1):
            raise ValueError("probabilities must lie in [0, 1]")
        norms = np.linalg.norm(self.features, axis=1, keepdims=True)
        if np.any(norms == 0):
            raise ValueError("zero query feature")
        self.features = self.features / norms

    @property
    def n_queries(self) -> int:
        return self.probs.shape[0]


def write_soft_prediction(path, pred: SoftPrediction) -> None:
    """``CALQ``: u32 queries, u32 voxels, voxels x (u16 x, y, z), then per
    query voxels x f32 probability followed by a one-vector FVEC block."""
    q, v = pred.probs.shape
    parts = [b"CALQ", struct.pack("<II", q, v), pred.voxels.astype("<u2").tobytes()]
    dim = pred.features.shape[1]
    for k in range(q):
        parts.append(pred.probs[k].astype("<f4").tobytes())
        parts.append(b"FVEC" + struct.pack("<II", 1, dim) + pred.features[k].astype("<f4").tobytes())
    _write_bytes(path, b"".join(parts))


def read_soft_prediction(path) -> SoftPrediction:
    data = _read_bytes(path)
    if data[:4] != b"CALQ" or len(data) < 12:
        raise MalformedFile(f"{path}: bad prediction magic")
    q, v = struct.unpack_from("<II", data, 4)
    off = 12
    if off + 6 * v > len(data):
        raise MalformedFile(f"{path}: truncated voxel list")
    voxels = np.frombuffer(data, "<u2", 3 * v, off).reshape(-1, 3).astype(np.int64)
    off += 6 * v
    probs, feats = [], []
    for _ in range(q):
        if off + 4 * v > len(data):
            raise MalformedFile(f"{path}: truncated probabilities")
        probs.append(np.frombuffer(data, "<f4", v, off))
        off += 4 * v
        vec, off = _unpack_fvec(data, off, path)
        feats.append(vec[0])
    if off != len(data):
        raise MalformedFile(f"{path}: {len(data) - off} trailing bytes")
    try:
        return SoftPrediction(
            voxels,
            np.stack(probs) if probs else np.zeros((0, v), np.float32),
            np.stack(feats) if feats else np.zeros((0, 1)),
        )
    except ValueError as e:
        raise MalformedFile(f"{path}: {e}") from e


def binarize(pred: SoftPrediction, tau_vox: float):
    """Threshold each query's mask; objectness is the mean probability inside it.

    Returns ``(masks (Q, V) bool, objectness (Q,))``.
    """
    if not 0 <= tau_vox <= 1:
        raise ValueError("tau_vox must lie in [0, 1]")
    masks = pred.probs >= tau_vox
    count = masks.sum(axis=1)
    total = np.where(masks, pred.probs, 0).sum(axis=1, dtype=np.float64)
    objectness = np.where(count > 0, total / np.maximum(count, 1), 0.0)
    return masks, objectness


def suppress(masks, objectness, tau_obj: float, tau_ovr: float, overlap: str = "smaller") -> list[int]:
    """Indices of surviving masks in keep order (descending objectness).

    Empty masks and masks below ``tau_obj`` go first; then a mask is dropped
    when its overlap with an already kept mask exceeds ``tau_ovr``. Overlap
    is |A∩B| / min(|A|, |B|) by default, or IoU with ``overlap="iou"``.
    """
    masks = np.asarray(masks, dtype=bool)
    obj = np.asarray(objectness, dtype=np.float64)
    sizes = masks.sum(axis=1)
    cand = np.flatnonzero((sizes > 0) & (obj >= tau_obj))
    cand = cand[np.lexsort((cand, -obj[cand]))]
    if len(cand) == 0:
        return []
    m = masks[cand].astype(np.float32)
    inter = m @ m.T
    s = sizes[cand].astype(np.float64)
    if overlap == "smaller":
        ratio = inter / np.minimum(s[:, None], s[None, :])
    elif overlap == "iou":
        ratio = inter / (s[:, None] + s[None, :] - inter)
    else:
        raise ValueError(f"unknown overlap mode {overlap!r}")
    kept: list[int] = []
    for a in range(len(cand)):
        if all(ratio[a, b] <= tau_ovr for b in kept):
            kept.append(a)
    return [int(cand[a]) for a in kept]


def fit_box(voxels, spec: VoxelGridSpec) -> OrientedBox:
    """Upright amodal box around voxel centers, padded by one voxel per axis."""
    v = np.asarray(voxels, dtype=np.int64).reshape(-1, 3)
    if len(v) == 0:
        raise EmptyInput("cannot fit a box to an empty voxel set")
    return fit_upright_box(spec.voxel_center(v), pad=spec.voxel_size)


def to_panoptic(pred: SoftPrediction, spec: VoxelGridSpec, tau_vox: float, tau_obj: float, tau_ovr: float, overlap: str = "smaller"):
    """Binarize, suppress and rasterize into a grid plus instance records.

    Kept masks get IDs 1..K in keep order; voxels claimed by several kept
    masks go to the one kept first. Returns ``(grid, instances, objectness)``.
    """
    masks, obj = binarize(pred, tau_vox)
    kept = suppress(masks, obj, tau_obj, tau_ovr, overlap)
    lin = spec.to_linear(pred.voxels)
    owner = np.zeros(len(lin), dtype=np.int64)
    for new_id, q in enumerate(kept, 1):
        owner[(owner == 0) & masks[q]] = new_id
    instances, scores = [], {}
    for new_id, q in enumerate(kept, 1):
        vox = pred.voxels[owner == new_id]
        if len(vox):
            instances.append(InstanceRecord(new_id, vox, pred.features[q]))
            scores[new_id] = float(obj[q])
    grid = SparseVoxelGrid(spec, lin[owner > 0], owner[owner > 0], lin)
    return grid, instances, scores
