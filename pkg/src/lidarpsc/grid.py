"""Sparse instance-labelled voxel grids and per-instance records.

Cells are addressed by their x-fastest linear index inside a
:class:`~lidarpsc.geom.VoxelGridSpec`; every array held here is kept sorted
so that equality, set algebra and serialization are order independent.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import InvariantViolation
from .geom import VoxelGridSpec

FEATURE_DIM = 768


def _sorted_unique(a) -> np.ndarray:
    return np.unique(np.asarray(a, dtype=np.int64).reshape(-1))


class SparseVoxelGrid:
    """Instance labels over occupied cells plus a class-agnostic occupancy set.

    ``label_index``/``label_ids`` hold the labelled cells (ID 0 is never
    stored), ``occupancy`` the observed-occupied cells. After :func:`fuse`
    the labelled support is a subset of the occupancy.
    """

    def __init__(self, spec: VoxelGridSpec, label_index=(), label_ids=(), occupancy=()):
        self.spec = spec
        idx = np.asarray(label_index, dtype=np.int64).reshape(-1)
        ids = np.asarray(label_ids, dtype=np.int64).reshape(-1)
        if idx.shape != ids.shape:
            raise ValueError("label_index and label_ids must have equal length")
        order = np.argsort(idx, kind="stable")
        idx, ids = idx[order], ids[order]
        if len(idx) and np.any(np.diff(idx) == 0):
            raise ValueError("duplicate labelled cell")
        if np.any(ids <= 0) or np.any(ids > np.iinfo(np.uint32).max):
            raise ValueError("instance IDs must be in [1, 2**32)")
        occ = _sorted_unique(occupancy)
        n = spec.n_cells
        for a in (idx, occ):
            if len(a) and (a[0] < 0 or a[-1] >= n):
                raise ValueError("cell index out of grid range")
        self.label_index = idx
        self.label_ids = ids.astype(np.uint32)
        self.occupancy = occ
        for a in (self.label_index, self.label_ids, self.occupancy):
            a.setflags(write=False)

    @classmethod
    def from_cells(cls, spec, cells: dict, occupancy=()) -> "SparseVoxelGrid":
        """Build from a ``{(x, y, z): instance_id}`` mapping."""
        if cells:
            keys = np.array(list(cells.keys()), dtype=np.int64)
            vals = np.array(list(cells.values()), dtype=np.int64)
            lin = spec.to_linear(keys)
        else:
            lin, vals = [], []
        occ = spec.to_linear(np.array(list(occupancy), dtype=np.int64).reshape(-1, 3)) if len(occupancy) else []
        return cls(spec, lin, vals, occ)

    @property
    def cells(self) -> dict:
        vox = self.spec.from_linear(self.label_index)
        return {tuple(int(c) for c in v): int(i) for v, i in zip(vox, self.label_ids)}

    def label_voxels(self) -> np.ndarray:
        return self.spec.from_linear(self.label_index)

    def occupancy_voxels(self) -> np.ndarray:
        return self.spec.from_linear(self.occupancy)

    def labels_at(self, linear) -> np.ndarray:
        """Instance ID at each linear index, 0 where unlabelled."""
        lin = np.asarray(linear, dtype=np.int64).reshape(-1)
        pos = np.clip(np.searchsorted(self.label_index, lin), 0, max(len(self.label_index) - 1, 0))
        if len(self.label_index) == 0:
            return np.zeros(len(lin), dtype=np.uint32)
        return np.where(self.label_index[pos] == lin, self.label_ids[pos], 0).astype(np.uint32)

    def instance_ids(self) -> np.ndarray:
        return np.unique(self.label_ids)

    def voxels_of(self, instance_id: int) -> np.ndarray:
        return self.spec.from_linear(self.label_index[self.label_ids == instance_id])

    @property
    def n_labeled(self) -> int:
        return len(self.label_index)

    def is_fused(self) -> bool:
        return bool(np.all(np.isin(self.label_index, self.occupancy, assume_unique=True)))

    def dense_labels(self) -> np.ndarray:
        """Dense (X, Y, Z) uint32 array of instance IDs, 0 where unlabelled."""
        out = np.zeros(self.spec.n_cells, dtype=np.uint32)
        out[self.label_index] = self.label_ids
        return out.reshape(self.spec.dims, order="F")

    def __eq__(self, other):
        if not isinstance(other, SparseVoxelGrid):
            return NotImplemented
        return (
            self.spec == other.spec
            and np.array_equal(self.label_index, other.label_index)
            and np.array_equal(self.label_ids, other.label_ids)
            and np.array_equal(self.occupancy, other.occupancy)
        )

    def __repr__(self):
        return (
            f"SparseVoxelGrid(dims={self.spec.dims}, labeled={self.n_labeled}, "
            f"instances={len(self.instance_ids())}, occupied={len(self.occupancy)})"
        )


def _sort_voxels(v) -> np.ndarray:
    v = np.asarray(v, dtype=np.int64).reshape(-1, 3)
    v = np.unique(v, axis=0)
    return v[np.lexsort((v[:, 0], v[:, 1], v[:, 2]))]


@dataclass(eq=False)
class InstanceRecord:
    """One aggregated object.

    ``frame_count`` is provenance only: it is not serialized and does not
    take part in equality.
    """

    instance_id: int
    voxels: np.ndarray
    feature: np.ndarray
    frame_count: int = field(default=0)

    def __post_init__(self):
        self.instance_id = int(self.instance_id)
        if not 0 < self.instance_id < 2**32:
            raise ValueError("instance_id must be a positive u32")
        self.voxels = _sort_voxels(self.voxels)
        if len(self.voxels) == 0:
            raise ValueError(f"instance {self.instance_id} has no voxels")
        f = np.asarray(self.feature, dtype=np.float32).reshape(-1)
        n = float(np.linalg.norm(f.astype(np.float64)))
        if not np.isfinite(n) or abs(n - 1.0) > 1e-6:
            f = (f.astype(np.float64) / n).astype(np.float32) if n > 0 else f
            n = float(np.linalg.norm(f.astype(np.float64)))
            if abs(n - 1.0) > 1e-6:
                raise ValueError("feature must be a finite nonzero vector")
        self.feature = f

    def __eq__(self, other):
        if not isinstance(other, InstanceRecord):
            return NotImplemented
        return (
            self.instance_id == other.instance_id
            and np.array_equal(self.voxels, other.voxels)
            and np.array_equal(self.feature, other.feature)
        )


def sync_instances(grid: SparseVoxelGrid, instances) -> list[InstanceRecord]:
    """Refresh each record's voxel set from ``grid``; drop records with no cells."""
    out = []
    for rec in sorted(instances, key=lambda r: r.instance_id):
        vox = grid.voxels_of(rec.instance_id)
        if len(vox):
            out.append(InstanceRecord(rec.instance_id, vox, rec.feature, rec.frame_count))
    return out


def check_consistent(grid: SparseVoxelGrid, instances) -> None:
    for rec in instances:
        if not np.array_equal(rec.voxels, _sort_voxels(grid.voxels_of(rec.instance_id))):
            raise InvariantViolation(
                f"instance {rec.instance_id}: record voxels disagree with grid labels"
            )
