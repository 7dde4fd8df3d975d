"""Mean-field label propagation over occupied voxels.

Every instance ID in the grid is a label. Labelled voxels start one-hot,
occupied-but-unlabelled voxels uniform; a truncated Gaussian kernel over
normalized voxel coordinates pulls neighbours towards each other's labels.
Seeds never change their label.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import sparse
from scipy.spatial import cKDTree

from .errors import NoLabels
from .grid import SparseVoxelGrid

EPS = 1e-6


@dataclass(frozen=True)
class CrfParams:
    iterations: int = 5
    theta: float = 3.0 / 256.0
    pairwise_weight: float = 3.0
    kernel_cutoff: float = 9.0

    def __post_init__(self):
        if self.iterations < 1:
            raise ValueError("iterations must be >= 1")
        if not self.theta > 0:
            raise ValueError("theta must be positive")
        if self.pairwise_weight < 0:
            raise ValueError("pairwise_weight must be >= 0")
        if self.kernel_cutoff < 1:
            raise ValueError("kernel_cutoff must be >= 1")


@dataclass(eq=False)
class LabelDistribution:
    voxels: np.ndarray  # (N,) linear cell indices, sorted
    labels: np.ndarray  # (L,) instance IDs, sorted
    probs: np.ndarray  # (N, L)

    def __post_init__(self):
        p = self.probs
        if p.shape != (len(self.voxels), len(self.labels)):
            raise ValueError("probability table has wrong shape")
        if np.any(p < 0) or np.any(np.abs(p.sum(1) - 1) > 1e-6):
            raise ValueError("rows must be non-negative and sum to 1")


def build_unary(grid: SparseVoxelGrid, eps: float = EPS) -> LabelDistribution:
    """Clamped one-hot rows for labelled voxels, uniform rows for the rest."""
    labels = grid.instance_ids().astype(np.int64)
    if len(labels) == 0:
        raise NoLabels("grid has no labelled voxels")
    voxels = np.union1d(grid.occupancy, grid.label_index)
    L = len(labels)
    probs = np.full((len(voxels), L), 1.0 / L)
    rows = np.searchsorted(voxels, grid.label_index)
    cols = np.searchsorted(labels, grid.label_ids.astype(np.int64))
    if L > 1:
        probs[rows] = eps
        probs[rows, cols] = 1.0 - eps * (L - 1)
    else:
        probs[rows] = 1.0
    return LabelDistribution(voxels, labels, probs)


def _features(positions, dims) -> np.ndarray:
    return np.asarray(positions, dtype=np.float64) / np.asarray(dims, dtype=np.float64)


class PairwiseKernel:
    """Truncated Gaussian affinity between voxels, applied as a sparse operator.

    Pairs farther than ``cutoff`` voxels (Euclidean, in cell units) and
    self-pairs contribute nothing. Rows are built chunk by chunk and cached
    while the total number of stored pairs stays under ``cache_pairs``.
    """

    def __init__(self, positions, dims, theta: float, cutoff: float, chunk: int = 20000, cache_pairs: int = 30_000_000):
        self.positions = np.asarray(positions, dtype=np.float64).reshape(-1, 3)
        self.feats = _features(self.positions, dims)
        self.theta = theta
        self.cutoff = cutoff
        self.chunk = chunk
        self.tree = cKDTree(self.positions)
        self._cache: list | None = None
        self.cache_pairs = cache_pairs

    def _rows(self, start: int, stop: int) -> sparse.csr_matrix:
        n = len(self.positions)
        sub = cKDTree(self.positions[start:stop])
        pairs = sub.sparse_distance_matrix(self.tree, self.cutoff, output_type="ndarray")
        i = pairs["i"].astype(np.int64)
        j = pairs["j"].astype(np.int64)
        keep = (i + start) != j
        i, j = i[keep], j[keep]
        d2 = np.sum((self.feats[i + start] - self.feats[j]) ** 2, axis=1)
        w = np.exp(-d2 / (2.0 * self.theta**2))
        m = sparse.csr_matrix((w, (i, j)), shape=(stop - start, n))
        m.sum_duplicates()
        m.sort_indices()
        return m

    def blocks(self):
        if self._cache is not None:
            yield from self._cache
            return
        n = len(self.positions)
        fresh, total = [], 0
        for start in range(0, n, self.chunk):
            block = self._rows(start, min(start + self.chunk, n))
            total += block.nnz
            if fresh is not None:
                fresh = fresh + [(start, block)] if total <= self.cache_pairs else None
            yield start, block
        if fresh is not None:
            self._cache = fresh

    def __matmul__(self, q: np.ndarray) -> np.ndarray:
        out = np.empty_like(q, dtype=np.float64)
        for start, block in self.blocks():
            out[start : start + block.shape[0]] = block @ q
        return out


def meanfield_step(Q, unary, params: CrfParams, positions=None, dims=None, kernel=None) -> np.ndarray:
    """One synchronous update Q_i(l) ∝ unary_i(l) * exp(w * sum_j k_ij Q_j(l)).

    ``Q`` and ``unary`` are (N, L) arrays (or LabelDistribution). Either a
    prebuilt ``kernel`` or ``positions``/``dims`` must be given.
    """
    q = Q.probs if isinstance(Q, LabelDistribution) else np.asarray(Q, dtype=np.float64)
    u = unary.probs if isinstance(unary, LabelDistribution) else np.asarray(unary, dtype=np.float64)
    if kernel is None:
        kernel = PairwiseKernel(positions, dims, params.theta, params.kernel_cutoff)
    logits = np.log(u)
    if params.pairwise_weight > 0 and len(q) > 1:
        logits = logits + params.pairwise_weight * (kernel @ q)
    logits -= logits.max(axis=1, keepdims=True)
    e = np.exp(logits)
    return e / e.sum(axis=1, keepdims=True)


def crf_infer(grid: SparseVoxelGrid, params: CrfParams = CrfParams()):
    """Run unary construction and ``params.iterations`` mean-field steps.

    Returns ``(LabelDistribution of the final iterate, unary)``.
    """
    unary = build_unary(grid)
    positions = grid.spec.from_linear(unary.voxels)
    kernel = PairwiseKernel(positions, grid.spec.dims, params.theta, params.kernel_cutoff)
    q = unary.probs
    for _ in range(params.iterations):
        q = meanfield_step(q, unary.probs, params, kernel=kernel)
    return LabelDistribution(unary.voxels, unary.labels, q), unary


def crf_refine(grid: SparseVoxelGrid, params: CrfParams = CrfParams()) -> SparseVoxelGrid:
    """Expand instance labels into unlabelled occupied voxels.

    Seeds keep their IDs. An unlabelled voxel takes its argmax label (lowest
    ID on ties) if a seed lies within ``iterations`` kernel hops of it;
    voxels no label evidence can reach stay unlabelled.
    """
    if not grid.is_fused():
        raise ValueError("grid must be fused (labels within occupancy) before CRF")
    dist, _ = crf_infer(grid, params)
    q = dist.probs
    best = dist.labels[np.argmax(q, axis=1)]
    is_seed = np.isin(dist.voxels, grid.label_index, assume_unique=True)
    reached = _reach(dist.voxels, grid.spec, is_seed, params) if params.pairwise_weight > 0 else is_seed
    new = reached & ~is_seed
    idx = np.concatenate([grid.label_index, dist.voxels[new]])
    ids = np.concatenate([grid.label_ids.astype(np.int64), best[new]])
    return SparseVoxelGrid(grid.spec, idx, ids, grid.occupancy)


def _reach(voxels, spec, seeds, params: CrfParams) -> np.ndarray:
    # voxels connected to a seed by at most `iterations` kernel hops
    tree = cKDTree(spec.from_linear(voxels).astype(np.float64))
    reached = seeds.copy()
    frontier = np.flatnonzero(seeds)
    for _ in range(params.iterations):
        if len(frontier) == 0:
            break
        hits = tree.query_ball_point(tree.data[frontier], params.kernel_cutoff, return_sorted=False)
        cand = np.unique(np.concatenate([np.asarray(h, dtype=np.int64) for h in hits]))
        cand = cand[~reached[cand]]
        reached[cand] = True
        frontier = cand
    return reached
