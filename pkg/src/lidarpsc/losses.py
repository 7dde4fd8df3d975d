"""Reference training losses with analytic gradients, and optimal assignment.

Every loss ``f(x, ...)`` has a companion ``f_grad`` returning d f / d x for
the first argument, computed in closed form.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.sparse import csr_matrix
from scipy.sparse.csgraph import maximum_bipartite_matching

from .errors import AllIgnored

PROB_EPS = 1e-7
DICE_EPS = 1e-6


@dataclass(frozen=True)
class LossWeights:
    occ: float = 1.0
    prot: float = 1.0
    mask: float = 40.0
    clip: float = 1.0
    ce: float = 2.0
    dice: float = 1.0
    occ_pos_weight: float = 20.0

    def __post_init__(self):
        for k, v in self.__dict__.items():
            if v < 0:
                raise ValueError(f"loss weight {k} must be >= 0")


def _clamp(p):
    return np.clip(np.asarray(p, dtype=np.float64), PROB_EPS, 1 - PROB_EPS)


# ---------------------------------------------------------------------------
# weighted BCE


def wbce(p, t, pos_weight: float = 1.0) -> float:
    p, t = _clamp(p), np.asarray(t, dtype=np.float64)
    return float(np.mean(-(pos_weight * t * np.log(p) + (1 - t) * np.log(1 - p))))


def wbce_grad(p, t, pos_weight: float = 1.0) -> np.ndarray:
    raw = np.asarray(p, dtype=np.float64)
    p, t = _clamp(raw), np.asarray(t, dtype=np.float64)
    g = -(pos_weight * t / p - (1 - t) / (1 - p)) / p.size
    return np.where(raw == p, g, 0.0)


# ---------------------------------------------------------------------------
# mask BCE + Dice with ignore mask


def _masked_rows(p, t, ignore_mask):
    p = np.atleast_2d(np.asarray(p, dtype=np.float64))
    t = np.atleast_2d(np.asarray(t, dtype=np.float64))
    keep = np.ones_like(p, dtype=bool) if ignore_mask is None else ~np.atleast_2d(np.asarray(ignore_mask, bool))
    keep = np.broadcast_to(keep, p.shape)
    if not np.any(keep):
        raise AllIgnored("every voxel is ignored")
    return p, t, keep


def bce_dice(p, t, ignore_mask=None, lambda_ce: float = 2.0, lambda_dice: float = 1.0) -> float:
    """``lambda_ce * BCE + lambda_dice * Dice`` over non-ignored voxels.

    ``p``/``t`` are (V,) or (masks, V); Dice is taken per mask and averaged.
    Dice = 1 - (2 sum pt + eps) / (sum p + sum t + eps).
    """
    p, t, keep = _masked_rows(p, t, ignore_mask)
    pc = _clamp(p)
    ce = -(t * np.log(pc) + (1 - t) * np.log(1 - pc))
    ce = ce[keep].mean()
    pk, tk = np.where(keep, p, 0), np.where(keep, t, 0)
    inter = (pk * tk).sum(1)
    s = pk.sum(1) + tk.sum(1)
    dice = 1 - (2 * inter + DICE_EPS) / (s + DICE_EPS)
    return float(lambda_ce * ce + lambda_dice * dice.mean())


def bce_dice_grad(p, t, ignore_mask=None, lambda_ce: float = 2.0, lambda_dice: float = 1.0) -> np.ndarray:
    shape = np.shape(p)
    p, t, keep = _masked_rows(p, t, ignore_mask)
    pc = _clamp(p)
    n = keep.sum()
    g_ce = np.where(keep & (pc == p), -(t / pc - (1 - t) / (1 - pc)) / n, 0.0)
    pk, tk = np.where(keep, p, 0), np.where(keep, t, 0)
    inter = (pk * tk).sum(1, keepdims=True)
    s = pk.sum(1, keepdims=True) + tk.sum(1, keepdims=True)
    g_dice = -(2 * tk * (s + DICE_EPS) - (2 * inter + DICE_EPS)) / (s + DICE_EPS) ** 2
    g_dice = np.where(keep, g_dice, 0.0) / p.shape[0]
    return (lambda_ce * g_ce + lambda_dice * g_dice).reshape(shape)


# ---------------------------------------------------------------------------
# cross-entropy + Lovász-softmax


def _softmax(z):
    z = np.asarray(z, dtype=np.float64)
    e = np.exp(z - z.max(axis=1, keepdims=True))
    return e / e.sum(axis=1, keepdims=True)


def lovasz_grad(gt_sorted) -> np.ndarray:
    """Gradient of the Lovász extension of the Jaccard loss w.r.t. sorted errors."""
    gt_sorted = np.asarray(gt_sorted, dtype=np.float64)
    gts = gt_sorted.sum()
    inter = gts - np.cumsum(gt_sorted)
    union = gts + np.cumsum(1 - gt_sorted)
    jac = 1.0 - inter / union
    if len(gt_sorted) > 1:
        jac[1:] = jac[1:] - jac[:-1]
    return jac


def _lovasz_parts(probs, labels):
    c = probs.shape[1]
    parts = []
    for k in range(c):
        fg = (labels == k).astype(np.float64)
        if fg.sum() == 0:
            continue
        err = np.abs(fg - probs[:, k])
        order = np.argsort(-err, kind="stable")
        parts.append((k, fg, err, order, lovasz_grad(fg[order])))
    return parts


def lovasz_softmax(probs, labels, ignore_mask=None) -> float:
    """Lovász-softmax averaged over classes present in ``labels``."""
    probs = np.asarray(probs, dtype=np.float64)
    labels = np.asarray(labels)
    if ignore_mask is not None:
        keep = ~np.asarray(ignore_mask, bool)
        probs, labels = probs[keep], labels[keep]
    if len(labels) == 0:
        raise AllIgnored("every voxel is ignored")
    parts = _lovasz_parts(probs, labels)
    return float(np.mean([err[order] @ g for _, _, err, order, g in parts]))


def _checked(logits, labels, ignore_mask):
    z = np.asarray(logits, dtype=np.float64)
    labels = np.asarray(labels)
    if z.ndim != 2 or z.shape[1] < 2:
        raise ValueError("logits must be (N, C) with C >= 2")
    keep = np.ones(len(z), bool) if ignore_mask is None else ~np.asarray(ignore_mask, bool)
    if not np.any(keep):
        raise AllIgnored("every voxel is ignored")
    return z, labels, keep


def lovasz_ce(logits, labels, ignore_mask=None, w_ce: float = 1.0, w_lovasz: float = 1.0) -> float:
    """Cross-entropy plus Lovász-softmax on per-voxel class logits."""
    z, labels, keep = _checked(logits, labels, ignore_mask)
    p = _softmax(z[keep])
    y = labels[keep]
    ce = -np.mean(np.log(np.maximum(p[np.arange(len(y)), y], 1e-300)))
    return float(w_ce * ce + w_lovasz * lovasz_softmax(p, y))


def lovasz_ce_grad(logits, labels, ignore_mask=None, w_ce: float = 1.0, w_lovasz: float = 1.0) -> np.ndarray:
    z, labels, keep = _checked(logits, labels, ignore_mask)
    p = _softmax(z[keep])
    y = labels[keep]
    n = len(y)
    onehot = np.zeros_like(p)
    onehot[np.arange(n), y] = 1
    g_ce = (p - onehot) / n
    dp = np.zeros_like(p)
    parts = _lovasz_parts(p, y)
    for k, fg, _, order, g in parts:
        # d err_i / d p_ik = -1 on foreground voxels, +1 elsewhere
        sign = np.where(fg > 0, -1.0, 1.0)
        dp[order, k] += g * sign[order] / len(parts)
    g_lov = p * (dp - (p * dp).sum(1, keepdims=True))
    out = np.zeros_like(z)
    out[keep] = w_ce * g_ce + w_lovasz * g_lov
    return out


# ---------------------------------------------------------------------------
# cosine embedding


def cosine_embedding(pred, target) -> float:
    a = np.atleast_2d(np.asarray(pred, dtype=np.float64))
    b = np.atleast_2d(np.asarray(target, dtype=np.float64))
    cos = (a * b).sum(1) / (np.linalg.norm(a, axis=1) * np.linalg.norm(b, axis=1))
    return float(np.mean(1 - cos))


def cosine_embedding_grad(pred, target) -> np.ndarray:
    shape = np.shape(pred)
    a = np.atleast_2d(np.asarray(pred, dtype=np.float64))
    b = np.atleast_2d(np.asarray(target, dtype=np.float64))
    na = np.linalg.norm(a, axis=1, keepdims=True)
    nb = np.linalg.norm(b, axis=1, keepdims=True)
    cos = (a * b).sum(1, keepdims=True) / (na * nb)
    g = -(b / (na * nb) - cos * a / na**2) / len(a)
    return g.reshape(shape)


# ---------------------------------------------------------------------------
# combinators


def multi_scale_mean(per_scale) -> float:
    """Average of per-scale loss values (e.g. scales 1, 2, 4)."""
    v = list(per_scale)
    if not v:
        raise ValueError("no scales")
    return float(np.mean(v))


def total_loss(weights: LossWeights, occ: float, prot: float, mask: float, clip: float) -> float:
    return weights.occ * occ + weights.prot * prot + weights.mask * mask + weights.clip * clip


# ---------------------------------------------------------------------------
# assignment


def _hungarian_square(cost: np.ndarray):
    """Shortest-augmenting-path Hungarian method on an n x n matrix.

    Returns (col_of_row, u, v) with dual potentials u (rows), v (cols).
    """
    n = cost.shape[0]
    u = np.zeros(n + 1)
    v = np.zeros(n + 1)
    p = np.zeros(n + 1, dtype=np.int64)  # p[j]: row (1-based) assigned to column j
    way = np.zeros(n + 1, dtype=np.int64)
    for i in range(1, n + 1):
        p[0] = i
        j0 = 0
        minv = np.full(n + 1, np.inf)
        used = np.zeros(n + 1, dtype=bool)
        while True:
            used[j0] = True
            i0 = p[j0]
            free = ~used[1:]
            cur = cost[i0 - 1] - u[i0] - v[1:]
            upd = free & (cur < minv[1:])
            minv[1:][upd] = cur[upd]
            way[1:][upd] = j0
            cand = np.where(free, minv[1:], np.inf)
            j1 = int(np.argmin(cand)) + 1
            delta = cand[j1 - 1]
            u[p[used]] += delta
            v[used] -= delta
            minv[~used] -= delta
            j0 = j1
            if p[j0] == 0:
                break
        while j0:
            j1 = way[j0]
            p[j0] = p[j1]
            j0 = j1
    col_of_row = np.empty(n, dtype=np.int64)
    col_of_row[p[1:] - 1] = np.arange(n)
    return col_of_row, u[1:], v[1:]


def _has_perfect_matching(adj: np.ndarray) -> bool:
    if adj.shape[0] == 0:
        return True
    m = maximum_bipartite_matching(csr_matrix(adj.astype(np.int8)), perm_type="column")
    return bool(np.all(m >= 0))


def hungarian(cost, lexicographic: bool = True):
    """Minimum-cost one-to-one assignment of min(n, m) pairs.

    Returns ``(rows, cols)`` sorted by row. Among optimal assignments the
    lexicographically smallest column sequence is returned when
    ``lexicographic`` is set.
    """
    c = np.asarray(cost, dtype=np.float64)
    if c.ndim != 2:
        raise ValueError("cost must be a 2-D matrix")
    if not np.all(np.isfinite(c)):
        raise ValueError("costs must be finite")
    n, m = c.shape
    if n == 0 or m == 0:
        return np.zeros(0, np.int64), np.zeros(0, np.int64)
    k = max(n, m)
    sq = np.zeros((k, k))
    sq[:n, :m] = c
    col_of_row, u, v = _hungarian_square(sq)

    if lexicographic:
        scale = max(1.0, float(np.abs(c).max()))
        tight = np.abs(sq - u[:, None] - v[None, :]) <= 1e-10 * scale * k
        allowed = tight.copy()
        # fix real rows one by one to their smallest column that still
        # admits a perfect matching inside the tight (zero reduced cost) graph
        for i in range(n):
            for j in np.flatnonzero(allowed[i]):
                trial = allowed.copy()
                trial[i, :] = False
                trial[:, j] = False
                trial[i, j] = True
                if _has_perfect_matching(trial):
                    allowed = trial
                    break
        m_ = maximum_bipartite_matching(csr_matrix(allowed.astype(np.int8)), perm_type="column")
        if np.all(m_ >= 0):
            col_of_row = np.asarray(m_, dtype=np.int64)

    rows = np.arange(k)
    keep = (rows < n) & (col_of_row < m)
    return rows[keep], col_of_row[keep]


def assignment_cost(cost, rows, cols) -> float:
    c = np.asarray(cost, dtype=np.float64)
    return math.fsum(c[r, j] for r, j in zip(rows, cols))
