"""Instance features, prototype clustering and open-vocabulary classification."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import EmptyInput, MalformedFile, TooFewSamples, ZeroVector
from .io import GroundTruthGrid, read_fvec


def aggregate_features(per_frame) -> np.ndarray:
    """Unit-normalize each vector, average, renormalize."""
    v = np.asarray(per_frame, dtype=np.float64)
    if v.ndim == 1:
        v = v.reshape(1, -1)
    if v.size == 0 or len(v) == 0:
        raise EmptyInput("no feature vectors to aggregate")
    norms = np.linalg.norm(v, axis=1, keepdims=True)
    if np.any(norms == 0):
        raise ZeroVector("cannot normalize a zero feature vector")
    mean = (v / norms).mean(axis=0)
    n = np.linalg.norm(mean)
    if n == 0:
        raise ZeroVector("features cancel out")
    return mean / n


# ---------------------------------------------------------------------------
# vocabulary


@dataclass
class VocabClass:
    name: str
    is_thing: bool
    prompts: np.ndarray  # (P, F) unit rows
    code: int

    def __post_init__(self):
        p = np.asarray(self.prompts, dtype=np.float64)
        if p.ndim == 1:
            p = p.reshape(1, -1)
        if len(p) == 0:
            raise ValueError(f"class {self.name!r} has no prompt embeddings")
        self.prompts = p / np.linalg.norm(p, axis=1, keepdims=True)


@dataclass
class ClassVocabulary:
    classes: list = field(default_factory=list)

    def __post_init__(self):
        names = [c.name for c in self.classes]
        if len(set(names)) != len(names):
            raise ValueError("class names must be unique")
        codes = [c.code for c in self.classes]
        if len(set(codes)) != len(codes) or any(c <= 0 for c in codes):
            raise ValueError("class codes must be unique and positive")

    def __len__(self):
        return len(self.classes)

    @property
    def codes(self) -> list[int]:
        return [c.code for c in self.classes]

    def by_code(self, code: int) -> VocabClass:
        for c in self.classes:
            if c.code == code:
                return c
        raise KeyError(code)

    def thing_codes(self) -> set:
        return {c.code for c in self.classes if c.is_thing}

    @classmethod
    def from_dict(cls, classes: list[tuple]) -> "ClassVocabulary":
        """Build from ``[(name, is_thing, prompt_array), ...]``; codes are 1-based positions."""
        return cls([VocabClass(n, t, p, i + 1) for i, (n, t, p) in enumerate(classes)])

    @classmethod
    def load(cls, path) -> "ClassVocabulary":
        """JSON manifest ``{"classes": [{"name", "kind", "prompt_files", "code"?}]}``.

        Prompt files are FVEC files (one or more vectors each). ``code`` is
        the ground-truth class code and defaults to the 1-based position.
        """
        base = Path(path).parent
        try:
            with open(path) as f:
                raw = json.load(f)
            out = []
            for i, c in enumerate(raw["classes"]):
                if c["kind"] not in ("thing", "stuff"):
                    raise ValueError(f"kind must be 'thing' or 'stuff', got {c['kind']!r}")
                prompts = np.concatenate([read_fvec(base / p) for p in c["prompt_files"]])
                out.append(VocabClass(c["name"], c["kind"] == "thing", prompts, int(c.get("code", i + 1))))
            return cls(out)
        except (KeyError, TypeError, ValueError, json.JSONDecodeError) as e:
            raise MalformedFile(f"{path}: bad vocabulary manifest ({e})") from e


def classify_zero_shot(feature, vocab: ClassVocabulary):
    """Mean prompt cosine similarity per class; returns (class index, scores)."""
    f = np.asarray(feature, dtype=np.float64)
    n = np.linalg.norm(f)
    if n == 0:
        raise ZeroVector("cannot classify a zero feature")
    f = f / n
    scores = np.array([float(np.mean(c.prompts @ f)) for c in vocab.classes])
    return int(np.argmax(scores)), scores


def classify_instances(instances, vocab: ClassVocabulary) -> dict:
    """``{instance_id: {"class", "code", "score", "margin"}}`` for a record list.

    ``margin`` is the gap between the best and the runner-up class score.
    """
    out = {}
    for rec in instances:
        k, scores = classify_zero_shot(rec.feature, vocab)
        runner = np.max(np.delete(scores, k)) if len(scores) > 1 else -np.inf
        out[int(rec.instance_id)] = {
            "class": vocab.classes[k].name,
            "code": int(vocab.classes[k].code),
            "score": float(scores[k]),
            "margin": float(scores[k] - runner),
        }
    return out


# ---------------------------------------------------------------------------
# prototypes


@dataclass
class PrototypeBook:
    centers: np.ndarray  # (C, F)
    assignment: np.ndarray  # (M,) center index per input row
    inertia_history: list = field(default_factory=list)

    @property
    def inertia(self) -> float:
        return self.inertia_history[-1] if self.inertia_history else 0.0

    def report(self) -> dict:
        sizes = np.bincount(self.assignment, minlength=len(self.centers))
        return {
            "n_prototypes": int(len(self.centers)),
            "n_samples": int(len(self.assignment)),
            "cluster_sizes": sizes.tolist(),
            "inertia": float(self.inertia),
            "iterations": len(self.inertia_history),
        }


def _kmeans_pp(x: np.ndarray, c: int, rng) -> np.ndarray:
    m = len(x)
    centers = [x[rng.integers(m)]]
    d2 = np.sum((x - centers[0]) ** 2, axis=1)
    for _ in range(1, c):
        total = d2.sum()
        # all points already coincide with a center: duplicates are unavoidable
        idx = int(rng.choice(m, p=d2 / total)) if total > 0 else int(rng.integers(m))
        centers.append(x[idx])
        d2 = np.minimum(d2, np.sum((x - x[idx]) ** 2, axis=1))
    return np.array(centers)


def _assign(x, centers):
    d2 = (x**2).sum(1)[:, None] - 2 * x @ centers.T + (centers**2).sum(1)[None]
    d2 = np.maximum(d2, 0)
    a = np.argmin(d2, axis=1)
    return a, float(np.sum((x - centers[a]) ** 2))


def kmeans_prototypes(features, C: int, seed: int = 0, max_iter: int = 300) -> PrototypeBook:
    """Lloyd's k-means with k-means++ seeding.

    Stops when assignments no longer change or after ``max_iter`` rounds.
    A cluster that loses all members keeps its previous center.
    """
    x = np.asarray(features, dtype=np.float64)
    if x.ndim != 2 or len(x) < C or C < 1:
        raise TooFewSamples(f"need at least C={C} samples, got {len(x)}")
    rng = np.random.default_rng(seed)
    centers = _kmeans_pp(x, C, rng)
    assign, inertia = _assign(x, centers)
    history = [inertia]
    for _ in range(max_iter):
        new_centers = centers.copy()
        counts = np.bincount(assign, minlength=C)
        sums = np.zeros_like(centers)
        np.add.at(sums, assign, x)
        nz = counts > 0
        new_centers[nz] = sums[nz] / counts[nz, None]
        centers = new_centers
        new_assign, inertia = _assign(x, centers)
        history.append(inertia)
        if np.array_equal(new_assign, assign):
            break
        assign = new_assign
    return PrototypeBook(centers, assign, history)


# ---------------------------------------------------------------------------
# semantic oracle


def semantic_oracle(mask_voxels, gt: GroundTruthGrid):
    """Majority ground-truth class over the mask's valid, nonzero voxels.

    Ties go to the lowest class code; returns None without evidence.
    """
    v = np.asarray(mask_voxels, dtype=np.int64).reshape(-1, 3)
    if len(v) == 0:
        return None
    labels = gt.labels[v[:, 0], v[:, 1], v[:, 2]]
    valid = ~gt.invalid_mask[v[:, 0], v[:, 1], v[:, 2]] & (labels > 0)
    if not np.any(valid):
        return None
    counts = np.bincount(labels[valid])
    return int(np.argmax(counts))
