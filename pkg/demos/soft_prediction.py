"""Turn soft query masks into a panoptic grid, score it and fit boxes.

    python3 demos/soft_prediction.py
"""

import numpy as np

from lidarpsc.geom import VoxelGridSpec
from lidarpsc.io import GroundTruthGrid
from lidarpsc.metrics import PanopticGrid, match_and_score
from lidarpsc.postprocess import SoftPrediction, fit_box, to_panoptic
from lidarpsc.semantics import ClassVocabulary, VocabClass

spec = VoxelGridSpec()
rng = np.random.default_rng(0)

# two boxes of ground truth: a car (thing, code 1) and a slab of road (stuff, code 2)
labels = np.zeros(spec.dims, np.uint16)
instances = np.zeros(spec.dims, np.uint16)
labels[100:120, 120:130, 10:15] = 1
instances[100:120, 120:130, 10:15] = 1
labels[:, :, 5] = 2
gt = GroundTruthGrid(labels, instances, np.zeros(spec.dims, bool))

# three queries: a good car mask, a shifted duplicate and the road
occupied = np.argwhere(labels > 0)
car = (labels[tuple(occupied.T)] == 1).astype(np.float32)
dup = np.roll(car, 30)
road = (labels[tuple(occupied.T)] == 2).astype(np.float32)
probs = np.stack([0.9 * car, 0.6 * dup, 0.8 * road])
pred = SoftPrediction(occupied, probs, rng.standard_normal((3, 32)))

grid, records, scores = to_panoptic(pred, spec, tau_vox=0.3, tau_obj=0.5, tau_ovr=0.4)
print("kept queries (instance id -> objectness):", {k: round(v, 3) for k, v in scores.items()})

vocab = ClassVocabulary([VocabClass("car", True, np.eye(1, 4, 0), 1), VocabClass("road", False, np.eye(1, 4, 1), 2)])
class_of = {r.instance_id: (1 if len(r.voxels) < 5000 else 2) for r in records}
report = match_and_score(PanopticGrid.from_sparse(grid, class_of), gt, vocab)
print(f"PQ {report.PQ:.3f}  PQ-dagger {report.PQ_dagger:.3f}")
for s in report.per_class:
    print(f"  class {s.code}: PQ {s.pq:.3f} SQ {s.sq:.3f} RQ {s.rq:.3f}")

for r in records:
    box = fit_box(r.voxels, spec)
    print(f"  box {r.instance_id}: centre {np.round(box.center, 2)} size {np.round(box.size, 2)} yaw {box.yaw:.3f}")
