"""Pseudo-label a generated sequence, expand it with the CRF and name the objects.

    python3 demos/synthetic_sequence.py [workdir]
"""

import sys
import tempfile

from lidarpsc.config import RunConfig
from lidarpsc.crf import crf_refine
from lidarpsc.grid import sync_instances
from lidarpsc.io import read_gt_grid
from lidarpsc.metrics import coverage
from lidarpsc.pipeline import SequenceLabeler
from lidarpsc.semantics import ClassVocabulary, classify_instances
from lidarpsc.synthetic import write_scene

root = sys.argv[1] if len(sys.argv) > 1 else tempfile.mkdtemp(prefix="lidarpsc-")
scene = write_scene(root, dataset_profile="kitti360")
print(f"scene written to {root}: {scene.params.n_frames} frames")

gt = read_gt_grid(scene.gt_path, scene.spec)
vocab = ClassVocabulary.load(scene.vocabulary_path)
for profile in ("semantic_kitti", "kitti360"):
    labeler = SequenceLabeler(scene.manifest(), RunConfig(dataset_profile=profile))
    grid, instances, stats = labeler.label(scene.params.reference)
    refined = crf_refine(grid, labeler.cfg.crf)
    before, after = coverage(grid, gt)[0], coverage(refined, gt)[0]
    print(f"\n[{profile}] {stats['label_frames']} label frames, {stats['occupancy_frames']} occupancy frames")
    print(f"  dynamic instances dropped: {stats['discarded_dynamic']}")
    print(f"  label coverage {before:.2f}% -> {after:.2f}% after the CRF")
    for iid, r in classify_instances(sync_instances(refined, instances), vocab).items():
        print(f"  instance {iid:3d}: {r['class']:<11s} score {r['score']:.3f} margin {r['margin']:.3f}")
