import sys
from pathlib import Path

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

sys.path.insert(0, str(Path(__file__).parent))

settings.register_profile(
    "default", max_examples=60, deadline=None, suppress_health_check=[HealthCheck.too_slow]
)
settings.load_profile("default")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def scene(tmp_path_factory):
    from lidarpsc.synthetic import write_scene

    return write_scene(tmp_path_factory.mktemp("scene"))


@pytest.fixture(scope="session")
def labeled_scene(scene):
    """Reference-frame pseudo labels under both profiles, with and without CRF."""
    from lidarpsc.config import RunConfig
    from lidarpsc.crf import crf_refine
    from lidarpsc.grid import sync_instances
    from lidarpsc.pipeline import SequenceLabeler

    out = {}
    manifest = scene.manifest()
    for profile in ("semantic_kitti", "kitti360"):
        labeler = SequenceLabeler(manifest, RunConfig(dataset_profile=profile, jobs=2))
        grid, instances, stats = labeler.label(scene.params.reference)
        refined = crf_refine(grid, labeler.cfg.crf)
        out[profile] = {
            "raw": (grid, instances, stats),
            "crf": (refined, sync_instances(refined, instances), stats),
        }
    return out


@pytest.fixture(scope="session")
def pseudo_label_runs(scene, tmp_path_factory):
    """Two independent kitti360 runs with CRF on the reference frame, one per worker count."""
    from lidarpsc.config import RunConfig
    from lidarpsc.pipeline import run_pseudo_labeling

    out = []
    for jobs in (1, 4):
        cfg = RunConfig(dataset_profile="kitti360", jobs=jobs, reference_frames=[scene.params.reference])
        d = tmp_path_factory.mktemp(f"run{jobs}")
        (path,) = run_pseudo_labeling(scene.manifest(), cfg, d, crf=True)
        out.append(path)
    return out
