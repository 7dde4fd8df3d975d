"""Pseudo-labelling and evaluation for zero-shot Lidar panoptic scene completion."""

from .boxes import OrientedBox, box_iou_3d, fit_upright_box, min_area_rect
from .config import PROFILES, Profile, RunConfig, Thresholds, load_profile
from .crf import CrfParams, LabelDistribution, build_unary, crf_infer, crf_refine, meanfield_step
from .errors import ConfigError, InvariantViolation, PscError
from .geom import CameraModel, PointCloud, RigidTransform, VoxelGridSpec, compose, project_points, voxel_index
from .grid import FEATURE_DIM, InstanceRecord, SparseVoxelGrid
from .io import (
    GroundTruthGrid,
    MaskletFrame,
    SequenceManifest,
    read_gt_grid,
    read_poses,
    read_pseudo_labels,
    read_scan,
    write_pseudo_labels,
)
from .labeling import (
    DBSCAN_EPS,
    LabeledPoints,
    TrackBox,
    WindowConfig,
    accumulate_occupancy,
    aggregate_window,
    dbscan,
    dbscan_refine,
    filter_dynamic,
    fit_ground_plane,
    fuse,
    lift_mask,
    voxelize_majority,
)
from .losses import LossWeights, bce_dice, cosine_embedding, hungarian, lovasz_ce, wbce
from .metrics import PanopticGrid, PanopticReport, coverage, match_and_score, ssc_scores
from .pipeline import SequenceLabeler, run_pseudo_labeling
from .postprocess import SoftPrediction, binarize, fit_box, suppress, to_panoptic
from .semantics import (
    ClassVocabulary,
    PrototypeBook,
    aggregate_features,
    classify_instances,
    classify_zero_shot,
    kmeans_prototypes,
    semantic_oracle,
)

__version__ = "0.1.0"
