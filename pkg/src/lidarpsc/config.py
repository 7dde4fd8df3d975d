"""Dataset profiles and run configuration.

The two presets carry the published per-dataset settings: temporal
windows, CRF iterations, dynamic-object removal, voxelization extents,
alignment shift and inference thresholds. Anything the method leaves open
(DBSCAN min points, RANSAC tolerance, CRF kernel) uses documented defaults.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields, replace

from .crf import CrfParams
from .errors import ConfigError
from .geom import VoxelGridSpec
from .labeling import DBSCAN_EPS, WindowConfig
from .losses import LossWeights


@dataclass(frozen=True)
class Thresholds:
    tau_vox: float
    tau_obj: float
    tau_ovr: float

    def __post_init__(self):
        for k in ("tau_vox", "tau_obj", "tau_ovr"):
            if not 0 <= getattr(self, k) <= 1:
                raise ValueError(f"{k} must lie in [0, 1]")


@dataclass(frozen=True)
class Profile:
    name: str
    window: WindowConfig
    crf: CrfParams
    dynamic_removal: bool
    alignment_shift: tuple
    thresholds: Thresholds
    grid: VoxelGridSpec = field(default_factory=VoxelGridSpec)
    scene_size: tuple = (51.2, 51.2, 6.4)
    losses: LossWeights = field(default_factory=LossWeights)


PROFILES = {
    "semantic_kitti": Profile(
        name="semantic_kitti",
        window=WindowConfig(t_fw=32, t_bw=8, stride=2, occ_fw=72, occ_bw=1, occ_stride=1),
        crf=CrfParams(iterations=5),
        dynamic_removal=False,
        alignment_shift=(0.0, 0.0, 0.0),
        thresholds=Thresholds(tau_vox=0.1, tau_obj=0.1, tau_ovr=0.1),
    ),
    "kitti360": Profile(
        name="kitti360",
        window=WindowConfig(t_fw=32, t_bw=8, stride=2, occ_fw=72, occ_bw=36, occ_stride=1),
        crf=CrfParams(iterations=5),
        dynamic_removal=True,
        alignment_shift=(0.79, 0.3, -0.25),
        thresholds=Thresholds(tau_vox=0.3, tau_obj=0.5, tau_ovr=0.4),
    ),
}


def load_profile(name: str) -> Profile:
    try:
        return PROFILES[name]
    except KeyError:
        raise ConfigError(f"unknown dataset profile {name!r}; choose from {sorted(PROFILES)}") from None


@dataclass
class RunConfig:
    """Everything a batch run needs; unset knobs fall back to the profile."""

    dataset_profile: str = "semantic_kitti"
    manifest: str | None = None
    vocabulary: str | None = None
    output_dir: str = "out"
    seed: int = 0
    jobs: int = 1
    window: WindowConfig | None = None
    crf: CrfParams | None = None
    thresholds: Thresholds | None = None
    dynamic_removal: bool | None = None
    alignment_shift: tuple | None = None
    dynamic_overlap: float = 0.5
    dbscan_eps: tuple = DBSCAN_EPS
    dbscan_min_pts: int = 5
    dbscan_iou: float = 0.5
    ground_threshold: float = 0.2
    ground_iterations: int = 200
    reference_frames: list | None = None
    reference_stride: int = 1
    overlap_mode: str = "smaller"

    def __post_init__(self):
        prof = load_profile(self.dataset_profile)
        if self.window is None:
            self.window = prof.window
        if self.crf is None:
            self.crf = prof.crf
        if self.thresholds is None:
            self.thresholds = prof.thresholds
        if self.dynamic_removal is None:
            self.dynamic_removal = prof.dynamic_removal
        if self.alignment_shift is not None:
            self.alignment_shift = tuple(float(v) for v in self.alignment_shift)
        self.dbscan_eps = tuple(float(e) for e in self.dbscan_eps)
        if self.jobs < 1:
            raise ConfigError("jobs must be >= 1")
        if self.overlap_mode not in ("smaller", "iou"):
            raise ConfigError("overlap_mode must be 'smaller' or 'iou'")

    @property
    def profile(self) -> Profile:
        return load_profile(self.dataset_profile)

    @classmethod
    def from_dict(cls, raw: dict) -> "RunConfig":
        raw = dict(raw)
        known = {f.name for f in fields(cls)}
        unknown = set(raw) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        nested = {"window": WindowConfig, "crf": CrfParams, "thresholds": Thresholds}
        base = load_profile(raw.get("dataset_profile", "semantic_kitti"))
        try:
            for key, typ in nested.items():
                if isinstance(raw.get(key), dict):
                    raw[key] = replace(getattr(base, key), **raw[key])
            return cls(**raw)
        except (TypeError, ValueError) as e:
            raise ConfigError(str(e)) from e

    @classmethod
    def load(cls, path, overrides: dict | None = None) -> "RunConfig":
        try:
            with open(path) as f:
                raw = json.load(f)
        except (OSError, json.JSONDecodeError) as e:
            raise ConfigError(f"{path}: {e}") from e
        raw.update(overrides or {})
        return cls.from_dict(raw)

    def to_json(self) -> dict:
        out = asdict(self)
        out["dbscan_eps"] = list(self.dbscan_eps)
        return out
