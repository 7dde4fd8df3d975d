"""Command line entry point: ``lidarpsc <subcommand> ...``.

Settings come from the dataset profile, then an optional JSON config file,
then command-line flags. Every stage logs one JSON object to stderr; on
failure a JSON error object goes to stderr and the exit code reflects the
error class (2 config, 3 data, 4 internal invariant).
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import time
from dataclasses import asdict, fields
from pathlib import Path

import numpy as np

from .boxes import OrientedBox
from .config import PROFILES, RunConfig
from .crf import crf_refine
from .errors import ConfigError, EmptyInput, MalformedFile, PscError
from .grid import FEATURE_DIM, InstanceRecord, sync_instances
from .io import (
    SequenceManifest,
    _write_bytes,
    read_fvec,
    write_fvec,
    read_gt_grid,
    read_pseudo_labels,
    write_pseudo_labels,
)
from .metrics import PanopticGrid, coverage, match_and_score, ssc_scores
from .pipeline import log_stage, run_pseudo_labeling
from .postprocess import fit_box, read_soft_prediction, to_panoptic
from .semantics import ClassVocabulary, classify_instances, kmeans_prototypes, semantic_oracle

log = logging.getLogger("lidarpsc")


def _profile_table() -> str:
    lines = ["config knobs and their per-profile defaults:"]
    for name, prof in PROFILES.items():
        cfg = RunConfig(dataset_profile=name)
        lines.append(f"  [{name}]")
        for f in fields(RunConfig):
            value = getattr(cfg, f.name)
            if hasattr(value, "__dataclass_fields__"):
                value = asdict(value)
            lines.append(f"    {f.name} = {value}")
        lines.append(f"    grid = origin {prof.grid.origin}, voxel {prof.grid.voxel_size}, dims {prof.grid.dims}")
        lines.append(f"    alignment_shift (dataset) = {prof.alignment_shift}")
        lines.append(f"    loss weights = {asdict(prof.losses)}")
    return "\n".join(lines)


def _dump(obj, path) -> None:
    """Canonical JSON to ``path`` (or stdout), byte-stable for equal inputs."""
    text = json.dumps(obj, indent=1, sort_keys=True) + "\n"
    if path is None or str(path) == "-":
        sys.stdout.write(text)
    else:
        _write_bytes(path, text.encode())


def _need(path, what: str) -> Path:
    if path is None:
        raise ConfigError(f"missing {what}")
    p = Path(path)
    if not p.exists():
        raise ConfigError(f"{what} {p} does not exist")
    return p


def _config(args) -> RunConfig:
    overrides = {}
    for key in ("dataset_profile", "manifest", "vocabulary", "output_dir", "seed", "jobs", "overlap_mode"):
        value = getattr(args, key, None)
        if value is not None:
            overrides[key] = value
    if getattr(args, "crf_iterations", None) is not None:
        overrides["crf"] = {"iterations": args.crf_iterations}
    taus = {k: getattr(args, k, None) for k in ("tau_vox", "tau_obj", "tau_ovr")}
    if any(v is not None for v in taus.values()):
        overrides["thresholds"] = {k: v for k, v in taus.items() if v is not None}
    if getattr(args, "reference_frames", None):
        overrides["reference_frames"] = args.reference_frames
    if getattr(args, "dynamic_removal", None) is not None:
        overrides["dynamic_removal"] = args.dynamic_removal
    if args.config:
        cfg = RunConfig.load(_need(args.config, "config file"), overrides)
    else:
        if "jobs" not in overrides:
            overrides["jobs"] = os.cpu_count() or 1
        cfg = RunConfig.from_dict(overrides)
    return cfg


def _vocab(cfg: RunConfig) -> ClassVocabulary:
    return ClassVocabulary.load(_need(cfg.vocabulary, "vocabulary"))


def _load_prediction(path, cfg: RunConfig):
    """A CALP file as-is, or a CALQ file through post-processing."""
    path = _need(path, "prediction")
    with open(path, "rb") as f:
        magic = f.read(4)
    if magic == b"CALQ":
        pred = read_soft_prediction(path)
        th = cfg.thresholds
        grid, instances, _ = to_panoptic(pred, _spec_of(cfg), th.tau_vox, th.tau_obj, th.tau_ovr, cfg.overlap_mode)
        return grid, instances
    return read_pseudo_labels(path)


def _spec_of(cfg: RunConfig):
    return cfg.profile.grid


# ---------------------------------------------------------------------------
# subcommands


def cmd_pseudo_label(args, cfg: RunConfig) -> dict:
    manifest = SequenceManifest.load(_need(cfg.manifest, "manifest"))
    written = run_pseudo_labeling(manifest, cfg, cfg.output_dir, crf=not args.no_crf)
    return {"written": [str(p) for p in written]}


def cmd_crf(args, cfg: RunConfig) -> dict:
    grid, instances = read_pseudo_labels(_need(args.input, "input"))
    before = grid.n_labeled
    refined = crf_refine(grid, cfg.crf)
    write_pseudo_labels(refined, sync_instances(refined, instances), args.output)
    return {"output": str(args.output), "labeled_before": before, "labeled_after": refined.n_labeled}


def _class_map(grid, instances, vocab, gt=None) -> dict:
    if gt is not None:
        return {r.instance_id: semantic_oracle(r.voxels, gt) for r in instances}
    return {k: v["code"] for k, v in classify_instances(instances, vocab).items()}


def cmd_evaluate(args, cfg: RunConfig) -> dict:
    vocab = _vocab(cfg)
    grid, instances = _load_prediction(args.pred, cfg)
    gt = read_gt_grid(_need(args.gt, "ground truth"), grid.spec)
    class_of = _class_map(grid, instances, vocab, gt if args.semantic_oracle else None)
    pred = PanopticGrid.from_sparse(grid, class_of)
    report = match_and_score(pred, gt, vocab, masked=args.masked)
    report.mIoU, report.IoU, _ = ssc_scores(pred.classes, gt, classes=vocab.codes)
    lab, occ = coverage(grid, gt)
    report.coverage = {"label": lab, "occupancy": occ}
    report.metadata["semantic_oracle"] = bool(args.semantic_oracle)
    out = report.to_json()
    _dump(out, args.output)
    return {"PQ": out["PQ"], "PQ_dagger": out["PQ_dagger"], "output": args.output}


def cmd_classify(args, cfg: RunConfig) -> dict:
    vocab = _vocab(cfg)
    _, instances = _load_prediction(args.input, cfg)
    result = {str(k): v for k, v in classify_instances(instances, vocab).items()}
    _dump(result, args.output)
    return {"instances": len(result), "output": args.output}


def cmd_postprocess(args, cfg: RunConfig) -> dict:
    pred = read_soft_prediction(_need(args.input, "input"))
    th = cfg.thresholds
    grid, instances, scores = to_panoptic(pred, _spec_of(cfg), th.tau_vox, th.tau_obj, th.tau_ovr, cfg.overlap_mode)
    if not instances:
        raise EmptyInput("no query survived thresholding; nothing to write")
    padded = [InstanceRecord(r.instance_id, r.voxels, _pad_feature(r.feature)) for r in instances]
    write_pseudo_labels(grid, padded, args.output)
    return {"output": str(args.output), "kept": len(instances), "objectness": scores}


def _pad_feature(f: np.ndarray) -> np.ndarray:
    if len(f) == FEATURE_DIM:
        return f
    if len(f) > FEATURE_DIM:
        raise MalformedFile(f"query features of dimension {len(f)} exceed {FEATURE_DIM}")
    return np.concatenate([f, np.zeros(FEATURE_DIM - len(f))])


def cmd_boxes(args, cfg: RunConfig) -> dict:
    grid, instances = _load_prediction(args.input, cfg)
    labels = {}
    if cfg.vocabulary:
        labels = classify_instances(instances, _vocab(cfg))
    rows = []
    for rec in sorted(instances, key=lambda r: r.instance_id):
        if len(rec.voxels) == 0:
            continue
        box: OrientedBox = fit_box(rec.voxels, grid.spec)
        row = {"instance_id": rec.instance_id, **box.to_json()}
        if rec.instance_id in labels:
            row["class"] = labels[rec.instance_id]["class"]
            row["score"] = labels[rec.instance_id]["score"]
        rows.append(row)
    text = "".join(json.dumps(r, sort_keys=True) + "\n" for r in rows)
    if args.output in (None, "-"):
        sys.stdout.write(text)
    else:
        _write_bytes(args.output, text.encode())
    return {"boxes": len(rows), "output": args.output}


def cmd_coverage(args, cfg: RunConfig) -> dict:
    grid, _ = read_pseudo_labels(_need(args.input, "input"))
    gt = read_gt_grid(_need(args.gt, "ground truth"), grid.spec)
    lab, occ = coverage(grid, gt)
    _dump({"label_coverage": lab, "occupancy_coverage": occ}, args.output)
    return {"label_coverage": lab, "occupancy_coverage": occ}


def cmd_prototypes(args, cfg: RunConfig) -> dict:
    feats = []
    for p in args.inputs:
        p = _need(p, "input")
        with open(p, "rb") as f:
            magic = f.read(4)
        if magic == b"CALP":
            feats.extend(r.feature for r in read_pseudo_labels(p)[1])
        else:
            feats.extend(read_fvec(p))
    book = kmeans_prototypes(np.asarray(feats), args.prototypes, seed=cfg.seed)
    report = book.report()
    _dump(report, args.output)
    if args.centers:
        write_fvec(args.centers, book.centers)
    return {"n_prototypes": report["n_prototypes"], "inertia": report["inertia"]}


# ---------------------------------------------------------------------------
# parser


def _parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON config file (flags override it)")
    common.add_argument("--profile", dest="dataset_profile", choices=sorted(PROFILES), help="dataset profile preset")
    common.add_argument("--vocabulary", help="vocabulary JSON")
    common.add_argument("--seed", type=int)
    common.add_argument("--jobs", type=int, help="frame-level workers (default: all cores)")
    common.add_argument("--log-level", default="INFO")

    top = argparse.ArgumentParser(
        prog="lidarpsc",
        description="Pseudo-labelling and evaluation for Lidar panoptic scene completion.",
        epilog=_profile_table(),
        formatter_class=argparse.RawDescriptionHelpFormatter,
    )
    sub = top.add_subparsers(dest="command", required=True)

    thresholds = argparse.ArgumentParser(add_help=False)
    thresholds.add_argument("--tau-vox", type=float)
    thresholds.add_argument("--tau-obj", type=float)
    thresholds.add_argument("--tau-ovr", type=float)
    thresholds.add_argument("--overlap-mode", choices=["smaller", "iou"])

    def add(name, help_text, with_thresholds=False):
        parents = [common, thresholds] if with_thresholds else [common]
        return sub.add_parser(
            name, parents=parents, help=help_text, epilog=_profile_table(), formatter_class=argparse.RawDescriptionHelpFormatter
        )

    p = add("pseudo-label", "manifest -> one CALP file per reference frame")
    p.add_argument("--manifest")
    p.add_argument("--output-dir", dest="output_dir")
    p.add_argument("--reference-frames", type=int, nargs="+")
    p.add_argument("--crf-iterations", type=int)
    p.add_argument("--no-crf", action="store_true", help="skip the CRF expansion step")
    dyn = p.add_mutually_exclusive_group()
    dyn.add_argument("--dynamic-removal", dest="dynamic_removal", action="store_true", default=None)
    dyn.add_argument("--no-dynamic-removal", dest="dynamic_removal", action="store_false")
    p.set_defaults(func=cmd_pseudo_label)

    p = add("crf", "CALP -> CRF-refined CALP")
    p.add_argument("input")
    p.add_argument("-o", "--output", required=True)
    p.add_argument("--crf-iterations", type=int)
    p.set_defaults(func=cmd_crf)

    p = add("evaluate", "prediction + ground truth + vocabulary -> JSON report", with_thresholds=True)
    p.add_argument("--pred", required=True, help="CALP or CALQ file")
    p.add_argument("--gt", required=True)
    p.add_argument("--semantic-oracle", action="store_true")
    p.add_argument("--masked", action="store_true")
    p.add_argument("-o", "--output")
    p.set_defaults(func=cmd_evaluate)

    p = add("classify", "CALP/CALQ + vocabulary -> per-instance classes", with_thresholds=True)
    p.add_argument("input")
    p.add_argument("-o", "--output")
    p.set_defaults(func=cmd_classify)

    p = add("postprocess", "CALQ soft prediction -> panoptic CALP grid", with_thresholds=True)
    p.add_argument("input")
    p.add_argument("-o", "--output", required=True)
    p.set_defaults(func=cmd_postprocess)

    p = add("boxes", "CALP/CALQ -> amodal boxes as JSON lines", with_thresholds=True)
    p.add_argument("input")
    p.add_argument("-o", "--output")
    p.set_defaults(func=cmd_boxes)

    p = add("coverage", "CALP + ground truth -> coverage JSON")
    p.add_argument("input")
    p.add_argument("--gt", required=True)
    p.add_argument("-o", "--output")
    p.set_defaults(func=cmd_coverage)

    p = add("prototypes", "feature files (FVEC or CALP) -> k-means prototype report")
    p.add_argument("inputs", nargs="+")
    p.add_argument("-k", "--prototypes", type=int, required=True)
    p.add_argument("--centers", help="also write the centers as FVEC")
    p.add_argument("-o", "--output")
    p.set_defaults(func=cmd_prototypes)
    return top


def _error(exc: BaseException, code: int) -> int:
    sys.stderr.write(json.dumps({"error": type(exc).__name__, "message": str(exc), "exit_code": code}) + "\n")
    return code


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    logging.basicConfig(level=args.log_level.upper(), format="%(message)s", stream=sys.stderr)
    try:
        cfg = _config(args)
        start = time.perf_counter()
        summary = args.func(args, cfg)
        log_stage(args.command, status="ok", seconds=round(time.perf_counter() - start, 3), **(summary or {}))
        return 0
    except PscError as e:
        return _error(e, e.exit_code)
    except (OSError, ValueError) as e:
        return _error(e, 3)
    except Exception as e:  # anything else is a bug on our side
        return _error(e, 4)


if __name__ == "__main__":
    sys.exit(main())
