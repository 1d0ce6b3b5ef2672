"""Command line entry point: ``lanes3d <verb> ...``.

Exit codes: 0 success, 1 invalid input or parameters, 2 file-system trouble.
"""

from __future__ import annotations

import argparse
import csv
import logging
import math
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from . import io as lio
from .annotation import AnnotationConfig, GroundSegConfig, annotate_frame, estimate_height_band, interpolate_lane
from .augmentation import AugmentParams, augment_frame, restoring_crop, sample_params
from .errors import InvalidParams, LaneError
from .geometry import Lane3D, RigidTransform
from .metric import MatchConfig, evaluate_frames, summarize
from .reconstruction import fit_row_anchors
from .synthetic import (
    CurvatureParams,
    SceneParams,
    TerrainParams,
    default_lidar_extrinsics,
    make_scene,
    perturb_predictions,
    render_frame,
)

log = logging.getLogger("lanes3d")

TERRAIN_KINDS = ("flat", "ramp", "hills")
DEFAULT_CONFIG = {
    "generate": {
        "count": 10,
        "terrain": "mixed",
        "n_lanes": 4,
        "beam_count": 64,
        "azimuth_step": 0.2,
        "pointclouds": True,
        "predictions": {"noise_sigma": 0.1, "drop_rate": 0.1, "hallucinate_rate": 0.1},
    },
    "annotate": {
        "height_band": None,
        "band_margin": 1.5,
        "base_width_m": 0.4,
        "sample_step": None,
        "seed_count": 5,
        "growth_normal_tol": 10.0,
        "growth_radius": 0.5,
    },
    "match": MatchConfig().to_dict(),
    "augment": {"scale_range": [0.8, 1.2], "flip_prob": 0.5},
    "anchors": {"split": None, "beta_floor": 0.1},
}


def load_config(path) -> dict:
    cfg = {k: dict(v) for k, v in DEFAULT_CONFIG.items()}
    if path is None:
        return cfg
    user = lio.read_json(path)
    if not isinstance(user, dict):
        raise InvalidParams("config must be a JSON object")
    for section, values in user.items():
        if section not in cfg:
            raise InvalidParams(f"unknown config section {section!r}")
        if not isinstance(values, dict):
            raise InvalidParams(f"config section {section!r} must be an object")
        unknown = set(values) - set(cfg[section])
        if unknown:
            raise InvalidParams(f"unknown key(s) in {section!r}: {sorted(unknown)}")
        cfg[section].update(values)
    return cfg


def derive_seed(seed: int, index: int) -> int:
    """Independent, reproducible per-item seed."""
    return int(np.random.SeedSequence([seed, index]).generate_state(1)[0])


def pool_map(fn, items, jobs: int):
    """Ordered map; results do not depend on ``jobs``."""
    items = list(items)
    if jobs <= 1 or len(items) < 2:
        return [fn(it) for it in items]
    with ProcessPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(fn, items, chunksize=max(1, len(items) // (4 * jobs))))


# -- rig --------------------------------------------------------------------------------------


def write_rig(path, image_size, extr: RigidTransform) -> None:
    lio.write_json(path, {"image_size": list(image_size), "lidar_to_camera": extr.to_dict()})


def read_rig(path):
    d = lio.read_json(path)
    try:
        size = tuple(int(x) for x in d["image_size"])
        extr = RigidTransform.from_dict(d["lidar_to_camera"])
    except (KeyError, TypeError, ValueError) as exc:
        raise InvalidParams(f"bad rig file {str(path)!r}: {exc}") from None
    if len(size) != 2 or min(size) < 1:
        raise InvalidParams("rig image_size must be [height, width]")
    return size, extr


def find_rig(args, dataset: Path):
    path = Path(args.rig) if getattr(args, "rig", None) else dataset.parent / "rig.json"
    if not path.exists():
        raise FileNotFoundError(f"rig file not found: {path}")
    return read_rig(path)


# -- generate ---------------------------------------------------------------------------------


def _generate_one(job):
    index, seed, gcfg = job
    kind = gcfg["terrain"] if gcfg["terrain"] != "mixed" else TERRAIN_KINDS[index % 3]
    params = SceneParams(
        terrain=TerrainParams(kind=kind),
        n_lanes=int(gcfg["n_lanes"]),
        curvature=CurvatureParams(),
        beam_count=int(gcfg["beam_count"]),
        azimuth_step=float(gcfg["azimuth_step"]),
    )
    sc = make_scene(derive_seed(seed, index), params)
    pcfg = gcfg.get("predictions")
    preds = None
    if pcfg:
        preds = perturb_predictions(
            sc.lanes,
            float(pcfg["noise_sigma"]),
            float(pcfg["drop_rate"]),
            float(pcfg["hallucinate_rate"]),
            seed=derive_seed(seed + 1, index),
        )
        preds = [Lane3D(p.points, i) for i, p in enumerate(preds)]
    return sc, preds


def cmd_generate(args, cfg) -> int:
    g = cfg["generate"]
    if args.count is not None:
        g["count"] = args.count
    if args.terrain is not None:
        g["terrain"] = args.terrain
    if g["terrain"] not in TERRAIN_KINDS + ("mixed",):
        raise InvalidParams(f"terrain must be one of {TERRAIN_KINDS + ('mixed',)}")
    if int(g["count"]) < 0:
        raise InvalidParams("count must be >= 0")
    out = Path(args.output)
    out.mkdir(parents=True, exist_ok=True)
    if g["pointclouds"]:
        (out / "pointclouds").mkdir(exist_ok=True)
    results = pool_map(_generate_one, [(i, args.seed, g) for i in range(int(g["count"]))], args.jobs)
    frames, preds = [], []
    for i, (sc, p) in enumerate(results):
        fid = f"scene_{i:06d}"
        pc = None
        if g["pointclouds"]:
            pc = f"pointclouds/{fid}.bin"
            lio.write_pointcloud(out / pc, sc.sweep)
        frames.append(lio.FrameRecord(fid, sc.intrinsics, sc.lanes, sc.labels2d, pc))
        if p is not None:
            preds.append(lio.FrameRecord(fid, sc.intrinsics, p))
    lio.write_dataset(frames, out / "frames.jsonl")
    if g.get("predictions"):
        lio.write_dataset(preds, out / "predictions.jsonl")
    size = results[0][0].image_size if results else SceneParams().image_size
    write_rig(out / "rig.json", size, results[0][0].lidar_extrinsics if results else default_lidar_extrinsics())
    print(f"wrote {len(frames)} frames to {out}")
    return 0


# -- annotate ---------------------------------------------------------------------------------


def _annotate_one(job):
    rec, sweep, size, extr, acfg, step = job
    try:
        lanes = annotate_frame(sweep, rec.labels2d or [], rec.intrinsics, extr, size, acfg)
    except LaneError as exc:
        return rec.frame_id, [], str(exc)
    if step:
        lanes = [interpolate_lane(l, step) for l in lanes]
    lanes = [Lane3D(l.points, i) for i, l in enumerate(lanes)]
    return rec.frame_id, lanes, None


def cmd_annotate(args, cfg) -> int:
    a = cfg["annotate"]
    src = Path(args.input)
    size, extr = find_rig(args, src)
    frames = lio.load_dataset(src)
    sweeps = []
    for rec in frames:
        if rec.pointcloud_path is None:
            raise InvalidParams(f"frame {rec.frame_id!r} has no point cloud")
        sweeps.append(lio.read_pointcloud(src.parent / rec.pointcloud_path))
    if a["height_band"] is not None:
        band = tuple(float(x) for x in a["height_band"])
    else:
        ys = np.concatenate([extr.apply(s.points)[:, 1] for s in sweeps]) if sweeps else np.empty(0)
        band = estimate_height_band(ys, margin=float(a["band_margin"])) if len(ys) else (0.0, 1.0)
    acfg = AnnotationConfig(
        GroundSegConfig(
            band[0],
            band[1],
            seed_count=int(a["seed_count"]),
            growth_normal_tol=float(a["growth_normal_tol"]),
            growth_radius=float(a["growth_radius"]),
        ),
        base_width_m=float(a["base_width_m"]),
        seed=args.seed,
    )
    jobs = [(rec, sw, size, extr, acfg, a["sample_step"]) for rec, sw in zip(frames, sweeps)]
    out = []
    for rec, (fid, lanes, err) in zip(frames, pool_map(_annotate_one, jobs, args.jobs)):
        if err:
            log.warning("frame %s: %s", fid, err)
        out.append(lio.FrameRecord(fid, rec.intrinsics, lanes, rec.labels2d, rec.pointcloud_path))
    Path(args.output).parent.mkdir(parents=True, exist_ok=True)
    lio.write_dataset(out, args.output)
    print(f"annotated {len(out)} frames (ground band {band[0]:.3f}..{band[1]:.3f} m)")
    return 0


# -- evaluate ---------------------------------------------------------------------------------


def report_paths(output):
    out = Path(output)
    out.parent.mkdir(parents=True, exist_ok=True)
    return out, out.with_name(out.stem + "_frames.csv"), out.with_name(out.stem)


def cmd_evaluate(args, cfg) -> int:
    from .plotting import cd_histogram_figure

    m = dict(cfg["match"])
    if args.tau_cd is not None:
        m["tau_cd"] = args.tau_cd
    if args.iou_threshold is not None:
        m["iou_threshold"] = args.iou_threshold
    mcfg = MatchConfig.from_dict(m)
    gts = lio.load_dataset(args.gt)
    preds = {r.frame_id: r for r in lio.load_dataset(args.pred)}
    gt_ids = {r.frame_id for r in gts}
    stray = sorted(set(preds) - gt_ids)
    if stray:
        raise InvalidParams(f"prediction frame {stray[0]!r} has no ground truth")
    pairs = [(preds[g.frame_id].lanes if g.frame_id in preds else [], g.lanes) for g in gts]
    per_frame = evaluate_frames(pairs, mcfg, args.jobs)
    res = summarize(per_frame)
    report, table, stem = report_paths(args.output)
    lio.write_json(report, {"config": mcfg.to_dict(), "frames": len(gts), "result": res.to_dict()})
    with open(table, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["frame_id", "n_gt", "n_pred", "tp", "fp", "fn", "mean_cd"])
        for g, (p, _), r in zip(gts, pairs, per_frame):
            cds = [x.cd for x in r.matches]
            mean = repr(math.fsum(cds) / len(cds)) if cds else ""
            w.writerow([g.frame_id, len(g.lanes), len(p), len(r.matches), len(r.fp), len(r.fn), mean])
    cd_histogram_figure(f"{stem}_cd.png", [x.cd for r in per_frame for x in r.matches], mcfg.tau_cd)
    print(
        f"F1 {res.f1:.4f}  precision {res.precision:.4f}  recall {res.recall:.4f}  "
        f"cd_error {res.cd_error:.4f} m  (tp {res.tp}, fp {res.fp}, fn {res.fn})"
    )
    return 0


# -- augment ----------------------------------------------------------------------------------


def cmd_augment(args, cfg) -> int:
    a = cfg["augment"]
    src = Path(args.input)
    size = tuple(args.image_size) if args.image_size else find_rig(args, src)[0]
    fixed = args.scale is not None or args.crop is not None or args.flip
    frames = lio.load_dataset(src)
    out, rows = [], []
    for i, rec in enumerate(frames):
        if fixed:
            s = 1.0 if args.scale is None else args.scale
            c = restoring_crop(size[0], s) if args.crop is None else args.crop
            p = AugmentParams(c, s, bool(args.flip))
        else:
            p = sample_params(derive_seed(args.seed, i), size, tuple(a["scale_range"]), float(a["flip_prob"]))
        lanes, labels2d, k, new_size = augment_frame(rec.lanes, rec.labels2d or [], rec.intrinsics, size, p)
        out.append(
            lio.FrameRecord(rec.frame_id, k, lanes, labels2d if rec.labels2d is not None else None, rec.pointcloud_path)
        )
        rows.append([rec.frame_id, repr(p.crop_top_c), repr(p.scale_s), int(p.flip), new_size[0], new_size[1]])
    dst = Path(args.output)
    dst.parent.mkdir(parents=True, exist_ok=True)
    lio.write_dataset(out, dst)
    with open(dst.with_name(dst.stem + "_params.csv"), "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["frame_id", "crop_top_c", "scale_s", "flip", "height", "width"])
        w.writerows(rows)
    print(f"augmented {len(out)} frames")
    return 0


# -- stats ------------------------------------------------------------------------------------


def cmd_stats(args, cfg) -> int:
    from .plotting import lanes_per_image_figure, slope_histogram_figure

    frames = lio.load_dataset(args.input)
    stats = lio.compute_slope_stats(frames)
    report, table, stem = report_paths(args.output)
    lio.write_json(report, stats.to_dict())
    with open(table, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["frame_id", "n_lanes", "scene_slope"])
        for f in frames:
            try:
                s = repr(lio.scene_slope(f))
            except LaneError:
                s = ""
            w.writerow([f.frame_id, len(f.lanes), s])
    slope_histogram_figure(f"{stem}_slope.png", stats.histogram, lio.slope_bin_edges())
    lanes_per_image_figure(f"{stem}_lanes.png", stats.lanes_per_image)
    print(f"{len(stats.per_scene_slope)} scenes, {stats.skipped_frames} without a usable slope")
    return 0


# -- fit-anchors ------------------------------------------------------------------------------


def _lane_depth(job):
    rec, size = job
    return render_frame(rec.lanes, rec.intrinsics, size).depth


def cmd_fit_anchors(args, cfg) -> int:
    a = cfg["anchors"]
    src = Path(args.input)
    size = tuple(args.image_size) if args.image_size else find_rig(args, src)[0]
    frames = lio.load_dataset(src)
    if a["split"] is not None:
        frames = lio.split_dataset(frames, tuple(a["split"]))[0]
    depth = pool_map(_lane_depth, [(f, size) for f in frames], args.jobs)
    anchors = fit_row_anchors(depth, float(a["beta_floor"]))
    Path(args.output).parent.mkdir(parents=True, exist_ok=True)
    lio.write_anchors(args.output, anchors)
    print(f"fitted anchors for {len(anchors)} rows from {len(frames)} frames")
    return 0


# -- wiring -----------------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON config file")
    common.add_argument("--seed", type=int, default=0)
    common.add_argument("--jobs", type=int, default=1, help="worker processes")
    common.add_argument("--output", required=True, help="output file or directory")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="lanes3d", description="3D lane annotation, evaluation and augmentation tools")
    sub = p.add_subparsers(dest="verb", required=True)

    g = sub.add_parser("generate", parents=[common], help="write synthetic scenes")
    g.add_argument("--count", type=int)
    g.add_argument("--terrain", choices=TERRAIN_KINDS + ("mixed",))
    g.set_defaults(fn=cmd_generate)

    a = sub.add_parser("annotate", parents=[common], help="lift 2D labels to 3D lanes with point clouds")
    a.add_argument("input")
    a.add_argument("--rig", help="rig.json (default: next to the input)")
    a.set_defaults(fn=cmd_annotate)

    e = sub.add_parser("evaluate", parents=[common], help="score predictions against ground truth")
    e.add_argument("--gt", required=True)
    e.add_argument("--pred", required=True)
    e.add_argument("--tau-cd", type=float)
    e.add_argument("--iou-threshold", type=float)
    e.set_defaults(fn=cmd_evaluate)

    u = sub.add_parser("augment", parents=[common], help="flip / crop-scale labels consistently")
    u.add_argument("input")
    u.add_argument("--rig")
    u.add_argument("--image-size", type=int, nargs=2, metavar=("H", "W"))
    u.add_argument("--scale", type=float)
    u.add_argument("--crop", type=float)
    u.add_argument("--flip", action="store_true")
    u.set_defaults(fn=cmd_augment)

    s = sub.add_parser("stats", parents=[common], help="slope histogram and lanes per image")
    s.add_argument("input")
    s.set_defaults(fn=cmd_stats)

    f = sub.add_parser("fit-anchors", parents=[common], help="per-row depth anchors from lane depth")
    f.add_argument("input")
    f.add_argument("--rig")
    f.add_argument("--image-size", type=int, nargs=2, metavar=("H", "W"))
    f.set_defaults(fn=cmd_fit_anchors)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    if args.jobs < 1:
        print("error: --jobs must be >= 1", file=sys.stderr)
        return 1
    try:
        cfg = load_config(args.config)
        return args.fn(args, cfg)
    except LaneError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
