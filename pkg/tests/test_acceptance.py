"""Acceptance criteria, one test each. Each prints a single PASS/FAIL line.

Run with ``pytest tests/test_acceptance.py -v`` (the verdicts are repeated in
the terminal summary) or directly with ``python3 tests/test_acceptance.py``.
"""

import itertools
import math
import sys
import tempfile
import time
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from acceptance_log import report  # noqa: E402
from helpers import MALFORMED, run_cli_pipeline, synthetic_records  # noqa: E402
from oracles import cd_oracle, iou_oracle, jitter_lane, optimal_tp, random_lane, sensed_truth  # noqa: E402

from lanes3d.annotation import AnnotationConfig, GroundSegConfig, annotate_frame, estimate_height_band  # noqa: E402
from lanes3d.augmentation import AugmentParams, augment_frame, flip_frame  # noqa: E402
from lanes3d.errors import ParseError  # noqa: E402
from lanes3d.geometry import CameraIntrinsics, Lane2D, Lane3D, backproject, project  # noqa: E402
from lanes3d.io import load_dataset, write_dataset  # noqa: E402
from lanes3d.metric import MatchConfig, evaluate_dataset, match_frame, topview_iou, unilateral_cd  # noqa: E402
from lanes3d.reconstruction import LossConfig, OffsetMaps, reg_loss, seg_loss, total_loss  # noqa: E402
from lanes3d.synthetic import (  # noqa: E402
    SceneParams,
    TerrainParams,
    generate_terrain,
    lay_lanes,
    make_scene,
    perturb_predictions,
)


def test_criterion_1_projection_round_trip():
    rng = np.random.default_rng(1)
    n = 1_000_000
    z = rng.uniform(0.1, 200.0, n)
    p = np.column_stack([rng.uniform(-1, 1, n) * z, rng.uniform(-0.6, 0.6, n) * z, z])
    k = CameraIntrinsics(1000.0, 1000.0, 640.0, 360.0, 0.0)
    t0 = time.perf_counter()
    uv = project(p, k)
    back = backproject(uv[:, 0], uv[:, 1], p[:, 2], k)
    dt = time.perf_counter() - t0
    err = float(np.max(np.abs(back - p)))
    ok = err <= 1e-9 and dt < 5.0
    assert report(1, ok, f"max error {err:.2e} m over 1e6 points in {dt:.2f} s (bounds 1e-9 m, 5 s)")


def test_criterion_2_annotation_closure():
    kinds = ("flat", "ramp", "hills")
    scenes = [make_scene(i, SceneParams(terrain=TerrainParams(kind=kinds[i % 3]))) for i in range(100)]
    t0 = time.perf_counter()
    ys = np.concatenate([sc.lidar_extrinsics.apply(sc.sweep.points)[:, 1] for sc in scenes])
    cfg = AnnotationConfig(GroundSegConfig(*estimate_height_band(ys, margin=1.5)))
    recovered = [
        annotate_frame(sc.sweep, sc.labels2d, sc.intrinsics, sc.lidar_extrinsics, sc.image_size, cfg)
        for sc in scenes
    ]
    dt = time.perf_counter() - t0
    frames = []
    for sc, rec in zip(scenes, recovered):
        cam = sc.lidar_extrinsics.apply(sc.sweep.points)
        truth = [t for t in (sensed_truth(l, cam) for l in sc.lanes) if t is not None]
        frames.append((rec, truth))
    res = evaluate_dataset(frames, MatchConfig())
    ok = res.cd_error < 0.05 and res.recall >= 0.95 and dt < 60.0
    assert report(
        2, ok, f"mean CD {res.cd_error:.4f} m, recall {res.recall:.3f} over 100 scenes, "
        f"pipeline {dt:.1f} s (bounds 0.05 m, 0.95, 60 s)"
    )


def test_criterion_3_self_evaluation():
    gts = [r.lanes for r in synthetic_records(200, seed=3, with_labels=False)]
    res = evaluate_dataset([(g, g) for g in gts], MatchConfig())
    ok = res.f1 == 1.0 and res.cd_error == 0.0
    assert report(3, ok, f"F1 {res.f1!r}, cd_error {res.cd_error!r} (exact 1.0 and 0.0)")


def test_criterion_4_threshold_trend():
    gts = [lay_lanes(generate_terrain(s), 4, seed=s) for s in range(100)]
    preds = [perturb_predictions(g, 0.1, 0.1, 0.1, seed=1000 + i) for i, g in enumerate(gts)]
    f1 = [evaluate_dataset(list(zip(preds, gts)), MatchConfig(tau_cd=t)).f1 for t in (0.15, 0.30, 0.50)]
    ok = f1[0] < f1[1] < f1[2]
    assert report(4, ok, "F1 at tau 0.15/0.30/0.50 = " + " / ".join(f"{f:.4f}" for f in f1) + " (strictly increasing)")


def test_criterion_5_chamfer_oracle():
    rng = np.random.default_rng(5)
    cfg = MatchConfig()
    worst = 0.0
    for _ in range(1000):
        gt = random_lane(rng)
        pred = jitter_lane(rng, gt, rng.uniform(-1.5, 1.5), rng.uniform(0.0, 0.1)) if rng.random() < 0.8 else random_lane(rng)
        worst = max(worst, abs(unilateral_cd(pred, gt, cfg) - cd_oracle(pred, gt)))
    assert report(5, worst < 0.01, f"max |CD - oracle| {worst:.5f} m over 1000 pairs (bound 0.01 m)")


def test_criterion_6_iou_oracle():
    rng = np.random.default_rng(6)
    cfg = MatchConfig()
    worst = 0.0
    for _ in range(200):
        gt = random_lane(rng)
        pred = jitter_lane(rng, gt, rng.uniform(-1.2, 1.2), rng.uniform(0.0, 0.05))
        ref = iou_oracle(pred, gt, cfg.topview_halfwidth, cfg.roi, cfg.raster_cell / 10)
        worst = max(worst, abs(topview_iou(pred, gt, cfg) - ref))
    assert report(6, worst < 0.02, f"max |IoU - 10x raster oracle| {worst:.4f} over 200 pairs (bound 0.02)")


def test_criterion_7_augmentation_consistency():
    rng = np.random.default_rng(7)
    size = (720, 1280)
    worst = 0.0
    exact = True
    for _ in range(10_000):
        k = CameraIntrinsics(*rng.uniform([600, 600, 560, 300, -2], [1500, 1500, 720, 420, 2]))
        z = np.linspace(rng.uniform(3, 10), rng.uniform(20, 90), int(rng.integers(2, 12)))
        p = np.column_stack([rng.uniform(-6, 6) + rng.uniform(-0.1, 0.1) * z, np.full_like(z, rng.uniform(1, 2.5)), z])
        l3 = [Lane3D(p, 0)]
        l2 = [Lane2D(project(p, k), 0)]
        params = AugmentParams(float(rng.uniform(0, 150)), float(rng.uniform(0.8, 1.2)), bool(rng.random() < 0.5))
        o3, o2, k2, _ = augment_frame(l3, l2, k, size, params)
        worst = max(worst, float(np.max(np.abs(project(o3[0].points, k2) - o2[0].points))))
        f3, f2, fk, _ = flip_frame(*flip_frame(l3, l2, k, size))
        i3, i2, ik, _ = augment_frame(l3, l2, k, size, AugmentParams())
        exact &= (
            fk == k and ik == k
            and np.array_equal(f3[0].points, p) and np.array_equal(i3[0].points, p)
            and np.array_equal(f2[0].points, l2[0].points) and np.array_equal(i2[0].points, l2[0].points)
        )
    ok = worst < 1e-6 and exact
    assert report(7, ok, f"max reprojection error {worst:.2e} px over 1e4 frames; flip twice / s=1 bit-exact: {exact}")


def test_criterion_8_loss_closed_forms():
    gt = np.random.default_rng(8).random((16, 16)) < 0.3
    e_seg = abs(seg_loss(np.full(gt.shape, 0.5), gt) - math.log(2))
    zero = OffsetMaps.zeros((1, 1))
    one = np.ones((1, 1), bool)
    e_reg = max(
        abs(reg_loss(OffsetMaps(np.full((1, 1), 0.5), np.zeros((1, 1)), np.zeros((1, 1))), zero, one) - 0.125 / 3),
        abs(reg_loss(OffsetMaps(np.zeros((1, 1)), np.zeros((1, 1)), np.full((1, 1), 2.0)), zero, one) - 1.5 / 3),
    )
    linear = all(
        total_loss(0.7, 0.3, LossConfig(lam)) == 0.7 + lam * 0.3 for lam in (0.0, 0.5, 1.0, 2.0, 7.25)
    )
    ok = e_seg < 1e-9 and e_reg < 1e-12 and linear
    assert report(8, ok, f"seg error {e_seg:.1e}, reg error {e_reg:.1e}, total_loss linear in lambda: {linear}")


def _random_set(rng, n_gt, n_pred):
    gts = [random_lane(rng, j, x_range=(-8, 8)) for j in range(n_gt)]
    preds = []
    for i in range(n_pred):
        if gts and rng.random() < 0.8:
            src = gts[int(rng.integers(len(gts)))]
            preds.append(jitter_lane(rng, src, rng.uniform(-0.6, 0.6), rng.uniform(0.0, 0.15), i))
        else:
            preds.append(random_lane(rng, i, x_range=(-8, 8)))
    return preds, gts


def test_criterion_9_metric_monotonicity():
    rng = np.random.default_rng(9)
    taus = (0.05, 0.1, 0.2, 0.3, 0.5, 1.0, 2.0)
    thrs = (0.05, 0.1, 0.3, 0.5, 0.7, 0.9, 1.0)
    mono = one_to_one = near_opt = True
    worst_gap = 0
    for _ in range(50):
        preds, gts = _random_set(rng, int(rng.integers(1, 7)), int(rng.integers(1, 7)))
        t_tau = [len(match_frame(preds, gts, MatchConfig(tau_cd=t)).matches) for t in taus]
        t_iou = [len(match_frame(preds, gts, MatchConfig(iou_threshold=t)).matches) for t in thrs]
        mono &= t_tau == sorted(t_tau) and t_iou == sorted(t_iou, reverse=True)
        r = match_frame(preds, gts, MatchConfig())
        pairs = r.matches + r.rejected
        one_to_one &= len({m.pred_index for m in pairs}) == len(pairs) == len({m.gt_index for m in pairs})
        iou = np.zeros((len(preds), len(gts)))
        cd = np.zeros_like(iou)
        for i, j in itertools.product(range(len(preds)), range(len(gts))):
            iou[i, j] = topview_iou(preds[i], gts[j], MatchConfig())
            cd[i, j] = unilateral_cd(preds[i], gts[j], MatchConfig())
        gap = optimal_tp(iou, cd, 0.3, 0.3) - len(r.matches)
        worst_gap = max(worst_gap, gap)
        near_opt &= 0 <= gap <= 1
    ok = mono and one_to_one and near_opt
    assert report(
        9, ok, f"monotone: {mono}, one-to-one: {one_to_one}, worst optimal-minus-greedy TP gap {worst_gap} (bound 1) over 50 sets"
    )


def test_criterion_10_io_round_trip():
    with tempfile.TemporaryDirectory() as tmp:
        path = Path(tmp) / "d.jsonl"
        recs = list(synthetic_records(10_000, seed=10))
        t0 = time.perf_counter()
        write_dataset(recs, path)
        back = load_dataset(path)
        dt = time.perf_counter() - t0
        same = back == recs
        raised = 0
        for name, text, line, _ in MALFORMED:
            bad = Path(tmp) / f"{name}.jsonl"
            bad.write_text(text + "\n")
            try:
                load_dataset(bad)
            except ParseError as exc:
                raised += exc.line == line
    ok = same and raised == len(MALFORMED) and dt < 30.0
    assert report(
        10, ok, f"10k frames identical: {same} in {dt:.1f} s (bound 30 s); "
        f"{raised}/{len(MALFORMED)} malformed fixtures raised ParseError at the right line"
    )


def test_criterion_11_cli_determinism():
    with tempfile.TemporaryDirectory() as tmp:
        a = run_cli_pipeline(Path(tmp) / "a", jobs=1)
        b = run_cli_pipeline(Path(tmp) / "b", jobs=1)
        c = run_cli_pipeline(Path(tmp) / "c", jobs=8)
    diff = sorted(k for k in set(a) | set(b) | set(c) if not (a.get(k) == b.get(k) == c.get(k)))
    ok = not diff and len(a) > 0
    assert report(11, ok, f"{len(a)} output files from 6 commands byte-identical across repeat and --jobs 1 vs 8"
                  + (f"; differing: {diff}" if diff else ""))


if __name__ == "__main__":
    sys.exit(pytest.main([__file__, "-q", "-p", "no:cacheprovider"]))
