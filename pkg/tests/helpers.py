"""Shared fixture builders for the test suite."""

from __future__ import annotations

import json

import numpy as np

from lanes3d.geometry import CameraIntrinsics, Lane2D, project
from lanes3d.io import FrameRecord
from lanes3d.synthetic import CurvatureParams, TerrainParams, generate_terrain, lay_lanes


def synthetic_records(n: int, seed: int = 0, with_labels: bool = True):
    """``n`` frame records with varied intrinsics and terrain, no LiDAR."""
    rng = np.random.default_rng(seed)
    kinds = ("flat", "ramp", "hills")
    for i in range(n):
        k = CameraIntrinsics(
            float(rng.uniform(800, 1200)),
            float(rng.uniform(800, 1200)),
            float(rng.uniform(600, 680)),
            float(rng.uniform(330, 390)),
            float(rng.choice([0.0, rng.uniform(-2, 2)])),
        )
        terrain = generate_terrain(int(rng.integers(2**31)), TerrainParams(kind=kinds[i % 3]))
        lanes = lay_lanes(
            terrain,
            int(rng.integers(1, 5)),
            CurvatureParams(),
            seed=int(rng.integers(2**31)),
            z_range=(float(rng.uniform(4, 8)), float(rng.uniform(25, 60))),
            point_step=float(rng.uniform(0.7, 3.0)),
        )
        labels = [Lane2D(project(l.points, k), l.lane_id) for l in lanes] if with_labels else None
        pc = f"pointclouds/{i:06d}.bin" if i % 2 else None
        yield FrameRecord(f"frame_{seed}_{i:06d}", k, lanes, labels, pc)


GOOD = {
    "frame_id": "f0",
    "intrinsics": {"fx": 1000.0, "fy": 1000.0, "cx": 640.0, "cy": 360.0, "skew": 0.0},
    "lanes": [[[0.0, 1.6, 5.0], [0.0, 1.6, 15.0]]],
}


def _mut(**kw):
    d = json.loads(json.dumps(GOOD))
    for key, val in kw.items():
        if val is ...:
            del d[key]
        else:
            d[key] = val
    return json.dumps(d)


# (name, file text, line of the bad record, field named in the error)
MALFORMED = [
    ("nonpositive_z", _mut(lanes=[[[0, 1.6, 5], [0, 1.6, -1]]]), 1, "lanes[0]"),
    ("zero_z", _mut(lanes=[[[0, 1.6, 0], [0, 1.6, 3]]]), 1, "lanes[0]"),
    ("single_point_lane", _mut(lanes=[[[0, 1.6, 5]]]), 1, "lanes[0]"),
    ("duplicate_points", _mut(lanes=[[[0, 1.6, 5], [0, 1.6, 5], [0, 1.6, 6]]]), 1, "lanes[0]"),
    ("two_vector_lane", _mut(lanes=[[[0, 5], [0, 6]]]), 1, "lanes[0]"),
    ("string_coordinate", _mut(lanes=[[[0, "a", 5], [0, 1, 6]]]), 1, "lanes[0]"),
    ("missing_frame_id", _mut(frame_id=...), 1, "frame_id"),
    ("missing_lanes", _mut(lanes=...), 1, "lanes"),
    ("unknown_field", _mut(extra=1), 1, "extra"),
    ("empty_frame_id", _mut(frame_id=""), 1, "frame_id"),
    ("zero_focal", _mut(intrinsics={"fx": 0, "fy": 1000, "cx": 640, "cy": 360}), 1, "intrinsics"),
    ("missing_cy", _mut(intrinsics={"fx": 1000, "fy": 1000, "cx": 640}), 1, "intrinsics"),
    ("unknown_intrinsic", _mut(intrinsics={"fx": 1, "fy": 1, "cx": 1, "cy": 1, "k1": 0}), 1, "intrinsics"),
    ("bool_intrinsic", _mut(intrinsics={"fx": True, "fy": 1, "cx": 1, "cy": 1}), 1, "intrinsics"),
    ("lanes_not_list", _mut(lanes={"a": 1}), 1, "lanes"),
    ("bad_labels2d", _mut(labels2d=[[[1, 2, 3]]]), 1, "labels2d[0]"),
    ("pointcloud_not_string", _mut(pointcloud=5), 1, "pointcloud"),
    ("nan_coordinate", _mut().replace("1.6, 15.0", "NaN, 15.0"), 1, None),
    ("not_json", "{frame_id: f0}", 1, None),
    ("not_object", "[1, 2]", 1, None),
    ("duplicate_frame_id", _mut() + "\n" + _mut(), 2, "frame_id"),
    ("bad_second_line", _mut() + "\n\n" + _mut(frame_id="f1", lanes=[[[0, 0, 1]]]), 3, "lanes[0]"),
]


SMALL_CONFIG = {
    "generate": {"count": 6, "beam_count": 32, "azimuth_step": 0.4},
    "annotate": {"sample_step": 1.0},
}


def run_cli_pipeline(root, jobs: int, seed: int = 7) -> dict:
    """Run every CLI verb into ``root``; return {relative path: bytes} of all outputs."""
    from pathlib import Path

    from lanes3d.cli import main

    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    cfg = root / "config.json"
    cfg.write_text(json.dumps(SMALL_CONFIG))
    common = ["--config", str(cfg), "--seed", str(seed), "--jobs", str(jobs)]
    data = root / "data"
    steps = [
        ["generate", "--output", str(data)],
        ["annotate", str(data / "frames.jsonl"), "--output", str(root / "annotated.jsonl")],
        ["evaluate", "--gt", str(data / "frames.jsonl"), "--pred", str(data / "predictions.jsonl"),
         "--output", str(root / "eval.json")],
        ["augment", str(data / "frames.jsonl"), "--output", str(root / "augmented.jsonl")],
        ["stats", str(data / "frames.jsonl"), "--output", str(root / "stats.json")],
        ["fit-anchors", str(data / "frames.jsonl"), "--output", str(root / "anchors.csv")],
    ]
    for argv in steps:
        code = main([argv[0], *common, *argv[1:]])
        if code != 0:
            raise RuntimeError(f"{argv[0]} exited with {code}")
    return {
        str(p.relative_to(root)): p.read_bytes()
        for p in sorted(root.rglob("*"))
        if p.is_file() and p.name != "config.json"
    }
