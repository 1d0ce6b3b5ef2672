"""Dataset files: JSONL frame records, point-cloud sidecars, anchor tables, slope statistics.

One frame per line::

    {"frame_id": str,
     "intrinsics": {"fx", "fy", "cx", "cy", "skew"},
     "lanes": [[[x, y, z], ...], ...],
     "labels2d": [[[u, v], ...], ...],     # optional
     "pointcloud": "relative/path.bin"}     # optional

Floats are written with Python's shortest round-trip repr, so a
write/load cycle is exact.
"""

from __future__ import annotations

import csv
import hashlib
import json
import logging
import math
import os
import struct
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator, Optional, Sequence

import numpy as np

from .annotation import LidarSweep
from .errors import InvalidSpec, LaneError, NoValidLanes, ParseError, ZeroForwardExtent
from .geometry import CameraIntrinsics, Lane2D, Lane3D
from .reconstruction import RowAnchors

logger = logging.getLogger(__name__)

FIELDS = ("frame_id", "intrinsics", "lanes", "labels2d", "pointcloud")
REQUIRED = ("frame_id", "intrinsics", "lanes")
INTRINSIC_KEYS = ("fx", "fy", "cx", "cy", "skew")

SLOPE_RANGE = (-0.1, 0.1)
SLOPE_BINS = 41


@dataclass(frozen=True, eq=False)
class FrameRecord:
    frame_id: str
    intrinsics: CameraIntrinsics
    lanes: list
    labels2d: Optional[list] = None
    pointcloud_path: Optional[str] = None

    def __eq__(self, other):
        if not isinstance(other, FrameRecord):
            return NotImplemented
        return (
            self.frame_id == other.frame_id
            and self.intrinsics == other.intrinsics
            and self.lanes == other.lanes
            and self.labels2d == other.labels2d
            and self.pointcloud_path == other.pointcloud_path
        )

    def to_json(self) -> dict:
        d = {
            "frame_id": self.frame_id,
            "intrinsics": self.intrinsics.to_dict(),
            "lanes": [lane.points.tolist() for lane in self.lanes],
        }
        if self.labels2d is not None:
            d["labels2d"] = [lane.points.tolist() for lane in self.labels2d]
        if self.pointcloud_path is not None:
            d["pointcloud"] = self.pointcloud_path
        return d


def normalize_lane_order(points: np.ndarray) -> np.ndarray:
    """Orient a lane so it starts at the end nearer the camera in top view."""
    first = math.hypot(points[0, 0], points[0, 2])
    last = math.hypot(points[-1, 0], points[-1, 2])
    return points[::-1] if last < first else points


def _point_array(value, width: int, fld: str, line, fid) -> np.ndarray:
    try:
        a = np.array(value, dtype=np.float64)
    except (TypeError, ValueError) as exc:
        raise ParseError(f"not a numeric point list ({exc})", line, fld, fid) from None
    if a.ndim != 2 or a.shape[1] != width:
        raise ParseError(f"expected a list of {width}-vectors, got shape {a.shape}", line, fld, fid)
    return a


def frame_from_json(d, line: Optional[int] = None) -> FrameRecord:
    if not isinstance(d, dict):
        raise ParseError("record must be a JSON object", line)
    fid = d.get("frame_id")
    missing = [k for k in REQUIRED if k not in d]
    if missing:
        raise ParseError("missing required field", line, missing[0], fid)
    unknown = sorted(set(d) - set(FIELDS))
    if unknown:
        raise ParseError("unknown field", line, unknown[0], fid)
    if not isinstance(fid, str) or not fid:
        raise ParseError("frame_id must be a non-empty string", line, "frame_id")

    intr = d["intrinsics"]
    if not isinstance(intr, dict) or any(k not in intr for k in INTRINSIC_KEYS[:4]):
        raise ParseError("intrinsics needs fx, fy, cx, cy", line, "intrinsics", fid)
    extra = sorted(set(intr) - set(INTRINSIC_KEYS))
    if extra:
        raise ParseError(f"unknown intrinsics key {extra[0]!r}", line, "intrinsics", fid)
    if not all(isinstance(intr[k], (int, float)) and not isinstance(intr[k], bool) for k in intr):
        raise ParseError("intrinsics must be numbers", line, "intrinsics", fid)
    try:
        k = CameraIntrinsics.from_dict(intr)
    except LaneError as exc:
        raise ParseError(str(exc), line, "intrinsics", fid) from None

    if not isinstance(d["lanes"], list):
        raise ParseError("lanes must be a list", line, "lanes", fid)
    lanes = []
    for i, raw in enumerate(d["lanes"]):
        fld = f"lanes[{i}]"
        pts = _point_array(raw, 3, fld, line, fid)
        try:
            lanes.append(Lane3D(normalize_lane_order(pts), i))
        except LaneError as exc:
            raise ParseError(str(exc), line, fld, fid) from None

    labels2d = None
    if d.get("labels2d") is not None:
        if not isinstance(d["labels2d"], list):
            raise ParseError("labels2d must be a list", line, "labels2d", fid)
        labels2d = []
        for i, raw in enumerate(d["labels2d"]):
            fld = f"labels2d[{i}]"
            pts = _point_array(raw, 2, fld, line, fid)
            try:
                labels2d.append(Lane2D(pts, i))
            except LaneError as exc:
                raise ParseError(str(exc), line, fld, fid) from None

    pc = d.get("pointcloud")
    if pc is not None and not isinstance(pc, str):
        raise ParseError("pointcloud must be a path string", line, "pointcloud", fid)
    return FrameRecord(fid, k, lanes, labels2d, pc)


def _reject_constant(name):
    raise ValueError(f"non-finite number {name}")


def iter_dataset(path) -> Iterator[FrameRecord]:
    """Stream records from a JSONL file. Blank lines are skipped."""
    seen = set()
    with open(path, "r", encoding="utf-8") as fh:
        for n, text in enumerate(fh, 1):
            if not text.strip():
                continue
            try:
                d = json.loads(text, parse_constant=_reject_constant)
            except ValueError as exc:
                raise ParseError(f"invalid JSON ({exc})", n) from None
            rec = frame_from_json(d, n)
            if rec.frame_id in seen:
                raise ParseError("duplicate frame_id", n, "frame_id", rec.frame_id)
            seen.add(rec.frame_id)
            yield rec


def load_dataset(path) -> list[FrameRecord]:
    return list(iter_dataset(path))


def dumps_frame(rec: FrameRecord) -> str:
    return json.dumps(rec.to_json(), separators=(",", ":"), allow_nan=False)


def write_dataset(frames: Iterable[FrameRecord], path) -> int:
    n = 0
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for rec in frames:
            fh.write(dumps_frame(rec))
            fh.write("\n")
            n += 1
    return n


# -- point-cloud sidecar: <u4 count, then count x (<f4 x, <f4 y, <f4 z, <u2 beam) -------

_PC_DTYPE = np.dtype([("x", "<f4"), ("y", "<f4"), ("z", "<f4"), ("beam", "<u2")])


def write_pointcloud(path, sweep: LidarSweep) -> None:
    if len(sweep) and sweep.beam_id.max() > np.iinfo(np.uint16).max:
        raise InvalidSpec("beam_id does not fit in uint16")
    rec = np.empty(len(sweep), dtype=_PC_DTYPE)
    for i, name in enumerate("xyz"):
        rec[name] = sweep.points[:, i]
    rec["beam"] = sweep.beam_id
    with open(path, "wb") as fh:
        fh.write(struct.pack("<I", len(rec)))
        fh.write(rec.tobytes())


def read_pointcloud(path) -> LidarSweep:
    data = Path(path).read_bytes()
    if len(data) < 4:
        raise ParseError(f"point cloud {os.fspath(path)!r} is missing its header")
    (count,) = struct.unpack_from("<I", data)
    if len(data) != 4 + count * _PC_DTYPE.itemsize:
        raise ParseError(f"point cloud {os.fspath(path)!r}: header says {count} points, size disagrees")
    rec = np.frombuffer(data, dtype=_PC_DTYPE, offset=4, count=count)
    pts = np.column_stack([rec["x"], rec["y"], rec["z"]]).astype(np.float64)
    try:
        return LidarSweep(pts, rec["beam"].astype(np.int64))
    except LaneError as exc:
        raise ParseError(f"point cloud {os.fspath(path)!r}: {exc}") from None


# -- anchor table CSV: header row_index,alpha,beta -----------------------------------------


def write_anchors(path, anchors: RowAnchors) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["row_index", "alpha", "beta"])
        for r, (a, b) in enumerate(zip(anchors.alpha, anchors.beta)):
            w.writerow([r, repr(float(a)), repr(float(b))])


def read_anchors(path) -> RowAnchors:
    with open(path, "r", encoding="utf-8", newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows or rows[0] != ["row_index", "alpha", "beta"]:
        raise ParseError("anchor table header must be row_index,alpha,beta", 1)
    alpha, beta = [], []
    for n, row in enumerate(rows[1:], 2):
        try:
            r, a, b = int(row[0]), float(row[1]), float(row[2])
        except (ValueError, IndexError):
            raise ParseError("expected integer row and two numbers", n) from None
        if r != n - 2:
            raise ParseError(f"rows must be contiguous from 0, got {r}", n, "row_index")
        if not (math.isfinite(a) and math.isfinite(b) and b > 0):
            raise ParseError("alpha must be finite and beta positive", n)
        alpha.append(a)
        beta.append(b)
    return RowAnchors(np.array(alpha), np.array(beta))


# -- statistics ----------------------------------------------------------------------------


def lane_slope(lane: Lane3D) -> float:
    """Height change over forward distance between the lane's end points."""
    p0, p1 = lane.points[0], lane.points[-1]
    dz = p1[2] - p0[2]
    if dz == 0:
        raise ZeroForwardExtent("lane start and end share the same z")
    return float((p1[1] - p0[1]) / dz)


def scene_slope(frame) -> float:
    lanes = frame.lanes if isinstance(frame, FrameRecord) else frame
    slopes = []
    skipped = 0
    for lane in lanes:
        try:
            slopes.append(lane_slope(lane))
        except ZeroForwardExtent:
            skipped += 1
    if skipped:
        logger.warning("%d lane(s) without forward extent left out of the scene slope", skipped)
    if not slopes:
        raise NoValidLanes("no lane has a defined slope")
    return math.fsum(slopes) / len(slopes)


def slope_bin_edges() -> np.ndarray:
    return np.linspace(SLOPE_RANGE[0], SLOPE_RANGE[1], SLOPE_BINS + 1)


def slope_histogram(slopes: Sequence[float]) -> np.ndarray:
    """Counts as ``[underflow, 41 bins over [-0.1, 0.1], overflow]``."""
    s = np.asarray(slopes, dtype=np.float64)
    edges = slope_bin_edges()
    inner, _ = np.histogram(s[(s >= edges[0]) & (s <= edges[-1])], bins=edges)
    return np.concatenate([[np.sum(s < edges[0])], inner, [np.sum(s > edges[-1])]]).astype(np.int64)


@dataclass(frozen=True)
class SlopeStats:
    per_scene_slope: list
    histogram: list
    skipped_frames: int = 0
    lanes_per_image: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        edges = slope_bin_edges()
        return {
            "scene_count": len(self.per_scene_slope),
            "skipped_frames": self.skipped_frames,
            "bin_edges": edges.tolist(),
            "histogram": {
                "underflow": self.histogram[0],
                "bins": self.histogram[1:-1],
                "overflow": self.histogram[-1],
            },
            "lanes_per_image": {str(k): v for k, v in sorted(self.lanes_per_image.items())},
        }


def compute_slope_stats(frames: Iterable[FrameRecord]) -> SlopeStats:
    slopes = []
    skipped = 0
    counts: Counter = Counter()
    for f in frames:
        counts[len(f.lanes)] += 1
        try:
            slopes.append(scene_slope(f))
        except NoValidLanes:
            skipped += 1
    return SlopeStats(slopes, slope_histogram(slopes).tolist(), skipped, dict(counts))


# -- splits --------------------------------------------------------------------------------


def hash_unit(frame_id: str) -> float:
    """Deterministic position of a frame id in [0, 1)."""
    digest = hashlib.sha256(frame_id.encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "big") / 2.0**64


def split_dataset(frames: Iterable[FrameRecord], spec=(0.8, 0.1, 0.1)):
    """Split into ``(train, val, test)`` by a hash of ``frame_id``.

    Fractions may sum to less than 1; the remainder is left out.
    """
    fr = tuple(float(x) for x in spec)
    if len(fr) != 3 or any(not math.isfinite(x) or x < 0 for x in fr) or sum(fr) > 1.0 + 1e-12:
        raise InvalidSpec(f"split fractions must be three non-negative numbers summing to <= 1, got {spec}")
    c1 = fr[0]
    c2 = fr[0] + fr[1]
    c3 = c2 + fr[2]
    out = ([], [], [])
    for f in frames:
        h = hash_unit(f.frame_id)
        if h < c1:
            out[0].append(f)
        elif h < c2:
            out[1].append(f)
        elif h < c3:
            out[2].append(f)
    return out


def write_json(path, obj) -> None:
    """Stable JSON (sorted keys, trailing newline) for reports and configs."""
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True, allow_nan=False)
        fh.write("\n")


def read_json(path):
    with open(path, "r", encoding="utf-8") as fh:
        try:
            return json.load(fh, parse_constant=_reject_constant)
        except ValueError as exc:
            raise ParseError(f"{os.fspath(path)!r} is not valid JSON ({exc})") from None
