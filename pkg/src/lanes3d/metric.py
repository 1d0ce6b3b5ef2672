"""Two-stage lane matching: top-view IoU gate, then unilateral chamfer distance.

A prediction is a true positive when it is assigned to a ground-truth lane
(greedy, one-to-one, IoU descending among pairs above ``iou_threshold``)
and the mean distance from equally spaced ground-truth samples to the
prediction polyline is at most ``tau_cd``.
"""

from __future__ import annotations

import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .errors import DegenerateLane, InvalidParams, OutsideROI
from .geometry import Lane3D, cumulative_arc_length, interpolate_along, point_to_polyline_distance


@dataclass(frozen=True)
class MatchConfig:
    iou_threshold: float = 0.3
    tau_cd: float = 0.3
    sample_step: float = 0.5
    min_samples: int = 10
    topview_halfwidth: float = 0.5
    raster_cell: float = 0.1
    coverage_samples: int = 3
    roi: tuple = (-10.0, 10.0, 0.0, 100.0)

    def __post_init__(self):
        if not 0 < self.iou_threshold <= 1:
            raise InvalidParams("iou_threshold must lie in (0, 1]")
        for name in ("tau_cd", "sample_step", "topview_halfwidth", "raster_cell"):
            if not getattr(self, name) > 0:
                raise InvalidParams(f"{name} must be positive")
        if self.coverage_samples < 1:
            raise InvalidParams("coverage_samples must be >= 1")
        if self.min_samples < 2:
            raise InvalidParams("min_samples must be >= 2")
        x0, x1, z0, z1 = self.roi
        if not (x1 > x0 and z1 > z0):
            raise InvalidParams("roi must have positive extent")
        object.__setattr__(self, "roi", tuple(float(v) for v in self.roi))

    @classmethod
    def from_dict(cls, d: dict) -> "MatchConfig":
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(d) - known
        if unknown:
            raise InvalidParams(f"unknown match config keys: {sorted(unknown)}")
        kw = dict(d)
        if "roi" in kw:
            kw["roi"] = tuple(kw["roi"])
        return cls(**kw)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["roi"] = list(self.roi)
        return d


@dataclass(frozen=True)
class LaneMatch:
    pred_index: int
    gt_index: int
    iou: float
    cd: float


@dataclass(frozen=True)
class FrameMatch:
    matches: list  # true positives
    fp: list  # prediction indices
    fn: list  # ground-truth indices
    rejected: list = field(default_factory=list)  # assigned pairs failing the CD check

    def __iter__(self):
        return iter((self.matches, self.fp, self.fn))


@dataclass(frozen=True)
class EvalResult:
    tp: int
    fp: int
    fn: int
    precision: float
    recall: float
    f1: float
    cd_error: float

    @classmethod
    def from_counts(cls, tp: int, fp: int, fn: int, cds: Sequence[float]) -> "EvalResult":
        p = tp / (tp + fp) if tp + fp else 0.0
        r = tp / (tp + fn) if tp + fn else 0.0
        f1 = 2 * p * r / (p + r) if p + r else 0.0
        cd = math.fsum(cds) / len(cds) if len(cds) else 0.0
        return cls(tp, fp, fn, p, r, f1, cd)

    def to_dict(self) -> dict:
        return asdict(self)


def _grid(cfg: MatchConfig):
    """Sample lattice: ``coverage_samples`` per axis inside every raster cell."""
    x0, x1, z0, z1 = cfg.roi
    nx = int(round((x1 - x0) / cfg.raster_cell)) * cfg.coverage_samples
    nz = int(round((z1 - z0) / cfg.raster_cell)) * cfg.coverage_samples
    return x0, z0, nx, nz, cfg.raster_cell / cfg.coverage_samples


def _window(lo, hi, cfg: MatchConfig):
    x0, z0, nx, nz, c = _grid(cfg)
    ix0 = max(0, int(math.floor((lo[0] - x0) / c - 0.5)))
    ix1 = min(nx - 1, int(math.ceil((hi[0] - x0) / c - 0.5)))
    iz0 = max(0, int(math.floor((lo[1] - z0) / c - 0.5)))
    iz1 = min(nz - 1, int(math.ceil((hi[1] - z0) / c - 0.5)))
    if ix1 < ix0 or iz1 < iz0:
        return None
    ix, iz = np.meshgrid(np.arange(ix0, ix1 + 1), np.arange(iz0, iz1 + 1), indexing="ij")
    ix, iz = ix.ravel(), iz.ravel()
    return ix, iz, x0 + (ix + 0.5) * c, z0 + (iz + 0.5) * c, nz


def _segment_keys(a: np.ndarray, b: np.ndarray, hw: float, cfg: MatchConfig) -> np.ndarray:
    """Lattice samples inside the flat-ended rectangle of half-width ``hw`` around a-b."""
    w = _window(np.minimum(a, b) - hw, np.maximum(a, b) + hw, cfg)
    if w is None:
        return np.empty(0, dtype=np.int64)
    ix, iz, px, pz, nz = w
    ab = b - a
    L2 = float(ab @ ab)
    t = ((px - a[0]) * ab[0] + (pz - a[1]) * ab[1]) / L2
    cross = (px - a[0]) * ab[1] - (pz - a[1]) * ab[0]
    keep = (t >= 0) & (t <= 1) & (cross * cross <= hw * hw * L2)
    return ix[keep] * nz + iz[keep]


def _join_keys(v: np.ndarray, d_in: np.ndarray, d_out: np.ndarray, hw: float, cfg: MatchConfig) -> np.ndarray:
    """Round join: the part of the disc at ``v`` past the incoming and before the outgoing segment."""
    w = _window(v - hw, v + hw, cfg)
    if w is None:
        return np.empty(0, dtype=np.int64)
    ix, iz, px, pz, nz = w
    qx, qz = px - v[0], pz - v[1]
    keep = (qx * qx + qz * qz <= hw * hw) & (qx * d_in[0] + qz * d_in[1] >= 0) & (qx * d_out[0] + qz * d_out[1] <= 0)
    return ix[keep] * nz + iz[keep]


def topview_cells(lane: Lane3D, cfg: MatchConfig) -> np.ndarray:
    """Sorted keys of ROI lattice samples covered by the lane's top-view band.

    The band is the (x, z) polyline widened by ``topview_halfwidth`` with
    flat ends and round joins. Each raster cell carries
    ``coverage_samples**2`` samples, so IoU over samples measures
    fractional cell coverage.
    """
    p = lane.points[:, [0, 2]]
    keep = np.ones(len(p), dtype=bool)
    keep[1:] = np.any(p[1:] != p[:-1], axis=1)
    p = p[keep]
    hw = cfg.topview_halfwidth
    keys = [_segment_keys(p[i], p[i + 1], hw, cfg) for i in range(len(p) - 1)]
    d = np.diff(p, axis=0)
    for i in range(1, len(p) - 1):
        keys.append(_join_keys(p[i], d[i - 1], d[i], hw, cfg))
    if not keys:
        return np.empty(0, dtype=np.int64)
    return np.unique(np.concatenate(keys))


def _iou_from_cells(a: np.ndarray, b: np.ndarray) -> float:
    if len(a) == 0 or len(b) == 0:
        raise OutsideROI("lane has no cells inside the region of interest")
    inter = len(np.intersect1d(a, b, assume_unique=True))
    return inter / (len(a) + len(b) - inter)


def topview_iou(pred: Lane3D, gt: Lane3D, cfg: MatchConfig) -> float:
    return _iou_from_cells(topview_cells(pred, cfg), topview_cells(gt, cfg))


def gt_samples(gt: Lane3D, cfg: MatchConfig) -> np.ndarray:
    """``m`` points at equal arc-length spacing (<= sample_step, at least min_samples)."""
    s = cumulative_arc_length(gt.points)
    total = s[-1]
    if total < cfg.sample_step:
        raise DegenerateLane(f"ground-truth lane length {total:.4g} m is below sample_step")
    m = max(cfg.min_samples, int(math.floor(total / cfg.sample_step + 1e-9)) + 1)
    return interpolate_along(gt.points, s, np.linspace(0.0, total, m))


def unilateral_cd(pred: Lane3D, gt: Lane3D, cfg: MatchConfig) -> float:
    q = gt_samples(gt, cfg)
    if np.array_equal(pred.points, gt.points):
        return 0.0  # projection round-off would otherwise leave ~1e-17
    return float(np.mean(point_to_polyline_distance(q, pred.points)))


def match_frame(preds: Sequence[Lane3D], gts: Sequence[Lane3D], cfg: MatchConfig) -> FrameMatch:
    pred_cells = [topview_cells(p, cfg) for p in preds]
    gt_cells = [topview_cells(g, cfg) for g in gts]
    cands = []
    for i, pc in enumerate(pred_cells):
        for j, gc in enumerate(gt_cells):
            if len(pc) == 0 or len(gc) == 0:
                continue
            iou = _iou_from_cells(pc, gc)
            if iou > cfg.iou_threshold:
                cands.append((-iou, unilateral_cd(preds[i], gts[j], cfg), i, j))
    cands.sort()
    used_p, used_g = set(), set()
    tps, rejected = [], []
    for neg_iou, cd, i, j in cands:
        if i in used_p or j in used_g:
            continue
        used_p.add(i)
        used_g.add(j)
        m = LaneMatch(i, j, -neg_iou, cd)
        (tps if cd <= cfg.tau_cd else rejected).append(m)
    tp_p = {m.pred_index for m in tps}
    tp_g = {m.gt_index for m in tps}
    fp = [i for i in range(len(preds)) if i not in tp_p]
    fn = [j for j in range(len(gts)) if j not in tp_g]
    return FrameMatch(tps, fp, fn, rejected)


def _match_star(args):
    preds, gts, cfg = args
    return match_frame(preds, gts, cfg)


def evaluate_frames(frames: Iterable, cfg: MatchConfig, jobs: int = 1) -> list[FrameMatch]:
    """Per-frame results, in input order regardless of ``jobs``."""
    items = [(list(p), list(g), cfg) for p, g in frames]
    if jobs <= 1 or len(items) < 2:
        return [_match_star(it) for it in items]
    with ProcessPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(_match_star, items, chunksize=max(1, len(items) // (4 * jobs))))


def summarize(results: Sequence[FrameMatch]) -> EvalResult:
    tp = sum(len(r.matches) for r in results)
    fp = sum(len(r.fp) for r in results)
    fn = sum(len(r.fn) for r in results)
    cds = [m.cd for r in results for m in r.matches]
    return EvalResult.from_counts(tp, fp, fn, cds)


def evaluate_dataset(frames: Iterable, cfg: MatchConfig, jobs: int = 1) -> EvalResult:
    return summarize(evaluate_frames(frames, cfg, jobs))
