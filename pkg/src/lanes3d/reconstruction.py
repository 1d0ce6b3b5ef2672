"""Extrinsic-free 3D lane reconstruction from a lane mask and per-pixel offsets.

Depth is regressed as a residual against per-row anchors,
``z = alpha[row] + beta[row] * delta_z``, and lane pixels are lifted with
the camera intrinsics alone.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import Iterable

import numpy as np
from scipy import ndimage

from .annotation import interpolate_lane
from .errors import (
    EmptyDepth,
    InsufficientData,
    InvalidParams,
    NonPositiveDepth,
    NoValidPixels,
    OutOfBounds,
    ShapeMismatch,
)
from .geometry import CameraIntrinsics, Lane3D, backproject

logger = logging.getLogger(__name__)

BETA_FLOOR = 0.1
PROB_EPS = 1e-7


@dataclass(frozen=True, eq=False)
class OffsetMaps:
    delta_u: np.ndarray
    delta_v: np.ndarray
    delta_z: np.ndarray

    def __post_init__(self):
        maps = [np.asarray(m, dtype=np.float64) for m in (self.delta_u, self.delta_v, self.delta_z)]
        if not (maps[0].ndim == 2 and maps[0].shape == maps[1].shape == maps[2].shape):
            raise ShapeMismatch("offset maps must share one 2D shape")
        if not all(np.all(np.isfinite(m)) for m in maps):
            raise InvalidParams("offset maps must be finite")
        for name, m in zip(("delta_u", "delta_v", "delta_z"), maps):
            object.__setattr__(self, name, m)

    @property
    def shape(self):
        return self.delta_u.shape

    @classmethod
    def zeros(cls, shape) -> "OffsetMaps":
        return cls(np.zeros(shape), np.zeros(shape), np.zeros(shape))

    def stack(self) -> np.ndarray:
        return np.stack([self.delta_u, self.delta_v, self.delta_z])


@dataclass(frozen=True, eq=False)
class RowAnchors:
    alpha: np.ndarray
    beta: np.ndarray

    def __post_init__(self):
        a = np.asarray(self.alpha, dtype=np.float64).ravel()
        b = np.asarray(self.beta, dtype=np.float64).ravel()
        if a.shape != b.shape:
            raise ShapeMismatch("alpha and beta must have the same length")
        if np.any(b <= 0):
            raise InvalidParams("beta must be positive for every row")
        object.__setattr__(self, "alpha", a)
        object.__setattr__(self, "beta", b)

    def __len__(self):
        return len(self.alpha)

    def __eq__(self, other):
        if not isinstance(other, RowAnchors):
            return NotImplemented
        return np.array_equal(self.alpha, other.alpha) and np.array_equal(self.beta, other.beta)


@dataclass(frozen=True)
class LossConfig:
    lam: float = 1.0

    def __post_init__(self):
        if self.lam < 0:
            raise InvalidParams("lambda must be >= 0")


def check_depth_map(depth) -> np.ndarray:
    d = np.asarray(depth, dtype=np.float64)
    if d.ndim != 2:
        raise ShapeMismatch("depth map must be 2D")
    if not np.all(np.isfinite(d)) or np.any(d < 0):
        raise InvalidParams("depth map values must be finite and >= 0 (0 = missing)")
    return d


def apply_offsets(seed_points, offsets: OffsetMaps):
    """Refine integer ``(u, v)`` seeds by the offset maps.

    Returns ``(points, clamped)``: refined sub-pixel points clamped to the
    image and a flag per point telling whether clamping happened.
    """
    s = np.asarray(seed_points).reshape(-1, 2)
    h, w = offsets.shape
    u_s, v_s = s[:, 0], s[:, 1]
    if np.any((u_s < 0) | (u_s >= w) | (v_s < 0) | (v_s >= h)) or np.any(s != np.round(s)):
        raise OutOfBounds("seed points must be integer pixels inside the raster")
    ui, vi = u_s.astype(np.int64), v_s.astype(np.int64)
    u = ui + offsets.delta_u[vi, ui]
    v = vi + offsets.delta_v[vi, ui]
    uc = np.clip(u, 0.0, w - 1.0)
    vc = np.clip(v, 0.0, h - 1.0)
    clamped = (uc != u) | (vc != v)
    return np.column_stack([uc, vc]), clamped


def decode_depth(row, delta_z, anchors: RowAnchors):
    r = np.asarray(row)
    if np.any((r < 0) | (r >= len(anchors))):
        raise OutOfBounds("row outside the anchor table")
    ri = r.astype(np.int64)
    z = anchors.alpha[ri] + anchors.beta[ri] * np.asarray(delta_z, dtype=np.float64)
    if np.any(z <= 0):
        raise NonPositiveDepth("decoded depth is not positive")
    return float(z) if np.ndim(z) == 0 else z


def encode_depth(row, z, anchors: RowAnchors):
    ri = np.asarray(row).astype(np.int64)
    out = (np.asarray(z, dtype=np.float64) - anchors.alpha[ri]) / anchors.beta[ri]
    return float(out) if np.ndim(out) == 0 else out


def fit_row_anchors(depth_maps: Iterable[np.ndarray], beta_floor: float = BETA_FLOOR) -> RowAnchors:
    """Per-row mean (shift) and floored standard deviation (scale) of valid depths.

    Only valid pixels are kept between maps, so sparse lane depth maps of a
    large dataset stream through in little memory.
    """
    shape = None
    rows, vals = [], []
    for d in depth_maps:
        m = check_depth_map(d)
        if shape is None:
            shape = m.shape
        elif m.shape != shape:
            raise ShapeMismatch(f"depth maps differ in shape: {shape} vs {m.shape}")
        r, _ = np.nonzero(m > 0)
        rows.append(r)
        vals.append(m[m > 0])
    if shape is None:
        raise InsufficientData("no depth maps given")
    r = np.concatenate(rows)
    v = np.concatenate(vals)
    h = shape[0]
    cnt = np.bincount(r, minlength=h)
    have = np.flatnonzero(cnt > 0)
    if len(have) < 2:
        raise InsufficientData("fewer than 2 rows carry valid depth")
    mean_all = np.bincount(r, weights=v, minlength=h) / np.maximum(cnt, 1)
    var_all = np.bincount(r, weights=(v - mean_all[r]) ** 2, minlength=h) / np.maximum(cnt, 1)
    all_rows = np.arange(h)
    alpha = np.interp(all_rows, have, mean_all[have])
    beta = np.interp(all_rows, have, np.maximum(np.sqrt(var_all[have]), beta_floor))
    return RowAnchors(alpha, beta)


def diamond_kernel(size: int = 5) -> np.ndarray:
    r = size // 2
    i, j = np.mgrid[-r : r + 1, -r : r + 1]
    return (np.abs(i) + np.abs(j)) <= r


def complete_depth(sparse: np.ndarray, kernel_size: int = 5) -> np.ndarray:
    """Dense depth from a sparse map: diamond dilation, then nearest-valid fill.

    Dilation runs on inverted depth ranks so the nearer neighbour wins. Input
    pixels that were valid are copied through untouched, and every filled
    value is one of the input values.
    """
    d = check_depth_map(sparse)
    valid = d > 0
    if not valid.any():
        raise EmptyDepth("depth map has no valid pixels")
    if valid.all():
        return d.copy()
    # dilate integer ranks (nearest depth = highest rank) so values copy exactly
    levels = np.unique(d[valid])
    n = len(levels)
    rank = np.zeros(d.shape, dtype=np.int64)
    rank[valid] = n - np.searchsorted(levels, d[valid])
    dil = ndimage.grey_dilation(rank, footprint=diamond_kernel(kernel_size), mode="constant", cval=0)
    out = np.where(valid, d, np.where(dil > 0, levels[np.clip(n - dil, 0, n - 1)], 0.0))
    have = out > 0
    if not have.all():
        _, (ri, ci) = ndimage.distance_transform_edt(~have, return_indices=True)
        out = out[ri, ci]
    out[valid] = d[valid]
    return out


@dataclass(frozen=True)
class LiftConfig:
    smooth: bool = True
    sample_step: float = 0.5
    merge_heading_deg: float = 2.0
    merge_offset_m: float = 0.3
    min_pixels: int = 2


def _centerline(seed_px: np.ndarray, pts: np.ndarray) -> np.ndarray:
    """Collapse a component's lifted pixels to one point per image row (or column)."""
    v, u = seed_px[:, 1], seed_px[:, 0]
    by_row = np.ptp(v) >= np.ptp(u)
    key = v if by_row else u
    keys, inv = np.unique(key, return_inverse=True)
    sums = np.zeros((len(keys), 3))
    np.add.at(sums, inv, pts)
    line = sums / np.bincount(inv)[:, None]
    if by_row:
        line = line[::-1]  # bottom rows are nearest
    if np.hypot(line[-1, 0], line[-1, 2]) < np.hypot(line[0, 0], line[0, 2]):
        line = line[::-1]
    keep = np.ones(len(line), dtype=bool)
    keep[1:] = np.any(line[1:] != line[:-1], axis=1)
    return line[keep]


def _heading(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    d = b[[0, 2]] - a[[0, 2]]
    n = np.linalg.norm(d)
    return d / n if n > 0 else d


def _end_direction(line: np.ndarray, at_end: bool, span: float = 2.0) -> np.ndarray:
    pts = line if at_end else line[::-1]
    tip = pts[-1]
    dist = np.hypot(pts[:, 0] - tip[0], pts[:, 2] - tip[2])
    far = np.flatnonzero(dist >= span)
    base = pts[far[-1]] if len(far) else pts[0]
    return _heading(base, tip)


def _can_join(a: np.ndarray, b: np.ndarray, heading_deg: float, offset_m: float) -> bool:
    """True when ``b`` continues ``a`` (a's far end to b's near end) in top view."""
    da = _end_direction(a, True)
    db = _end_direction(b, False)
    if not (np.any(da) and np.any(db)):
        return False
    db = -db  # direction b leaves its start, pointing away from a
    cosang = float(np.clip(da @ db, -1.0, 1.0))
    if math.degrees(math.acos(cosang)) > heading_deg:
        return False
    gap = b[0, [0, 2]] - a[-1, [0, 2]]
    along = gap @ da
    lateral = abs(gap[0] * da[1] - gap[1] * da[0])
    return along > 0 and lateral <= offset_m


def _merge_lines(lines: list, heading_deg: float, offset_m: float) -> list:
    lines = list(lines)
    merged = True
    while merged:
        merged = False
        for i in range(len(lines)):
            for j in range(len(lines)):
                if i != j and _can_join(lines[i], lines[j], heading_deg, offset_m):
                    lines[i] = np.vstack([lines[i], lines[j]])
                    del lines[j]
                    merged = True
                    break
            if merged:
                break
    return lines


def lift_to_lanes(
    mask: np.ndarray,
    offsets: OffsetMaps,
    anchors: RowAnchors,
    k: CameraIntrinsics,
    cfg: LiftConfig = LiftConfig(),
) -> list[Lane3D]:
    """Lane instances from the mask's 8-connected components, lifted to 3D.

    Pixels are refined by the offsets, depth-decoded against their row's
    anchors and back-projected; each instance is reduced to one point per
    image row and, when ``cfg.smooth``, resampled by a natural cubic spline.
    Components whose ends line up within ``merge_heading_deg`` and
    ``merge_offset_m`` are joined into one lane.
    """
    m = np.asarray(mask, dtype=bool)
    if m.shape != offsets.shape or m.shape[0] != len(anchors):
        raise ShapeMismatch("mask, offsets and anchors disagree in size")
    comp, n = ndimage.label(m, structure=np.ones((3, 3), dtype=bool))
    lines = []
    for c in range(1, n + 1):
        v, u = np.nonzero(comp == c)
        if len(v) < cfg.min_pixels:
            continue
        seeds = np.column_stack([u, v])
        refined, _ = apply_offsets(seeds, offsets)
        z = anchors.alpha[v] + anchors.beta[v] * offsets.delta_z[v, u]
        ok = z > 0
        if not ok.all():
            logger.warning("component %d: dropping %d pixels with non-positive depth", c, int((~ok).sum()))
        if ok.sum() < cfg.min_pixels:
            continue
        pts = backproject(refined[ok, 0], refined[ok, 1], z[ok], k)
        line = _centerline(seeds[ok], pts)
        if len(line) >= 2:
            lines.append(line)
    lines = _merge_lines(lines, cfg.merge_heading_deg, cfg.merge_offset_m)
    lanes = []
    for i, line in enumerate(lines):
        keep = np.ones(len(line), dtype=bool)
        keep[1:] = np.any(line[1:] != line[:-1], axis=1)
        line = line[keep]
        if len(line) < 2:
            continue
        lane = Lane3D(line, i)
        if cfg.smooth and lane.length > 0:
            lane = interpolate_lane(lane, cfg.sample_step)
        lanes.append(lane)
    return lanes


def seg_loss(prob, gt) -> float:
    """Mean pixel-wise binary cross-entropy with probabilities clamped to [eps, 1 - eps]."""
    p = np.asarray(prob, dtype=np.float64)
    y = np.asarray(gt, dtype=np.float64)
    if p.shape != y.shape:
        raise ShapeMismatch(f"prob {p.shape} vs gt {y.shape}")
    p = np.clip(p, PROB_EPS, 1.0 - PROB_EPS)
    return float(-np.mean(y * np.log(p) + (1.0 - y) * np.log1p(-p)))


def smooth_l1(x):
    a = np.abs(x)
    return np.where(a < 1.0, 0.5 * a * a, a - 0.5)


def reg_loss(pred: OffsetMaps, gt: OffsetMaps, valid) -> float:
    """Smooth-L1 over the three offset channels, averaged over valid pixels and channels."""
    vm = np.asarray(valid, dtype=bool)
    if pred.shape != gt.shape or vm.shape != pred.shape:
        raise ShapeMismatch("offset maps and valid mask disagree in shape")
    if not vm.any():
        raise NoValidPixels("valid mask is empty")
    diff = pred.stack()[:, vm] - gt.stack()[:, vm]
    return float(np.mean(smooth_l1(diff)))


def total_loss(seg: float, reg: float, cfg: LossConfig = LossConfig()) -> float:
    return seg + cfg.lam * reg
