"""LiDAR-driven 3D lane annotation.

Stages, in order: ground segmentation of the sweep, projection of ground
returns into the image, adaptive-width blending of the 2D lane labels into
lane regions, per-beam clustering of the ground returns inside each region,
and (for training labels only) cubic-spline densification.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy.interpolate import CubicSpline
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import connected_components
from scipy.spatial import cKDTree

from .errors import DegenerateLane, EmptyDepth, EmptyLabels, InvalidParams, NoGroundFound
from .geometry import (
    CameraIntrinsics,
    Lane2D,
    Lane3D,
    RigidTransform,
    cumulative_arc_length,
    project,
    transform_cloud,
)

logger = logging.getLogger(__name__)

# Elevation bin used to recover ring structure when beam ids are missing.
ELEVATION_BIN_DEG = 0.4
# Seeds whose local normal is tilted further than this from vertical are skipped.
SEED_MAX_TILT_DEG = 30.0


@dataclass(frozen=True, eq=False)
class LidarSweep:
    """LiDAR returns in the sensor frame plus their elevation-ring index."""

    points: np.ndarray
    beam_id: np.ndarray

    def __post_init__(self):
        p = np.array(self.points, dtype=np.float64).reshape(-1, 3)
        b = np.array(self.beam_id, dtype=np.int64).reshape(-1)
        if len(p) != len(b):
            raise InvalidParams("points and beam_id lengths differ")
        if not np.all(np.isfinite(p)):
            raise InvalidParams("sweep coordinates must be finite")
        if np.any(b < 0):
            raise InvalidParams("beam_id must be >= 0")
        p.setflags(write=False)
        b.setflags(write=False)
        object.__setattr__(self, "points", p)
        object.__setattr__(self, "beam_id", b)

    def __len__(self):
        return len(self.points)

    def __eq__(self, other):
        if not isinstance(other, LidarSweep):
            return NotImplemented
        return np.array_equal(self.points, other.points) and np.array_equal(self.beam_id, other.beam_id)

    @classmethod
    def from_xyz(cls, points, up_axis: int = 2, bin_deg: float = ELEVATION_BIN_DEG) -> "LidarSweep":
        """Build a sweep without ring ids by binning the elevation angle.

        ``up_axis`` names the sensor axis pointing up (z for the usual
        x-forward / y-left / z-up LiDAR frame).
        """
        p = np.asarray(points, dtype=np.float64).reshape(-1, 3)
        if len(p) == 0:
            return cls(p, np.zeros(0, dtype=np.int64))
        up = p[:, up_axis]
        horiz = np.linalg.norm(np.delete(p, up_axis, axis=1), axis=1)
        elev = np.degrees(np.arctan2(up, horiz))
        bins = np.floor(elev / bin_deg).astype(np.int64)
        return cls(p, bins - bins.min())

    def subset(self, index) -> "LidarSweep":
        return LidarSweep(self.points[index], self.beam_id[index])


@dataclass(frozen=True)
class GroundSegConfig:
    height_min: float
    height_max: float
    seed_count: int = 5
    growth_normal_tol: float = 10.0
    growth_radius: float = 0.5
    seed_z_range: tuple = (5.0, 15.0)

    def __post_init__(self):
        if not self.height_min < self.height_max:
            raise InvalidParams("height_min must be below height_max")
        if self.seed_count < 1:
            raise InvalidParams("seed_count must be >= 1")
        if not 0 < self.growth_normal_tol < 90:
            raise InvalidParams("growth_normal_tol must lie in (0, 90) degrees")
        if self.growth_radius <= 0:
            raise InvalidParams("growth_radius must be positive")


def estimate_height_band(
    heights,
    lo_pct: float = 5.0,
    hi_pct: float = 95.0,
    bin_size: float = 0.05,
    window: float = 3.0,
    margin: float = 1.5,
) -> tuple[float, float]:
    """Coarse ground interval from the camera-frame Y of many returns.

    Finds the mode of the height histogram, keeps returns within ``window``
    of it, and reports their ``[lo_pct, hi_pct]`` percentile band widened by
    ``margin``.
    """
    y = np.asarray(heights, dtype=np.float64).ravel()
    y = y[np.isfinite(y)]
    if len(y) == 0:
        raise NoGroundFound("no heights to estimate a ground band from")
    nbins = max(1, int(math.ceil((y.max() - y.min()) / bin_size)))
    counts, edges = np.histogram(y, bins=nbins)
    k = int(np.argmax(counts))
    mode = 0.5 * (edges[k] + edges[k + 1])
    near = y[np.abs(y - mode) <= window]
    lo, hi = np.percentile(near, [lo_pct, hi_pct])
    return float(lo - margin), float(hi + margin)


def _neighbour_table(cam: np.ndarray, beam: np.ndarray, radius: float, k_in: int = 4, k_adj: int = 2):
    """Indices of in-ring and adjacent-ring neighbours, ``-1`` where absent.

    In-ring neighbours farther than ``radius`` are dropped; cross-ring
    neighbours are kept whatever their distance because ring spacing grows
    quadratically with range.
    """
    n = len(cam)
    rings = np.unique(beam)
    members = {b: np.flatnonzero(beam == b) for b in rings}
    trees = {b: cKDTree(cam[idx]) for b, idx in members.items()}
    width = k_in + 2 * k_adj
    table = np.full((n, width), -1, dtype=np.int64)
    for pos, b in enumerate(rings):
        idx = members[b]
        q = cam[idx]
        k = min(k_in + 1, len(idx))
        d, j = trees[b].query(q, k=k)
        d = d.reshape(len(idx), k)[:, 1:]
        j = idx[j.reshape(len(idx), k)[:, 1:]]
        j = np.where(d <= radius, j, -1)
        table[idx, : k - 1] = j
        col = k_in
        for nb in (rings[pos - 1] if pos > 0 else None, rings[pos + 1] if pos + 1 < len(rings) else None):
            if nb is not None:
                other = members[nb]
                ka = min(k_adj, len(other))
                _, jj = trees[nb].query(q, k=ka)
                table[idx, col : col + ka] = other[jj.reshape(len(idx), ka)]
            col += k_adj
    return table


def _local_normals(cam: np.ndarray, table: np.ndarray):
    """PCA normals oriented towards camera-up (-Y); NaN rows when degenerate."""
    n = len(cam)
    idx = np.concatenate([np.arange(n)[:, None], table], axis=1)
    valid = idx >= 0
    pts = cam[np.where(valid, idx, 0)]
    w = valid[..., None].astype(np.float64)
    cnt = w.sum(axis=1)
    mean = (pts * w).sum(axis=1) / cnt
    d = (pts - mean[:, None, :]) * w
    cov = np.einsum("nki,nkj->nij", d, d) / cnt[:, None]
    evals, evecs = np.linalg.eigh(cov)
    normals = evecs[:, :, 0]
    flip = normals[:, 1] > 0
    normals[flip] *= -1.0
    total = evals.sum(axis=1)
    planar = (valid.sum(axis=1) >= 3) & (evals[:, 1] > 1e-6 * np.maximum(total, 1e-300))
    normals[~planar] = np.nan
    return normals


def segment_ground(
    sweep: LidarSweep,
    cfg: GroundSegConfig,
    extrinsics: RigidTransform | None = None,
    rng: np.random.Generator | int | None = 0,
) -> np.ndarray:
    """Indices (ascending) of the sweep returns labelled as ground.

    Coarse stage: camera-frame Y inside ``[height_min, height_max]``. Fine
    stage: region growth from ``seed_count`` random coarse returns with
    camera depth in ``seed_z_range``; a neighbour joins the region when the
    angle between the two local plane normals is at most
    ``growth_normal_tol`` and the edge between them is inclined no more
    than that to their mean plane.
    """
    if len(sweep) == 0:
        raise NoGroundFound("empty sweep")
    ext = extrinsics if extrinsics is not None else RigidTransform.identity()
    cam = transform_cloud(sweep.points, ext)
    coarse = (cam[:, 1] >= cfg.height_min) & (cam[:, 1] <= cfg.height_max)
    if not coarse.any():
        raise NoGroundFound("coarse height filter kept no returns")

    table = _neighbour_table(cam, sweep.beam_id, cfg.growth_radius)
    normals = _local_normals(cam, table)
    ok = coarse & np.all(np.isfinite(normals), axis=1)

    zlo, zhi = cfg.seed_z_range
    up_cos = -normals[:, 1]
    candidates = np.flatnonzero(
        ok & (cam[:, 2] >= zlo) & (cam[:, 2] <= zhi) & (up_cos >= math.cos(math.radians(SEED_MAX_TILT_DEG)))
    )
    if len(candidates) == 0:
        raise NoGroundFound("no seed candidates in front of the vehicle")
    gen = rng if isinstance(rng, np.random.Generator) else np.random.default_rng(rng)
    seeds = gen.choice(candidates, size=min(cfg.seed_count, len(candidates)), replace=False)

    rows = np.repeat(np.arange(len(cam)), table.shape[1])
    cols = table.ravel()
    keep = cols >= 0
    rows, cols = rows[keep], cols[keep]
    keep = ok[rows] & ok[cols]
    rows, cols = rows[keep], cols[keep]
    tol = math.radians(cfg.growth_normal_tol)
    keep = np.einsum("ij,ij->i", normals[rows], normals[cols]) >= math.cos(tol)
    rows, cols = rows[keep], cols[keep]
    # the edge itself must also lie within tol of the local plane
    edge = cam[cols] - cam[rows]
    n_mid = normals[rows] + normals[cols]
    n_mid /= np.linalg.norm(n_mid, axis=1, keepdims=True)
    rise = np.abs(np.einsum("ij,ij->i", n_mid, edge))
    keep = rise <= math.sin(tol) * np.linalg.norm(edge, axis=1)
    rows, cols = rows[keep], cols[keep]
    graph = coo_matrix((np.ones(len(rows), dtype=np.int8), (rows, cols)), shape=(len(cam), len(cam)))
    _, comp = connected_components(graph, directed=False)
    grown = np.isin(comp, np.unique(comp[seeds])) & ok
    return np.flatnonzero(grown)


@dataclass(frozen=True, eq=False)
class ProjectedPoints:
    """Ground returns that land inside the image, linked back to the sweep."""

    uv: np.ndarray
    cam: np.ndarray
    beam_id: np.ndarray
    source_index: np.ndarray

    def __len__(self):
        return len(self.uv)


def project_ground_to_image(
    ground: LidarSweep,
    extr: RigidTransform,
    k: CameraIntrinsics,
    image_size: tuple[int, int],
    source_index=None,
) -> ProjectedPoints:
    """Project LiDAR-frame ground returns; keep those with z > 0 and 0 <= u < W, 0 <= v < H."""
    h, w = image_size
    cam = transform_cloud(ground.points, extr)
    src = np.arange(len(cam)) if source_index is None else np.asarray(source_index)
    front = cam[:, 2] > 0
    cam, beam, src = cam[front], ground.beam_id[front], src[front]
    uv = project(cam, k) if len(cam) else np.empty((0, 2))
    inside = (uv[:, 0] >= 0) & (uv[:, 0] < w) & (uv[:, 1] >= 0) & (uv[:, 1] < h)
    return ProjectedPoints(uv[inside], cam[inside], beam[inside], src[inside])


def depth_map_from_points(uv: np.ndarray, z: np.ndarray, image_size: tuple[int, int]) -> np.ndarray:
    """Sparse depth raster; where several points share a pixel the nearest wins."""
    h, w = image_size
    depth = np.zeros((h, w))
    if len(uv) == 0:
        return depth
    col = np.clip(np.rint(uv[:, 0]).astype(np.int64), 0, w - 1)
    row = np.clip(np.rint(uv[:, 1]).astype(np.int64), 0, h - 1)
    order = np.argsort(-z, kind="stable")
    depth[row[order], col[order]] = z[order]
    return depth


@dataclass(frozen=True, eq=False)
class LaneRegionMask:
    """Union mask of the broadened lanes plus a per-lane label raster.

    ``labels`` holds ``i + 1`` for pixels of ``lane_ids[i]`` and 0 elsewhere.
    ``half_width`` and ``row_depth`` are per image row.
    """

    mask: np.ndarray
    labels: np.ndarray
    lane_ids: tuple
    half_width: np.ndarray
    row_depth: np.ndarray


def row_depth_profile(depth_hint: np.ndarray) -> np.ndarray:
    """Per-row median of valid depths, gap-filled, and made non-increasing downwards."""
    d = np.asarray(depth_hint, dtype=np.float64)
    valid = d > 0
    rows = np.flatnonzero(valid.any(axis=1))
    if len(rows) == 0:
        raise EmptyDepth("depth hint has no valid pixels")
    med = np.array([np.median(d[r][valid[r]]) for r in rows])
    prof = np.interp(np.arange(d.shape[0]), rows, med)
    # farther rows (smaller v) must not come out nearer than the row below
    return np.maximum.accumulate(prof[::-1])[::-1]


def _densify_2d(points: np.ndarray, step: float = 0.5) -> np.ndarray:
    seg = np.diff(points, axis=0)
    n = np.maximum(1, np.ceil(np.linalg.norm(seg, axis=1) / step).astype(np.int64))
    parts = [points[i] + seg[i] * (np.arange(n[i])[:, None] / n[i]) for i in range(len(seg))]
    parts.append(points[-1:])
    return np.vstack(parts)


def blend_lane_regions(
    labels: Sequence[Lane2D],
    image_size: tuple[int, int],
    base_width_m: float,
    k: CameraIntrinsics,
    depth_hint: np.ndarray,
) -> LaneRegionMask:
    """Broaden each 2D lane to the pixel width of ``base_width_m`` (full width) at each row's depth."""
    if base_width_m <= 0:
        raise InvalidParams("base_width_m must be positive")
    if len(labels) == 0:
        raise EmptyLabels("no 2D lane labels to broaden")
    h, w = image_size
    row_depth = row_depth_profile(depth_hint)
    half = np.clip(0.5 * base_width_m * k.fx / row_depth, 1.0, w / 8.0)
    lab = np.zeros((h, w), dtype=np.int32)
    for i, lane in enumerate(labels):
        pts = _densify_2d(lane.points)
        r = np.rint(pts[:, 1]).astype(np.int64)
        inside = (r >= 0) & (r < h)
        pts, r = pts[inside], r[inside]
        if len(r) == 0:
            continue
        hw = half[r]
        lo = np.clip(np.ceil(pts[:, 0] - hw), 0, w).astype(np.int64)
        hi = np.clip(np.floor(pts[:, 0] + hw), -1, w - 1).astype(np.int64)
        for row in np.unique(r):
            sel = r == row
            a, b = lo[sel].min(), hi[sel].max()
            if b >= a:
                lab[row, a : b + 1] = i + 1
    ids = tuple(lane.lane_id if lane.lane_id is not None else i for i, lane in enumerate(labels))
    return LaneRegionMask(lab > 0, lab, ids, half, row_depth)


def recover_lane_centers(region: LaneRegionMask, projected: ProjectedPoints):
    """Per-lane ``(lane_id, centers (N, 3), beam_ids (N,))`` ordered by top-view range."""
    h, w = region.labels.shape
    if len(projected) == 0:
        return []
    col = np.clip(np.rint(projected.uv[:, 0]).astype(np.int64), 0, w - 1)
    row = np.clip(np.rint(projected.uv[:, 1]).astype(np.int64), 0, h - 1)
    owner = region.labels[row, col]
    out = []
    for i, lane_id in enumerate(region.lane_ids):
        sel = owner == i + 1
        if not sel.any():
            continue
        beams = projected.beam_id[sel]
        pts = projected.cam[sel]
        ub, inv = np.unique(beams, return_inverse=True)
        sums = np.zeros((len(ub), 3))
        np.add.at(sums, inv, pts)
        centers = sums / np.bincount(inv, minlength=len(ub))[:, None]
        rng = np.hypot(centers[:, 0], centers[:, 2])
        order = np.argsort(rng, kind="stable")
        centers, ub = centers[order], ub[order]
        keep = np.ones(len(centers), dtype=bool)
        keep[1:] = np.any(centers[1:] != centers[:-1], axis=1)
        centers, ub = centers[keep], ub[keep]
        if len(centers) < 2:
            continue
        steps = np.diff(ub)
        if np.any(steps > 0) and np.any(steps < 0):
            logger.warning("lane %r: beam order is not monotone along range; ordering may be ambiguous", lane_id)
        out.append((lane_id, centers, ub))
    return out


def recover_lane_points(region: LaneRegionMask, projected: ProjectedPoints) -> list[Lane3D]:
    """One center per (lane region, beam): the centroid of its member returns."""
    return [Lane3D(c, lane_id) for lane_id, c, _ in recover_lane_centers(region, projected)]


def interpolate_lane(lane: Lane3D, sample_step: float) -> Lane3D:
    """Natural cubic spline over cumulative chord length, sampled every ``sample_step``.

    Knots are reproduced exactly: any sample within 1e-9 m of a knot is
    replaced by the knot itself, and both endpoints are always present.
    """
    if len(lane) < 2:
        raise DegenerateLane("need at least 2 points to interpolate")
    if sample_step <= 0:
        raise InvalidParams("sample_step must be positive")
    s = cumulative_arc_length(lane.points)
    total = s[-1]
    spline = CubicSpline(s, lane.points, bc_type="natural", axis=0)
    n = int(math.floor(total / sample_step + 1e-9))
    t = np.arange(n + 1) * sample_step
    t = t[t < total - 1e-9]
    out = np.vstack([spline(t), lane.points[-1:]])
    t = np.append(t, total)
    j = np.clip(np.searchsorted(s, t), 0, len(s) - 1)
    jm = np.clip(j - 1, 0, len(s) - 1)
    near = np.where(np.abs(s[j] - t) <= np.abs(s[jm] - t), j, jm)
    hit = np.abs(s[near] - t) <= 1e-9
    out[hit] = lane.points[near[hit]]
    return lane.with_points(out)


@dataclass(frozen=True)
class AnnotationConfig:
    ground: GroundSegConfig
    base_width_m: float = 0.4
    seed: int = 0


def annotate_frame(
    sweep: LidarSweep,
    labels2d: Sequence[Lane2D],
    k: CameraIntrinsics,
    extr: RigidTransform,
    image_size: tuple[int, int],
    cfg: AnnotationConfig,
) -> list[Lane3D]:
    """Run the full pipeline on one frame and return raw per-beam lane centers."""
    ground_idx = segment_ground(sweep, cfg.ground, extr, rng=cfg.seed)
    ground = sweep.subset(ground_idx)
    projected = project_ground_to_image(ground, extr, k, image_size, source_index=ground_idx)
    hint = depth_map_from_points(projected.uv, projected.cam[:, 2], image_size)
    region = blend_lane_regions(labels2d, image_size, cfg.base_width_m, k, hint)
    return recover_lane_points(region, projected)
