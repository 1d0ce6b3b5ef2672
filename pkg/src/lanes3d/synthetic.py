"""Synthetic road scenes with exact ground truth.

Terrain is a height field in camera coordinates: ``y = h(x, z)`` is the
camera-frame Y (downward positive) of the road surface, so a flat road
1.6 m below the camera is ``base_height = 1.6``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import NamedTuple, Sequence

import numpy as np

from .annotation import LidarSweep
from .geometry import CameraIntrinsics, Lane2D, Lane3D, RigidTransform, project

# LiDAR frame is x-forward, y-left, z-up; camera is x-right, y-down, z-forward.
LIDAR_TO_CAMERA_ROTATION = np.array([[0.0, -1.0, 0.0], [0.0, 0.0, -1.0], [1.0, 0.0, 0.0]])

DEFAULT_IMAGE_SIZE = (720, 1280)


def default_intrinsics() -> CameraIntrinsics:
    return CameraIntrinsics(1000.0, 1000.0, 640.0, 360.0, 0.0)


def default_lidar_extrinsics() -> RigidTransform:
    # sensor 0.4 m above and 0.3 m behind the camera
    return RigidTransform(LIDAR_TO_CAMERA_ROTATION, np.array([0.0, -0.4, -0.3]))


@dataclass(frozen=True)
class TerrainModel:
    gaussians: tuple = ()
    base_height: float = 1.6
    ramp_gradient: float = 0.0

    def __post_init__(self):
        g = tuple(tuple(float(v) for v in row) for row in self.gaussians)
        for cx, cz, sigma, amp in g:
            if not sigma > 0:
                raise ValueError("gaussian sigma must be positive")
            if not all(math.isfinite(v) for v in (cx, cz, sigma, amp)):
                raise ValueError("terrain parameters must be finite")
        object.__setattr__(self, "gaussians", g)

    def height(self, x, z):
        x = np.asarray(x, dtype=np.float64)
        z = np.asarray(z, dtype=np.float64)
        h = self.base_height + self.ramp_gradient * z
        for cx, cz, sigma, amp in self.gaussians:
            h = h + amp * np.exp(-((x - cx) ** 2 + (z - cz) ** 2) / (2.0 * sigma * sigma))
        return h


@dataclass(frozen=True)
class TerrainParams:
    kind: str = "hills"  # flat | ramp | hills
    n_gaussians: int = 3
    amplitude: float = 1.0
    sigma_range: tuple = (8.0, 14.0)
    center_z_range: tuple = (30.0, 60.0)
    center_x_range: tuple = (-15.0, 15.0)
    max_gradient: float = 0.03
    base_height: float = 1.6


def generate_terrain(seed: int, params: TerrainParams = TerrainParams()) -> TerrainModel:
    rng = np.random.default_rng(seed)
    if params.kind == "flat":
        return TerrainModel((), params.base_height)
    if params.kind == "ramp":
        g = float(rng.uniform(-params.max_gradient, params.max_gradient))
        return TerrainModel((), params.base_height, g)
    if params.kind != "hills":
        raise ValueError(f"unknown terrain kind {params.kind!r}")
    rows = []
    for _ in range(params.n_gaussians):
        rows.append(
            (
                float(rng.uniform(*params.center_x_range)),
                float(rng.uniform(*params.center_z_range)),
                float(rng.uniform(*params.sigma_range)),
                float(rng.uniform(-params.amplitude, params.amplitude)),
            )
        )
    return TerrainModel(tuple(rows), params.base_height)


@dataclass(frozen=True)
class CurvatureParams:
    """Bounds on the top-view polynomial ``x(z) = sum a_k z^k`` shared by a scene's lanes."""

    max_coeffs: tuple = (0.0, 0.03, 3e-4, 2e-6, 1e-8)
    spacing: float = 3.5
    spacing_jitter: float = 0.3


def lay_lanes(
    terrain: TerrainModel,
    n_lanes: int,
    curvature: CurvatureParams = CurvatureParams(),
    seed: int = 0,
    z_range: tuple = (6.0, 50.0),
    point_step: float = 1.0,
) -> list[Lane3D]:
    """Parallel 4th-degree top-view lanes draped on the terrain, spaced >= 3 m apart."""
    if n_lanes < 1:
        raise ValueError("n_lanes must be >= 1")
    rng = np.random.default_rng(seed)
    coeffs = np.array([float(rng.uniform(-m, m)) if m > 0 else 0.0 for m in curvature.max_coeffs])
    gaps = curvature.spacing + rng.uniform(-curvature.spacing_jitter, curvature.spacing_jitter, n_lanes - 1)
    gaps = np.maximum(gaps, 3.0)
    offsets = np.concatenate([[0.0], np.cumsum(gaps)])
    offsets -= offsets.mean()
    z = np.arange(z_range[0], z_range[1] + 1e-9, point_step)
    base = np.polynomial.polynomial.polyval(z, coeffs)
    lanes = []
    for i, off in enumerate(offsets):
        x = base + off
        lanes.append(Lane3D(np.column_stack([x, terrain.height(x, z), z]), i))
    return lanes


def lane_with_coefficients(terrain: TerrainModel, coeffs, z_range=(6.0, 50.0), point_step=1.0, lane_id=0) -> Lane3D:
    z = np.arange(z_range[0], z_range[1] + 1e-9, point_step)
    x = np.polynomial.polynomial.polyval(z, np.asarray(coeffs, dtype=np.float64))
    return Lane3D(np.column_stack([x, terrain.height(x, z), z]), lane_id)


@dataclass(frozen=True)
class Wall:
    """Vertical obstacle in the plane ``z = z`` spanning ``[x_min, x_max]``, ``height`` above the road."""

    x_min: float
    x_max: float
    z: float
    height: float = 2.0


def simulate_lidar(
    terrain: TerrainModel,
    extrinsics: RigidTransform,
    beam_count: int = 64,
    azimuth_step: float = 0.2,
    elevation_range: tuple = (-25.0, 3.0),
    azimuth_range: tuple = (-180.0, 180.0),
    max_range: float = 200.0,
    march_step: float = 0.5,
    tol: float = 1e-4,
    walls: Sequence[Wall] = (),
) -> LidarSweep:
    """Ray-cast a spinning LiDAR against the terrain (and optional walls).

    Rays march in ``march_step`` increments until they first pass below the
    surface and are then refined by bisection to ``tol`` meters. Rays with
    no hit inside ``max_range`` are dropped. Azimuth 0 looks along LiDAR +x.
    """
    if beam_count < 1:
        raise ValueError("beam_count must be >= 1")
    elev = np.radians(np.linspace(elevation_range[0], elevation_range[1], beam_count))
    n_az = int(round((azimuth_range[1] - azimuth_range[0]) / azimuth_step))
    if azimuth_range[1] - azimuth_range[0] >= 360.0:
        az = np.radians(azimuth_range[0] + azimuth_step * np.arange(n_az))
    else:
        az = np.radians(azimuth_range[0] + azimuth_step * np.arange(n_az + 1))
    ee, aa = np.meshgrid(elev, az, indexing="ij")
    beam = np.repeat(np.arange(beam_count), len(az))
    d_lidar = np.column_stack(
        [(np.cos(ee) * np.cos(aa)).ravel(), (np.cos(ee) * np.sin(aa)).ravel(), np.sin(ee).ravel()]
    )
    d_cam = d_lidar @ extrinsics.rotation.T
    origin = extrinsics.translation

    def gap(idx, t):
        p = origin + t[:, None] * d_cam[idx]
        return terrain.height(p[:, 0], p[:, 2]) - p[:, 1]

    n = len(d_cam)
    hit_t = np.full(n, np.inf)
    bracket = np.full(n, np.nan)
    active = np.arange(n)
    t = 0.0
    while len(active) and t < max_range:
        t_next = min(t + march_step, max_range)
        below = gap(active, np.full(len(active), t_next)) <= 0
        bracket[active[below]] = t
        active = active[~below]
        t = t_next
    idx = np.flatnonzero(np.isfinite(bracket))
    if len(idx):
        lo = bracket[idx].copy()
        hi = np.minimum(lo + march_step, max_range)
        while np.max(hi - lo) > tol:
            mid = 0.5 * (lo + hi)
            under = gap(idx, mid) <= 0
            hi = np.where(under, mid, hi)
            lo = np.where(under, lo, mid)
        hit_t[idx] = 0.5 * (lo + hi)

    for wall in walls:
        dz = d_cam[:, 2]
        with np.errstate(divide="ignore", invalid="ignore"):
            tw = np.where(dz > 1e-12, (wall.z - origin[2]) / dz, np.inf)
        p = origin + np.where(np.isfinite(tw), tw, 0.0)[:, None] * d_cam
        ground_y = terrain.height(p[:, 0], p[:, 2])
        on_wall = (
            np.isfinite(tw)
            & (tw > 0)
            & (tw < hit_t)
            & (tw <= max_range)
            & (p[:, 0] >= wall.x_min)
            & (p[:, 0] <= wall.x_max)
            & (p[:, 1] <= ground_y)
            & (p[:, 1] >= ground_y - wall.height)
        )
        hit_t = np.where(on_wall, tw, hit_t)

    ok = np.isfinite(hit_t)
    pts = d_lidar[ok] * hit_t[ok, None]
    return LidarSweep(pts, beam[ok])


def _lane_samples(lane: Lane3D, k: CameraIntrinsics, max_px: float = 0.25):
    """Points along the 3D polyline dense enough that consecutive projections are <= max_px apart."""
    p = lane.points
    uv = project(p, k)
    seg_px = np.linalg.norm(np.diff(uv, axis=0), axis=1)
    n = np.maximum(1, np.ceil(seg_px / max_px).astype(np.int64))
    parts = [p[i] + (p[i + 1] - p[i]) * (np.arange(n[i])[:, None] / n[i]) for i in range(len(p) - 1)]
    parts.append(p[-1:])
    return np.vstack(parts)


class RenderedFrame(NamedTuple):
    labels2d: list
    depth: np.ndarray
    mask: np.ndarray
    subpixel: np.ndarray  # (H, W, 2) exact lane (u, v) owning each mask pixel; NaN elsewhere


def render_frame(
    lanes: Sequence[Lane3D],
    k: CameraIntrinsics,
    image_size: tuple = DEFAULT_IMAGE_SIZE,
    thickness: int = 1,
) -> RenderedFrame:
    """2D labels, sparse lane depth map and lane mask for a set of 3D lanes.

    Each mask pixel stores the depth of the lane sample nearest its center
    (ties go to the nearer lane). ``thickness > 1`` grows the
    mask by ``thickness // 2`` pixels in every direction, copying the
    owning sample's depth and sub-pixel position.
    """
    h, w = image_size
    labels = []
    rows, cols, zs, us, vs, dists = [], [], [], [], [], []
    r = max(0, int(thickness) // 2)
    for lane in lanes:
        labels.append(Lane2D(project(lane.points, k), lane.lane_id))
        s = _lane_samples(lane, k)
        uv = project(s, k)
        for dv in range(-r, r + 1):
            for du in range(-r, r + 1):
                col = np.rint(uv[:, 0]).astype(np.int64) + du
                row = np.rint(uv[:, 1]).astype(np.int64) + dv
                inside = (col >= 0) & (col < w) & (row >= 0) & (row < h)
                rows.append(row[inside])
                cols.append(col[inside])
                zs.append(s[inside, 2])
                us.append(uv[inside, 0])
                vs.append(uv[inside, 1])
                dists.append(np.hypot(uv[inside, 0] - col[inside], uv[inside, 1] - row[inside]))
    depth = np.zeros((h, w))
    sub = np.full((h, w, 2), np.nan)
    if labels and sum(len(a) for a in rows):
        row, col, z = np.concatenate(rows), np.concatenate(cols), np.concatenate(zs)
        u, v, dist = np.concatenate(us), np.concatenate(vs), np.concatenate(dists)
        pix = row * w + col
        # per pixel keep the sample nearest its center, ties to the nearer lane
        order = np.lexsort((z, dist, pix))
        first = np.ones(len(order), dtype=bool)
        first[1:] = pix[order][1:] != pix[order][:-1]
        pick = order[first]
        depth[row[pick], col[pick]] = z[pick]
        sub[row[pick], col[pick], 0] = u[pick]
        sub[row[pick], col[pick], 1] = v[pick]
    return RenderedFrame(labels, depth, depth > 0, sub)


def perturb_predictions(
    lanes: Sequence[Lane3D],
    noise_sigma: float,
    drop_rate: float = 0.0,
    hallucinate_rate: float = 0.0,
    seed: int = 0,
    correlation_length: float = 10.0,
) -> list[Lane3D]:
    """Noisy copies of ``lanes`` for metric tests.

    Each point gets zero-mean Gaussian noise with standard deviation
    ``noise_sigma`` per axis, correlated along the lane with a squared-
    exponential kernel of ``correlation_length`` meters (0 gives i.i.d.
    noise). Each lane is dropped with probability ``drop_rate``; for each
    input lane a random false lane is added with probability
    ``hallucinate_rate``.
    """
    for r in (drop_rate, hallucinate_rate):
        if not 0.0 <= r <= 1.0:
            raise ValueError("rates must lie in [0, 1]")
    rng = np.random.default_rng(seed)
    out = []
    for lane in lanes:
        dropped = rng.random() < drop_rate
        p = lane.points
        if noise_sigma > 0:
            noise = _correlated_noise(rng, p, noise_sigma, correlation_length)
        else:
            noise = np.zeros_like(p)
        if dropped:
            continue
        q = p + noise
        q[:, 2] = np.maximum(q[:, 2], 1e-3)
        out.append(Lane3D(q, lane.lane_id))
    n_fake = int(np.sum(rng.random(len(lanes)) < hallucinate_rate))
    for j in range(n_fake):
        out.append(_random_lane(rng, f"fake{j}"))
    return out


def _correlated_noise(rng, p, sigma, ell):
    n = len(p)
    white = rng.standard_normal((n, 3))
    if ell <= 0:
        return sigma * white
    s = np.concatenate([[0.0], np.cumsum(np.linalg.norm(np.diff(p, axis=0), axis=1))])
    cov = np.exp(-0.5 * ((s[:, None] - s[None, :]) / ell) ** 2) + 1e-9 * np.eye(n)
    chol = np.linalg.cholesky(cov)
    return sigma * (chol @ white)


def _random_lane(rng, lane_id) -> Lane3D:
    x0 = rng.uniform(-10.0, 10.0)
    slope = rng.uniform(-0.05, 0.05)
    z0 = rng.uniform(5.0, 20.0)
    length = rng.uniform(15.0, 40.0)
    z = np.arange(z0, z0 + length, 1.0)
    x = x0 + slope * (z - z0)
    y = 1.6 + rng.uniform(-0.2, 0.2) + 0.0 * z
    return Lane3D(np.column_stack([x, y, z]), lane_id)


def clip_to_image(lane: Lane3D, k: CameraIntrinsics, image_size, min_length: float = 10.0) -> Lane3D | None:
    """Longest contiguous run of lane points that project inside the image."""
    h, w = image_size
    uv = project(lane.points, k)
    inside = (uv[:, 0] >= 0) & (uv[:, 0] <= w - 1) & (uv[:, 1] >= 0) & (uv[:, 1] <= h - 1)
    return clip_visible(lane, inside, min_length)


def visible_from(terrain: TerrainModel, origin, points, step: float = 0.25, clearance: float = 0.02) -> np.ndarray:
    """True where the straight line from ``origin`` to each point stays above the terrain.

    The last ``clearance`` fraction of each sight line is not tested so the
    target's own surface does not occlude it.
    """
    o = np.asarray(origin, dtype=np.float64)
    p = np.asarray(points, dtype=np.float64)
    dist = np.linalg.norm(p - o, axis=1)
    n = max(2, int(np.ceil(dist.max() / step)))
    f = np.linspace(0.0, 1.0 - clearance, n)
    ray = o + f[None, :, None] * (p - o)[:, None, :]
    ground = terrain.height(ray[..., 0], ray[..., 2])
    return np.all(ray[..., 1] < ground, axis=1)


def clip_visible(lane: Lane3D, mask: np.ndarray, min_length: float = 10.0) -> Lane3D | None:
    """Longest contiguous run of lane points flagged in ``mask``."""
    cur_start, best_span = None, (0, 0)
    for i, flag in enumerate(np.append(mask, False)):
        if flag and cur_start is None:
            cur_start = i
        elif not flag and cur_start is not None:
            if i - cur_start > best_span[1] - best_span[0]:
                best_span = (cur_start, i)
            cur_start = None
    a, b = best_span
    if b - a < 2:
        return None
    clipped = lane.with_points(lane.points[a:b])
    return clipped if clipped.length >= min_length else None


@dataclass(frozen=True, eq=False)
class SyntheticScene:
    terrain: TerrainModel
    lanes: list
    intrinsics: CameraIntrinsics
    lidar_extrinsics: RigidTransform
    sweep: LidarSweep
    labels2d: list
    depth: np.ndarray
    mask: np.ndarray
    rng_seed: int
    image_size: tuple = DEFAULT_IMAGE_SIZE


@dataclass(frozen=True)
class SceneParams:
    terrain: TerrainParams = field(default_factory=TerrainParams)
    n_lanes: int = 4
    curvature: CurvatureParams = field(default_factory=CurvatureParams)
    z_range: tuple = (6.0, 50.0)
    beam_count: int = 64
    azimuth_step: float = 0.2
    azimuth_range: tuple = (-45.0, 45.0)
    image_size: tuple = DEFAULT_IMAGE_SIZE


def make_scene(seed: int, params: SceneParams = SceneParams()) -> SyntheticScene:
    """Terrain, lanes, LiDAR sweep and rendered labels from one seed.

    Lanes are cut to their longest run that is inside the image and in
    line of sight of both the camera and the LiDAR.
    """
    ss = np.random.SeedSequence(seed)
    s_terrain, s_lanes = (int(c.generate_state(1)[0]) for c in ss.spawn(2))
    k = default_intrinsics()
    ext = default_lidar_extrinsics()
    terrain = generate_terrain(s_terrain, params.terrain)
    raw = lay_lanes(terrain, params.n_lanes, params.curvature, s_lanes, params.z_range)
    lanes = []
    for lane in raw:
        seen = (
            visible_from(terrain, np.zeros(3), lane.points)
            & visible_from(terrain, ext.translation, lane.points)
        )
        uv = project(lane.points, k)
        h, w = params.image_size
        seen &= (uv[:, 0] >= 0) & (uv[:, 0] <= w - 1) & (uv[:, 1] >= 0) & (uv[:, 1] <= h - 1)
        clipped = clip_visible(lane, seen)
        if clipped is not None:
            lanes.append(clipped)
    lanes = [Lane3D(l.points, i) for i, l in enumerate(lanes)]
    sweep = simulate_lidar(
        terrain, ext, params.beam_count, params.azimuth_step, azimuth_range=params.azimuth_range
    )
    frame = render_frame(lanes, k, params.image_size)
    return SyntheticScene(terrain, lanes, k, ext, sweep, frame.labels2d, frame.depth, frame.mask, seed, params.image_size)


def ground_depth_map(k: CameraIntrinsics, image_size, camera_height: float = 1.6, max_depth: float = np.inf):
    """Analytic depth of a flat road ``camera_height`` below a level camera; 0 above the horizon."""
    h, w = image_size
    v = np.arange(h, dtype=np.float64)
    dv = v - k.cy
    with np.errstate(divide="ignore"):
        z = np.where(dv > 0, camera_height * k.fy / np.where(dv > 0, dv, 1.0), 0.0)
    z = np.where(z <= max_depth, z, 0.0)
    return np.repeat(z[:, None], w, axis=1)


def oracle_offsets(frame: RenderedFrame, anchors):
    """Exact offset maps for a rendered frame: each mask pixel points at its lane sample.

    ``anchors`` is a ``RowAnchors``; depth residuals are encoded against the
    pixel's own row.
    """
    h, w = frame.mask.shape
    v, u = np.nonzero(frame.mask)
    du = np.zeros((h, w))
    dv = np.zeros((h, w))
    dz = np.zeros((h, w))
    du[v, u] = frame.subpixel[v, u, 0] - u
    dv[v, u] = frame.subpixel[v, u, 1] - v
    dz[v, u] = (frame.depth[v, u] - anchors.alpha[v]) / anchors.beta[v]
    return du, dv, dz
