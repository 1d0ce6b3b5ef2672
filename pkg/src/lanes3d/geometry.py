"""Camera model, lane polylines and the projection maths shared by every module.

Camera frame: X right, Y down, Z forward, meters. Pixel frame: u right
(column), v down (row). Arrays of points are ``(N, 3)`` float64.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Hashable, NamedTuple

import numpy as np

from .errors import DegenerateLane, InvalidParams, NonPositiveDepth

# 2D label coordinates are snapped to this dyadic grid so that mirror and
# identity transforms are exact in floating point.
SUBPIXEL_GRID = 2.0**-32


class Point3(NamedTuple):
    x: float
    y: float
    z: float


def _frozen(a: np.ndarray) -> np.ndarray:
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class CameraIntrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    skew: float = 0.0

    def __post_init__(self):
        vals = (self.fx, self.fy, self.cx, self.cy, self.skew)
        if not all(math.isfinite(v) for v in vals):
            raise InvalidParams(f"intrinsics must be finite: {vals}")
        if self.fx <= 0 or self.fy <= 0:
            raise InvalidParams(f"focal lengths must be positive: fx={self.fx}, fy={self.fy}")

    @property
    def matrix(self) -> np.ndarray:
        return np.array(
            [[self.fx, self.skew, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]]
        )

    def to_dict(self) -> dict:
        return {"fx": self.fx, "fy": self.fy, "cx": self.cx, "cy": self.cy, "skew": self.skew}

    @classmethod
    def from_dict(cls, d: dict) -> "CameraIntrinsics":
        return cls(float(d["fx"]), float(d["fy"]), float(d["cx"]), float(d["cy"]), float(d.get("skew", 0.0)))


@dataclass(frozen=True, eq=False)
class RigidTransform:
    """``p_dst = rotation @ p_src + translation``."""

    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        r = np.array(self.rotation, dtype=np.float64).reshape(3, 3)
        t = np.array(self.translation, dtype=np.float64).reshape(3)
        if not (np.all(np.isfinite(r)) and np.all(np.isfinite(t))):
            raise InvalidParams("transform must be finite")
        if np.max(np.abs(r.T @ r - np.eye(3))) > 1e-9:
            raise InvalidParams("rotation is not orthonormal")
        if abs(np.linalg.det(r) - 1.0) > 1e-9:
            raise InvalidParams("rotation determinant is not +1")
        object.__setattr__(self, "rotation", _frozen(r))
        object.__setattr__(self, "translation", _frozen(t))

    def __eq__(self, other):
        if not isinstance(other, RigidTransform):
            return NotImplemented
        return np.array_equal(self.rotation, other.rotation) and np.array_equal(
            self.translation, other.translation
        )

    @classmethod
    def identity(cls) -> "RigidTransform":
        return cls(np.eye(3), np.zeros(3))

    @classmethod
    def from_axis_angle(cls, axis, angle: float, translation=(0.0, 0.0, 0.0)) -> "RigidTransform":
        """Rodrigues rotation about ``axis`` by ``angle`` radians."""
        a = np.asarray(axis, dtype=np.float64)
        a = a / np.linalg.norm(a)
        kx = np.array([[0.0, -a[2], a[1]], [a[2], 0.0, -a[0]], [-a[1], a[0], 0.0]])
        r = np.eye(3) + math.sin(angle) * kx + (1.0 - math.cos(angle)) * (kx @ kx)
        # re-orthonormalise to stay well inside the 1e-9 tolerance
        u, _, vt = np.linalg.svd(r)
        return cls(u @ vt, translation)

    def apply(self, points) -> np.ndarray:
        p = np.asarray(points, dtype=np.float64)
        return p @ self.rotation.T + self.translation

    def inverse(self) -> "RigidTransform":
        rt = self.rotation.T
        return RigidTransform(rt, -rt @ self.translation)

    def compose(self, other: "RigidTransform") -> "RigidTransform":
        """``self ∘ other``: apply ``other`` first."""
        return RigidTransform(self.rotation @ other.rotation, self.rotation @ other.translation + self.translation)

    def to_dict(self) -> dict:
        return {"rotation": self.rotation.tolist(), "translation": self.translation.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "RigidTransform":
        return cls(np.array(d["rotation"], dtype=np.float64), np.array(d["translation"], dtype=np.float64))


def cumulative_arc_length(points: np.ndarray) -> np.ndarray:
    seg = np.linalg.norm(np.diff(points, axis=0), axis=1)
    return np.concatenate([[0.0], np.cumsum(seg)])


@dataclass(frozen=True, eq=False)
class Lane3D:
    """Ordered polyline of lane points in camera coordinates."""

    points: np.ndarray
    lane_id: Hashable = None

    def __post_init__(self):
        p = np.array(self.points, dtype=np.float64)
        if p.ndim != 2 or p.shape[1] != 3:
            raise DegenerateLane(f"lane points must be (N, 3), got {p.shape}")
        if len(p) < 2:
            raise DegenerateLane("lane needs at least 2 points")
        if not np.all(np.isfinite(p)):
            raise DegenerateLane("lane points must be finite")
        if np.any(p[:, 2] <= 0):
            raise NonPositiveDepth("lane points must have z > 0")
        if np.any(np.all(p[1:] == p[:-1], axis=1)):
            raise DegenerateLane("lane has duplicate consecutive points")
        object.__setattr__(self, "points", _frozen(p))

    def __len__(self):
        return len(self.points)

    def __eq__(self, other):
        if not isinstance(other, Lane3D):
            return NotImplemented
        return self.lane_id == other.lane_id and np.array_equal(self.points, other.points)

    @property
    def length(self) -> float:
        return float(cumulative_arc_length(self.points)[-1])

    def with_points(self, points) -> "Lane3D":
        return Lane3D(points, self.lane_id)


def snap_subpixel(uv) -> np.ndarray:
    a = np.asarray(uv, dtype=np.float64)
    return np.round(a / SUBPIXEL_GRID) * SUBPIXEL_GRID


@dataclass(frozen=True, eq=False)
class Lane2D:
    """Ordered polyline of sub-pixel ``(u, v)`` image coordinates."""

    points: np.ndarray
    lane_id: Hashable = None

    def __post_init__(self):
        p = np.array(self.points, dtype=np.float64)
        if p.ndim != 2 or p.shape[1] != 2:
            raise DegenerateLane(f"2D lane points must be (N, 2), got {p.shape}")
        if len(p) < 2:
            raise DegenerateLane("2D lane needs at least 2 points")
        if not np.all(np.isfinite(p)):
            raise DegenerateLane("2D lane points must be finite")
        object.__setattr__(self, "points", _frozen(snap_subpixel(p)))

    def __len__(self):
        return len(self.points)

    def __eq__(self, other):
        if not isinstance(other, Lane2D):
            return NotImplemented
        return self.lane_id == other.lane_id and np.array_equal(self.points, other.points)


def project(points, k: CameraIntrinsics) -> np.ndarray:
    """Pinhole projection of ``(..., 3)`` camera points to ``(..., 2)`` pixels."""
    p = np.asarray(points, dtype=np.float64)
    x, y, z = p[..., 0], p[..., 1], p[..., 2]
    if np.any(z <= 0):
        raise NonPositiveDepth("cannot project a point with z <= 0")
    u = (k.fx * x + k.skew * y) / z + k.cx
    v = k.fy * y / z + k.cy
    return np.stack([u, v], axis=-1)


def backproject(u, v, d, k: CameraIntrinsics) -> np.ndarray:
    """Lift pixels with depth ``d`` (distance to the camera plane) to 3D."""
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    z = np.asarray(d, dtype=np.float64)
    if np.any(z <= 0):
        raise NonPositiveDepth("depth must be positive")
    dv = v - k.cy
    y = z / k.fy * dv
    x = z / k.fx * ((u - k.cx) - k.skew / k.fy * dv)
    return np.stack(np.broadcast_arrays(x, y, z), axis=-1)


def transform_cloud(points, t: RigidTransform) -> np.ndarray:
    p = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    if len(p) == 0:
        return np.empty((0, 3))
    return t.apply(p)


def interpolate_along(points: np.ndarray, s: np.ndarray, targets: np.ndarray) -> np.ndarray:
    """Piecewise-linear polyline evaluation at arc-length positions ``targets``."""
    return np.stack([np.interp(targets, s, points[:, i]) for i in range(points.shape[1])], axis=1)


def arc_length_resample(lane: Lane3D, step: float) -> Lane3D:
    """Points every ``step`` meters of chord length; both endpoints kept exactly."""
    if step <= 0:
        raise InvalidParams("step must be positive")
    s = cumulative_arc_length(lane.points)
    total = s[-1]
    if total < step:
        raise DegenerateLane(f"lane length {total:.6g} m is shorter than step {step}")
    n = int(math.floor(total / step + 1e-9))
    targets = np.arange(n + 1) * step
    if total - targets[-1] <= 1e-9 * max(1.0, total):
        targets = targets[:-1]
    out = interpolate_along(lane.points, s, targets)
    out = np.vstack([out, lane.points[-1]])
    out[0] = lane.points[0]
    return lane.with_points(out)


def point_segment_distance(q: np.ndarray, a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Distances from points ``q (M, D)`` to every segment ``a[j]-b[j]``; returns ``(M, S)``."""
    ab = b - a
    denom = np.einsum("ij,ij->i", ab, ab)
    denom = np.where(denom > 0, denom, 1.0)
    aq = q[:, None, :] - a[None, :, :]
    t = np.clip(np.einsum("msd,sd->ms", aq, ab) / denom, 0.0, 1.0)
    closest = a[None, :, :] + t[..., None] * ab[None, :, :]
    return np.linalg.norm(q[:, None, :] - closest, axis=2)


def point_to_polyline_distance(q, polyline, budget: int = 1 << 21) -> np.ndarray:
    """Continuous distance from each query point to the nearest point on the polyline.

    Queries are processed in chunks of about ``budget`` point-segment pairs.
    """
    q = np.atleast_2d(np.asarray(q, dtype=np.float64))
    p = np.asarray(polyline, dtype=np.float64)
    a, b = p[:-1], p[1:]
    chunk = max(1, budget // max(1, len(a)))
    out = np.empty(len(q))
    for i in range(0, len(q), chunk):
        out[i : i + chunk] = point_segment_distance(q[i : i + chunk], a, b).min(axis=1)
    return out
