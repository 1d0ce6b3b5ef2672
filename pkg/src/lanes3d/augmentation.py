"""Geometric label augmentation that keeps 3D and 2D labels projection-consistent.

Crop-scale keeps ``x, y`` and scales depth, ``z -> z * s``. The image is
cropped by ``c`` rows from the top and resized by ``s``, so pixels map as
``(u, v) -> (u * s, (v - c) * s)``. For those two maps to agree under a
pinhole model the focal lengths and skew pick up ``s**2`` and the principal
point follows the image map.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import InvalidParams
from .geometry import CameraIntrinsics, Lane2D, Lane3D, project

CONSISTENCY_TOL_PX = 0.5


@dataclass(frozen=True)
class AugmentParams:
    crop_top_c: float = 0.0
    scale_s: float = 1.0
    flip: bool = False

    def __post_init__(self):
        if not (math.isfinite(self.scale_s) and self.scale_s > 0):
            raise InvalidParams(f"scale must be positive, got {self.scale_s}")
        if not (math.isfinite(self.crop_top_c) and self.crop_top_c >= 0):
            raise InvalidParams(f"crop must be >= 0, got {self.crop_top_c}")

    def to_dict(self) -> dict:
        return {"crop_top_c": self.crop_top_c, "scale_s": self.scale_s, "flip": self.flip}

    @classmethod
    def from_dict(cls, d: dict) -> "AugmentParams":
        return cls(float(d.get("crop_top_c", 0.0)), float(d.get("scale_s", 1.0)), bool(d.get("flip", False)))


def restoring_crop(height: int, s: float) -> float:
    """Top crop (may be fractional) that brings the scaled image back to ``height`` rows; 0 when shrinking."""
    if s <= 1.0:
        return 0.0
    return height * (1.0 - 1.0 / s)


def sample_params(rng, image_size, scale_range=(0.8, 1.2), flip_prob: float = 0.5) -> AugmentParams:
    rng = np.random.default_rng(rng)
    s = float(rng.uniform(*scale_range))
    flip = bool(rng.random() < flip_prob)
    return AugmentParams(float(restoring_crop(image_size[0], s)), s, flip)


def _check_inputs(labels, labels2d, k, image_size):
    h, w = image_size
    for lane3, lane2 in zip(labels, labels2d):
        if len(lane3) != len(lane2):
            continue
        err = np.max(np.abs(project(lane3.points, k) - lane2.points))
        if err > CONSISTENCY_TOL_PX:
            raise InvalidParams(f"3D and 2D labels disagree by {err:.3g} px")


def flip_frame(
    labels: Sequence[Lane3D],
    labels2d: Sequence[Lane2D],
    k: CameraIntrinsics,
    image_size,
):
    h, w = image_size
    out3 = [lane.with_points(lane.points * np.array([-1.0, 1.0, 1.0])) for lane in labels]
    out2 = [Lane2D(np.column_stack([(w - 1) - l.points[:, 0], l.points[:, 1]]), l.lane_id) for l in labels2d]
    k2 = CameraIntrinsics(k.fx, k.fy, (w - 1) - k.cx, k.cy, -k.skew)
    return out3, out2, k2, (h, w)


def augment_frame(
    labels: Sequence[Lane3D],
    labels2d: Sequence[Lane2D],
    k: CameraIntrinsics,
    image_size,
    p: AugmentParams,
    check: bool = True,
):
    """Flip (optional), then crop ``c`` top rows and scale by ``s``.

    Returns ``(labels, labels2d, intrinsics, image_size)``. With ``check`` the
    inputs must already be consistent: any 3D/2D lane pair with matching point
    counts has to project within 0.5 px.
    """
    h, w = image_size
    if p.crop_top_c >= h:
        raise InvalidParams(f"crop {p.crop_top_c} must be below image height {h}")
    if check:
        _check_inputs(labels, labels2d, k, image_size)
    if p.flip:
        labels, labels2d, k, _ = flip_frame(labels, labels2d, k, image_size)
    s, c = p.scale_s, p.crop_top_c
    if s == 1.0 and c == 0.0:
        return list(labels), list(labels2d), k, (h, w)
    out3 = [lane.with_points(lane.points * np.array([1.0, 1.0, s])) for lane in labels]
    out2 = [Lane2D(np.column_stack([l.points[:, 0] * s, (l.points[:, 1] - c) * s]), l.lane_id) for l in labels2d]
    s2 = s * s
    k2 = CameraIntrinsics(k.fx * s2, k.fy * s2, k.cx * s, (k.cy - c) * s, k.skew * s2)
    size = (int(round((h - c) * s)), int(round(w * s)))
    return out3, out2, k2, size
