"""Pinhole camera model (no distortion)."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class CameraIntrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError("focal lengths must be positive")
        if not (0 <= self.cx < self.width) or not (0 <= self.cy < self.height):
            raise ValueError("principal point must lie inside the sensor")

    def matrix(self) -> np.ndarray:
        return np.array([
            [self.fx, 0.0, self.cx],
            [0.0, self.fy, self.cy],
            [0.0, 0.0, 1.0],
        ])

    def contains(self, uv: np.ndarray) -> np.ndarray:
        """Boolean mask of (n, 2) pixel coordinates inside the sensor."""
        uv = np.asarray(uv)
        return (
            (uv[..., 0] >= 0.0)
            & (uv[..., 0] < self.width)
            & (uv[..., 1] >= 0.0)
            & (uv[..., 1] < self.height)
        )


def project(points_cam: np.ndarray, cam: CameraIntrinsics) -> np.ndarray:
    """Project (n, 3) camera-frame points to (n, 2) pixels.

    Points with non-positive depth project to NaN; callers decide visibility.
    """
    pts = np.asarray(points_cam, dtype=float).reshape(-1, 3)
    z = pts[:, 2]
    uv = np.full((pts.shape[0], 2), np.nan)
    ok = z > 0.0
    uv[ok, 0] = cam.fx * pts[ok, 0] / z[ok] + cam.cx
    uv[ok, 1] = cam.fy * pts[ok, 1] / z[ok] + cam.cy
    return uv
