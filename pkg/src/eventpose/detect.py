"""Keypoint extraction on heatmaps and density maps, plus training losses.

The detector network itself is out of scope; anything that produces a
KeypointSet can be plugged in. Two detectors ship here: a classical
density-peak detector on time surfaces and a simulator oracle that projects
the true model keypoints. Heatmaps can be exchanged with external models
through a small binary raster format.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np
from scipy.ndimage import maximum_filter
from sklearn.base import BaseEstimator

from .camera import CameraIntrinsics
from .events import TimeSurfacePair
from .geometry import PoseTrajectory
from .simulate import SceneModel, project_keypoints

HEATMAP_MAGIC = b"HMP1"
DEFAULT_PEAK_FLOOR = 0.1


@dataclass
class KeypointSet:
    """Ordered 2D keypoints; the position in the array is the semantic index."""

    points: np.ndarray      # (K, 2) float (x, y) pixels
    confidence: np.ndarray  # (K,) in [0, 1]
    valid: np.ndarray       # (K,) bool

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=float).reshape(-1, 2)
        k = self.points.shape[0]
        self.confidence = np.asarray(self.confidence, dtype=float).reshape(k)
        self.valid = np.asarray(self.valid, dtype=bool).reshape(k)

    def __len__(self) -> int:
        return self.points.shape[0]

    @property
    def num_valid(self) -> int:
        return int(self.valid.sum())


def extract_peaks(heatmaps: np.ndarray, floor: float = DEFAULT_PEAK_FLOOR) -> KeypointSet:
    """Per-channel argmax of a (K, H, W) heatmap stack.

    Ties break to the smallest row-major index. A channel whose peak does not
    exceed ``floor`` yields an invalid keypoint (an all-zero channel is not an
    error).
    """
    hm = np.asarray(heatmaps, dtype=float)
    if hm.ndim != 3 or hm.shape[0] < 1:
        raise ValueError("expected a (K, H, W) heatmap stack with K >= 1")
    if not np.all(np.isfinite(hm)):
        raise ValueError("heatmaps contain non-finite values")
    k, h, w = hm.shape
    flat = hm.reshape(k, h * w)
    best = np.argmax(flat, axis=1)
    ys, xs = np.unravel_index(best, (h, w))
    conf = flat[np.arange(k), best]
    return KeypointSet(
        points=np.column_stack([xs, ys]).astype(float),
        confidence=np.clip(conf, 0.0, 1.0),
        valid=conf > floor,
    )


def slice_patch(
    heatmap: np.ndarray, center_xy: tuple[int, int], radius: int
) -> tuple[np.ndarray, tuple[int, int]]:
    """Cut a (2r+1)^2 patch centered at an integer pixel, zero-padded at borders.

    Returns the patch and its (x0, y0) origin in full-image coordinates.
    """
    if radius < 1:
        raise ValueError("radius must be >= 1")
    hm = np.asarray(heatmap)
    if hm.ndim != 2:
        raise ValueError("expected a single (H, W) channel")
    cx, cy = int(center_xy[0]), int(center_xy[1])
    size = 2 * radius + 1
    patch = np.zeros((size, size), dtype=hm.dtype)
    x0, y0 = cx - radius, cy - radius
    sx0, sy0 = max(x0, 0), max(y0, 0)
    sx1, sy1 = min(cx + radius + 1, hm.shape[1]), min(cy + radius + 1, hm.shape[0])
    if sx0 < sx1 and sy0 < sy1:
        patch[sy0 - y0:sy1 - y0, sx0 - x0:sx1 - x0] = hm[sy0:sy1, sx0:sx1]
    return patch, (x0, y0)


def stitch_patch(heatmap: np.ndarray, patch: np.ndarray, origin: tuple[int, int]) -> np.ndarray:
    """Write a refined patch back at its origin (counterpart of slice_patch)."""
    out = np.array(heatmap, dtype=float, copy=True)
    x0, y0 = origin
    sx0, sy0 = max(x0, 0), max(y0, 0)
    sx1 = min(x0 + patch.shape[1], out.shape[1])
    sy1 = min(y0 + patch.shape[0], out.shape[0])
    if sx0 < sx1 and sy0 < sy1:
        out[sy0:sy1, sx0:sx1] = patch[sy0 - y0:sy1 - y0, sx0 - x0:sx1 - x0]
    return out


def detect_density_peaks(
    surfaces: TimeSurfacePair,
    num_keypoints: int,
    min_separation: float,
    floor: float = 0.0,
) -> KeypointSet:
    """Greedy selection of the strongest well-separated density maxima.

    Local maxima (3x3 neighborhood) above ``floor`` are taken in decreasing
    density order, skipping candidates closer than ``min_separation`` pixels
    to an accepted one. Missing slots are returned invalid. The ordering is
    by density, not semantics; correspondence assignment happens downstream.
    """
    if num_keypoints < 4:
        raise ValueError("need at least 4 keypoints for pose solving")
    d = surfaces.density
    is_max = (d == maximum_filter(d, size=3, mode="constant")) & (d > floor)
    ys, xs = np.nonzero(is_max)
    values = d[ys, xs]
    order = np.lexsort((xs, ys, -values))  # density desc, then row-major

    chosen = []
    for idx in order:
        if len(chosen) == num_keypoints:
            break
        x, y = float(xs[idx]), float(ys[idx])
        if any((x - cx) ** 2 + (y - cy) ** 2 < min_separation**2 for cx, cy, _ in chosen):
            continue
        chosen.append((x, y, float(values[idx])))

    points = np.zeros((num_keypoints, 2))
    conf = np.zeros(num_keypoints)
    valid = np.zeros(num_keypoints, dtype=bool)
    if chosen:
        top = chosen[0][2]
        for slot, (x, y, v) in enumerate(chosen):
            points[slot] = (x + surfaces.origin[0], y + surfaces.origin[1])
            conf[slot] = v / top if top > 0 else 0.0
            valid[slot] = True
    return KeypointSet(points, conf, valid)


# ---------------------------------------------------------------------------
# Losses (standalone numeric ops; no training loop lives here)
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class LossWeights:
    """Weights of the combined detection loss. Defaults are unvalidated choices."""

    heatmap: float = 1.0
    coord: float = 0.1
    structure: float = 0.05

    def __post_init__(self):
        if self.heatmap < 0 or self.coord < 0 or self.structure < 0:
            raise ValueError("loss weights must be non-negative")
        if self.heatmap == self.coord == self.structure == 0:
            raise ValueError("at least one loss weight must be positive")


def _check_batch(pred, truth, ndim, what):
    p = np.asarray(pred, dtype=float)
    t = np.asarray(truth, dtype=float)
    if p.shape != t.shape:
        raise ValueError(f"{what}: shape mismatch {p.shape} vs {t.shape}")
    if p.ndim != ndim:
        raise ValueError(f"{what}: expected {ndim}-d batch, got {p.ndim}-d")
    return p, t


def loss_heatmap(pred: np.ndarray, truth: np.ndarray) -> float:
    """Pixel-wise MSE over a (B, K, H, W) heatmap batch."""
    p, t = _check_batch(pred, truth, 4, "heatmap loss")
    return float(np.mean((p - t) ** 2))


def loss_heatmap_grad(pred: np.ndarray, truth: np.ndarray) -> np.ndarray:
    p, t = _check_batch(pred, truth, 4, "heatmap loss")
    return 2.0 * (p - t) / p.size


def loss_coord(pred: np.ndarray, truth: np.ndarray) -> float:
    """Mean L1 distance over a (B, K, 2) coordinate batch."""
    p, t = _check_batch(pred, truth, 3, "coordinate loss")
    return float(np.abs(p - t).sum() / (p.shape[0] * p.shape[1]))


def loss_coord_grad(pred: np.ndarray, truth: np.ndarray) -> np.ndarray:
    """Subgradient of loss_coord (sign convention; defined where no tie)."""
    p, t = _check_batch(pred, truth, 3, "coordinate loss")
    return np.sign(p - t) / (p.shape[0] * p.shape[1])


def _distance_matrix(points: np.ndarray) -> np.ndarray:
    diff = points[:, None, :] - points[None, :, :]
    return np.sqrt((diff**2).sum(axis=-1))


def loss_structure(pred: np.ndarray, truth: np.ndarray) -> float:
    """Per-batch entrywise L1 difference of K x K pairwise distance matrices.

    Invariant under any common rigid transform of a point set, so it penalizes
    shape distortion rather than placement.
    """
    p, t = _check_batch(pred, truth, 3, "structure loss")
    total = 0.0
    for b in range(p.shape[0]):
        total += np.abs(_distance_matrix(p[b]) - _distance_matrix(t[b])).sum()
    return float(total / p.shape[0])


def loss_combined(
    pred_heatmaps: np.ndarray,
    truth_heatmaps: np.ndarray,
    weights: LossWeights = LossWeights(),
    pred_points: np.ndarray | None = None,
    truth_points: np.ndarray | None = None,
) -> float:
    """Weighted sum of heatmap, coordinate, and structure losses.

    Coordinates default to the per-channel heatmap argmax (peak positions)
    when not given explicitly.
    """
    ph, th = _check_batch(pred_heatmaps, truth_heatmaps, 4, "combined loss")
    if pred_points is None:
        pred_points = batch_peak_coordinates(ph)
    if truth_points is None:
        truth_points = batch_peak_coordinates(th)
    return (
        weights.heatmap * loss_heatmap(ph, th)
        + weights.coord * loss_coord(pred_points, truth_points)
        + weights.structure * loss_structure(pred_points, truth_points)
    )


def batch_peak_coordinates(heatmaps: np.ndarray) -> np.ndarray:
    """(B, K, H, W) -> (B, K, 2) argmax coordinates (x, y), row-major ties."""
    hm = np.asarray(heatmaps, dtype=float)
    b, k, h, w = hm.shape
    flat = hm.reshape(b, k, h * w)
    best = np.argmax(flat, axis=-1)
    ys, xs = np.unravel_index(best, (h, w))
    return np.stack([xs, ys], axis=-1).astype(float)


# ---------------------------------------------------------------------------
# Heatmap exchange file
# ---------------------------------------------------------------------------

def write_heatmaps(path, heatmaps: np.ndarray) -> None:
    hm = np.ascontiguousarray(np.asarray(heatmaps, dtype=np.float32))
    if hm.ndim != 3:
        raise ValueError("expected a (K, H, W) stack")
    k, h, w = hm.shape
    with open(path, "wb") as fh:
        fh.write(HEATMAP_MAGIC)
        fh.write(struct.pack("<HHH", k, h, w))
        fh.write(hm.astype("<f4").tobytes())


def read_heatmaps(path) -> np.ndarray:
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != HEATMAP_MAGIC:
            raise ValueError(f"{path}: bad magic {magic!r}")
        k, h, w = struct.unpack("<HHH", fh.read(6))
        data = np.frombuffer(fh.read(), dtype="<f4")
    if data.size != k * h * w:
        raise ValueError(f"{path}: expected {k * h * w} floats, found {data.size}")
    return data.reshape(k, h, w).astype(np.float32)


# ---------------------------------------------------------------------------
# Pluggable detectors
# ---------------------------------------------------------------------------

class DensityPeakDetector(BaseEstimator):
    """Classical detector: strongest separated peaks of the density map."""

    def __init__(self, num_keypoints: int = 8, min_separation: float = 6.0, floor: float = 0.0):
        self.num_keypoints = num_keypoints
        self.min_separation = min_separation
        self.floor = floor

    def detect(self, surfaces: TimeSurfacePair) -> KeypointSet:
        return detect_density_peaks(
            surfaces, self.num_keypoints, self.min_separation, self.floor
        )


class HeatmapFileDetector(BaseEstimator):
    """Bridge for external models: reads heatmaps from the exchange file.

    An external detector (e.g. a trained network) writes its per-keypoint
    heatmaps to the raster format; this detector turns them into an ordered
    KeypointSet by peak extraction. The time surfaces are ignored.
    """

    def __init__(self, path, floor: float = DEFAULT_PEAK_FLOOR):
        self.path = path
        self.floor = floor

    def detect(self, surfaces: TimeSurfacePair) -> KeypointSet:
        return extract_peaks(read_heatmaps(self.path), floor=self.floor)


class OracleDetector(BaseEstimator):
    """Simulator oracle: projects the true model keypoints at the window midpoint.

    Output is semantically ordered (slot k is model keypoint k), like the
    ordered channels of a trained detector.
    """

    def __init__(self, model: SceneModel, camera: CameraIntrinsics, truth: PoseTrajectory):
        self.model = model
        self.camera = camera
        self.truth = truth

    def detect(self, surfaces: TimeSurfacePair) -> KeypointSet:
        t_mid = (surfaces.window[0] + surfaces.window[1]) // 2
        pose = self.truth.pose_at(t_mid)
        uv, visible = project_keypoints(self.model, pose, self.camera)
        return KeypointSet(
            points=np.nan_to_num(uv),
            confidence=visible.astype(float),
            valid=visible,
        )
