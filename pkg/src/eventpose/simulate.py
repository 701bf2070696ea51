"""Synthetic event generation for a rigid wireframe model under a pinhole camera.

The latent brightness model is a sum of Gaussian log-intensity profiles around
the projected wireframe segments (or around the keypoints themselves when the
model has no edges). Each pixel runs an idealized DVS accumulator: an event of
polarity sign(dL) fires every time the log intensity moves one contrast
threshold away from the level of the last firing, and the reference resets to
the crossed level.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.spatial.transform import Rotation

from .camera import CameraIntrinsics, project
from .events import EVENT_DTYPE, ContrastModel, make_events
from .geometry import PoseSE3, PoseTrajectory


@dataclass(frozen=True)
class SceneModel:
    """Ordered 3D keypoints (meters, object frame) with optional wireframe edges."""

    keypoints_3d: np.ndarray
    edges: tuple = ()
    base_intensity: float = 1.0

    def __post_init__(self):
        pts = np.asarray(self.keypoints_3d, dtype=float).reshape(-1, 3)
        pts.flags.writeable = False
        object.__setattr__(self, "keypoints_3d", pts)
        object.__setattr__(self, "edges", tuple((int(i), int(j)) for i, j in self.edges))
        n = pts.shape[0]
        if n < 4:
            raise ValueError(
                f"insufficient correspondences: model has {n} keypoints, pose solving needs >= 4"
            )
        s = np.linalg.svd(pts - pts.mean(axis=0), compute_uv=False)
        if s[2] <= 1e-8 * max(s[0], 1e-12):
            raise ValueError("model keypoints are coplanar; pose solving needs a non-coplanar set")
        for i, j in self.edges:
            if not (0 <= i < n and 0 <= j < n) or i == j:
                raise ValueError(f"edge ({i}, {j}) references invalid keypoints")
        if self.base_intensity <= 0:
            raise ValueError("base_intensity must be positive")

    @property
    def num_keypoints(self) -> int:
        return self.keypoints_3d.shape[0]


def make_cuboid(sx: float, sy: float, sz: float, base_intensity: float = 1.0) -> SceneModel:
    """Axis-aligned cuboid centered at the object origin: 8 corners, 12 edges."""
    hx, hy, hz = sx / 2.0, sy / 2.0, sz / 2.0
    corners = np.array([
        [sign_x * hx, sign_y * hy, sign_z * hz]
        for sign_z in (-1, 1) for sign_y in (-1, 1) for sign_x in (-1, 1)
    ])
    edges = (
        (0, 1), (2, 3), (4, 5), (6, 7),   # x-aligned
        (0, 2), (1, 3), (4, 6), (5, 7),   # y-aligned
        (0, 4), (1, 5), (2, 6), (3, 7),   # z-aligned
    )
    return SceneModel(corners, edges, base_intensity)


def project_keypoints(
    model: SceneModel, pose: PoseSE3, cam: CameraIntrinsics
) -> tuple[np.ndarray, np.ndarray]:
    """Pinhole-project the model keypoints for one pose.

    Returns (uv, visible): (K, 2) pixel coordinates (NaN behind the camera)
    and a visibility mask (positive depth and inside the sensor).
    """
    pts_cam = pose.transform(model.keypoints_3d)
    uv = project(pts_cam, cam)
    visible = (pts_cam[:, 2] > 0.0) & np.where(
        np.isnan(uv).any(axis=1), False, cam.contains(np.nan_to_num(uv))
    )
    return uv, visible


def make_linear_trajectory(
    start: PoseSE3,
    velocity,
    angular_velocity_deg,
    duration_s: float,
    sample_rate_hz: float = 200.0,
    t0_us: int = 0,
) -> PoseTrajectory:
    """Constant twist: translation velocity (m/s) and rotation-vector rate (deg/s)."""
    n = max(int(round(duration_s * sample_rate_hz)), 1)
    t_s = np.arange(n + 1) / sample_rate_hz
    t_us = t0_us + np.round(t_s * 1e6).astype(np.int64)
    trans = start.translation[None, :] + np.outer(t_s, np.asarray(velocity, dtype=float))
    omega = np.deg2rad(np.asarray(angular_velocity_deg, dtype=float))
    rots = Rotation.from_matrix(start.rotation) * Rotation.from_rotvec(np.outer(t_s, omega))
    return PoseTrajectory(t_us, (rots, trans))


def make_oscillating_trajectory(
    center,
    amplitude,
    frequency_hz,
    rot_axis,
    rot_amplitude_deg: float,
    rot_frequency_hz: float,
    duration_s: float,
    sample_rate_hz: float = 200.0,
    base_rotation: np.ndarray | None = None,
    t0_us: int = 0,
) -> PoseTrajectory:
    """Sinusoidal translation per axis plus a sinusoidal rotation about one axis.

    Peak linear speed is amplitude * 2*pi*frequency per axis; peak angular
    speed is rot_amplitude_deg * 2*pi*rot_frequency_hz.
    """
    n = max(int(round(duration_s * sample_rate_hz)), 1)
    t_s = np.arange(n + 1) / sample_rate_hz
    t_us = t0_us + np.round(t_s * 1e6).astype(np.int64)
    amp = np.asarray(amplitude, dtype=float).reshape(3)
    freq = np.broadcast_to(np.asarray(frequency_hz, dtype=float), (3,))
    trans = np.asarray(center, dtype=float)[None, :] + amp * np.sin(
        2.0 * np.pi * freq * t_s[:, None]
    )
    axis = np.asarray(rot_axis, dtype=float)
    axis = axis / np.linalg.norm(axis)
    angles = np.deg2rad(rot_amplitude_deg) * np.sin(2.0 * np.pi * rot_frequency_hz * t_s)
    rots = Rotation.from_rotvec(np.outer(angles, axis))
    if base_rotation is not None:
        rots = rots * Rotation.from_matrix(base_rotation)
    return PoseTrajectory(t_us, (rots, trans))


def _intensity_patch(a, b, amp, sigma, cutoff, width, height, image):
    """Add one segment's Gaussian profile into the image (in place)."""
    margin = cutoff * sigma + 1.0
    x0 = max(int(np.floor(min(a[0], b[0]) - margin)), 0)
    x1 = min(int(np.ceil(max(a[0], b[0]) + margin)) + 1, width)
    y0 = max(int(np.floor(min(a[1], b[1]) - margin)), 0)
    y1 = min(int(np.ceil(max(a[1], b[1]) + margin)) + 1, height)
    if x0 >= x1 or y0 >= y1:
        return
    xs = np.arange(x0, x1, dtype=float)[None, :]
    ys = np.arange(y0, y1, dtype=float)[:, None]
    ab = b - a
    denom = float(ab @ ab)
    dx = xs - a[0]
    dy = ys - a[1]
    if denom > 0.0:
        s = np.clip((dx * ab[0] + dy * ab[1]) / denom, 0.0, 1.0)
    else:
        s = 0.0
    rx = dx - s * ab[0]
    ry = dy - s * ab[1]
    d2 = rx * rx + ry * ry
    # Hard cutoff keeps L a pure function of distance, independent of the
    # bounding box rasterization.
    mask = d2 <= (cutoff * sigma) ** 2
    view = image[y0:y1, x0:x1]
    view[mask] += amp * np.exp(-d2[mask] / (2.0 * sigma * sigma))


def _intensity_image(uv, features, amp, sigma, cutoff, cam, out, clear_box=None):
    if clear_box is None:
        out.fill(0.0)
    else:
        x0, y0, x1, y1 = clear_box
        out[y0:y1, x0:x1] = 0.0
    for i, j in features:
        _intensity_patch(uv[i], uv[j], amp, sigma, cutoff, cam.width, cam.height, out)
    return out


def _feature_box(uv, margin, cam):
    """Clipped bounding box (x0, y0, x1, y1) of the feature support, or None."""
    x0 = max(int(np.floor(uv[:, 0].min() - margin)), 0)
    x1 = min(int(np.ceil(uv[:, 0].max() + margin)) + 1, cam.width)
    y0 = max(int(np.floor(uv[:, 1].min() - margin)), 0)
    y1 = min(int(np.ceil(uv[:, 1].max() + margin)) + 1, cam.height)
    if x0 >= x1 or y0 >= y1:
        return None
    return (x0, y0, x1, y1)


def _union_box(a, b):
    if a is None:
        return b
    if b is None:
        return a
    return (min(a[0], b[0]), min(a[1], b[1]), max(a[2], b[2]), max(a[3], b[3]))


@dataclass
class RenderResult:
    events: np.ndarray
    truth: PoseTrajectory
    stats: dict = field(default_factory=dict)


def render_events(
    model: SceneModel,
    trajectory: PoseTrajectory,
    cam: CameraIntrinsics,
    contrast: ContrastModel,
    rate_hz: float = 10_000.0,
    edge_sigma: float = 1.5,
    cutoff_sigmas: float = 4.0,
    noise_rate_hz: float = 0.0,
    seed: int = 0,
) -> RenderResult:
    """Simulate the event stream produced by the model moving along a trajectory.

    The latent image is evaluated at micro-steps of 1/rate_hz seconds; events
    are timestamped by linear interpolation of the log intensity inside each
    micro-step and returned sorted by t. Deterministic for a fixed seed.
    """
    if rate_hz <= 0:
        raise ValueError("rate_hz must be positive")
    dt_us = max(int(round(1e6 / rate_hz)), 1)
    t_us = np.arange(trajectory.t_start, trajectory.t_end + 1, dt_us, dtype=np.int64)
    if t_us.size < 2:
        raise ValueError("trajectory too short for the micro-step rate")
    truth = trajectory.resample(t_us)
    rmats = truth.rotation_matrices()
    trans = truth.translations()

    pts_cam = np.einsum("tij,kj->tki", rmats, model.keypoints_3d) + trans[:, None, :]
    depths = pts_cam[..., 2]
    if np.any(depths <= 0.0):
        bad = int(np.argwhere(depths <= 0.0)[0, 0])
        raise ValueError(f"model leaves frustum at t={int(t_us[bad])} us")
    uv_all = np.empty(pts_cam.shape[:2] + (2,))
    uv_all[..., 0] = cam.fx * pts_cam[..., 0] / depths + cam.cx
    uv_all[..., 1] = cam.fy * pts_cam[..., 1] / depths + cam.cy

    if model.edges:
        features = list(model.edges)
    else:
        features = [(k, k) for k in range(model.num_keypoints)]

    threshold = contrast.threshold
    shape = (cam.height, cam.width)
    frame = np.zeros(shape)
    prev = np.zeros(shape)
    _intensity_image(uv_all[0], features, model.base_intensity, edge_sigma,
                     cutoff_sigmas, cam, prev)
    reference = prev.copy()

    rng = np.random.default_rng(seed)
    chunks = []
    margin = cutoff_sigmas * edge_sigma + 2.0
    prev_support = _feature_box(uv_all[0], margin, cam)  # support of `prev` (L_{k-1})
    frame_support = None                                 # stale support of `frame`
    for k in range(1, t_us.size):
        cur_box = _feature_box(uv_all[k], margin, cam)
        frame = _intensity_image(uv_all[k], features, model.base_intensity, edge_sigma,
                                 cutoff_sigmas, cam, frame,
                                 _union_box(frame_support, cur_box))
        # only pixels under the previous or current feature support can fire:
        # everywhere else L is unchanged and |L - reference| < threshold holds
        box = _union_box(prev_support, cur_box)
        frame_support, prev_support = prev_support, cur_box
        step_t0 = int(t_us[k - 1])
        step_dt = int(t_us[k]) - step_t0
        if box is not None:
            bx0, by0, bx1, by1 = box
            frame_v = frame[by0:by1, bx0:bx1]
            ref_v = reference[by0:by1, bx0:bx1]
            prev_v = prev[by0:by1, bx0:bx1]
            diff = frame_v - ref_v
            n_cross = np.floor_divide(np.abs(diff), threshold).astype(np.int64)
            idx = np.flatnonzero(n_cross)
        else:
            idx = np.zeros(0, dtype=np.int64)
        if idx.size:
            counts = n_cross.ravel()[idx]
            sign = np.sign(diff.ravel()[idx]).astype(np.int8)
            ys, xs = np.unravel_index(idx, frame_v.shape)

            rep = np.repeat(np.arange(idx.size), counts)
            # j = 1..counts within each pixel
            j = np.arange(rep.size) - np.repeat(np.cumsum(counts) - counts, counts) + 1
            ref_flat = ref_v.ravel()[idx]
            prev_flat = prev_v.ravel()[idx]
            cur_flat = frame_v.ravel()[idx]
            levels = ref_flat[rep] + j * threshold * sign[rep]
            frac = (levels - prev_flat[rep]) / (cur_flat[rep] - prev_flat[rep])
            stamps = step_t0 + np.floor(frac * step_dt).astype(np.int64)
            stamps = np.clip(stamps, step_t0, step_t0 + step_dt)

            ev = np.zeros(rep.size, dtype=EVENT_DTYPE)
            ev["t"] = stamps
            ev["x"] = xs[rep] + bx0
            ev["y"] = ys[rep] + by0
            ev["p"] = sign[rep]
            flat_full = (ys + by0) * cam.width + (xs + bx0)
            reference.ravel()[flat_full] += counts * sign * threshold
            chunks.append(ev)
        if noise_rate_hz > 0.0:
            n_noise = rng.poisson(noise_rate_hz * step_dt * 1e-6)
            if n_noise:
                ev = np.zeros(n_noise, dtype=EVENT_DTYPE)
                ev["t"] = step_t0 + rng.integers(0, step_dt, size=n_noise)
                ev["x"] = rng.integers(0, cam.width, size=n_noise)
                ev["y"] = rng.integers(0, cam.height, size=n_noise)
                ev["p"] = rng.choice(np.array([-1, 1], dtype=np.int8), size=n_noise)
                chunks.append(ev)
        prev, frame = frame, prev

    if chunks:
        events = np.concatenate(chunks)
        events = events[np.argsort(events["t"], kind="stable")]
    else:
        events = np.zeros(0, dtype=EVENT_DTYPE)
    stats = {"micro_steps": int(t_us.size - 1), "events": int(events.size)}
    return RenderResult(events=events, truth=truth, stats=stats)
