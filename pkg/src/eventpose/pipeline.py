"""End-to-end tracking estimator: events in, pose trajectory out.

fit() consumes the first time-surface window: it runs the configured keypoint
detector, binds detections to the 3D model (the correspondence hash), and
solves the initial pose. predict() then replays the remaining windows:
per-keypoint local surfaces around the EKF-predicted positions, one
track_step per window, and one gated EPnP solve per window. predict() always
restarts from the fitted state, so repeated calls are reproducible.
"""

from __future__ import annotations

from dataclasses import replace

import numpy as np
from sklearn.base import BaseEstimator

from .camera import CameraIntrinsics
from .detect import DensityPeakDetector, OracleDetector
from .events import build_time_surfaces, check_events
from .geometry import PoseSE3, PoseTrajectory
from .simulate import SceneModel
from .solver import TrackingLostError, initialize_correspondence, solve_epnp, track_pose
from .tracking import KeypointState, TrackerParams, ekf_predict, track_step

TRACK_LOG_HEADER = "t_us,keypoint_index,x,y,valid,score,class"


class EventPoseTracker(BaseEstimator):
    """Windowed 6-DoF pose tracker for a known keypoint model.

    Parameters mirror TrackerParams plus the windowing, detector, and pose
    gate settings; everything is exposed flat for get_params/set_params.
    """

    def __init__(
        self,
        model: SceneModel,
        camera: CameraIntrinsics,
        *,
        window_us: int = 10_000,
        blur_sigma: float = 2.0,
        detector="oracle",
        min_separation: float = 6.0,
        peak_floor: float = 0.0,
        eta: float = 0.8,
        beta: float = 0.5,
        alpha: float = 0.3,
        search_radius: int = 12,
        big_window: int = 7,
        small_window: int = 3,
        process_noise: float = 0.01,
        measurement_noise: float = 1.0,
        min_events: int = 6,
        max_lost: int = 5,
        init_position_var: float = 1.0,
        init_velocity_var: float = 25.0,
        max_rot_step_deg: float = 15.0,
        max_trans_step_m: float = 0.2,
        use_ransac: bool = False,
        ransac_threshold: float = 4.0,
    ):
        self.model = model
        self.camera = camera
        self.window_us = window_us
        self.blur_sigma = blur_sigma
        self.detector = detector
        self.min_separation = min_separation
        self.peak_floor = peak_floor
        self.eta = eta
        self.beta = beta
        self.alpha = alpha
        self.search_radius = search_radius
        self.big_window = big_window
        self.small_window = small_window
        self.process_noise = process_noise
        self.measurement_noise = measurement_noise
        self.min_events = min_events
        self.max_lost = max_lost
        self.init_position_var = init_position_var
        self.init_velocity_var = init_velocity_var
        self.max_rot_step_deg = max_rot_step_deg
        self.max_trans_step_m = max_trans_step_m
        self.use_ransac = use_ransac
        self.ransac_threshold = ransac_threshold

    # -- configuration ----------------------------------------------------

    def tracker_params(self) -> TrackerParams:
        return TrackerParams(
            eta=self.eta,
            beta=self.beta,
            alpha=self.alpha,
            search_radius=self.search_radius,
            big_window=self.big_window,
            small_window=self.small_window,
            process_noise=self.process_noise,
            measurement_noise=self.measurement_noise,
            min_events=self.min_events,
            max_lost=self.max_lost,
            init_position_var=self.init_position_var,
            init_velocity_var=self.init_velocity_var,
        )

    def _make_detector(self, truth: PoseTrajectory | None):
        if self.detector == "oracle":
            if truth is None:
                raise ValueError("oracle detector needs the ground-truth trajectory")
            return OracleDetector(self.model, self.camera, truth)
        if self.detector == "density":
            return DensityPeakDetector(
                num_keypoints=self.model.num_keypoints,
                min_separation=self.min_separation,
                floor=self.peak_floor,
            )
        if hasattr(self.detector, "detect"):
            return self.detector
        raise ValueError(f"unknown detector {self.detector!r}")

    def _full_region(self):
        return (0, 0, self.camera.width, self.camera.height)

    # -- estimation --------------------------------------------------------

    def fit(self, events: np.ndarray, truth: PoseTrajectory | None = None):
        """Detect keypoints on the first window and build the 2D-3D hash."""
        check_events(events, self.camera.width, self.camera.height)
        if events.size == 0:
            raise ValueError("cannot initialize from an empty event stream")
        params = self.tracker_params()
        t0 = int(events["t"][0])
        window = (t0, t0 + int(self.window_us))
        surfaces = build_time_surfaces(events, window, self._full_region(), self.blur_sigma)

        det = self._make_detector(truth)
        detections = det.detect(surfaces)
        # The oracle emits semantically ordered slots; classical detections
        # need the prior pose to be bound to model indices.
        prior = None
        if not isinstance(det, OracleDetector) and truth is not None:
            prior = truth.pose_at((window[0] + window[1]) // 2)
        table, assignment = initialize_correspondence(detections, self.model, self.camera, prior)

        velocities = self._initial_velocities(truth, window)
        states = []
        for slot in np.flatnonzero(assignment >= 0):
            index = int(assignment[slot])
            x, y = detections.points[slot]
            kp = KeypointState.init(index, float(x), float(y), params)
            if velocities is not None:
                kp.state[2:] = velocities[index]
            states.append(kp)
        states.sort(key=lambda kp: kp.index)

        pts2 = np.asarray([kp.position for kp in states])
        pts3 = np.asarray([table.get(kp.index) for kp in states])
        initial_pose, init_rms = solve_epnp(pts2, pts3, self.camera)

        self.table_ = table
        self.assignment_ = assignment
        self.initial_states_ = states
        self.initial_pose_ = initial_pose
        self.initial_rms_ = init_rms
        self.init_window_ = window
        return self

    def _initial_velocities(self, truth: PoseTrajectory | None, window) -> np.ndarray | None:
        """Per-keypoint image velocity (px/window) from the truth trajectory.

        The matched position of a window reflects its event mass around the
        window midpoint; seeding the filter velocity from truth removes the
        startup transient that otherwise lets fast targets escape the search
        patch before the velocity estimate settles.
        """
        if truth is None:
            return None
        from .simulate import project_keypoints

        t_mid = (window[0] + window[1]) // 2
        t_next = t_mid + int(self.window_us)
        if t_next > truth.t_end:
            return None
        uv_a, _ = project_keypoints(self.model, truth.pose_at(t_mid), self.camera)
        uv_b, _ = project_keypoints(self.model, truth.pose_at(t_next), self.camera)
        return np.nan_to_num(uv_b - uv_a)

    def predict(self, events: np.ndarray) -> PoseTrajectory:
        """Track through all windows after the initialization window.

        Raises TrackingLostError (with the partial trajectory attached) when
        fewer than four keypoints survive.
        """
        if not hasattr(self, "table_"):
            raise RuntimeError("call fit() before predict()")
        check_events(events, self.camera.width, self.camera.height)
        params = self.tracker_params()
        window_us = int(self.window_us)
        t_last = int(events["t"][-1]) if events.size else self.init_window_[1]

        states = [
            replace(kp, state=kp.state.copy(), covariance=kp.covariance.copy(),
                    position=kp.position.copy(), trajectory=[])
            for kp in self.initial_states_
        ]
        prev_pose = self.initial_pose_
        # a window's events are centered on its midpoint in time, so poses
        # are stamped there (the initialization window included)
        stamps = [(self.init_window_[0] + self.init_window_[1]) // 2]
        poses = [prev_pose]
        log_rows: list = []
        diagnostics = []

        start = self.init_window_[1]
        while start + window_us <= t_last:
            window = (start, start + window_us)
            t_report = (window[0] + window[1]) // 2
            full = build_time_surfaces(events, window, self._full_region(), self.blur_sigma)

            local = []
            for kp in states:
                if not kp.alive:
                    local.append(None)
                    continue
                center = ekf_predict(kp, params).state[:2]
                local.append(full.slice_local((center[0], center[1]), params.search_radius))

            states = track_step(states, local, params, t_report)
            for kp in states:
                if kp.alive and not self._inside_sensor(kp.position):
                    kp.alive = False
                log_rows.append(self._log_row(t_report, kp))

            try:
                pose, diag = track_pose(
                    states, self.table_, self.camera, prev_pose,
                    self.max_rot_step_deg, self.max_trans_step_m,
                    ransac=self.use_ransac, ransac_threshold=self.ransac_threshold,
                )
            except TrackingLostError as exc:
                exc.partial = {
                    "trajectory": PoseTrajectory(np.asarray(stamps), poses),
                    "track_log": log_rows,
                }
                self.track_log_ = log_rows
                self.diagnostics_ = diagnostics
                raise
            diagnostics.append(diag)
            stamps.append(t_report)
            poses.append(pose)
            prev_pose = pose
            start += window_us

        self.states_ = states
        self.track_log_ = log_rows
        self.diagnostics_ = diagnostics
        return PoseTrajectory(np.asarray(stamps), poses)

    def fit_predict(self, events: np.ndarray, truth: PoseTrajectory | None = None):
        return self.fit(events, truth).predict(events)

    # -- helpers -----------------------------------------------------------

    def _inside_sensor(self, xy) -> bool:
        return bool(
            0.0 <= xy[0] < self.camera.width and 0.0 <= xy[1] < self.camera.height
        )

    @staticmethod
    def _log_row(t_us: int, kp: KeypointState) -> tuple:
        cls = kp.last_class.value if kp.last_class is not None else "none"
        return (
            int(t_us), int(kp.index), float(kp.position[0]), float(kp.position[1]),
            int(kp.last_valid), float(kp.last_score), cls,
        )


def write_track_log(path, rows) -> None:
    with open(path, "w") as fh:
        fh.write(TRACK_LOG_HEADER + "\n")
        for t, idx, x, y, valid, score, cls in rows:
            fh.write(f"{t},{idx},{x:.17g},{y:.17g},{valid},{score:.17g},{cls}\n")
