"""Run configuration: INI-style key = value sections with CLI overrides.

A config fully specifies camera, model, trajectory, simulator, tracker, and
run settings; the sha256 of the resolved key/value set goes into the run
manifest so outputs are reproducible byte for byte.
"""

from __future__ import annotations

import configparser
import hashlib
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial.transform import Rotation

from .camera import CameraIntrinsics
from .events import ContrastModel
from .geometry import PoseSE3, PoseTrajectory
from .simulate import (
    SceneModel,
    make_cuboid,
    make_linear_trajectory,
    make_oscillating_trajectory,
)

TRACKER_KEYS = (
    "window_us", "blur_sigma", "detector", "min_separation", "peak_floor",
    "eta", "beta", "alpha", "search_radius", "big_window", "small_window",
    "process_noise", "measurement_noise", "min_events", "max_lost",
    "init_position_var", "init_velocity_var",
)
_TRACKER_INT_KEYS = {
    "window_us", "search_radius", "big_window", "small_window", "min_events", "max_lost",
}


@dataclass
class SimulationSettings:
    contrast: ContrastModel
    rate_hz: float = 10_000.0
    edge_sigma_px: float = 1.5
    noise_rate_hz: float = 0.0
    truth_rate_hz: float = 100.0


@dataclass
class RunConfig:
    camera: CameraIntrinsics
    model: SceneModel
    trajectory: PoseTrajectory
    simulation: SimulationSettings
    tracker: dict
    max_rot_step_deg: float = 15.0
    max_trans_step_m: float = 0.2
    use_ransac: bool = False
    ransac_threshold: float = 4.0
    seed: int = 0
    delta: int = 1
    output: str = "run_output"
    resolved: dict = field(default_factory=dict)

    def sha256(self) -> str:
        lines = [f"{k}={self.resolved[k]}" for k in sorted(self.resolved)]
        return hashlib.sha256("\n".join(lines).encode()).hexdigest()


def _floats(text: str) -> np.ndarray:
    return np.asarray([float(v) for v in text.replace(",", " ").split()])


def _rows(text: str) -> list[np.ndarray]:
    return [_floats(line) for line in text.strip().splitlines() if line.strip()]


def _build_model(sec) -> SceneModel:
    kind = sec.get("type", "cuboid").strip()
    base = float(sec.get("base_intensity", "1.0"))
    if kind == "cuboid":
        size = _floats(sec.get("size", "0.2 0.12 0.08"))
        return make_cuboid(*size, base_intensity=base)
    if kind == "points":
        pts = np.asarray(_rows(sec["keypoints"]))
        edges = []
        if sec.get("edges", "").strip():
            edges = [(int(i), int(j)) for i, j in _rows(sec["edges"])]
        return SceneModel(pts, tuple(edges), base)
    raise ValueError(f"unknown model type {kind!r}")


def _build_trajectory(sec) -> PoseTrajectory:
    kind = sec.get("type", "oscillating").strip()
    base = Rotation.from_euler(
        "zyx", _floats(sec.get("base_rotation_deg", "0 0 0")), degrees=True
    ).as_matrix()
    if kind == "oscillating":
        return make_oscillating_trajectory(
            center=_floats(sec.get("center", "0 0 1.0")),
            amplitude=_floats(sec.get("amplitude", "0.1 0 0")),
            frequency_hz=_floats(sec.get("frequency_hz", "1.0")),
            rot_axis=_floats(sec.get("rot_axis", "0 0 1")),
            rot_amplitude_deg=float(sec.get("rot_amplitude_deg", "0")),
            rot_frequency_hz=float(sec.get("rot_frequency_hz", "1.0")),
            duration_s=float(sec.get("duration_s", "1.0")),
            sample_rate_hz=float(sec.get("sample_rate_hz", "200")),
            base_rotation=base,
        )
    if kind == "linear":
        start = PoseSE3(base, _floats(sec.get("start_translation", "0 0 1.0")))
        return make_linear_trajectory(
            start=start,
            velocity=_floats(sec.get("velocity", "0 0 0")),
            angular_velocity_deg=_floats(sec.get("angular_velocity_deg", "0 0 0")),
            duration_s=float(sec.get("duration_s", "1.0")),
            sample_rate_hz=float(sec.get("sample_rate_hz", "200")),
        )
    if kind == "waypoints":
        rows = _rows(sec["waypoints"])
        stamps = [int(r[0]) for r in rows]
        trans = np.asarray([r[1:4] for r in rows])
        quats = np.asarray([r[4:8] for r in rows])
        rots = Rotation.from_quat(quats, scalar_first=True)
        return PoseTrajectory(np.asarray(stamps), (rots, trans))
    raise ValueError(f"unknown trajectory type {kind!r}")


def load_config(path, overrides: dict | None = None) -> RunConfig:
    """Parse a config file; ``overrides`` are flat "section.key" -> value pairs."""
    parser = configparser.ConfigParser(inline_comment_prefixes=("#", ";"))
    read = parser.read(path)
    if not read:
        raise OSError(f"config file not found: {path}")
    if overrides:
        for dotted, value in overrides.items():
            if value is None:
                continue
            section, key = dotted.split(".", 1)
            if not parser.has_section(section):
                parser.add_section(section)
            parser.set(section, key, str(value))

    resolved = {
        f"{section}.{key}": parser.get(section, key)
        for section in parser.sections()
        for key in parser.options(section)
    }

    cam_sec = parser["camera"]
    camera = CameraIntrinsics(
        fx=cam_sec.getfloat("fx"),
        fy=cam_sec.getfloat("fy"),
        cx=cam_sec.getfloat("cx"),
        cy=cam_sec.getfloat("cy"),
        width=cam_sec.getint("width"),
        height=cam_sec.getint("height"),
    )
    model = _build_model(parser["model"])
    trajectory = _build_trajectory(parser["trajectory"])

    sim_sec = parser["simulate"] if parser.has_section("simulate") else {}
    simulation = SimulationSettings(
        contrast=ContrastModel(float(sim_sec.get("contrast", "0.25"))),
        rate_hz=float(sim_sec.get("rate_hz", "10000")),
        edge_sigma_px=float(sim_sec.get("edge_sigma_px", "1.5")),
        noise_rate_hz=float(sim_sec.get("noise_rate_hz", "0")),
        truth_rate_hz=float(sim_sec.get("truth_rate_hz", "100")),
    )

    tracker: dict = {}
    if parser.has_section("tracker"):
        for key in parser.options("tracker"):
            if key not in TRACKER_KEYS:
                raise ValueError(f"unknown tracker option {key!r}")
            raw = parser.get("tracker", key)
            if key == "detector":
                tracker[key] = raw.strip()
            elif key in _TRACKER_INT_KEYS:
                tracker[key] = int(raw)
            else:
                tracker[key] = float(raw)

    pose_sec = parser["pose"] if parser.has_section("pose") else {}
    run_sec = parser["run"] if parser.has_section("run") else {}
    return RunConfig(
        camera=camera,
        model=model,
        trajectory=trajectory,
        simulation=simulation,
        tracker=tracker,
        max_rot_step_deg=float(pose_sec.get("max_rot_step_deg", "15.0")),
        max_trans_step_m=float(pose_sec.get("max_trans_step_m", "0.2")),
        use_ransac=str(pose_sec.get("ransac", "false")).strip().lower() in ("1", "true", "yes", "on"),
        ransac_threshold=float(pose_sec.get("ransac_threshold", "4.0")),
        seed=int(run_sec.get("seed", "0")),
        delta=int(run_sec.get("delta", "1")),
        output=str(run_sec.get("output", "run_output")),
        resolved=resolved,
    )
