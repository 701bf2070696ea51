import json

import numpy as np
import pytest
from scipy.spatial.transform import Rotation

from eventpose.cli import main
from eventpose.config import load_config
from eventpose.events import read_events, write_events
from eventpose.geometry import PoseSE3, PoseTrajectory, read_trajectory, write_trajectory

CONFIG = """
[camera]
fx = 200.0
fy = 200.0
cx = 160.0
cy = 120.0
width = 320
height = 240

[model]
type = cuboid
size = 0.2 0.15 0.1

[trajectory]
type = linear
base_rotation_deg = 40 15 30
start_translation = -0.08 0.0 0.55
velocity = 0.35 0.02 0.0
angular_velocity_deg = 0 0 8
duration_s = 0.3
sample_rate_hz = 400

[simulate]
contrast = 0.2
rate_hz = 4000
edge_sigma_px = 1.5
truth_rate_hz = 200

[tracker]
window_us = 5000
blur_sigma = 2.0
detector = oracle
search_radius = 5
beta = 4.0
alpha = 0.5
process_noise = 0.05
measurement_noise = 2.0
max_lost = 8

[run]
seed = 3
delta = 1
"""


@pytest.fixture
def config_path(tmp_path):
    path = tmp_path / "run.ini"
    path.write_text(CONFIG)
    return path


def test_simulate_writes_outputs(config_path, tmp_path):
    out = tmp_path / "out"
    assert main(["simulate", "--config", str(config_path), "--output", str(out)]) == 0
    events, size = read_events(out / "events.evt")
    assert size == (320, 240)
    assert events.size > 0
    truth = read_trajectory(out / "truth.csv")
    assert truth.t_start == 0 and truth.t_end == 300_000
    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["command"] == "simulate"
    assert manifest["seed"] == 3
    assert len(manifest["config_sha256"]) == 64
    assert "numpy" in manifest["versions"]


def test_simulate_deterministic_bytes(config_path, tmp_path):
    out_a, out_b = tmp_path / "a", tmp_path / "b"
    main(["simulate", "--config", str(config_path), "--output", str(out_a)])
    main(["simulate", "--config", str(config_path), "--output", str(out_b)])
    assert (out_a / "events.evt").read_bytes() == (out_b / "events.evt").read_bytes()
    assert (out_a / "truth.csv").read_bytes() == (out_b / "truth.csv").read_bytes()


def test_all_chains_and_evaluates(config_path, tmp_path):
    out = tmp_path / "out"
    assert main(["all", "--config", str(config_path), "--output", str(out)]) == 0
    for name in ("events.evt", "truth.csv", "estimate.csv", "track_log.csv",
                 "metrics.json", "rpe_steps.csv", "manifest.json"):
        assert (out / name).exists(), name
    report = json.loads((out / "metrics.json").read_text())
    assert report["m"] > 10
    assert np.isfinite(report["r_rel_deg_per_s"])
    est = read_trajectory(out / "estimate.csv")
    assert len(est) > 10
    log_lines = (out / "track_log.csv").read_text().splitlines()
    assert log_lines[0] == "t_us,keypoint_index,x,y,valid,score,class"


def test_track_and_pose_outputs_deterministic(config_path, tmp_path):
    out_a, out_b = tmp_path / "a", tmp_path / "b"
    for out in (out_a, out_b):
        main(["simulate", "--config", str(config_path), "--output", str(out)])
        assert main(["track", "--config", str(config_path), "--output", str(out)]) == 0
    assert (out_a / "estimate.csv").read_bytes() == (out_b / "estimate.csv").read_bytes()
    assert (out_a / "track_log.csv").read_bytes() == (out_b / "track_log.csv").read_bytes()


def test_evaluate_truth_vs_itself_zero(config_path, tmp_path):
    out = tmp_path / "out"
    main(["simulate", "--config", str(config_path), "--output", str(out)])
    code = main([
        "evaluate", "--truth", str(out / "truth.csv"),
        "--estimate", str(out / "truth.csv"), "--output", str(out),
    ])
    assert code == 0
    report = json.loads((out / "metrics.json").read_text())
    assert report["r_rel_deg_per_s"] == 0.0
    assert report["t_rel_cm_per_s"] == 0.0


def test_evaluate_recovers_injected_drift(tmp_path):
    stamps = np.arange(0, 2_000_001, 10_000)
    truth = PoseTrajectory(stamps, [PoseSE3.identity() for _ in stamps])
    drifted = PoseTrajectory(stamps, [
        PoseSE3(Rotation.from_euler("x", 1.0 * t * 1e-6, degrees=True).as_matrix(), np.zeros(3))
        for t in stamps
    ])
    write_trajectory(tmp_path / "truth.csv", truth)
    write_trajectory(tmp_path / "est.csv", drifted)
    code = main([
        "evaluate", "--truth", str(tmp_path / "truth.csv"),
        "--estimate", str(tmp_path / "est.csv"), "--output", str(tmp_path),
    ])
    assert code == 0
    report = json.loads((tmp_path / "metrics.json").read_text())
    assert report["r_rel_deg_per_s"] == pytest.approx(1.0, abs=1e-6)


def test_missing_events_file_exit_2(config_path, tmp_path, capsys):
    out = tmp_path / "out"
    code = main(["track", "--config", str(config_path), "--output", str(out),
                 "--events", str(tmp_path / "nope.evt")])
    assert code == 2
    assert "error" in capsys.readouterr().err


def test_three_keypoint_model_rejected_at_parse(config_path, tmp_path, capsys):
    bad = CONFIG.replace(
        "type = cuboid\nsize = 0.2 0.15 0.1",
        "type = points\nkeypoints =\n    0 0 0\n    0.1 0 0\n    0 0.1 0.05",
    )
    bad_path = tmp_path / "bad.ini"
    bad_path.write_text(bad)
    code = main(["simulate", "--config", str(bad_path), "--output", str(tmp_path / "o")])
    assert code == 2
    assert "insufficient correspondences" in capsys.readouterr().err


def test_tracking_lost_exit_1_with_partial(config_path, tmp_path, capsys):
    out = tmp_path / "out"
    main(["simulate", "--config", str(config_path), "--output", str(out)])
    events, size = read_events(out / "events.evt")
    gap = events[(events["t"] < 60_000) | (events["t"] >= 295_000)]
    write_events(out / "events.evt", gap, *size)
    code = main(["track", "--config", str(config_path), "--output", str(out)])
    assert code == 1
    assert "tracking lost" in capsys.readouterr().err
    assert (out / "estimate.csv").exists()
    assert (out / "track_log.csv").exists()


def test_seed_override_changes_hash(config_path, tmp_path):
    out_a, out_b = tmp_path / "a", tmp_path / "b"
    main(["simulate", "--config", str(config_path), "--output", str(out_a)])
    main(["simulate", "--config", str(config_path), "--output", str(out_b), "--seed", "99"])
    ha = json.loads((out_a / "manifest.json").read_text())["config_sha256"]
    hb = json.loads((out_b / "manifest.json").read_text())["config_sha256"]
    assert ha != hb


def test_config_loader_round(config_path):
    cfg = load_config(config_path)
    assert cfg.camera.width == 320
    assert cfg.model.num_keypoints == 8
    assert cfg.tracker["detector"] == "oracle"
    assert cfg.seed == 3
    with pytest.raises(ValueError, match="unknown tracker option"):
        load_config(config_path, overrides={"tracker.bogus": 1})


def test_unknown_model_type(config_path, tmp_path):
    bad = CONFIG.replace("type = cuboid", "type = blob")
    bad_path = tmp_path / "bad.ini"
    bad_path.write_text(bad)
    with pytest.raises(ValueError, match="unknown model type"):
        load_config(bad_path)
