"""Relative pose error between an estimated and a ground-truth trajectory.

Per-step error transforms E_i = (Q_i^-1 Q_{i+d})^-1 (P_i^-1 P_{i+d}) compare
the truth increment against the estimate increment, so any constant offset
between the two trajectories cancels. The rotation and translation metrics
are RMS drift rates normalized by the actual per-pair time difference
(deg/s and cm/s).
"""

from __future__ import annotations

import numpy as np

from .geometry import PoseSE3, PoseTrajectory, rotation_angle


def relative_error_terms(
    truth: PoseTrajectory, estimate: PoseTrajectory, delta: int = 1
) -> list[PoseSE3]:
    """Per-step relative error transforms over time-aligned trajectories."""
    if delta < 1:
        raise ValueError("delta must be >= 1")
    if len(truth) != len(estimate) or np.any(truth.timestamps_us != estimate.timestamps_us):
        raise ValueError("mismatched timestamps: align the trajectories first")
    n = len(truth)
    if n < delta + 1:
        raise ValueError(f"need at least {delta + 1} samples for delta={delta}")
    terms = []
    for i in range(n - delta):
        q_step = truth.pose(i).inverse() @ truth.pose(i + delta)
        p_step = estimate.pose(i).inverse() @ estimate.pose(i + delta)
        if np.array_equal(q_step.rotation, p_step.rotation) and np.array_equal(
            q_step.translation, p_step.translation
        ):
            # bit-equal increments: the error is the identity exactly
            terms.append(PoseSE3.identity())
        else:
            terms.append(q_step.inverse() @ p_step)
    return terms


def pair_dts(traj: PoseTrajectory, delta: int = 1) -> np.ndarray:
    """Actual per-pair time differences in seconds."""
    t = traj.timestamps_us.astype(float)
    return (t[delta:] - t[:-delta]) * 1e-6


def r_rel(terms, dt_s) -> float:
    """RMS rotational drift rate in deg/s."""
    if len(terms) == 0:
        raise ValueError("empty error-term list")
    dt = np.broadcast_to(np.asarray(dt_s, dtype=float), (len(terms),))
    if np.any(dt <= 0):
        raise ValueError("dt must be positive")
    angles = np.asarray([rotation_angle(e.rotation) for e in terms])
    rates = np.rad2deg(angles) / dt
    return float(np.sqrt(np.mean(rates**2)))


def t_rel(terms, dt_s) -> float:
    """RMS translational drift rate in cm/s."""
    if len(terms) == 0:
        raise ValueError("empty error-term list")
    dt = np.broadcast_to(np.asarray(dt_s, dtype=float), (len(terms),))
    if np.any(dt <= 0):
        raise ValueError("dt must be positive")
    norms = np.asarray([np.linalg.norm(e.translation) for e in terms]) * 100.0
    return float(np.sqrt(np.mean((norms / dt) ** 2)))


def align_to_truth(
    truth: PoseTrajectory, estimate: PoseTrajectory
) -> tuple[PoseTrajectory, PoseTrajectory]:
    """Resample the estimate at the truth timestamps over their overlap."""
    lo = max(truth.t_start, estimate.t_start)
    hi = min(truth.t_end, estimate.t_end)
    keep = (truth.timestamps_us >= lo) & (truth.timestamps_us <= hi)
    if keep.sum() < 2:
        raise ValueError("trajectories do not overlap in time")
    stamps = truth.timestamps_us[keep]
    return truth.resample(stamps), estimate.resample(stamps)


def evaluate_trajectories(
    truth: PoseTrajectory, estimate: PoseTrajectory, delta: int = 1
) -> dict:
    """Align, compute E_i, and report the drift-rate metrics.

    Returns a JSON-ready dict plus per-step rows under "steps".
    """
    truth_a, est_a = align_to_truth(truth, estimate)
    terms = relative_error_terms(truth_a, est_a, delta)
    dts = pair_dts(truth_a, delta)
    steps = []
    for i, (term, dt) in enumerate(zip(terms, dts)):
        steps.append({
            "t_us": int(truth_a.timestamps_us[i]),
            "rot_deg": float(np.rad2deg(rotation_angle(term.rotation))),
            "trans_m": float(np.linalg.norm(term.translation)),
            "dt_s": float(dt),
        })
    return {
        "r_rel_deg_per_s": r_rel(terms, dts),
        "t_rel_cm_per_s": t_rel(terms, dts),
        "m": len(terms),
        "delta": int(delta),
        "dt_mean_s": float(np.mean(dts)),
        "steps": steps,
    }
