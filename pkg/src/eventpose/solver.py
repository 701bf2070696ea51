"""2D-3D correspondence hash, EPnP pose solving, and per-window pose tracking.

The EPnP solver follows the canonical formulation: four control points from
the centroid and PCA axes of the 3D set (three in the planar case),
barycentric coordinates, the 2n x 12 projection system, the four smallest
eigenvectors of M^T M, beta initializations for the N = 1..4 combination
cases refined by Gauss-Newton on the control-point distance constraints, and
absolute orientation (Horn) to recover R, t. The candidate with the lowest
reprojection RMS that keeps every point in front of the camera wins.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from itertools import combinations

import numpy as np

from .camera import CameraIntrinsics, project
from .detect import KeypointSet
from .geometry import PoseSE3, orthonormalize
from .simulate import SceneModel, project_keypoints

PLANARITY_RATIO = 1e-8
GN_ITERATIONS = 10
GN_STEP_TOL = 1e-10
AMBIGUITY_RADIUS_PX = 1.0


class TrackingLostError(RuntimeError):
    """Raised when fewer than four usable keypoints remain."""

    def __init__(self, message="tracking lost", partial=None):
        super().__init__(message)
        self.partial = partial


@dataclass(frozen=True)
class CorrespondenceTable:
    """Hash from semantic keypoint index to its 3D model point (object frame).

    Fixed at initialization; indices never rebind during a sequence.
    """

    points_3d: dict

    def __post_init__(self):
        clean = {int(k): np.asarray(v, dtype=float).reshape(3) for k, v in self.points_3d.items()}
        if len(clean) < 4:
            raise ValueError("insufficient correspondences: table needs at least 4 entries")
        object.__setattr__(self, "points_3d", clean)

    def __len__(self) -> int:
        return len(self.points_3d)

    def __contains__(self, index: int) -> bool:
        return index in self.points_3d

    def get(self, index: int) -> np.ndarray:
        return self.points_3d[index]

    def indices(self):
        return sorted(self.points_3d)


def initialize_correspondence(
    detected: KeypointSet,
    model: SceneModel,
    cam: CameraIntrinsics,
    prior: PoseSE3 | None = None,
) -> tuple[CorrespondenceTable, np.ndarray]:
    """Bind detections to model keypoints and build the index hash.

    With a prior pose, each valid detection is greedily matched to the
    nearest projected model keypoint (one-to-one, smallest distances first).
    Without one, detections are assumed already semantically ordered, the way
    a trained detector emits them. Returns the table and an assignment array
    mapping detection slot -> semantic model index (-1 when unassigned).
    """
    valid_idx = np.flatnonzero(detected.valid)
    assignment = np.full(len(detected), -1, dtype=int)

    if prior is None:
        for i in valid_idx:
            assignment[i] = i
        assigned = [int(i) for i in valid_idx]
    else:
        uv, visible = project_keypoints(model, prior, cam)
        model_idx = np.flatnonzero(visible)
        if valid_idx.size and model_idx.size:
            det_pts = detected.points[valid_idx]
            proj_pts = uv[model_idx]
            dists = np.linalg.norm(det_pts[:, None, :] - proj_pts[None, :, :], axis=-1)
            for j, m in enumerate(model_idx):
                close = np.flatnonzero(dists[:, j] < AMBIGUITY_RADIUS_PX)
                if close.size > 1:
                    culprits = ", ".join(str(int(valid_idx[c])) for c in close)
                    raise ValueError(
                        f"ambiguous assignment: detections {culprits} all claim "
                        f"model keypoint {int(m)} within {AMBIGUITY_RADIUS_PX} px"
                    )
            order = np.argsort(dists, axis=None)
            used_det = set()
            used_model = set()
            for flat in order:
                di, mj = np.unravel_index(flat, dists.shape)
                if di in used_det or mj in used_model:
                    continue
                assignment[valid_idx[di]] = int(model_idx[mj])
                used_det.add(di)
                used_model.add(mj)
                if len(used_det) == min(len(valid_idx), len(model_idx)):
                    break
        assigned = [int(a) for a in assignment if a >= 0]

    if len(assigned) < 4:
        raise ValueError(
            f"insufficient correspondences: only {len(assigned)} assignable detections"
        )
    table = CorrespondenceTable({m: model.keypoints_3d[m] for m in assigned})
    return table, assignment


# ---------------------------------------------------------------------------
# EPnP
# ---------------------------------------------------------------------------

def _control_points(points: np.ndarray, planar: bool) -> np.ndarray:
    centroid = points.mean(axis=0)
    centered = points - centroid
    _, s, vt = np.linalg.svd(centered, full_matrices=False)
    scale = s / np.sqrt(points.shape[0])
    n_axes = 2 if planar else 3
    cps = [centroid]
    for k in range(n_axes):
        cps.append(centroid + scale[k] * vt[k])
    return np.asarray(cps)


def _barycentric(points: np.ndarray, cps: np.ndarray) -> np.ndarray:
    m = cps.shape[0]
    if m == 4:
        a = np.vstack([cps.T, np.ones(4)])
        rhs = np.vstack([points.T, np.ones(points.shape[0])])
        return np.linalg.solve(a, rhs).T
    basis = (cps[1:] - cps[0]).T  # (3, 2)
    coeff, *_ = np.linalg.lstsq(basis, (points - cps[0]).T, rcond=None)
    ab = coeff.T
    return np.column_stack([1.0 - ab.sum(axis=1), ab])


def _build_m(alphas: np.ndarray, uv: np.ndarray, cam: CameraIntrinsics) -> np.ndarray:
    n, m = alphas.shape
    mat = np.zeros((2 * n, 3 * m))
    u = uv[:, 0]
    v = uv[:, 1]
    for j in range(m):
        a = alphas[:, j]
        mat[0::2, 3 * j + 0] = a * cam.fx
        mat[0::2, 3 * j + 2] = a * (cam.cx - u)
        mat[1::2, 3 * j + 1] = a * cam.fy
        mat[1::2, 3 * j + 2] = a * (cam.cy - v)
    return mat


def _pair_terms(basis: np.ndarray, pairs) -> list[np.ndarray]:
    """Per null-vector control-point differences for each constrained pair."""
    m3 = basis.shape[0]
    m = m3 // 3
    out = []
    for k in range(basis.shape[1]):
        cc = basis[:, k].reshape(m, 3)
        out.append(np.asarray([cc[a] - cc[b] for a, b in pairs]))
    return out


def _beta_inits_general(dv, rho) -> list[np.ndarray]:
    """Initial beta guesses for the N = 1..4 combination cases."""
    npairs = rho.size
    d = {}
    for i in range(4):
        for j in range(i, 4):
            d[(i, j)] = (dv[i] * dv[j]).sum(axis=1)

    inits = []
    # N = 1: beta1^2 ||dv1||^2 = rho in least squares.
    denom = float((d[(0, 0)] ** 2).sum())
    b1 = np.sqrt(max(float((rho * d[(0, 0)]).sum()) / denom, 0.0)) if denom > 0 else 0.0
    inits.append(np.array([b1, 0.0, 0.0, 0.0]))

    # N = 2: columns (b11, b12, b22).
    l3 = np.column_stack([d[(0, 0)], 2 * d[(0, 1)], d[(1, 1)]])
    b3, *_ = np.linalg.lstsq(l3, rho, rcond=None)
    beta = np.zeros(4)
    if b3[0] < 0:
        beta[0] = np.sqrt(-b3[0])
        beta[1] = np.sqrt(-b3[2]) if b3[2] < 0 else 0.0
    else:
        beta[0] = np.sqrt(b3[0])
        beta[1] = np.sqrt(b3[2]) if b3[2] > 0 else 0.0
    if b3[1] < 0:
        beta[0] = -beta[0]
    inits.append(beta)

    # N = 3: columns (b11, b12, b22, b13, b23).
    l5 = np.column_stack([d[(0, 0)], 2 * d[(0, 1)], d[(1, 1)], 2 * d[(0, 2)], 2 * d[(1, 2)]])
    b5, *_ = np.linalg.lstsq(l5, rho, rcond=None)
    beta = np.zeros(4)
    if b5[0] < 0:
        beta[0] = np.sqrt(-b5[0])
        beta[1] = np.sqrt(-b5[2]) if b5[2] < 0 else 0.0
    else:
        beta[0] = np.sqrt(b5[0])
        beta[1] = np.sqrt(b5[2]) if b5[2] > 0 else 0.0
    if b5[1] < 0:
        beta[0] = -beta[0]
    if abs(beta[0]) > 0:
        beta[2] = b5[3] / beta[0]
    inits.append(beta)

    # N = 4: columns (b11, b12, b13, b14).
    if npairs >= 4:
        l4 = np.column_stack([d[(0, 0)], 2 * d[(0, 1)], 2 * d[(0, 2)], 2 * d[(0, 3)]])
        b4, *_ = np.linalg.lstsq(l4, rho, rcond=None)
        beta = np.zeros(4)
        sign = -1.0 if b4[0] < 0 else 1.0
        beta[0] = np.sqrt(abs(b4[0]))
        if beta[0] > 0:
            beta[1] = sign * b4[1] / beta[0]
            beta[2] = sign * b4[2] / beta[0]
            beta[3] = sign * b4[3] / beta[0]
        inits.append(beta)
    return inits


def _beta_inits_planar(dv, rho) -> list[np.ndarray]:
    d = {}
    for i in range(2):
        for j in range(i, 2):
            d[(i, j)] = (dv[i] * dv[j]).sum(axis=1)
    inits = []
    denom = float((d[(0, 0)] ** 2).sum())
    b1 = np.sqrt(max(float((rho * d[(0, 0)]).sum()) / denom, 0.0)) if denom > 0 else 0.0
    inits.append(np.array([b1, 0.0]))

    l3 = np.column_stack([d[(0, 0)], 2 * d[(0, 1)], d[(1, 1)]])
    b3, *_ = np.linalg.lstsq(l3, rho, rcond=None)
    beta = np.zeros(2)
    if b3[0] < 0:
        beta[0] = np.sqrt(-b3[0])
        beta[1] = np.sqrt(-b3[2]) if b3[2] < 0 else 0.0
    else:
        beta[0] = np.sqrt(b3[0])
        beta[1] = np.sqrt(b3[2]) if b3[2] > 0 else 0.0
    if b3[1] < 0:
        beta[0] = -beta[0]
    inits.append(beta)
    return inits


def _gauss_newton(basis: np.ndarray, betas: np.ndarray, rho: np.ndarray, pairs) -> np.ndarray:
    dv = _pair_terms(basis, pairs)
    betas = betas.copy()
    m = basis.shape[0] // 3
    for _ in range(GN_ITERATIONS):
        cc = (basis @ betas).reshape(m, 3)
        diffs = np.asarray([cc[a] - cc[b] for a, b in pairs])
        resid = rho - (diffs**2).sum(axis=1)
        jac = np.column_stack([2.0 * (diffs * dv[k]).sum(axis=1) for k in range(betas.size)])
        step, *_ = np.linalg.lstsq(jac, resid, rcond=None)
        betas += step
        if np.linalg.norm(step) < GN_STEP_TOL:
            break
    return betas


def _horn(world: np.ndarray, camera_pts: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    cw = world.mean(axis=0)
    cc = camera_pts.mean(axis=0)
    h = (world - cw).T @ (camera_pts - cc)
    u, _, vt = np.linalg.svd(h)
    d = np.sign(np.linalg.det(vt.T @ u.T))
    rot = vt.T @ np.diag([1.0, 1.0, d]) @ u.T
    return rot, cc - rot @ cw


def _reprojection_rms(
    points_3d: np.ndarray, uv: np.ndarray, rot: np.ndarray, trans: np.ndarray,
    cam: CameraIntrinsics,
) -> float:
    pc = points_3d @ rot.T + trans
    proj = project(pc, cam)
    return float(np.sqrt(np.mean(np.sum((proj - uv) ** 2, axis=1))))


def _epnp_candidates(uv: np.ndarray, pts: np.ndarray, cam: CameraIntrinsics):
    """All cheirality-passing (rms, R, t) candidates from the beta cases."""
    s = np.linalg.svd(pts - pts.mean(axis=0), compute_uv=False)
    if s[0] <= 0 or s[1] <= PLANARITY_RATIO * s[0]:
        raise ValueError("degenerate configuration: 3D points are collinear")
    planar = s[2] <= PLANARITY_RATIO * s[0]

    cps = _control_points(pts, planar)
    m = cps.shape[0]
    alphas = _barycentric(pts, cps)
    mat = _build_m(alphas, uv, cam)
    _, eigvecs = np.linalg.eigh(mat.T @ mat)
    basis = eigvecs[:, :4]

    pairs = list(combinations(range(m), 2))
    rho = np.asarray([float(((cps[a] - cps[b]) ** 2).sum()) for a, b in pairs])
    dv = _pair_terms(basis, pairs)
    inits = _beta_inits_planar(dv, rho) if planar else _beta_inits_general(dv, rho)

    candidates = []
    for init in inits:
        sub = basis[:, : init.size]
        betas = _gauss_newton(sub, init, rho, pairs)
        cc = (sub @ betas).reshape(m, 3)
        depths = (alphas @ cc)[:, 2]
        if depths.sum() < 0:
            cc = -cc
            depths = -depths
        if np.any(depths <= 0):
            continue
        rot, trans = _horn(pts, alphas @ cc)
        rms = _reprojection_rms(pts, uv, rot, trans, cam)
        candidates.append((rms, rot, trans))
    return candidates


def solve_epnp(
    points_2d: np.ndarray, points_3d: np.ndarray, cam: CameraIntrinsics
) -> tuple[PoseSE3, float]:
    """Estimate the pose mapping object-frame points onto observed pixels.

    Requires n >= 4 correspondences that are not all collinear. Raises
    ValueError("degenerate configuration") for collinear sets and
    ValueError("pose behind camera") when no candidate passes cheirality.
    """
    uv = np.asarray(points_2d, dtype=float).reshape(-1, 2)
    pts = np.asarray(points_3d, dtype=float).reshape(-1, 3)
    n = pts.shape[0]
    if n < 4 or uv.shape[0] != n:
        raise ValueError("insufficient correspondences: need at least 4 matched pairs")
    if not (np.all(np.isfinite(uv)) and np.all(np.isfinite(pts))):
        raise ValueError("correspondences contain non-finite values")

    candidates = _epnp_candidates(uv, pts, cam)
    if not candidates:
        raise ValueError("pose behind camera: no candidate satisfies cheirality")
    rms, rot, trans = min(candidates, key=lambda c: c[0])
    return PoseSE3(orthonormalize(rot), trans), rms


def recursive_pose(prev: PoseSE3, delta: PoseSE3) -> PoseSE3:
    """Advance a pose by the inverse of the estimated inter-step change."""
    return prev.compose(delta.inverse())


def solve_epnp_ransac(
    points_2d: np.ndarray,
    points_3d: np.ndarray,
    cam: CameraIntrinsics,
    inlier_threshold: float = 4.0,
    max_subsets: int = 256,
) -> tuple[PoseSE3, float, np.ndarray]:
    """Consensus wrapper around solve_epnp for runs with corrupted keypoints.

    Enumerates minimal 4-point subsets deterministically (capped, evenly
    strided), keeps the hypothesis with the largest reprojection consensus,
    and refits on its inliers. Returns (pose, rms over inliers, inlier mask).
    """
    uv = np.asarray(points_2d, dtype=float).reshape(-1, 2)
    pts = np.asarray(points_3d, dtype=float).reshape(-1, 3)
    n = pts.shape[0]
    if n == 4:
        pose, rms = solve_epnp(uv, pts, cam)
        return pose, rms, np.ones(4, dtype=bool)

    subsets = list(combinations(range(n), 4))
    if len(subsets) > max_subsets:
        stride = len(subsets) // max_subsets + 1
        subsets = subsets[::stride]

    best = None
    for subset in subsets:
        idx = list(subset)
        try:
            pose, _ = solve_epnp(uv[idx], pts[idx], cam)
        except ValueError:
            continue
        proj = project(pose.transform(pts), cam)
        err = np.linalg.norm(proj - uv, axis=1)
        inliers = np.nan_to_num(err, nan=np.inf) < inlier_threshold
        count = int(inliers.sum())
        score = (count, -float(err[inliers].mean()) if count else -np.inf)
        if best is None or score > best[0]:
            best = (score, inliers)
    if best is None or best[0][0] < 4:
        pose, rms = solve_epnp(uv, pts, cam)
        return pose, rms, np.ones(n, dtype=bool)
    inliers = best[1]
    pose, rms = solve_epnp(uv[inliers], pts[inliers], cam)
    return pose, rms, inliers


# ---------------------------------------------------------------------------
# Per-window pose tracking
# ---------------------------------------------------------------------------

@dataclass
class PoseDiagnostics:
    n_points: int
    rms: float
    flagged: bool = False
    used_indices: list = field(default_factory=list)
    inlier_indices: list = field(default_factory=list)


def track_pose(
    states,
    table: CorrespondenceTable,
    cam: CameraIntrinsics,
    prev_pose: PoseSE3 | None = None,
    max_rot_step_deg: float = 15.0,
    max_trans_step_m: float = 0.2,
    ransac: bool = False,
    ransac_threshold: float = 4.0,
) -> tuple[PoseSE3, PoseDiagnostics]:
    """Solve the pose from alive tracked keypoints, gated against the previous pose.

    A solution jumping more than the per-window step bounds from prev_pose is
    treated as an outlier frame: it is flagged and prev_pose is held. With
    ``ransac`` set, keypoints that lost their structure (a stuck or swapped
    track) are excluded by reprojection consensus before the final fit.
    """
    pts2, pts3, used = [], [], []
    for kp in states:
        if kp.alive and kp.index in table:
            pts2.append(kp.position)
            pts3.append(table.get(kp.index))
            used.append(kp.index)
    if len(used) < 4:
        raise TrackingLostError(f"tracking lost: only {len(used)} usable keypoints")

    if ransac:
        pose, rms, inliers = solve_epnp_ransac(
            np.asarray(pts2), np.asarray(pts3), cam, inlier_threshold=ransac_threshold
        )
        inlier_idx = [u for u, keep in zip(used, inliers) if keep]
    else:
        pose, rms = solve_epnp(np.asarray(pts2), np.asarray(pts3), cam)
        inlier_idx = list(used)
    diag = PoseDiagnostics(
        n_points=len(used), rms=rms, used_indices=used, inlier_indices=inlier_idx
    )
    if prev_pose is not None:
        rot_step = np.rad2deg(prev_pose.rotation_angle_to(pose))
        trans_step = prev_pose.translation_distance_to(pose)
        if rot_step > max_rot_step_deg or trans_step > max_trans_step_m:
            diag.flagged = True
            return prev_pose, diag
    return pose, diag
