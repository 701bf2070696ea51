"""SE(3) poses and timestamped pose trajectories.

Rotations are 3x3 orthonormal matrices, translations are meters. Trajectory
files are CSV with columns ``t_us, tx, ty, tz, qw, qx, qy, qz`` (unit
quaternion, Hamilton convention, scalar first).
"""

from __future__ import annotations

import io
from dataclasses import dataclass

import numpy as np
from scipy.spatial.transform import Rotation, Slerp

# Max tolerated deviation of R^T R from identity / det(R) from +1.
ORTHONORMAL_TOL = 1e-9

TRAJECTORY_HEADER = "t_us,tx,ty,tz,qw,qx,qy,qz"


def orthonormalize(matrix: np.ndarray) -> np.ndarray:
    """Project a near-rotation matrix onto SO(3) (polar decomposition)."""
    u, _, vt = np.linalg.svd(np.asarray(matrix, dtype=float))
    r = u @ vt
    if np.linalg.det(r) < 0:
        u = u.copy()
        u[:, -1] = -u[:, -1]
        r = u @ vt
    return r


def rotation_angle(matrix: np.ndarray) -> float:
    """Geodesic angle of a rotation matrix in radians.

    The cosine is the clamped trace term (so trace = 3 +- eps never yields
    NaN); the sine comes from the skew-symmetric part. Evaluating the angle
    as atan2(sin, cos) is the numerically stable form of the arccos of the
    trace: arccos alone floors near-identity angles at ~1e-8 rad.
    """
    m = np.asarray(matrix)
    c = np.clip((np.trace(m) - 1.0) / 2.0, -1.0, 1.0)
    s = 0.5 * np.sqrt(
        (m[2, 1] - m[1, 2]) ** 2 + (m[0, 2] - m[2, 0]) ** 2 + (m[1, 0] - m[0, 1]) ** 2
    )
    return float(np.arctan2(s, c))


@dataclass(frozen=True)
class PoseSE3:
    """Rigid transform: x_out = rotation @ x_in + translation."""

    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        r = np.asarray(self.rotation, dtype=float).reshape(3, 3)
        t = np.asarray(self.translation, dtype=float).reshape(3)
        err = np.abs(r.T @ r - np.eye(3)).max()
        if err > ORTHONORMAL_TOL:
            raise ValueError(f"rotation is not orthonormal (|R^T R - I| = {err:.3e})")
        if abs(np.linalg.det(r) - 1.0) > ORTHONORMAL_TOL:
            raise ValueError("rotation determinant is not +1")
        r.flags.writeable = False
        t.flags.writeable = False
        object.__setattr__(self, "rotation", r)
        object.__setattr__(self, "translation", t)

    @staticmethod
    def identity() -> "PoseSE3":
        return PoseSE3(np.eye(3), np.zeros(3))

    @staticmethod
    def from_matrix(matrix: np.ndarray) -> "PoseSE3":
        m = np.asarray(matrix, dtype=float).reshape(4, 4)
        return PoseSE3(m[:3, :3], m[:3, 3])

    @staticmethod
    def from_quat_wxyz(quat: np.ndarray, translation: np.ndarray) -> "PoseSE3":
        rot = Rotation.from_quat(np.asarray(quat, dtype=float), scalar_first=True)
        return PoseSE3(rot.as_matrix(), translation)

    def quat_wxyz(self) -> np.ndarray:
        q = Rotation.from_matrix(self.rotation).as_quat(scalar_first=True)
        if q[0] < 0:  # canonical sign for reproducible files
            q = -q
        return q

    def matrix(self) -> np.ndarray:
        m = np.eye(4)
        m[:3, :3] = self.rotation
        m[:3, 3] = self.translation
        return m

    def inverse(self) -> "PoseSE3":
        rt = self.rotation.T
        return PoseSE3(rt, -rt @ self.translation)

    def compose(self, other: "PoseSE3") -> "PoseSE3":
        """self applied after other: (self @ other) x = self(other(x))."""
        return PoseSE3(
            self.rotation @ other.rotation,
            self.rotation @ other.translation + self.translation,
        )

    def __matmul__(self, other: "PoseSE3") -> "PoseSE3":
        return self.compose(other)

    def transform(self, points: np.ndarray) -> np.ndarray:
        """Apply to an (n, 3) array of points."""
        pts = np.asarray(points, dtype=float)
        return pts @ self.rotation.T + self.translation

    def rotation_angle_to(self, other: "PoseSE3") -> float:
        return rotation_angle(self.rotation.T @ other.rotation)

    def translation_distance_to(self, other: "PoseSE3") -> float:
        return float(np.linalg.norm(self.translation - other.translation))


class PoseTrajectory:
    """Timestamped pose sequence with strictly increasing microsecond stamps.

    Interpolation is linear on translation and spherical-linear on rotation.
    """

    def __init__(self, timestamps_us, poses):
        t = np.asarray(timestamps_us, dtype=np.int64)
        if t.ndim != 1 or t.size == 0:
            raise ValueError("timestamps must be a non-empty 1-d array")
        if t.size > 1 and not np.all(np.diff(t) > 0):
            raise ValueError("timestamps must be strictly increasing")
        if isinstance(poses, Rotation):
            raise TypeError("poses must be PoseSE3 instances or (rotations, translations)")
        if isinstance(poses, tuple):
            rotations, translations = poses
        else:
            poses = list(poses)
            if len(poses) != t.size:
                raise ValueError("timestamps and poses must have the same length")
            rotations = Rotation.from_matrix(np.stack([p.rotation for p in poses]))
            translations = np.stack([p.translation for p in poses])
        self.timestamps_us = t
        self._rotations = rotations
        self._translations = np.asarray(translations, dtype=float).reshape(t.size, 3)
        self._slerp = None

    def __len__(self) -> int:
        return self.timestamps_us.size

    def pose(self, i: int) -> PoseSE3:
        return PoseSE3(self._rotations[i].as_matrix(), self._translations[i])

    def __iter__(self):
        for i in range(len(self)):
            yield int(self.timestamps_us[i]), self.pose(i)

    @property
    def t_start(self) -> int:
        return int(self.timestamps_us[0])

    @property
    def t_end(self) -> int:
        return int(self.timestamps_us[-1])

    def _interp(self, t_us: np.ndarray):
        t_us = np.asarray(t_us, dtype=np.int64)
        if t_us.min() < self.t_start or t_us.max() > self.t_end:
            raise ValueError(
                f"query times outside trajectory range [{self.t_start}, {self.t_end}] us"
            )
        if len(self) == 1:
            n = t_us.size
            return Rotation.from_matrix(np.repeat(self._rotations.as_matrix(), n, axis=0)), \
                np.repeat(self._translations, n, axis=0)
        if self._slerp is None:
            self._slerp = Slerp(self.timestamps_us.astype(float), self._rotations)
        rots = self._slerp(t_us.astype(float))
        trans = np.column_stack([
            np.interp(t_us, self.timestamps_us, self._translations[:, k]) for k in range(3)
        ])
        return rots, trans

    def pose_at(self, t_us: int) -> PoseSE3:
        rots, trans = self._interp(np.asarray([t_us]))
        return PoseSE3(rots.as_matrix()[0], trans[0])

    def resample(self, t_us) -> "PoseTrajectory":
        t_us = np.asarray(t_us, dtype=np.int64)
        if np.array_equal(t_us, self.timestamps_us):
            return self
        rots, trans = self._interp(t_us)
        return PoseTrajectory(t_us, (rots, trans))

    def transform_left(self, pose: PoseSE3) -> "PoseTrajectory":
        """Left-multiply every sample by a constant pose."""
        rots = Rotation.from_matrix(pose.rotation) * self._rotations
        trans = self._translations @ pose.rotation.T + pose.translation
        return PoseTrajectory(self.timestamps_us, (rots, trans))

    def translations(self) -> np.ndarray:
        return self._translations.copy()

    def rotation_matrices(self) -> np.ndarray:
        m = self._rotations.as_matrix()
        return m.reshape(len(self), 3, 3)


def write_trajectory(path, traj: PoseTrajectory) -> None:
    buf = io.StringIO()
    buf.write(TRAJECTORY_HEADER + "\n")
    for t, pose in traj:
        q = pose.quat_wxyz()
        tr = pose.translation
        fields = [f"{v:.17g}" for v in (*tr, *q)]
        buf.write(f"{t}," + ",".join(fields) + "\n")
    with open(path, "w") as fh:
        fh.write(buf.getvalue())


def read_trajectory(path) -> PoseTrajectory:
    times = []
    quats = []
    trans = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            if line.replace(" ", "").startswith("t_us,"):
                continue
            parts = line.split(",")
            if len(parts) != 8:
                raise ValueError(f"{path}: line {lineno}: expected 8 fields, got {len(parts)}")
            try:
                values = [float(p) for p in parts]
            except ValueError as exc:
                raise ValueError(f"{path}: line {lineno}: {exc}") from None
            times.append(int(values[0]))
            trans.append(values[1:4])
            quats.append(values[4:8])
    if not times:
        raise ValueError(f"{path}: empty trajectory file")
    rots = Rotation.from_quat(np.asarray(quats), scalar_first=True)
    return PoseTrajectory(np.asarray(times), (rots, np.asarray(trans)))
