"""Density-guided keypoint tracking over time-surface windows with EKF smoothing.

Each keypoint is classified by the polarity balance of its local patch, then
matched either by a mixed-polarity score (geometric mean of the two polarity
responses, the negative one sampled at the point-reflected offset, plus a
weighted density term) or by a dual-scale single-polarity search (big-window
integrated response under a small-window local-max constraint). A constant-
velocity Kalman filter smooths the matched positions.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field, replace
from enum import Enum

import numpy as np
from scipy import ndimage

from .events import TimeSurfacePair


class PolarityClass(Enum):
    SINGLE_POSITIVE = "single_positive"
    SINGLE_NEGATIVE = "single_negative"
    MIXED = "mixed"
    INSUFFICIENT = "insufficient"


@dataclass(frozen=True)
class TrackerParams:
    eta: float = 0.8                 # polarity-ratio threshold, (0.5, 1]
    beta: float = 0.5                # density weight in the mixed score
    alpha: float = 0.3               # blend weight on the previous position
    search_radius: int = 12          # half-extent of the local search patch
    big_window: int = 7              # integration window (odd side length)
    small_window: int = 3            # local-max window (odd side length)
    process_noise: float = 0.01      # EKF velocity-block variance, px^2
    measurement_noise: float = 1.0   # EKF observation variance, px^2
    min_events: int = 6              # below this the patch is "insufficient"
    max_lost: int = 5                # consecutive invalid steps before death
    init_position_var: float = 1.0
    init_velocity_var: float = 25.0

    def __post_init__(self):
        if not (0.5 < self.eta <= 1.0):
            raise ValueError("eta must lie in (0.5, 1]")
        if self.beta < 0:
            raise ValueError("beta must be non-negative")
        if not (0.0 <= self.alpha <= 1.0):
            raise ValueError("alpha must lie in [0, 1]")
        if self.big_window % 2 == 0 or self.small_window % 2 == 0:
            raise ValueError("windows must have odd side lengths")
        if not (1 <= self.small_window <= self.big_window <= 2 * self.search_radius + 1):
            raise ValueError("need small_window <= big_window <= 2*search_radius + 1")
        if self.process_noise <= 0 or self.measurement_noise <= 0:
            raise ValueError("noise variances must be positive")


def classify_polarity(
    surfaces: TimeSurfacePair, eta: float, min_events: int = 6
) -> PolarityClass:
    """Classify a local patch by its polarity balance.

    Patches with fewer than ``min_events`` events are INSUFFICIENT regardless
    of balance; otherwise a ratio above eta in either polarity makes the
    point single-polarity, and anything else is MIXED.
    """
    n_pos = int(surfaces.t_pos.sum())
    n_neg = int(surfaces.t_neg.sum())
    total = n_pos + n_neg
    if total < min_events:
        return PolarityClass.INSUFFICIENT
    if n_pos / total > eta:
        return PolarityClass.SINGLE_POSITIVE
    if n_neg / total > eta:
        return PolarityClass.SINGLE_NEGATIVE
    return PolarityClass.MIXED


def match_mixed(
    surfaces: TimeSurfacePair, params: TrackerParams
) -> tuple[tuple[float, float], float] | None:
    """Best candidate in a mixed-polarity patch, or None when all scores are zero.

    Score per cell: sqrt(T+(x, y) * T-(x', y')) + beta * D(x, y), with
    (x', y') the point reflection of the candidate through the patch center.
    Ties break to the smallest row-major index. Returned point is in full
    sensor coordinates.
    """
    tp = surfaces.t_pos
    tn_mirror = surfaces.t_neg[::-1, ::-1]
    score = np.sqrt((tp * tn_mirror).astype(float)) + params.beta * surfaces.density
    if not np.any(score > 0.0):
        return None
    flat = int(np.argmax(score))
    y, x = np.unravel_index(flat, score.shape)
    return (
        (float(x + surfaces.origin[0]), float(y + surfaces.origin[1])),
        float(score.ravel()[flat]),
    )


def _box_sum(raster: np.ndarray, size: int) -> np.ndarray:
    kernel = np.ones((size, size), dtype=raster.dtype)
    return ndimage.correlate(raster, kernel, mode="constant", cval=0)


def find_density_peak(
    raster: np.ndarray, big_window: int, small_window: int
) -> tuple[tuple[int, int], float] | None:
    """Dual-scale peak search on a count raster (local patch coordinates).

    Feasible cells are strict local maxima of the response over the small
    window (ties allowed) with a positive response; among them the one with
    the largest big-window integrated response wins, row-major on ties.
    Returns ((x, y), score) or None when no cell is feasible.
    """
    r = np.asarray(raster)
    local_max = ndimage.maximum_filter(r, size=small_window, mode="constant", cval=0)
    feasible = (r == local_max) & (r > 0)
    if not feasible.any():
        return None
    integrated = _box_sum(r.astype(np.int64), big_window)
    masked = np.where(feasible, integrated, -1)
    flat = int(np.argmax(masked))
    y, x = np.unravel_index(flat, r.shape)
    return (int(x), int(y)), float(integrated[y, x])


def match_single(
    surfaces: TimeSurfacePair, polarity: PolarityClass, params: TrackerParams
) -> tuple[tuple[float, float], float] | None:
    """Dual-scale search on the dominant single-polarity surface."""
    if polarity == PolarityClass.SINGLE_POSITIVE:
        raster = surfaces.t_pos
    elif polarity == PolarityClass.SINGLE_NEGATIVE:
        raster = surfaces.t_neg
    else:
        raise ValueError("match_single needs a single-polarity classification")
    found = find_density_peak(raster, params.big_window, params.small_window)
    if found is None:
        return None
    (x, y), score = found
    return (float(x + surfaces.origin[0]), float(y + surfaces.origin[1])), score


# ---------------------------------------------------------------------------
# Constant-velocity Kalman filter (EKF-style hooks for nonlinear models)
# ---------------------------------------------------------------------------

COVARIANCE_EIG_FLOOR = 1e-9


class ConstantVelocityEkf:
    """Kalman filter on (x, y, vx, vy) with a one-window time step.

    The transition/observation methods and their Jacobians are ordinary
    methods so a nonlinear motion model can subclass and override them; with
    the default linear model this reduces to a standard Kalman filter.
    """

    def __init__(self, process_noise: float, measurement_noise: float):
        self._f = np.array([
            [1.0, 0.0, 1.0, 0.0],
            [0.0, 1.0, 0.0, 1.0],
            [0.0, 0.0, 1.0, 0.0],
            [0.0, 0.0, 0.0, 1.0],
        ])
        self._h = np.array([
            [1.0, 0.0, 0.0, 0.0],
            [0.0, 1.0, 0.0, 0.0],
        ])
        self.q = np.diag([0.0, 0.0, process_noise, process_noise])
        self.r = measurement_noise * np.eye(2)

    def transition(self, state: np.ndarray) -> np.ndarray:
        return self._f @ state

    def transition_jacobian(self, state: np.ndarray) -> np.ndarray:
        return self._f

    def observation(self, state: np.ndarray) -> np.ndarray:
        return self._h @ state

    def observation_jacobian(self, state: np.ndarray) -> np.ndarray:
        return self._h

    def predict(self, state: np.ndarray, cov: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        f = self.transition_jacobian(state)
        return self.transition(state), f @ cov @ f.T + self.q

    def update(
        self, state: np.ndarray, cov: np.ndarray, z: np.ndarray
    ) -> tuple[np.ndarray, np.ndarray]:
        h = self.observation_jacobian(state)
        innovation = np.asarray(z, dtype=float) - self.observation(state)
        s = h @ cov @ h.T + self.r
        gain = np.linalg.solve(s.T, (cov @ h.T).T).T
        new_state = state + gain @ innovation
        a = np.eye(state.size) - gain @ h
        new_cov = a @ cov @ a.T + gain @ self.r @ gain.T  # Joseph form
        new_cov = _repair_covariance(new_cov)
        return new_state, new_cov


def _repair_covariance(cov: np.ndarray) -> np.ndarray:
    cov = (cov + cov.T) / 2.0
    eigvals = np.linalg.eigvalsh(cov)
    if eigvals[0] < -COVARIANCE_EIG_FLOOR:
        warnings.warn(
            f"covariance lost positive semidefiniteness (min eig {eigvals[0]:.3e}); clamping",
            RuntimeWarning,
        )
        vals, vecs = np.linalg.eigh(cov)
        cov = (vecs * np.clip(vals, COVARIANCE_EIG_FLOOR, None)) @ vecs.T
        cov = (cov + cov.T) / 2.0
    return cov


@dataclass
class KeypointState:
    """Tracked keypoint: semantic index, EKF state, and reported history.

    ``state`` is the filter's (x, y, vx, vy) in pixels and pixels/window.
    ``position`` is the reported output: the alpha-blend of the previous
    output with the filtered position. The filter runs on raw matches and
    stays responsive; the blend only smooths what is reported downstream.
    """

    index: int
    state: np.ndarray
    covariance: np.ndarray
    position: np.ndarray = None
    trajectory: list = field(default_factory=list)
    alive: bool = True
    lost_count: int = 0
    last_class: PolarityClass | None = None
    last_score: float = 0.0
    last_valid: bool = False

    def __post_init__(self):
        if self.position is None:
            self.position = self.state[:2].copy()

    @classmethod
    def init(cls, index: int, x: float, y: float, params: TrackerParams) -> "KeypointState":
        state = np.array([x, y, 0.0, 0.0])
        cov = np.diag([
            params.init_position_var, params.init_position_var,
            params.init_velocity_var, params.init_velocity_var,
        ])
        return cls(index=index, state=state, covariance=cov)


def ekf_predict(state: KeypointState, params: TrackerParams) -> KeypointState:
    filt = ConstantVelocityEkf(params.process_noise, params.measurement_noise)
    x, p = filt.predict(state.state, state.covariance)
    return replace(state, state=x, covariance=p)


def ekf_update(state: KeypointState, z, params: TrackerParams) -> KeypointState:
    filt = ConstantVelocityEkf(params.process_noise, params.measurement_noise)
    x, p = filt.update(state.state, state.covariance, z)
    return replace(state, state=x, covariance=p)


def _coast(kp: KeypointState, predicted: KeypointState, params: TrackerParams,
           t_us: int, cls: PolarityClass | None) -> KeypointState:
    """No usable observation: fall back to the EKF prediction."""
    lost = kp.lost_count + 1
    pos = predicted.state[:2].copy()
    out = replace(
        predicted,
        position=pos,
        trajectory=kp.trajectory + [(t_us, float(pos[0]), float(pos[1]))],
        alive=lost <= params.max_lost,
        lost_count=lost,
        last_class=cls,
        last_score=0.0,
        last_valid=False,
    )
    return out


def track_step(
    states: list[KeypointState],
    surfaces: list[TimeSurfacePair | None],
    params: TrackerParams,
    t_us: int,
) -> list[KeypointState]:
    """Advance every keypoint through one time-surface window.

    ``surfaces`` holds one local patch per keypoint (None when unavailable),
    aligned with ``states`` and centered on the caller's predicted positions.
    Per keypoint: EKF predict, polarity classification, matching (combined-
    polarity dual-scale peak for single-polarity patches, score search for
    mixed ones), EKF update, then the blended output
    alpha * previous + (1 - alpha) * filtered, accepted only inside the
    patch; otherwise the previous position is retained. Deterministic.
    """
    if len(states) != len(surfaces):
        raise ValueError("states and surfaces must be aligned")
    out = []
    for kp, surf in zip(states, surfaces):
        if not kp.alive:
            out.append(replace(kp, last_valid=False, last_class=None, last_score=0.0))
            continue
        if surf is None:
            lost = kp.lost_count + 1
            out.append(replace(
                kp,
                position=kp.position.copy(),
                alive=lost <= params.max_lost,
                lost_count=lost,
                last_class=None,
                last_score=0.0,
                last_valid=False,
                trajectory=kp.trajectory + [(t_us, float(kp.position[0]), float(kp.position[1]))],
            ))
            continue

        prev_xy = kp.position.copy()
        predicted = ekf_predict(kp, params)
        cls = classify_polarity(surf, params.eta, params.min_events)

        if cls == PolarityClass.INSUFFICIENT:
            out.append(_coast(kp, predicted, params, t_us, cls))
            continue
        if cls == PolarityClass.MIXED:
            match = match_mixed(surf, params)
        else:
            found = find_density_peak(
                surf.t_pos + surf.t_neg, params.big_window, params.small_window
            )
            if found is None:
                match = None
            else:
                (px, py), score = found
                match = ((float(px + surf.origin[0]), float(py + surf.origin[1])), score)
        if match is None:
            out.append(_coast(kp, predicted, params, t_us, cls))
            continue

        best_pt, score = match
        updated = ekf_update(predicted, np.asarray(best_pt), params)
        blended = params.alpha * prev_xy + (1.0 - params.alpha) * updated.state[:2]

        h, w = surf.shape
        center = np.array([
            surf.origin[0] + (w - 1) / 2.0,
            surf.origin[1] + (h - 1) / 2.0,
        ])
        half = np.array([(w - 1) / 2.0, (h - 1) / 2.0])
        if np.all(np.abs(blended - center) <= half):
            new_pos = blended
        else:
            new_pos = prev_xy
        out.append(replace(
            updated,
            position=new_pos,
            trajectory=kp.trajectory + [(t_us, float(new_pos[0]), float(new_pos[1]))],
            alive=True,
            lost_count=0,
            last_class=cls,
            last_score=score,
            last_valid=True,
        ))
    return out
