"""Scale and pose registration with a translation-invariant quaternion Kalman filter.

Generative model: ``s_i = S * (R o_i) + t`` with per-axis scale ``S``,
rotation ``R`` and translation ``t``. Relative vectors ``s_j - s_i`` cancel
``t``; dividing them by ``S`` leaves a pure rotation that is estimated by
sequential Kalman updates on the pseudo-measurement ``H x = 0``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import List, Optional, Tuple

import numpy as np

from .errors import RegistrationError
from .geometry import (
    IDENTITY_QUAT,
    PointCloud,
    compute_aabb,
    quat_angle,
    quat_from_matrix,
    quat_normalize,
    quat_to_matrix,
    skew,
)
from .metrics import nearest_neighbors

SCALE_MODES = ("refine", "once", "fixed")
PAIR_RULES = ("consecutive", "all")


@dataclass(frozen=True)
class TiqfConfig:
    max_iterations: int = 100
    rot_tol_deg: float = 0.1
    trans_tol: float = 1e-4
    sigma_z2: float = 1e-2
    init_cov: float = 1.0
    pair_rule: str = "consecutive"
    # "once": AABB ratio of the raw clouds; "refine": AABB ratio against the
    # currently rotated object, every iteration; "fixed": S = 1
    scale_mode: str = "refine"
    reset_covariance: bool = True
    cov_cap: float = 4.0  # eigenvalue ceiling, relative to init_cov

    def __post_init__(self):
        if self.max_iterations < 1:
            raise RegistrationError("max_iterations must be >= 1")
        if not (self.rot_tol_deg > 0 and self.trans_tol > 0):
            raise RegistrationError("convergence thresholds must be positive")
        if not (self.sigma_z2 > 0 and self.init_cov > 0):
            raise RegistrationError("sigma_z2 and init_cov must be positive")
        if self.pair_rule not in PAIR_RULES:
            raise RegistrationError(f"pair_rule must be one of {PAIR_RULES}")
        if self.scale_mode not in SCALE_MODES:
            raise RegistrationError(f"scale_mode must be one of {SCALE_MODES}")


@dataclass
class FilterState:
    x: np.ndarray
    cov: np.ndarray

    @classmethod
    def initial(cls, q=IDENTITY_QUAT, cov_scale: float = 1.0) -> "FilterState":
        return cls(np.array(q, dtype=np.float64), cov_scale * np.eye(4))


@dataclass
class RegistrationResult:
    S: np.ndarray
    R: np.ndarray  # unit quaternion, scalar first
    t: np.ndarray
    iterations: int
    converged: bool
    history: List[Tuple[int, float, float]] = field(default_factory=list)

    @property
    def matrix(self) -> np.ndarray:
        return quat_to_matrix(self.R)

    def apply(self, points) -> np.ndarray:
        pts = points.points if isinstance(points, PointCloud) else np.asarray(points)
        return self.S * (pts @ self.matrix.T) + self.t


def _pts(cloud) -> np.ndarray:
    return cloud.points if isinstance(cloud, PointCloud) else np.asarray(cloud, dtype=np.float64).reshape(-1, 3)


def estimate_scale(scene, obj) -> np.ndarray:
    """Per-axis ratio of scene to object bounding-box extents."""
    es = compute_aabb(_pts(scene)).extent
    eo = compute_aabb(_pts(obj)).extent
    if np.any(eo <= 0):
        raise RegistrationError(f"object has zero extent on an axis: {eo}")
    return es / eo


def pseudo_measurement_matrix(s_ji, o_ji) -> np.ndarray:
    """``H`` with ``H q = 0`` exactly when ``s_ji = R(q) o_ji``.

    It is the difference of the left-multiplication matrix of ``(0, s_ji)``
    and the right-multiplication matrix of ``(0, o_ji)``.
    """
    s = np.asarray(s_ji, dtype=np.float64)
    o = np.asarray(o_ji, dtype=np.float64)
    d = s - o
    H = np.zeros((4, 4))
    H[0, 1:] = -d
    H[1:, 0] = d
    H[1:, 1:] = skew(s + o)
    return H


def kalman_update(state: FilterState, H: np.ndarray, sigma_z2: float,
                  cov_cap: Optional[float] = None) -> FilterState:
    """Static-model update against the zero pseudo-measurement, then renormalise.

    Renormalising divides the covariance by ``|x|^2``. When the pseudo-
    measurements are mutually inconsistent (noise, wrong scale) this feeds back
    and the covariance grows without bound; ``cov_cap`` clips its eigenvalues.
    """
    x, P = state.x, state.cov
    S = H @ P @ H.T + sigma_z2 * np.eye(4)
    try:
        K = np.linalg.solve(S, H @ P).T
    except np.linalg.LinAlgError as exc:
        raise RegistrationError("innovation covariance is singular") from exc
    x_new = x - K @ (H @ x)
    IKH = np.eye(4) - K @ H
    # Joseph form keeps the covariance symmetric positive semidefinite
    P_new = IKH @ P @ IKH.T + sigma_z2 * (K @ K.T)
    P_new = 0.5 * (P_new + P_new.T)
    n = np.linalg.norm(x_new)
    if not n > 0:
        raise RegistrationError("filter state collapsed to zero")
    P_new = P_new / (n * n)
    if cov_cap is not None and np.trace(P_new) > cov_cap:
        w, V = np.linalg.eigh(P_new)
        P_new = (V * np.clip(w, 0.0, cov_cap)) @ V.T
        P_new = 0.5 * (P_new + P_new.T)
    return FilterState(x_new / n, P_new)


def estimate_translation(scene_pts, obj_pts, R_quat, S) -> np.ndarray:
    """Mean residual ``s_i - S * (R o_i)`` over corresponding pairs."""
    s = _pts(scene_pts)
    o = _pts(obj_pts)
    if len(s) == 0 or len(s) != len(o):
        raise RegistrationError("translation needs a non-empty, equal-length set of pairs")
    return np.mean(s - np.asarray(S) * (o @ quat_to_matrix(R_quat).T), axis=0)


def find_correspondences(scene, obj_transformed) -> np.ndarray:
    """Index into ``obj_transformed`` of the nearest point for each scene point."""
    return nearest_neighbors(_pts(scene), _pts(obj_transformed))[1]


def _pairs(m: int, rule: str):
    if rule == "consecutive":
        return [(i, i + 1) for i in range(m - 1)]
    return [(i, j) for i in range(m) for j in range(i + 1, m)]


def _check_scene(s: np.ndarray) -> None:
    if len(s) < 3:
        raise RegistrationError(f"scene needs at least 3 points, got {len(s)}")
    sv = np.linalg.svd(s - s.mean(axis=0), compute_uv=False)
    if not sv[0] > 0 or sv[1] < 1e-9 * sv[0]:
        raise RegistrationError("degenerate scene: points are collinear or coincident")


def _scale(mode: str, s: np.ndarray, o: np.ndarray, q: np.ndarray, S_once: np.ndarray) -> np.ndarray:
    if mode == "fixed":
        return np.ones(3)
    if mode == "once":
        return S_once
    return estimate_scale(s, o @ quat_to_matrix(q).T)


def _iterate(scene, obj, cfg: TiqfConfig, correspondences, init_q, init_t, solve_rotation):
    s = _pts(scene)
    o = _pts(obj)
    _check_scene(s)
    if len(o) == 0:
        raise RegistrationError("object cloud is empty")
    q = quat_normalize(IDENTITY_QUAT if init_q is None else init_q)
    t = np.zeros(3) if init_t is None else np.asarray(init_t, dtype=np.float64)
    S_once = estimate_scale(s, o) if cfg.scale_mode == "once" else np.ones(3)
    S = _scale(cfg.scale_mode, s, o, q, S_once)
    state = FilterState.initial(q, cfg.init_cov)
    history = []
    converged = False
    it = 0
    for it in range(1, cfg.max_iterations + 1):
        if correspondences is None:
            idx = find_correspondences(s, S * (o @ quat_to_matrix(q).T) + t)
        else:
            idx = np.asarray(correspondences)
        oc = o[idx]
        if cfg.reset_covariance:
            state = FilterState.initial(q, cfg.init_cov)
        else:
            state = FilterState(q.copy(), state.cov)
        q_new, state = solve_rotation(s, oc, S, state)
        S_new = _scale(cfg.scale_mode, s, o, q_new, S_once)
        t_new = estimate_translation(s, oc, q_new, S_new)
        d_rot = np.degrees(quat_angle(q, q_new))
        d_t = float(np.linalg.norm(t_new - t))
        history.append((it, float(d_rot), d_t))
        q, t, S = q_new, t_new, S_new
        if d_rot < cfg.rot_tol_deg and d_t < cfg.trans_tol:
            converged = True
            break
    q = q if q[0] >= 0 else -q
    return RegistrationResult(S, q, t, it, converged, history)


def register(scene, obj, cfg: TiqfConfig = TiqfConfig(), correspondences=None,
             init_q=None, init_t=None) -> RegistrationResult:
    """Estimate ``(S, R, t)`` mapping ``obj`` onto ``scene``.

    ``correspondences`` (object index per scene point) skips the nearest
    neighbour search when known.
    """

    def tiqf_rotation(s, oc, S, state):
        for i, j in _pairs(len(s), cfg.pair_rule):
            s_ji = (s[j] - s[i]) / S
            o_ji = oc[j] - oc[i]
            if not np.any(s_ji) and not np.any(o_ji):
                continue
            state = kalman_update(state, pseudo_measurement_matrix(s_ji, o_ji), cfg.sigma_z2,
                                  cfg.cov_cap * cfg.init_cov)
        return state.x.copy(), state

    return _iterate(scene, obj, cfg, correspondences, init_q, init_t, tiqf_rotation)


def kabsch(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Rotation matrix minimising ``sum |R a_i + t - b_i|^2``."""
    ac = a - a.mean(axis=0)
    bc = b - b.mean(axis=0)
    U, _, Vt = np.linalg.svd(ac.T @ bc)
    D = np.diag([1.0, 1.0, np.sign(np.linalg.det(Vt.T @ U.T)) or 1.0])
    return Vt.T @ D @ U.T


def icp_baseline(scene, obj, cfg: TiqfConfig = TiqfConfig(), correspondences=None,
                 init_q=None, init_t=None) -> RegistrationResult:
    """Point-to-point ICP with a closed-form SVD alignment per iteration."""

    def svd_rotation(s, oc, S, state):
        q = quat_from_matrix(kabsch(oc, s / S))
        return q, FilterState(q, state.cov)

    return _iterate(scene, obj, cfg, correspondences, init_q, init_t, svd_rotation)


RESULT_COLUMNS = ("object", "policy", "n_points", "sx", "sy", "sz", "qw", "qx", "qy", "qz",
                  "tx", "ty", "tz", "iterations", "adi_error")


def result_row(obj_name: str, policy: str, n_points: int, res: RegistrationResult,
               adi: float) -> List[str]:
    return [obj_name, policy, str(n_points), *(f"{v:.9g}" for v in res.S), *(f"{v:.9g}" for v in res.R),
            *(f"{v:.9g}" for v in res.t), str(res.iterations), f"{adi:.9g}"]
