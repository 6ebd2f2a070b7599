"""Building blocks of the comparison protocol: reconstruction, distances and pose trials."""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass
from typing import Dict, Optional

import numpy as np

from .. import gpis
from ..autoencoder.model import ModelParams, reconstruct as actor_forward
from ..errors import GeometryError, GpisError, ModelError
from ..geometry import Aabb, PointCloud, compute_aabb, denormalize, normalize_to_unit_cube, quat_conjugate, \
    quat_rotate, quat_to_matrix, random_quaternion, random_subset
from ..metrics import PoseGT, adi_error, chamfer_distance, earth_mover_distance, hausdorff_distance
from ..rng import make_rng
from ..tiqf import RegistrationResult, TiqfConfig, icp_baseline, register

log = logging.getLogger(__name__)

POSE_METHODS = {"tiqf": register, "icp": icp_baseline}


def actor_reconstruct(mp: ModelParams, cloud: PointCloud, n_min: int = 1) -> PointCloud:
    """Complete a world-frame tactile cloud and map the result back to the world frame."""
    if len(cloud) < n_min:
        raise ModelError(f"reconstruction needs at least N_min = {n_min} points, got {len(cloud)}")
    norm, scale, offset = normalize_to_unit_cube(PointCloud(cloud.points))
    return denormalize(actor_forward(mp, norm, n_min), scale, offset)


def gpis_workspace(cloud: PointCloud, margin: float) -> Aabb:
    box = compute_aabb(cloud)
    return Aabb(box.min - margin, box.max + margin)


def gpis_reconstruct(cloud: PointCloud, cfg: gpis.GpisConfig, margin: float,
                     max_variance: Optional[float] = None) -> PointCloud:
    """GPIS surface over the tactile bounding box grown by ``margin`` (empty if nothing is found)."""
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        return gpis.reconstruct(cloud, cfg, gpis_workspace(cloud, margin), max_variance)


def distances(pred: PointCloud, gt: PointCloud, emd_points: int, seed: int) -> Dict[str, float]:
    """CD, HD and EMD between a reconstruction and the ground-truth cloud (NaN if ``pred`` is empty)."""
    if len(pred) == 0:
        return {"cd": float("nan"), "hd": float("nan"), "emd": float("nan")}
    a = pred if len(pred) <= emd_points else random_subset(pred, emd_points, seed)
    b = gt if len(gt) <= emd_points else random_subset(gt, emd_points, seed)
    return {"cd": chamfer_distance(pred, gt), "hd": hausdorff_distance(pred, gt),
            "emd": earth_mover_distance(a, b, seed)}


@dataclass
class PoseTrial:
    result: RegistrationResult
    adi: float
    q_true: np.ndarray
    t_true: np.ndarray


def perturbation(rng: np.random.Generator, max_angle_deg: float, max_offset: float):
    """Random rigid motion with rotation angle <= ``max_angle_deg`` and translation norm <= ``max_offset``."""
    q = random_quaternion(rng, np.radians(max_angle_deg))
    d = rng.normal(size=3)
    t = d / np.linalg.norm(d) * rng.uniform(0.0, max_offset)
    return q, t


def pose_trial(scene: np.ndarray, model: np.ndarray, eval_points: np.ndarray, method: str,
               cfg: TiqfConfig, rng: np.random.Generator, max_angle_deg: float,
               max_offset: float) -> PoseTrial:
    """Register a perturbed copy of ``model`` to ``scene`` and score the recovered pose by ADI.

    ``model`` and ``eval_points`` share the scene frame. Both are moved by a
    random perturbation ``P``; the registration has to undo it, so the true
    pose is ``P^-1`` and ADI is measured on ``P(eval_points)``.
    """
    q, t = perturbation(rng, max_angle_deg, max_offset)
    R = quat_to_matrix(q)
    moved = model @ R.T + t
    q_true = quat_conjugate(q)
    t_true = -quat_rotate(q_true, t)
    res = POSE_METHODS[method](scene, moved, cfg)
    adi = adi_error(eval_points @ R.T + t, PoseGT(q_true, t_true, res.R, res.t, res.S))
    return PoseTrial(res, adi, q_true, t_true)


def scene_subset(cloud: PointCloud, n: int, seed: int) -> np.ndarray:
    if len(cloud) <= n:
        return cloud.points.copy()
    return random_subset(cloud, n, seed).points


def tiqf_config(section: dict, scale_mode: str) -> TiqfConfig:
    return TiqfConfig(max_iterations=section["max_iterations"], rot_tol_deg=section["rot_tol_deg"],
                      trans_tol=section["trans_tol"], sigma_z2=section["sigma_z2"],
                      init_cov=section["init_cov"], pair_rule=section["pair_rule"], scale_mode=scale_mode)


def gpis_config(section: dict) -> gpis.GpisConfig:
    return gpis.GpisConfig(nu=section["nu"], length_scale=section["length_scale"], sigma_f2=section["sigma_f2"],
                           sigma_n2=section["sigma_n2"], d_off=section["d_off"], resolution=section["resolution"])


def safe_gpis(cloud: PointCloud, section: dict) -> PointCloud:
    try:
        return gpis_reconstruct(cloud, gpis_config(section), section["margin"], section["max_variance"])
    except (GpisError, GeometryError) as exc:
        log.warning("GPIS failed: %s", exc)
        return PointCloud(np.zeros((0, 3)))


def trial_rng(seed: int, *keys) -> np.random.Generator:
    return make_rng(seed, "pose", *keys)
