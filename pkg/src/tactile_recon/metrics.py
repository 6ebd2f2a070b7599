"""Distances between point clouds and the symmetric-aware pose error."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy.optimize import linear_sum_assignment
from scipy.spatial import cKDTree

from .errors import MetricError
from .geometry import PointCloud, quat_to_matrix
from .rng import make_rng

KDTREE_THRESHOLD = 256
EMD_MAX_POINTS = 512
_PAIR_BUDGET = 2_000_000


def _as_points(cloud) -> np.ndarray:
    pts = cloud.points if isinstance(cloud, PointCloud) else np.asarray(cloud, dtype=np.float64).reshape(-1, 3)
    if len(pts) == 0:
        raise MetricError("point cloud must be non-empty")
    return pts


def nearest_brute(query: np.ndarray, ref: np.ndarray):
    """Exhaustive nearest neighbour; ties resolve to the lowest reference index."""
    dist = np.empty(len(query))
    idx = np.empty(len(query), dtype=np.int64)
    block = max(1, _PAIR_BUDGET // max(1, len(ref)))
    for s in range(0, len(query), block):
        diff = query[s:s + block, None, :] - ref[None, :, :]
        d = np.sqrt(np.einsum("ijk,ijk->ij", diff, diff))
        j = np.argmin(d, axis=1)
        idx[s:s + block] = j
        dist[s:s + block] = d[np.arange(len(j)), j]
    return dist, idx


def nearest_kdtree(query: np.ndarray, ref: np.ndarray):
    tree = cKDTree(ref)
    k = min(4, len(ref))
    d, i = tree.query(query, k=k)
    if k == 1:
        return d, i.astype(np.int64)
    # among equally-near candidates prefer the lowest index
    best = d[:, :1]
    out = np.where(d <= best, i, np.iinfo(np.int64).max).min(axis=1).astype(np.int64)
    # rows tied beyond k: gather every reference point in the ball and break the tie exactly
    for r in np.flatnonzero(d[:, -1] <= best[:, 0]):
        cand = np.asarray(tree.query_ball_point(query[r], best[r, 0] * (1 + 1e-12) + 1e-300))
        dd = np.linalg.norm(ref[cand] - query[r], axis=1)
        out[r] = cand[dd <= dd.min()].min()
    return best[:, 0], out


def nearest_neighbors(query, ref):
    """``(distances, indices)`` of the nearest ``ref`` point for every ``query`` point."""
    q = _as_points(query)
    r = _as_points(ref)
    if len(r) > KDTREE_THRESHOLD or len(q) > KDTREE_THRESHOLD:
        return nearest_kdtree(q, r)
    return nearest_brute(q, r)


def directed_distances(a, b) -> np.ndarray:
    return nearest_neighbors(a, b)[0]


def chamfer_distance(a, b) -> float:
    """Mean nearest-neighbour distance a->b plus b->a (plain, not squared)."""
    return float(directed_distances(a, b).mean() + directed_distances(b, a).mean())


def hausdorff_distance(a, b) -> float:
    return float(max(directed_distances(a, b).max(), directed_distances(b, a).max()))


def earth_mover_distance(a, b, seed: int = 0) -> float:
    """Exact mean matched distance under the optimal bijection.

    When sizes differ the larger cloud is uniformly subsampled (seeded) to the
    size of the smaller one first.
    """
    pa = _as_points(a)
    pb = _as_points(b)
    n = min(len(pa), len(pb))
    if n > EMD_MAX_POINTS:
        raise MetricError(
            f"exact EMD size limit exceeded ({n} > {EMD_MAX_POINTS}); subsample the clouds first"
        )
    rng = make_rng(seed, "emd")
    if len(pa) > n:
        pa = pa[np.sort(rng.choice(len(pa), n, replace=False))]
    if len(pb) > n:
        pb = pb[np.sort(rng.choice(len(pb), n, replace=False))]
    cost = np.linalg.norm(pa[:, None, :] - pb[None, :, :], axis=2)
    rows, cols = linear_sum_assignment(cost)
    return float(cost[rows, cols].mean())


@dataclass(frozen=True)
class PoseGT:
    R_gt: np.ndarray
    t_gt: np.ndarray
    R_est: np.ndarray
    t_est: np.ndarray
    S_est: Optional[np.ndarray] = None  # per-axis scale of the estimate, applied after rotation


def adi_error(model, poses: PoseGT) -> float:
    """Average distance of model points with indistinguishable views.

    Both the ground-truth and estimated poses act on the same model cloud; each
    ground-truth-posed point is matched to its closest estimate-posed point.
    """
    pts = _as_points(model)
    Rg = quat_to_matrix(poses.R_gt)
    Re = quat_to_matrix(poses.R_est)
    gt = pts @ Rg.T + np.asarray(poses.t_gt, dtype=np.float64)
    est = pts @ Re.T
    if poses.S_est is not None:
        est = est * np.asarray(poses.S_est, dtype=np.float64)
    est = est + np.asarray(poses.t_est, dtype=np.float64)
    return float(nearest_neighbors(gt, est)[0].mean())
