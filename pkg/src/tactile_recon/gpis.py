"""Gaussian-process implicit surface from sparse contacts with normals.

The signed field is 0 on contacts, +1 just outside and -1 just inside; the
surface is read off as sign crossings of the predictive mean on a grid.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass
from typing import Optional, Sequence, Tuple

import numpy as np
from scipy.linalg import LinAlgError, cho_factor, cho_solve, solve_triangular

from .errors import GpisError
from .geometry import Aabb, PointCloud

_CHUNK = 4096


@dataclass(frozen=True)
class GpisConfig:
    nu: float = 1.5
    length_scale: Optional[float] = None  # None: 0.1 x largest workspace extent
    sigma_f2: float = 1.0
    sigma_n2: float = 1e-4
    d_off: float = 0.01
    resolution: float = 0.01

    def __post_init__(self):
        if self.nu not in (1.5, 2.5):
            raise GpisError("Matern smoothness nu must be 1.5 or 2.5")
        for name in ("sigma_f2", "sigma_n2", "d_off", "resolution"):
            if not getattr(self, name) > 0:
                raise GpisError(f"{name} must be positive")
        if self.length_scale is not None and not self.length_scale > 0:
            raise GpisError("length_scale must be positive")

    def resolved_length_scale(self, workspace: Optional[Aabb] = None) -> float:
        if self.length_scale is not None:
            return float(self.length_scale)
        if workspace is None:
            raise GpisError("length_scale unset and no workspace to derive it from")
        return 0.1 * float(workspace.extent.max())


def matern(r, length_scale: float, sigma_f2: float = 1.0, nu: float = 1.5):
    """Matern covariance of distance ``r`` for ``nu`` in {3/2, 5/2}."""
    r = np.asarray(r, dtype=np.float64)
    if nu == 1.5:
        a = np.sqrt(3.0) * r / length_scale
        return sigma_f2 * (1.0 + a) * np.exp(-a)
    if nu == 2.5:
        a = np.sqrt(5.0) * r / length_scale
        return sigma_f2 * (1.0 + a + a * a / 3.0) * np.exp(-a)
    raise GpisError(f"unsupported Matern smoothness {nu}")


def _dist(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    d2 = (a * a).sum(1)[:, None] + (b * b).sum(1)[None, :] - 2.0 * a @ b.T
    return np.sqrt(np.maximum(d2, 0.0))


@dataclass
class GpisModel:
    X: np.ndarray
    y: np.ndarray
    chol: np.ndarray  # lower-triangular factor of K + sigma_n2 I
    alpha: np.ndarray
    length_scale: float
    config: GpisConfig

    def kernel(self, a, b):
        return matern(_dist(a, b), self.length_scale, self.config.sigma_f2, self.config.nu)


def build_training_set(contacts, cfg: GpisConfig) -> Tuple[np.ndarray, np.ndarray]:
    """Three targets per contact: 0 on it, +1 at ``+d_off n``, -1 at ``-d_off n``.

    ``contacts`` is a :class:`PointCloud` with normals or a sequence of objects
    with ``position`` and ``normal`` attributes.
    """
    if isinstance(contacts, PointCloud):
        if contacts.normals is None:
            raise GpisError("contacts need normals")
        p, n = contacts.points, contacts.normals
    else:
        if any(getattr(c, "normal", None) is None for c in contacts):
            raise GpisError("contacts need normals")
        p = np.array([c.position for c in contacts], dtype=np.float64).reshape(-1, 3)
        n = np.array([c.normal for c in contacts], dtype=np.float64).reshape(-1, 3)
    if len(p) < 4:
        raise GpisError(f"need at least 4 contacts, got {len(p)}")
    X = np.concatenate([p, p + cfg.d_off * n, p - cfg.d_off * n])
    y = np.concatenate([np.zeros(len(p)), np.ones(len(p)), -np.ones(len(p))])
    return X, y


def fit(X, y, cfg: GpisConfig, workspace: Optional[Aabb] = None) -> GpisModel:
    X = np.asarray(X, dtype=np.float64).reshape(-1, 3)
    y = np.asarray(y, dtype=np.float64).ravel()
    if len(X) == 0 or len(X) != len(y):
        raise GpisError("X and y must be non-empty and of equal length")
    ell = cfg.resolved_length_scale(workspace)
    K = matern(_dist(X, X), ell, cfg.sigma_f2, cfg.nu) + cfg.sigma_n2 * np.eye(len(X))
    try:
        c, lower = cho_factor(K, lower=True)
    except LinAlgError as exc:
        raise GpisError(
            f"kernel matrix is not positive definite; increase sigma_n2 (now {cfg.sigma_n2:g})"
        ) from exc
    alpha = cho_solve((c, lower), y)
    return GpisModel(X, y, np.tril(c), alpha, ell, cfg)


def predict_mean(model: GpisModel, queries) -> np.ndarray:
    Q = np.asarray(queries, dtype=np.float64).reshape(-1, 3)
    mean = np.empty(len(Q))
    for s in range(0, len(Q), _CHUNK):
        mean[s:s + _CHUNK] = model.kernel(Q[s:s + _CHUNK], model.X) @ model.alpha
    return mean


def predict(model: GpisModel, queries) -> Tuple[np.ndarray, np.ndarray]:
    """Predictive mean and variance (clamped at 0) at each query point."""
    Q = np.asarray(queries, dtype=np.float64).reshape(-1, 3)
    mean = np.empty(len(Q))
    var = np.empty(len(Q))
    for s in range(0, len(Q), _CHUNK):
        Ks = model.kernel(Q[s:s + _CHUNK], model.X)
        mean[s:s + _CHUNK] = Ks @ model.alpha
        v = solve_triangular(model.chol, Ks.T, lower=True)
        var[s:s + _CHUNK] = model.config.sigma_f2 - (v * v).sum(axis=0)
    if np.any(var < -1e-12):
        raise GpisError("negative predictive variance beyond round-off")
    return mean, np.maximum(var, 0.0)


def grid_nodes(workspace: Aabb, resolution: float):
    axes = [np.arange(lo, hi + 0.5 * resolution, resolution) for lo, hi in zip(workspace.min, workspace.max)]
    return axes, np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1)


def extract_surface(model: GpisModel, resolution: float, workspace: Aabb,
                    max_variance: Optional[float] = None) -> PointCloud:
    """Zero crossings of the predictive mean along every grid edge.

    Each crossing is placed by linear interpolation between the two nodes.
    With ``max_variance`` set, crossings whose nodes are both more uncertain
    than that are dropped (far-field mean hovering near 0).
    """
    if not resolution > 0:
        raise GpisError("resolution must be positive")
    axes, nodes = grid_nodes(workspace, resolution)
    shape = nodes.shape[:3]
    if max_variance is None:
        mean = predict_mean(model, nodes.reshape(-1, 3)).reshape(shape)
    else:
        mean, var = predict(model, nodes.reshape(-1, 3))
        mean = mean.reshape(shape)
        var = var.reshape(shape)
    out = []
    for a in range(3):
        sl0 = [slice(None)] * 3
        sl1 = [slice(None)] * 3
        sl0[a] = slice(0, -1)
        sl1[a] = slice(1, None)
        m0, m1 = mean[tuple(sl0)], mean[tuple(sl1)]
        cross = (m0 > 0) != (m1 > 0)
        if max_variance is not None:
            cross &= np.minimum(var[tuple(sl0)], var[tuple(sl1)]) <= max_variance
        if not np.any(cross):
            continue
        p0 = nodes[tuple(sl0)][cross]
        p1 = nodes[tuple(sl1)][cross]
        a0, a1 = m0[cross], m1[cross]
        w = a0 / (a0 - a1)
        out.append(p0 + w[:, None] * (p1 - p0))
    if not out:
        warnings.warn("no sign change of the GPIS mean inside the workspace", RuntimeWarning)
        return PointCloud(np.zeros((0, 3)))
    return PointCloud(np.concatenate(out))


def reconstruct(contacts, cfg: GpisConfig, workspace: Aabb,
                max_variance: Optional[float] = None) -> PointCloud:
    X, y = build_training_set(contacts, cfg)
    model = fit(X, y, cfg, workspace)
    return extract_surface(model, cfg.resolution, workspace, max_variance)
