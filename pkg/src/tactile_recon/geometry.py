"""Core 3D types and geometric primitives.

Vectors are plain ``numpy`` arrays of shape ``(3,)`` and quaternions arrays of
shape ``(4,)`` stored scalar-first ``(w, x, y, z)``.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property
from typing import NamedTuple, Optional

import numpy as np

from .errors import GeometryError
from .rng import make_rng

_UNIT_TOL = 1e-9


@dataclass(frozen=True)
class PointCloud:
    points: np.ndarray
    normals: Optional[np.ndarray] = None

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=np.float64).reshape(-1, 3)
        object.__setattr__(self, "points", pts)
        if self.normals is not None:
            nrm = np.asarray(self.normals, dtype=np.float64).reshape(-1, 3)
            if len(nrm) != len(pts):
                raise GeometryError(
                    f"normals count {len(nrm)} does not match point count {len(pts)}"
                )
            object.__setattr__(self, "normals", nrm)

    def __len__(self) -> int:
        return len(self.points)

    @property
    def has_normals(self) -> bool:
        return self.normals is not None

    def subset(self, idx) -> "PointCloud":
        idx = np.asarray(idx)
        nrm = None if self.normals is None else self.normals[idx]
        return PointCloud(self.points[idx], nrm)

    def transformed(self, R: np.ndarray, t=None, scale=None) -> "PointCloud":
        """Apply ``p -> scale * (R p) + t`` (scale elementwise, after rotation)."""
        pts = self.points @ np.asarray(R).T
        if scale is not None:
            pts = pts * np.asarray(scale)
        if t is not None:
            pts = pts + np.asarray(t)
        nrm = None
        if self.normals is not None:
            nrm = self.normals @ np.asarray(R).T
            if scale is not None:
                nrm = nrm / np.asarray(scale)
                nrm /= np.linalg.norm(nrm, axis=1, keepdims=True)
        return PointCloud(pts, nrm)

    @staticmethod
    def concat(clouds) -> "PointCloud":
        clouds = [c for c in clouds if len(c)]
        if not clouds:
            return PointCloud(np.zeros((0, 3)))
        pts = np.concatenate([c.points for c in clouds])
        if all(c.normals is not None for c in clouds):
            return PointCloud(pts, np.concatenate([c.normals for c in clouds]))
        return PointCloud(pts)


@dataclass(frozen=True)
class Aabb:
    min: np.ndarray
    max: np.ndarray

    def __post_init__(self):
        lo = np.asarray(self.min, dtype=np.float64)
        hi = np.asarray(self.max, dtype=np.float64)
        if np.any(lo > hi):
            raise GeometryError(f"Aabb min {lo} exceeds max {hi}")
        object.__setattr__(self, "min", lo)
        object.__setattr__(self, "max", hi)

    @property
    def extent(self) -> np.ndarray:
        return self.max - self.min

    @property
    def center(self) -> np.ndarray:
        return 0.5 * (self.min + self.max)

    def inflated(self, margin) -> "Aabb":
        return Aabb(self.min - margin, self.max + margin)

    def contains(self, points, tol: float = 0.0) -> np.ndarray:
        p = np.atleast_2d(points)
        return np.all((p >= self.min - tol) & (p <= self.max + tol), axis=1)


@dataclass(frozen=True)
class Ray:
    origin: np.ndarray
    direction: np.ndarray
    max_range: float

    def __post_init__(self):
        o = np.asarray(self.origin, dtype=np.float64)
        d = np.asarray(self.direction, dtype=np.float64)
        if abs(np.linalg.norm(d) - 1.0) > 1e-6:
            raise GeometryError(f"ray direction must be unit length, got |d|={np.linalg.norm(d)}")
        if not self.max_range >= 0.0:
            raise GeometryError("ray max_range must be non-negative")
        object.__setattr__(self, "origin", o)
        object.__setattr__(self, "direction", d)
        object.__setattr__(self, "max_range", float(self.max_range))

    def at(self, t: float) -> np.ndarray:
        return self.origin + t * self.direction


class RayHit(NamedTuple):
    point: np.ndarray
    normal: np.ndarray
    t: float
    triangle: int


@dataclass(frozen=True)
class TriangleMesh:
    vertices: np.ndarray
    triangles: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.vertices, dtype=np.float64).reshape(-1, 3)
        f = np.asarray(self.triangles, dtype=np.int64).reshape(-1, 3)
        if len(f) and (f.min() < 0 or f.max() >= len(v)):
            raise GeometryError("triangle index out of range")
        object.__setattr__(self, "vertices", v)
        object.__setattr__(self, "triangles", f)

    def __len__(self) -> int:
        return len(self.triangles)

    @cached_property
    def corners(self):
        v = self.vertices
        f = self.triangles
        return v[f[:, 0]], v[f[:, 1]], v[f[:, 2]]

    @cached_property
    def _cross(self) -> np.ndarray:
        a, b, c = self.corners
        return np.cross(b - a, c - a)

    @cached_property
    def areas(self) -> np.ndarray:
        return 0.5 * np.linalg.norm(self._cross, axis=1)

    @cached_property
    def face_normals(self) -> np.ndarray:
        n = self._cross
        norm = np.linalg.norm(n, axis=1, keepdims=True)
        return n / np.where(norm > 0, norm, 1.0)

    def cleaned(self, area_eps: float = 1e-15) -> "TriangleMesh":
        """Drop zero-area triangles and unreferenced vertices."""
        keep = self.areas > area_eps
        f = self.triangles[keep]
        used, inverse = np.unique(f.ravel(), return_inverse=True)
        return TriangleMesh(self.vertices[used], inverse.reshape(-1, 3))

    def aabb(self) -> Aabb:
        if len(self.vertices) == 0:
            raise GeometryError("empty mesh has no bounding box")
        return Aabb(self.vertices.min(axis=0), self.vertices.max(axis=0))

    def translated(self, t) -> "TriangleMesh":
        return TriangleMesh(self.vertices + np.asarray(t, dtype=np.float64), self.triangles)

    @staticmethod
    def merge(meshes) -> "TriangleMesh":
        verts, tris, off = [], [], 0
        for m in meshes:
            verts.append(m.vertices)
            tris.append(m.triangles + off)
            off += len(m.vertices)
        return TriangleMesh(np.concatenate(verts), np.concatenate(tris))


def box_mesh(lo=(0.0, 0.0, 0.0), hi=(1.0, 1.0, 1.0)) -> TriangleMesh:
    """Axis-aligned box with outward-facing triangles (two per face)."""
    lo = np.asarray(lo, dtype=np.float64)
    hi = np.asarray(hi, dtype=np.float64)
    v = np.array([[x, y, z] for z in (0, 1) for y in (0, 1) for x in (0, 1)], dtype=np.float64)
    v = lo + v * (hi - lo)
    # vertex id = x + 2y + 4z
    quads = [
        (0, 2, 3, 1),  # z-
        (4, 5, 7, 6),  # z+
        (0, 1, 5, 4),  # y-
        (2, 6, 7, 3),  # y+
        (0, 4, 6, 2),  # x-
        (1, 3, 7, 5),  # x+
    ]
    tris = []
    for a, b, c, d in quads:
        tris.append((a, b, c))
        tris.append((a, c, d))
    return TriangleMesh(v, np.array(tris))


# ---------------------------------------------------------------------------
# sampling / normalisation / subsampling
# ---------------------------------------------------------------------------


def sample_surface(mesh: TriangleMesh, n: int, seed: int) -> PointCloud:
    """Area-weighted uniform surface sample with face normals."""
    if len(mesh) == 0:
        raise GeometryError("cannot sample an empty mesh")
    if n < 1:
        raise GeometryError("sample count must be >= 1")
    areas = mesh.areas
    total = areas.sum()
    if not total > 0:
        raise GeometryError("mesh has zero surface area")
    rng = make_rng(seed, "sample_surface")
    cdf = np.cumsum(areas) / total
    tri = np.searchsorted(cdf, rng.random(n), side="right")
    tri = np.minimum(tri, len(areas) - 1)
    r1 = np.sqrt(rng.random(n))
    r2 = rng.random(n)
    a, b, c = (x[tri] for x in mesh.corners)
    pts = (1.0 - r1)[:, None] * a + (r1 * (1.0 - r2))[:, None] * b + (r1 * r2)[:, None] * c
    return PointCloud(pts, mesh.face_normals[tri])


def compute_aabb(cloud) -> Aabb:
    pts = cloud.points if isinstance(cloud, PointCloud) else np.asarray(cloud).reshape(-1, 3)
    if len(pts) == 0:
        raise GeometryError("cannot compute bounding box of an empty cloud")
    return Aabb(pts.min(axis=0), pts.max(axis=0))


def normalize_to_unit_cube(cloud: PointCloud):
    """Uniformly scale and shift ``cloud`` into ``[0, 1]^3``.

    The largest AABB extent maps onto exactly ``[0, 1]``; the other axes start
    at 0. Returns ``(normalized, scale, offset)`` with
    ``normalized = (p - offset) * scale``.
    """
    box = compute_aabb(cloud)
    ext = float(box.extent.max())
    if not ext > 0:
        raise GeometryError("cannot normalize a cloud whose points are all identical")
    scale = 1.0 / ext
    offset = box.min.copy()
    pts = (cloud.points - offset) * scale
    np.clip(pts, 0.0, 1.0, out=pts)
    return PointCloud(pts, cloud.normals), scale, offset


def denormalize(cloud: PointCloud, scale: float, offset) -> PointCloud:
    return PointCloud(cloud.points / scale + np.asarray(offset), cloud.normals)


def voxel_subsample(cloud: PointCloud, voxel_size: float, seed: Optional[int] = None) -> PointCloud:
    """One centroid per occupied voxel.

    With ``seed=None`` the voxel lattice is anchored at the world origin;
    otherwise its origin is jittered by a seeded uniform offset in
    ``[0, voxel_size)^3``.
    """
    if not voxel_size > 0:
        raise GeometryError("voxel_size must be positive")
    if len(cloud) == 0:
        raise GeometryError("cannot subsample an empty cloud")
    origin = np.zeros(3)
    if seed is not None:
        origin = -make_rng(seed, "voxel_jitter").random(3) * voxel_size
    keys = np.floor((cloud.points - origin) / voxel_size).astype(np.int64)
    _, inverse, counts = np.unique(keys, axis=0, return_inverse=True, return_counts=True)
    inverse = inverse.ravel()
    sums = np.zeros((len(counts), 3))
    np.add.at(sums, inverse, cloud.points)
    pts = sums / counts[:, None]
    nrm = None
    if cloud.normals is not None:
        nsum = np.zeros((len(counts), 3))
        np.add.at(nsum, inverse, cloud.normals)
        first = np.zeros(len(counts), dtype=np.int64)
        first[inverse[::-1]] = np.arange(len(inverse))[::-1]
        norm = np.linalg.norm(nsum, axis=1, keepdims=True)
        nrm = np.where(norm > 1e-12, nsum / np.where(norm > 0, norm, 1.0), cloud.normals[first])
    return PointCloud(pts, nrm)


def voxel_size_for_count(cloud: PointCloud, target: int, seed: Optional[int] = None,
                         iterations: int = 40) -> float:
    """Bisect (in log space) for the voxel size whose subsample is closest to ``target`` points."""
    if target < 1:
        raise GeometryError("target count must be >= 1")
    ext = float(compute_aabb(cloud).extent.max())
    if not ext > 0:
        return 1.0
    lo, hi = ext * 1e-4, ext * 2.0
    best_size, best_err = hi, np.inf
    for _ in range(iterations):
        mid = float(np.sqrt(lo * hi))
        count = len(voxel_subsample(cloud, mid, seed))
        err = abs(count - target)
        if err < best_err or (err == best_err and mid > best_size):
            best_size, best_err = mid, err
        if count == target:
            break
        if count > target:
            lo = mid
        else:
            hi = mid
    return best_size


def subsample_to_count(cloud: PointCloud, target: int, seed: Optional[int] = None) -> PointCloud:
    return voxel_subsample(cloud, voxel_size_for_count(cloud, target, seed), seed)


def random_subset(cloud: PointCloud, n: int, seed: int) -> PointCloud:
    if n >= len(cloud):
        return cloud
    idx = np.sort(make_rng(seed, "random_subset").choice(len(cloud), size=n, replace=False))
    return cloud.subset(idx)


# ---------------------------------------------------------------------------
# ray casting
# ---------------------------------------------------------------------------


def _watertight_hits(origin, direction, mesh: TriangleMesh):
    """Distances along unit ``direction`` to every triangle (``inf`` on miss).

    Watertight ray/triangle test: shared edges are never missed; a ray through
    a shared edge hits both triangles at the same distance.
    """
    d = direction
    kz = int(np.argmax(np.abs(d)))
    kx = (kz + 1) % 3
    ky = (kx + 1) % 3
    if d[kz] < 0:
        kx, ky = ky, kx
    sx = d[kx] / d[kz]
    sy = d[ky] / d[kz]
    sz = 1.0 / d[kz]
    a, b, c = (x - origin for x in mesh.corners)
    ax = a[:, kx] - sx * a[:, kz]
    ay = a[:, ky] - sy * a[:, kz]
    bx = b[:, kx] - sx * b[:, kz]
    by = b[:, ky] - sy * b[:, kz]
    cx = c[:, kx] - sx * c[:, kz]
    cy = c[:, ky] - sy * c[:, kz]
    u = cx * by - cy * bx
    v = ax * cy - ay * cx
    w = bx * ay - by * ax
    neg = (u < 0) | (v < 0) | (w < 0)
    pos = (u > 0) | (v > 0) | (w > 0)
    det = u + v + w
    ok = ~(neg & pos) & (det != 0)
    tt = u * (sz * a[:, kz]) + v * (sz * b[:, kz]) + w * (sz * c[:, kz])
    with np.errstate(divide="ignore", invalid="ignore"):
        t = np.where(ok, tt / np.where(det != 0, det, 1.0), np.inf)
    return t


def ray_mesh_intersect(ray: Ray, mesh: TriangleMesh) -> Optional[RayHit]:
    """Nearest hit with ``t`` in ``(0, max_range]``; ties go to the lowest triangle index."""
    if len(mesh) == 0:
        return None
    t = _watertight_hits(ray.origin, ray.direction, mesh)
    t = np.where((t > 0) & (t <= ray.max_range), t, np.inf)
    i = int(np.argmin(t))
    if not np.isfinite(t[i]):
        return None
    ti = float(t[i])
    return RayHit(ray.at(ti), mesh.face_normals[i].copy(), ti, i)


def cast_rays(origins, directions, max_range, mesh: TriangleMesh):
    """Batch of :func:`ray_mesh_intersect`; returns ``(t, triangle)`` arrays (``inf``/-1 on miss)."""
    origins = np.atleast_2d(origins)
    directions = np.atleast_2d(directions)
    n = len(origins)
    ranges = np.broadcast_to(np.asarray(max_range, dtype=np.float64), (n,))
    ts = np.full(n, np.inf)
    tri = np.full(n, -1, dtype=np.int64)
    if len(mesh) == 0:
        return ts, tri
    for k in range(n):
        t = _watertight_hits(origins[k], directions[k], mesh)
        t = np.where((t > 0) & (t <= ranges[k]), t, np.inf)
        i = int(np.argmin(t))
        if np.isfinite(t[i]):
            ts[k] = t[i]
            tri[k] = i
    return ts, tri


# ---------------------------------------------------------------------------
# quaternions (scalar first)
# ---------------------------------------------------------------------------

IDENTITY_QUAT = np.array([1.0, 0.0, 0.0, 0.0])


def _check_unit(q) -> np.ndarray:
    q = np.asarray(q, dtype=np.float64)
    if q.shape != (4,):
        raise GeometryError(f"quaternion must have shape (4,), got {q.shape}")
    if abs(np.linalg.norm(q) - 1.0) > _UNIT_TOL:
        raise GeometryError(f"quaternion is not unit length (|q|={np.linalg.norm(q):.12g})")
    return q


def quat_normalize(q) -> np.ndarray:
    q = np.asarray(q, dtype=np.float64)
    n = np.linalg.norm(q)
    if not n > 0:
        raise GeometryError("cannot normalize a zero quaternion")
    return q / n


def quat_mul(a, b) -> np.ndarray:
    aw, ax, ay, az = np.asarray(a, dtype=np.float64)
    bw, bx, by, bz = np.asarray(b, dtype=np.float64)
    return np.array([
        aw * bw - ax * bx - ay * by - az * bz,
        aw * bx + ax * bw + ay * bz - az * by,
        aw * by - ax * bz + ay * bw + az * bx,
        aw * bz + ax * by - ay * bx + az * bw,
    ])


def quat_conjugate(q) -> np.ndarray:
    q = np.asarray(q, dtype=np.float64)
    return np.array([q[0], -q[1], -q[2], -q[3]])


def quat_rotate(q, v) -> np.ndarray:
    """Rotate ``v`` by unit quaternion ``q`` as ``q * (0, v) * q^*``."""
    q = _check_unit(q)
    p = np.concatenate([[0.0], np.asarray(v, dtype=np.float64)])
    return quat_mul(quat_mul(q, p), quat_conjugate(q))[1:]


def quat_to_matrix(q) -> np.ndarray:
    w, x, y, z = _check_unit(q)
    return np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
        [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
        [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
    ])


def quat_from_matrix(R) -> np.ndarray:
    """Unit quaternion (w >= 0) of a rotation matrix (Shepperd's method)."""
    R = np.asarray(R, dtype=np.float64)
    tr = np.trace(R)
    diag = np.array([tr, R[0, 0], R[1, 1], R[2, 2]])
    k = int(np.argmax(diag))
    if k == 0:
        s = 2.0 * np.sqrt(1.0 + tr)
        q = np.array([0.25 * s, (R[2, 1] - R[1, 2]) / s, (R[0, 2] - R[2, 0]) / s, (R[1, 0] - R[0, 1]) / s])
    elif k == 1:
        s = 2.0 * np.sqrt(1.0 + R[0, 0] - R[1, 1] - R[2, 2])
        q = np.array([(R[2, 1] - R[1, 2]) / s, 0.25 * s, (R[0, 1] + R[1, 0]) / s, (R[0, 2] + R[2, 0]) / s])
    elif k == 2:
        s = 2.0 * np.sqrt(1.0 - R[0, 0] + R[1, 1] - R[2, 2])
        q = np.array([(R[0, 2] - R[2, 0]) / s, (R[0, 1] + R[1, 0]) / s, 0.25 * s, (R[1, 2] + R[2, 1]) / s])
    else:
        s = 2.0 * np.sqrt(1.0 - R[0, 0] - R[1, 1] + R[2, 2])
        q = np.array([(R[1, 0] - R[0, 1]) / s, (R[0, 2] + R[2, 0]) / s, (R[1, 2] + R[2, 1]) / s, 0.25 * s])
    q = quat_normalize(q)
    return q if q[0] >= 0 else -q


def quat_from_axis_angle(axis, angle: float) -> np.ndarray:
    axis = np.asarray(axis, dtype=np.float64)
    axis = axis / np.linalg.norm(axis)
    return np.concatenate([[np.cos(angle / 2.0)], np.sin(angle / 2.0) * axis])


def quat_angle(a, b) -> float:
    """Rotation angle (radians) between two unit quaternions, sign-agnostic."""
    d = abs(float(np.dot(quat_normalize(a), quat_normalize(b))))
    return 2.0 * np.arccos(min(1.0, d))


def rotation_angle(R) -> float:
    c = (np.trace(np.asarray(R)) - 1.0) / 2.0
    return float(np.arccos(np.clip(c, -1.0, 1.0)))


def random_quaternion(rng: np.random.Generator, max_angle: Optional[float] = None) -> np.ndarray:
    """Uniform random rotation, or a random axis with angle uniform in ``[0, max_angle]``."""
    if max_angle is None:
        q = rng.normal(size=4)
        q = quat_normalize(q)
        return q if q[0] >= 0 else -q
    axis = rng.normal(size=3)
    return quat_from_axis_angle(axis, rng.uniform(0.0, max_angle))


def skew(v) -> np.ndarray:
    x, y, z = np.asarray(v, dtype=np.float64)
    return np.array([[0.0, -z, y], [z, 0.0, -x], [-y, x, 0.0]])
