"""Probabilistic voxel occupancy grid stored as clamped log-odds.

Entropy is measured in bits; log-odds use the natural logarithm.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import List, Optional, Sequence, Tuple

import numpy as np

from .errors import OccupancyError
from .geometry import Aabb, Ray

L_CLAMP = 10.0
GRID_MAGIC = b"OGRD"
GRID_VERSION = 1

Cell = Tuple[int, int, int]


@dataclass(frozen=True)
class GridConfig:
    origin: np.ndarray
    resolution: float
    dims: Tuple[int, int, int]

    def __post_init__(self):
        if not self.resolution > 0:
            raise OccupancyError("grid resolution must be positive")
        dims = tuple(int(d) for d in self.dims)
        if len(dims) != 3 or min(dims) < 1:
            raise OccupancyError(f"grid dims must be three counts >= 1, got {self.dims}")
        object.__setattr__(self, "origin", np.asarray(self.origin, dtype=np.float64))
        object.__setattr__(self, "resolution", float(self.resolution))
        object.__setattr__(self, "dims", dims)

    @property
    def n_cells(self) -> int:
        return self.dims[0] * self.dims[1] * self.dims[2]

    @property
    def bounds(self) -> Aabb:
        return Aabb(self.origin, self.origin + np.array(self.dims) * self.resolution)

    @classmethod
    def around_footprint(cls, footprint: Aabb, resolution: float, height: float,
                         margin: float = 0.0) -> "GridConfig":
        """Grid covering a 2D bounding box (plus margin) from ``z = footprint.min.z`` up to ``height``."""
        lo = footprint.min[:2] - margin
        hi = footprint.max[:2] + margin
        nxy = np.maximum(1, np.ceil((hi - lo) / resolution - 1e-9)).astype(int)
        centre = 0.5 * (lo + hi)
        lo = centre - 0.5 * nxy * resolution
        nz = max(1, int(math.ceil(height / resolution - 1e-9)))
        return cls(np.array([lo[0], lo[1], footprint.min[2]]), resolution, (int(nxy[0]), int(nxy[1]), nz))


@dataclass(frozen=True)
class SensorNoiseParams:
    p_hit: float = 0.7
    p_miss: float = 0.4

    def __post_init__(self):
        if not 0.5 < self.p_hit < 1.0:
            raise OccupancyError("p_hit must lie in (0.5, 1)")
        if not 0.0 < self.p_miss < 0.5:
            raise OccupancyError("p_miss must lie in (0, 0.5)")

    @property
    def l_hit(self) -> float:
        return math.log(self.p_hit / (1.0 - self.p_hit))

    @property
    def l_miss(self) -> float:
        return math.log(self.p_miss / (1.0 - self.p_miss))


def logit(p):
    return np.log(p / (1.0 - p))


def log_odds_to_prob(L):
    return 1.0 / (1.0 + np.exp(-np.asarray(L, dtype=np.float64)))


def cell_entropy(p):
    """Binary Shannon entropy in bits, with ``0 log 0 = 0``."""
    p = np.asarray(p, dtype=np.float64)
    if np.any((p < 0.0) | (p > 1.0)) or np.any(np.isnan(p)):
        raise OccupancyError("probability must lie in [0, 1]")
    q = 1.0 - p
    with np.errstate(divide="ignore", invalid="ignore"):
        h = -np.where(p > 0, p * np.log2(p), 0.0) - np.where(q > 0, q * np.log2(q), 0.0)
    return float(h) if h.ndim == 0 else h


def entropy_from_log_odds(L):
    """Entropy (bits) of cells given their log-odds, computed without forming ``1 - p``."""
    L = np.asarray(L, dtype=np.float64)
    p = log_odds_to_prob(L)
    q = log_odds_to_prob(-L)
    # log2 p = -log2(1 + e^-L), evaluated stably
    lp = -np.logaddexp(0.0, -L) / math.log(2.0)
    lq = -np.logaddexp(0.0, L) / math.log(2.0)
    h = -(p * lp + q * lq)
    return float(h) if h.ndim == 0 else h


class OccupancyGrid:
    """Dense grid of per-cell log-odds ``L(c)``; fresh cells have ``L = 0`` (p = 0.5)."""

    def __init__(self, config: GridConfig, log_odds: Optional[np.ndarray] = None):
        self.config = config
        if log_odds is None:
            log_odds = np.zeros(config.dims)
        log_odds = np.asarray(log_odds, dtype=np.float64)
        if log_odds.shape != config.dims:
            raise OccupancyError(f"log-odds shape {log_odds.shape} does not match dims {config.dims}")
        self.log_odds = log_odds

    def copy(self) -> "OccupancyGrid":
        return OccupancyGrid(self.config, self.log_odds.copy())

    @property
    def probabilities(self) -> np.ndarray:
        return log_odds_to_prob(self.log_odds)

    def probability(self, cell: Cell) -> float:
        return float(log_odds_to_prob(self.log_odds[cell]))

    def in_bounds(self, cell: Sequence[int]) -> bool:
        return all(0 <= c < d for c, d in zip(cell, self.config.dims))

    def cell_of(self, point) -> Cell:
        idx = np.floor((np.asarray(point) - self.config.origin) / self.config.resolution).astype(int)
        return tuple(int(i) for i in idx)

    def cell_center(self, cell: Cell) -> np.ndarray:
        return self.config.origin + (np.asarray(cell) + 0.5) * self.config.resolution

    def add(self, cell: Cell, increment: float) -> None:
        v = self.log_odds[cell] + increment
        self.log_odds[cell] = min(L_CLAMP, max(-L_CLAMP, v))


def grid_entropy(grid: OccupancyGrid) -> float:
    return float(np.sum(entropy_from_log_odds(grid.log_odds)))


def _clip_segment(origin, direction, t_max, lo, hi):
    """Parametric interval of ``origin + t*direction, t in [0, t_max]`` inside box ``[lo, hi]``."""
    t0, t1 = 0.0, t_max
    for a in range(3):
        o, d = origin[a], direction[a]
        if d == 0.0:
            if o < lo[a] or o > hi[a]:
                return None
            continue
        ta = (lo[a] - o) / d
        tb = (hi[a] - o) / d
        if ta > tb:
            ta, tb = tb, ta
        if ta > t0:
            t0 = ta
        if tb < t1:
            t1 = tb
        if t0 > t1:
            return None
    return t0, t1


def traverse_ray(grid: OccupancyGrid, ray: Ray, t_end: Optional[float] = None) -> List[Cell]:
    """Voxels crossed by the segment ``[origin, origin + t_end * direction]`` in entry order.

    ``t_end`` defaults to ``ray.max_range``. Incremental stepping after
    Amanatides & Woo: each step crosses exactly one cell boundary. Cells the
    segment merely touches at its far end are not reported.
    """
    cfg = grid.config
    o = ray.origin
    d = ray.direction
    t_stop = ray.max_range if t_end is None else float(t_end)
    res = cfg.resolution
    lo = cfg.origin
    hi = cfg.origin + np.array(cfg.dims) * res
    span = _clip_segment(o, d, t_stop, lo, hi)
    if span is None:
        return []
    t_in, t_out = span
    nx, ny, nz = cfg.dims
    p = o + t_in * d
    cell = [0, 0, 0]
    step = [0, 0, 0]
    t_next = [math.inf] * 3
    t_delta = [math.inf] * 3
    dims = (nx, ny, nz)
    for a in range(3):
        c = int(math.floor((p[a] - lo[a]) / res))
        c = min(max(c, 0), dims[a] - 1)
        cell[a] = c
        if d[a] > 0:
            step[a] = 1
            t_next[a] = (lo[a] + (c + 1) * res - o[a]) / d[a]
            t_delta[a] = res / d[a]
        elif d[a] < 0:
            step[a] = -1
            t_next[a] = (lo[a] + c * res - o[a]) / d[a]
            t_delta[a] = -res / d[a]
    out = [tuple(cell)]
    while True:
        if t_next[0] <= t_next[1] and t_next[0] <= t_next[2]:
            a = 0
        elif t_next[1] <= t_next[2]:
            a = 1
        else:
            a = 2
        if t_next[a] >= t_out:
            break
        cell[a] += step[a]
        if cell[a] < 0 or cell[a] >= dims[a]:
            break
        t_next[a] += t_delta[a]
        out.append(tuple(cell))
    return out


def measurement_cells(grid: OccupancyGrid, ray: Ray, hit_t: Optional[float]):
    """Split the cells observed by one ray into ``(miss_cells, hit_cell or None)``.

    A hit point lying exactly on a cell face is attributed to the cell the ray
    enters there.
    """
    if hit_t is None:
        return traverse_ray(grid, ray), None
    if not 0.0 < hit_t <= ray.max_range:
        raise OccupancyError(f"hit distance {hit_t} outside (0, {ray.max_range}]")
    eps = 1e-9 * grid.config.resolution
    cells = traverse_ray(grid, ray, t_end=hit_t + eps)
    if not cells:
        return [], None
    hit_cell = grid.cell_of(ray.at(hit_t + eps))
    if cells[-1] == hit_cell:
        return cells[:-1], hit_cell
    # hit point outside the grid: everything crossed was free space
    return cells, None


def apply_measurement(grid: OccupancyGrid, ray: Ray, hit_t: Optional[float],
                      noise: SensorNoiseParams) -> OccupancyGrid:
    """Log-odds update for one ray; ``hit_t=None`` means the ray saw nothing.

    Cells before the hit (or every traversed cell on a miss) receive the miss
    increment, the hit cell the hit increment. Updates ``grid`` in place and
    returns it.
    """
    misses, hit = measurement_cells(grid, ray, hit_t)
    lm = noise.l_miss
    for c in misses:
        grid.add(c, lm)
    if hit is not None:
        grid.add(hit, noise.l_hit)
    return grid


def save_grid(grid: OccupancyGrid, path) -> None:
    cfg = grid.config
    header = GRID_MAGIC + struct.pack("<I3I3dd", GRID_VERSION, *cfg.dims, *cfg.origin, cfg.resolution)
    payload = np.asarray(grid.log_odds, dtype="<f4").ravel(order="F").tobytes()
    Path(path).write_bytes(header + payload)


def load_grid(path) -> OccupancyGrid:
    raw = Path(path).read_bytes()
    if raw[:4] != GRID_MAGIC:
        raise OccupancyError("bad magic: not an occupancy grid snapshot")
    head = struct.calcsize("<I3I3dd")
    if len(raw) < 4 + head:
        raise OccupancyError("truncated grid header")
    version, nx, ny, nz, ox, oy, oz, res = struct.unpack("<I3I3dd", raw[4:4 + head])
    if version != GRID_VERSION:
        raise OccupancyError(f"unsupported grid version {version}")
    n = nx * ny * nz
    body = raw[4 + head:]
    if len(body) != 4 * n:
        raise OccupancyError("truncated grid payload")
    L = np.frombuffer(body, dtype="<f4").astype(np.float64).reshape((nx, ny, nz), order="F")
    return OccupancyGrid(GridConfig(np.array([ox, oy, oz]), res, (nx, ny, nz)), L)
