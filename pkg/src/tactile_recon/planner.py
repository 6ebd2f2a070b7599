"""Next-best-touch selection by expected information gain over an occupancy grid."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from .errors import PlannerError
from .geometry import Ray
from .occupancy import (
    L_CLAMP,
    Cell,
    GridConfig,
    OccupancyGrid,
    SensorNoiseParams,
    entropy_from_log_odds,
    log_odds_to_prob,
    logit,
    traverse_ray,
)
from .rng import make_rng

Z_AXIS = np.array([0.0, 0.0, 1.0])


@dataclass(frozen=True)
class TouchAction:
    """Guarded horizontal approach from ``start`` along unit ``direction``."""

    start: np.ndarray
    direction: np.ndarray
    kind: str = field(default="touch", init=False)

    def __post_init__(self):
        d = np.asarray(self.direction, dtype=np.float64)
        if abs(d[2]) > 1e-12 or abs(np.linalg.norm(d) - 1.0) > 1e-9:
            raise PlannerError("touch direction must be horizontal and unit length")
        object.__setattr__(self, "start", np.asarray(self.start, dtype=np.float64))
        object.__setattr__(self, "direction", d)


@dataclass(frozen=True)
class PinchAction:
    """Vertical approach from ``start`` down to ``grasp_z``, then two fingers close.

    The fingers close along the horizontal axis at angle ``yaw`` from +x.
    """

    start: np.ndarray
    grasp_z: float
    yaw: float = 0.0
    kind: str = field(default="pinch", init=False)

    def __post_init__(self):
        object.__setattr__(self, "start", np.asarray(self.start, dtype=np.float64))
        object.__setattr__(self, "grasp_z", float(self.grasp_z))
        object.__setattr__(self, "yaw", float(self.yaw))

    @property
    def closing_axis(self) -> np.ndarray:
        return np.array([np.cos(self.yaw), np.sin(self.yaw), 0.0])

    @property
    def grasp_center(self) -> np.ndarray:
        return np.array([self.start[0], self.start[1], self.grasp_z])


TactileAction = Union[TouchAction, PinchAction]


@dataclass(frozen=True)
class SensorModel:
    """Rectangular taxel array; each taxel casts one ray along the approach direction."""

    rows: int = 4
    cols: int = 4
    pitch: float = 0.005
    pinch_half_opening: float = 0.07

    def __post_init__(self):
        if self.rows < 1 or self.cols < 1:
            raise PlannerError("sensor needs at least one taxel")
        if not self.pitch > 0:
            raise PlannerError("taxel pitch must be positive")

    @property
    def n_taxel(self) -> int:
        return self.rows * self.cols

    @property
    def half_height(self) -> float:
        return 0.5 * (self.rows - 1) * self.pitch

    def taxel_offsets(self) -> np.ndarray:
        """``(n_taxel, 2)`` offsets (lateral, vertical) in the patch plane, centred on the patch."""
        u = (np.arange(self.cols) - 0.5 * (self.cols - 1)) * self.pitch
        v = (np.arange(self.rows) - 0.5 * (self.rows - 1)) * self.pitch
        uu, vv = np.meshgrid(u, v, indexing="xy")
        return np.stack([uu.ravel(), vv.ravel()], axis=1)

    def patch_origins(self, center, direction) -> np.ndarray:
        d = np.asarray(direction, dtype=np.float64)
        lateral = np.cross(Z_AXIS, d)
        lateral /= np.linalg.norm(lateral)
        off = self.taxel_offsets()
        return np.asarray(center) + off[:, :1] * lateral + off[:, 1:] * Z_AXIS


@dataclass(frozen=True)
class RayGroup:
    """Taxel rays of one sensor patch moving rigidly along ``direction``."""

    origins: np.ndarray
    direction: np.ndarray
    max_range: float

    def rays(self) -> List[Ray]:
        return [Ray(o, self.direction, self.max_range) for o in self.origins]


def touch_range(grid_config: GridConfig) -> float:
    ext = grid_config.bounds.extent
    return float(np.hypot(ext[0], ext[1]))


def action_ray_groups(action: TactileAction, sensor: SensorModel, grid_config: GridConfig) -> List[RayGroup]:
    """Sensor patches of an action: one for a touch, two opposing fingers for a pinch."""
    if isinstance(action, TouchAction):
        origins = sensor.patch_origins(action.start, action.direction)
        return [RayGroup(origins, action.direction, touch_range(grid_config))]
    a = action.closing_axis
    h = sensor.pinch_half_opening
    centre = action.grasp_center
    groups = []
    for sign in (1.0, -1.0):
        d = -sign * a
        groups.append(RayGroup(sensor.patch_origins(centre + sign * h * a, d), d, h))
    return groups


@dataclass(frozen=True)
class PlannerConfig:
    n_candidates: int = 50
    occupied_threshold: float = 0.7
    seed: int = 0
    approach_clearance: float = 0.05

    def __post_init__(self):
        if self.n_candidates < 2 or self.n_candidates % 2:
            raise PlannerError("n_candidates must be even and >= 2")
        if not 0.5 < self.occupied_threshold < 1.0:
            raise PlannerError("occupied_threshold must lie in (0.5, 1)")


LATERAL_FACES = ("x-", "x+", "y-", "y+")
_FACE_NORMALS = {
    "x-": np.array([1.0, 0.0, 0.0]),
    "x+": np.array([-1.0, 0.0, 0.0]),
    "y-": np.array([0.0, 1.0, 0.0]),
    "y+": np.array([0.0, -1.0, 0.0]),
}


def face_point(grid_config: GridConfig, face: str, u: float, z: float):
    """Point on a lateral grid face at fractional position ``u`` along it, and the inward direction."""
    b = grid_config.bounds
    lo, hi = b.min, b.max
    if face == "x-":
        p = [lo[0], lo[1] + u * (hi[1] - lo[1]), z]
    elif face == "x+":
        p = [hi[0], lo[1] + u * (hi[1] - lo[1]), z]
    elif face == "y-":
        p = [lo[0] + u * (hi[0] - lo[0]), lo[1], z]
    elif face == "y+":
        p = [lo[0] + u * (hi[0] - lo[0]), hi[1], z]
    else:
        raise PlannerError(f"unknown face {face!r}")
    return np.array(p), _FACE_NORMALS[face].copy()


def sample_touch(grid_config: GridConfig, sensor: SensorModel, rng: np.random.Generator) -> TouchAction:
    b = grid_config.bounds
    face = LATERAL_FACES[int(rng.integers(4))]
    lo_z = b.min[2] + sensor.half_height
    hi_z = max(lo_z, b.max[2] - sensor.half_height)
    start, d = face_point(grid_config, face, rng.random(), rng.uniform(lo_z, hi_z))
    return TouchAction(start, d)


def sample_pinch(grid_config: GridConfig, sensor: SensorModel, rng: np.random.Generator,
                 clearance: float) -> PinchAction:
    b = grid_config.bounds
    x = rng.uniform(b.min[0], b.max[0])
    y = rng.uniform(b.min[1], b.max[1])
    lo_z = b.min[2] + sensor.half_height
    hi_z = max(lo_z, b.max[2] - sensor.half_height)
    return PinchAction(np.array([x, y, b.max[2] + clearance]), rng.uniform(lo_z, hi_z), rng.uniform(0.0, np.pi))


def sample_candidate_actions(grid: OccupancyGrid, config: PlannerConfig,
                             sensor: Optional[SensorModel] = None) -> List[TactileAction]:
    """Monte-Carlo candidate set: ``n/2`` touches followed by ``n/2`` pinches."""
    sensor = sensor or SensorModel()
    rng = make_rng(config.seed, "candidates")
    half = config.n_candidates // 2
    touches = [sample_touch(grid.config, sensor, rng) for _ in range(half)]
    pinches = [sample_pinch(grid.config, sensor, rng, config.approach_clearance) for _ in range(half)]
    return touches + pinches


@dataclass(frozen=True)
class ExpectedRay:
    """Predicted outcome of one taxel ray: free cells crossed and the expected hit cell."""

    ray: Ray
    miss_cells: Tuple[Cell, ...]
    hit_cell: Optional[Cell]

    @property
    def is_hit(self) -> bool:
        return self.hit_cell is not None


def expected_measurement(action: TactileAction, grid: OccupancyGrid, sensor: SensorModel,
                         occupied_threshold: float = 0.7) -> List[ExpectedRay]:
    """Predict each taxel ray from the current grid alone.

    The first traversed cell with ``p >= occupied_threshold`` is the expected
    contact; cells behind it are never observed. Without such a cell the ray
    is expected to miss along its whole span.
    """
    L_thr = float(logit(occupied_threshold))
    out = []
    L = grid.log_odds
    for group in action_ray_groups(action, sensor, grid.config):
        for ray in group.rays():
            cells = traverse_ray(grid, ray)
            hit = None
            for k, c in enumerate(cells):
                if L[c] >= L_thr:
                    hit = c
                    cells = cells[:k]
                    break
            out.append(ExpectedRay(ray, tuple(cells), hit))
    return out


def _clamped(v: float) -> float:
    return min(L_CLAMP, max(-L_CLAMP, v))


def simulate_posterior(grid: OccupancyGrid, expected: Sequence[ExpectedRay],
                       noise: SensorNoiseParams) -> Dict[Cell, Tuple[float, float]]:
    """Scratch log-odds update for predicted rays: ``{cell: (L_prior, L_posterior)}``.

    A predicted miss is only applied to cells not already leaning occupied
    (``L <= 0``); a free-looking ray through a cell believed occupied carries
    no evidence about it in expectation.
    """
    post: Dict[Cell, float] = {}
    prior: Dict[Cell, float] = {}
    L = grid.log_odds
    lm, lh = noise.l_miss, noise.l_hit
    for er in expected:
        for c in er.miss_cells:
            if c not in post:
                prior[c] = post[c] = float(L[c])
            if post[c] <= 0.0:
                post[c] = _clamped(post[c] + lm)
        if er.hit_cell is not None:
            c = er.hit_cell
            if c not in post:
                prior[c] = post[c] = float(L[c])
            post[c] = _clamped(post[c] + lh)
    return {c: (prior[c], post[c]) for c in post}


def expected_information_gain(action: TactileAction, grid: OccupancyGrid, sensor: SensorModel,
                              noise: SensorNoiseParams, occupied_threshold: float = 0.7) -> float:
    """Prior minus predicted posterior entropy (bits) over the cells the action observes."""
    changes = simulate_posterior(grid, expected_measurement(action, grid, sensor, occupied_threshold), noise)
    if not changes:
        return 0.0
    vals = np.array(list(changes.values()))
    return float(np.sum(entropy_from_log_odds(vals[:, 0]) - entropy_from_log_odds(vals[:, 1])))


def select_nbt(candidates: Sequence[TactileAction], grid: OccupancyGrid, sensor: SensorModel,
               noise: SensorNoiseParams, occupied_threshold: float = 0.7):
    """Candidate with the largest expected gain; ties go to the lowest index."""
    if not candidates:
        raise PlannerError("select_nbt needs at least one candidate")
    gains = np.array([expected_information_gain(a, grid, sensor, noise, occupied_threshold)
                      for a in candidates])
    best = int(np.argmax(gains))
    return candidates[best], float(gains[best])


__all__ = [
    "TouchAction", "PinchAction", "SensorModel", "PlannerConfig", "RayGroup", "ExpectedRay",
    "action_ray_groups", "sample_candidate_actions", "expected_measurement",
    "expected_information_gain", "select_nbt", "simulate_posterior", "log_odds_to_prob",
]
