"""Geometric ground-truth simulator for touch and pinch actions and exploration episodes."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple

import numpy as np

from .errors import ExplorationError
from .geometry import PointCloud, Ray, TriangleMesh, cast_rays
from .occupancy import GridConfig, OccupancyGrid, SensorNoiseParams, apply_measurement, grid_entropy
from .planner import (
    LATERAL_FACES,
    PinchAction,
    PlannerConfig,
    RayGroup,
    SensorModel,
    TactileAction,
    TouchAction,
    action_ray_groups,
    face_point,
    sample_candidate_actions,
    sample_touch,
    select_nbt,
)
from .rng import derive_seed, make_rng

POLICIES = ("active", "random", "uniform")
BASELINE_CELL = 0.03
LOG_COLUMNS = ("step", "action_kind", "sx", "sy", "sz", "dx", "dy", "dz",
               "gain", "n_new_contacts", "n_total", "grid_entropy_bits")


@dataclass(frozen=True)
class Contact:
    position: np.ndarray
    normal: np.ndarray
    action_id: int


@dataclass(frozen=True)
class ExplorationConfig:
    n_init: int = 20
    n_min: int = 20
    max_actions: int = 20
    contact_threshold: float = 1.1  # force threshold; the geometric contact model ignores it
    stop_at_points: Optional[int] = None

    def __post_init__(self):
        if self.n_init < 1:
            raise ExplorationError("n_init must be >= 1")
        if self.n_min < self.n_init:
            raise ExplorationError("n_min must be >= n_init")
        if self.max_actions < 1:
            raise ExplorationError("max_actions must be >= 1")


@dataclass
class Observation:
    """One taxel ray as actually executed; ``hit_t=None`` means free space up to ``ray.max_range``."""

    ray: Ray
    hit_t: Optional[float]


@dataclass
class ActionOutcome:
    contacts: List[Contact] = field(default_factory=list)
    observations: List[Observation] = field(default_factory=list)


def _execute_group(group: RayGroup, mesh: TriangleMesh, gap_tol: float, action_id: int,
                   out: ActionOutcome) -> None:
    """Guarded rigid motion of one patch: stop at the nearest taxel hit."""
    n = len(group.origins)
    dirs = np.broadcast_to(group.direction, (n, 3))
    ts, tri = cast_rays(group.origins, dirs, group.max_range, mesh)
    if not np.any(np.isfinite(ts)):
        out.observations.extend(Observation(r, None) for r in group.rays())
        return
    t_stop = float(ts.min())
    for k, o in enumerate(group.origins):
        if ts[k] - t_stop < gap_tol:
            pos = o + ts[k] * group.direction
            out.contacts.append(Contact(pos, mesh.face_normals[tri[k]].copy(), action_id))
            out.observations.append(Observation(Ray(o, group.direction, group.max_range), float(ts[k])))
        elif t_stop > 0:
            # the patch halted before this taxel found the surface: free up to the stop pose
            out.observations.append(Observation(Ray(o, group.direction, t_stop), None))


def execute_action(action: TactileAction, mesh: TriangleMesh, sensor: SensorModel,
                   grid_config: GridConfig, action_id: int = 0) -> ActionOutcome:
    gap_tol = 0.5 * grid_config.resolution
    out = ActionOutcome()
    for group in action_ray_groups(action, sensor, grid_config):
        _execute_group(group, mesh, gap_tol, action_id, out)
    return out


def execute_touch(action: TouchAction, mesh: TriangleMesh, sensor: SensorModel,
                  grid_config: GridConfig, action_id: int = 0) -> List[Contact]:
    """Contacts of a guarded horizontal touch; ``[]`` when nothing is within range."""
    return execute_action(action, mesh, sensor, grid_config, action_id).contacts


def execute_pinch(action: PinchAction, mesh: TriangleMesh, sensor: SensorModel,
                  grid_config: GridConfig, action_id: int = 0) -> List[Contact]:
    """Contacts of an antipodal pinch; each finger stops at its own first contact."""
    return execute_action(action, mesh, sensor, grid_config, action_id).contacts


def apply_outcome(grid: OccupancyGrid, outcome: ActionOutcome, noise: SensorNoiseParams) -> None:
    for ob in outcome.observations:
        if ob.ray.max_range > 0:
            apply_measurement(grid, ob.ray, ob.hit_t, noise)


def baseline_cells(grid_config: GridConfig, sensor: SensorModel, cell: float = BASELINE_CELL):
    """Touch targets at the centres of ``cell x cell`` patches tiling the lateral grid faces.

    Ordered bottom row first; within a row face by face, left to right.
    """
    b = grid_config.bounds
    ext = b.extent
    nz = max(1, int(np.ceil(ext[2] / cell - 1e-9)))
    out = []
    for iz in range(nz):
        z = b.min[2] + min((iz + 0.5) * cell, ext[2] - sensor.half_height)
        for face in LATERAL_FACES:
            width = ext[1] if face[0] == "x" else ext[0]
            nu = max(1, int(np.ceil(width / cell - 1e-9)))
            for iu in range(nu):
                u = min(1.0, (iu + 0.5) * cell / width)
                start, d = face_point(grid_config, face, u, z)
                out.append(TouchAction(start, d))
    return out


@dataclass
class LogRecord:
    step: int
    action_kind: str
    start: np.ndarray
    direction: np.ndarray
    gain: float
    n_new_contacts: int
    n_total: int
    grid_entropy_bits: float

    def row(self) -> List[str]:
        return [str(self.step), self.action_kind,
                *(f"{v:.9g}" for v in self.start), *(f"{v:.9g}" for v in self.direction),
                f"{self.gain:.9g}", str(self.n_new_contacts), str(self.n_total),
                f"{self.grid_entropy_bits:.9f}"]


@dataclass
class Episode:
    cloud: PointCloud
    grid: OccupancyGrid
    log: List[LogRecord]
    contacts: List[Contact]
    initial_entropy: float

    def entropy_reduction(self, k: int) -> float:
        """Grid-entropy reduction after the first ``k`` actions (clipped to the log length)."""
        if not self.log:
            return 0.0
        k = min(k, len(self.log))
        return self.initial_entropy - self.log[k - 1].grid_entropy_bits

    def cloud_after(self, k: int) -> PointCloud:
        keep = [c for c in self.contacts if c.action_id < k]
        return _contacts_to_cloud(keep)


def _contacts_to_cloud(contacts: Sequence[Contact]) -> PointCloud:
    if not contacts:
        return PointCloud(np.zeros((0, 3)), np.zeros((0, 3)))
    return PointCloud(np.array([c.position for c in contacts]), np.array([c.normal for c in contacts]))


def _action_pose(action: TactileAction) -> Tuple[np.ndarray, np.ndarray]:
    if isinstance(action, TouchAction):
        return action.start, action.direction
    return action.start, action.closing_axis


def run_episode(mesh: TriangleMesh, policy: str, cfg: ExplorationConfig, grid_config: GridConfig,
                seed: int, sensor: Optional[SensorModel] = None,
                noise: Optional[SensorNoiseParams] = None,
                planner: Optional[PlannerConfig] = None) -> Episode:
    """Bootstrap with random touches, then explore with ``policy`` until ``max_actions``.

    The episode also ends once ``cfg.stop_at_points`` contacts are collected
    (when set). Raises :class:`ExplorationError` if the bootstrap finds no
    contact at all, or exhausts ``10 * n_init`` attempts.
    """
    if policy not in POLICIES:
        raise ExplorationError(f"unknown policy {policy!r}; expected one of {POLICIES}")
    sensor = sensor or SensorModel()
    noise = noise or SensorNoiseParams()
    planner = planner or PlannerConfig()
    # the bootstrap stream ignores the policy so that policies start from the same touches
    boot_rng = make_rng(seed, "bootstrap")
    rng = make_rng(seed, "policy", policy)
    grid = OccupancyGrid(grid_config)
    h0 = grid_entropy(grid)
    contacts: List[Contact] = []
    log: List[LogRecord] = []

    def step(action: TactileAction, gain: float) -> None:
        k = len(log)
        res = execute_action(action, mesh, sensor, grid_config, action_id=k)
        apply_outcome(grid, res, noise)
        contacts.extend(res.contacts)
        s, d = _action_pose(action)
        log.append(LogRecord(k, action.kind, s, d, gain, len(res.contacts), len(contacts),
                             grid_entropy(grid)))

    def done() -> bool:
        if len(log) >= cfg.max_actions:
            return True
        return cfg.stop_at_points is not None and len(contacts) >= cfg.stop_at_points

    attempts = 0
    while len(contacts) < cfg.n_init and not done():
        if attempts >= 10 * cfg.n_init:
            raise ExplorationError(
                f"bootstrap collected {len(contacts)} < {cfg.n_init} points in {attempts} attempts"
            )
        attempts += 1
        step(sample_touch(grid_config, sensor, boot_rng), float("nan"))
    if not contacts:
        raise ExplorationError("bootstrap found no contacts; object not reachable")

    cells = baseline_cells(grid_config, sensor)
    unvisited = list(range(len(cells)))
    sweep = 0
    while not done():
        if policy == "active":
            pc = PlannerConfig(planner.n_candidates, planner.occupied_threshold,
                               derive_seed(seed, planner.seed, len(log)), planner.approach_clearance)
            cands = sample_candidate_actions(grid, pc, sensor)
            action, gain = select_nbt(cands, grid, sensor, noise, planner.occupied_threshold)
            step(action, gain)
        elif policy == "random":
            if not unvisited:
                unvisited = list(range(len(cells)))
            j = unvisited.pop(int(rng.integers(len(unvisited))))
            step(cells[j], float("nan"))
        else:
            step(cells[sweep % len(cells)], float("nan"))
            sweep += 1
    return Episode(_contacts_to_cloud(contacts), grid, log, contacts, h0)


def episode_log_csv(log: Sequence[LogRecord]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(LOG_COLUMNS)
    for rec in log:
        w.writerow(rec.row())
    return buf.getvalue()


def write_episode_log(log: Sequence[LogRecord], path) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write(episode_log_csv(log))
