"""Self-supervised training: sparse voxel subsamples in, dense normalised clouds as targets."""

from __future__ import annotations

import csv
import io
import logging
from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple

import numpy as np

from ..errors import GeometryError, ModelError, TrainingDivergedError
from ..geometry import PointCloud, TriangleMesh, normalize_to_unit_cube, sample_surface, voxel_subsample, \
    voxel_size_for_count
from ..metrics import chamfer_distance
from ..rng import derive_seed, make_rng
from .model import PRESETS, Architecture, ModelParams, chamfer_loss_and_grad, forward_batch, init_params

log = logging.getLogger(__name__)

DIVERGENCE_LOSS = 1e6
HISTORY_COLUMNS = ("epoch", "train_loss", "val_loss", "val_cd")


@dataclass(frozen=True)
class DatasetConfig:
    n_in: int = 2048
    target_lo: int = 40
    target_hi: int = 120
    categories: Tuple[str, ...] = ("cylinder",)
    seed: int = 0

    def __post_init__(self):
        if not 1 <= self.target_lo <= self.target_hi <= self.n_in:
            raise ModelError("need 1 <= target_lo <= target_hi <= n_in")


@dataclass
class Sample:
    name: str
    cloud: PointCloud  # normalised to the unit cube
    scale: float
    offset: np.ndarray


@dataclass
class DatasetReport:
    samples: List[Sample]
    skipped: List[Tuple[str, str]] = field(default_factory=list)


def generate_dataset(cfg: DatasetConfig, meshes: Sequence[Tuple[str, TriangleMesh]]) -> DatasetReport:
    """Sample ``n_in`` surface points per mesh and normalise each cloud to ``[0, 1]^3``."""
    if not meshes:
        raise ModelError("generate_dataset needs at least one mesh")
    out = DatasetReport([])
    for i, (name, mesh) in enumerate(meshes):
        try:
            cloud = sample_surface(mesh, cfg.n_in, derive_seed(cfg.seed, "dataset", i))
            norm, s, off = normalize_to_unit_cube(cloud)
        except GeometryError as exc:
            log.warning("skipping degenerate mesh %s: %s", name, exc)
            out.skipped.append((name, str(exc)))
            continue
        out.samples.append(Sample(name, norm, s, off))
    return out


def draw_target(rng: np.random.Generator, lo: int, hi: int) -> int:
    return int(rng.integers(lo, hi + 1))


def sparse_input(cloud: PointCloud, target: int, seed: int) -> PointCloud:
    """Voxel subsample of ``cloud`` with a point count close to ``target``."""
    size = voxel_size_for_count(cloud, target, seed, iterations=24)
    return voxel_subsample(cloud, size, seed)


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 1e-4
    batch_size: int = 8
    alpha: float = 100.0
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    bn_decay_start: float = 0.5
    bn_decay_end: float = 0.99
    bn_decay_step: int = 200_000  # samples per halving of (1 - decay)
    epochs: int = 200
    seed: int = 0
    preset: str = "paper"
    target_lo: int = 40
    target_hi: int = 120

    def __post_init__(self):
        if not self.alpha > 0:
            raise ModelError("alpha must be positive")
        if self.batch_size < 2:
            raise ModelError("batch_size must be >= 2 (batch normalisation)")
        if self.lr < 0 or self.epochs < 0:
            raise ModelError("lr and epochs must be non-negative")
        if self.preset not in PRESETS:
            raise ModelError(f"unknown preset {self.preset!r}")

    @property
    def arch(self) -> Architecture:
        return PRESETS[self.preset]

    @property
    def n_out(self) -> int:
        return self.arch.n_out


def bn_decay(cfg: TrainConfig, samples_seen: int) -> float:
    """Staircase schedule moving the running-statistics decay from start towards end."""
    momentum = (1.0 - cfg.bn_decay_start) * 0.5 ** (samples_seen // cfg.bn_decay_step)
    return min(cfg.bn_decay_end, 1.0 - momentum)


class Adam:
    def __init__(self, params: dict, lr: float, beta1: float, beta2: float, eps: float):
        self.lr, self.b1, self.b2, self.eps = lr, beta1, beta2, eps
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}
        self.t = 0

    def step(self, params: dict, grads: dict) -> None:
        self.t += 1
        c1 = 1.0 - self.b1 ** self.t
        c2 = 1.0 - self.b2 ** self.t
        for k in sorted(params):
            g = grads[k]
            self.m[k] = self.b1 * self.m[k] + (1.0 - self.b1) * g
            self.v[k] = self.b2 * self.v[k] + (1.0 - self.b2) * g * g
            params[k] -= self.lr * (self.m[k] / c1) / (np.sqrt(self.v[k] / c2) + self.eps)


def fold_running_stats(mp: ModelParams, stats, decay: float) -> None:
    for name, mu, var, count in stats:
        m = mp.buffers[f"{name}.bn.running_mean"]
        v = mp.buffers[f"{name}.bn.running_var"]
        unbiased = var * count / max(count - 1, 1)
        m *= decay
        m += (1.0 - decay) * mu
        v *= decay
        v += (1.0 - decay) * unbiased


@dataclass
class HistoryRow:
    epoch: int
    train_loss: float
    val_loss: float
    val_cd: float


def evaluate(mp: ModelParams, pairs, alpha: float) -> Tuple[float, float]:
    """Eval-mode ``(alpha * mean CD, mean CD)`` over ``(input, target)`` pairs."""
    if not pairs:
        return float("nan"), float("nan")
    cds = []
    for s in range(0, len(pairs), 16):
        chunk = pairs[s:s + 16]
        preds = forward_batch(mp, [p[0] for p in chunk], "eval")
        cds += [chamfer_distance(pr, p[1].points) for pr, p in zip(preds, chunk)]
    cd = float(np.mean(cds))
    return alpha * cd, cd


def _epoch_inputs(samples: Sequence[Sample], cfg: TrainConfig, epoch: int):
    rng = make_rng(cfg.seed, "targets", epoch)
    return [(sparse_input(s.cloud, draw_target(rng, cfg.target_lo, cfg.target_hi),
                          derive_seed(cfg.seed, "subsample", epoch, i)), s.cloud)
            for i, s in enumerate(samples)]


def validation_pairs(samples: Sequence[Sample], cfg: TrainConfig):
    rng = make_rng(cfg.seed, "val_targets")
    return [(sparse_input(s.cloud, draw_target(rng, cfg.target_lo, cfg.target_hi),
                          derive_seed(cfg.seed, "val_subsample", i)), s.cloud)
            for i, s in enumerate(samples)]


def train(train_set: Sequence[Sample], cfg: TrainConfig, val_set: Sequence[Sample] = (),
          init: Optional[ModelParams] = None, progress=None) -> Tuple[ModelParams, List[HistoryRow]]:
    """Adam on ``alpha * Chamfer`` with fresh sparse inputs every epoch.

    Row 0 of the history is the untrained model. Batches smaller than 2 are
    dropped. Raises :class:`TrainingDivergedError` (carrying the history so far)
    when a batch loss exceeds ``1e6``.
    """
    if len(train_set) < 2:
        raise ModelError("training needs at least 2 samples")
    mp = init.copy() if init is not None else init_params(cfg.arch, cfg.seed)
    opt = Adam(mp.params, cfg.lr, cfg.beta1, cfg.beta2, cfg.adam_eps)
    val_pairs = validation_pairs(val_set, cfg)
    history: List[HistoryRow] = []
    train_eval = validation_pairs(train_set, cfg)
    tl, _ = evaluate(mp, train_eval, cfg.alpha)
    vl, vcd = evaluate(mp, val_pairs, cfg.alpha)
    history.append(HistoryRow(0, tl, vl, vcd))
    seen = 0
    for epoch in range(1, cfg.epochs + 1):
        pairs = _epoch_inputs(train_set, cfg, epoch)
        order = make_rng(cfg.seed, "shuffle", epoch).permutation(len(pairs))
        losses = []
        for s in range(0, len(order), cfg.batch_size):
            idx = order[s:s + cfg.batch_size]
            if len(idx) < 2:
                continue
            batch = [pairs[i] for i in idx]
            loss, grads, stats = chamfer_loss_and_grad(mp, batch, cfg.alpha, train=True)
            if not np.isfinite(loss) or loss > DIVERGENCE_LOSS:
                raise TrainingDivergedError(f"training diverged at epoch {epoch} (loss {loss:g})", history)
            opt.step(mp.params, grads)
            fold_running_stats(mp, stats, bn_decay(cfg, seen))
            seen += len(idx)
            losses.append(loss)
        vl, vcd = evaluate(mp, val_pairs, cfg.alpha)
        history.append(HistoryRow(epoch, float(np.mean(losses)), vl, vcd))
        if progress is not None:
            progress(history[-1])
    return mp, history


def history_csv(history: Sequence[HistoryRow]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(HISTORY_COLUMNS)
    for h in history:
        w.writerow([h.epoch, f"{h.train_loss:.9g}", f"{h.val_loss:.9g}", f"{h.val_cd:.9g}"])
    return buf.getvalue()
