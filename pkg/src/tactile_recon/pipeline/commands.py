"""The four pipeline stages. Each writes one directory below ``output_dir`` with its own manifest.

Layout::

    dataset/  meshes/*.obj, clouds/*.ply
    model/    model.actr, history.csv
    explore/  <object>/<policy>/seed_<n>/{log.csv, tactile.ply, recon/k<kk>.ply}, failures.csv
    eval/     reconstruction.csv, curves.csv, pose_<level>_<method>.csv, summary.{csv,txt},
              missing.csv, curves.svg
"""

from __future__ import annotations

import logging
from collections import defaultdict
from pathlib import Path
from typing import Any, Dict, List

import numpy as np

from ..autoencoder.model import load_params, save_params
from ..autoencoder.train import DatasetConfig, Sample, TrainConfig, generate_dataset, history_csv, train
from ..errors import ConfigError, ExplorationError, GeometryError, ModelError, TrainingDivergedError
from ..geometry import PointCloud, sample_surface
from ..meshio import load_ply, save_obj, save_ply
from ..occupancy import GridConfig, SensorNoiseParams
from ..planner import PlannerConfig, SensorModel
from ..rng import derive_seed
from ..shapes import generate_category, shipped_mesh
from ..tactile_sim import ExplorationConfig, episode_log_csv, run_episode
from ..tiqf import RESULT_COLUMNS, result_row
from . import experiments as ex
from .manifest import Manifest, load_manifest
from .report import SUMMARY_COLUMNS, csv_text, line_plot_svg, quartiles, summary_rows, summary_text

log = logging.getLogger(__name__)

CURVE_KS = (10, 15, 20)
RECON_COLUMNS = ("object", "policy", "seed", "method", "n_points", "cd", "hd", "emd")
CURVE_COLUMNS = ("object", "policy", "seed", "k", "n_points", "cd")
FAILURE_COLUMNS = ("object", "policy", "seed", "stage", "message")


def stage_dir(cfg: Dict[str, Any], stage: str) -> Path:
    return Path(cfg["output_dir"]) / stage


def _fresh(path: Path) -> Path:
    path.mkdir(parents=True, exist_ok=True)
    return path


# ---------------------------------------------------------------------------
# gen-dataset
# ---------------------------------------------------------------------------


def cmd_gen_dataset(cfg: Dict[str, Any]) -> Path:
    d = cfg["dataset"]
    root = _fresh(stage_dir(cfg, "dataset"))
    for sub in ("meshes", "clouds"):
        (root / sub).mkdir(exist_ok=True)
    cats = sorted(d["categories"])
    meshes, split, category = [], {}, {}
    for cat in cats:
        for i, (name, mesh) in enumerate(generate_category(cat, d["categories"][cat],
                                                           derive_seed(cfg["seed"], "category", cat))):
            meshes.append((name, mesh))
            split[name] = "val" if (i + 1) % d["val_every"] == 0 else "train"
            category[name] = cat
    lo, hi = d["target_range"]
    report = generate_dataset(DatasetConfig(d["n_in"], lo, hi, tuple(cats), cfg["seed"]), meshes)
    man = Manifest(root, "dataset", {"seed": cfg["seed"], "n_in": d["n_in"]})
    samples = []
    kept = {s.name for s in report.samples}
    for name, mesh in meshes:
        if name not in kept:
            continue
        path = root / "meshes" / f"{name}.obj"
        save_obj(mesh, path)
        man.add(path)
    for s in report.samples:
        path = root / "clouds" / f"{s.name}.ply"
        save_ply(s.cloud, path)
        man.add(path)
        samples.append({"name": s.name, "category": category[s.name], "split": split[s.name],
                        "n_points": len(s.cloud), "scale": s.scale, "offset": [float(v) for v in s.offset]})
    man.meta["counts"] = {c: sum(1 for s in samples if s["category"] == c) for c in cats}
    man.meta["samples"] = samples
    man.meta["skipped"] = [{"name": n, "reason": r} for n, r in report.skipped]
    man.save()
    return root


def load_dataset(cfg: Dict[str, Any]):
    root = stage_dir(cfg, "dataset")
    try:
        meta = load_manifest(root)["meta"]
    except FileNotFoundError:
        raise ConfigError(f"no dataset at {root}; run gen-dataset first") from None
    splits = {"train": [], "val": []}
    for s in meta["samples"]:
        cloud = load_ply(root / "clouds" / f"{s['name']}.ply")
        splits[s["split"]].append(Sample(s["name"], cloud, s["scale"], np.asarray(s["offset"])))
    return splits["train"], splits["val"]


# ---------------------------------------------------------------------------
# train
# ---------------------------------------------------------------------------


def train_config(cfg: Dict[str, Any]) -> TrainConfig:
    t = cfg["train"]
    lo, hi = cfg["dataset"]["target_range"]
    return TrainConfig(lr=t["lr"], batch_size=t["batch_size"], alpha=t["alpha"], beta1=t["beta1"],
                       beta2=t["beta2"], bn_decay_start=t["bn_decay"]["start"], bn_decay_end=t["bn_decay"]["end"],
                       bn_decay_step=t["bn_decay"]["step"], epochs=t["epochs"], seed=cfg["seed"],
                       preset=cfg["preset"], target_lo=lo, target_hi=hi)


def cmd_train(cfg: Dict[str, Any]) -> Path:
    train_set, val_set = load_dataset(cfg)
    tc = train_config(cfg)
    root = _fresh(stage_dir(cfg, "model"))
    man = Manifest(root, "model", {"seed": cfg["seed"], "preset": cfg["preset"], "epochs": tc.epochs,
                                   "n_train": len(train_set), "n_val": len(val_set)})
    try:
        mp, history = train(train_set, tc, val_set,
                            progress=lambda h: log.info("epoch %d train %.4g val CD %.4g",
                                                        h.epoch, h.train_loss, h.val_cd))
    except TrainingDivergedError as exc:
        man.write_text("history.csv", history_csv(exc.history))
        man.meta["status"] = "diverged"
        man.save()
        raise
    save_params(mp, root / "model.actr")
    man.add(root / "model.actr")
    man.write_text("history.csv", history_csv(history))
    man.meta["status"] = "ok"
    man.meta["final_val_cd"] = history[-1].val_cd
    man.save()
    return root


# ---------------------------------------------------------------------------
# explore
# ---------------------------------------------------------------------------


def _objects(cfg: Dict[str, Any]):
    out = []
    for name in cfg["exploration"]["objects"]:
        try:
            out.append((name, shipped_mesh(name)))
        except GeometryError as exc:
            raise ConfigError(str(exc)) from None
    return out


def episode_setup(cfg: Dict[str, Any], mesh):
    e, g, s = cfg["exploration"], cfg["grid"], cfg["sensor"]
    grid = GridConfig.around_footprint(mesh.aabb(), g["resolution"], g["height"], g["margin"])
    sensor = SensorModel(s["rows"], s["cols"], s["pitch"], s["pinch_half_opening"])
    noise = SensorNoiseParams(cfg["noise"]["p_hit"], cfg["noise"]["p_miss"])
    planner = PlannerConfig(cfg["planner"]["n_candidates"], cfg["planner"]["occupied_threshold"], seed=cfg["seed"])
    ecfg = ExplorationConfig(e["n_init"], e["n_min"], e["max_actions"], e["contact_threshold"])
    return ecfg, grid, sensor, noise, planner


def episode_seed(cfg: Dict[str, Any], obj: str, seed: int) -> int:
    return derive_seed(cfg["seed"], "episode", obj, seed)


def cell_dir(obj: str, policy: str, seed: int) -> str:
    return f"{obj}/{policy}/seed_{seed}"


def cmd_explore(cfg: Dict[str, Any]) -> Path:
    model_path = stage_dir(cfg, "model") / "model.actr"
    if not model_path.exists():
        raise ConfigError(f"no model at {model_path}; run train first")
    mp = load_params(model_path)
    e = cfg["exploration"]
    root = _fresh(stage_dir(cfg, "explore"))
    man = Manifest(root, "explore", {"seed": cfg["seed"], "objects": e["objects"], "policies": e["policies"],
                                     "seeds": e["seeds"], "inference_from": e["inference_from"]})
    failures = []
    for obj, mesh in _objects(cfg):
        ecfg, grid, sensor, noise, planner = episode_setup(cfg, mesh)
        for policy in e["policies"]:
            for seed in e["seeds"]:
                rel = cell_dir(obj, policy, seed)
                try:
                    ep = run_episode(mesh, policy, ecfg, grid, episode_seed(cfg, obj, seed), sensor, noise, planner)
                except ExplorationError as exc:
                    log.warning("%s: %s", rel, exc)
                    failures.append([obj, policy, str(seed), "bootstrap", str(exc)])
                    continue
                man.write_text(f"{rel}/log.csv", episode_log_csv(ep.log))
                save_ply(ep.cloud, root / rel / "tactile.ply")
                man.add(root / rel / "tactile.ply")
                (root / rel / "recon").mkdir(exist_ok=True)
                for k in range(e["inference_from"], len(ep.log) + 1):
                    partial = ep.cloud_after(k)
                    try:
                        recon = ex.actor_reconstruct(mp, partial, ecfg.n_min)
                    except (ModelError, GeometryError) as exc:
                        failures.append([obj, policy, str(seed), f"recon_k{k:02d}", str(exc)])
                        continue
                    path = root / rel / "recon" / f"k{k:02d}.ply"
                    save_ply(recon, path)
                    man.add(path)
    man.write_text("failures.csv", csv_text(FAILURE_COLUMNS, failures))
    man.meta["n_failures"] = len(failures)
    man.save()
    return root


# ---------------------------------------------------------------------------
# eval
# ---------------------------------------------------------------------------


def _last_recon(cell: Path):
    files = sorted((cell / "recon").glob("k*.ply")) if (cell / "recon").is_dir() else []
    return (files[-1], int(files[-1].stem[1:])) if files else (None, 0)


def cmd_eval(cfg: Dict[str, Any]) -> Path:
    e, ev = cfg["exploration"], cfg["eval"]
    explore = stage_dir(cfg, "explore")
    root = _fresh(stage_dir(cfg, "eval"))
    man = Manifest(root, "eval", {"seed": cfg["seed"]})
    missing: List[List[str]] = []
    recon_rows, curve_rows = [], []
    pose_rows = {(lvl, m): [] for lvl in ("instance", "category") for m in ex.POSE_METHODS}
    groups = defaultdict(list)
    tiqf_instance = ex.tiqf_config(cfg["tiqf"], "fixed")
    tiqf_category = ex.tiqf_config(cfg["tiqf"], "refine")

    for obj, mesh in _objects(cfg):
        gt = sample_surface(mesh, ev["gt_points"], derive_seed(cfg["seed"], "gt", obj))
        emd_seed = derive_seed(cfg["seed"], "emd", obj)

        # instance level: ground-truth cloud as the model, random surface points as the scene
        for n in ev["pose_points"]:
            for trial in range(ev["pose_trials"]):
                scene = ex.scene_subset(gt, n, derive_seed(cfg["seed"], "scene", obj, n, trial))
                for method in ex.POSE_METHODS:
                    rng = ex.trial_rng(cfg["seed"], "instance", obj, n, trial)
                    pt = ex.pose_trial(scene, gt.points, gt.points, method, tiqf_instance, rng,
                                       ev["init_angle_deg"], ev["init_offset"])
                    pose_rows[("instance", method)].append(result_row(obj, "gt", n, pt.result, pt.adi))
                    groups[("pose_adi", f"instance_n{n}", method)].append(pt.adi)

        for policy in e["policies"]:
            for seed in e["seeds"]:
                rel = cell_dir(obj, policy, seed)
                cell = explore / rel
                if not (cell / "tactile.ply").exists():
                    missing.append([f"explore/{rel}/tactile.ply", "episode output not found"])
                    continue
                tactile = load_ply(cell / "tactile.ply")
                for k in range(e["inference_from"], e["max_actions"] + 1):
                    path = cell / "recon" / f"k{k:02d}.ply"
                    if not path.exists():
                        continue
                    cd = ex.distances(load_ply(path), gt, ev["emd_points"], emd_seed)["cd"]
                    curve_rows.append([obj, policy, str(seed), str(k), str(len(tactile)), cd])
                    if k in CURVE_KS:
                        groups[("curve_cd", f"k{k:02d}", policy)].append(cd)
                last, _ = _last_recon(cell)
                if last is None:
                    missing.append([f"explore/{rel}/recon", "no reconstruction"])
                    continue
                actor = load_ply(last)
                gp = ex.safe_gpis(tactile, cfg["gpis"])
                for method, pred in (("actor", actor), ("gpis", gp)):
                    d = ex.distances(pred, gt, ev["emd_points"], emd_seed)
                    recon_rows.append([obj, policy, str(seed), method, str(len(pred)), d["cd"], d["hd"], d["emd"]])
                    for metric in ("cd", "hd", "emd"):
                        groups[(metric, policy, method)].append(d[metric])

                # category level: the reconstruction is the model, the tactile cloud the scene
                for n in ev["pose_points"]:
                    scene = ex.scene_subset(tactile, n, derive_seed(cfg["seed"], "cat_scene", obj, policy, seed, n))
                    for method in ex.POSE_METHODS:
                        rng = ex.trial_rng(cfg["seed"], "category", obj, policy, seed, n)
                        pt = ex.pose_trial(scene, actor.points, gt.points, method, tiqf_category, rng,
                                           ev["init_angle_deg"], ev["init_offset"])
                        pose_rows[("category", method)].append(result_row(obj, policy, n, pt.result, pt.adi))
                        groups[("pose_adi", f"category_n{n}", method)].append(pt.adi)

    man.write_text("reconstruction.csv", csv_text(RECON_COLUMNS, recon_rows))
    man.write_text("curves.csv", csv_text(CURVE_COLUMNS, curve_rows))
    for (lvl, method), rows in sorted(pose_rows.items()):
        man.write_text(f"pose_{lvl}_{method}.csv", csv_text(RESULT_COLUMNS, rows))
    summary = []
    for section, metric in (("reconstruction", "cd"), ("reconstruction", "hd"), ("reconstruction", "emd"),
                            ("exploration", "curve_cd"), ("pose", "pose_adi")):
        sel = {(g, m): v for (mt, g, m), v in groups.items() if mt == metric}
        summary += list(summary_rows(section, metric, sel))
    man.write_text("summary.csv", csv_text(SUMMARY_COLUMNS, summary))
    man.write_text("summary.txt", summary_text(summary))
    man.write_text("missing.csv", csv_text(("path", "reason"), missing))
    if ev["plots"]:
        by_policy = defaultdict(lambda: defaultdict(list))
        for r in curve_rows:
            by_policy[r[1]][int(r[3])].append(r[5])
        series = {p: [(float(k), quartiles(v)[1]) for k, v in sorted(ks.items())] for p, ks in by_policy.items()}
        man.write_text("curves.svg", line_plot_svg(series, "Reconstruction CD vs actions", "actions",
                                                   "median CD [m]"))
    man.meta["n_missing"] = len(missing)
    man.save()
    return root


COMMANDS = {"gen-dataset": cmd_gen_dataset, "train": cmd_train, "explore": cmd_explore, "eval": cmd_eval}
