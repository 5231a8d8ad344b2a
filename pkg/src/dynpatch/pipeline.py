"""Stage runner: datasets, models, patches, reports.

Every stage has a key: the SHA-256 of its own config sections and the keys
of the stages it reads from. A finished stage writes ``stamps/<stage>.json``
with that key and the hashes of its outputs. A stage refuses to run when
an upstream stamp is missing or was produced under a different key, and
``all`` skips stages whose stamp is current.
"""
from __future__ import annotations

import dataclasses
import logging
import time
from pathlib import Path
from typing import Callable

import numpy as np
import torch

from . import config as C
from .artifacts import read_json, sha256_file, sha256_json, write_json
from .attack import (STATIC, ClusterModel, _FrameCache, build_patchset, cluster_frames, evaluate_objective,
                     frame_features, kmeans_fit, load_patchset, save_patchset)
from .detector import eigencam_heatmap, load_detector, save_detector, train_detector
from .errors import DependencyError, ValidationError
from .evaluate import (METHODS, attacked_image, compare_dynamic_static, evaluate_frames, method_patch,
                       render_table, report_from_logs, write_logs)
from .plots import plot_objective_curves, plot_success_bars, save_heatmap_overlay
from .scenesim import (generate_driving_dataset, generate_screen_pairs, load_manifest, save_manifest,
                       update_cluster_ids)
from .sitnet import FeatureExtractor, load_sitnet, save_sitnet, train_sitnet

log = logging.getLogger(__name__)

STAGES = ("simulate", "train-detector", "train-sitnet", "cluster", "optimize", "evaluate", "heatmap")
ALL = "all"
SPLITS = ("train", "similar", "unseen")

UPSTREAM = {
    "simulate": (),
    "train-detector": ("simulate",),
    "train-sitnet": ("train-detector",),
    "cluster": ("simulate",),
    "optimize": ("simulate", "train-detector", "train-sitnet", "cluster"),
    "evaluate": ("simulate", "train-detector", "train-sitnet", "optimize"),
    "heatmap": ("simulate", "train-detector", "train-sitnet", "optimize"),
}
SECTIONS = {
    "simulate": ("scenesim", "simulate"),
    "train-detector": ("detector",),
    "train-sitnet": ("scenesim", "sitnet"),
    "cluster": ("cluster",),
    "optimize": ("attack",),
    "evaluate": ("scenesim", "evaluate"),
    "heatmap": ("scenesim", "evaluate", "heatmap"),
}


def stage_keys(cfg: dict) -> dict[str, str]:
    keys: dict[str, str] = {}
    for stage in STAGES:
        keys[stage] = sha256_json({"stage": stage,
                                   "config": {s: cfg[s] for s in SECTIONS[stage]},
                                   "upstream": {u: keys[u] for u in UPSTREAM[stage]}})
    return keys


class Workspace:
    """Paths under the output root."""

    def __init__(self, root: str | Path):
        self.root = Path(root)

    def stamp(self, stage: str) -> Path:
        return self.root / "stamps" / f"{stage}.json"

    def manifest(self, name: str) -> Path:
        return self.root / "data" / f"{name}.jsonl"

    def scenario_manifest(self, scenario: str, split: str) -> Path:
        return self.manifest(f"{scenario}_{split}")

    @property
    def detector(self) -> Path:
        return self.root / "models" / "detector.arr"

    @property
    def sitnet(self) -> Path:
        return self.root / "models" / "sitnet.arr"

    def clusters(self, scenario: str) -> Path:
        return self.root / "clusters" / f"{scenario}.json"

    def clustered_manifest(self, scenario: str, split: str) -> Path:
        return self.root / "clusters" / f"{scenario}_{split}.jsonl"

    def patchset(self, scenario: str) -> Path:
        return self.root / "patches" / scenario

    def timings(self, stage: str) -> Path:
        return self.root / "timings" / f"{stage}.json"

    @property
    def reports(self) -> Path:
        return self.root / "reports"

    @property
    def plots(self) -> Path:
        return self.root / "plots"

    @property
    def heatmaps(self) -> Path:
        return self.root / "heatmaps"


def _hash_outputs(root: Path, paths: list[Path]) -> dict[str, str]:
    files = []
    for p in paths:
        files += sorted(q for q in p.rglob("*") if q.is_file()) if p.is_dir() else [p]
    return {str(f.relative_to(root)): sha256_file(f) for f in files}


def _check_upstream(ws: Workspace, stage: str, keys: dict[str, str]):
    # nearest producer first, so the error names the stage that makes the missing input
    for up in reversed(UPSTREAM[stage]):
        path = ws.stamp(up)
        if not path.exists():
            raise DependencyError(up, f"output of stage `{up}` needed by `{stage}`")
        if read_json(path)["key"] != keys[up]:
            raise DependencyError(up, f"current output of stage `{up}` (config changed) needed by `{stage}`")


def is_current(ws: Workspace, stage: str, keys: dict[str, str]) -> bool:
    path = ws.stamp(stage)
    if not path.exists():
        return False
    stamp = read_json(path)
    if stamp["key"] != keys[stage]:
        return False
    return all((ws.root / rel).exists() and sha256_file(ws.root / rel) == h for rel, h in stamp["outputs"].items())


# ---------------------------------------------------------------------------
# Stages
# ---------------------------------------------------------------------------

def _load_scenario(ws: Workspace, scenario: str, split: str):
    """Frames of one split with the cluster ids written by the cluster stage."""
    return load_manifest(ws.clustered_manifest(scenario, split)).frames


def stage_simulate(cfg: dict, ws: Workspace) -> list[Path]:
    scene = C.scene_config(cfg)
    sim = cfg["simulate"]
    out = []
    classes = scene.sign_classes
    for name in ("detector_train", "detector_val"):
        d = sim[name]
        spec = C.trajectory(cfg, d, name.split("_")[1], "detector", sign_classes=classes)
        man = generate_driving_dataset(scene, spec, int(d["n_frames"]), int(d["seed"]), require_screen=False)
        save_manifest(man, ws.manifest(name))
        out += [ws.manifest(name), ws.manifest(name).parent / f"{name}_images"]
        log.info("simulate: %s %d frames", name, len(man))
    for scenario in sim["scenarios"]:
        for split in SPLITS:
            d = sim[split]
            spec = C.trajectory(cfg, d, split, scenario)
            man = generate_driving_dataset(scene, spec, int(d["n_frames"]), int(d["seed"]))
            path = ws.scenario_manifest(scenario, split)
            save_manifest(man, path)
            out += [path, path.parent / f"{path.stem}_images"]
            log.info("simulate: %s/%s %d frames", scenario, split, len(man))
    return out


def stage_train_detector(cfg: dict, ws: Workspace) -> list[Path]:
    train = load_manifest(ws.manifest("detector_train")).frames
    val = load_manifest(ws.manifest("detector_val")).frames
    dcfg = C.detector_config(cfg)
    model, report = train_detector(train, dcfg, val, progress=True)
    save_detector(model, ws.detector, dataset_hash=sha256_file(ws.manifest("detector_train")),
                  extra={"val_map": report.val_map})
    rpath = ws.root / "models" / "detector_report.json"
    write_json(rpath, {"epoch_loss": report.epoch_loss, "val_map": report.val_map,
                       "per_class_ap": {str(k): v for k, v in report.per_class_ap.items()},
                       "n_train": len(train), "n_val": len(val), "seed": report.seed})
    log.info("train-detector: val mAP@0.5 %.4f", report.val_map)
    return [ws.detector, ws.detector.with_suffix(".json"), rpath]


def stage_train_sitnet(cfg: dict, ws: Workspace) -> list[Path]:
    scene = C.scene_config(cfg)
    scfg = C.sitnet_config(cfg)
    sec = cfg["sitnet"]
    pairs = generate_screen_pairs(scene, int(sec["n_pairs"]), int(sec["pairs_seed"]))
    extractor = FeatureExtractor.from_detector(load_detector(ws.detector), cut=scfg.feature_cut)
    model, curve = train_sitnet(pairs, extractor, C.loss_weights(cfg), config=scfg)
    save_sitnet(model, ws.sitnet, extra={"n_pairs": len(pairs)})
    cpath = ws.root / "models" / "sitnet_curve.json"
    write_json(cpath, dataclasses.asdict(curve))
    log.info("train-sitnet: val MSE %.5f (baseline %.5f)", curve.val_mse[-1], curve.baseline_val_mse)
    return [ws.sitnet, ws.sitnet.with_suffix(".json"), cpath]


def stage_cluster(cfg: dict, ws: Workspace) -> list[Path]:
    cl = cfg["cluster"]
    out = []
    for scenario in cfg["simulate"]["scenarios"]:
        frames = load_manifest(ws.scenario_manifest(scenario, "train")).frames
        pts = np.stack([frame_features(f, cl["feature_mode"]) for f in frames])
        model = kmeans_fit(pts, int(cl["k"]), seed=int(cl["seed"]), max_iter=int(cl["max_iter"]),
                           n_init=int(cl["n_init"]), feature_mode=cl["feature_mode"])
        write_json(ws.clusters(scenario), model.to_json())
        out.append(ws.clusters(scenario))
        for split in SPLITS:
            src = ws.scenario_manifest(scenario, split)
            ids = cluster_frames(load_manifest(src).frames, model)
            update_cluster_ids(src, ids, dest=ws.clustered_manifest(scenario, split))
            out.append(ws.clustered_manifest(scenario, split))
        log.info("cluster: %s sizes %s", scenario, list(model.counts))
    return out


def convergence_table(patchset, frames, detector, sitnet, ocfg) -> dict:
    """Objective of each snapshot of each cluster patch and of the static patch on that cluster's frames."""
    table = {}
    static_res = patchset.results[STATIC]
    for it in ocfg.snapshot_iters:
        row = {}
        for c in range(patchset.cluster_model.k):
            members = [f for f in frames if f.cluster_id == c]
            res = patchset.results[c]
            if it not in res.snapshots or it not in static_res.snapshots:
                continue
            cache = _FrameCache(members)
            row[str(c)] = {"cluster": evaluate_objective(cache, res.snapshots[it], detector, sitnet, ocfg),
                           "static": evaluate_objective(cache, static_res.snapshots[it], detector, sitnet, ocfg),
                           "n_frames": len(members)}
        table[str(it)] = row
    return table


def stage_optimize(cfg: dict, ws: Workspace) -> list[Path]:
    detector = load_detector(ws.detector)
    sitnet = load_sitnet(ws.sitnet)
    ocfg = C.optimizer_config(cfg)
    out, timings = [], {}
    ws.plots.mkdir(parents=True, exist_ok=True)
    for scenario in cfg["simulate"]["scenarios"]:
        frames = _load_scenario(ws, scenario, "train")
        model = ClusterModel.from_json(read_json(ws.clusters(scenario)))
        t0 = time.perf_counter()
        ps = build_patchset(frames, model, detector, sitnet, ocfg, [f.cluster_id for f in frames])
        root = ws.patchset(scenario)
        save_patchset(ps, root)
        curves = {str(k): v.curve for k, v in ps.results.items()}
        evals = {str(k): {"iters": v.eval_iters, "objective": v.eval_objective,
                          "best_iteration": v.best_iteration} for k, v in ps.results.items()}
        write_json(root / "curves.json", {"curves": curves, "eval": evals,
                                          "convergence": convergence_table(ps, frames, detector, sitnet, ocfg)})
        plot_path = ws.plots / f"objective_{scenario}.png"
        plot_objective_curves(curves, plot_path, title=scenario, static_key=STATIC)
        out += [root, plot_path]
        timings[scenario] = {str(k): v.seconds for k, v in ps.results.items()}
        log.info("optimize: %s done in %.0fs", scenario, time.perf_counter() - t0)
    # wall-clock times stay outside the hashed outputs
    write_json(ws.timings("optimize"), timings)
    return out


def stage_evaluate(cfg: dict, ws: Workspace) -> list[Path]:
    detector = load_detector(ws.detector)
    sitnet = load_sitnet(ws.sitnet)
    scene = C.scene_config(cfg)
    ecfg = C.eval_config(cfg)
    methods = tuple(cfg["evaluate"]["methods"])
    logs = []
    for scenario in cfg["simulate"]["scenarios"]:
        ps = load_patchset(ws.patchset(scenario))
        for split in cfg["evaluate"]["splits"]:
            frames = _load_scenario(ws, scenario, split)
            logs += evaluate_frames(frames, methods, ps, detector, sitnet, scene, ecfg)
        log.info("evaluate: %s done", scenario)
    report = report_from_logs(logs)
    ws.reports.mkdir(parents=True, exist_ok=True)
    ws.plots.mkdir(parents=True, exist_ok=True)
    paths = {"logs": ws.reports / "frames.jsonl", "report": ws.reports / "report.json",
             "table": ws.reports / "table.txt", "comparison": ws.reports / "comparison.json",
             "bars": ws.plots / "success_rates.png"}
    write_logs(paths["logs"], logs)
    write_json(paths["report"], report.to_json())
    scenarios = tuple(cfg["simulate"]["scenarios"])
    splits = tuple(cfg["evaluate"]["splits"])
    paths["table"].write_text(render_table(report, scenarios, splits))
    if "dynamic" in methods and "static" in methods:
        write_json(paths["comparison"], compare_dynamic_static(report))
    else:
        paths.pop("comparison")
    plot_success_bars(report, paths["bars"], scenarios, splits, methods)
    log.info("evaluate:\n%s", paths["table"].read_text())
    return list(paths.values())


def stage_heatmap(cfg: dict, ws: Workspace) -> list[Path]:
    detector = load_detector(ws.detector)
    sitnet = load_sitnet(ws.sitnet)
    scene = C.scene_config(cfg)
    ecfg = C.eval_config(cfg)
    hcfg = cfg["heatmap"]
    ws.heatmaps.mkdir(parents=True, exist_ok=True)
    index = []
    for scenario in cfg["simulate"]["scenarios"]:
        ps = load_patchset(ws.patchset(scenario))
        frames = _load_scenario(ws, scenario, "similar")[: int(hcfg["n_frames"])]
        for fr in frames:
            for method in METHODS:
                img = attacked_image(fr, method_patch(fr, method, ps), scene, sitnet, ecfg)
                for layer in hcfg["layers"]:
                    hm = eigencam_heatmap(detector, img, int(layer))
                    name = f"{scenario}_f{fr.frame_id}_{method}_l{layer}.png"
                    save_heatmap_overlay(img, hm, ws.heatmaps / name, title=f"{method}, layer {layer}")
                    index.append({"file": name, "scenario": scenario, "frame_id": fr.frame_id,
                                  "method": method, "layer": int(layer)})
    write_json(ws.heatmaps / "index.json", index)
    return [ws.heatmaps]


RUNNERS: dict[str, Callable[[dict, Workspace], list[Path]]] = {
    "simulate": stage_simulate,
    "train-detector": stage_train_detector,
    "train-sitnet": stage_train_sitnet,
    "cluster": stage_cluster,
    "optimize": stage_optimize,
    "evaluate": stage_evaluate,
    "heatmap": stage_heatmap,
}


# ---------------------------------------------------------------------------
# Orchestration
# ---------------------------------------------------------------------------

def run_stage(cfg: dict, stage: str, out: str | Path, keys: dict[str, str] | None = None) -> dict:
    """Run one stage unconditionally after checking its upstream stamps; returns the stamp."""
    if stage not in RUNNERS:
        raise ValidationError(f"unknown stage {stage!r}; choose from {STAGES + (ALL,)}")
    ws = Workspace(out)
    keys = keys or stage_keys(cfg)
    _check_upstream(ws, stage, keys)
    torch.manual_seed(int(cfg["run"]["seed"]))
    t0 = time.time()
    outputs = RUNNERS[stage](cfg, ws)
    stamp = {"stage": stage, "key": keys[stage], "outputs": _hash_outputs(ws.root, outputs),
             "started": t0, "finished": time.time()}
    write_json(ws.stamp(stage), stamp)
    return stamp


def artifact_hashes(ws: Workspace, cfg: dict) -> dict[str, str]:
    """Content hashes of the main artifacts present under ``ws``."""
    out = {}
    for name in ("detector_train", "detector_val"):
        if ws.manifest(name).exists():
            out[f"dataset/{name}"] = sha256_file(ws.manifest(name))
    for scenario in cfg["simulate"]["scenarios"]:
        for split in SPLITS:
            p = ws.scenario_manifest(scenario, split)
            if p.exists():
                out[f"dataset/{scenario}_{split}"] = sha256_file(p)
        root = ws.patchset(scenario)
        if root.exists():
            out[f"patchset/{scenario}"] = sha256_json(_hash_outputs(ws.root, [root]))
    for name, p in (("detector", ws.detector), ("sitnet", ws.sitnet), ("report", ws.reports / "report.json")):
        if p.exists():
            out[name] = sha256_file(p)
    return out


def write_run_manifest(cfg: dict, ws: Workspace, timings: dict) -> Path:
    path = ws.root / "run_manifest.json"
    write_json(path, {"config": cfg, "seeds": {s: cfg[s]["seed"] for s in ("run",) + C.SEEDED_SECTIONS},
                      "stage_keys": stage_keys(cfg), "artifacts": artifact_hashes(ws, cfg),
                      "timestamps": timings})
    return path


def run_pipeline(cfg: dict, stage: str, out: str | Path | None = None) -> dict:
    """Run ``stage`` (or every stale stage for ``all``) and write the run manifest.

    Returns ``{"ran": [...], "skipped": [...], "manifest": path}``.
    """
    ws = Workspace(out if out is not None else cfg["run"]["out"])
    ws.root.mkdir(parents=True, exist_ok=True)
    keys = stage_keys(cfg)
    ran, skipped, timings = [], [], {}
    if stage == ALL:
        for s in STAGES:
            if is_current(ws, s, keys):
                skipped.append(s)
                continue
            log.info("stage %s", s)
            stamp = run_stage(cfg, s, ws.root, keys)
            timings[s] = {"started": stamp["started"], "finished": stamp["finished"]}
            ran.append(s)
    else:
        stamp = run_stage(cfg, stage, ws.root, keys)
        timings[stage] = {"started": stamp["started"], "finished": stamp["finished"]}
        ran.append(stage)
    path = write_run_manifest(cfg, ws, timings)
    return {"ran": ran, "skipped": skipped, "manifest": path}
