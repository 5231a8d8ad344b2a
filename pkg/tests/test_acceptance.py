"""Acceptance criteria, each checked at its stated tolerance.

Criteria 3 to 8 read the outputs of a full default-config pipeline run kept
under ``$DYNPATCH_ACCEPTANCE_DIR`` (default ``~/.cache/dynpatch-acceptance``).
Stages whose stamps are current are reused, so only the first run pays for
training and patch optimization. Each test records one line that the
terminal summary prints (see conftest.py).
"""
import json
import os
import shutil
import time
from pathlib import Path

import numpy as np
import pytest
import torch

from dynpatch import config as C
from dynpatch.attack import (CandidateSet, apply_patch, assign_cluster, attack_objective, frame_objective,
                             kmeans_fit)
from dynpatch.detector import (CLASSES, DetectorConfig, activate, build_detector, detector_forward,
                               image_gradient, load_detector, mean_average_precision)
from dynpatch.evaluate import read_logs, report_from_logs
from dynpatch.geometry import BBox, iou
from dynpatch.pipeline import Workspace, run_pipeline
from dynpatch.scenesim import load_manifest
from dynpatch.sitnet import FeatureExtractor, LossWeights, SitNetConfig, build_sitnet, combined_loss

from oracles import best_partition_wcss, central_difference, pixel_count_iou, rel_err, topk_objective_enum, wcss

SMOKE = Path(__file__).parent / "data" / "smoke_config.yaml"
ROOT = Path(os.environ.get("DYNPATCH_ACCEPTANCE_DIR", Path.home() / ".cache" / "dynpatch-acceptance"))
SEEDS = (0, 1, 2)
SCENARIOS = ("go_straight", "turn", "pedestrian")
SHARED_STAGES = ("simulate", "train-detector", "train-sitnet")

RESULTS: dict[int, str] = {}


def record(n: int, ok: bool, detail: str):
    RESULTS[n] = f"criterion {n}: {'PASS' if ok else 'FAIL'} ({detail})"
    assert ok, RESULTS[n]


def _seed_config(seed: int) -> dict:
    return C.load_config(overrides={"cluster": {"seed": seed}, "attack": {"seed": seed}})


def _fork(src: Path, dst: Path):
    """Share the seed-independent stages of ``src`` with ``dst`` through hard links."""
    if dst.exists():
        return
    dst.mkdir(parents=True)
    for d in ("data", "models"):
        shutil.copytree(src / d, dst / d, copy_function=os.link)
    (dst / "stamps").mkdir()
    for s in SHARED_STAGES:
        shutil.copy2(src / "stamps" / f"{s}.json", dst / "stamps" / f"{s}.json")


@pytest.fixture(scope="session")
def runs():
    """Default-config workspaces for every seed, run to completion."""
    out = {}
    base = ROOT / "seed0"
    for seed in SEEDS:
        ws = ROOT / f"seed{seed}"
        if seed:
            # detector and SIT-Net are shared; clustering and patch seeds vary
            _fork(base, ws)
        cfg = _seed_config(seed)
        run_pipeline(cfg, "all", ws)
        out[seed] = (cfg, Workspace(ws))
    return out


def _stamp_seconds(ws: Workspace, stage: str) -> float:
    st = json.loads(ws.stamp(stage).read_text())
    return st["finished"] - st["started"]


def _report(ws: Workspace):
    return report_from_logs(read_logs(ws.reports / "frames.jsonl"))


# --- 1: oracles ---------------------------------------------------------------

def _cands(confs_obj, probs, boxes):
    n = len(confs_obj)
    cls = torch.zeros(n, len(CLASSES), dtype=torch.float64)
    cls[:, 0] = torch.tensor(probs, dtype=torch.float64)
    cls[:, 1] = 1 - cls[:, 0]
    return CandidateSet(torch.as_tensor(boxes, dtype=torch.float64).reshape(-1, 4),
                        torch.tensor(confs_obj, dtype=torch.float64), cls, torch.arange(n))


def test_criterion_1_oracles():
    t0 = time.perf_counter()
    rng = np.random.default_rng(0)
    bad = []
    # boxes on a 0.05 grid so the 0.01 lattice count is exact
    def grid_box():
        xs, ys = np.sort(rng.choice(41, 2, replace=False)), np.sort(rng.choice(41, 2, replace=False))
        return tuple(float(v) * 0.05 for v in (xs[0], ys[0], xs[1], ys[1]))

    for _ in range(300):
        a, b = grid_box(), grid_box()
        if abs(iou(BBox(*a), BBox(*b)) - pixel_count_iou(a, b)) > 1e-9:
            bad.append(("iou", a, b))
    for trial in range(60):
        n, k = int(rng.integers(3, 9)), int(rng.integers(1, 4))
        pts = rng.uniform(0, 5, size=(n, 2))
        m = kmeans_fit(pts, k, seed=trial)
        labels = [assign_cluster(m, p) for p in pts]
        if abs(m.inertia - best_partition_wcss(pts, k)) > 1e-9 or abs(wcss(pts, labels) - m.inertia) > 1e-9:
            bad.append(("kmeans", trial))
    ref = BBox(0, 0, 10, 10)
    for trial in range(300):
        n, k = int(rng.integers(0, 9)), int(rng.integers(1, 6))
        objs, probs = rng.uniform(0, 1, n), rng.uniform(0, 1, n)
        x, w = rng.uniform(-20, 20, n), rng.uniform(1, 20, n)
        boxes = [[x[i], 0, x[i] + w[i], 10] for i in range(n)]
        c = _cands(objs.tolist(), probs.tolist(), boxes if n else torch.zeros(0, 4))
        got = float(attack_objective(c, ref, k=k))
        ious = [iou(BBox(*b), ref) for b in boxes]
        want = topk_objective_enum((objs * probs).tolist(), ious, k)
        if abs(got - want) > 1e-12:
            bad.append(("topk", trial))
    elapsed = time.perf_counter() - t0
    record(1, not bad and elapsed < 60, f"{len(bad)} mismatches{': ' + str(bad[:3]) if bad else ''}, {elapsed:.1f}s")


# --- 2: gradients -------------------------------------------------------------

def _fraction_ok(pairs):
    return sum(rel_err(a, b) < 1e-3 for a, b in pairs) / len(pairs)


def test_criterion_2_gradients(small_frames):
    rng = np.random.default_rng(1)
    # detector input
    det = build_detector(DetectorConfig(), seed=2).double()
    x = small_frames[1].image.double()

    def det_obj(raw):
        obj, cls, _ = activate(raw)
        return (obj * cls[..., 0]).mean()

    g = image_gradient(det, x, det_obj)
    coords = list(zip(rng.integers(0, 3, 60).tolist(), rng.integers(0, 256, 60).tolist(),
                      rng.integers(0, 256, 60).tolist()))
    f_det = _fraction_ok([(central_difference(lambda v: det_obj(detector_forward(det, v)), x, i), float(g[i]))
                          for i in coords])

    # SIT-Net parameters under the combined loss
    ext = FeatureExtractor.from_detector(build_detector(seed=3).double(), cut=1)
    net = build_sitnet(SitNetConfig(init="random"), seed=4).double()
    gen = torch.Generator().manual_seed(9)
    xs = torch.rand(2, 3, 16, 16, generator=gen, dtype=torch.float64)
    ys = torch.rand(2, 3, 16, 16, generator=gen, dtype=torch.float64)
    w = LossWeights(0.02, 0.01)
    net.zero_grad()
    combined_loss(w, ext, net(xs), ys).backward()
    pairs = []
    for param in net.parameters():
        for i in rng.choice(param.numel(), size=min(15, param.numel()), replace=False):
            idx = np.unravel_index(i, param.shape)

            def loss_at(v, param=param):
                saved = param.data.clone()
                param.data.copy_(v)
                out = combined_loss(w, ext, net(xs), ys)
                param.data.copy_(saved)
                return out

            pairs.append((central_difference(loss_at, param.detach(), idx), float(param.grad[idx])))
    f_sit = _fraction_ok(pairs)

    # full chain: patch -> SIT-Net -> warp -> detector -> objective
    sit = build_sitnet(SitNetConfig(init="random"), seed=2).double()
    fr = small_frames[0]
    bg = fr.image.double()
    patch = (0.1 + 0.8 * torch.rand(3, 64, 64, generator=torch.Generator().manual_seed(0),
                                    dtype=torch.float64)).requires_grad_(True)

    def chain(p):
        return frame_objective(det(apply_patch(fr, p, sit, bg)[None])[0], fr.sign_box)

    chain(patch).backward()
    coords = list(zip(rng.integers(0, 3, 60).tolist(), rng.integers(2, 62, 60).tolist(),
                      rng.integers(2, 62, 60).tolist()))
    f_chain = _fraction_ok([(central_difference(chain, patch, i), float(patch.grad[i])) for i in coords])
    ok = min(f_det, f_sit, f_chain) >= 0.95
    record(2, ok, f"within 1e-3: detector {f_det:.2f}, sitnet {f_sit:.2f}, chain {f_chain:.2f}")


# --- 3: SIT-Net training ------------------------------------------------------

def test_criterion_3_sitnet(runs):
    cfg, ws = runs[0]
    sec = cfg["sitnet"]
    setup = (sec["epochs"], sec["lr"], sec["alpha"], sec["beta"]) == (50, 1e-3, 0.02, 0.01)
    curve = json.loads((ws.root / "models" / "sitnet_curve.json").read_text())
    loss = np.asarray(curve["train_loss"])
    windows = loss[: len(loss) // 5 * 5].reshape(-1, 5).mean(axis=1)
    monotone = bool(np.all(np.diff(windows) <= 0))
    ratio = curve["val_mse"][-1] / curve["baseline_val_mse"]
    secs = _stamp_seconds(ws, "train-sitnet")
    record(3, setup and ratio < 0.25 and monotone and secs < 600,
           f"val MSE {ratio:.3f} of baseline, 5-epoch means non-increasing {monotone}, {secs:.0f}s")


# --- 4: detector --------------------------------------------------------------

def test_criterion_4_detector(runs):
    _, ws = runs[0]
    val = load_manifest(ws.manifest("detector_val")).frames
    m, _ = mean_average_precision(load_detector(ws.detector), val)
    secs = _stamp_seconds(ws, "train-detector")
    record(4, m >= 0.9 and secs < 1800, f"mAP@0.5 {m:.3f} on {len(val)} held-out frames, {secs:.0f}s")


# --- 5: attack efficacy -------------------------------------------------------

def test_criterion_5_attack_efficacy(runs):
    cfg, ws = runs[0]
    rep = _report(ws)
    timings = json.loads(ws.timings("optimize").read_text())
    secs = sum(v for t in timings.values() for k, v in t.items() if k != "static")
    parts, ok = [], cfg["attack"]["iterations"] == 1000 and secs < 3600
    for s in SCENARIOS:
        dyn, none = rep.rate(s, "similar", "dynamic"), rep.rate(s, "similar", "none")
        ok = ok and dyn >= 0.5 and none <= 0.05
        parts.append(f"{s} dynamic {dyn:.2f} none {none:.2f}")
    record(5, ok, ", ".join(parts) + f", {secs:.0f}s")


# --- 6: dynamic vs static -----------------------------------------------------

def test_criterion_6_dynamic_vs_static(runs):
    parts, ok = [], True
    for seed, (cfg, ws) in runs.items():
        margin = json.loads((ws.reports / "comparison.json").read_text())["margin"]["similar"]
        ok = ok and margin >= 0 and cfg["attack"]["static_steps"] == "matched"
        parts.append(f"seed {seed} {margin:+.3f}")
    record(6, ok, "similar dynamic minus static: " + ", ".join(parts))


# --- 7: convergence at the snapshot ---------------------------------------------

def test_criterion_7_convergence(runs):
    parts, ok = [], True
    for seed, (_, ws) in runs.items():
        for s in SCENARIOS:
            conv = json.loads((ws.patchset(s) / "curves.json").read_text())["convergence"]["200"]
            wins = sum(row["cluster"] > row["static"] for row in conv.values())
            ok = ok and len(conv) == 3 and wins >= 2
            parts.append(f"{seed}/{s} {wins}/{len(conv)}")
    record(7, ok, "clusters ahead at iteration 200: " + ", ".join(parts))


# --- 8: flip rate ---------------------------------------------------------------

def test_criterion_8_flip_equals_success(runs):
    n_cells, ok = 0, True
    for _, ws in runs.values():
        logs = read_logs(ws.reports / "frames.jsonl")
        ok = ok and all(r["flip"] == r["success"] for r in logs if not r["skipped"])
        for cell in report_from_logs(logs).cells.values():
            ok = ok and cell["flip_rate"] == cell["success_rate"]
            n_cells += 1
    record(8, ok and n_cells > 0, f"{n_cells} cells checked")


# --- 9: reproducibility ---------------------------------------------------------

def test_criterion_9_reproducible(tmp_path):
    cfg = C.load_config(SMOKE)
    outs = []
    for name in ("a", "b"):
        res = run_pipeline(cfg, "all", tmp_path / name)
        man = json.loads(res["manifest"].read_text())
        outs.append(((tmp_path / name / "reports" / "report.json").read_bytes(), man["artifacts"]))
    same = outs[0] == outs[1]
    record(9, same, f"{len(outs[0][1])} artifact hashes and report bytes {'identical' if same else 'differ'}")
