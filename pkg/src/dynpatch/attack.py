"""Pose clustering, the confidence x IoU patch objective and patch optimization.

Frames are grouped by K-means on (patch-car distance, sign distance). One
patch is optimized per cluster by gradient ascent on the top-k objective

    O = mean_{i in topk(M)} p_target(i) * p_obj(i) * IoU(box_i, b_orig)

where ``M`` holds the decoded boxes overlapping the original sign box. A
static patch trained on every frame serves as the baseline.
"""
from __future__ import annotations

import dataclasses
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from .artifacts import read_json, sha256_json, write_json
from .detector import CLASSES, GridDetector, activate
from .errors import ValidationError
from .geometry import BBox, box_iou_tensor, warp_composite
from .scenesim import FrameRecord, Pose2D, load_png, quantize_8bit, save_png
from .sitnet import SitNet, sit_forward

log = logging.getLogger(__name__)

FEATURE_MODES = ("distances", "positions")


# ---------------------------------------------------------------------------
# Clustering
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ClusterFeatures:
    d_patch: float
    d_target: float

    def __post_init__(self):
        if not (math.isfinite(self.d_patch) and math.isfinite(self.d_target)):
            raise ValidationError("distances must be finite")
        if self.d_patch < 0 or self.d_target < 0:
            raise ValidationError("distances must be non-negative")

    def as_array(self) -> np.ndarray:
        return np.array([self.d_patch, self.d_target])


def pose_features(camera: Pose2D, patch_car: Pose2D, target: Pose2D, mode: str = "distances") -> np.ndarray:
    """Feature vector for clustering: two distances, or both positions relative to the camera."""
    for name, p in (("camera", camera), ("patch_car", patch_car), ("target", target)):
        if p is None:
            raise ValidationError(f"missing {name} pose")
    if mode == "distances":
        return ClusterFeatures(camera.distance_to(patch_car), camera.distance_to(target)).as_array()
    if mode == "positions":
        return np.array([patch_car.x - camera.x, patch_car.y - camera.y,
                         target.x - camera.x, target.y - camera.y])
    raise ValidationError(f"unknown feature mode {mode!r}")


def cluster_features(frame: FrameRecord, recorded: bool = True) -> ClusterFeatures:
    """Camera-to-patch-car and camera-to-sign distances from the (recorded) poses."""
    if recorded:
        cam, car, sign = frame.recorded_camera, frame.recorded_patch_car, frame.recorded_sign
    else:
        cam, car, sign = frame.camera, frame.patch_car, frame.sign
    d_patch, d_target = pose_features(cam, car, sign, "distances")
    return ClusterFeatures(float(d_patch), float(d_target))


def frame_features(frame: FrameRecord, mode: str = "distances") -> np.ndarray:
    return pose_features(frame.recorded_camera, frame.recorded_patch_car, frame.recorded_sign, mode)


@dataclass
class ClusterModel:
    centroids: np.ndarray
    seed: int
    counts: tuple[int, ...]
    inertia: float = 0.0
    inertia_history: list[float] = field(default_factory=list)
    feature_mode: str = "distances"

    def __post_init__(self):
        self.centroids = np.asarray(self.centroids, dtype=np.float64)
        if self.centroids.ndim != 2 or len(self.centroids) < 1:
            raise ValidationError("need at least one centroid")
        if not np.isfinite(self.centroids).all():
            raise ValidationError("centroids must be finite")

    @property
    def k(self) -> int:
        return len(self.centroids)

    def to_json(self) -> dict:
        return {"centroids": self.centroids.tolist(), "seed": self.seed, "counts": list(self.counts),
                "inertia": self.inertia, "inertia_history": self.inertia_history,
                "feature_mode": self.feature_mode}

    @classmethod
    def from_json(cls, d: dict) -> ClusterModel:
        return cls(np.array(d["centroids"]), d["seed"], tuple(d["counts"]), d.get("inertia", 0.0),
                   list(d.get("inertia_history", [])), d.get("feature_mode", "distances"))


def _nearest(points: np.ndarray, centroids: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    d2 = ((points[:, None, :] - centroids[None, :, :]) ** 2).sum(-1)
    labels = d2.argmin(axis=1)  # first minimum wins ties
    return labels, d2[np.arange(len(points)), labels]


def _plusplus_init(points: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    centers = [points[rng.integers(len(points))]]
    for _ in range(1, k):
        _, d2 = _nearest(points, np.array(centers))
        total = d2.sum()
        if total <= 0:
            # all remaining points coincide with a center; pick any unused index
            centers.append(points[rng.integers(len(points))])
        else:
            centers.append(points[rng.choice(len(points), p=d2 / total)])
    return np.array(centers, dtype=np.float64)


def _lloyd(points: np.ndarray, centroids: np.ndarray, max_iter: int):
    history = []
    labels = None
    for _ in range(max_iter):
        new_labels, d2 = _nearest(points, centroids)
        # an empty cluster takes the point farthest from its centroid
        for c in range(len(centroids)):
            if not np.any(new_labels == c):
                far = int(np.argmax(d2))
                new_labels[far] = c
                d2[far] = 0.0
        centroids = np.array([points[new_labels == c].mean(axis=0) for c in range(len(centroids))])
        history.append(float(((points - centroids[new_labels]) ** 2).sum()))
        if labels is not None and np.array_equal(labels, new_labels):
            break
        labels = new_labels
    return centroids, new_labels, history


def _hartigan(points: np.ndarray, labels: np.ndarray, k: int, max_pass: int):
    """Single-point transfers that lower the total within-cluster sum of squares."""
    labels = labels.copy()
    counts = np.bincount(labels, minlength=k).astype(np.float64)
    cents = np.array([points[labels == c].mean(axis=0) for c in range(k)])
    for _ in range(max_pass):
        moved = False
        for i, x in enumerate(points):
            a = labels[i]
            if counts[a] <= 1:
                continue
            d2 = ((cents - x) ** 2).sum(-1)
            gain = counts[a] / (counts[a] - 1) * d2[a]
            cost = counts / (counts + 1) * d2
            cost[a] = np.inf
            b = int(np.argmin(cost))
            if cost[b] < gain - 1e-12:
                cents[a] = (cents[a] * counts[a] - x) / (counts[a] - 1)
                cents[b] = (cents[b] * counts[b] + x) / (counts[b] + 1)
                counts[a] -= 1
                counts[b] += 1
                labels[i] = b
                moved = True
        if not moved:
            break
    cents = np.array([points[labels == c].mean(axis=0) for c in range(k)])
    return cents, labels, float(((points - cents[labels]) ** 2).sum())


def kmeans_fit(points, k: int, seed: int = 0, max_iter: int = 300, n_init: int = 10,
               feature_mode: str = "distances") -> ClusterModel:
    """Lloyd's algorithm from k-means++ seeds refined by Hartigan transfers, best of ``n_init`` restarts.

    Clusters are renumbered by ascending centroid (lexicographic), so with the
    default features cluster 0 is the nearest patch-car distance band.
    """
    points = np.asarray(points, dtype=np.float64)
    if points.ndim == 1:
        points = points[:, None]
    if k < 1:
        raise ValidationError("k must be >= 1")
    if len(points) < k:
        raise ValidationError(f"need at least k={k} points, got {len(points)}")
    if not np.isfinite(points).all():
        raise ValidationError("points must be finite")
    rng = np.random.default_rng(seed)
    best = None
    for _ in range(max(n_init, 1)):
        cents, labels, hist = _lloyd(points, _plusplus_init(points, k, rng), max_iter)
        h_cents, h_labels, h_inertia = _hartigan(points, labels, k, max_iter)
        if h_inertia < hist[-1] - 1e-12:
            cents, labels, hist = h_cents, h_labels, hist + [h_inertia]
        if best is None or hist[-1] < best[2][-1] - 1e-12:
            best = (cents, labels, hist)
    cents, labels, hist = best
    order = np.lexsort(cents.T[::-1])
    cents = cents[order]
    remap = np.empty(k, dtype=int)
    remap[order] = np.arange(k)
    labels = remap[labels]
    counts = tuple(int(np.sum(labels == c)) for c in range(k))
    return ClusterModel(cents, seed, counts, hist[-1], hist, feature_mode)


def assign_cluster(model: ClusterModel, features) -> int:
    """Index of the nearest centroid; ties go to the lowest id."""
    x = features.as_array() if isinstance(features, ClusterFeatures) else np.asarray(features, dtype=np.float64)
    d2 = ((model.centroids - x[None, :]) ** 2).sum(-1)
    return int(np.argmin(d2))


def cluster_frames(frames: Sequence[FrameRecord], model: ClusterModel) -> list[int]:
    return [assign_cluster(model, frame_features(f, model.feature_mode)) for f in frames]


# ---------------------------------------------------------------------------
# Objective
# ---------------------------------------------------------------------------

def apply_patch(frame: FrameRecord, patch: torch.Tensor, sitnet: SitNet | None,
                background: torch.Tensor | None = None) -> torch.Tensor:
    """Predicted screen appearance of ``patch`` warped onto the frame's screen quad."""
    if frame.quad is None:
        raise ValidationError(f"frame {frame.frame_id}: screen quad not visible")
    shown = patch if sitnet is None else sit_forward(sitnet, patch).clamp(0.0, 1.0)
    bg = frame.image if background is None else background
    return warp_composite(bg.to(shown.dtype), shown, frame.quad)


def _ref_tensor(b: BBox, dtype) -> torch.Tensor:
    return torch.tensor(b.as_tuple(), dtype=dtype)


@dataclass
class CandidateSet:
    """Decoded grid candidates; every field is indexed along the first axis."""

    boxes: torch.Tensor        # (m, 4)
    objectness: torch.Tensor   # (m,)
    class_probs: torch.Tensor  # (m, C)
    cells: torch.Tensor        # (m,) flat cell index

    def __len__(self):
        return int(self.boxes.shape[0])


def _all_candidates(raw: torch.Tensor, stride: float) -> CandidateSet:
    if raw.ndim == 4:
        if raw.shape[0] != 1:
            raise ValidationError("expected a single prediction grid")
        raw = raw[0]
    obj, cls, boxes = activate(raw, stride)
    n = obj.numel()
    return CandidateSet(boxes.reshape(n, 4), obj.reshape(n), cls.reshape(n, -1), torch.arange(n))


def _select(c: CandidateSet, keep: torch.Tensor) -> CandidateSet:
    return CandidateSet(c.boxes[keep], c.objectness[keep], c.class_probs[keep], c.cells[keep])


def filter_overlapping(raw: torch.Tensor, b_orig: BBox, tau: float = 0.05, stride: float = 16.0) -> CandidateSet:
    """Decoded candidates whose IoU with ``b_orig`` strictly exceeds ``tau``."""
    if not 0 <= tau < 1:
        raise ValidationError("tau must lie in [0,1)")
    cands = _all_candidates(raw, stride)
    with torch.no_grad():
        keep = box_iou_tensor(cands.boxes.detach(), _ref_tensor(b_orig, cands.boxes.dtype)) > tau
    return _select(cands, keep)


def _target_index(target_class: str | int, classes: Sequence[str]) -> int:
    if isinstance(target_class, int):
        return target_class
    if target_class not in classes:
        raise ValidationError(f"unknown target class {target_class!r}")
    return classes.index(target_class)


def attack_objective(m: CandidateSet, b_orig: BBox, target_class: str | int = "stop", k: int = 3,
                     classes: Sequence[str] = CLASSES) -> torch.Tensor:
    """Mean of ``p_target * p_obj * IoU`` over the top-k candidates ranked by ``p_target * p_obj``.

    Averages over ``|M|`` when fewer than ``k`` candidates exist; 0 when ``M`` is empty.
    """
    if k < 1:
        raise ValidationError("k must be >= 1")
    if len(m) == 0:
        return torch.zeros((), dtype=m.boxes.dtype)
    t = _target_index(target_class, classes)
    conf = m.class_probs[:, t] * m.objectness
    top = torch.topk(conf.detach(), min(k, len(m))).indices
    ious = box_iou_tensor(m.boxes[top], _ref_tensor(b_orig, m.boxes.dtype))
    return (conf[top] * ious).mean()


def _cells_overlapping(grid: int, stride: float, b: BBox) -> torch.Tensor:
    c0, c1 = int(max(math.floor(b.x_min / stride), 0)), int(min(math.ceil(b.x_max / stride), grid))
    r0, r1 = int(max(math.floor(b.y_min / stride), 0)), int(min(math.ceil(b.y_max / stride), grid))
    rows, cols = torch.meshgrid(torch.arange(r0, r1), torch.arange(c0, c1), indexing="ij")
    return (rows * grid + cols).reshape(-1)


def frame_objective(raw: torch.Tensor, b_orig: BBox, target_class: str | int = "stop", k: int = 3,
                    tau: float = 0.05, stride: float = 16.0, classes: Sequence[str] = CLASSES) -> torch.Tensor:
    """Objective for one prediction grid, with a straight-through signal when ``M`` is empty.

    If no candidate overlaps ``b_orig`` the value is exactly 0, but the gradient
    is that of the mean top-k target confidence over the grid cells covering
    ``b_orig``, so the ascent still receives a direction.
    """
    m = filter_overlapping(raw, b_orig, tau, stride)
    if len(m):
        return attack_objective(m, b_orig, target_class, k, classes)
    cands = _all_candidates(raw, stride)
    cells = _cells_overlapping(int(raw.shape[-2]), stride, b_orig)
    if len(cells) == 0:
        return torch.zeros((), dtype=raw.dtype)
    t = _target_index(target_class, classes)
    conf = cands.class_probs[cells, t] * cands.objectness[cells]
    surrogate = torch.topk(conf, min(k, len(cells))).values.mean()
    return surrogate - surrogate.detach()


# ---------------------------------------------------------------------------
# Optimization
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class OptimizerConfig:
    lr: float = 0.01
    iterations: int = 1000
    top_k: int = 3
    tau: float = 0.05
    target_class: str = "stop"
    seed: int = 0
    batch_size: int = 4
    resolution: int = 64
    optimizer: str = "ascent"
    eval_every: int = 50
    snapshot_iters: tuple[int, ...] = (200,)
    static_steps: str = "matched"

    def __post_init__(self):
        if not (self.lr >= 0 and math.isfinite(self.lr)):
            raise ValidationError("lr must be finite and >= 0")
        if self.iterations < 1 or self.top_k < 1 or self.batch_size < 1:
            raise ValidationError("iterations, top_k and batch_size must be >= 1")
        if not 0 <= self.tau < 1:
            raise ValidationError("tau must lie in [0,1)")
        if self.optimizer not in ("ascent", "adam"):
            raise ValidationError(f"unknown optimizer {self.optimizer!r}")
        if self.static_steps not in ("matched", "per_cluster"):
            raise ValidationError(f"unknown static_steps {self.static_steps!r}")
        if self.eval_every < 1:
            raise ValidationError("eval_every must be >= 1")


def initial_patch(resolution: int, seed: int) -> torch.Tensor:
    """Uniform random 8-bit patch."""
    g = torch.Generator().manual_seed(seed)
    return torch.randint(0, 256, (3, resolution, resolution), generator=g).float() / 255.0


class _FrameCache:
    """Per-frame tensors reused across iterations."""

    def __init__(self, frames: Sequence[FrameRecord]):
        self.frames = list(frames)
        for f in self.frames:
            if f.quad is None:
                raise ValidationError(f"frame {f.frame_id} has no visible screen quad")
            if f.sign_box is None:
                raise ValidationError(f"frame {f.frame_id} has no sign box")
        self.images = [f.image for f in self.frames]

    def __len__(self):
        return len(self.frames)


def batch_objective(cache: _FrameCache, idx: Sequence[int], patch: torch.Tensor, detector: GridDetector,
                    sitnet: SitNet | None, config: OptimizerConfig) -> torch.Tensor:
    """Mean objective over frames ``idx`` for one patch; differentiable in ``patch``."""
    imgs = torch.stack([apply_patch(cache.frames[i], patch, sitnet, cache.images[i]) for i in idx])
    detector.eval()
    raw = detector(imgs.to(next(detector.parameters()).dtype))
    stride = detector.config.stride
    vals = [frame_objective(raw[j], cache.frames[i].sign_box, config.target_class, config.top_k,
                            config.tau, stride, detector.config.classes) for j, i in enumerate(idx)]
    return torch.stack(vals).mean()


def evaluate_objective(frames: Sequence[FrameRecord] | _FrameCache, patch: torch.Tensor, detector: GridDetector,
                       sitnet: SitNet | None, config: OptimizerConfig = OptimizerConfig(),
                       chunk: int = 16) -> float:
    """Objective averaged over every frame (no gradient)."""
    cache = frames if isinstance(frames, _FrameCache) else _FrameCache(frames)
    total = 0.0
    with torch.no_grad():
        for s in range(0, len(cache), chunk):
            idx = list(range(s, min(s + chunk, len(cache))))
            total += float(batch_objective(cache, idx, patch, detector, sitnet, config)) * len(idx)
    return total / len(cache)


@dataclass
class PatchResult:
    patch: torch.Tensor
    initial: torch.Tensor
    curve: list[float]
    eval_iters: list[int]
    eval_objective: list[float]
    best_iteration: int
    snapshots: dict[int, torch.Tensor] = field(default_factory=dict)
    seconds: float = 0.0

    @property
    def best_objective(self) -> float:
        return max(self.eval_objective)


def optimize_patch(frames: Sequence[FrameRecord], detector: GridDetector, sitnet: SitNet | None,
                   config: OptimizerConfig = OptimizerConfig(), iterations: int | None = None,
                   seed: int | None = None, progress: bool = False) -> PatchResult:
    """Gradient ascent on the batch objective from a seeded random patch.

    Each iteration samples ``batch_size`` frames without replacement (cycling
    through shuffled epochs), steps ``z <- clamp(z + lr * grad, 0, 1)``, or an
    Adam step on ``-O`` when ``optimizer == "adam"``. Every ``eval_every``
    iterations the 8-bit rounded iterate is scored on all frames; the best
    scoring one is returned, so the result never scores below the start.
    """
    if not frames:
        raise ValidationError("empty frame set")
    t0 = time.perf_counter()
    cache = _FrameCache(frames)
    n_iter = config.iterations if iterations is None else iterations
    seed = config.seed if seed is None else seed
    for p in detector.parameters():
        p.requires_grad_(False)
    if sitnet is not None:
        for p in sitnet.parameters():
            p.requires_grad_(False)

    init = initial_patch(config.resolution, seed)
    z = init.clone().requires_grad_(True)
    adam = torch.optim.Adam([z], lr=config.lr) if config.optimizer == "adam" else None
    gen = torch.Generator().manual_seed(seed)
    order: list[int] = []

    best_patch = init.clone()
    best_val = evaluate_objective(cache, init, detector, sitnet, config)
    eval_iters, eval_vals = [0], [best_val]
    curve: list[float] = []
    snapshots: dict[int, torch.Tensor] = {}
    bs = min(config.batch_size, len(cache))
    for it in range(1, n_iter + 1):
        if len(order) < bs:
            order += torch.randperm(len(cache), generator=gen).tolist()
        idx, order = order[:bs], order[bs:]
        value = batch_objective(cache, idx, z, detector, sitnet, config)
        (grad,) = torch.autograd.grad(value, z, allow_unused=True)
        if grad is None:
            grad = torch.zeros_like(z)
        curve.append(float(value.detach()))
        with torch.no_grad():
            if adam is not None:
                z.grad = -grad
                adam.step()
            else:
                z += config.lr * grad
            z.clamp_(0.0, 1.0)
        if it in config.snapshot_iters:
            snapshots[it] = quantize_8bit(z.detach())
        if it % config.eval_every == 0 or it == n_iter:
            cand = quantize_8bit(z.detach())
            val = evaluate_objective(cache, cand, detector, sitnet, config)
            eval_iters.append(it)
            eval_vals.append(val)
            if val > best_val:
                best_val, best_patch = val, cand
            if progress:
                log.info("iter %d batch %.4f full %.4f", it, curve[-1], val)
    best_iter = eval_iters[int(np.argmax(eval_vals))]
    return PatchResult(best_patch, init, curve, eval_iters, eval_vals, best_iter, snapshots,
                       time.perf_counter() - t0)


# ---------------------------------------------------------------------------
# Patch sets
# ---------------------------------------------------------------------------

STATIC = "static"


@dataclass
class PatchSet:
    patches: dict[int, torch.Tensor]
    static: torch.Tensor
    cluster_model: ClusterModel
    config_hash: str
    seed: int = 0
    info: dict = field(default_factory=dict)
    results: dict = field(default_factory=dict)

    def __post_init__(self):
        if sorted(self.patches) != list(range(self.cluster_model.k)):
            raise ValidationError("need exactly one patch per cluster id")
        if self.static is None:
            raise ValidationError("static patch missing")


def optimizer_hash(config: OptimizerConfig) -> str:
    return sha256_json(dataclasses.asdict(config))


def build_patchset(frames: Sequence[FrameRecord], cluster_model: ClusterModel, detector: GridDetector,
                   sitnet: SitNet | None, config: OptimizerConfig = OptimizerConfig(),
                   cluster_ids: Sequence[int] | None = None, progress: bool = False) -> PatchSet:
    """One patch per cluster (seed ``seed + c``) plus a static patch on all frames (seed ``seed``).

    With ``static_steps == "matched"`` the static patch gets ``k * iterations``
    steps, the total spent on the dynamic set; ``"per_cluster"`` gives it ``iterations``.
    """
    frames = list(frames)
    if cluster_ids is None:
        cluster_ids = cluster_frames(frames, cluster_model)
    cluster_ids = list(cluster_ids)
    results, patches, info = {}, {}, {}
    for c in range(cluster_model.k):
        members = [f for f, cid in zip(frames, cluster_ids) if cid == c]
        if not members:
            raise ValidationError(f"cluster {c} has no frames")
        res = optimize_patch(members, detector, sitnet, config, seed=config.seed + c, progress=progress)
        results[c], patches[c] = res, res.patch
        info[str(c)] = {"cluster_id": c, "centroid": cluster_model.centroids[c].tolist(),
                        "seed": config.seed + c, "n_frames": len(members), "iterations": config.iterations,
                        "final_objective": res.best_objective}
    steps = config.iterations * (cluster_model.k if config.static_steps == "matched" else 1)
    res = optimize_patch(frames, detector, sitnet, config, iterations=steps, seed=config.seed, progress=progress)
    results[STATIC] = res
    info[STATIC] = {"cluster_id": None, "centroid": None, "seed": config.seed, "n_frames": len(frames),
                    "iterations": steps, "final_objective": res.best_objective}
    return PatchSet(patches, res.patch, cluster_model, optimizer_hash(config), config.seed, info, results)


def select_patch(patchset: PatchSet, camera: Pose2D, patch_car: Pose2D, target: Pose2D) -> torch.Tensor:
    """Patch of the cluster the relative poses fall in."""
    feats = pose_features(camera, patch_car, target, patchset.cluster_model.feature_mode)
    return patchset.patches[assign_cluster(patchset.cluster_model, feats)]


def save_patchset(patchset: PatchSet, root: str | Path):
    """PNG per patch with a JSON sidecar, plus ``clusters.json`` and ``patchset.json``."""
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    names = {str(c): f"patch_{c}" for c in patchset.patches}
    names[STATIC] = "patch_static"
    for key, stem in names.items():
        img = patchset.static if key == STATIC else patchset.patches[int(key)]
        save_png(img, root / f"{stem}.png")
        side = dict(patchset.info.get(key, {}))
        side.update({"config_hash": patchset.config_hash, "training_seed": side.get("seed", patchset.seed)})
        write_json(root / f"{stem}.json", side)
    write_json(root / "clusters.json", patchset.cluster_model.to_json())
    write_json(root / "patchset.json", {"format": "dynpatch-patchset", "version": 1, "k": patchset.cluster_model.k,
                                        "config_hash": patchset.config_hash, "seed": patchset.seed,
                                        "patches": names})


def load_patchset(root: str | Path) -> PatchSet:
    root = Path(root)
    meta = read_json(root / "patchset.json")
    if meta.get("format") != "dynpatch-patchset":
        raise ValidationError(f"{root} is not a patch set")
    model = ClusterModel.from_json(read_json(root / "clusters.json"))
    patches, info = {}, {}
    for key, stem in meta["patches"].items():
        img = load_png(root / f"{stem}.png")
        info[key] = read_json(root / f"{stem}.json")
        if key != STATIC:
            patches[int(key)] = img
    static = load_png(root / f"{meta['patches'][STATIC]}.png")
    return PatchSet(patches, static, model, meta["config_hash"], meta["seed"], info)
