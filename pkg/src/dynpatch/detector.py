"""A small single-stage grid detector with Eigen-CAM diagnostics.

Raw output layout per grid cell (channel-last ``S x S x (5 + C)``)::

    [objectness logit, tx, ty, tw, th, class logits...]

Decoding (cell ``(row, col)``, stride ``s``)::

    cx = (col + sigmoid(tx)) * s        w = s * exp(tw)
    cy = (row + sigmoid(ty)) * s        h = s * exp(th)
"""
from __future__ import annotations

import dataclasses
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .artifacts import load_arrays, read_json, save_arrays, sha256_json
from .errors import DifferentiabilityError, ValidationError
from .geometry import BBox, iou

log = logging.getLogger(__name__)

CLASSES = ("stop", "go_straight", "turn", "pedestrian", "car")
PARAMS_FORMAT = "dynpatch-detector"
PARAMS_VERSION = 1
MAX_LOG_SIZE = 8.0


@dataclass(frozen=True)
class DetectorConfig:
    image_size: int = 256
    channels: tuple[int, ...] = (16, 24, 32, 48, 64, 64)
    strides: tuple[int, ...] = (2, 2, 2, 2, 1, 1)
    dilations: tuple[int, ...] = (1, 1, 1, 1, 2, 4)
    classes: tuple[str, ...] = CLASSES
    epochs: int = 20
    batch_size: int = 32
    lr: float = 2e-3
    weight_decay: float = 1e-4
    box_weight: float = 5.0
    noobj_weight: float = 0.5
    context: str = "meanmax"
    spp_pools: int = 3
    spp_kernel: int = 5
    seed: int = 0

    def __post_init__(self):
        if self.context not in ("mean", "meanmax"):
            raise ValidationError(f"unknown context pooling {self.context!r}")
        if self.spp_pools < 0 or self.spp_kernel < 1 or self.spp_kernel % 2 == 0:
            raise ValidationError("spp_pools must be >= 0 and spp_kernel a positive odd number")
        if not (len(self.channels) == len(self.strides) == len(self.dilations)):
            raise ValidationError("channels, strides and dilations must have equal length")
        if self.image_size % self.stride:
            raise ValidationError("image size must be a multiple of the total stride")

    @property
    def stride(self) -> int:
        return int(np.prod(self.strides))

    @property
    def grid(self) -> int:
        return self.image_size // self.stride

    @property
    def num_classes(self) -> int:
        return len(self.classes)

    def arch_dict(self) -> dict:
        return {k: getattr(self, k) for k in ("image_size", "channels", "strides", "dilations", "classes", "context",
                                             "spp_pools", "spp_kernel")}


class ConvBlock(nn.Module):
    def __init__(self, cin, cout, stride, dilation):
        super().__init__()
        self.conv = nn.Conv2d(cin, cout, 3, stride=stride, padding=dilation, dilation=dilation, bias=False)
        self.bn = nn.BatchNorm2d(cout)

    def forward(self, x):
        return F.silu(self.bn(self.conv(x)))


class SpatialPyramidPool(nn.Module):
    """1x1 reduce, ``pools`` cascaded stride-1 max pools, concatenation and a 1x1 fuse."""

    def __init__(self, cin, pools, kernel):
        super().__init__()
        hidden = cin // 2
        self.reduce = nn.Sequential(nn.Conv2d(cin, hidden, 1, bias=False), nn.BatchNorm2d(hidden), nn.SiLU())
        self.pool = nn.MaxPool2d(kernel, stride=1, padding=kernel // 2)
        self.pools = pools
        self.fuse = nn.Sequential(nn.Conv2d(hidden * (pools + 1), cin, 1, bias=False), nn.BatchNorm2d(cin), nn.SiLU())

    def forward(self, x):
        ys = [self.reduce(x)]
        for _ in range(self.pools):
            ys.append(self.pool(ys[-1]))
        return self.fuse(torch.cat(ys, dim=1))


class GridDetector(nn.Module):
    """Stride-2 conv stack, dilated context convs, a pyramid max-pool block, a global-context bias and a 1x1 head.

    The pyramid block (``spp_pools > 0``) widens each cell's view with
    cascaded max pools. The global context is a linear map of the spatially
    pooled feature map: its mean, or its mean and max concatenated
    (``context="meanmax"``).
    """

    def __init__(self, config: DetectorConfig = DetectorConfig()):
        super().__init__()
        self.config = config
        blocks, cin = [], 3
        for cout, s, d in zip(config.channels, config.strides, config.dilations):
            blocks.append(ConvBlock(cin, cout, s, d))
            cin = cout
        self.blocks = nn.ModuleList(blocks)
        self.spp = SpatialPyramidPool(cin, config.spp_pools, config.spp_kernel) if config.spp_pools else None
        self.context = nn.Linear(cin * (2 if config.context == "meanmax" else 1), cin)
        self.head = nn.Conv2d(cin, 5 + config.num_classes, 1)

    def features(self, x, upto: int | None = None):
        acts = []
        for i, blk in enumerate(self.blocks):
            x = blk(x)
            acts.append(x)
            if upto is not None and i == upto:
                break
        return x, acts

    def forward(self, x):
        x, _ = self.features(x)
        if self.spp is not None:
            x = self.spp(x)
        pooled = x.mean(dim=(2, 3))
        if self.config.context == "meanmax":
            pooled = torch.cat([pooled, x.amax(dim=(2, 3))], dim=1)
        ctx = self.context(pooled)
        x = F.silu(x + ctx[:, :, None, None])
        return self.head(x).permute(0, 2, 3, 1)


DetectorParams = GridDetector


def build_detector(config: DetectorConfig = DetectorConfig(), seed: int = 0) -> GridDetector:
    torch.manual_seed(seed)
    model = GridDetector(config)
    # start with low objectness so early training is not swamped by false positives
    with torch.no_grad():
        model.head.bias[0] = -4.0
    return model.eval()


def _check_image(params: GridDetector, image: torch.Tensor) -> torch.Tensor:
    size = params.config.image_size
    if image.ndim == 3:
        image = image[None]
    if image.ndim != 4 or tuple(image.shape[1:]) != (3, size, size):
        raise ValidationError(f"expected image of shape 3x{size}x{size}, got {tuple(image.shape)}")
    return image


def detector_forward(params: GridDetector, image: torch.Tensor) -> torch.Tensor:
    """Raw predictions ``(B, S, S, 5 + C)``; a single CHW image gets ``B == 1``."""
    image = _check_image(params, image)
    with torch.no_grad():
        lo, hi = float(image.min()), float(image.max())
    if lo < 0 or hi > 1:
        raise ValidationError("detector input must lie in [0,1]")
    if params.training:
        params.eval()
    return params(image.to(next(params.parameters()).dtype))


def activate(raw: torch.Tensor, stride: float = 16.0):
    """Objectness probability, class probabilities and corner boxes from raw output.

    Returns tensors shaped ``(..., S, S)``, ``(..., S, S, C)`` and ``(..., S, S, 4)``.
    """
    return torch.sigmoid(raw[..., 0]), torch.softmax(raw[..., 5:], dim=-1), decode_boxes(raw, stride)


def decode_boxes(raw: torch.Tensor, stride: float | None = None, image_size: int | None = None) -> torch.Tensor:
    """Corner-form boxes for every cell; ``stride`` defaults to 16."""
    grid = raw.shape[-2]
    if stride is None:
        stride = (image_size / grid) if image_size else 16.0
    rows = torch.arange(grid, dtype=raw.dtype).view(-1, 1)
    cols = torch.arange(grid, dtype=raw.dtype).view(1, -1)
    cx = (cols + torch.sigmoid(raw[..., 1])) * stride
    cy = (rows + torch.sigmoid(raw[..., 2])) * stride
    w = stride * torch.exp(raw[..., 3].clamp(max=MAX_LOG_SIZE))
    h = stride * torch.exp(raw[..., 4].clamp(max=MAX_LOG_SIZE))
    return torch.stack([cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2], dim=-1)


def encode_box(box: BBox, stride: float = 16.0) -> tuple[int, int, tuple[float, float, float, float]]:
    """Cell ``(row, col)`` and raw ``(tx, ty, tw, th)`` that decode back to ``box``."""
    cx, cy = (box.x_min + box.x_max) / 2, (box.y_min + box.y_max) / 2
    col, row = int(math.floor(cx / stride)), int(math.floor(cy / stride))
    ox, oy = cx / stride - col, cy / stride - row
    eps = 1e-9
    ox, oy = min(max(ox, eps), 1 - eps), min(max(oy, eps), 1 - eps)
    return row, col, (math.log(ox / (1 - ox)), math.log(oy / (1 - oy)),
                      math.log(box.width / stride), math.log(box.height / stride))


@dataclass(frozen=True)
class Detection:
    box: BBox
    objectness: float
    class_probs: tuple[float, ...]
    class_id: int
    class_name: str = ""
    cell: tuple[int, int] = (0, 0)

    @property
    def confidence(self) -> float:
        return self.objectness * self.class_probs[self.class_id]


def _nms(boxes: np.ndarray, scores: np.ndarray, thresh: float) -> list[int]:
    order = list(np.argsort(-scores, kind="stable"))
    keep = []
    while order:
        i = order.pop(0)
        keep.append(i)
        bi = BBox(*boxes[i])
        order = [j for j in order if iou(bi, BBox(*boxes[j])) <= thresh]
    return keep


def decode_detections(raw: torch.Tensor, conf_threshold: float = 0.25, nms_iou: float = 0.5,
                      classes: Sequence[str] = CLASSES, stride: float = 16.0) -> list[Detection]:
    """Threshold on objectness x best class probability, then per-class greedy NMS."""
    if not (0 <= conf_threshold <= 1 and 0 <= nms_iou <= 1):
        raise ValidationError("thresholds must lie in [0,1]")
    if raw.ndim == 4:
        if raw.shape[0] != 1:
            raise ValidationError("decode one image at a time")
        raw = raw[0]
    with torch.no_grad():
        raw = raw.detach().double()
        obj = torch.sigmoid(raw[..., 0]).numpy()
        cls = torch.softmax(raw[..., 5:], dim=-1).numpy()
        boxes = decode_boxes(raw, stride).numpy()
    best = cls.argmax(-1)
    score = obj * cls.max(-1)
    rows, cols = np.nonzero(score >= conf_threshold)
    out: list[Detection] = []
    for c in np.unique(best[rows, cols]) if len(rows) else []:
        sel = [(r, q) for r, q in zip(rows, cols) if best[r, q] == c]
        b = np.array([boxes[r, q] for r, q in sel])
        s = np.array([score[r, q] for r, q in sel])
        for i in _nms(b, s, nms_iou):
            r, q = sel[i]
            out.append(Detection(BBox(*map(float, boxes[r, q])), float(obj[r, q]),
                                 tuple(float(p) for p in cls[r, q]), int(c),
                                 classes[int(c)] if int(c) < len(classes) else str(c), (int(r), int(q))))
    out.sort(key=lambda d: -d.confidence)
    return out


def image_gradient(params: GridDetector, image: torch.Tensor,
                   objective: Callable[[torch.Tensor], torch.Tensor]) -> torch.Tensor:
    """Reverse-mode gradient of ``objective(raw prediction)`` w.r.t. the image pixels."""
    squeeze = image.ndim == 3
    x = _check_image(params, image).detach().clone().requires_grad_(True)
    value = objective(detector_forward(params, x))
    if not isinstance(value, torch.Tensor) or not value.dtype.is_floating_point or value.numel() != 1:
        raise DifferentiabilityError("objective must return a floating-point scalar tensor")
    if not value.requires_grad:
        grad = torch.zeros_like(x)
    else:
        (grad,) = torch.autograd.grad(value.reshape(()), x, allow_unused=True)
        if grad is None:
            grad = torch.zeros_like(x)
    return grad[0] if squeeze else grad


# ---------------------------------------------------------------------------
# Eigen-CAM
# ---------------------------------------------------------------------------

def dominant_direction(x: torch.Tensor, iters: int = 200, tol: float = 1e-12) -> torch.Tensor:
    """Leading right singular vector of ``x`` (rows = samples) by power iteration."""
    gram = x.T @ x
    v = gram.sum(dim=1)
    if float(v.norm()) < 1e-30:
        v = torch.ones(x.shape[1], dtype=x.dtype)
    v = v / v.norm()
    for _ in range(iters):
        w = gram @ v
        n = w.norm()
        if float(n) < 1e-30:
            break
        w = w / n
        done = float((w - v).norm()) < tol
        v = w
        if done:
            break
    return v


def eigencam_projection(activation: torch.Tensor) -> torch.Tensor:
    """First-principal-component map of a ``C x h x w`` activation, min-max normalized."""
    c, h, w = activation.shape
    x = activation.reshape(c, h * w).T.double()
    x = x - x.mean(dim=0, keepdim=True)
    v = dominant_direction(x)
    proj = (x @ v).reshape(h, w)
    # fix the sign so the map correlates positively with the mean activation
    mean_act = activation.double().mean(dim=0)
    if float(((proj - proj.mean()) * (mean_act - mean_act.mean())).sum()) < 0:
        proj = -proj
    lo, hi = proj.min(), proj.max()
    if float(hi - lo) < 1e-12:
        return torch.zeros_like(proj)
    return (proj - lo) / (hi - lo)


def eigencam_heatmap(params: GridDetector, image: torch.Tensor, layer_index: int) -> torch.Tensor:
    """Eigen-CAM heatmap in [0,1] at image resolution for one conv block."""
    if not isinstance(layer_index, int) or not 0 <= layer_index < len(params.blocks):
        raise ValidationError(f"layer_index must address one of {len(params.blocks)} conv blocks")
    x = _check_image(params, image)
    params.eval()
    with torch.no_grad():
        _, acts = params.features(x.to(next(params.parameters()).dtype), upto=layer_index)
    cam = eigencam_projection(acts[layer_index][0])
    up = F.interpolate(cam[None, None], size=x.shape[-2:], mode="bilinear", align_corners=False)[0, 0]
    lo, hi = up.min(), up.max()
    if float(hi - lo) < 1e-12:
        return torch.zeros_like(up)
    return (up - lo) / (hi - lo)


# ---------------------------------------------------------------------------
# Training and evaluation
# ---------------------------------------------------------------------------

@dataclass
class TrainReport:
    epoch_loss: list[float] = field(default_factory=list)
    val_map: float | None = None
    per_class_ap: dict = field(default_factory=dict)
    seconds: float = 0.0
    seed: int = 0


def frame_targets(frame, classes: Sequence[str] = CLASSES) -> list[tuple[int, BBox]]:
    out = []
    if frame.sign_box is not None:
        out.append((classes.index(frame.sign_class), frame.sign_box))
    if frame.car_box is not None and "car" in classes:
        out.append((classes.index("car"), frame.car_box))
    return out


def _build_targets(frames, config: DetectorConfig):
    n, g = len(frames), config.grid
    obj = torch.zeros(n, g, g)
    box = torch.zeros(n, g, g, 4)
    cls = torch.zeros(n, g, g, dtype=torch.long)
    for i, fr in enumerate(frames):
        # larger objects last so they win a shared cell
        for c, b in sorted(frame_targets(fr, config.classes), key=lambda t: t[1].area):
            r, q, (tx, ty, tw, th) = encode_box(b, config.stride)
            r, q = min(max(r, 0), g - 1), min(max(q, 0), g - 1)
            obj[i, r, q] = 1
            box[i, r, q] = torch.tensor([1 / (1 + math.exp(-tx)), 1 / (1 + math.exp(-ty)), tw, th])
            cls[i, r, q] = c
    return obj, box, cls


def detection_loss(raw, obj_t, box_t, cls_t, config: DetectorConfig):
    pos = obj_t > 0
    bce = F.binary_cross_entropy_with_logits(raw[..., 0], obj_t, reduction="none")
    l_obj = (bce * torch.where(pos, 1.0, config.noobj_weight)).sum() / raw.shape[0]
    if pos.any():
        p = raw[pos]
        pred_box = torch.cat([torch.sigmoid(p[:, 1:3]), p[:, 3:5]], dim=1)
        l_box = F.mse_loss(pred_box, box_t[pos], reduction="sum") / raw.shape[0]
        l_cls = F.cross_entropy(p[:, 5:], cls_t[pos], reduction="sum") / raw.shape[0]
    else:
        l_box = l_cls = raw.sum() * 0
    return l_obj + config.box_weight * l_box + l_cls


def train_detector(frames, config: DetectorConfig = DetectorConfig(), val_frames=None,
                   progress: bool = False):
    """Train from scratch; returns ``(model, TrainReport)``. Seeded and reproducible."""
    frames = list(frames)
    if not frames:
        raise ValidationError("empty training dataset")
    t0 = time.time()
    model = build_detector(config, config.seed)
    pixels = torch.stack([f.pixels for f in frames])
    obj_t, box_t, cls_t = _build_targets(frames, config)
    gen = torch.Generator().manual_seed(config.seed)
    opt = torch.optim.AdamW(model.parameters(), lr=config.lr, weight_decay=config.weight_decay)
    steps_per_epoch = math.ceil(len(frames) / config.batch_size)
    sched = torch.optim.lr_scheduler.OneCycleLR(opt, max_lr=config.lr, total_steps=config.epochs * steps_per_epoch,
                                                pct_start=0.15)
    report = TrainReport(seed=config.seed)
    for epoch in range(config.epochs):
        model.train()
        perm = torch.randperm(len(frames), generator=gen)
        total = 0.0
        for s in range(steps_per_epoch):
            idx = perm[s * config.batch_size:(s + 1) * config.batch_size]
            raw = model(pixels[idx].float() / 255.0)
            loss = detection_loss(raw, obj_t[idx], box_t[idx], cls_t[idx], config)
            opt.zero_grad()
            loss.backward()
            opt.step()
            sched.step()
            total += float(loss.detach()) * len(idx)
        report.epoch_loss.append(total / len(frames))
        if progress:
            log.info("detector epoch %d loss %.4f", epoch, report.epoch_loss[-1])
    model.eval()
    if val_frames:
        report.val_map, report.per_class_ap = mean_average_precision(model, val_frames)
    report.seconds = time.time() - t0
    return model, report


def predict(model: GridDetector, images: torch.Tensor, batch_size: int = 64) -> torch.Tensor:
    outs = []
    model.eval()
    with torch.no_grad():
        for i in range(0, len(images), batch_size):
            batch = images[i:i + batch_size]
            if batch.dtype == torch.uint8:
                batch = batch.float() / 255.0
            outs.append(model(batch.to(next(model.parameters()).dtype)))
    return torch.cat(outs)


def average_precision(recall: np.ndarray, precision: np.ndarray) -> float:
    """All-point interpolated area under the precision-recall curve."""
    r = np.concatenate([[0.0], recall, [1.0]])
    p = np.concatenate([[0.0], precision, [0.0]])
    for i in range(len(p) - 2, -1, -1):
        p[i] = max(p[i], p[i + 1])
    idx = np.nonzero(r[1:] != r[:-1])[0]
    return float(np.sum((r[idx + 1] - r[idx]) * p[idx + 1]))


def map_from_detections(dets_per_image, gts_per_image, num_classes: int, iou_thresh: float = 0.5):
    """VOC-style mAP. ``dets``: lists of Detection; ``gts``: lists of (class, BBox)."""
    aps = {}
    for c in range(num_classes):
        n_gt = sum(1 for gts in gts_per_image for g in gts if g[0] == c)
        if n_gt == 0:
            continue
        scored = []
        for i, dets in enumerate(dets_per_image):
            for d in dets:
                if d.class_id == c:
                    scored.append((d.confidence, i, d.box))
        scored.sort(key=lambda t: -t[0])
        used = set()
        tp = np.zeros(len(scored))
        for k, (_, i, box) in enumerate(scored):
            best, best_j = 0.0, -1
            for j, (gc, gb) in enumerate(gts_per_image[i]):
                if gc != c or (i, j) in used:
                    continue
                v = iou(box, gb)
                if v > best:
                    best, best_j = v, j
            if best >= iou_thresh:
                tp[k] = 1
                used.add((i, best_j))
        ctp = np.cumsum(tp)
        recall = ctp / n_gt
        precision = ctp / np.arange(1, len(scored) + 1) if len(scored) else np.zeros(0)
        aps[c] = average_precision(recall, precision)
    return (float(np.mean(list(aps.values()))) if aps else 0.0), aps


def mean_average_precision(model: GridDetector, frames, conf_threshold: float = 0.01, nms_iou: float = 0.5):
    frames = list(frames)
    raw = predict(model, torch.stack([f.pixels for f in frames]))
    cfg = model.config
    dets = [decode_detections(r, conf_threshold, nms_iou, cfg.classes, cfg.stride) for r in raw]
    gts = [frame_targets(f, cfg.classes) for f in frames]
    m, aps = map_from_detections(dets, gts, cfg.num_classes)
    return m, {cfg.classes[c]: v for c, v in aps.items()}


# ---------------------------------------------------------------------------
# Persistence
# ---------------------------------------------------------------------------

def config_hash(config: DetectorConfig) -> str:
    return sha256_json(dataclasses.asdict(config))


def save_detector(model: GridDetector, path, dataset_hash: str = "", extra: dict | None = None):
    arrays = {k: v.detach().cpu().numpy() for k, v in model.state_dict().items()}
    meta = {"format": PARAMS_FORMAT, "version": PARAMS_VERSION,
            "config": dataclasses.asdict(model.config), "classes": list(model.config.classes),
            "training_seed": model.config.seed, "dataset_hash": dataset_hash,
            "config_hash": config_hash(model.config)}
    meta.update(extra or {})
    save_arrays(path, arrays, meta)


def load_detector(path) -> GridDetector:
    path = Path(path)
    meta = read_json(path.with_suffix(".json"))
    if meta.get("format") != PARAMS_FORMAT or meta.get("version") != PARAMS_VERSION:
        raise ValidationError(f"{path} is not a supported detector file")
    cfg = meta["config"]
    config = DetectorConfig(**{k: tuple(v) if isinstance(v, list) else v for k, v in cfg.items()})
    model = GridDetector(config)
    state = {k: torch.from_numpy(v) for k, v in load_arrays(path).items()}
    model.load_state_dict(state)
    return model.eval()
