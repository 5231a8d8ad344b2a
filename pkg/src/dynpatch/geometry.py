"""Boxes, quads, 4-point homographies and the differentiable patch composite."""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np
import torch
import torch.nn.functional as F

from .errors import EstimationError, ValidationError


@dataclass(frozen=True)
class BBox:
    x_min: float
    y_min: float
    x_max: float
    y_max: float

    def __post_init__(self):
        vals = (self.x_min, self.y_min, self.x_max, self.y_max)
        if not all(math.isfinite(v) for v in vals):
            raise ValidationError(f"non-finite box {vals}")
        if not (self.x_min < self.x_max and self.y_min < self.y_max):
            raise ValidationError(f"box has non-positive extent: {vals}")

    @property
    def area(self) -> float:
        return (self.x_max - self.x_min) * (self.y_max - self.y_min)

    @property
    def width(self) -> float:
        return self.x_max - self.x_min

    @property
    def height(self) -> float:
        return self.y_max - self.y_min

    def as_tuple(self) -> tuple[float, float, float, float]:
        return (self.x_min, self.y_min, self.x_max, self.y_max)

    def clip(self, width: float, height: float) -> BBox | None:
        """Clip to ``[0,width]x[0,height]``; ``None`` if nothing remains."""
        x0, y0 = max(self.x_min, 0.0), max(self.y_min, 0.0)
        x1, y1 = min(self.x_max, float(width)), min(self.y_max, float(height))
        if x1 <= x0 or y1 <= y0:
            return None
        return BBox(x0, y0, x1, y1)

    @classmethod
    def from_cxcywh(cls, cx: float, cy: float, w: float, h: float) -> BBox:
        return cls(cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2)


def iou(a: BBox, b: BBox) -> float:
    """Intersection over union of two valid boxes."""
    for box in (a, b):
        if not isinstance(box, BBox):
            raise ValidationError(f"expected BBox, got {type(box).__name__}")
    iw = min(a.x_max, b.x_max) - max(a.x_min, b.x_min)
    ih = min(a.y_max, b.y_max) - max(a.y_min, b.y_min)
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    return inter / (a.area + b.area - inter)


def box_iou_tensor(boxes: torch.Tensor, ref: torch.Tensor) -> torch.Tensor:
    """IoU of each row of ``boxes`` (N,4 corner form) with a single ``ref`` box.

    Differentiable in ``boxes``; zero where the boxes are disjoint.
    """
    ix = (torch.minimum(boxes[..., 2], ref[2]) - torch.maximum(boxes[..., 0], ref[0])).clamp(min=0)
    iy = (torch.minimum(boxes[..., 3], ref[3]) - torch.maximum(boxes[..., 1], ref[1])).clamp(min=0)
    inter = ix * iy
    area = (boxes[..., 2] - boxes[..., 0]).clamp(min=0) * (boxes[..., 3] - boxes[..., 1]).clamp(min=0)
    ref_area = (ref[2] - ref[0]) * (ref[3] - ref[1])
    union = area + ref_area - inter
    return inter / union.clamp(min=1e-12)


def _cross(o: np.ndarray, a: np.ndarray, b: np.ndarray) -> float:
    return float((a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0]))


class Quad:
    """Four corners in pixels: top-left, top-right, bottom-right, bottom-left.

    In image coordinates (y down) this ordering is clockwise on screen, which
    gives a positive shoelace area. Corners must form a strictly convex polygon.
    """

    __slots__ = ("corners",)

    def __init__(self, corners: Sequence[Sequence[float]] | np.ndarray):
        pts = np.asarray(corners, dtype=np.float64)
        if pts.shape != (4, 2):
            raise ValidationError(f"quad needs 4x2 corners, got shape {pts.shape}")
        if not np.all(np.isfinite(pts)):
            raise ValidationError("quad corners must be finite")
        scale = max(1.0, float(np.abs(pts).max()))
        for i in range(4):
            c = _cross(pts[i - 1], pts[i], pts[(i + 1) % 4])
            if not c > 1e-9 * scale * scale:
                raise ValidationError(f"degenerate or non-convex quad at corner {i}: {pts.tolist()}")
        pts.setflags(write=False)
        self.corners = pts

    @property
    def area(self) -> float:
        x, y = self.corners[:, 0], self.corners[:, 1]
        return 0.5 * float(np.dot(x, np.roll(y, -1)) - np.dot(np.roll(x, -1), y))

    def bounds(self) -> BBox:
        lo = self.corners.min(axis=0)
        hi = self.corners.max(axis=0)
        return BBox(float(lo[0]), float(lo[1]), float(hi[0]), float(hi[1]))

    def contains(self, x: np.ndarray, y: np.ndarray) -> np.ndarray:
        """Inclusive point-in-quad test for arrays of points."""
        inside = np.ones(np.broadcast(x, y).shape, dtype=bool)
        for i in range(4):
            ax, ay = self.corners[i]
            bx, by = self.corners[(i + 1) % 4]
            inside &= (bx - ax) * (y - ay) - (by - ay) * (x - ax) >= 0
        return inside

    def tolist(self) -> list[list[float]]:
        return self.corners.tolist()

    def __eq__(self, other):
        return isinstance(other, Quad) and np.array_equal(self.corners, other.corners)

    def __repr__(self):
        return f"Quad({self.corners.tolist()})"

    @classmethod
    def from_rect(cls, x0: float, y0: float, x1: float, y1: float) -> Quad:
        return cls([[x0, y0], [x1, y0], [x1, y1], [x0, y1]])


def _normalizer(pts: np.ndarray) -> np.ndarray:
    # Hartley: centroid to origin, mean distance sqrt(2)
    c = pts.mean(axis=0)
    d = np.sqrt(((pts - c) ** 2).sum(axis=1)).mean()
    s = math.sqrt(2) / d
    return np.array([[s, 0, -s * c[0]], [0, s, -s * c[1]], [0, 0, 1.0]])


def homography_from_quads(src: Quad, dst: Quad) -> np.ndarray:
    """3x3 homography mapping each ``src`` corner onto the matching ``dst`` corner.

    Normalized DLT: both point sets are conditioned, the 8x9 design matrix is
    solved for its null vector by SVD, and the result is de-normalized and
    scaled so ``H[2, 2] == 1``.
    """
    if not isinstance(src, Quad) or not isinstance(dst, Quad):
        raise ValidationError("homography_from_quads expects Quad inputs")
    ts, td = _normalizer(src.corners), _normalizer(dst.corners)
    ps = (ts @ np.c_[src.corners, np.ones(4)].T).T
    pd = (td @ np.c_[dst.corners, np.ones(4)].T).T
    rows = []
    for (x, y, _), (u, v, _) in zip(ps, pd):
        rows.append([-x, -y, -1, 0, 0, 0, u * x, u * y, u])
        rows.append([0, 0, 0, -x, -y, -1, v * x, v * y, v])
    a = np.asarray(rows)
    _, sv, vt = np.linalg.svd(a)
    if sv[7] < 1e-12 * sv[0]:
        raise EstimationError("singular homography system")
    hn = vt[-1].reshape(3, 3)
    h = np.linalg.inv(td) @ hn @ ts
    if abs(h[2, 2]) < 1e-12:
        raise EstimationError("homography maps a corner to infinity")
    h = h / h[2, 2]
    if abs(np.linalg.det(h)) < 1e-12:
        raise EstimationError("singular homography")
    return h


def apply_homography(h: np.ndarray, pts: np.ndarray) -> np.ndarray:
    pts = np.asarray(pts, dtype=np.float64)
    hp = np.c_[pts, np.ones(len(pts))] @ h.T
    return hp[:, :2] / hp[:, 2:3]


def _check_unit_range(t: torch.Tensor, name: str):
    if t.ndim != 3 or t.shape[0] != 3:
        raise ValidationError(f"{name} must be a 3xHxW image, got {tuple(t.shape)}")
    with torch.no_grad():
        lo, hi = float(t.min()), float(t.max())
    if not (lo >= 0.0 and hi <= 1.0):
        raise ValidationError(f"{name} values must lie in [0,1], got [{lo}, {hi}]")


def warp_composite(background: torch.Tensor, patch: torch.Tensor, dst: Quad) -> torch.Tensor:
    """Paste ``patch`` onto ``background`` inside the quad ``dst``.

    Pixel centers sit at half-integer coordinates. For each background pixel
    whose center lies inside ``dst`` the inverse homography gives a location
    on the patch, which is sampled bilinearly with zero padding. Every other
    pixel is copied from ``background`` unchanged. Differentiable in ``patch``.
    """
    if not isinstance(dst, Quad):
        raise ValidationError("dst must be a Quad")
    _check_unit_range(background, "background")
    _check_unit_range(patch, "patch")
    _, height, width = background.shape
    _, ph, pw = patch.shape

    src = Quad.from_rect(0.0, 0.0, float(pw), float(ph))
    h_inv = np.linalg.inv(homography_from_quads(src, dst))

    b = dst.bounds()
    x0, y0 = max(int(math.floor(b.x_min)), 0), max(int(math.floor(b.y_min)), 0)
    x1, y1 = min(int(math.ceil(b.x_max)), width), min(int(math.ceil(b.y_max)), height)
    if x1 <= x0 or y1 <= y0:
        return background

    xs = np.arange(x0, x1, dtype=np.float64) + 0.5
    ys = np.arange(y0, y1, dtype=np.float64) + 0.5
    gx, gy = np.meshgrid(xs, ys)
    inside = dst.contains(gx, gy)
    if not inside.any():
        return background

    denom = h_inv[2, 0] * gx + h_inv[2, 1] * gy + h_inv[2, 2]
    u = (h_inv[0, 0] * gx + h_inv[0, 1] * gy + h_inv[0, 2]) / denom
    v = (h_inv[1, 0] * gx + h_inv[1, 1] * gy + h_inv[1, 2]) / denom
    # align_corners=False: -1 / +1 are the outer edges of the patch
    grid = np.stack([2.0 * u / pw - 1.0, 2.0 * v / ph - 1.0], axis=-1)
    grid_t = torch.from_numpy(grid).to(patch.dtype)[None]
    sampled = F.grid_sample(patch[None], grid_t, mode="bilinear",
                            padding_mode="zeros", align_corners=False)[0]

    mask = torch.zeros((height, width), dtype=torch.bool)
    mask[y0:y1, x0:x1] = torch.from_numpy(inside)
    full = F.pad(sampled, (x0, width - x1, y0, height - y1))
    dtype = torch.promote_types(background.dtype, patch.dtype)
    return torch.where(mask, full.to(dtype), background.to(dtype))
