"""Synthetic driving scenes seen from the camera car.

The world is flat and top-down: every pose is expressed in the camera-car
frame (x forward, y left, heading counter-clockwise from +x). A forward-facing
pinhole camera sits at the origin at ``camera_height`` above the floor.
Objects are a patch car (a cuboid carrying a screen on one face) and a traffic
sign drawn as a fronto-parallel glyph on a pole.
"""
from __future__ import annotations

import dataclasses
import functools
import json
import math
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
import torch
from PIL import Image, ImageDraw
from scipy import ndimage

from .errors import ValidationError
from .geometry import BBox, Quad, warp_composite

SIGN_CLASSES = ("go_straight", "turn", "pedestrian", "stop")
LAYOUTS = ("intersection", "lane_change")
MANIFEST_FORMAT = "dynpatch-manifest"
MANIFEST_VERSION = 1
NEAR_PLANE = 0.05


@dataclass(frozen=True)
class Pose2D:
    x: float
    y: float
    heading: float = 0.0

    def __post_init__(self):
        if not all(math.isfinite(v) for v in (self.x, self.y, self.heading)):
            raise ValidationError(f"non-finite pose {self}")
        # wrap into [-pi, pi)
        h = (self.heading + math.pi) % (2 * math.pi) - math.pi
        object.__setattr__(self, "heading", h)

    def distance_to(self, other: Pose2D) -> float:
        return math.hypot(self.x - other.x, self.y - other.y)

    def to_list(self) -> list[float]:
        return [self.x, self.y, self.heading]

    @classmethod
    def from_list(cls, v: Sequence[float]) -> Pose2D:
        return cls(float(v[0]), float(v[1]), float(v[2]))


@dataclass(frozen=True)
class PhotometricModel:
    """Ground-truth display-to-capture color transform."""

    gain: tuple[float, float, float] = (1.0, 1.0, 1.0)
    bias: tuple[float, float, float] = (0.0, 0.0, 0.0)
    gamma: float = 1.0
    blur_radius: float = 0.0
    noise: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if len(self.gain) != 3 or len(self.bias) != 3:
            raise ValidationError("gain and bias need one value per channel")
        if not all(g > 0 and math.isfinite(g) for g in self.gain):
            raise ValidationError(f"gains must be positive, got {self.gain}")
        if not all(math.isfinite(b) for b in self.bias):
            raise ValidationError("bias must be finite")
        if not (self.gamma > 0 and math.isfinite(self.gamma)):
            raise ValidationError(f"gamma must be positive, got {self.gamma}")
        if not self.blur_radius >= 0:
            raise ValidationError("blur radius must be >= 0")
        if not self.noise >= 0:
            raise ValidationError("noise amplitude must be >= 0")

    @classmethod
    def identity(cls) -> PhotometricModel:
        return cls()


@dataclass(frozen=True)
class SceneConfig:
    image_size: int = 256
    focal: float = 200.0
    camera_height: float = 0.2
    sign_classes: tuple[str, ...] = SIGN_CLASSES
    sign_size: float = 0.3
    sign_height: float = 0.5
    car_length: float = 0.5
    car_width: float = 0.4
    car_height: float = 0.32
    car_color: tuple[float, float, float] = (0.18, 0.18, 0.2)
    screen_width: float = 0.36
    screen_height: float = 0.22
    screen_center_height: float = 0.17
    screen_offset: float = 0.005
    screen_resolution: int = 64
    calibration_color: tuple[float, float, float] = (0.0, 0.0, 1.0)
    background_seed: int = 0
    pose_noise: float = 0.02
    photometric: PhotometricModel = field(default_factory=lambda: PhotometricModel(
        gain=(0.8, 0.9, 1.05), bias=(0.06, 0.03, -0.03), gamma=1.5,
        blur_radius=0.7, noise=0.01, seed=1234))

    def __post_init__(self):
        for name in ("image_size", "focal", "camera_height", "sign_size", "sign_height",
                     "car_length", "car_width", "car_height", "screen_width",
                     "screen_height", "screen_resolution"):
            if not getattr(self, name) > 0:
                raise ValidationError(f"{name} must be positive")
        if self.pose_noise < 0:
            raise ValidationError("pose_noise must be >= 0")
        unknown = set(self.sign_classes) - set(SIGN_CLASSES)
        if unknown:
            raise ValidationError(f"unknown sign classes {sorted(unknown)}")
        if not any(c != "stop" for c in self.sign_classes):
            raise ValidationError("at least one non-stop sign class must be enabled")
        if isinstance(self.photometric, dict):
            object.__setattr__(self, "photometric", PhotometricModel(**self.photometric))

    @property
    def center(self) -> float:
        return self.image_size / 2.0

    def project(self, x: float, y: float, z: float) -> tuple[float, float]:
        """Pinhole projection of a camera-frame point (x forward, y left, z up)."""
        u = self.center - self.focal * y / x
        v = self.center - self.focal * (z - self.camera_height) / x
        return u, v


@dataclass
class FrameRecord:
    pixels: torch.Tensor  # uint8, 3 x H x W
    camera: Pose2D
    patch_car: Pose2D
    sign: Pose2D
    recorded_camera: Pose2D
    recorded_patch_car: Pose2D
    recorded_sign: Pose2D
    quad: Quad | None
    sign_class: str
    sign_box: BBox | None
    car_box: BBox | None
    seed: int
    layout: str = "intersection"
    background_seed: int = 0
    split: str = "train"
    scenario: str = ""
    frame_id: int = 0
    cluster_id: int | None = None
    image_path: str | None = None

    @property
    def image(self) -> torch.Tensor:
        """Float RGB image in [0, 1]."""
        return self.pixels.float() / 255.0

    @property
    def screen_visible(self) -> bool:
        return self.quad is not None

    @property
    def sign_visible(self) -> bool:
        return self.sign_box is not None

    def to_json(self) -> dict:
        return {
            "frame_id": self.frame_id,
            "image": self.image_path,
            "seed": self.seed,
            "layout": self.layout,
            "scenario": self.scenario,
            "split": self.split,
            "background_seed": self.background_seed,
            "poses": {
                "camera": self.camera.to_list(),
                "patch_car": self.patch_car.to_list(),
                "sign": self.sign.to_list(),
            },
            "recorded_poses": {
                "camera": self.recorded_camera.to_list(),
                "patch_car": self.recorded_patch_car.to_list(),
                "sign": self.recorded_sign.to_list(),
            },
            "quad": self.quad.tolist() if self.quad is not None else None,
            "sign_class": self.sign_class,
            "sign_box": list(self.sign_box.as_tuple()) if self.sign_box else None,
            "car_box": list(self.car_box.as_tuple()) if self.car_box else None,
            "cluster_id": self.cluster_id,
        }

    @classmethod
    def from_json(cls, d: dict, image: torch.Tensor) -> FrameRecord:
        poses, rec = d["poses"], d["recorded_poses"]
        return cls(
            pixels=to_uint8(image),
            camera=Pose2D.from_list(poses["camera"]),
            patch_car=Pose2D.from_list(poses["patch_car"]),
            sign=Pose2D.from_list(poses["sign"]),
            recorded_camera=Pose2D.from_list(rec["camera"]),
            recorded_patch_car=Pose2D.from_list(rec["patch_car"]),
            recorded_sign=Pose2D.from_list(rec["sign"]),
            quad=Quad(d["quad"]) if d["quad"] is not None else None,
            sign_class=d["sign_class"],
            sign_box=BBox(*d["sign_box"]) if d["sign_box"] else None,
            car_box=BBox(*d["car_box"]) if d["car_box"] else None,
            seed=d["seed"],
            layout=d["layout"],
            background_seed=d["background_seed"],
            split=d["split"],
            scenario=d["scenario"],
            frame_id=d["frame_id"],
            cluster_id=d.get("cluster_id"),
            image_path=d.get("image"),
        )


# ---------------------------------------------------------------------------
# Geometry of the patch car
# ---------------------------------------------------------------------------

def _face_frame(car: Pose2D, config: SceneConfig, face: str):
    """Center, outward normal and half-extent along the face for one car side."""
    c, s = math.cos(car.heading), math.sin(car.heading)
    fwd = np.array([c, s])
    left = np.array([-s, c])
    half_l, half_w = config.car_length / 2, config.car_width / 2
    normal, depth, extent = {
        "front": (fwd, half_l, half_w),
        "rear": (-fwd, half_l, half_w),
        "left": (left, half_w, half_l),
        "right": (-left, half_w, half_l),
    }[face]
    center = np.array([car.x, car.y]) + normal * depth
    return center, normal, extent


def screen_corners_3d(patch_car: Pose2D, config: SceneConfig, face: str = "left") -> np.ndarray:
    """Screen corners (TL, TR, BR, BL as seen from in front of the screen)."""
    center, normal, _ = _face_frame(patch_car, config, face)
    center = center + normal * config.screen_offset
    # a viewer looking at the screen faces -normal; their right is (-n_y, n_x)
    right = np.array([-normal[1], normal[0]])
    hw, hh = config.screen_width / 2, config.screen_height / 2
    zc = config.screen_center_height
    out = []
    for sx, z in ((-hw, zc + hh), (hw, zc + hh), (hw, zc - hh), (-hw, zc - hh)):
        p = center + right * sx
        out.append((p[0], p[1], z))
    return np.asarray(out)


def _to_camera(p: Pose2D, camera: Pose2D) -> Pose2D:
    """Express ``p`` in the frame of ``camera`` (identity when camera is the origin)."""
    if camera.x == 0 and camera.y == 0 and camera.heading == 0:
        return p
    c, s = math.cos(camera.heading), math.sin(camera.heading)
    dx, dy = p.x - camera.x, p.y - camera.y
    return Pose2D(c * dx + s * dy, -s * dx + c * dy, p.heading - camera.heading)


def screen_quad(camera: Pose2D, patch_car: Pose2D, config: SceneConfig,
                face: str = "left") -> Quad | None:
    """Image quad of the screen, or ``None`` when it is not visible."""
    car = _to_camera(patch_car, camera)
    corners = screen_corners_3d(car, config, face)
    center, normal, _ = _face_frame(car, config, face)
    # back-face: the camera must be on the normal side of the screen
    if float(np.dot(normal, -center)) <= 0:
        return None
    if np.any(corners[:, 0] <= NEAR_PLANE):
        return None
    pts = [config.project(*c) for c in corners]
    try:
        quad = Quad(pts)
    except ValidationError:
        return None
    if quad.bounds().clip(config.image_size, config.image_size) is None:
        return None
    return quad


def _car_corners(car: Pose2D, config: SceneConfig) -> np.ndarray:
    c, s = math.cos(car.heading), math.sin(car.heading)
    hl, hw = config.car_length / 2, config.car_width / 2
    out = []
    for z in (0.0, config.car_height):
        for lx, ly in ((hl, hw), (hl, -hw), (-hl, -hw), (-hl, hw)):
            out.append((car.x + c * lx - s * ly, car.y + s * lx + c * ly, z))
    return np.asarray(out)


def screen_face_for(layout: str) -> str:
    return {"intersection": "left", "lane_change": "rear"}[layout]


# ---------------------------------------------------------------------------
# Photometric model
# ---------------------------------------------------------------------------

def apply_photometric(model: PhotometricModel, image: torch.Tensor) -> torch.Tensor:
    """Gain/bias, gamma, Gaussian blur, seeded noise, then clip to [0,1].

    Values are floored at zero before the gamma so fractional exponents stay real.
    """
    if not isinstance(model, PhotometricModel):
        raise ValidationError("model must be a PhotometricModel")
    x = image.detach().cpu().numpy().astype(np.float64)
    if x.ndim != 3 or x.shape[0] != 3:
        raise ValidationError(f"expected 3xHxW image, got {x.shape}")
    if x.min() < 0 or x.max() > 1:
        raise ValidationError("image values must lie in [0,1]")
    x = x * np.asarray(model.gain)[:, None, None] + np.asarray(model.bias)[:, None, None]
    if model.gamma != 1.0:
        x = np.maximum(x, 0.0) ** model.gamma
    if model.blur_radius > 0:
        x = np.stack([ndimage.gaussian_filter(ch, model.blur_radius, mode="nearest") for ch in x])
    if model.noise > 0:
        x = x + np.random.default_rng(model.seed).normal(0.0, model.noise, size=x.shape)
    return torch.from_numpy(np.clip(x, 0.0, 1.0)).to(image.dtype)


# ---------------------------------------------------------------------------
# Rendering
# ---------------------------------------------------------------------------

@functools.lru_cache(maxsize=64)
def _background(size: int, focal: float, cam_h: float, seed: int) -> np.ndarray:
    rng = np.random.default_rng([seed, 7919])
    horizon = size // 2
    img = np.empty((size, size, 3))

    def smooth(shape, cells):
        coarse = rng.uniform(-1, 1, size=(cells, cells, 3))
        zoom = (shape[0] / cells, shape[1] / cells, 1)
        return ndimage.zoom(coarse, zoom, order=3, mode="nearest")[: shape[0], : shape[1]]

    wall = rng.uniform(0.35, 0.85, size=3)
    floor = rng.uniform(0.25, 0.6, size=3) * rng.uniform(0.7, 1.0)
    img[:horizon] = wall + 0.08 * smooth((horizon, size), int(rng.integers(3, 9)))
    img[horizon:] = floor + 0.05 * smooth((size - horizon, size), int(rng.integers(3, 9)))

    # posters / clutter on the wall
    for _ in range(int(rng.integers(2, 7))):
        w, h = rng.integers(8, 60), rng.integers(6, 40)
        x0, y0 = rng.integers(0, size - w), rng.integers(0, max(horizon - h, 1))
        img[y0:y0 + h, x0:x0 + w] = rng.uniform(0.2, 0.9, size=3) * np.array([1.0, 1.0, 0.75])

    # floor markings
    rows = np.arange(horizon + 1, size)
    depth = focal * cam_h / (rows + 0.5 - size / 2.0)
    cols = np.arange(size) + 0.5
    lateral = (size / 2.0 - cols[None, :]) * depth[:, None] / focal
    line_color = rng.choice([np.array([0.9, 0.9, 0.85]), np.array([0.9, 0.8, 0.2])])
    for y_line in rng.uniform(-1.5, 1.5, size=int(rng.integers(1, 4))):
        mask = np.abs(lateral - y_line) < 0.015
        img[horizon + 1:][mask] = line_color
    return np.clip(img, 0, 1)


def _glyph(sign_class: str, a: np.ndarray, b: np.ndarray):
    """Colour layers for a sign glyph on normalized face coords in [-1,1]^2 (b down)."""
    white = np.array([0.95, 0.95, 0.95])
    layers = []
    if sign_class == "stop":
        outline = (np.abs(a) <= 1) & (np.abs(b) <= 1) & (np.abs(a) + np.abs(b) <= math.sqrt(2))
        layers.append((outline, np.array([0.8, 0.08, 0.08])))
        layers.append(((np.abs(b) < 0.18) & (np.abs(a) < 0.62), white))
    elif sign_class in ("go_straight", "turn"):
        disk = a * a + b * b <= 1
        layers.append((disk, np.array([0.08, 0.3, 0.8])))
        if sign_class == "go_straight":
            shaft = (np.abs(a) < 0.14) & (b > -0.15) & (b < 0.7)
            head = (b >= -0.7) & (b <= -0.15) & (np.abs(a) <= (b + 0.7) * 0.8)
        else:
            shaft = ((np.abs(a + 0.3) < 0.14) & (b > -0.25) & (b < 0.7)) | \
                    ((np.abs(b + 0.1) < 0.14) & (a > -0.44) & (a < 0.2))
            head = (a >= 0.2) & (a <= 0.72) & (np.abs(b + 0.1) <= (0.72 - a) * 0.8)
        layers.append((shaft | head, white))
    elif sign_class == "pedestrian":
        layers.append((np.ones_like(a, dtype=bool), np.array([0.1, 0.35, 0.75])))
        tri = (b <= 0.75) & (b >= -0.75) & (np.abs(a) <= (b + 0.75) * 0.6)
        layers.append((tri, white))
        figure = ((a + 0.0) ** 2 + (b + 0.05) ** 2 < 0.02) | ((np.abs(a) < 0.07) & (b > 0.05) & (b < 0.55))
        layers.append((figure, np.array([0.05, 0.05, 0.05])))
    else:
        raise ValidationError(f"invalid sign class {sign_class!r}")
    return layers


def sign_face_box(sign: Pose2D, config: SceneConfig) -> BBox | None:
    """Pixel-snapped face box before clipping, or ``None`` when behind the camera."""
    if sign.x <= NEAR_PLANE:
        return None
    u, v = config.project(sign.x, sign.y, config.sign_height)
    half = config.focal * config.sign_size / (2 * sign.x)
    x0, x1 = round(u - half), round(u + half)
    y0, y1 = round(v - half), round(v + half)
    if x1 - x0 < 2 or y1 - y0 < 2:
        return None
    return BBox(float(x0), float(y0), float(x1), float(y1))


def _sign_faces_camera(sign: Pose2D) -> bool:
    normal = np.array([math.cos(sign.heading), math.sin(sign.heading)])
    return float(np.dot(normal, [-sign.x, -sign.y])) > 0


def _draw_sign(img: np.ndarray, sign: Pose2D, sign_class: str, config: SceneConfig) -> BBox | None:
    face = sign_face_box(sign, config)
    if face is None:
        return None
    size = config.image_size
    # pole from the face bottom to the floor
    u, _ = config.project(sign.x, sign.y, 0.0)
    ground = config.project(sign.x, sign.y, 0.0)[1]
    pole_w = max(1, round(config.focal * 0.02 / sign.x))
    px0 = int(max(round(u - pole_w / 2), 0))
    px1 = int(min(round(u + pole_w / 2) + (pole_w == 1), size))
    py0, py1 = int(max(face.y_max, 0)), int(min(round(ground), size))
    if px1 > px0 and py1 > py0:
        img[py0:py1, px0:px1] = (0.45, 0.45, 0.45)

    clipped = face.clip(size, size)
    if clipped is None:
        return None
    x0, y0, x1, y1 = (int(v) for v in clipped.as_tuple())
    n_x, n_y = face.width, face.height
    cols = np.arange(x0, x1) + 0.5
    rows = np.arange(y0, y1) + 0.5
    a = (cols[None, :] - face.x_min) / n_x * 2 - 1
    b = (rows[:, None] - face.y_min) / n_y * 2 - 1
    a, b = np.broadcast_arrays(a, b)
    region = img[y0:y1, x0:x1]
    if not _sign_faces_camera(sign):
        back = (a * a + b * b <= 1) | (np.abs(a) + np.abs(b) <= math.sqrt(2))
        region[back] = (0.55, 0.55, 0.55)
        return None
    for mask, color in _glyph(sign_class, a, b):
        region[mask] = color
    if clipped.area < 0.5 * face.area:
        return None
    return clipped


def _draw_car(img: np.ndarray, car: Pose2D, config: SceneConfig) -> BBox | None:
    corners = _car_corners(car, config)
    if np.any(corners[:, 0] <= NEAR_PLANE):
        return None
    pts = np.array([config.project(*c) for c in corners])
    size = config.image_size
    canvas = Image.new("L", (size, size), 0)
    draw = ImageDraw.Draw(canvas)
    # faces: 4 sides (bottom ring 0-3, top ring 4-7); shade by outward normal
    base = np.asarray(config.car_color)
    sides = [(0, 1), (1, 2), (2, 3), (3, 0)]
    hull = _convex_hull(pts)
    draw.polygon([tuple(p) for p in hull], fill=1)
    for shade_idx, (i, j) in enumerate(sides):
        mid = (corners[i, :2] + corners[j, :2]) / 2
        centre = np.array([car.x, car.y])
        normal = mid - centre
        if float(np.dot(normal, -mid)) <= 0:
            continue
        poly = [pts[i], pts[j], pts[j + 4], pts[i + 4]]
        draw.polygon([tuple(p) for p in poly], fill=2 + shade_idx)
    labels = np.asarray(canvas)
    for val in range(1, 6):
        m = labels == val
        if m.any():
            img[m] = np.clip(base * (0.85 + 0.1 * val), 0, 1)
    lo, hi = hull.min(axis=0), hull.max(axis=0)
    try:
        return BBox(float(lo[0]), float(lo[1]), float(hi[0]), float(hi[1])).clip(size, size)
    except ValidationError:
        return None


def _convex_hull(pts: np.ndarray) -> np.ndarray:
    pts = sorted(map(tuple, pts))

    def half(points):
        out = []
        for p in points:
            while len(out) >= 2 and ((out[-1][0] - out[-2][0]) * (p[1] - out[-2][1])
                                     - (out[-1][1] - out[-2][1]) * (p[0] - out[-2][0])) <= 0:
                out.pop()
            out.append(p)
        return out

    lower, upper = half(pts), half(reversed(pts))
    return np.asarray(lower[:-1] + upper[:-1])


def quantize_8bit(x: torch.Tensor) -> torch.Tensor:
    return torch.round(x.clamp(0, 1) * 255.0) / 255.0


def to_uint8(x: torch.Tensor) -> torch.Tensor:
    if x.dtype == torch.uint8:
        return x.contiguous()
    return torch.round(x.detach().float().clamp(0, 1) * 255.0).to(torch.uint8).contiguous()


def render_frame(config: SceneConfig, seed: int, camera: Pose2D, patch_car: Pose2D,
                 sign_pose: Pose2D, sign_class: str, patch: torch.Tensor | None = None,
                 layout: str = "intersection") -> FrameRecord:
    """Render one frame; deterministic in all arguments.

    With ``patch=None`` the screen shows the calibration colour. Otherwise the
    ground-truth photometric model is applied to the patch before it is warped
    onto the screen quad. The image is quantized to 8 bits like a camera frame.
    """
    if sign_class not in SIGN_CLASSES or sign_class not in config.sign_classes:
        raise ValidationError(f"invalid sign class {sign_class!r}")
    size = config.image_size
    rng = np.random.default_rng([seed, 104729])
    img = _background(size, config.focal, config.camera_height, config.background_seed).copy()
    img *= rng.uniform(0.9, 1.1)
    np.clip(img, 0, 1, out=img)

    car = _to_camera(patch_car, camera)
    sign = _to_camera(sign_pose, camera)
    face = screen_face_for(layout)
    quad = screen_quad(camera, patch_car, config, face)

    # painter's order: far object first; the screen belongs to the car
    objects = sorted([("car", math.hypot(car.x, car.y)), ("sign", math.hypot(sign.x, sign.y))],
                     key=lambda t: -t[1])
    sign_box = car_box = None
    image_t = None
    for name, _ in objects:
        if name == "car":
            car_box = _draw_car(img, car, config)
            image_t = torch.from_numpy(img).permute(2, 0, 1).contiguous()
            if quad is not None:
                if patch is None:
                    color = torch.tensor(config.calibration_color, dtype=torch.float64)
                    image_t = _fill_quad(image_t, quad, color)
                else:
                    shown = apply_photometric(config.photometric, patch.detach().to(torch.float64))
                    image_t = warp_composite(image_t, shown, quad)
            img = image_t.permute(1, 2, 0).numpy().copy()
        else:
            sign_box = _draw_sign(img, sign, sign_class, config)

    return FrameRecord(
        pixels=to_uint8(torch.from_numpy(img).permute(2, 0, 1)), camera=camera, patch_car=patch_car, sign=sign_pose,
        recorded_camera=camera, recorded_patch_car=patch_car, recorded_sign=sign_pose,
        quad=quad, sign_class=sign_class, sign_box=sign_box, car_box=car_box,
        seed=seed, layout=layout, background_seed=config.background_seed,
    )


def _fill_quad(image: torch.Tensor, quad: Quad, color: torch.Tensor) -> torch.Tensor:
    size = image.shape[-1]
    gx, gy = np.meshgrid(np.arange(size) + 0.5, np.arange(image.shape[-2]) + 0.5)
    mask = torch.from_numpy(quad.contains(gx, gy))
    return torch.where(mask, color[:, None, None].to(image.dtype), image)


# ---------------------------------------------------------------------------
# Datasets
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class TrajectorySpec:
    """Approach trajectories for one dataset.

    ``background_seeds`` is the pool of environments episodes draw from;
    ``placement_seed`` drives sign and car-route placements so disjoint seeds
    give disjoint layouts. With ``placements_per_scene == 0`` every episode
    gets a fresh placement; with ``n >= 1`` each (background, layout) scene has
    ``n`` fixed placements that do not depend on the dataset seed, so datasets
    drawn with different seeds revisit the same scenes.
    """

    layouts: tuple[str, ...] = LAYOUTS
    sign_classes: tuple[str, ...] = SIGN_CLASSES
    d_min: float = 1.0
    d_max: float = 4.0
    frames_per_episode: int = 8
    background_seeds: tuple[int, ...] = (0, 1, 2, 3)
    placement_seed: int = 0
    placements_per_scene: int = 0
    split: str = "train"
    scenario: str = ""

    def __post_init__(self):
        if not self.d_max > self.d_min or self.d_min <= 0:
            raise ValidationError(f"empty distance range [{self.d_min}, {self.d_max}]")
        if self.placements_per_scene < 0:
            raise ValidationError("placements_per_scene must be >= 0")
        if not self.layouts or set(self.layouts) - set(LAYOUTS):
            raise ValidationError(f"invalid layouts {self.layouts}")
        if not self.sign_classes:
            raise ValidationError("need at least one sign class")
        if not self.background_seeds:
            raise ValidationError("need at least one background seed")


@dataclass
class DatasetManifest:
    frames: list[FrameRecord] = field(default_factory=list)
    header: dict = field(default_factory=dict)

    def __len__(self):
        return len(self.frames)

    def __iter__(self):
        return iter(self.frames)

    def subset(self, predicate) -> DatasetManifest:
        return DatasetManifest([f for f in self.frames if predicate(f)], dict(self.header))


def _noisy(p: Pose2D, rng: np.random.Generator, sigma: float) -> Pose2D:
    if sigma == 0:
        return p
    dx, dy = rng.normal(0.0, sigma, size=2)
    return Pose2D(p.x + dx, p.y + dy, p.heading)


def _episode_poses(layout: str, rng: np.random.Generator, lateral: float, n: int, spec: TrajectorySpec,
                   route_rng: np.random.Generator | None = None):
    """Yield true (patch_car, sign) poses for an approach of ``n`` frames.

    ``route_rng`` draws the car route (defaults to ``rng``); the approach
    distances and per-frame jitter always come from ``rng``.
    """
    span = spec.d_max - spec.d_min
    d_start = rng.uniform(spec.d_min + 0.55 * span, spec.d_max)
    d_end = rng.uniform(spec.d_min, spec.d_min + 0.45 * span)
    route_rng = rng if route_rng is None else route_rng
    out = []
    if layout == "intersection":
        gap = route_rng.uniform(0.3, 0.55)
        y0, y1 = route_rng.uniform(-1.3, -0.9), route_rng.uniform(-0.8, -0.55)
        for i in range(n):
            t = i / max(n - 1, 1)
            d = d_start + (d_end - d_start) * t
            sign = Pose2D(d, -lateral, math.pi)
            car = Pose2D(d + gap - 0.3 * (1 - t) * rng.uniform(0.8, 1.0),
                         y0 + (y1 - y0) * t, math.pi / 2)
            out.append((car, sign))
    else:
        ahead = route_rng.uniform(-0.4, 0.2)
        lane = route_rng.uniform(0.4, 0.55)
        for i in range(n):
            t = i / max(n - 1, 1)
            d = d_start + (d_end - d_start) * t
            sign = Pose2D(d, -lateral, math.pi)
            car = Pose2D(d + ahead, lane - 0.15 * t, -0.25 * t)
            out.append((car, sign))
    return out


def generate_driving_dataset(config: SceneConfig, trajectory: TrajectorySpec, n_frames: int,
                             seed: int, require_screen: bool = True) -> DatasetManifest:
    """Sample ``n_frames`` frames along noisy approach trajectories.

    Candidates whose true or recorded camera-to-object distances leave
    ``[d_min, d_max]`` or whose sign is not visible are dropped.
    """
    if n_frames < 0:
        raise ValidationError("n_frames must be >= 0")
    header = {"format": MANIFEST_FORMAT, "version": MANIFEST_VERSION, "seed": seed,
              "split": trajectory.split, "scenario": trajectory.scenario,
              "d_range": [trajectory.d_min, trajectory.d_max]}
    frames: list[FrameRecord] = []
    episode = 0
    origin = Pose2D(0.0, 0.0, 0.0)
    attempts = 0
    while len(frames) < n_frames:
        rng = np.random.default_rng([seed, episode])
        place_rng = np.random.default_rng([trajectory.placement_seed, seed, episode, 17])
        episode += 1
        layout = trajectory.layouts[int(rng.integers(len(trajectory.layouts)))]
        sign_class = trajectory.sign_classes[int(rng.integers(len(trajectory.sign_classes)))]
        bg = trajectory.background_seeds[int(rng.integers(len(trajectory.background_seeds)))]
        route_rng = None
        if trajectory.placements_per_scene:
            slot = int(rng.integers(trajectory.placements_per_scene))
            place_rng = np.random.default_rng([trajectory.placement_seed, int(bg), LAYOUTS.index(layout), slot, 17])
            route_rng = place_rng
        lateral = place_rng.uniform(0.35, 0.6)
        cfg = dataclasses.replace(config, background_seed=int(bg))
        for car, sign in _episode_poses(layout, rng, lateral, trajectory.frames_per_episode, trajectory,
                                        route_rng):
            if len(frames) >= n_frames:
                break
            attempts += 1
            if attempts > 50 * max(n_frames, 1) + 1000:
                raise ValidationError("trajectory spec rarely yields valid frames")
            if not all(trajectory.d_min <= origin.distance_to(p) <= trajectory.d_max for p in (car, sign)):
                continue
            rec = None
            for _ in range(20):
                rc, rp, rs = (_noisy(p, rng, config.pose_noise) for p in (origin, car, sign))
                if all(trajectory.d_min <= rc.distance_to(p) <= trajectory.d_max for p in (rp, rs)):
                    rec = (rc, rp, rs)
                    break
            if rec is None:
                continue
            frame_seed = int(np.random.default_rng([seed, episode, len(frames)]).integers(2**31))
            fr = render_frame(cfg, frame_seed, origin, car, sign, sign_class, layout=layout)
            if not fr.sign_visible or (require_screen and not fr.screen_visible):
                continue
            fr.recorded_camera, fr.recorded_patch_car, fr.recorded_sign = rec
            fr.split = trajectory.split
            fr.scenario = trajectory.scenario
            fr.frame_id = len(frames)
            frames.append(fr)
    return DatasetManifest(frames, header)


def _random_display(rng: np.random.Generator, res: int) -> np.ndarray:
    kind = rng.integers(3)
    cells = int(rng.integers(2, 6))
    coarse = rng.uniform(0, 1, size=(cells, cells, 3))
    img = ndimage.zoom(coarse, (res / cells, res / cells, 1), order=3, mode="nearest")[:res, :res]
    if kind >= 1:
        # hard edges: half-planes and rectangles, some at the extremes of the range
        yy, xx = np.mgrid[:res, :res] + 0.5
        for _ in range(int(rng.integers(1, 5))):
            color = rng.choice([0.0, 1.0], size=3) if rng.random() < 0.4 else rng.uniform(0, 1, size=3)
            if rng.random() < 0.5:
                ang = rng.uniform(0, 2 * math.pi)
                off = rng.uniform(-0.3, 0.3) * res
                m = (xx - res / 2) * math.cos(ang) + (yy - res / 2) * math.sin(ang) > off
            else:
                x0, y0 = rng.integers(0, res, size=2)
                m = (xx >= x0) & (xx < x0 + rng.integers(4, res)) & (yy >= y0) & (yy < y0 + rng.integers(4, res))
            img[m] = color
    if kind == 2:
        # blocky pixel noise, closer to optimized patches
        block = int(rng.choice([1, 2, 4]))
        n = res // block
        noise = rng.uniform(0, 1, size=(n, n, 3)).repeat(block, 0).repeat(block, 1)
        m = rng.random() * 0.8 + 0.2
        img = (1 - m) * img + m * noise
    return np.clip(img, 0, 1)


def generate_screen_pairs(config: SceneConfig, n_pairs: int, seed: int,
                          model: PhotometricModel | None = None):
    """Displayed images and their captured, rectified appearance."""
    if n_pairs < 0:
        raise ValidationError("n_pairs must be >= 0")
    model = config.photometric if model is None else model
    res = config.screen_resolution
    pairs = []
    for i in range(n_pairs):
        rng = np.random.default_rng([seed, i])
        shown = torch.from_numpy(_random_display(rng, res)).permute(2, 0, 1).float().contiguous()
        shown = quantize_8bit(shown)
        captured = apply_photometric(model, shown)
        pairs.append((shown, captured))
    return pairs


# ---------------------------------------------------------------------------
# Persistence
# ---------------------------------------------------------------------------

def save_png(image: torch.Tensor, path: Path):
    arr = to_uint8(image).permute(1, 2, 0).numpy()
    Image.fromarray(arr, mode="RGB").save(path, optimize=False)


def load_png(path: Path) -> torch.Tensor:
    arr = np.asarray(Image.open(path).convert("RGB"), dtype=np.float32)
    return torch.from_numpy(arr / 255.0).permute(2, 0, 1).contiguous()


def save_manifest(manifest: DatasetManifest, path: str | Path, image_dir: str | Path | None = None):
    """Write PNG images and a JSONL manifest whose first line is a versioned header."""
    path = Path(path)
    image_dir = Path(image_dir) if image_dir is not None else path.parent / (path.stem + "_images")
    image_dir.mkdir(parents=True, exist_ok=True)
    path.parent.mkdir(parents=True, exist_ok=True)
    header = dict(manifest.header)
    header.setdefault("format", MANIFEST_FORMAT)
    header.setdefault("version", MANIFEST_VERSION)
    header["n_frames"] = len(manifest)
    with open(path, "w") as fh:
        fh.write(json.dumps({"header": header}, sort_keys=True) + "\n")
        for fr in manifest.frames:
            name = f"{fr.frame_id:06d}.png"
            save_png(fr.pixels, image_dir / name)
            fr.image_path = str((image_dir / name).relative_to(path.parent))
            fh.write(json.dumps(fr.to_json(), sort_keys=True) + "\n")


def load_manifest(path: str | Path) -> DatasetManifest:
    path = Path(path)
    with open(path) as fh:
        lines = [ln for ln in fh if ln.strip()]
    if not lines:
        raise ValidationError(f"empty manifest {path}")
    header = json.loads(lines[0]).get("header")
    if not header or header.get("format") != MANIFEST_FORMAT:
        raise ValidationError(f"{path} is not a {MANIFEST_FORMAT} file")
    if header.get("version") != MANIFEST_VERSION:
        raise ValidationError(f"unsupported manifest version {header.get('version')}")
    frames = []
    for ln in lines[1:]:
        d = json.loads(ln)
        frames.append(FrameRecord.from_json(d, load_png(path.parent / d["image"])))
    return DatasetManifest(frames, header)


def update_cluster_ids(path: str | Path, cluster_ids: Iterable[int | None], dest: str | Path | None = None):
    """Set the cluster id of each frame line, in place or into a copy at ``dest``.

    A copy keeps pointing at the original images (paths are rebased).
    """
    path = Path(path)
    dest = path if dest is None else Path(dest)
    with open(path) as fh:
        lines = [ln for ln in fh if ln.strip()]
    out = [lines[0]]
    ids = list(cluster_ids)
    if len(ids) != len(lines) - 1:
        raise ValidationError("cluster id count does not match manifest")
    for ln, cid in zip(lines[1:], ids):
        d = json.loads(ln)
        d["cluster_id"] = cid
        if dest != path and d.get("image"):
            d["image"] = os.path.relpath(path.parent / d["image"], dest.parent)
        out.append(json.dumps(d, sort_keys=True) + "\n")
    dest.parent.mkdir(parents=True, exist_ok=True)
    with open(dest, "w") as fh:
        fh.writelines(out)
