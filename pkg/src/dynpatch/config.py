"""Pipeline configuration: one YAML section per module.

The shipped ``default_config.yaml`` spells out every default. User files are
deep-merged over it, unknown keys are rejected, and sections are turned into
the dataclasses each module consumes.
"""
from __future__ import annotations

import copy
import dataclasses
from importlib import resources
from pathlib import Path

import yaml

from .attack import OptimizerConfig
from .detector import DetectorConfig
from .errors import ValidationError
from .evaluate import EvalConfig
from .scenesim import PhotometricModel, SceneConfig, TrajectorySpec
from .sitnet import LossWeights, SitNetConfig

SECTIONS = ("run", "scenesim", "simulate", "detector", "sitnet", "cluster", "attack", "evaluate", "heatmap")
SEEDED_SECTIONS = ("detector", "sitnet", "cluster", "attack")


def default_config_path() -> Path:
    return Path(str(resources.files("dynpatch") / "default_config.yaml"))


def _merge(base: dict, override: dict, path: str = "") -> dict:
    out = copy.deepcopy(base)
    for key, value in override.items():
        where = f"{path}{key}"
        if key not in base:
            raise ValidationError(f"unknown config key `{where}`")
        if isinstance(base[key], dict):
            if not isinstance(value, dict):
                raise ValidationError(f"config key `{where}` must be a mapping")
            out[key] = _merge(base[key], value, where + ".")
        else:
            out[key] = copy.deepcopy(value)
    return out


def load_config(path: str | Path | None = None, seed: int | None = None, overrides: dict | None = None) -> dict:
    """Defaults, then the file at ``path``, then ``overrides``, then ``seed``.

    ``seed`` replaces the seed of every trained or optimized component
    (detector, SIT-Net, clustering, attack); dataset seeds are left alone.
    """
    with open(default_config_path()) as fh:
        cfg = yaml.safe_load(fh)
    if path is not None:
        with open(path) as fh:
            user = yaml.safe_load(fh) or {}
        if not isinstance(user, dict):
            raise ValidationError(f"{path}: top level must be a mapping")
        cfg = _merge(cfg, user)
    if overrides:
        cfg = _merge(cfg, overrides)
    if seed is not None:
        cfg = with_seed(cfg, seed)
    validate(cfg)
    return cfg


def with_seed(cfg: dict, seed: int) -> dict:
    out = copy.deepcopy(cfg)
    out["run"]["seed"] = int(seed)
    for section in SEEDED_SECTIONS:
        out[section]["seed"] = int(seed)
    return out


def _tuplify(v):
    if isinstance(v, list):
        return tuple(_tuplify(x) for x in v)
    return v


def _build(cls, d: dict, skip: tuple[str, ...] = ()):
    names = {f.name for f in dataclasses.fields(cls)}
    kwargs = {}
    for key, value in d.items():
        if key in skip:
            continue
        if key not in names:
            raise ValidationError(f"{cls.__name__} has no field `{key}`")
        kwargs[key] = _tuplify(value)
    return cls(**kwargs)


def scene_config(cfg: dict) -> SceneConfig:
    sec = dict(cfg["scenesim"])
    photometric = _build(PhotometricModel, sec.pop("photometric"))
    return dataclasses.replace(_build(SceneConfig, sec), photometric=photometric)


def trajectory(cfg: dict, dataset: dict, split: str, scenario: str, sign_classes=None) -> TrajectorySpec:
    sim = cfg["simulate"]
    return TrajectorySpec(
        layouts=tuple(sim["layouts"]),
        sign_classes=tuple(sign_classes or (scenario,)),
        d_min=float(sim["d_min"]), d_max=float(sim["d_max"]),
        frames_per_episode=int(dataset["frames_per_episode"]),
        background_seeds=tuple(dataset["background_seeds"]),
        placement_seed=int(dataset["placement_seed"]),
        placements_per_scene=int(dataset["placements_per_scene"]),
        split=split, scenario=scenario)


def detector_config(cfg: dict) -> DetectorConfig:
    return _build(DetectorConfig, cfg["detector"])


def sitnet_config(cfg: dict) -> SitNetConfig:
    return _build(SitNetConfig, cfg["sitnet"], skip=("alpha", "beta", "n_pairs", "pairs_seed"))


def loss_weights(cfg: dict) -> LossWeights:
    return LossWeights(float(cfg["sitnet"]["alpha"]), float(cfg["sitnet"]["beta"]))


def optimizer_config(cfg: dict) -> OptimizerConfig:
    return _build(OptimizerConfig, cfg["attack"])


def eval_config(cfg: dict) -> EvalConfig:
    return _build(EvalConfig, cfg["evaluate"], skip=("methods", "splits"))


def validate(cfg: dict):
    missing = [s for s in SECTIONS if s not in cfg]
    if missing:
        raise ValidationError(f"config is missing sections {missing}")
    scene_config(cfg)
    detector_config(cfg)
    sitnet_config(cfg)
    loss_weights(cfg)
    optimizer_config(cfg)
    eval_config(cfg)
    cl = cfg["cluster"]
    if int(cl["k"]) < 1:
        raise ValidationError("cluster.k must be >= 1")
    if cl["feature_mode"] not in ("distances", "positions"):
        raise ValidationError("cluster.feature_mode must be `distances` or `positions`")
    sim = cfg["simulate"]
    for name in sim["scenarios"]:
        if name not in SceneConfig().sign_classes or name == "stop":
            raise ValidationError(f"scenario `{name}` must be a non-stop sign class")
    for split in cfg["evaluate"]["splits"]:
        if split not in ("similar", "unseen"):
            raise ValidationError(f"unknown evaluation split `{split}`")
