"""Attack evaluation: success rule, stop/proceed decision, per-frame logs and reports."""
from __future__ import annotations

import dataclasses
import json
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import torch

from .attack import PatchSet, apply_patch, assign_cluster, pose_features, select_patch
from .detector import Detection, GridDetector, decode_detections, detector_forward
from .errors import ValidationError
from .geometry import BBox, iou
from .scenesim import FrameRecord, SceneConfig, render_frame
from .sitnet import SitNet

METHODS = ("dynamic", "static", "none")
PROCEED, STOP = "PROCEED", "STOP"
SIGN_LABELS = {"go_straight": "Go-straight", "turn": "Turn", "pedestrian": "Pedestrian", "stop": "Stop"}
SPLIT_LABELS = {"similar": "Similar", "unseen": "Unseen"}


@dataclass(frozen=True)
class EvalConfig:
    conf_threshold: float = 0.25
    nms_iou: float = 0.5
    success_conf: float = 0.5
    min_iou: float = 0.05
    stop_class: str = "stop"
    render: str = "ground_truth"

    def __post_init__(self):
        if self.render not in ("ground_truth", "sitnet"):
            raise ValidationError(f"unknown render mode {self.render!r}")


@dataclass(frozen=True)
class DecisionOutcome:
    action: str
    trigger: Detection | None = None

    def __post_init__(self):
        if self.action not in (PROCEED, STOP):
            raise ValidationError(f"unknown action {self.action!r}")
        if (self.action == STOP) != (self.trigger is not None):
            raise ValidationError("STOP requires a trigger and PROCEED forbids one")


def _qualifies(det: Detection, region: BBox, config: EvalConfig) -> bool:
    return (det.class_name == config.stop_class and det.confidence > config.success_conf
            and iou(det.box, region) > config.min_iou)


def decision_rule(detections: Sequence[Detection], expected_sign_region: BBox,
                  config: EvalConfig = EvalConfig()) -> DecisionOutcome:
    """STOP on the most confident stop detection that overlaps the expected sign region."""
    for det in sorted(detections, key=lambda d: -d.confidence):
        if _qualifies(det, expected_sign_region, config):
            return DecisionOutcome(STOP, det)
    return DecisionOutcome(PROCEED)


def is_success(detections: Sequence[Detection], sign_box: BBox, config: EvalConfig = EvalConfig()) -> bool:
    """Some decoded stop detection beats the confidence bar and overlaps the sign box."""
    return any(_qualifies(d, sign_box, config) for d in detections)


def method_patch(frame: FrameRecord, method: str, patchset: PatchSet | None) -> torch.Tensor | None:
    if method == "none":
        return None
    if patchset is None:
        raise ValidationError(f"method {method!r} needs a patch set")
    if method == "static":
        return patchset.static
    if method == "dynamic":
        return select_patch(patchset, frame.recorded_camera, frame.recorded_patch_car, frame.recorded_sign)
    raise ValidationError(f"unknown method {method!r}")


def attacked_image(frame: FrameRecord, patch: torch.Tensor | None, scene: SceneConfig,
                   sitnet: SitNet | None = None, config: EvalConfig = EvalConfig()) -> torch.Tensor:
    """Frame as the camera sees it with ``patch`` on the screen (blue screen when ``None``)."""
    if patch is None:
        return frame.image
    if config.render == "sitnet":
        with torch.no_grad():
            return apply_patch(frame, patch, sitnet).float()
    cfg = dataclasses.replace(scene, background_seed=frame.background_seed)
    return render_frame(cfg, frame.seed, frame.camera, frame.patch_car, frame.sign, frame.sign_class,
                        patch=patch, layout=frame.layout).image


def detect(detector: GridDetector, image: torch.Tensor, config: EvalConfig = EvalConfig()) -> list[Detection]:
    with torch.no_grad():
        raw = detector_forward(detector, image)
    return decode_detections(raw, config.conf_threshold, config.nms_iou, detector.config.classes,
                             detector.config.stride)


def attack_success(frame: FrameRecord, method: str, patchset: PatchSet | None, detector: GridDetector,
                   sitnet: SitNet | None, scene: SceneConfig = SceneConfig(),
                   config: EvalConfig = EvalConfig()) -> bool:
    if frame.quad is None:
        raise ValidationError(f"frame {frame.frame_id}: screen quad not visible")
    if frame.sign_box is None:
        raise ValidationError(f"frame {frame.frame_id}: no sign box")
    image = attacked_image(frame, method_patch(frame, method, patchset), scene, sitnet, config)
    return is_success(detect(detector, image, config), frame.sign_box, config)


def _max_stop_conf(dets: Sequence[Detection], region: BBox, config: EvalConfig) -> float:
    vals = [d.confidence for d in dets if d.class_name == config.stop_class and iou(d.box, region) > config.min_iou]
    return max(vals, default=0.0)


def evaluate_frames(frames: Iterable[FrameRecord], methods: Sequence[str], patchset: PatchSet | None,
                    detector: GridDetector, sitnet: SitNet | None, scene: SceneConfig = SceneConfig(),
                    config: EvalConfig = EvalConfig()) -> list[dict]:
    """One log record per (frame, method); frames without a quad or sign box are logged as skipped."""
    logs = []
    for fr in frames:
        base = {"frame_id": fr.frame_id, "scenario": fr.scenario, "split": fr.split,
                "sign_class": fr.sign_class, "cluster_id": fr.cluster_id}
        for method in methods:
            rec = dict(base, method=method)
            if fr.quad is None or fr.sign_box is None:
                rec.update(skipped=True, reason="screen not visible" if fr.quad is None else "sign not visible")
                logs.append(rec)
                continue
            patch = method_patch(fr, method, patchset)
            dets = detect(detector, attacked_image(fr, patch, scene, sitnet, config), config)
            success = is_success(dets, fr.sign_box, config)
            decision = decision_rule(dets, fr.sign_box, config)
            # the correct action for a non-stop sign is PROCEED
            flipped = fr.sign_class != config.stop_class and decision.action == STOP
            rec.update(skipped=False, success=bool(success), decision=decision.action, flip=bool(flipped),
                       stop_conf=_max_stop_conf(dets, fr.sign_box, config),
                       assigned_cluster=(None if method != "dynamic" else
                                         _patch_cluster(patchset, fr)))
            logs.append(rec)
    return logs


def _patch_cluster(patchset: PatchSet, fr: FrameRecord) -> int:
    feats = pose_features(fr.recorded_camera, fr.recorded_patch_car, fr.recorded_sign,
                          patchset.cluster_model.feature_mode)
    return assign_cluster(patchset.cluster_model, feats)


@dataclass
class AttackReport:
    """Cells keyed ``"sign|split|method"`` with counts, rates and mean stop confidence."""

    cells: dict[str, dict] = field(default_factory=dict)
    skipped: list[dict] = field(default_factory=list)

    @staticmethod
    def key(sign: str, split: str, method: str) -> str:
        return f"{sign}|{split}|{method}"

    def cell(self, sign: str, split: str, method: str) -> dict | None:
        return self.cells.get(self.key(sign, split, method))

    def rate(self, sign: str, split: str, method: str) -> float | None:
        c = self.cell(sign, split, method)
        return None if c is None else c["success_rate"]

    def to_json(self) -> dict:
        return {"cells": self.cells, "skipped": self.skipped}

    @classmethod
    def from_json(cls, d: dict) -> AttackReport:
        return cls(dict(d["cells"]), list(d["skipped"]))


def report_from_logs(logs: Iterable[dict]) -> AttackReport:
    """Aggregate per-frame logs; cells with no evaluated frame are absent."""
    groups: dict[str, list[dict]] = defaultdict(list)
    report = AttackReport()
    for rec in logs:
        if rec.get("skipped"):
            report.skipped.append(rec)
            continue
        groups[AttackReport.key(rec["sign_class"], rec["split"], rec["method"])].append(rec)
    for key in sorted(groups):
        recs = groups[key]
        n = len(recs)
        succ = sum(r["success"] for r in recs)
        flips = sum(r["flip"] for r in recs)
        report.cells[key] = {"n_frames": n, "successes": succ, "success_rate": succ / n,
                             "flips": flips, "flip_rate": flips / n,
                             "mean_stop_conf": sum(r["stop_conf"] for r in recs) / n}
    return report


def evaluate_success_rates(frames: Iterable[FrameRecord], methods: Sequence[str], patchset: PatchSet | None,
                           detector: GridDetector, sitnet: SitNet | None, scene: SceneConfig = SceneConfig(),
                           config: EvalConfig = EvalConfig()) -> tuple[AttackReport, list[dict]]:
    logs = evaluate_frames(frames, methods, patchset, detector, sitnet, scene, config)
    return report_from_logs(logs), logs


def merge_reports(reports: Iterable[AttackReport]) -> AttackReport:
    out = AttackReport()
    for r in reports:
        for k, v in r.cells.items():
            if k in out.cells:
                raise ValidationError(f"duplicate report cell {k}")
            out.cells[k] = v
        out.skipped.extend(r.skipped)
    return out


def compare_dynamic_static(report: AttackReport) -> dict:
    """Per (sign, split) dynamic-minus-static deltas and frame-weighted aggregate margins."""
    pairs = defaultdict(dict)
    for key, cell in report.cells.items():
        sign, split, method = key.split("|")
        pairs[(sign, split)][method] = cell
    if not any("dynamic" in v for v in pairs.values()) or not any("static" in v for v in pairs.values()):
        raise ValidationError("report needs both dynamic and static results")
    deltas, weights = {}, defaultdict(float)
    sums = defaultdict(float)
    for (sign, split), cells in sorted(pairs.items()):
        if "dynamic" not in cells or "static" not in cells:
            continue
        d, s = cells["dynamic"], cells["static"]
        delta = d["success_rate"] - s["success_rate"]
        deltas[f"{sign}|{split}"] = delta
        n = d["n_frames"]
        for agg in (split, "all"):
            sums[agg] += n * delta
            weights[agg] += n
    margins = {k: sums[k] / weights[k] for k in sorted(weights)}
    return {"deltas": deltas, "margin": margins}


def aggregate_rate(report: AttackReport, split: str, method: str, signs: Sequence[str] | None = None) -> float:
    """Frame-weighted success rate over signs for one split and method."""
    n = s = 0
    for key, cell in report.cells.items():
        sign, sp, m = key.split("|")
        if sp == split and m == method and (signs is None or sign in signs):
            n += cell["n_frames"]
            s += cell["successes"]
    if n == 0:
        raise ValidationError(f"no frames for split {split!r} method {method!r}")
    return s / n


def render_table(report: AttackReport, signs: Sequence[str] = ("go_straight", "turn", "pedestrian"),
                 splits: Sequence[str] = ("similar", "unseen"), methods: Sequence[str] = ("dynamic", "static")) -> str:
    """Plain-text success-rate table: one row per sign, split x method columns, total-frame row."""
    cols = [(sp, m) for sp in splits for m in methods]
    head = ["Sign"] + [f"{SPLIT_LABELS.get(sp, sp)} {m.capitalize()}" for sp, m in cols]
    rows = []
    for sign in signs:
        row = [SIGN_LABELS.get(sign, sign)]
        for sp, m in cols:
            c = report.cell(sign, sp, m)
            row.append("-" if c is None else f"{100 * c['success_rate']:.1f}%")
        rows.append(row)
    total = ["Total frames"]
    for sp, m in cols:
        total.append(str(sum((report.cell(s, sp, m) or {}).get("n_frames", 0) for s in signs)))
    rows.append(total)
    widths = [max(len(r[i]) for r in [head] + rows) for i in range(len(head))]
    fmt = lambda r: " | ".join(v.ljust(w) for v, w in zip(r, widths))  # noqa: E731
    lines = [fmt(head), "-+-".join("-" * w for w in widths)] + [fmt(r) for r in rows]
    return "\n".join(lines) + "\n"


def write_logs(path: str | Path, logs: Iterable[dict]):
    with open(path, "w") as fh:
        for rec in logs:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")


def read_logs(path: str | Path) -> list[dict]:
    with open(path) as fh:
        return [json.loads(ln) for ln in fh if ln.strip()]
