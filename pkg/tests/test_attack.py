import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from dynpatch.attack import (CandidateSet, ClusterFeatures, OptimizerConfig, PatchSet, apply_patch,
                             assign_cluster, attack_objective, build_patchset, cluster_features,
                             evaluate_objective, filter_overlapping, frame_objective, initial_patch,
                             kmeans_fit, load_patchset, optimize_patch, pose_features, save_patchset,
                             select_patch)
from dynpatch.detector import CLASSES, DetectorConfig, build_detector, encode_box
from dynpatch.errors import ValidationError
from dynpatch.geometry import BBox, Quad, iou
from dynpatch.scenesim import Pose2D
from dynpatch.sitnet import SitNetConfig, build_sitnet

from oracles import best_partition_wcss, central_difference, rel_err, topk_objective_enum, wcss

ORIGIN = Pose2D(0.0, 0.0, 0.0)


# --- features -------------------------------------------------------------

def test_features_345():
    f = pose_features(ORIGIN, Pose2D(3, 4, 0), Pose2D(0, 0, 0))
    assert f[0] == pytest.approx(5.0)
    assert f[1] == 0.0


def test_features_coincident():
    p = Pose2D(1.5, -2.0, 0.3)
    assert pose_features(p, p, p).tolist() == [0.0, 0.0]


def test_features_missing_pose():
    with pytest.raises(ValidationError):
        pose_features(ORIGIN, None, ORIGIN)


def test_stored_frames_match_distance_oracle(small_frames):
    for fr in small_frames:
        f = cluster_features(fr)
        cam, car, sign = fr.recorded_camera, fr.recorded_patch_car, fr.recorded_sign
        assert f.d_patch == pytest.approx(math.hypot(car.x - cam.x, car.y - cam.y), abs=1e-12)
        assert f.d_target == pytest.approx(math.hypot(sign.x - cam.x, sign.y - cam.y), abs=1e-12)


def test_cluster_features_invariants():
    with pytest.raises(ValidationError):
        ClusterFeatures(-1.0, 0.0)


# --- k-means --------------------------------------------------------------

def test_kmeans_k1_is_mean():
    pts = np.random.default_rng(0).normal(size=(20, 2))
    m = kmeans_fit(pts, 1, seed=0)
    np.testing.assert_allclose(m.centroids[0], pts.mean(axis=0), atol=1e-12)


def test_kmeans_saturated():
    pts = np.random.default_rng(1).normal(size=(5, 2))
    m = kmeans_fit(pts, 5, seed=0)
    assert m.inertia == pytest.approx(0.0, abs=1e-20)


def test_kmeans_six_points_optimal():
    pts = np.array([[0, 0], [0.2, 0.1], [0.1, 0.3], [3, 3], [3.2, 2.9], [2.8, 3.3]])
    m = kmeans_fit(pts, 2, seed=0)
    assert m.inertia == pytest.approx(best_partition_wcss(pts, 2), abs=1e-9)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 100_000), st.integers(3, 8), st.integers(1, 3))
def test_kmeans_matches_exhaustive_optimum(seed, n, k):
    pts = np.random.default_rng(seed).uniform(0, 5, size=(n, 2))
    m = kmeans_fit(pts, k, seed=seed)
    labels = [assign_cluster(m, p) for p in pts]
    assert wcss(pts, labels) == pytest.approx(m.inertia, abs=1e-9)
    assert m.inertia == pytest.approx(best_partition_wcss(pts, k), abs=1e-9)


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 100_000))
def test_kmeans_inertia_non_increasing(seed):
    pts = np.random.default_rng(seed).normal(size=(60, 2))
    hist = kmeans_fit(pts, 3, seed=seed, n_init=1).inertia_history
    assert all(b <= a + 1e-9 for a, b in zip(hist, hist[1:]))


def test_kmeans_deterministic_and_sorted():
    pts = np.random.default_rng(2).uniform(0, 5, size=(50, 2))
    a, b = kmeans_fit(pts, 3, seed=4), kmeans_fit(pts, 3, seed=4)
    np.testing.assert_array_equal(a.centroids, b.centroids)
    assert list(a.centroids[:, 0]) == sorted(a.centroids[:, 0])
    assert sum(a.counts) == 50


def test_kmeans_too_few_points():
    with pytest.raises(ValidationError):
        kmeans_fit(np.zeros((2, 2)), 3)


def test_assign_exact_and_tie():
    m = kmeans_fit(np.array([[0.0, 0.0], [2.0, 0.0], [4.0, 0.0]]), 3, seed=0)
    for j, c in enumerate(m.centroids):
        assert assign_cluster(m, c) == j
    m.centroids = np.array([[0.0, 0.0], [10.0, 10.0], [2.0, 0.0]])
    assert assign_cluster(m, ClusterFeatures(1.0, 0.0)) == 0


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 100_000))
def test_assign_matches_linear_scan(seed):
    rng = np.random.default_rng(seed)
    m = kmeans_fit(rng.uniform(0, 5, size=(30, 2)), 3, seed=seed)
    x = rng.uniform(0, 5, size=2)
    best, best_d = 0, math.inf
    for j, c in enumerate(m.centroids):
        d = (x[0] - c[0]) ** 2 + (x[1] - c[1]) ** 2
        if d < best_d:
            best, best_d = j, d
    assert assign_cluster(m, x) == best


# --- candidate filtering and objective -------------------------------------

def _grid_with(boxes, grid=16, stride=16.0, obj_logit=3.0, stop_logit=4.0):
    """Raw grid where every cell predicts a vanishing box except the given ones."""
    raw = torch.zeros(grid, grid, 5 + len(CLASSES), dtype=torch.float64)
    raw[..., 3:5] = -12.0
    raw[..., 0] = -6.0
    for b in boxes:
        r, c, t = encode_box(b, stride)
        raw[r, c, 1:5] = torch.tensor(t, dtype=torch.float64)
        raw[r, c, 0] = obj_logit
        raw[r, c, 5] = stop_logit
    return raw


def test_filter_empty_when_nothing_overlaps():
    raw = _grid_with([BBox(10, 10, 30, 30)])
    assert len(filter_overlapping(raw, BBox(150, 150, 190, 190), 0.05)) == 0


def test_filter_keeps_exact_match():
    b = BBox(100.5, 60.25, 140.0, 99.0)
    raw = _grid_with([b])
    for tau in (0.01, 0.5, 0.99):
        m = filter_overlapping(raw, b, tau)
        assert len(m) == 1
        assert iou(BBox(*m.boxes[0].tolist()), b) == pytest.approx(1.0, abs=1e-9)


def _box_with_iou(ref: BBox, target: float) -> BBox:
    # shift horizontally: IoU = (w - s) / (w + s) for equal boxes
    s = ref.width * (1 - target) / (1 + target)
    return BBox(ref.x_min + s, ref.y_min, ref.x_max + s, ref.y_max)


def test_filter_boundary():
    ref = BBox(80, 80, 120, 120)
    low, high = _box_with_iou(ref, 0.04), _box_with_iou(ref, 0.06)
    assert iou(low, ref) == pytest.approx(0.04)
    assert len(filter_overlapping(_grid_with([low]), ref, 0.05)) == 0
    assert len(filter_overlapping(_grid_with([high]), ref, 0.05)) == 1


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 10_000), st.floats(0, 0.9), st.floats(0, 0.9))
def test_filter_monotone_in_tau(seed, t1, t2):
    raw = torch.randn(16, 16, 10, generator=torch.Generator().manual_seed(seed), dtype=torch.float64)
    ref = BBox(90, 70, 140, 130)
    lo, hi = sorted((t1, t2))
    big, small = filter_overlapping(raw, ref, lo), filter_overlapping(raw, ref, hi)
    assert set(small.cells.tolist()) <= set(big.cells.tolist())
    assert len(big) <= 256


def _cands(objs, probs, boxes):
    n = len(objs)
    cls = torch.zeros(n, len(CLASSES), dtype=torch.float64)
    cls[:, 0] = torch.tensor(probs, dtype=torch.float64)
    cls[:, 1] = 1 - cls[:, 0]
    return CandidateSet(torch.as_tensor(boxes, dtype=torch.float64).reshape(-1, 4),
                        torch.tensor(objs, dtype=torch.float64),
                        cls, torch.arange(n))


def test_objective_empty_and_saturated():
    ref = BBox(0, 0, 10, 10)
    assert float(attack_objective(_cands([], [], torch.zeros(0, 4)), ref)) == 0.0
    assert float(attack_objective(_cands([1.0], [1.0], [[0, 0, 10, 10]]), ref, k=3)) == pytest.approx(1.0)


def test_objective_three_boxes_topk():
    ref = BBox(0, 0, 10, 10)
    boxes = [[0, 0, 10, 10], [0, 0, 10, 5], [5, 0, 15, 10]]
    objs, probs = [0.8, 0.6, 0.1], [0.5, 0.9, 1.0]
    ious = [iou(BBox(*b), ref) for b in boxes]
    expected = topk_objective_enum([o * p for o, p in zip(objs, probs)], ious, 2)
    assert float(attack_objective(_cands(objs, probs, boxes), ref, k=2)) == pytest.approx(expected, abs=1e-12)
    # by hand: conf 0.4 and 0.54 win, IoUs 1 and 0.5
    assert expected == pytest.approx((0.54 * 0.5 + 0.4 * 1.0) / 2)


@settings(max_examples=50, deadline=None)
@given(st.lists(st.tuples(st.floats(0, 1), st.floats(0, 1), st.floats(-20, 20), st.floats(1, 20)),
                min_size=0, max_size=8), st.integers(1, 5))
def test_objective_in_unit_interval_and_matches_enumeration(rows, k):
    ref = BBox(0, 0, 10, 10)
    boxes = [[x, 0, x + w, 10] for _, _, x, w in rows]
    objs, probs = [r[0] for r in rows], [r[1] for r in rows]
    c = _cands(objs, probs, boxes if boxes else torch.zeros(0, 4))
    v = float(attack_objective(c, ref, k=k))
    assert 0.0 <= v <= 1.0
    confs = [o * p for o, p in zip(objs, probs)]
    ious = [iou(BBox(*b), ref) for b in boxes]
    if len(set(confs)) == len(confs):
        assert v == pytest.approx(topk_objective_enum(confs, ious, k), abs=1e-12)


def test_empty_set_surrogate_has_zero_value_and_gradient():
    raw = _grid_with([]).requires_grad_(True)
    ref = BBox(100, 100, 130, 130)
    val = frame_objective(raw, ref)
    assert float(val.detach()) == 0.0
    val.backward()
    assert float(raw.grad.abs().sum()) > 0


# --- patch application and optimization ------------------------------------

@pytest.fixture(scope="module")
def tiny_models():
    det = build_detector(DetectorConfig(), seed=11)
    sit = build_sitnet(SitNetConfig(), seed=0)
    return det, sit


def test_apply_patch_outside_unchanged(small_frames, tiny_models):
    fr = small_frames[0]
    out = apply_patch(fr, initial_patch(64, 0), tiny_models[1])
    h, w = out.shape[1:]
    gx, gy = np.meshgrid(np.arange(w) + 0.5, np.arange(h) + 0.5)
    outside = torch.from_numpy(~fr.quad.contains(gx, gy))
    assert torch.equal(out[:, outside].float(), fr.image[:, outside])


def test_apply_patch_identity_full_frame(small_frames):
    fr = small_frames[0]
    size = fr.image.shape[-1]
    full = type(fr)(**{**fr.__dict__, "quad": Quad.from_rect(0, 0, size, size)})
    patch = initial_patch(size, 3)
    net = build_sitnet(SitNetConfig(init="identity", head="linear"))
    out = apply_patch(full, patch, net)
    assert float((out.detach() - patch).abs().max()) < 1e-6


def test_apply_patch_requires_quad(small_frames, tiny_models):
    fr = type(small_frames[0])(**{**small_frames[0].__dict__, "quad": None})
    with pytest.raises(ValidationError):
        apply_patch(fr, initial_patch(64, 0), tiny_models[1])


def test_chain_gradient_matches_finite_differences(small_frames):
    det = build_detector(DetectorConfig(), seed=11).double()
    sit = build_sitnet(SitNetConfig(init="random"), seed=2).double()
    fr = small_frames[0]
    bg = fr.image.double()
    patch = (0.1 + 0.8 * torch.rand(3, 64, 64, generator=torch.Generator().manual_seed(0),
                                    dtype=torch.float64)).requires_grad_(True)

    def fn(p):
        return frame_objective(det(apply_patch(fr, p, sit, bg)[None])[0], fr.sign_box)

    fn(patch).backward()
    assert float(patch.grad.abs().sum()) > 0
    rng = np.random.default_rng(0)
    ok = 0
    coords = [(int(c), int(y), int(x)) for c, y, x in
              zip(rng.integers(0, 3, 30), rng.integers(4, 60, 30), rng.integers(4, 60, 30))]
    for idx in coords:
        fd = central_difference(fn, patch, idx)
        ok += rel_err(fd, float(patch.grad[idx])) < 1e-3
    assert ok / len(coords) >= 0.95


def _opt_cfg(**kw):
    base = dict(iterations=4, batch_size=2, eval_every=2, resolution=64, lr=0.5, optimizer="adam")
    base.update(kw)
    return OptimizerConfig(**base)


def test_zero_step_returns_initial(small_frames, tiny_models):
    det, sit = tiny_models
    res = optimize_patch(small_frames[:4], det, sit, _opt_cfg(lr=0.0, optimizer="ascent"), seed=5)
    assert torch.equal(res.patch, initial_patch(64, 5))


def test_optimizer_best_not_below_initial_and_deterministic(small_frames, tiny_models):
    det, sit = tiny_models
    cfg = _opt_cfg()
    r1 = optimize_patch(small_frames[:4], det, sit, cfg)
    r2 = optimize_patch(small_frames[:4], det, sit, cfg)
    assert torch.equal(r1.patch, r2.patch)
    assert float(r1.patch.min()) >= 0 and float(r1.patch.max()) <= 1
    init_val = evaluate_objective(small_frames[:4], r1.initial, det, sit, cfg)
    best_val = evaluate_objective(small_frames[:4], r1.patch, det, sit, cfg)
    assert best_val >= init_val
    assert len(r1.curve) == cfg.iterations


def test_optimizer_rejects_bad_frames(small_frames, tiny_models):
    det, sit = tiny_models
    with pytest.raises(ValidationError):
        optimize_patch([], det, sit, _opt_cfg())
    quadless = type(small_frames[0])(**{**small_frames[0].__dict__, "quad": None})
    with pytest.raises(ValidationError):
        optimize_patch([quadless], det, sit, _opt_cfg())


def test_optimizer_config_validation():
    with pytest.raises(ValidationError):
        OptimizerConfig(tau=1.0)
    with pytest.raises(ValidationError):
        OptimizerConfig(iterations=0)


def _fit(frames, k):
    return kmeans_fit(np.array([cluster_features(f).as_array() for f in frames]), k, seed=0)


def test_patchset_shape_and_round_trip(small_frames, tiny_models, tmp_path):
    det, sit = tiny_models
    ps = build_patchset(small_frames, _fit(small_frames, 3), det, sit, _opt_cfg(iterations=1, eval_every=1))
    assert sorted(ps.patches) == [0, 1, 2] and ps.static is not None
    assert ps.info["static"]["iterations"] == 3
    save_patchset(ps, tmp_path / "ps")
    back = load_patchset(tmp_path / "ps")
    for c in ps.patches:
        assert torch.equal(back.patches[c], ps.patches[c])
    assert torch.equal(back.static, ps.static)
    np.testing.assert_array_equal(back.cluster_model.centroids, ps.cluster_model.centroids)


def test_patchset_single_cluster_equals_static(small_frames, tiny_models):
    det, sit = tiny_models
    ps = build_patchset(small_frames[:4], _fit(small_frames[:4], 1), det, sit, _opt_cfg(iterations=2))
    assert torch.equal(ps.patches[0], ps.static)


def test_patchset_requires_one_patch_per_cluster(small_frames):
    model = _fit(small_frames, 2)
    with pytest.raises(ValidationError):
        PatchSet({0: initial_patch(8, 0)}, initial_patch(8, 1), model, "x")


def _manual_patchset(centroids):
    model = kmeans_fit(np.array(centroids, dtype=float), len(centroids), seed=0)
    patches = {c: initial_patch(8, 10 + c) for c in range(model.k)}
    return PatchSet(patches, initial_patch(8, 99), model, "h")


def test_select_patch_exact_and_tie():
    ps = _manual_patchset([[1.0, 1.0], [2.0, 2.0], [3.0, 3.0]])
    for c, (dp, dt) in enumerate(ps.cluster_model.centroids):
        got = select_patch(ps, ORIGIN, Pose2D(dp, 0, 0), Pose2D(0, dt, 0))
        assert torch.equal(got, ps.patches[c])
    # midway between clusters 0 and 1
    got = select_patch(ps, ORIGIN, Pose2D(1.5, 0, 0), Pose2D(1.5, 0, 0))
    assert torch.equal(got, ps.patches[0])


@settings(max_examples=30, deadline=None)
@given(st.floats(-5, 5), st.floats(-5, 5), st.floats(-5, 5), st.floats(-5, 5))
def test_select_patch_compositional(cx, cy, sx, sy):
    ps = _manual_patchset([[1.0, 1.5], [2.5, 2.0], [4.0, 3.0]])
    car, sign = Pose2D(cx, cy, 0), Pose2D(sx, sy, 0)
    expected = ps.patches[assign_cluster(ps.cluster_model, pose_features(ORIGIN, car, sign))]
    got1 = select_patch(ps, ORIGIN, car, sign)
    got2 = select_patch(ps, ORIGIN, car, sign)
    assert torch.equal(got1, expected) and torch.equal(got1, got2)
