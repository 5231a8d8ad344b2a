import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from dynpatch.detector import (CLASSES, DetectorConfig, Detection, activate, average_precision,
                               build_detector, decode_boxes, decode_detections, detector_forward,
                               eigencam_heatmap, eigencam_projection, encode_box, image_gradient,
                               load_detector, map_from_detections, save_detector, train_detector,
                               SpatialPyramidPool)
from dynpatch.errors import DifferentiabilityError, ValidationError
from dynpatch.geometry import BBox

from oracles import central_difference, rel_err

C = len(CLASSES)


@pytest.fixture(scope="module")
def model():
    return build_detector(DetectorConfig(), seed=0)


def _image(seed, size=256, dtype=torch.float32):
    return torch.rand(3, size, size, generator=torch.Generator().manual_seed(seed), dtype=dtype)


def test_forward_shape_range_determinism(model):
    x = _image(0)
    raw = detector_forward(model, x)
    assert raw.shape == (1, 16, 16, 5 + C)
    assert torch.equal(raw, detector_forward(model, x))
    obj, cls, boxes = activate(raw.detach())
    assert float(obj.min()) >= 0 and float(obj.max()) <= 1
    assert float(cls.min()) >= 0 and float(cls.max()) <= 1
    assert boxes.shape == (1, 16, 16, 4)


def test_context_modes():
    x = _image(5)
    for mode in ("mean", "meanmax"):
        det = build_detector(DetectorConfig(context=mode), seed=1)
        assert detector_forward(det, x).shape == (1, 16, 16, 5 + C)
    with pytest.raises(ValidationError):
        DetectorConfig(context="median")


def test_pyramid_pool_options():
    x = _image(6)
    for pools in (0, 1, 3):
        det = build_detector(DetectorConfig(spp_pools=pools), seed=1)
        assert (det.spp is None) == (pools == 0)
        assert detector_forward(det, x).shape == (1, 16, 16, 5 + C)
    for bad in (dict(spp_pools=-1), dict(spp_kernel=4), dict(spp_kernel=0)):
        with pytest.raises(ValidationError):
            DetectorConfig(**bad)


def test_pyramid_cascade_equals_wide_pool():
    # n cascaded k x k stride-1 max pools see the same window as one (n*(k-1)+1) pool
    spp = SpatialPyramidPool(8, 3, 5)
    x = torch.randn(1, 4, 16, 16, generator=torch.Generator().manual_seed(0))
    y = x
    for _ in range(3):
        y = spp.pool(y)
    wide = torch.nn.functional.max_pool2d(x, 13, stride=1, padding=6)
    assert torch.equal(y, wide)


def test_forward_validates_input(model):
    with pytest.raises(ValidationError):
        detector_forward(model, torch.rand(3, 128, 128))
    with pytest.raises(ValidationError):
        detector_forward(model, _image(0) * 2)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10_000), st.floats(0.1, 1e4))
def test_activation_ranges_for_any_finite_raw(seed, scale):
    raw = torch.randn(16, 16, 5 + C, generator=torch.Generator().manual_seed(seed), dtype=torch.float64) * scale
    obj, cls, boxes = activate(raw)
    assert bool(((obj >= 0) & (obj <= 1)).all()) and bool(((cls >= 0) & (cls <= 1)).all())
    assert bool(torch.isfinite(boxes).all())


def _quiet_grid():
    raw = torch.zeros(16, 16, 5 + C, dtype=torch.float64)
    raw[..., 0] = -10.0
    return raw


def test_decode_empty():
    assert decode_detections(_quiet_grid(), 0.25, 0.5) == []


def test_decode_one_dominant_cell():
    raw = _quiet_grid()
    r, c = 5, 9
    raw[r, c, :5] = torch.tensor([4.0, 0.3, -0.7, 0.9, 0.2])
    raw[r, c, 5 + 2] = 6.0
    dets = decode_detections(raw, 0.25, 0.5)
    assert len(dets) == 1
    d = dets[0]
    sig = lambda v: 1 / (1 + math.exp(-v))  # noqa: E731
    cx, cy = (c + sig(0.3)) * 16, (r + sig(-0.7)) * 16
    w, h = 16 * math.exp(0.9), 16 * math.exp(0.2)
    np.testing.assert_allclose(d.box.as_tuple(), (cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2), atol=1e-9)
    assert d.class_name == CLASSES[2] and d.cell == (r, c)
    probs = np.exp([0, 0, 6.0, 0, 0]) / np.exp([0, 0, 6.0, 0, 0]).sum()
    assert d.confidence == pytest.approx(sig(4.0) * probs[2])


def test_decode_nms_suppresses_duplicate():
    raw = _quiet_grid()
    for col, obj in ((7, 5.0), (8, 4.0)):
        raw[6, col, :5] = torch.tensor([obj, 0.0, 0.0, 1.5, 1.5])
        raw[6, col, 5] = 5.0
    # the two boxes are offset by one cell (16 px) on a ~72 px box: IoU ~0.64
    assert len(decode_detections(raw, 0.25, 0.5)) == 1
    assert len(decode_detections(raw, 0.25, 0.9)) == 2


def test_decode_thresholds_validated():
    with pytest.raises(ValidationError):
        decode_detections(_quiet_grid(), 1.5, 0.5)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 15), st.integers(0, 15), st.floats(-4, 4), st.floats(-4, 4), st.floats(-2, 3),
       st.floats(-2, 3))
def test_decode_then_encode_round_trip(r, c, tx, ty, tw, th):
    raw = _quiet_grid()
    raw[r, c, 1:5] = torch.tensor([tx, ty, tw, th], dtype=torch.float64)
    box = BBox(*decode_boxes(raw)[r, c].tolist())
    r2, c2, t = encode_box(box)
    assert (r2, c2) == (r, c)
    np.testing.assert_allclose(t, (tx, ty, tw, th), atol=1e-6)


def test_image_gradient_constant_and_shape(model):
    x = _image(1)
    g = image_gradient(model, x, lambda raw: torch.tensor(3.0))
    assert g.shape == x.shape and float(g.abs().max()) == 0.0
    g = image_gradient(model, x, lambda raw: raw[..., 0].sigmoid().mean())
    assert g.shape == x.shape and float(g.abs().max()) > 0


@pytest.mark.filterwarnings("ignore:Converting a tensor")
def test_image_gradient_rejects_non_differentiable(model):
    with pytest.raises(DifferentiabilityError):
        image_gradient(model, _image(1), lambda raw: float(raw.sum()))


def test_image_gradient_matches_finite_differences():
    det = build_detector(DetectorConfig(), seed=2).double()
    x = _image(3, dtype=torch.float64) * 0.8 + 0.1

    def objective(raw):
        obj, cls, _ = activate(raw)
        return (obj * cls[..., 0]).mean()

    g = image_gradient(det, x, objective)
    rng = np.random.default_rng(0)
    coords = [(int(a), int(b), int(c)) for a, b, c in
              zip(rng.integers(0, 3, 30), rng.integers(0, 256, 30), rng.integers(0, 256, 30))]
    ok = sum(rel_err(central_difference(lambda v: objective(detector_forward(det, v)), x, idx),
                     float(g[idx])) < 1e-3 for idx in coords)
    assert ok / len(coords) >= 0.95


def test_eigencam_contract(model):
    x = _image(4)
    for layer in (1, 3, 5):
        h = eigencam_heatmap(model, x, layer)
        assert h.shape == x.shape[1:]
        assert float(h.min()) == 0.0 and float(h.max()) == pytest.approx(1.0)
    with pytest.raises(ValidationError):
        eigencam_heatmap(model, x, 99)


def test_eigencam_rank_one_matches_svd():
    g = torch.Generator().manual_seed(0)
    spatial = torch.rand(12, 10, generator=g, dtype=torch.float64)
    weights = torch.rand(7, generator=g, dtype=torch.float64) + 0.5
    act = weights[:, None, None] * spatial[None]
    cam = eigencam_projection(act)
    # oracle: full SVD of the centered activation matrix
    x = act.reshape(7, -1).T
    x = x - x.mean(0, keepdim=True)
    u, s, vh = torch.linalg.svd(x, full_matrices=False)
    ref = (x @ vh[0]).reshape(12, 10)
    ref = (ref - ref.min()) / (ref.max() - ref.min())
    if float(((ref - ref.mean()) * (spatial - spatial.mean())).sum()) < 0:
        ref = 1 - ref
    torch.testing.assert_close(cam, ref, atol=1e-9, rtol=0)
    target = (spatial - spatial.min()) / (spatial.max() - spatial.min())
    torch.testing.assert_close(cam, target, atol=1e-9, rtol=0)


def test_average_precision_hand_case():
    # one miss between two hits: AP = 0.5 * 1 + 0.5 * 2/3
    recall = np.array([0.5, 0.5, 1.0])
    precision = np.array([1.0, 0.5, 2 / 3])
    assert average_precision(recall, precision) == pytest.approx(0.5 + 0.5 * 2 / 3)


def test_map_perfect_detections():
    gts = [[(0, BBox(0, 0, 10, 10)), (4, BBox(20, 20, 40, 30))], [(1, BBox(5, 5, 9, 9))]]
    dets = [[Detection(b, 0.9, tuple(float(i == c) for i in range(C)), c) for c, b in g] for g in gts]
    m, aps = map_from_detections(dets, gts, C)
    assert m == 1.0 and set(aps) == {0, 1, 4}


def test_train_rejects_empty():
    with pytest.raises(ValidationError):
        train_detector([], DetectorConfig(epochs=1))


def test_overfit_single_frame_and_windows(small_frames):
    frames = [small_frames[0]] * 16
    cfg = DetectorConfig(epochs=60, batch_size=4, lr=1e-2, seed=0)
    _, report = train_detector(frames, cfg)
    assert report.epoch_loss[-1] < 1e-2
    blocks = [np.mean(report.epoch_loss[i:i + 5]) for i in range(0, len(report.epoch_loss), 5)]
    assert all(b <= a for a, b in zip(blocks, blocks[1:]))


def test_training_deterministic_and_round_trip(small_frames, tmp_path):
    cfg = DetectorConfig(epochs=1, batch_size=4, seed=3)
    m1, r1 = train_detector(small_frames[:8], cfg)
    m2, r2 = train_detector(small_frames[:8], cfg)
    for a, b in zip(m1.state_dict().values(), m2.state_dict().values()):
        assert torch.equal(a, b)
    assert r1.epoch_loss == r2.epoch_loss
    save_detector(m1, tmp_path / "det.arr", dataset_hash="abc")
    m3 = load_detector(tmp_path / "det.arr")
    x = small_frames[0].image
    assert torch.equal(detector_forward(m1, x), detector_forward(m3, x))
