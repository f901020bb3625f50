import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from gsa.autodiff import Tensor
from gsa.data import DetectionSample, generate_synthetic
from gsa.errors import ArgumentError, NumericError, TrainingError
from gsa.metrics import evaluate
from gsa.model import build_student, forward
from gsa.train import SGDConfig, build_targets, check_finite, cosine_lr, detection_loss, sgd_step, train_epoch


def _one_param_model(value, grad):
    m = build_student(1, 4)
    for _, t, _ in m.parameters():
        t.requires_grad = False
    w = m.weights[0]
    w.data = np.array(value, np.float32)
    w.requires_grad = True
    w.grad = np.array(grad, np.float32)
    return m, w


def test_sgd_two_steps_match_hand_recursion():
    cfg = SGDConfig(lr=0.1, momentum=0.9, weight_decay=0.01, clip_norm=0)
    m, w = _one_param_model([1.0, -2.0], [0.5, 0.5])
    vel = {}
    sgd_step(m, cfg, vel)
    v1 = np.array([0.5 + 0.01 * 1.0, 0.5 + 0.01 * -2.0])
    w1 = np.array([1.0, -2.0]) - 0.1 * v1
    np.testing.assert_allclose(w.data, w1, rtol=1e-6)
    w.grad = np.array([0.5, 0.5], np.float32)
    sgd_step(m, cfg, vel)
    v2 = 0.9 * v1 + (0.5 + 0.01 * w1)
    np.testing.assert_allclose(w.data, w1 - 0.1 * v2, rtol=1e-6)


def test_sgd_clips_global_norm():
    cfg = SGDConfig(lr=1.0, momentum=0.0, weight_decay=0.0, clip_norm=1.0)
    m, w = _one_param_model([0.0, 0.0], [3.0, 4.0])
    sgd_step(m, cfg, {})
    np.testing.assert_allclose(w.data, [-0.6, -0.8], rtol=1e-6)


def test_sgd_requires_gradients():
    m, w = _one_param_model([1.0], [1.0])
    w.grad = None
    with pytest.raises(TrainingError):
        sgd_step(m, SGDConfig(), {})


def test_scales_are_not_decayed():
    m = build_student(1, 4)
    for _, t, _ in m.parameters():
        t.grad = np.zeros_like(t.data)
    lam = next(iter(m.scaling.values()))
    before = lam.data.copy()
    sgd_step(m, SGDConfig(lr=1.0, weight_decay=0.5), {})
    np.testing.assert_array_equal(lam.data, before)


def test_cosine_endpoints_exact():
    cfg = SGDConfig(lr=1e-4, cosine_total=205)
    assert cosine_lr(0, cfg) == 1e-4
    assert cosine_lr(205, cfg) == 0.0
    with pytest.raises(ArgumentError):
        cosine_lr(206, cfg)


@given(st.integers(1, 300), st.data())
def test_cosine_is_monotone(total, data):
    e = data.draw(st.integers(0, total - 1))
    cfg = SGDConfig(lr=0.1, cosine_total=total)
    assert cosine_lr(e + 1, cfg) <= cosine_lr(e, cfg)


def test_targets_assignment():
    s = DetectionSample(np.zeros((3, 64, 64), np.float32), [[0.3, 0.6, 0.1, 0.1], [0.5, 0.5, 0.5, 0.5]], [1, 0])
    t = build_targets([s], {"coarse": (8, 8), "fine": (16, 16)}, 2)
    assert t["fine"].pos.sum() == 1 and t["fine"].pos[0, 0, 9, 4]
    assert t["fine"].cls[0, 1, 9, 4] == 1.0
    np.testing.assert_allclose(t["fine"].box[0, :, 9, 4], [0.8, 0.6, math.log(1.6), math.log(1.6)], rtol=1e-6)
    assert t["coarse"].pos[0, 0, 4, 4]


def test_loss_small_for_perfect_predictions():
    m = build_student(2, 4)
    s = DetectionSample(np.zeros((3, 64, 64), np.float32), [[0.3, 0.6, 0.1, 0.1], [0.5, 0.5, 0.5, 0.5]], [1, 0])
    out = forward(m, Tensor(s.image[None]))
    tg = build_targets([s], {k: v.objectness.shape[2:] for k, v in out.scales.items()}, 2)
    for k, o in out.scales.items():
        t = tg[k]
        o.objectness.data[:] = np.where(t.obj > 0, 20.0, -20.0)
        o.class_logits.data[:] = np.where(t.cls > 0, 20.0, -20.0)
        xy = np.clip(t.box[:, :2], 1e-6, 1 - 1e-6)
        o.box.data[:, :2] = np.log(xy / (1 - xy))
        o.box.data[:, 2:] = t.box[:, 2:]
    loss, parts = detection_loss(out, [s])
    assert loss.item() < 0.01


def test_check_finite():
    with pytest.raises(NumericError):
        check_finite(float("nan"), "loss")


def test_training_reduces_loss():
    data = generate_synthetic(0, 16, 2, 32)
    m = build_student(2, 8)
    rng = np.random.default_rng(0)
    cfg = SGDConfig(lr=0.05, clip_norm=2.0)
    vel = {}
    first = train_epoch(m, data, 0.05, cfg, vel, rng, 8)["total"]
    for _ in range(10):
        last = train_epoch(m, data, 0.05, cfg, vel, rng, 8)["total"]
    assert last < first


@pytest.mark.slow
def test_overfits_tiny_set():
    data = generate_synthetic(3, 32, 2, 32)
    m = build_student(2, 8)
    rng = np.random.default_rng(0)
    cfg = SGDConfig(lr=0.1, clip_norm=2.0, weight_decay=0.0)
    vel = {}
    best = 0.0
    for epoch in range(300):
        train_epoch(m, data, 0.1, cfg, vel, rng, 8)
        if epoch % 25 == 24:
            best = max(best, evaluate(m, data, 2).map50)
            if best >= 0.9:
                break
    assert best >= 0.9
