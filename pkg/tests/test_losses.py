import math

import numpy as np
import pytest

from jointsal import losses as L
from jointsal import tensor as T
from jointsal.gradcheck import check_gradients
from jointsal.model import ModelConfig, SegSaliencyNet
from jointsal.tensor import ShapeError, Tensor



def simplex(rng, shape):
    raw = rng.uniform(0.05, 1.0, size=shape)
    return raw / raw.sum(axis=1, keepdims=True)


# ---------------------------------------------------------------------------
# class_loss
# ---------------------------------------------------------------------------

def test_class_loss_perfect_prediction_is_zero():
    t = np.array([[1.0, 0.0], [0.0, 1.0]])
    loss = L.class_loss(Tensor(t), t)
    assert loss.item() == pytest.approx(0.0, abs=1e-9)


def test_class_loss_uniform_closed_form():
    loss = L.class_loss(Tensor(np.array([[0.5, 0.5]])), np.array([[1, 0]]))
    assert loss.item() == pytest.approx(2 * math.log(2), rel=1e-12)


def test_class_loss_nonnegative():
    rng = np.random.default_rng(0)
    for _ in range(20):
        probs = rng.uniform(0, 1, size=(4, 5))
        labels = np.zeros((4, 5))
        labels[np.arange(4), rng.integers(0, 5, 4)] = 1
        assert L.class_loss(Tensor(probs), labels).item() >= 0


def test_class_loss_batch_permutation_invariant():
    rng = np.random.default_rng(1)
    probs = rng.uniform(0.1, 0.9, size=(6, 3))
    labels = np.zeros((6, 3))
    labels[np.arange(6), rng.integers(0, 3, 6)] = 1
    perm = rng.permutation(6)
    a = L.class_loss(Tensor(probs), labels).item()
    b = L.class_loss(Tensor(probs[perm]), labels[perm]).item()
    assert a == pytest.approx(b, rel=1e-14)


def test_class_loss_rejects_bad_inputs():
    with pytest.raises(ShapeError):
        L.class_loss(Tensor(np.zeros((2, 3))), np.zeros((2, 4)))
    with pytest.raises(ValueError):
        L.class_loss(Tensor(np.full((1, 3), 0.5)), np.array([[0.0, 0.0, 0.0]]))
    with pytest.raises(ValueError):
        L.class_loss(Tensor(np.full((1, 3), 0.5)), np.array([[0.5, 0.5, 0.0]]))


# ---------------------------------------------------------------------------
# saliency_loss
# ---------------------------------------------------------------------------

def test_saliency_loss_perfect_is_zero():
    y = np.random.default_rng(2).integers(0, 2, size=(2, 4, 4)).astype(float)
    s = Tensor(y.reshape(2, 1, 4, 4))
    assert L.saliency_loss(s, y).item() == pytest.approx(0.0, abs=1e-9)


def test_saliency_loss_two_pixel_closed_form():
    s = Tensor(np.full((1, 1, 1, 2), 0.5))
    y = np.array([[[0.0, 1.0]]])
    assert L.saliency_loss(s, y, pixel_reduction="sum").item() == pytest.approx(2 * math.log(2), rel=1e-12)
    assert L.saliency_loss(s, y, pixel_reduction="mean").item() == pytest.approx(math.log(2), rel=1e-12)


def test_saliency_loss_monotone_toward_target():
    y = np.array([[[0.0, 1.0]]])
    prev = None
    for step in np.linspace(0.5, 0.95, 8):
        s = Tensor(np.array([[[[1 - step, step]]]]))
        cur = L.saliency_loss(s, y).item()
        if prev is not None:
            assert cur < prev
        prev = cur


def test_saliency_loss_joint_pixel_permutation_invariant():
    rng = np.random.default_rng(3)
    s = rng.uniform(0.01, 0.99, size=(1, 1, 3, 4))
    y = rng.integers(0, 2, size=(1, 3, 4)).astype(float)
    a = L.saliency_loss(Tensor(s), y).item()
    perm = rng.permutation(12)
    s2 = s.reshape(-1)[perm].reshape(s.shape)
    y2 = y.reshape(-1)[perm].reshape(y.shape)
    b = L.saliency_loss(Tensor(s2), y2).item()
    assert a == pytest.approx(b, rel=1e-14)


def test_saliency_loss_rejects_mismatch_and_nonbinary():
    with pytest.raises(ShapeError):
        L.saliency_loss(Tensor(np.zeros((1, 1, 4, 4))), np.zeros((1, 5, 4)))
    with pytest.raises(ValueError):
        L.saliency_loss(Tensor(np.full((1, 1, 2, 2), 0.5)), np.full((1, 2, 2), 0.3))


# ---------------------------------------------------------------------------
# pseudo_seg_loss
# ---------------------------------------------------------------------------

def test_pseudo_loss_perfect_is_zero():
    labels = np.array([[[0, 1], [2, 1]]])
    seg = np.zeros((1, 3, 2, 2))
    for y in range(2):
        for x in range(2):
            seg[0, labels[0, y, x], y, x] = 1.0
    assert L.pseudo_seg_loss(Tensor(seg), labels).item() == pytest.approx(0.0, abs=1e-9)


def test_pseudo_loss_uniform_single_pixel_closed_form():
    seg = Tensor(np.full((1, 3, 1, 1), 1.0 / 3.0))
    labels = np.array([[[1]]])
    assert L.pseudo_seg_loss(Tensor(seg.data), labels).item() == pytest.approx(math.log(3), rel=1e-12)


def test_pseudo_loss_all_ignore_is_zero():
    seg = Tensor(simplex(np.random.default_rng(4), (2, 3, 4, 4)))
    labels = np.full((2, 4, 4), L.IGNORE_LABEL)
    assert L.pseudo_seg_loss(seg, labels).item() == 0.0


def test_pseudo_loss_decreases_as_mass_moves_to_label():
    labels = np.array([[[1]]])
    prev = None
    for p in np.linspace(0.34, 0.9, 6):
        seg = np.array([[[[(1 - p) / 2]], [[p]], [[(1 - p) / 2]]]])
        cur = L.pseudo_seg_loss(Tensor(seg), labels).item()
        if prev is not None:
            assert cur < prev
        prev = cur


def test_pseudo_loss_rejects_out_of_range_labels():
    seg = Tensor(simplex(np.random.default_rng(5), (1, 3, 2, 2)))
    bad = np.array([[[0, 1], [5, 2]]])
    with pytest.raises(ValueError):
        L.pseudo_seg_loss(seg, bad)


# ---------------------------------------------------------------------------
# stage compositions
# ---------------------------------------------------------------------------

def test_stage1_loss_additivity_and_zero():
    rng = np.random.default_rng(6)
    probs = Tensor(rng.uniform(0.1, 0.9, size=(2, 3)))
    labels = np.zeros((2, 3))
    labels[:, 0] = 1
    sal = Tensor(rng.uniform(0.1, 0.9, size=(2, 1, 4, 4)))
    y = rng.integers(0, 2, size=(2, 4, 4)).astype(float)
    total = L.stage1_loss(probs, labels, sal, y).item()
    parts = L.class_loss(probs, labels).item() + L.saliency_loss(sal, y).item()
    assert total == pytest.approx(parts, rel=1e-14)

    perfect = L.stage1_loss(Tensor(labels.astype(float)), labels,
                            Tensor(y.reshape(2, 1, 4, 4)), y).item()
    assert perfect == pytest.approx(0.0, abs=1e-9)


def test_stage2_loss_additivity():
    rng = np.random.default_rng(7)
    sal = Tensor(rng.uniform(0.1, 0.9, size=(2, 1, 4, 4)))
    y = rng.integers(0, 2, size=(2, 4, 4)).astype(float)
    seg = Tensor(simplex(rng, (2, 3, 4, 4)))
    pseudo = rng.integers(0, 3, size=(2, 4, 4))
    total = L.stage2_loss(sal, y, seg, pseudo).item()
    parts = L.saliency_loss(sal, y).item() + L.pseudo_seg_loss(seg, pseudo).item()
    assert total == pytest.approx(parts, rel=1e-14)


# ---------------------------------------------------------------------------
# gradients through the model
# ---------------------------------------------------------------------------

@pytest.fixture(scope="module")
def toy_net():
    cfg = ModelConfig(num_classes=2, input_size=16, widths=(4, 6, 8, 8, 8), seed=8)
    return SegSaliencyNet(cfg)


def test_loss_gradients_match_finite_differences(toy_net):
    rng = np.random.default_rng(9)
    img = Tensor(rng.normal(size=(1, 3, 16, 16)))
    labels = np.array([[1.0, 0.0]])
    y = rng.integers(0, 2, size=(1, 16, 16)).astype(float)
    pseudo = rng.integers(0, 3, size=(1, 16, 16))
    pseudo[0, :2, :2] = L.IGNORE_LABEL

    builders = {
        "class": lambda: L.class_loss(toy_net.forward(img)[2], labels),
        "saliency": lambda: L.saliency_loss(toy_net.forward(img)[1], y),
        "pseudo": lambda: L.pseudo_seg_loss(toy_net.forward(img)[0], pseudo),
    }
    for name, build in builders.items():
        err = check_gradients(build, toy_net.parameters(), max_coords_per_param=4, rng=rng, skip_kinks=True)
        assert err < 1e-4, f"{name}: {err}"


def test_stage1_gradient_is_sum_of_part_gradients(toy_net):
    rng = np.random.default_rng(10)
    img_c = Tensor(rng.normal(size=(1, 3, 16, 16)))
    img_s = Tensor(rng.normal(size=(1, 3, 16, 16)))
    labels = np.array([[0.0, 1.0]])
    y = rng.integers(0, 2, size=(1, 16, 16)).astype(float)

    toy_net.zero_grad()
    L.stage1_loss(toy_net.forward(img_c)[2], labels, toy_net.forward(img_s)[1], y).backward()
    combined = {k: p.grad.copy() for k, p in toy_net.params.items() if p.grad is not None}

    toy_net.zero_grad()
    L.class_loss(toy_net.forward(img_c)[2], labels).backward()
    part_c = {k: p.grad.copy() for k, p in toy_net.params.items() if p.grad is not None}
    toy_net.zero_grad()
    L.saliency_loss(toy_net.forward(img_s)[1], y).backward()
    part_s = {k: p.grad.copy() for k, p in toy_net.params.items() if p.grad is not None}
    toy_net.zero_grad()

    for k, g in combined.items():
        expected = part_c.get(k, 0) + part_s.get(k, 0)
        np.testing.assert_allclose(g, expected, rtol=1e-10, atol=1e-12)
