import numpy as np
import numpy.testing as npt
import pytest

from gdn.heads import (LabelHead, LossReport, SpatialPyramidPool, SPPHead,
                       combined_loss, label_loss, label_loss_backward,
                       labels_from_mask, seg_loss, seg_loss_backward,
                       softmax_pixelwise)
from gdn.optim import gradcheck
from gdn.tensor import ShapeError

from oracles import spp_cells_loops


def _logit(p):
    return np.log(p / (1.0 - p))


def test_softmax_uniform_logits():
    probs = softmax_pixelwise(np.zeros((1, 5, 2, 2)))
    npt.assert_allclose(probs, 0.2, atol=1e-12)


def test_softmax_closed_form_pair():
    logits = np.zeros((1, 2, 1, 1))
    logits[0, 1] = np.log(3.0)
    probs = softmax_pixelwise(logits)
    npt.assert_allclose(probs[0, :, 0, 0], [0.25, 0.75], atol=1e-12)


def test_softmax_shift_invariance_and_normalization():
    rng = np.random.default_rng(0)
    logits = rng.standard_normal((2, 4, 3, 3))
    p1 = softmax_pixelwise(logits)
    p2 = softmax_pixelwise(logits + 100.0)
    npt.assert_allclose(p1, p2, atol=1e-12)
    npt.assert_allclose(p1.sum(axis=1), 1.0, atol=1e-12)


def test_seg_loss_perfect_prediction_is_zero():
    probs = np.zeros((1, 3, 2, 2))
    gt = np.array([[[0, 1], [2, 1]]])
    for i in range(2):
        for j in range(2):
            probs[0, gt[0, i, j], i, j] = 1.0
    assert seg_loss(probs, gt) == 0.0


def test_seg_loss_two_pixel_hand_value():
    # true-class probabilities 0.5 and 0.25
    probs = np.zeros((1, 2, 1, 2))
    probs[0, :, 0, 0] = [0.5, 0.5]
    probs[0, :, 0, 1] = [0.25, 0.75]
    gt = np.zeros((1, 1, 2), dtype=int)
    expected = -(np.log(0.5) + np.log(0.25)) / 2
    npt.assert_allclose(seg_loss(probs, gt), expected, atol=1e-12)
    assert abs(seg_loss(probs, gt) - 1.0397) < 1e-4


def test_seg_loss_rejects_out_of_range_gt():
    probs = softmax_pixelwise(np.zeros((1, 3, 2, 2)))
    with pytest.raises(ValueError):
        seg_loss(probs, np.full((1, 2, 2), 3))
    with pytest.raises(ShapeError):
        seg_loss(probs, np.zeros((1, 3, 3), dtype=int))


def test_seg_loss_gradcheck():
    rng = np.random.default_rng(1)
    worst = 0.0
    for _ in range(10):
        logits = rng.standard_normal((1, 3, 2, 2))
        gt = rng.integers(0, 3, size=(1, 2, 2))

        def loss():
            return seg_loss(softmax_pixelwise(logits), gt)

        g = seg_loss_backward(softmax_pixelwise(logits), gt)
        worst = max(worst, gradcheck(loss, logits, g))
    assert worst <= 1e-5


def test_label_loss_hand_value():
    scores = np.array([_logit(0.8), _logit(0.3)])
    presence = np.array([1.0, 0.0])
    expected = -(np.log(0.8) + np.log(0.7)) / 2
    npt.assert_allclose(label_loss(scores, presence), expected, atol=1e-12)
    assert abs(label_loss(scores, presence) - 0.28990) < 1e-4


def test_label_loss_perfect_limit():
    scores = np.array([40.0, -40.0])
    presence = np.array([1.0, 0.0])
    assert label_loss(scores, presence) < 1e-12


def test_label_loss_permutation_invariance():
    rng = np.random.default_rng(2)
    scores = rng.standard_normal(6)
    presence = rng.integers(0, 2, 6).astype(float)
    perm = rng.permutation(6)
    npt.assert_allclose(label_loss(scores, presence),
                        label_loss(scores[perm], presence[perm]), atol=1e-12)


def test_label_loss_length_mismatch():
    with pytest.raises(ShapeError):
        label_loss(np.zeros(3), np.zeros(4))


def test_label_loss_gradcheck():
    rng = np.random.default_rng(3)
    worst = 0.0
    for _ in range(10):
        scores = rng.standard_normal(5)
        presence = rng.integers(0, 2, 5).astype(float)

        def loss():
            return label_loss(scores, presence)

        worst = max(worst, gradcheck(loss, scores, label_loss_backward(scores, presence)))
    assert worst <= 1e-5


def test_combined_loss_report():
    r = combined_loss(1.0, 0.29, 1.0)
    assert isinstance(r, LossReport)
    npt.assert_allclose(r.combined, 1.29)
    assert combined_loss(0.7, 123.0, 0.0).combined == 0.7
    with pytest.raises(ValueError):
        combined_loss(1.0, 1.0, -0.5)


def test_combined_loss_gradient_linearity():
    # gradient of seg + lambda*label w.r.t. each input is the weighted sum
    rng = np.random.default_rng(4)
    lam = 0.7
    logits = rng.standard_normal((1, 3, 2, 2))
    gt = rng.integers(0, 3, size=(1, 2, 2))
    scores = rng.standard_normal(4)
    presence = rng.integers(0, 2, 4).astype(float)

    def loss():
        return (seg_loss(softmax_pixelwise(logits), gt)
                + lam * label_loss(scores, presence))

    g_logits = seg_loss_backward(softmax_pixelwise(logits), gt)
    g_scores = lam * label_loss_backward(scores, presence)
    assert gradcheck(loss, logits, g_logits) <= 1e-5
    assert gradcheck(loss, scores, g_scores) <= 1e-5


def test_labels_from_mask():
    assert not labels_from_mask(np.zeros((4, 4), dtype=int), 6).any()
    mask = np.zeros((6, 6), dtype=int)
    mask[0, 0] = 2
    mask[5, 5] = 5
    lab = labels_from_mask(mask, 6)
    npt.assert_array_equal(lab, [0, 1, 0, 0, 1, 0])
    # duplicated component changes nothing (presence only)
    mask2 = mask.copy()
    mask2[2:4, 2:4] = 2
    npt.assert_array_equal(labels_from_mask(mask2, 6), lab)
    # ignore label never counts
    mask3 = np.full((2, 2), 255)
    assert not labels_from_mask(mask3, 6).any()


def test_spp_level1_is_global_max():
    rng = np.random.default_rng(5)
    x = rng.standard_normal((2, 3, 5, 7))
    pool = SpatialPyramidPool((1,))
    npt.assert_array_equal(pool.forward(x), x.max(axis=(2, 3)))


def test_spp_cells_match_oracle():
    rng = np.random.default_rng(6)
    for _ in range(5):
        h, w = rng.integers(4, 9), rng.integers(4, 9)
        x = rng.standard_normal((2, 2, h, w))
        pool = SpatialPyramidPool((1, 2, 3))
        npt.assert_array_equal(pool.forward(x), spp_cells_loops(x, (1, 2, 3)))


def test_spp_4x4_quadrants():
    x = np.arange(16.0).reshape(1, 1, 4, 4)
    pool = SpatialPyramidPool((1, 2))
    vec = pool.forward(x)[0]
    assert vec.shape == (5,)
    npt.assert_array_equal(vec, [15.0, 5.0, 7.0, 13.0, 15.0])


def test_spp_fixed_length_across_sizes():
    rng = np.random.default_rng(7)
    pool = SpatialPyramidPool((1, 2, 3, 4, 5))
    a = pool.forward(rng.standard_normal((1, 3, 16, 16)))
    b = pool.forward(rng.standard_normal((1, 3, 13, 17)))
    assert a.shape == b.shape == (1, 3 * 55)
    for _ in range(5):
        h, w = int(rng.integers(5, 30)), int(rng.integers(5, 30))
        assert pool.forward(rng.standard_normal((1, 3, h, w))).shape == (1, 165)


def test_spp_rejects_small_input():
    pool = SpatialPyramidPool((1, 2, 5))
    with pytest.raises(ShapeError):
        pool.forward(np.zeros((1, 1, 4, 6)))


def test_spp_gradcheck():
    rng = np.random.default_rng(8)
    worst = 0.0
    for _ in range(10):
        pool = SpatialPyramidPool((1, 2, 3))
        x = (rng.permutation(2 * 36) * 0.01).reshape(1, 2, 6, 6)
        v = rng.standard_normal((1, pool.out_dim(2)))

        def loss():
            return float((pool.forward(x) * v).sum())

        pool.forward(x)
        gx = pool.backward(v)
        worst = max(worst, gradcheck(loss, x, gx))
    assert worst <= 1e-5


def test_spp_head_shapes_and_backward():
    rng = np.random.default_rng(9)
    head = SPPHead(channels=3, coarse_hw=(6, 6), levels=(1, 2), rng=rng)
    x = rng.standard_normal((2, 3, 6, 6))
    out = head.forward(x)
    assert out.shape == (2, 3, 6, 6)
    g = head.backward(rng.standard_normal(out.shape))
    assert g.shape == x.shape


def test_label_head_widths_and_gradcheck():
    rng = np.random.default_rng(10)
    head = LabelHead(8, 4, hidden=6, rng=rng)
    x = rng.standard_normal((2, 8))
    scores = head.forward(x)
    assert scores.shape == (2, 4)

    v = rng.standard_normal((2, 4))

    def loss():
        return float((head.forward(x) * v).sum())

    head.forward(x)
    for p in head.params():
        p.zero_grad()
    gx = head.backward(v)
    assert gradcheck(loss, x, gx) <= 1e-5
    w1 = head.fc1.weight
    assert gradcheck(loss, w1.data, w1.grad.copy()) <= 1e-5
