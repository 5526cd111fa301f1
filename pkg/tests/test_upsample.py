import numpy as np
import numpy.testing as npt
import pytest

from gdn.optim import gradcheck
from gdn.tensor import ShapeError
from gdn.upsample import GlobalDeconv, SubsetView, bilinear_fixed, bilinear_matrix

from oracles import bilinear_resample_loops, global_interp_loops


def test_identity_matrices_give_identity_map():
    gd = GlobalDeconv((3, 4), (3, 4))
    gd.k_h.data[...] = np.eye(3)
    gd.k_w.data[...] = np.eye(4)
    rng = np.random.default_rng(0)
    x = rng.standard_normal((2, 3, 3, 4))
    npt.assert_array_equal(gd.forward(x), x)


def test_hand_case_2x2_to_3x3():
    gd = GlobalDeconv((3, 3), (2, 2))
    k = np.array([[1.0, 0.0], [0.5, 0.5], [0.0, 1.0]])
    gd.k_h.data[...] = k
    gd.k_w.data[...] = k
    x = np.array([[[[1.0, 2.0], [3.0, 4.0]]]])
    expected = [[1.0, 1.5, 2.0], [2.0, 2.5, 3.0], [3.0, 3.5, 4.0]]
    npt.assert_allclose(gd.forward(x)[0, 0], expected, atol=1e-12)


def test_matches_four_loop_oracle():
    rng = np.random.default_rng(1)
    for _ in range(8):
        h, w = rng.integers(2, 5), rng.integers(2, 5)
        H, W = rng.integers(h, 9), rng.integers(w, 9)
        gd = GlobalDeconv((H, W), (h, w))
        gd.init_glorot(rng)
        x = rng.standard_normal((2, 2, h, w))
        npt.assert_allclose(gd.forward(x),
                            global_interp_loops(gd.k_h.data, gd.k_w.data, x),
                            atol=1e-12)


def test_bilinear_init_matches_independent_resampler():
    rng = np.random.default_rng(2)
    for _ in range(10):
        h, w = int(rng.integers(2, 17)), int(rng.integers(2, 17))
        H, W = int(rng.integers(h, 65)), int(rng.integers(w, 65))
        gd = GlobalDeconv((H, W), (h, w))
        gd.init_bilinear()
        x = rng.standard_normal((1, 2, h, w))
        npt.assert_allclose(gd.forward(x), bilinear_fixed(x, (H, W)), atol=1e-12)


def test_bilinear_fixed_against_per_pixel_loops():
    rng = np.random.default_rng(3)
    x = rng.standard_normal((1, 2, 3, 4))
    npt.assert_allclose(bilinear_fixed(x, (7, 5)),
                        bilinear_resample_loops(x, (7, 5)), atol=1e-12)


def test_bilinear_fixed_identity_and_constants():
    rng = np.random.default_rng(4)
    x = rng.standard_normal((1, 1, 4, 4))
    npt.assert_array_equal(bilinear_fixed(x, (4, 4)), x)
    const = np.full((1, 3, 2, 2), 1.7)
    npt.assert_allclose(bilinear_fixed(const, (9, 6)), 1.7, atol=1e-12)
    with pytest.raises(ShapeError):
        bilinear_fixed(x, (3, 4))


def test_bilinear_fixed_2x2_to_4x4_hand_grid():
    x = np.array([[[[1.0, 2.0], [3.0, 4.0]]]])
    y = bilinear_fixed(x, (4, 4))[0, 0]
    # align-corners positions are i/3 along each axis
    row0 = np.array([1.0, 1 + 1 / 3, 1 + 2 / 3, 2.0])
    expected = np.stack([row0 + 2 * f for f in (0.0, 1 / 3, 2 / 3, 1.0)])
    npt.assert_allclose(y, expected, atol=1e-12)


def test_linearity_of_forward():
    rng = np.random.default_rng(5)
    gd = GlobalDeconv((6, 7), (3, 3))
    gd.init_glorot(rng)
    x1 = rng.standard_normal((1, 2, 3, 3))
    x2 = rng.standard_normal((1, 2, 3, 3))
    a, b = 1.3, -0.7
    lhs = gd.forward(a * x1 + b * x2)
    rhs = a * gd.forward(x1) + b * gd.forward(x2)
    npt.assert_allclose(lhs, rhs, atol=1e-10)


def test_channel_independence():
    rng = np.random.default_rng(6)
    gd = GlobalDeconv((5, 5), (3, 3))
    gd.init_glorot(rng)
    x = rng.standard_normal((1, 4, 3, 3))
    perm = rng.permutation(4)
    npt.assert_array_equal(gd.forward(x)[:, perm], gd.forward(x[:, perm]))


def test_backward_zero_and_identity_cases():
    rng = np.random.default_rng(7)
    gd = GlobalDeconv((4, 4), (2, 2))
    gd.init_glorot(rng)
    x = rng.standard_normal((1, 2, 2, 2))
    y = gd.forward(x)
    gx = gd.backward(np.zeros_like(y))
    assert not gx.any() and not gd.k_h.grad.any() and not gd.k_w.grad.any()

    ident = GlobalDeconv((3, 3), (3, 3))
    ident.k_h.data[...] = np.eye(3)
    ident.k_w.data[...] = np.eye(3)
    x = rng.standard_normal((2, 1, 3, 3))
    ident.forward(x)
    g = rng.standard_normal((2, 1, 3, 3))
    npt.assert_array_equal(ident.backward(g), g)


def test_gradcheck_20_instances():
    rng = np.random.default_rng(8)
    worst = 0.0
    for _ in range(20):
        gd = GlobalDeconv((6, 6), (3, 3))
        gd.init_glorot(rng)
        x = rng.standard_normal((1, 2, 3, 3))
        v = rng.standard_normal((1, 2, 6, 6))

        def loss():
            return float((gd.forward(x) * v).sum())

        gd.forward(x)
        gd.k_h.zero_grad()
        gd.k_w.zero_grad()
        gx = gd.backward(v)
        worst = max(worst,
                    gradcheck(loss, x, gx),
                    gradcheck(loss, gd.k_h.data, gd.k_h.grad.copy()),
                    gradcheck(loss, gd.k_w.data, gd.k_w.grad.copy()))
    assert worst <= 1e-5


def test_relu_activation_forward_backward():
    rng = np.random.default_rng(9)
    gd = GlobalDeconv((4, 4), (2, 2), activation="relu")
    gd.init_glorot(rng)
    x = rng.standard_normal((1, 1, 2, 2))
    pre = (gd.k_h.data @ x) @ gd.k_w.data.T
    y = gd.forward(x)
    npt.assert_array_equal(y, np.maximum(pre, 0.0))
    g = np.ones_like(y)
    gx = gd.backward(g)
    lin = GlobalDeconv((4, 4), (2, 2))
    lin.k_h.data[...] = gd.k_h.data
    lin.k_w.data[...] = gd.k_w.data
    lin.forward(x)
    npt.assert_allclose(gx, lin.backward(np.where(pre > 0, 1.0, 0.0)), atol=1e-12)


def test_subset_full_view_equals_plain_forward():
    rng = np.random.default_rng(10)
    gd = GlobalDeconv((8, 8), (4, 4))
    gd.init_glorot(rng)
    x = rng.standard_normal((1, 2, 4, 4))
    full = gd.forward(x)
    sub = gd.forward(x, SubsetView((8, 8), (4, 4)))
    npt.assert_array_equal(full, sub)


def test_subset_equals_slice_then_multiply_bit_exact():
    rng = np.random.default_rng(11)
    gd = GlobalDeconv((12, 10), (6, 5))
    gd.init_glorot(rng)
    for _ in range(10):
        sh, sw = int(rng.integers(1, 7)), int(rng.integers(1, 6))
        th, tw = int(rng.integers(sh, 13)), int(rng.integers(sw, 11))
        x = rng.standard_normal((2, 3, sh, sw))
        got = gd.forward(x, SubsetView((th, tw), (sh, sw)))
        sliced = GlobalDeconv((th, tw), (sh, sw))
        sliced.k_h.data[...] = gd.k_h.data[:th, :sh]
        sliced.k_w.data[...] = gd.k_w.data[:tw, :sw]
        npt.assert_array_equal(got, sliced.forward(x))
        assert got.shape == (2, 3, th, tw)


def test_subset_bounds_errors():
    gd = GlobalDeconv((8, 8), (4, 4))
    x = np.zeros((1, 1, 4, 4))
    with pytest.raises(ShapeError):
        gd.forward(x, SubsetView((9, 8), (4, 4)))
    with pytest.raises(ShapeError):
        gd.forward(np.zeros((1, 1, 3, 3)), SubsetView((8, 8), (4, 4)))
    with pytest.raises(ShapeError):
        gd.forward(np.zeros((1, 1, 3, 3)))


def test_subset_backward_accumulates_into_topleft_block():
    rng = np.random.default_rng(12)
    gd = GlobalDeconv((8, 8), (4, 4))
    gd.init_glorot(rng)
    x = rng.standard_normal((1, 1, 2, 2))
    view = SubsetView((5, 6), (2, 2))
    y = gd.forward(x, view)
    g = rng.standard_normal(y.shape)
    gd.backward(g)
    assert gd.k_h.grad[:5, :2].any()
    assert not gd.k_h.grad[5:, :].any() and not gd.k_h.grad[:, 2:].any()
    assert not gd.k_w.grad[6:, :].any() and not gd.k_w.grad[:, 2:].any()


def test_glorot_init_seeded_and_centered():
    gd1 = GlobalDeconv((64, 64), (16, 16))
    gd2 = GlobalDeconv((64, 64), (16, 16))
    gd1.init_glorot(np.random.default_rng(13))
    gd2.init_glorot(np.random.default_rng(13))
    npt.assert_array_equal(gd1.k_h.data, gd2.k_h.data)
    npt.assert_array_equal(gd1.k_w.data, gd2.k_w.data)

    big = GlobalDeconv((200, 200), (50, 50))
    big.init_glorot(np.random.default_rng(14))
    assert big.k_h.data.size == 10000
    assert abs(big.k_h.data.mean()) < 0.05
    limit = np.sqrt(6.0 / (200 + 50))
    assert np.abs(big.k_h.data).max() <= limit


def test_bilinear_matrix_rows_sum_to_one():
    for t, s in [(8, 3), (5, 5), (7, 1), (1, 1), (64, 16)]:
        m = bilinear_matrix(t, s)
        npt.assert_allclose(m.sum(axis=1), 1.0, atol=1e-12)


def test_upsampling_only_constraint():
    with pytest.raises(ShapeError):
        GlobalDeconv((4, 4), (5, 5))
