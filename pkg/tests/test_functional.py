import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from tbnet import functional as F
from tbnet.tensor import Tensor

from oracles import conv2d_loops, maxpool_loops, matmul_loops, mean_loops, pointwise_by_pixel


def t(a, **kw):
    return Tensor(np.asarray(a, dtype=np.float32), **kw)


# -- conv2d ----------------------------------------------------------------------
def test_conv_sum_of_ones():
    out = F.conv2d(t(np.ones((1, 1, 3, 3))), t(np.ones((1, 1, 3, 3))))
    assert out.shape == (1, 1, 1, 1)
    assert out.data.item() == 9.0


def test_conv_channel_selector(rng):
    x = rng.standard_normal((2, 3, 5, 5)).astype(np.float32)
    w = np.zeros((1, 3, 1, 1), np.float32)
    w[0, 0] = 1.0
    out = F.conv2d(t(x), t(w)).data
    np.testing.assert_array_equal(out[:, 0], x[:, 0])


def test_conv_matches_loop_oracle(rng):
    x = rng.standard_normal((1, 2, 4, 4))
    w = rng.standard_normal((3, 2, 3, 3))
    out = F.conv2d(t(x), t(w), padding=1).data
    np.testing.assert_allclose(out, conv2d_loops(x.astype(np.float32), w.astype(np.float32), padding=1),
                               atol=1e-5, rtol=0)


def test_conv_with_bias_stride_groups(rng):
    x = rng.standard_normal((2, 4, 7, 6)).astype(np.float32)
    w = rng.standard_normal((6, 2, 3, 3)).astype(np.float32)
    b = rng.standard_normal(6).astype(np.float32)
    out = F.conv2d(t(x), t(w), t(b), stride=2, padding=1, groups=2).data
    np.testing.assert_allclose(out, conv2d_loops(x, w, b, 2, 1, 2), atol=1e-5, rtol=0)


def test_conv_errors():
    x = t(np.zeros((1, 3, 4, 4)))
    with pytest.raises(ValueError, match="not divisible by groups"):
        F.conv2d(x, t(np.zeros((2, 1, 3, 3))), groups=3)
    with pytest.raises(ValueError, match="not divisible by groups"):
        F.conv2d(t(np.zeros((1, 4, 4, 4))), t(np.zeros((3, 2, 3, 3))), groups=2)
    with pytest.raises(F.ShapeError, match="channel"):
        F.conv2d(x, t(np.zeros((2, 2, 3, 3))))
    with pytest.raises(F.ShapeError, match="height|width"):
        F.conv2d(x, t(np.zeros((1, 3, 5, 5))))
    with pytest.raises(ValueError):
        F.conv2d(x, t(np.zeros((1, 3, 3, 3))), stride=0)
    with pytest.raises(ValueError):
        F.conv2d(x, t(np.zeros((1, 3, 3, 3))), padding=-1)


# -- depthwise / pointwise ----------------------------------------------------------
def test_depthwise_equals_grouped_conv_bitwise(rng):
    x = t(rng.standard_normal((2, 5, 9, 9)))
    w = t(rng.standard_normal((5, 1, 3, 3)))
    a = F.depthwise_conv2d(x, w, stride=2, padding=1).data
    b = F.conv2d(x, w, stride=2, padding=1, groups=5).data
    assert a.tobytes() == b.tobytes()


def test_depthwise_center_tap_is_identity(rng):
    x = rng.standard_normal((1, 4, 6, 6)).astype(np.float32)
    w = np.zeros((4, 1, 3, 3), np.float32)
    w[:, 0, 1, 1] = 1.0
    np.testing.assert_array_equal(F.depthwise_conv2d(t(x), t(w), padding=1).data, x)


def test_depthwise_matches_oracle(rng):
    x = rng.standard_normal((2, 3, 6, 5)).astype(np.float32)
    w = rng.standard_normal((3, 1, 3, 3)).astype(np.float32)
    np.testing.assert_allclose(F.depthwise_conv2d(t(x), t(w), padding=1).data,
                               conv2d_loops(x, w, padding=1, groups=3), atol=1e-5, rtol=0)


def test_pointwise_identity(rng):
    x = rng.standard_normal((2, 4, 3, 3)).astype(np.float32)
    w = np.eye(4, dtype=np.float32).reshape(4, 4, 1, 1)
    np.testing.assert_array_equal(F.pointwise_conv2d(t(x), t(w)).data, x)


def test_pointwise_dot_product():
    out = F.pointwise_conv2d(t([[[[1.0]], [[2.0]]]]), t(np.array([3.0, 4.0]).reshape(1, 2, 1, 1)))
    assert out.shape == (1, 1, 1, 1) and out.data.item() == 11.0


def test_pointwise_matches_per_pixel_matmul(rng):
    x = rng.standard_normal((2, 5, 3, 4)).astype(np.float32)
    w = rng.standard_normal((3, 5, 1, 1)).astype(np.float32)
    b = rng.standard_normal(3).astype(np.float32)
    np.testing.assert_allclose(F.pointwise_conv2d(t(x), t(w), t(b)).data, pointwise_by_pixel(x, w, b),
                               atol=1e-5, rtol=0)


def test_pointwise_rejects_spatial_kernel():
    with pytest.raises(F.ShapeError):
        F.pointwise_conv2d(t(np.zeros((1, 2, 3, 3))), t(np.zeros((1, 2, 3, 3))))


# -- pooling / upsampling -------------------------------------------------------------
def test_maxpool_constant():
    out = F.maxpool2d(t(np.full((1, 2, 6, 6), 3.5)), 2, 2).data
    np.testing.assert_array_equal(out, np.full((1, 2, 3, 3), 3.5))


def test_maxpool_example():
    assert F.maxpool2d(t([[[[1.0, 2.0], [3.0, 4.0]]]]), 2, 2).data.item() == 4.0


def test_maxpool_matches_oracle(rng):
    x = rng.standard_normal((1, 3, 8, 8)).astype(np.float32)
    np.testing.assert_array_equal(F.maxpool2d(t(x), 2, 2).data, maxpool_loops(x, 2, 2))
    np.testing.assert_array_equal(F.maxpool2d(t(x), 3, 2).data, maxpool_loops(x, 3, 2))


def test_maxpool_tie_routes_to_first_argmax():
    x = t(np.ones((1, 1, 2, 2)), requires_grad=True)
    F.maxpool2d(x, 2, 2).sum().backward()
    np.testing.assert_array_equal(x.grad[0, 0], [[1.0, 0.0], [0.0, 0.0]])


def test_maxpool_window_too_large():
    with pytest.raises(F.ShapeError):
        F.maxpool2d(t(np.zeros((1, 1, 2, 2))), 3)


def test_upsample_examples():
    x = t(np.arange(6.0).reshape(1, 1, 2, 3))
    np.testing.assert_array_equal(F.nearest_upsample(x, 1).data, x.data)
    out = F.nearest_upsample(t([[[[5.0]]]]), 2).data
    np.testing.assert_array_equal(out, np.full((1, 1, 2, 2), 5.0))


@pytest.mark.parametrize("factor", [1, 2, 3])
def test_upsample_gradient_is_factor_squared(rng, factor):
    x = t(rng.standard_normal((2, 2, 3, 3)), requires_grad=True)
    F.nearest_upsample(x, factor).sum().backward()
    np.testing.assert_array_equal(x.grad, np.full(x.shape, factor ** 2, np.float32))


def test_global_avg_pool_examples(rng):
    np.testing.assert_allclose(F.global_avg_pool(t(np.full((2, 3, 4, 4), 1.25))).data, np.full((2, 3), 1.25))
    assert F.global_avg_pool(t([[[[1.0, 2.0], [3.0, 4.0]]]])).data.item() == 2.5
    x = rng.standard_normal((2, 3, 5, 7)).astype(np.float32)
    np.testing.assert_allclose(F.global_avg_pool(t(x)).data, mean_loops(x), atol=1e-6)


# -- dense ------------------------------------------------------------------------
def test_dense_examples(rng):
    x = rng.standard_normal((3, 4)).astype(np.float32)
    np.testing.assert_array_equal(F.dense(t(x), t(np.eye(4)), t(np.zeros(4))).data, x)
    assert F.dense(t([[1.0, 2.0]]), t([[3.0, 4.0]]), t([1.0])).data.tolist() == [[12.0]]


def test_dense_matches_triple_loop(rng):
    x = rng.standard_normal((4, 6)).astype(np.float32)
    w = rng.standard_normal((3, 6)).astype(np.float32)
    b = rng.standard_normal(3).astype(np.float32)
    np.testing.assert_allclose(F.dense(t(x), t(w), t(b)).data, matmul_loops(x, w.T) + b, atol=1e-5)


# -- shape algebra sweep ------------------------------------------------------------
@settings(max_examples=150, deadline=None)
@given(h=st.integers(1, 8), w=st.integers(1, 8), k=st.integers(1, 8), s=st.integers(1, 8), p=st.integers(0, 8))
def test_conv_output_shape_formula(h, w, k, s, p):
    x = t(np.zeros((1, 1, h, w)))
    wt = t(np.zeros((1, 1, k, k)))
    if h + 2 * p < k or w + 2 * p < k:
        with pytest.raises(F.ShapeError):
            F.conv2d(x, wt, stride=s, padding=p)
        return
    out = F.conv2d(x, wt, stride=s, padding=p)
    assert out.shape == (1, 1, (h + 2 * p - k) // s + 1, (w + 2 * p - k) // s + 1)
    assert F.conv_output_size(h, k, s, p) == out.shape[2]


@settings(max_examples=100, deadline=None)
@given(h=st.integers(1, 8), w=st.integers(1, 8), k=st.integers(1, 8), s=st.integers(1, 8))
def test_pool_output_shape_formula(h, w, k, s):
    x = t(np.zeros((1, 1, h, w)))
    if k > h or k > w:
        with pytest.raises(F.ShapeError):
            F.maxpool2d(x, k, s)
        return
    assert F.maxpool2d(x, k, s).shape == (1, 1, (h - k) // s + 1, (w - k) // s + 1)


# -- loss ---------------------------------------------------------------------------
def test_cross_entropy_examples():
    uniform = F.softmax_cross_entropy(t([[0.0, 0.0], [1.0, 1.0]]), np.array([0, 1]))
    assert uniform.item() == pytest.approx(np.log(2), abs=1e-6)
    perfect = F.softmax_cross_entropy(t([[0.0, 200.0]]), np.array([1]))
    assert perfect.item() == pytest.approx(0.0, abs=1e-12)


def test_cross_entropy_gradient_is_softmax_minus_onehot(rng):
    logits = t(rng.standard_normal((4, 2)), requires_grad=True)
    labels = np.array([0, 1, 1, 0])
    F.softmax_cross_entropy(logits, labels).backward()
    expect = (F.softmax(Tensor(logits.data)).data - np.eye(2)[labels]) / 4
    np.testing.assert_allclose(logits.grad, expect, atol=1e-7)


def test_cross_entropy_rejects_bad_label():
    with pytest.raises(ValueError, match="label"):
        F.softmax_cross_entropy(t([[0.0, 0.0]]), np.array([2]))
