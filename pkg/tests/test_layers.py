import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from oracles import conv_loop, numeric_grad, rel_err
from stripeprune.layers import (BatchNorm2d, FilterSkeleton, FsConvLayer, GlobalAvgPool, Linear, MaxPool2, ReLU,
                                conv2d, fs_conv_backward, fs_conv_forward, merge_skeleton, softmax_xent)
from stripeprune.tensor import ShapeError


def random_layer(rng, n, c, k, stride=1, shared=False):
    g = 1 if shared else n
    skel = FilterSkeleton(rng.normal(size=(g, k, k)), np.zeros((g, k, k), dtype=bool))
    return FsConvLayer(rng.normal(size=(n, c, k, k)), skel, stride)


def test_forward_matches_loop_oracle():
    rng = np.random.default_rng(1)
    x = rng.normal(size=(1, 2, 4, 4))
    layer = random_layer(rng, 1, 2, 3)
    got = fs_conv_forward(layer, x)
    want = conv_loop(x, layer.W, layer.skeleton.values)
    assert np.max(np.abs(got - want)) < 1e-12


def test_forward_all_ones_and_all_zeros():
    rng = np.random.default_rng(2)
    x = rng.normal(size=(2, 3, 5, 5))
    layer = FsConvLayer(rng.normal(size=(4, 3, 3, 3)), FilterSkeleton.ones(4, 3))
    np.testing.assert_allclose(fs_conv_forward(layer, x), conv2d(x, layer.W, 1, 1), atol=1e-12)
    layer.skeleton.values[:] = 0
    assert not fs_conv_forward(layer, x).any()


def test_same_padding_preserves_spatial_dims():
    layer = FsConvLayer(np.ones((2, 1, 3, 3)), FilterSkeleton.ones(2, 3))
    assert fs_conv_forward(layer, np.ones((1, 1, 7, 5))).shape == (1, 2, 7, 5)


def test_channel_mismatch():
    layer = FsConvLayer(np.ones((2, 3, 3, 3)), FilterSkeleton.ones(2, 3))
    with pytest.raises(ShapeError):
        fs_conv_forward(layer, np.ones((1, 2, 4, 4)))
    with pytest.raises(ShapeError):
        fs_conv_backward(layer, np.ones((1, 3, 4, 4)), np.ones((1, 2, 3, 3)))


def test_rejects_even_kernel_and_bad_stride():
    with pytest.raises(ShapeError):
        FsConvLayer(np.ones((1, 1, 2, 2)), FilterSkeleton.ones(1, 2))
    with pytest.raises(ShapeError):
        FsConvLayer(np.ones((1, 1, 3, 3)), FilterSkeleton.ones(1, 3), stride=3)


@settings(max_examples=40, deadline=None)
@given(n=st.integers(1, 4), c=st.integers(1, 4), k=st.sampled_from([1, 3]), h=st.integers(3, 6),
       w=st.integers(3, 6), stride=st.sampled_from([1, 2]), seed=st.integers(0, 2**31))
def test_ones_skeleton_reduces_to_dense(n, c, k, h, w, stride, seed):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(2, c, h, w))
    layer = FsConvLayer(rng.normal(size=(n, c, k, k)), FilterSkeleton.ones(n, k), stride)
    assert np.max(np.abs(fs_conv_forward(layer, x) - conv_loop(x, layer.W, stride=stride))) < 1e-12


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 2**31), s=st.floats(0.1, 10.0))
def test_stripe_scale_is_unidentified(seed, s):
    rng = np.random.default_rng(seed)
    layer = random_layer(rng, 3, 2, 3)
    x = rng.normal(size=(1, 2, 5, 5))
    n, i, j = rng.integers(0, 3, size=3)
    scaled = layer.copy()
    scaled.skeleton.values[n, i, j] *= s
    scaled.W[n, :, i, j] /= s
    assert np.max(np.abs(fs_conv_forward(layer, x) - fs_conv_forward(scaled, x))) < 1e-10


def test_zero_skeleton_entry_kills_weight_grad():
    rng = np.random.default_rng(3)
    layer = random_layer(rng, 3, 4, 3)
    layer.skeleton.values[1, 0, 2] = 0.0
    layer.skeleton.values[2, 1, 1] = 0.0
    x = rng.normal(size=(2, 4, 5, 5))
    g = fs_conv_backward(layer, x, rng.normal(size=(2, 3, 5, 5)))
    assert not g.dW[1, :, 0, 2].any()
    assert not g.dW[2, :, 1, 1].any()


def test_zero_upstream_gives_zero_grads():
    rng = np.random.default_rng(4)
    layer = random_layer(rng, 2, 2, 3)
    g = fs_conv_backward(layer, rng.normal(size=(1, 2, 4, 4)), np.zeros((1, 2, 4, 4)))
    assert not (g.dW.any() or g.dI.any() or g.dX.any())


def test_frozen_entries_get_no_skeleton_grad():
    rng = np.random.default_rng(5)
    layer = random_layer(rng, 2, 2, 3)
    layer.skeleton.frozen[0, 1, 1] = True
    layer.skeleton.values[0, 1, 1] = 0.0
    g = fs_conv_backward(layer, rng.normal(size=(1, 2, 4, 4)), rng.normal(size=(1, 2, 4, 4)))
    assert g.dI[0, 1, 1] == 0.0


def check_fd(layer, x):
    def loss():
        return float((fs_conv_forward(layer, x) ** 2).sum())

    out = fs_conv_forward(layer, x)
    g = fs_conv_backward(layer, x, 2 * out)
    assert rel_err(g.dW, numeric_grad(loss, layer.W)) < 1e-5
    assert rel_err(g.dI, numeric_grad(loss, layer.skeleton.values)) < 1e-5
    assert rel_err(g.dX, numeric_grad(loss, x)) < 1e-5


@pytest.mark.parametrize("k,stride,shared", [(3, 1, False), (3, 2, False), (1, 1, False), (3, 1, True), (1, 2, True)])
def test_backward_matches_finite_differences(k, stride, shared):
    rng = np.random.default_rng(10 + k + stride)
    layer = random_layer(rng, 3, 2, k, stride, shared)
    check_fd(layer, rng.normal(size=(2, 2, 5, 4)))


def test_merge_skeleton():
    rng = np.random.default_rng(6)
    layer = random_layer(rng, 3, 2, 3)
    x = rng.normal(size=(2, 2, 6, 6))
    merged = merge_skeleton(layer)
    assert np.max(np.abs(fs_conv_forward(merged, x) - fs_conv_forward(layer, x))) < 1e-12
    assert np.all(merged.skeleton.values == 1) and not merged.skeleton.frozen.any()

    ones = FsConvLayer(layer.W.copy(), FilterSkeleton.ones(3, 3))
    np.testing.assert_array_equal(merge_skeleton(ones).W, layer.W)
    zeros = FsConvLayer(layer.W.copy(), FilterSkeleton(np.zeros((3, 3, 3)), np.zeros((3, 3, 3), bool)))
    assert not merge_skeleton(zeros).W.any()


# auxiliary layers

def test_relu():
    r = ReLU()
    np.testing.assert_array_equal(r.forward(np.array([-1.0, 0.0, 2.0])), [0, 0, 2])
    np.testing.assert_array_equal(r.backward(np.ones(3)), [0, 0, 1])


def test_softmax_xent_uniform_logits():
    loss, grad = softmax_xent(np.zeros((3, 7)), np.array([0, 3, 6]))
    assert loss == pytest.approx(np.log(7), abs=1e-12)
    np.testing.assert_allclose(grad.sum(axis=1), 0, atol=1e-15)


def test_softmax_xent_gradient():
    rng = np.random.default_rng(7)
    z = rng.normal(size=(4, 5))
    y = np.array([0, 4, 2, 2])
    _, g = softmax_xent(z, y)
    assert rel_err(g, numeric_grad(lambda: softmax_xent(z, y)[0], z)) < 1e-6


@pytest.mark.parametrize("train", [True, False])
def test_batchnorm_finite_differences(train):
    rng = np.random.default_rng(8)
    bn = BatchNorm2d(3)
    bn.gamma.value[:] = rng.normal(size=3)
    bn.beta.value[:] = rng.normal(size=3)
    bn.running_mean[:] = rng.normal(size=3)
    bn.running_var[:] = rng.uniform(0.5, 2, size=3)
    x = rng.normal(size=(4, 3, 3, 3))
    r = rng.normal(size=x.shape)
    stats = (bn.running_mean.copy(), bn.running_var.copy())

    def loss():
        bn.running_mean[:], bn.running_var[:] = stats
        return float((bn.forward(x, train) * r).sum())

    loss()
    for p in bn.params():
        p.zero_grad()
    dx = bn.backward(r)
    assert rel_err(dx, numeric_grad(loss, x)) < 1e-5
    assert rel_err(bn.gamma.grad, numeric_grad(loss, bn.gamma.value)) < 1e-5
    assert rel_err(bn.beta.grad, numeric_grad(loss, bn.beta.value)) < 1e-5


def test_batchnorm_running_stats():
    bn = BatchNorm2d(2)
    x = np.random.default_rng(9).normal(3.0, 2.0, size=(8, 2, 4, 4))
    bn.forward(x, train=True)
    np.testing.assert_allclose(bn.running_mean, 0.1 * x.mean(axis=(0, 2, 3)))
    m = 8 * 16
    np.testing.assert_allclose(bn.running_var, 0.9 + 0.1 * x.var(axis=(0, 2, 3)) * m / (m - 1))


def test_pool_and_linear_gradients():
    rng = np.random.default_rng(11)
    x = rng.normal(size=(2, 3, 5, 4))
    r = rng.normal(size=(2, 3, 2, 2))
    mp = MaxPool2()
    mp.forward(x)
    assert rel_err(mp.backward(r), numeric_grad(lambda: float((mp.forward(x) * r).sum()), x)) < 1e-6

    gap = GlobalAvgPool()
    r2 = rng.normal(size=(2, 3))
    gap.forward(x)
    assert rel_err(gap.backward(r2), numeric_grad(lambda: float((gap.forward(x) * r2).sum()), x)) < 1e-6

    lin = Linear.init(rng, 3, 4)
    xin = rng.normal(size=(5, 3))
    r3 = rng.normal(size=(5, 4))
    for p in lin.params():
        p.zero_grad()
    lin.forward(xin)
    dx = lin.backward(r3)
    f = lambda: float((lin.forward(xin) * r3).sum())
    assert rel_err(dx, numeric_grad(f, xin)) < 1e-6
    assert rel_err(lin.weight.grad, numeric_grad(f, lin.weight.value)) < 1e-6
