import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from oracles import numeric_grad, rel_err
from stripeprune.layers import FilterSkeleton, FsConv2d, FsConvLayer, Sequential, fs_conv_backward, softmax_xent
from stripeprune.model import build_network
from stripeprune.sparsity import (ModeError, SparsityConfig, apply_threshold, frozen_stripes, fs_convs,
                                  group_penalty_view, lasso_weight_penalty, skeleton_penalty, skeleton_penalty_grad)
from stripeprune.train import SGD, add_penalty_grads, objective


def conv_model(values, c=2):
    values = np.asarray(values, dtype=float)
    layer = FsConvLayer(np.ones((values.shape[0], c, values.shape[1], values.shape[2])),
                        FilterSkeleton(values.copy(), np.zeros(values.shape, bool)))
    return Sequential([FsConv2d(layer)])


def test_config_validation():
    with pytest.raises(ValueError):
        SparsityConfig(alpha=-1)
    with pytest.raises(ValueError):
        SparsityConfig(mode="weights")


def test_penalty_examples():
    assert skeleton_penalty(conv_model(np.ones((2, 3, 3)))) == 18
    assert skeleton_penalty(conv_model(np.zeros((2, 3, 3)))) == 0
    rng = np.random.default_rng(0)
    vals = [rng.normal(size=(3, 3, 3)), rng.normal(size=(5, 1, 1))]
    model = Sequential([conv_model(v) for v in vals])
    brute = 0.0
    for v in vals:
        for x in v.ravel():
            brute += abs(x)
    assert skeleton_penalty(model) == pytest.approx(brute, rel=1e-15)
    with pytest.raises(ModeError):
        skeleton_penalty(model, mode="lasso-weights")


def test_penalty_grad_examples():
    model = conv_model(np.array([2.0, -3.0, 0.0]).reshape(3, 1, 1))
    g, = skeleton_penalty_grad(model, 1e-5)
    np.testing.assert_array_equal(g.ravel(), [1e-5, -1e-5, 0])
    g, = skeleton_penalty_grad(model, 0.0)
    assert not g.any()


def test_threshold_examples():
    model = conv_model(np.array([0.04, 0.06, -0.01]).reshape(3, 1, 1))
    assert apply_threshold(model, 0.0) == 0
    assert apply_threshold(model, 0.05) == 2
    skel = fs_convs(model)[0].layer.skeleton
    np.testing.assert_array_equal(skel.frozen.ravel(), [True, False, True])
    np.testing.assert_array_equal(skel.values.ravel(), [0.0, 0.06, 0.0])
    assert apply_threshold(model, 0.05) == 0
    assert frozen_stripes(model) == 2


@settings(max_examples=50, deadline=None)
@given(seed=st.integers(0, 2**31), d1=st.floats(0, 1), d2=st.floats(0, 1))
def test_threshold_monotone_in_delta(seed, d1, d2):
    d1, d2 = sorted((d1, d2))
    vals = np.random.default_rng(seed).normal(scale=0.5, size=(4, 3, 3))
    m1, m2 = conv_model(vals), conv_model(vals)
    apply_threshold(m1, d1)
    apply_threshold(m2, d2)
    f1 = fs_convs(m1)[0].layer.skeleton.frozen
    f2 = fs_convs(m2)[0].layer.skeleton.frozen
    assert np.all(f2[f1])


def test_frozen_entries_stay_zero_under_sgd():
    rng = np.random.default_rng(1)
    net = build_network("tiny-vgg", (1, 6, 6), 3, (2, 2, 3, 3), rng)
    for conv in fs_convs(net):
        conv.layer.skeleton.values[:] = rng.uniform(-0.1, 0.1, size=conv.layer.skeleton.values.shape)
    apply_threshold(net, 0.05)
    frozen = [c.layer.skeleton.frozen.copy() for c in fs_convs(net)]
    opt = SGD(net.params(), 0.5, 0.9, 1e-4)
    x, y = rng.normal(size=(4, 1, 6, 6)), rng.integers(0, 3, 4)
    sp = SparsityConfig(1e-2, 0.0)
    for _ in range(10):
        for p in net.params():
            p.zero_grad()
        _, d = softmax_xent(net.forward(x, True), y)
        net.backward(d)
        add_penalty_grads(net, sp)
        opt.step()
        for conv, fr in zip(fs_convs(net), frozen):
            assert np.all(conv.layer.skeleton.values[fr] == 0.0)
            assert np.array_equal(conv.layer.skeleton.frozen, fr)


def test_objective_gradient_matches_finite_differences():
    rng = np.random.default_rng(2)
    net = build_network("tiny-vgg", (1, 6, 6), 3, (2, 3, 3, 2), rng)
    for bn in net.batchnorms():
        bn.running_var[:] = rng.uniform(0.5, 1.5, size=bn.running_var.shape)
    for conv in fs_convs(net):
        v = conv.layer.skeleton.values
        v[:] = rng.uniform(0.3, 1.5, size=v.shape) * rng.choice([-1, 1], size=v.shape)
    x, y = rng.normal(size=(3, 1, 6, 6)), rng.integers(0, 3, 3)
    sp = SparsityConfig(alpha=0.05, delta=0.0)
    total, data_loss, pen = objective(net, x, y, sp)
    assert total == data_loss + sp.alpha * pen

    for p in net.params():
        p.zero_grad()
    _, d = softmax_xent(net.forward(x, False), y)
    net.backward(d)
    add_penalty_grads(net, sp)
    for conv in fs_convs(net):
        fd = numeric_grad(lambda: objective(net, x, y, sp)[0], conv.layer.skeleton.values)
        assert rel_err(conv._i.grad, fd) < 1e-4


def test_group_mode():
    rng = np.random.default_rng(3)
    net = build_network("tiny-vgg", (1, 6, 6), 3, (2, 2, 3, 3), rng, shared_skeleton=True)
    conv = fs_convs(net)[0]
    assert conv.layer.skeleton.values.shape == (1, 3, 3)
    assert group_penalty_view(net) == 9 * 4
    with pytest.raises(ModeError):
        group_penalty_view(net, mode="stripe")
    with pytest.raises(ModeError):
        group_penalty_view(build_network("tiny-vgg", (1, 6, 6), 3, (2, 2, 3, 3), rng))

    single = Sequential([FsConv2d(FsConvLayer(rng.normal(size=(3, 2, 3, 3)), FilterSkeleton.ones(1, 3)))])
    assert group_penalty_view(single) == 9
    skel = fs_convs(single)[0].layer.skeleton
    skel.values[0, 1, 1] = 0.01
    assert apply_threshold(single, 0.05, mode="group") == 1
    assert frozen_stripes(single) == 3
    layer = fs_convs(single)[0].layer
    g = fs_conv_backward(layer, rng.normal(size=(1, 2, 4, 4)), rng.normal(size=(1, 3, 4, 4)))
    assert not g.dW[:, :, 1, 1].any()


def test_lasso_weight_penalty():
    W = np.zeros((1, 2, 1, 1))
    W[0, :, 0, 0] = [3.0, 4.0]
    model = Sequential([FsConv2d(FsConvLayer(W, FilterSkeleton.ones(1, 1)))])
    pen, (g,) = lasso_weight_penalty(model)
    assert pen == 5.0
    np.testing.assert_allclose(g[0, :, 0, 0], [0.6, 0.8])
    with pytest.raises(ModeError):
        lasso_weight_penalty(model, mode="stripe")

    zero = Sequential([FsConv2d(FsConvLayer(np.zeros((2, 3, 3, 3)), FilterSkeleton.ones(2, 3)))])
    pen, (g,) = lasso_weight_penalty(zero)
    assert pen == 0 and not g.any()


def test_lasso_gradient_finite_differences():
    rng = np.random.default_rng(4)
    W = rng.normal(size=(3, 4, 3, 3))
    model = Sequential([FsConv2d(FsConvLayer(W, FilterSkeleton.ones(3, 3)))])
    _, (g,) = lasso_weight_penalty(model)
    fd = numeric_grad(lambda: lasso_weight_penalty(model)[0], W)
    assert rel_err(g, fd) < 1e-4


def test_lasso_threshold_uses_stripe_norm():
    W = np.ones((2, 4, 1, 1))
    W[1] *= 0.01
    model = Sequential([FsConv2d(FsConvLayer(W, FilterSkeleton.ones(2, 1)))])
    assert apply_threshold(model, 0.05, mode="lasso-weights") == 1
    assert fs_convs(model)[0].layer.skeleton.frozen.ravel().tolist() == [False, True]
