import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from oracles import conv_loop
from stripeprune.engine import (BENCH_HEADER, StripeModel, bench_csv, bench_kernels, export_model, run_model,
                                stripe_conv_forward, stripe_conv_reference)
from stripeprune.layers import FilterSkeleton, FsConvLayer, conv2d, fs_conv_forward
from stripeprune.model import build_network
from stripeprune.prune import StripeLayer, extract_stripes, stripe_layers
from stripeprune.sparsity import apply_threshold, fs_convs
from stripeprune.tensor import ShapeError


def full_layer(W, stride=1):
    n, c, k, _ = W.shape
    return extract_stripes(FsConvLayer(W, FilterSkeleton.ones(n, k), stride))


def test_center_stripe_is_1x1_conv():
    rng = np.random.default_rng(0)
    x = rng.normal(size=(2, 3, 5, 5))
    w = rng.normal(size=3)
    sl = StripeLayer([(0, 1, 1)], w[None], 1, 3, 3)
    np.testing.assert_allclose(stripe_conv_forward(sl, x), conv2d(x, w.reshape(1, 3, 1, 1)), atol=1e-12)


def test_all_stripes_equal_dense():
    rng = np.random.default_rng(1)
    W = rng.normal(size=(4, 3, 3, 3))
    x = rng.normal(size=(2, 3, 6, 5))
    assert np.max(np.abs(stripe_conv_forward(full_layer(W), x) - conv2d(x, W, 1, 1))) < 1e-10


@settings(max_examples=60, deadline=None)
@given(n=st.integers(1, 4), c=st.integers(1, 4), k=st.sampled_from([1, 3]), stride=st.sampled_from([1, 2]),
       h=st.integers(3, 8), w=st.integers(3, 8), seed=st.integers(0, 2**31))
def test_reordering_identity(n, c, k, stride, h, w, seed):
    rng = np.random.default_rng(seed)
    W = rng.normal(size=(n, c, k, k))
    x = rng.normal(size=(2, c, h, w))
    got = stripe_conv_forward(full_layer(W, stride), x)
    assert np.max(np.abs(got - conv_loop(x, W, stride=stride))) < 1e-10


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 2**31), p=st.floats(0, 1), stride=st.sampled_from([1, 2]))
def test_pruned_path_equivalence(seed, p, stride):
    rng = np.random.default_rng(seed)
    frozen = rng.random((5, 3, 3)) < p
    values = rng.normal(size=(5, 3, 3))
    values[frozen] = 0
    layer = FsConvLayer(rng.normal(size=(5, 3, 3, 3)), FilterSkeleton(values, frozen), stride)
    x = rng.normal(size=(2, 3, 7, 6))
    sl = extract_stripes(layer)
    out = stripe_conv_forward(sl, x)
    assert np.max(np.abs(out - fs_conv_forward(layer, x))) < 1e-10
    assert np.max(np.abs(out - stripe_conv_reference(sl, x))) < 1e-12
    dead = sorted(set(range(5)) - set(sl.surviving_filters))
    assert not out[:, dead].any()


def test_bias_is_applied_only_inside_the_window():
    sl = StripeLayer([(0, 0, 0)], np.zeros((1, 1)), 1, 1, 3, bias=np.array([2.0]))
    out = stripe_conv_forward(sl, np.zeros((1, 1, 3, 3)))
    expected = np.full((3, 3), 2.0)
    expected[0, :] = 0
    expected[:, 0] = 0
    np.testing.assert_array_equal(out[0, 0], expected)
    np.testing.assert_array_equal(stripe_conv_reference(sl, np.zeros((1, 1, 3, 3))), out)


def test_channel_mismatch():
    with pytest.raises(ShapeError):
        stripe_conv_forward(full_layer(np.ones((2, 3, 3, 3))), np.ones((1, 2, 4, 4)))


def pruned_net(arch, seed, widths, in_shape=(1, 8, 8), frac=0.5, kill_filters=True):
    rng = np.random.default_rng(seed)
    net = build_network(arch, in_shape, 5, widths, rng)
    for bn in net.batchnorms():
        bn.running_mean[:] = rng.normal(size=bn.running_mean.shape)
        bn.running_var[:] = rng.uniform(0.5, 2, size=bn.running_var.shape)
        bn.beta.value[:] = rng.normal(size=bn.beta.value.shape)
    for conv in fs_convs(net):
        v = conv.layer.skeleton.values
        v[:] = rng.uniform(0, 1, size=v.shape)
        v[v < frac] = 0.01
        if kill_filters:
            v[0] = 0.01
    apply_threshold(net, 0.05)
    return net


@pytest.mark.parametrize("arch,widths", [("tiny-vgg", (4, 5, 6, 4)), ("tiny-resnet", (4, 6))])
@pytest.mark.parametrize("compact", [True, False])
def test_export_matches_fs_network(arch, widths, compact):
    net = pruned_net(arch, 3, widths)
    x = np.random.default_rng(4).normal(size=(6, 1, 8, 8))
    model = export_model(net, compact=compact)
    assert np.max(np.abs(run_model(model, x) - net.forward(x))) < 1e-8


def test_compaction_removes_dead_filters():
    net = pruned_net("tiny-vgg", 5, (4, 5, 6, 4))
    model = export_model(net, compact=True)
    layers = stripe_layers(model)
    assert all(l.n_filters < l.dense_filters for l in layers)
    assert layers[1].in_channels == layers[0].n_filters
    loose = stripe_layers(export_model(net, compact=False))
    assert [l.n_filters for l in loose] == [l.dense_filters for l in layers]


def test_run_model_determinism_and_batch_copies():
    net = pruned_net("tiny-vgg", 6, (3, 3, 4, 4))
    model = export_model(net)
    img = np.random.default_rng(7).normal(size=(1, 1, 8, 8))
    batch = np.repeat(img, 5, axis=0)
    a = run_model(model, batch)
    assert np.array_equal(a, run_model(model, batch))
    assert np.all(a == a[0])
    z = np.zeros((2, 1, 8, 8))
    assert np.array_equal(run_model(model, z), run_model(model, z))
    with pytest.raises(ShapeError):
        run_model(model, np.zeros((2, 1, 7, 8)))


def test_bench_kernels():
    rows = bench_kernels(n=8, c=8, hw=8, batch=2, sparsities=(0.0, 0.5, 0.9), repeats=1)
    assert len(rows) == 3
    assert all(r["checksum_ok"] for r in rows)
    csv = bench_csv(rows).splitlines()
    assert csv[0] == BENCH_HEADER and len(csv) == 4
