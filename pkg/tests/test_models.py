import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from detl import ops
from detl.models import (CONV, DENSE, GAP, PRESETS, ModelError, build_preset, forward, replace_head,
                         set_trainable_from_block)
from detl.ops import ShapeError
from detl.tensor import Tensor, no_grad


def learnable(model):
    return [l for l in model.layers if l.has_params()]


def test_mini_alex_layer_count():
    m = build_preset("mini-alex", (1, 64, 64), 2)
    kinds = [l.kind for l in learnable(m)]
    assert len(kinds) == 8 and kinds.count(CONV) == 5 and kinds.count(DENSE) == 3
    assert m.layers[-1].kind == DENSE and m.layers[-1].out_features == 2


def test_mini_vgg_layer_count():
    m = build_preset("mini-vgg", (1, 64, 64), 2)
    kinds = [l.kind for l in learnable(m)]
    assert len(kinds) == 10 and kinds.count(CONV) == 8 and kinds.count(DENSE) == 2


def test_mini_res_uses_gap_and_one_dense():
    m = build_preset("mini-res", (1, 64, 64), 2)
    kinds = [l.kind for l in m.layers]
    assert kinds.count(GAP) == 1 and kinds.count(DENSE) == 1
    assert kinds.count(CONV) == 9  # stem plus two per residual block


@pytest.mark.parametrize("name", PRESETS)
def test_all_kernels_are_3x3(name):
    m = build_preset(name)
    for i, layer in enumerate(m.layers):
        if layer.kind == CONV:
            assert m.params[i]["weight"].shape[2:] == (3, 3)


@pytest.mark.parametrize("name", PRESETS)
@pytest.mark.parametrize("size", [32, 64, 128])
@pytest.mark.parametrize("classes", [2, 4])
def test_presets_construct(name, size, classes):
    m = build_preset(name, (1, size, size), classes)
    m.validate()
    assert m.output_shapes()[-1] == (classes,)


@pytest.mark.parametrize("name", PRESETS)
def test_block_ids_non_decreasing_and_head_maximal(name):
    m = build_preset(name)
    ids = [l.block for l in m.layers]
    assert ids == sorted(ids)
    assert m.layers[-1].block == max(ids)
    assert m.last_conv_block() < max(ids)


def test_bad_preset_and_input():
    with pytest.raises(ModelError):
        build_preset("mini-inception")
    with pytest.raises(ModelError):
        build_preset("mini-vgg", (1, 48, 48))
    with pytest.raises(ModelError):
        build_preset("mini-vgg", (1, 16, 16))


def test_deterministic_init():
    a, b = build_preset("mini-vgg", seed=3), build_preset("mini-vgg", seed=3)
    assert a.parameter_digests() == b.parameter_digests()
    assert a.parameter_digests() != build_preset("mini-vgg", seed=4).parameter_digests()


@pytest.mark.parametrize("name", ["mini-alex", "mini-vgg", "mini-res"])
def test_init_bounds(name):
    # He-uniform on hidden layers, Glorot-uniform on the head; biases start at zero
    m = build_preset(name)
    last = len(m.layers) - 1
    for i, layer in enumerate(m.layers):
        if layer.has_params():
            fan_in, fan_out = layer.fans()
            limit = np.sqrt(6.0 / (fan_in + fan_out)) if i == last else np.sqrt(6.0 / fan_in)
            w = m.params[i]["weight"].data
            assert np.abs(w).max() <= limit
            if w.size >= 200:  # max of n uniforms falls below 0.9*limit with probability 0.9**n
                assert np.abs(w).max() > 0.9 * limit
            assert not m.params[i]["bias"].data.any()


def test_replace_head_keeps_body_bit_identical():
    m = build_preset("mini-vgg", num_classes=2, seed=1)
    new = replace_head(m, 4, seed=9)
    head = len(m.layers) - 1
    before, after = m.parameter_digests(), new.parameter_digests()
    for name in before:
        if not name.startswith(f"layer{head}."):
            assert before[name] == after[name]
    assert new.layers[-1].out_features == 4 and new.num_classes == 4
    assert m.num_classes == 2  # input untouched


def test_replace_head_same_count_reinitialises():
    m = build_preset("mini-alex", seed=1)
    new = replace_head(m, 2, seed=7)
    head = len(m.layers) - 1
    assert [(l.kind, l.block) for l in m.layers] == [(l.kind, l.block) for l in new.layers]
    assert not np.array_equal(m.params[head]["weight"].data, new.params[head]["weight"].data)


@pytest.mark.parametrize("name", PRESETS)
def test_replace_head_parameter_delta(name):
    m = build_preset(name, num_classes=2)
    fan_in = m.layers[-1].in_features
    assert replace_head(m, 4).parameter_count() - m.parameter_count() == (4 - 2) * (fan_in + 1)


def test_replace_head_preserves_penultimate_activations():
    m = build_preset("mini-res", seed=2)
    new = replace_head(m, 4)
    x = np.random.default_rng(0).uniform(0, 1, (3, 1, 64, 64)).astype(np.float32)
    stop = len(m.layers) - 1
    with no_grad():
        np.testing.assert_array_equal(m.forward(x, stop=stop).data, new.forward(x, stop=stop).data)


def test_set_trainable_thresholds():
    m = build_preset("mini-vgg")
    last = m.last_conv_block()
    frozen = set_trainable_from_block(m, last)
    for layer in frozen.layers:
        assert layer.trainable == (layer.block >= last)
    assert all(l.trainable for l in set_trainable_from_block(m, 0).layers)
    none = set_trainable_from_block(m, max(m.block_ids()) + 1)
    assert none.parameter_count(trainable_only=True) == 0
    with pytest.raises(ModelError):
        set_trainable_from_block(m, 42)


@given(st.sampled_from(PRESETS), st.integers(0, 6))
def test_trainable_flags_partition_parameters(name, threshold):
    m = build_preset(name, (1, 32, 32))
    threshold = min(threshold, max(m.block_ids()) + 1)
    if threshold not in m.block_ids() and threshold != max(m.block_ids()) + 1:
        return
    m = set_trainable_from_block(m, threshold)
    params = m.named_parameters()
    frozen = {n for n, _, tr in params if not tr}
    trainable = {n for n, _, tr in params if tr}
    assert frozen.isdisjoint(trainable)
    assert frozen | trainable == {n for n, _, _ in params}
    assert m.parameter_count(True) == sum(t.size for _, t, tr in params if tr)


def test_zero_weight_model_gives_zero_logits():
    m = build_preset("mini-vgg")
    for _, t, _ in m.named_parameters():
        t.data[...] = 0
    out = forward(m, np.random.default_rng(0).uniform(0, 1, (2, 1, 64, 64)).astype(np.float32))
    assert not out.data.any()


@pytest.mark.parametrize("name", PRESETS)
def test_single_and_batched_forward_agree(name):
    m = build_preset(name, (1, 32, 32), 4)
    x = np.random.default_rng(1).uniform(0, 1, (3, 1, 32, 32)).astype(np.float32)
    with no_grad():
        batched = forward(m, x).data
        rows = np.concatenate([forward(m, x[i:i + 1]).data for i in range(3)])
    # float32 BLAS may reassociate differently per batch size: allow a few ulps at the logit scale
    assert np.abs(batched - rows).max() <= 1e-6 * max(1.0, np.abs(batched).max())


def test_forward_matches_layer_by_layer_composition():
    m = build_preset("mini-res", (1, 32, 32), 4, seed=5)
    x = np.random.default_rng(2).uniform(0, 1, (2, 1, 32, 32))
    p = {i: {k: Tensor(t.data.astype(np.float64)) for k, t in d.items()} for i, d in m.params.items()}
    acts = {}
    a = Tensor(x)
    for i, layer in enumerate(m.layers):
        if layer.kind == CONV:
            a = ops.conv2d(a, p[i]["weight"], p[i]["bias"], layer.stride, layer.padding)
        elif layer.kind == DENSE:
            a = ops.dense(a, p[i]["weight"], p[i]["bias"])
        elif layer.kind == "residual-add":
            a = ops.add(a, acts[layer.source])
        else:
            a = {"relu": ops.relu, "maxpool": ops.maxpool2d, GAP: ops.global_avg_pool,
                 "flatten": ops.flatten}[layer.kind](a)
        acts[i] = a
    with no_grad():
        got = forward(m, x.astype(np.float32)).data
    np.testing.assert_allclose(got, a.data, atol=1e-4)


def test_forward_shape_mismatch():
    m = build_preset("mini-vgg")
    with pytest.raises(ShapeError):
        forward(m, np.zeros((1, 1, 32, 32), np.float32))


def test_last_conv_activations_are_retained():
    m = build_preset("mini-vgg")
    acts = {}
    forward_out = m.forward(np.zeros((1, 1, 64, 64), np.float32), acts=acts)
    assert acts[m.cam_layer_index()].shape == (1, 64, 8, 8)
    assert forward_out.shape == (1, 2)
