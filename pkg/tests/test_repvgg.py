import math
import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from reparamquant import ops
from reparamquant.ops import BN_EPS, BnState
from reparamquant.repvgg import (
    MergedConv,
    MergeWarning,
    NetConfig,
    RepVggBlockParams,
    RepVggNet,
    bake_oabn,
    block_forward,
    convert_to_vgg,
    deployed_forward,
    fuse_bn_into_conv,
    identity_blocks,
    identity_to_conv,
    merge_block,
    net_forward,
    oabn_clip_gamma,
    pad_1x1_to_3x3,
)
from reparamquant.tensor import Tensor, backward, no_grad

from oracles import bn_eval, conv2d_loops


def randomize_bn(bn: BnState, rng, gamma_scale=1.0):
    c = bn.channels
    bn.gamma.data[:] = rng.normal(0, gamma_scale, c)
    bn.beta.data[:] = rng.normal(0, 0.5, c)
    bn.running_mean = rng.normal(0, 0.5, c).astype(np.float32)
    bn.running_var = rng.uniform(0.2, 2.0, c).astype(np.float32)
    bn.tracked = 10


def random_block(cin, cout, stride, seed):
    rng = np.random.default_rng(seed)
    p = RepVggBlockParams.create(cin, cout, stride, rng)
    for bn in p.bn_states():
        randomize_bn(bn, rng)
    return p


def random_net(config=NetConfig(depths=(1, 2), widths=(4, 6), strides=(1, 2), num_classes=5), seed=0):
    net = RepVggNet.create(config, seed)
    rng = np.random.default_rng(seed + 100)
    for b in net.blocks:
        for bn in b.bn_states():
            randomize_bn(bn, rng)
    return net


def eval_block(x, p):
    with no_grad():
        return block_forward(Tensor(x), p, "eval").data


def deploy_block(x, m):
    with no_grad():
        return block_forward(Tensor(x), m, "deploy").data


# ---------------------------------------------------------------------------
# OABN clip
# ---------------------------------------------------------------------------

def test_clip_examples():
    np.testing.assert_array_equal(oabn_clip_gamma([0.5], [1.0], 1.0), [0.5])
    np.testing.assert_array_equal(oabn_clip_gamma([3.0, -3.0], [1.0, 1.0], 2.0), [2.0, -2.0])
    assert oabn_clip_gamma([0.9], [0.04], 5.0)[0] == pytest.approx(0.2, abs=1e-7)


def test_clip_rejects_bad_inputs():
    for k in (0.0, -1.0):
        with pytest.raises(ValueError, match="positive"):
            oabn_clip_gamma([1.0], [1.0], k)
    with pytest.raises(ValueError):
        oabn_clip_gamma([1.0, 2.0], [1.0], 1.0)
    with pytest.raises(ValueError):
        oabn_clip_gamma([1.0], [-1.0], 1.0)


def test_clip_std_bound_switch():
    assert oabn_clip_gamma([0.9], [0.04], 2.0, bound="std")[0] == pytest.approx(0.4, abs=1e-7)
    with pytest.raises(ValueError):
        oabn_clip_gamma([0.9], [0.04], 2.0, bound="sigma")


def test_clip_leaves_input_untouched():
    g = np.array([5.0, -5.0], dtype=np.float32)
    oabn_clip_gamma(g, np.ones(2), 1.0)
    np.testing.assert_array_equal(g, [5.0, -5.0])


finite32 = st.floats(-100, 100, width=32)


@given(
    st.lists(st.tuples(finite32, st.floats(0, 10, width=32), finite32), min_size=1, max_size=20),
    st.floats(0.01, 10),
)
def test_clip_is_idempotent_and_monotone(rows, k):
    g = np.array([r[0] for r in rows], dtype=np.float32)
    var = np.array([r[1] for r in rows], dtype=np.float32)
    g2 = np.array([r[2] for r in rows], dtype=np.float32)
    c = oabn_clip_gamma(g, var, k)
    np.testing.assert_array_equal(oabn_clip_gamma(c, var, k), c)
    band = np.float32(k * var.astype(np.float64))
    assert np.all(np.abs(c) <= band * (1 + 1e-6))
    c2 = oabn_clip_gamma(g2, var, k)
    # order-preserving per channel
    assert np.all((g <= g2) <= (c <= c2))


# ---------------------------------------------------------------------------
# block forward
# ---------------------------------------------------------------------------

def test_stride2_block_has_no_identity_branch():
    p = random_block(3, 3, 2, seed=1)
    assert p.bn_id is None
    x = np.random.default_rng(2).normal(size=(2, 3, 6, 6)).astype(np.float32)
    expect = np.maximum(
        bn_eval(conv2d_loops(x, p.conv3.data, stride=2, padding=1), p.bn3.gamma.data, p.bn3.beta.data,
                p.bn3.running_mean, p.bn3.running_var, BN_EPS)
        + bn_eval(conv2d_loops(x, p.conv1.data, stride=2, padding=0), p.bn1.gamma.data, p.bn1.beta.data,
                  p.bn1.running_mean, p.bn1.running_var, BN_EPS),
        0,
    )
    np.testing.assert_allclose(eval_block(x, p), expect, atol=1e-5)


def test_identity_branch_presence_rule():
    rng = np.random.default_rng(0)
    assert RepVggBlockParams.create(4, 4, 1, rng).bn_id is not None
    assert RepVggBlockParams.create(4, 6, 1, rng).bn_id is None
    assert RepVggBlockParams.create(4, 4, 2, rng).bn_id is None
    with pytest.raises(ValueError):
        RepVggBlockParams.create(4, 4, 3, rng)


def test_zero_input_zero_beta_gives_zero():
    p = random_block(4, 4, 1, seed=3)
    for bn in p.bn_states():
        bn.beta.data[:] = 0
        bn.running_mean[:] = 0
    np.testing.assert_array_equal(eval_block(np.zeros((1, 4, 5, 5)), p), 0)


def test_deploy_mode_needs_merged_block():
    p = random_block(2, 2, 1, seed=4)
    with pytest.raises(ValueError, match="merge"):
        block_forward(Tensor(np.zeros((1, 2, 3, 3))), p, "deploy")
    with pytest.raises(ValueError):
        block_forward(Tensor(np.zeros((1, 2, 3, 3))), merge_block(p), "train")


def test_oabn_forward_uses_clipped_gamma_and_grads_reach_raw_gamma():
    rng = np.random.default_rng(5)
    p = random_block(3, 3, 1, seed=5)
    p.bn_id.gamma.data[:] = [4.0, -4.0, 0.01]
    p.oabn_k = 0.5
    x = rng.normal(size=(8, 3, 4, 4)).astype(np.float32)
    w = rng.normal(size=(8, 3, 4, 4)).astype(np.float32)
    backward(ops.reduce_sum(ops.mul(block_forward(Tensor(x), p, "train"), Tensor(w))))
    assert np.all(p.bn_id.gamma.grad != 0)
    np.testing.assert_array_equal(p.bn_id.gamma.data, np.float32([4.0, -4.0, 0.01]))


def test_oabn_eval_matches_clipped_merge():
    p = random_block(4, 4, 1, seed=6)
    p.bn_id.gamma.data[:] = [5.0, -5.0, 0.1, 2.0]
    p.oabn_k = 0.5
    x = np.random.default_rng(7).normal(size=(3, 4, 6, 6)).astype(np.float32)
    np.testing.assert_allclose(deploy_block(x, merge_block(p)), eval_block(x, p), atol=1e-4)


def test_k_inf_matches_plain_training_bit_for_bit():
    rng = np.random.default_rng(8)
    x = rng.normal(size=(16, 3, 6, 6)).astype(np.float32)
    y = rng.integers(0, 5, 16)
    cfg = NetConfig(depths=(2,), widths=(4,), strides=(1,), num_classes=5)
    nets = [RepVggNet.create(cfg, seed=1) for _ in range(2)]
    nets[1].blocks[1].oabn_k = math.inf
    nets[1].blocks[0].oabn_k = math.inf
    vel = [{}, {}]
    for step in range(3):
        for net, v in zip(nets, vel):
            loss = ops.softmax_cross_entropy(net_forward(net, Tensor(x), "train"), y)
            backward(loss)
            ops.sgd_step(net.parameters(), 0.1, 0.9, 1e-4, v)
    for a, b in zip(nets[0].parameters(), nets[1].parameters()):
        assert a.data.tobytes() == b.data.tobytes()
    for ba, bb in zip(nets[0].blocks, nets[1].blocks):
        for sa, sb in zip(ba.bn_states(), bb.bn_states()):
            assert sa.running_var.tobytes() == sb.running_var.tobytes()


# ---------------------------------------------------------------------------
# fusion algebra
# ---------------------------------------------------------------------------

def test_fuse_identity_bn():
    bn = BnState.create(2)
    bn.running_var[:] = 1 - BN_EPS
    k = np.random.default_rng(9).normal(size=(2, 3, 3, 3)).astype(np.float32)
    fk, fb = fuse_bn_into_conv(k, bn)
    np.testing.assert_allclose(fk, k, rtol=1e-6)
    np.testing.assert_array_equal(fb, 0)


def test_fuse_hand_example():
    bn = BnState.create(1)
    bn.gamma.data[:] = 2
    bn.beta.data[:] = 1
    bn.running_mean[:] = 3
    bn.running_var[:] = 4 - BN_EPS
    k = np.full((1, 1, 3, 3), 0.7, dtype=np.float32)
    fk, fb = fuse_bn_into_conv(k, bn)
    np.testing.assert_allclose(fk, k, rtol=1e-6)
    assert fb[0] == pytest.approx(-2.0, abs=1e-6)


def test_fuse_matches_conv_then_bn():
    rng = np.random.default_rng(10)
    bn = BnState.create(4)
    randomize_bn(bn, rng)
    k = rng.normal(size=(4, 3, 3, 3)).astype(np.float32)
    x = rng.normal(size=(2, 3, 5, 5)).astype(np.float32)
    ref = bn_eval(conv2d_loops(x, k, padding=1), bn.gamma.data, bn.beta.data, bn.running_mean, bn.running_var, bn.eps)
    fk, fb = fuse_bn_into_conv(k, bn)
    np.testing.assert_allclose(conv2d_loops(x, fk, fb, padding=1), ref, atol=1e-5)


def test_fuse_shape_check():
    with pytest.raises(ValueError):
        fuse_bn_into_conv(np.zeros((3, 2, 3, 3)), BnState.create(4))


def test_pad_examples():
    out = pad_1x1_to_3x3(np.full((1, 1, 1, 1), 5.0))
    expect = np.zeros((1, 1, 3, 3))
    expect[0, 0, 1, 1] = 5
    np.testing.assert_array_equal(out, expect)
    np.testing.assert_array_equal(pad_1x1_to_3x3(np.zeros((2, 3, 1, 1))), np.zeros((2, 3, 3, 3)))
    with pytest.raises(ValueError):
        pad_1x1_to_3x3(np.zeros((2, 3, 3, 3)))


def test_padded_conv_equals_1x1_conv():
    rng = np.random.default_rng(11)
    k = rng.normal(size=(4, 3, 1, 1)).astype(np.float32)
    x = rng.normal(size=(2, 3, 5, 5)).astype(np.float32)
    for stride in (1, 2):
        a = ops.conv2d(Tensor(x), Tensor(k), stride=stride, padding=0).data
        b = ops.conv2d(Tensor(x), Tensor(pad_1x1_to_3x3(k)), stride=stride, padding=1).data
        np.testing.assert_allclose(a, b, atol=1e-6)


def test_identity_to_conv_examples():
    bn = BnState.create(3)
    bn.running_var[:] = 1 - BN_EPS
    k, b = identity_to_conv(bn, 3)
    dirac = np.zeros((3, 3, 3, 3))
    dirac[np.arange(3), np.arange(3), 1, 1] = 1
    np.testing.assert_allclose(k, dirac, atol=1e-7)
    np.testing.assert_array_equal(b, 0)

    bn = BnState.create(2)
    bn.gamma.data[:] = [2, 4]
    bn.running_var[:] = [1 - BN_EPS, 4 - BN_EPS]
    k, _ = identity_to_conv(bn, 2)
    np.testing.assert_allclose(k[[0, 1], [0, 1], 1, 1], [2.0, 2.0], rtol=1e-6)
    with pytest.raises(ValueError):
        identity_to_conv(bn, 3)


def test_identity_to_conv_matches_eval_bn():
    rng = np.random.default_rng(12)
    bn = BnState.create(4)
    randomize_bn(bn, rng)
    x = rng.normal(size=(2, 4, 5, 5)).astype(np.float32)
    k, b = identity_to_conv(bn, 4)
    ref = bn_eval(x, bn.gamma.data, bn.beta.data, bn.running_mean, bn.running_var, bn.eps)
    np.testing.assert_allclose(conv2d_loops(x, k, b, padding=1), ref, atol=1e-5)


# ---------------------------------------------------------------------------
# merge
# ---------------------------------------------------------------------------

def test_merge_stride2_has_no_identity_term():
    p = random_block(3, 3, 2, seed=13)
    m = merge_block(p)
    k3, b3 = fuse_bn_into_conv(p.conv3, p.bn3)
    k1, b1 = fuse_bn_into_conv(p.conv1, p.bn1)
    np.testing.assert_allclose(m.kernel, k3 + pad_1x1_to_3x3(k1), atol=1e-6)
    np.testing.assert_allclose(m.bias, b3 + b1, atol=1e-6)
    assert m.stride == 2


def test_merge_zero_convs_gives_dirac():
    p = random_block(3, 3, 1, seed=14)
    p.conv3.data[:] = 0
    p.conv1.data[:] = 0
    bn = p.bn_id
    bn.gamma.data[:] = 1
    bn.beta.data[:] = 0
    bn.running_mean[:] = 0
    bn.running_var[:] = 1 - BN_EPS
    for other in (p.bn3, p.bn1):
        other.beta.data[:] = 0
        other.running_mean[:] = 0
    dirac = np.zeros((3, 3, 3, 3))
    dirac[np.arange(3), np.arange(3), 1, 1] = 1
    np.testing.assert_allclose(merge_block(p).kernel, dirac, atol=1e-7)


@settings(max_examples=25, deadline=None)
@given(
    cin=st.integers(1, 6), cout=st.integers(1, 6), stride=st.sampled_from([1, 2]),
    same=st.booleans(), hw=st.integers(3, 8), seed=st.integers(0, 2**16),
)
def test_merge_equivalence(cin, cout, stride, same, hw, seed):
    if same:
        cout = cin
    p = random_block(cin, cout, stride, seed)
    x = np.random.default_rng(seed + 1).normal(size=(10, cin, hw, hw)).astype(np.float32)
    diff = np.abs(deploy_block(x, merge_block(p)) - eval_block(x, p)).max()
    assert diff <= 1e-4


def test_oabn_bound_on_class_a_identity_term():
    p = random_block(5, 5, 1, seed=15)
    p.bn_id.gamma.data[:] = np.array([10, -10, 0.3, 3, -0.01], dtype=np.float32)
    k = 0.5
    p.oabn_k = k
    with_id = merge_block(p).kernel
    k3, _ = fuse_bn_into_conv(p.conv3, p.bn3)
    k1, _ = fuse_bn_into_conv(p.conv1, p.bn1)
    idx = np.arange(5)
    id_term = with_id[idx, idx, 1, 1].astype(np.float64) - (k3 + pad_1x1_to_3x3(k1))[idx, idx, 1, 1]
    var = p.bn_id.running_var.astype(np.float64)
    assert np.all(np.abs(id_term) <= k * var / np.sqrt(var + BN_EPS) + 1e-6)


def test_merge_warns_on_untrained_stats():
    p = RepVggBlockParams.create(2, 2, 1, np.random.default_rng(0))
    with pytest.warns(MergeWarning):
        m = merge_block(p)
    assert np.all(np.isfinite(m.kernel))


def test_merge_is_silent_on_trained_stats():
    p = random_block(2, 2, 1, seed=16)
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        merge_block(p)


def test_merge_rejects_non_finite():
    p = random_block(2, 2, 1, seed=17)
    p.conv3.data[0, 0, 0, 0] = np.inf
    with pytest.raises(FloatingPointError):
        merge_block(p)


# ---------------------------------------------------------------------------
# networks
# ---------------------------------------------------------------------------

def test_convert_counts_layers():
    one = random_net(NetConfig(depths=(1,), widths=(4,), strides=(1,)))
    assert len(convert_to_vgg(one).layers) == 1
    net = random_net()
    d = convert_to_vgg(net)
    assert len(d.layers) == len(net.blocks) == 3
    assert all(isinstance(l, MergedConv) for l in d.layers)
    np.testing.assert_array_equal(d.stem.kernel, net.stem_weight.data)
    np.testing.assert_array_equal(d.head_weight, net.head_weight.data)


def test_deployed_predictions_agree_with_train_structure():
    net = random_net(seed=3)
    x = np.random.default_rng(18).normal(size=(100, 3, 8, 8)).astype(np.float32)
    with no_grad():
        ref = net_forward(net, Tensor(x), "eval").data
    dep = deployed_forward(convert_to_vgg(net), x)
    np.testing.assert_allclose(dep, ref, atol=1e-4)
    np.testing.assert_array_equal(dep.argmax(axis=1), ref.argmax(axis=1))


def test_net_structure_and_fp32_layers():
    net = random_net()
    assert net.fp32_always == ("stem", "head")
    assert identity_blocks(net) == [0, 2]
    net.validate()
    net.head_weight = Tensor(np.zeros((5, 3)))
    with pytest.raises(ValueError, match="head"):
        net.validate()


def test_net_config_validation():
    with pytest.raises(ValueError):
        NetConfig(depths=(1, 1), widths=(4,), strides=(1,))
    with pytest.raises(ValueError):
        NetConfig(depths=(0,), widths=(4,), strides=(1,))
    with pytest.raises(ValueError):
        NetConfig(depths=(1,), widths=(4,), strides=(3,))
    cfg = NetConfig(depths=(2, 1), widths=(8, 4), strides=(2, 1), stem_stride=2)
    assert NetConfig.from_dict(cfg.to_dict()) == cfg


def test_bake_oabn_freezes_the_clipped_forward():
    net = random_net(seed=4)
    for b in net.blocks:
        if b.bn_id is not None:
            b.bn_id.gamma.data[:] = 5.0
            b.oabn_k = 0.5
    x = np.random.default_rng(19).normal(size=(4, 3, 8, 8)).astype(np.float32)
    with no_grad():
        before = net_forward(net, Tensor(x), "eval").data
    bake_oabn(net)
    assert all(b.oabn_k is None for b in net.blocks)
    with no_grad():
        after = net_forward(net, Tensor(x), "eval").data
    np.testing.assert_array_equal(before, after)
