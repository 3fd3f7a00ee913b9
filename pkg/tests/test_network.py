import math

import numpy as np
import pytest

from decompnet import checkpoint, linalg
from decompnet import network as net
from decompnet.errors import InvalidInputError, InvalidRankError, ParseError
from decompnet.linalg import ConvKernelShape, dematricize
from decompnet.svdgrad import ClipConfig
from oracles import fd_grad, naive_conv, welford


def small_conv_net(rng, bn=True, pool="max", decomposition="spatial"):
    layers = [
        net.conv(3, 2, 4, padding=1, decomposition=decomposition, batchnorm=bn, pool=pool),
        net.conv(2, 4, 3, stride=2, decomposition="channel"),
        net.dense(3, 3, "softmax"),
    ]
    return net.NetworkModel.build(layers, (6, 6, 2), rng)


# --- primitives ---


@pytest.mark.parametrize("stride,pad", [(1, 0), (1, 1), (2, 0), (2, 1)])
def test_im2col_conv_matches_naive(stride, pad):
    rng = np.random.default_rng(0)
    x = rng.standard_normal((2, 5, 6, 3))
    kern = rng.standard_normal((3, 2, 3, 4))
    shape = ConvKernelShape(3, 2, 3, 4, stride)
    cols = net.im2col(x, 3, 2, stride, pad)
    oh = (5 + 2 * pad - 3) // stride + 1
    ow = (6 + 2 * pad - 2) // stride + 1
    got = (cols @ linalg.matricize(kern, shape, "channel")).reshape(2, oh, ow, 4)
    np.testing.assert_allclose(got, naive_conv(x, kern, stride, pad), atol=1e-12)


def test_col2im_is_adjoint_of_im2col():
    rng = np.random.default_rng(1)
    x = rng.standard_normal((2, 5, 5, 2))
    cols = net.im2col(x, 3, 3, 2, 1)
    c = rng.standard_normal(cols.shape)
    lhs = np.sum(cols * c)
    rhs = np.sum(x * net.col2im(c, x.shape, 3, 3, 2, 1))
    assert lhs == pytest.approx(rhs, rel=1e-12)


def test_cross_entropy_examples():
    loss, grad = net.cross_entropy(np.zeros((4, 5)), np.array([0, 1, 2, 3]))
    assert loss == pytest.approx(math.log(5))
    np.testing.assert_allclose(grad.sum(axis=1), 0.0, atol=1e-15)
    loss, _ = net.cross_entropy(np.array([[1000.0, 0.0]]), np.array([0]))
    assert loss == pytest.approx(0.0, abs=1e-12)


def test_softmax_rows_sum_to_one():
    p = net.softmax(np.random.default_rng(2).standard_normal((6, 4)) * 50)
    np.testing.assert_allclose(p.sum(axis=1), 1.0)


# --- construction ---


def test_shape_inference_and_errors():
    m = small_conv_net(np.random.default_rng(3))
    assert m.output_shape == (3,)
    assert m.full_ranks == (min(3 * 2, 3 * 4), min(2 * 2 * 4, 3), 3)
    assert m.output_extent(0) == (6, 6) and m.output_extent(1) == (1, 1)
    with pytest.raises(InvalidInputError):
        net.NetworkModel.build([net.dense(5, 3)], (4,), np.random.default_rng(0))
    with pytest.raises(InvalidInputError):
        net.NetworkModel.build([net.dense(4, 3, "softmax"), net.dense(3, 2)], (4,), np.random.default_rng(0))
    with pytest.raises(InvalidInputError):
        net.NetworkModel.build([net.conv(5, 1, 2)], (3, 3, 1), np.random.default_rng(0))


def test_layer_spec_roundtrip():
    for spec in small_conv_net(np.random.default_rng(4)).layers:
        assert net.LayerSpec.from_dict(spec.to_dict()) == spec


# --- forward ---


def test_dense_forward_by_hand():
    rng = np.random.default_rng(5)
    m = net.mlp([3, 4, 2], rng)
    m.theta[0]["bias"][:] = rng.standard_normal(4)
    x = rng.standard_normal((5, 3))
    h = np.maximum(x @ m.weights[0] + m.theta[0]["bias"], 0)
    logits = h @ m.weights[1] + m.theta[1]["bias"]
    np.testing.assert_allclose(net.forward_full(m, x).logits, logits, atol=1e-14)


def test_spatial_conv_executes_the_same_kernel():
    rng = np.random.default_rng(6)
    m = small_conv_net(rng, bn=False, pool="avg")
    x = rng.standard_normal((2, 6, 6, 2))
    tr = net.forward_full(m, x)
    kern = dematricize(m.weights[0], m.layers[0].kernel, "spatial")
    np.testing.assert_allclose(tr.ys[0], naive_conv(x, kern, 1, 1), atol=1e-12)


def test_full_ranks_reproduce_full_forward_exactly():
    rng = np.random.default_rng(7)
    m = small_conv_net(rng)
    x = rng.standard_normal((3, 6, 6, 2))
    a = net.forward_full(m, x, bn="batch").logits
    b = net.forward_lowrank(m, m.full_ranks, x, bn="batch").logits
    assert np.array_equal(a, b)


def test_bad_ranks_rejected():
    m = net.mlp([3, 4, 2], np.random.default_rng(8))
    x = np.zeros((1, 3))
    for bad in [(1,), (0, 1), (4, 1), (1, 3)]:
        with pytest.raises(InvalidRankError):
            net.forward_lowrank(m, bad, x)


def test_batch_shape_checked():
    m = net.mlp([3, 2], np.random.default_rng(9))
    with pytest.raises(InvalidInputError):
        net.forward_full(m, np.zeros((2, 4)))
    with pytest.raises(InvalidInputError):
        net.forward_full(m, np.full((1, 3), np.inf))


# --- gradients ---


def _joint_fd_case(rng, lam, pool, decomposition):
    m = small_conv_net(rng, bn=True, pool=pool, decomposition=decomposition)
    for th in m.theta:
        for v in th.values():
            v += 0.1 * rng.standard_normal(v.shape)
    x = rng.standard_normal((4, 6, 6, 2))
    y = rng.integers(0, 3, size=4)
    ranks = (3, 2, 2)
    eta = 1e-3
    # finite differences see the unclipped map, so use a clip that cannot bind
    clip = ClipConfig(1 - 1e-15)
    res = net.joint_loss_and_grads(m, ranks, x, y, lam, eta, clip, rebalance=False)

    def loss():
        return net.joint_loss_and_grads(m, ranks, x, y, lam, eta, clip, rebalance=False).loss

    return m, res, loss


@pytest.mark.parametrize("lam", [0.0, 0.5, 1.0])
@pytest.mark.parametrize("pool,decomposition", [("max", "spatial"), ("avg", "channel")])
def test_joint_gradients_match_finite_differences(lam, pool, decomposition):
    rng = np.random.default_rng(10)
    m, res, loss = _joint_fd_case(rng, lam, pool, decomposition)
    for idx, w in enumerate(m.weights):
        fd = fd_grad(loss, w)
        np.testing.assert_allclose(res.weight_grads[idx], fd, atol=1e-7, rtol=1e-5)
    for idx, th in enumerate(m.theta):
        for k, v in th.items():
            fd = fd_grad(loss, v)
            np.testing.assert_allclose(res.theta_grads[idx][k], fd, atol=1e-7, rtol=1e-5)


def test_rebalanced_weight_term_has_full_norm():
    rng = np.random.default_rng(11)
    m = net.mlp([6, 8, 3], rng)
    x = rng.standard_normal((10, 6))
    y = rng.integers(0, 3, 10)
    res = net.joint_loss_and_grads(m, (2, 1), x, y, 0.5, 0.0)
    ref = net.joint_loss_and_grads(m, (2, 1), x, y, 0.5, 0.0, rebalance=False)
    gf = net.joint_loss_and_grads(m, None, x, y, 0.0, 0.0).weight_grads
    for idx in range(2):
        g_low = (ref.weight_grads[idx] - 0.5 * gf[idx]) / 0.5
        lam_w = res.lambdas[idx]
        assert lam_w * np.linalg.norm(g_low) == pytest.approx(0.5 * np.linalg.norm(gf[idx]), rel=1e-12)


def test_lambda_zero_skips_svd():
    rng = np.random.default_rng(12)
    m = net.mlp([4, 5, 2], rng)
    before = linalg.svd_call_count()
    res = net.joint_loss_and_grads(m, None, rng.standard_normal((3, 4)), np.array([0, 1, 0]), 0.0, 1e-4)
    assert linalg.svd_call_count() == before
    assert math.isnan(res.loss_low)


def test_joint_validates_lambda():
    m = net.mlp([2, 2], np.random.default_rng(0))
    with pytest.raises(InvalidInputError):
        net.joint_loss_and_grads(m, (1,), np.zeros((1, 2)), [0], 1.5, 0.0)


# --- batch norm ---


def test_recalibrate_matches_streaming_statistics():
    rng = np.random.default_rng(13)
    m = net.mlp([4, 6, 5, 3], rng, batchnorm=True)
    data = rng.standard_normal((57, 4))
    net.recalibrate_bn(m, (2, 2, 3), data)
    assert m.bn_ranks == (2, 2, 3)
    mats, _ = net.lowrank_weights(m, (2, 2, 3))
    y0 = data @ mats[0] + m.theta[0]["bias"]
    mean, var = welford(y0)
    np.testing.assert_allclose(m.bn_stats[0][0], mean, atol=1e-12)
    np.testing.assert_allclose(m.bn_stats[0][1], var, atol=1e-12)
    # second layer measured after the first is normalised with its final stats
    h = np.maximum(m.theta[0]["gamma"] * (y0 - mean) / np.sqrt(var + net.BN_EPS) + m.theta[0]["beta"], 0)
    mean1, var1 = welford(h @ mats[1] + m.theta[1]["bias"])
    np.testing.assert_allclose(m.bn_stats[1][0], mean1, atol=1e-12)
    np.testing.assert_allclose(m.bn_stats[1][1], var1, atol=1e-12)


def test_recalibrate_full_rank_key_and_empty_data():
    m = net.mlp([3, 4, 2], np.random.default_rng(14), batchnorm=True)
    net.recalibrate_bn(m, m.full_ranks, np.ones((5, 3)))
    assert m.bn_ranks is None
    with pytest.raises(InvalidInputError):
        net.recalibrate_bn(m, None, np.zeros((0, 3)))


def test_stored_stats_required():
    m = net.mlp([3, 4, 2], np.random.default_rng(15), batchnorm=True)
    with pytest.raises(InvalidInputError):
        net.forward_full(m, np.ones((2, 3)), bn="stored")


# --- checkpoints ---


def test_checkpoint_roundtrip_is_bytewise_stable(tmp_path):
    rng = np.random.default_rng(16)
    m = small_conv_net(rng)
    m.meta = {"seed": 3, "note": "x"}
    net.recalibrate_bn(m, (2, 2, 2), rng.standard_normal((5, 6, 6, 2)))
    raw = checkpoint.to_bytes(m)
    back = checkpoint.from_bytes(raw)
    assert checkpoint.to_bytes(back) == raw
    assert back.layers == m.layers and back.bn_ranks == (2, 2, 2) and back.meta == m.meta
    for a, b in zip(m.weights, back.weights):
        assert np.array_equal(a, b)
    path = tmp_path / "m.dcnt"
    checkpoint.save_model(m, path)
    assert path.read_bytes()[:4] == b"DCNT"
    x = rng.standard_normal((2, 6, 6, 2))
    assert np.array_equal(net.forward_full(m, x).logits, net.forward_full(checkpoint.load_model(path), x).logits)


def test_checkpoint_corruption_reports_offsets():
    raw = checkpoint.to_bytes(net.mlp([2, 3, 2], np.random.default_rng(17)))
    with pytest.raises(ParseError, match="offset 0"):
        checkpoint.from_bytes(b"XXXX" + raw[4:])
    with pytest.raises(ParseError, match="offset 4"):
        checkpoint.from_bytes(raw[:4] + b"\x09\x00\x00\x00" + raw[8:])
    with pytest.raises(ParseError, match="runs past end"):
        checkpoint.from_bytes(raw[:-8])
    with pytest.raises(ParseError, match="trailing"):
        checkpoint.from_bytes(raw + b"\x00")
    with pytest.raises(ParseError):
        checkpoint.from_bytes(raw[:6])
