import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from tofgs.deform import (DeformConfig, DeformNet, flow_offsets, interp_positions, normalized_time,
                          positional_encode, predict_offsets)


def test_encode_zero():
    e = positional_encode(np.zeros((1, 1)), 4)[0]
    np.testing.assert_array_equal(e, [0, 0, 1, 0, 1, 0, 1, 0, 1])


def test_encode_length_and_values():
    assert positional_encode(np.zeros((5, 3)), 10).shape == (5, 63)
    np.testing.assert_allclose(positional_encode(np.array([[0.5]]), 1)[0], [0.5, 1.0, 0.0], atol=1e-15)


def test_init_offsets_small():
    net = DeformNet(DeformConfig(), seed=0)
    x = np.random.default_rng(0).uniform(-10, 10, (500, 3))
    for t in (0.0, 0.3, 1.0):
        assert np.abs(predict_offsets(net, x, t)).max() < 1e-3
    assert np.abs(flow_offsets(net, x, 2, 6)).max() < 2e-3
    np.testing.assert_array_equal(net(x, 0.5), net(x, 0.5))


def test_init_statistics():
    cfg = DeformConfig(depth=3, width=64)
    net = DeformNet(cfg, seed=4)
    assert np.std(net.weights[-1]) < 3e-5
    assert all(np.all(b == 0) for b in net.biases)
    # Xavier-normal: var = 2 / (fan_in + fan_out)
    W = net.weights[1]
    assert np.std(W) == pytest.approx(np.sqrt(2.0 / (64 + 64)), rel=0.1)


def test_interp_examples():
    a, b = np.zeros(3), np.array([4.0, 0, 0])
    np.testing.assert_array_equal(interp_positions(a, b, 3, 3, 4), a)
    np.testing.assert_array_equal(interp_positions(a, b, 4, 3, 4), b)
    np.testing.assert_allclose(interp_positions(a, b, 3.5, 3, 4), [2, 0, 0])
    np.testing.assert_allclose(interp_positions(a, b, 3.25, 3, 4), [1, 0, 0])
    with pytest.raises(ValueError):
        interp_positions(a, b, 4.5, 3, 4)


@settings(max_examples=50, deadline=None)
@given(i1=st.integers(0, 20), j0=st.floats(0, 0.5))
def test_interp_affine(i1, j0):
    rng = np.random.default_rng(i1)
    a, b = rng.normal(size=(7, 3)), rng.normal(size=(7, 3))
    h = 0.25
    js = i1 + j0 + np.array([0, h, 2 * h])
    x = [interp_positions(a, b, j, i1, i1 + 1) for j in js]
    assert np.abs(x[0] - 2 * x[1] + x[2]).max() < 1e-9


def test_flow_offsets_boundary():
    net = DeformNet(DeformConfig(depth=1, width=8), seed=0)
    x = np.zeros((2, 3))
    assert flow_offsets(net, x, 5, 6) is None
    assert flow_offsets(net, x, 0, 6, backward=True) is None


def test_linear_in_time_net_gives_constant_flow():
    # zero hidden layers: output = W @ encoding + b, with the raw t entry driving a linear motion
    cfg = DeformConfig(depth=0, L_x=2, L_t=2)
    net = DeformNet(cfg, seed=0)
    W = np.zeros_like(net.weights[0])
    t_raw = 3 * (1 + 2 * cfg.L_x)     # index of the raw t component
    W[t_raw] = [0.6, -0.2, 0.1]
    net.weights[0] = W
    x = np.random.default_rng(1).normal(size=(4, 3))
    flows = [flow_offsets(net, x, i, 8) for i in range(7)]
    for f in flows:
        np.testing.assert_allclose(f, flows[0], atol=1e-15)
    np.testing.assert_allclose(flows[0][0], np.array([0.6, -0.2, 0.1]) / 8, atol=1e-15)


def _fd_check(net, x, t, w, h):
    out, cache = net.forward(x, t)
    grads, dx = net.backward(cache, w)
    errs = []
    for name, P in net.params().items():
        rng = np.random.default_rng(len(name))
        for k in rng.choice(P.size, size=min(10, P.size), replace=False):
            idx = np.unravel_index(k, P.shape)
            orig = P[idx]
            P[idx] = orig + h
            fp = np.sum(w * net(x, t))
            P[idx] = orig - h
            fm = np.sum(w * net(x, t))
            P[idx] = orig
            n = (fp - fm) / (2 * h)
            errs.append(abs(n - grads[name][idx]) / max(abs(n), abs(grads[name][idx]), 1e-8))
    return max(errs), dx


def test_weight_gradients_match_fd():
    from tofgs.gradcheck import smooth_network
    x = np.random.default_rng(0).uniform(-1, 1, (6, 3))
    cfg = DeformConfig(depth=2, width=32, final_std=0.05)
    net = smooth_network(x, 2, 6, cfg, seed=0, margin=1e-3)
    t = normalized_time(2, 6)
    w = np.random.default_rng(1).normal(size=(6, 3))
    err, _ = _fd_check(net, x, t, w, 1e-4)
    assert err < 1e-3


def test_position_gradients_match_fd():
    # h = 1e-6: the top encoding frequency 2^9 pi / coord_scale makes h = 1e-4 truncation-dominated
    from tofgs.gradcheck import smooth_network
    x = np.random.default_rng(2).uniform(-1, 1, (6, 3))
    cfg = DeformConfig(depth=2, width=32, final_std=0.05)
    net = smooth_network(x, 2, 6, cfg, seed=0, margin=1e-3)
    t = normalized_time(2, 6)
    w = np.random.default_rng(3).normal(size=(6, 3))
    _, dx = net.backward(net.forward(x, t)[1], w)
    h = 1e-6
    num = np.zeros_like(x)
    for idx in np.ndindex(x.shape):
        xp, xm = x.copy(), x.copy()
        xp[idx] += h
        xm[idx] -= h
        num[idx] = (np.sum(w * net(xp, t)) - np.sum(w * net(xm, t))) / (2 * h)
    rel = np.abs(dx - num) / np.maximum(np.maximum(np.abs(dx), np.abs(num)), 1e-3 * np.abs(num).max())
    assert rel.max() < 1e-3


def test_checkpoint_round_trip(tmp_path):
    net = DeformNet(DeformConfig(depth=2, width=16, coord_scale=7.5), seed=3)
    net.save(tmp_path / "d.ckpt")
    back = DeformNet.load(tmp_path / "d.ckpt")
    assert back.cfg == net.cfg
    for k, v in net.params().items():
        np.testing.assert_array_equal(back.params()[k], v.astype(np.float32))


def test_coord_scale_must_be_positive():
    with pytest.raises(ValueError):
        DeformNet(DeformConfig(coord_scale=0.0))
