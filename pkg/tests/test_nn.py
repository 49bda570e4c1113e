import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from gearinsert.agents.dqn import q_net_spec
from gearinsert.core import SeedSpec
from gearinsert.nn import (AdamState, Conv2D, Dense, Flatten, MissingCacheError, NetSpec, Network,
                           ReLU, ShapeError, adam_step, build_network, grad_check)

# forward output of the default Q-network (seed 0, stream 0) on a linear ramp input
PINNED_Q = [-0.452335923910141, 0.05135823041200638, -0.3431534171104431, -0.06537529826164246,
            -0.08407442271709442, 0.12551593780517578, -0.3042648732662201, -0.14780424535274506]


def squared_loss(target):
    def loss(out):
        d = out - target
        return float(np.sum(d * d)), 2 * d
    return loss


def small_spec(rng):
    h = int(rng.integers(9, 14))
    c = int(rng.integers(1, 4))
    convs = ((int(rng.integers(2, 5)), 3, int(rng.integers(1, 3))), (int(rng.integers(2, 5)), 2, 1))
    return NetSpec((h, h, c), convs, (int(rng.integers(3, 7)),), int(rng.integers(1, 5)))


def random_net(spec, rng):
    # nonzero biases keep pre-activations off the ReLU kink, where central
    # differences are meaningless
    net = build_network(spec, rng)
    for name, p in net.named_params():
        if name.endswith(".b"):
            p[...] = rng.normal(0.0, 0.3, p.shape)
    return net


def test_pinned_forward_output():
    net = build_network(q_net_spec(), SeedSpec(0).stream(0))
    x = np.linspace(0, 1, 64 * 64 * 3, dtype=np.float32).reshape(64, 64, 3)
    np.testing.assert_allclose(net.forward(x)[0], PINNED_Q, rtol=1e-6, atol=1e-7)


def test_default_shapes():
    net = build_network(q_net_spec(), np.random.default_rng(0))
    shapes = []
    shape = net.input_shape
    for layer in net.layers:
        shape = layer.out_shape(shape)
        if isinstance(layer, Conv2D):
            shapes.append(shape)
    assert shapes == [(30, 30, 8), (14, 14, 16), (6, 6, 32)]
    assert net.output_shape == (8,)


def test_zero_weights_give_zero_output():
    net = build_network(q_net_spec(), np.random.default_rng(0))
    for _, p in net.named_params():
        p[...] = 0
    assert not np.any(net.forward(np.random.default_rng(1).random((2, 64, 64, 3))))


def test_identity_dense_layer():
    net = Network([Dense(4, 4)], (4,))
    net.layers[0].params["W"][...] = np.eye(4)
    x = np.arange(4, dtype=np.float32)
    np.testing.assert_array_equal(net.forward(x)[0], x)


def test_linear_squared_loss_closed_form():
    rng = np.random.default_rng(2)
    net = Network([Dense(3, 2)], (3,)).astype(np.float64)
    W = rng.standard_normal((3, 2))
    net.layers[0].params["W"][...] = W
    x, y = rng.standard_normal(3), rng.standard_normal(2)
    out = net.forward(x)
    grads = net.backward(2 * (out - y))
    # dense stores W as (in, out), so the closed form 2(Wx - y)x^T appears transposed
    np.testing.assert_allclose(grads["0.W"], np.outer(x, 2 * (x @ W - y)), atol=1e-12)


def test_zero_upstream_gradient_gives_zero_grads():
    net = build_network(small_spec(np.random.default_rng(3)), np.random.default_rng(3))
    out = net.forward(np.random.default_rng(4).random(net.input_shape))
    assert all(not np.any(g) for g in net.backward(np.zeros_like(out)).values())


def test_backward_without_forward_raises():
    net = build_network(small_spec(np.random.default_rng(5)), np.random.default_rng(5))
    with pytest.raises(MissingCacheError):
        net.backward(np.zeros((1,) + net.output_shape))


def test_shape_error_names_layer():
    net = build_network(q_net_spec(), np.random.default_rng(0))
    with pytest.raises(ShapeError, match="conv8"):
        net.forward(np.zeros((32, 32, 3)))


@pytest.mark.parametrize("seed", range(10))
def test_grad_check_random_nets(seed):
    rng = np.random.default_rng(100 + seed)
    spec = small_spec(rng)
    net = random_net(spec, rng)
    x = rng.random((3,) + spec.input_shape)
    report = grad_check(net, squared_loss(rng.standard_normal((3, spec.n_out))), x, rng=rng)
    assert report.n_coords >= min(200, net.n_params)
    assert report.passed, report


def test_grad_check_catches_corrupted_conv(monkeypatch):
    rng = np.random.default_rng(7)
    spec = small_spec(rng)
    net = random_net(spec, rng)
    original = Conv2D.backward

    def corrupted(self, dout):
        dx, g = original(self, dout)
        return dx, {"W": g["W"] * 1.05, "b": g["b"]}

    monkeypatch.setattr(Conv2D, "backward", corrupted)
    x = rng.random((2,) + spec.input_shape)
    assert not grad_check(net, squared_loss(np.zeros((2, spec.n_out))), x, rng=rng).passed


def test_grad_check_empty_net_passes():
    net = Network([Flatten(), ReLU()], (2, 2, 1))
    rep = grad_check(net, squared_loss(np.zeros((1, 4))), np.ones((1, 2, 2, 1)))
    assert rep.passed and rep.n_coords == 0


def test_conv_input_gradient_matches_fd():
    rng = np.random.default_rng(11)
    conv = Conv2D(2, 3, 3, 2)
    conv.params = {k: rng.standard_normal(v.shape) for k, v in conv.params.items()}
    x = rng.standard_normal((1, 7, 7, 2))
    up = rng.standard_normal((1, 3, 3, 3))
    conv.forward(x)
    dx, _ = conv.backward(up)
    h = 1e-6
    for idx in [(0, 0, 0, 0), (0, 3, 4, 1), (0, 6, 6, 0), (0, 2, 5, 1)]:
        xp, xm = x.copy(), x.copy()
        xp[idx] += h
        xm[idx] -= h
        num = (np.sum(conv.forward(xp) * up) - np.sum(conv.forward(xm) * up)) / (2 * h)
        assert dx[idx] == pytest.approx(num, rel=1e-6, abs=1e-9)


def test_adam_first_step_magnitude():
    p = {"w": np.zeros(5, np.float64)}
    adam_step(p, {"w": np.full(5, 0.3)}, AdamState(lr=0.01))
    np.testing.assert_allclose(p["w"], -0.01, rtol=1e-6)


def test_adam_zero_gradient_and_determinism():
    p = {"w": np.ones(3)}
    adam_step(p, {"w": np.zeros(3)}, AdamState())
    np.testing.assert_array_equal(p["w"], np.ones(3))
    runs = []
    for _ in range(2):
        q, s = {"w": np.ones(3)}, AdamState(lr=0.1)
        for k in range(5):
            adam_step(q, {"w": np.array([1.0, -2.0, 0.5]) * (k + 1)}, s)
        runs.append(q["w"].copy())
    assert np.array_equal(*runs)


def test_adam_shape_mismatch():
    with pytest.raises(ShapeError):
        adam_step({"w": np.ones(3)}, {"w": np.ones(4)}, AdamState())


@given(st.integers(0, 2**31))
def test_forward_deterministic(seed):
    rng = np.random.default_rng(seed)
    spec = small_spec(rng)
    net = build_network(spec, rng)
    x = rng.random((2,) + spec.input_shape).astype(np.float32)
    assert np.array_equal(net.forward(x), net.copy().forward(x))
