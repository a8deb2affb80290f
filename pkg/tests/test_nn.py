from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from tweedieflow.errors import ConfigError, NumericError, StateError
from tweedieflow.flow import PairBatch, rf_loss
from tweedieflow.nn import GradientBuffer, NetConfig, VelocityNet, backward, grad_check
from tweedieflow.optim import AdamState, opt_step, scheduled_lr

from conftest import linear_net


def test_zero_net_outputs_zero():
    net = VelocityNet.zeros(NetConfig(3, 2, (5,), 2))
    out = net.forward(np.ones((4, 3)), 0.3, np.ones(2))
    assert np.array_equal(out, np.zeros((4, 3)))


def test_identity_layer():
    net = linear_net(np.eye(2))
    assert np.array_equal(net.forward(np.array([1.0, 2.0]), 0.7), [1.0, 2.0])


def test_forward_is_deterministic():
    cfg = NetConfig(2, 1, (8, 8))
    a = VelocityNet.init(cfg, 3)
    b = VelocityNet.init(cfg, 3)
    x = np.array([[0.1, -0.4]])
    assert a.forward(x, 0.5, [1.0]).tobytes() == b.forward(x, 0.5, [1.0]).tobytes()


def test_dimension_mismatch_is_config_error():
    net = VelocityNet.init(NetConfig(2), 0)
    with pytest.raises(ConfigError):
        net.forward(np.zeros((1, 3)), 0.0)
    with pytest.raises(ConfigError):
        net.forward(np.zeros((1, 2)), 0.0, np.ones(1))


@given(
    st.integers(1, 5),
    st.integers(0, 4),
    st.lists(st.integers(1, 9), max_size=3),
    st.integers(0, 4),
)
def test_param_count_formula(dim, cond, hidden, n_freq):
    cfg = NetConfig(dim, cond, tuple(hidden), n_freq)
    net = VelocityNet.init(cfg, 0)
    dims = [dim + 2 * n_freq + cond, *hidden, dim]
    expected = sum(dims[i + 1] * dims[i] + dims[i + 1] for i in range(len(dims) - 1))
    assert net.num_params == cfg.param_count == expected
    assert cfg.layer_shapes[0][1] == dim + 2 * n_freq + cond
    assert cfg.layer_shapes[-1][0] == dim


def test_zero_net_gradients_vanish():
    net = VelocityNet.zeros(NetConfig(2, 0, (4,), 1))
    out, rec = net.forward_record(np.ones((3, 2)), 0.2)
    g = backward(net, rec, 2.0 * out)
    assert g.params.is_zero()


def test_scalar_chain_rule():
    # loss (Wx - y)^2 with W=2, x=3, y=1 -> dL/dW = 2 (6 - 1) 3 = 30
    net = linear_net([[2.0]])
    out, rec = net.forward_record(np.array([[3.0]]), 0.0)
    g = backward(net, rec, 2.0 * (out - 1.0))
    assert g.params.arrays[0][0, 0] == 30.0


def test_backward_without_forward():
    net = linear_net([[1.0]])
    with pytest.raises(StateError):
        backward(net, None, np.ones((1, 1)))


def test_grad_check_quadratic_on_linear_net(rng):
    net = linear_net(rng.standard_normal((3, 3)))
    x, y = rng.standard_normal((5, 3)), rng.standard_normal((5, 3))

    def loss():
        out, rec = net.forward_record(x, 0.0)
        r = out - y
        return float(np.sum(r * r)), backward(net, rec, 2 * r).params.flat()

    assert grad_check(net, loss) <= 1e-8


def test_grad_check_constant_loss_on_zero_net():
    net = VelocityNet.zeros(NetConfig(2, 0, (3,), 1))
    assert grad_check(net, lambda: (1.0, np.zeros(net.num_params))) == 0.0


def test_grad_check_flow_loss(small_net, rng):
    assert small_net.num_params <= 1000
    batch = PairBatch(rng.standard_normal((6, 2)), rng.standard_normal((6, 2)))
    times = rng.uniform(size=6)

    def loss():
        value, g = rf_loss(small_net, batch, times, with_grad=True)
        return value, g.flat()

    assert grad_check(small_net, loss) <= 1e-5


def test_grad_check_tanh_and_condition(rng):
    net = VelocityNet.init(NetConfig(3, 2, (7,), 1, "tanh"), 4)
    x, c, t = rng.standard_normal((4, 3)), rng.standard_normal((4, 2)), rng.uniform(size=4)

    def loss():
        out, rec = net.forward_record(x, t, c)
        return float(np.sum(out**3)), backward(net, rec, 3 * out**2).params.flat()

    assert grad_check(net, loss) <= 1e-5


def test_grad_check_rejects_nonfinite():
    net = linear_net([[1.0]])
    with pytest.raises(NumericError):
        grad_check(net, lambda: (float("nan"), np.zeros(1)))


def test_input_gradient_matches_finite_difference(small_net, rng):
    x = rng.standard_normal((1, 2))
    out, rec = small_net.forward_record(x, 0.4)
    gx = backward(small_net, rec, np.ones_like(out)).x
    h = 1e-6
    for j in range(2):
        e = np.zeros_like(x)
        e[0, j] = h
        fd = (small_net.forward(x + e, 0.4).sum() - small_net.forward(x - e, 0.4).sum()) / (2 * h)
        assert abs(fd - gx[0, j]) < 1e-7


def test_gradient_buffer_helpers():
    buf = GradientBuffer([np.ones(2), np.ones((2, 2))])
    buf.add_(GradientBuffer([np.ones(2), np.ones((2, 2))]), scale=2.0)
    assert np.array_equal(buf.flat(), np.full(6, 3.0))
    buf.zero_()
    assert buf.is_zero()


def test_opt_step_zero_grads_fresh_state():
    p = [np.array([1.0, -2.0])]
    state = AdamState.for_params(p, lr=0.1)
    opt_step(p, [np.zeros(2)], state)
    assert np.array_equal(p[0], [1.0, -2.0])


def test_first_adam_step_has_magnitude_lr():
    p = [np.array([0.5])]
    state = AdamState.for_params(p, lr=0.1)
    opt_step(p, [np.array([1.0])], state)
    assert abs((0.5 - p[0][0]) - 0.1) < 1e-6


def test_step_counter_increments():
    p = [np.zeros(1)]
    state = AdamState.for_params(p)
    opt_step(p, [np.ones(1)], state)
    opt_step(p, [np.ones(1)], state)
    assert state.step == 2


def test_nan_gradient_reports_index():
    p = [np.zeros(2), np.zeros(3)]
    state = AdamState.for_params(p)
    g = [np.zeros(2), np.array([0.0, np.nan, 0.0])]
    with pytest.raises(NumericError) as exc:
        opt_step(p, g, state)
    assert exc.value.index == 3


def test_frozen_arrays_untouched():
    p = [np.zeros(2), np.zeros(2)]
    state = AdamState.for_params(p, lr=0.1)
    opt_step(p, [np.ones(2), np.ones(2)], state, trainable=[True, False])
    assert np.all(p[0] != 0) and np.all(p[1] == 0)


def test_cosine_schedule_endpoints():
    assert scheduled_lr(1.0, 0, 100, "cosine") == 1.0
    assert scheduled_lr(1.0, 50, 100, "cosine") == pytest.approx(0.5)
    with pytest.raises(ConfigError):
        scheduled_lr(1.0, 0, 10, "linear")


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_training_determinism_bitwise(seed):
    from tweedieflow import distributions as dist
    from tweedieflow.flow import TrainConfig, train_rectified_flow

    prior = dist.IsotropicGaussian.standard(2)
    target = dist.PointMass([1.0, -1.0])
    nets = [VelocityNet.init(NetConfig(2, 0, (6,), 1), seed) for _ in range(2)]
    for n in nets:
        train_rectified_flow(n, prior, target, TrainConfig(steps=5, batch_size=8, seed=seed))
    assert nets[0].checksum() == nets[1].checksum()
