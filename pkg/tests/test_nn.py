import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from lsgfn.nn import (
    ACTIVATIONS,
    AdamState,
    DenseNet,
    NonFiniteGradient,
    adam_step,
    clip_by_global_norm,
    global_norm,
    load_arrays,
    net_backward,
    net_forward,
    save_arrays,
)

from oracles import central_difference, direct_dense_forward, relative_error

ACT_FNS = {
    "relu": lambda v: max(v, 0.0),
    "leaky_relu": lambda v: v if v > 0 else 0.01 * v,
    "tanh": math.tanh,
    "softplus": lambda v: math.log1p(math.exp(v)),
}


def test_zero_net_outputs_zero():
    net = DenseNet([5, 7, 3], zero=True)
    out, _ = net_forward(net, np.ones(5))
    assert np.array_equal(out, np.zeros(3))


def test_scalar_affine_net():
    net = DenseNet([1, 1], zero=True)
    net.weights[0][0, 0] = 2.0
    net.biases[0][0] = 1.0
    out, _ = net_forward(net, np.array([3.0]))
    assert out[0] == 7.0


@pytest.mark.parametrize("act", ACTIVATIONS)
def test_forward_matches_direct_loop(act):
    rng = np.random.default_rng(1)
    net = DenseNet([4, 6, 5, 2], act, rng)
    x = rng.normal(size=(3, 4))
    out, _ = net_forward(net, x)
    ref = direct_dense_forward([w.tolist() for w in net.weights], [b.tolist() for b in net.biases], x, ACT_FNS[act])
    assert np.allclose(out, ref, rtol=0, atol=1e-12)


def test_forward_errors():
    net = DenseNet([3, 2])
    with pytest.raises(ValueError, match="expects"):
        net_forward(net, np.ones(4))
    with pytest.raises(ValueError, match="non-finite"):
        net_forward(net, np.array([1.0, np.nan, 0.0]))
    with pytest.raises(ValueError):
        DenseNet([3, 2], activation="sigmoidish")


def test_zero_out_grad_gives_zero_gradients():
    rng = np.random.default_rng(2)
    net = DenseNet([3, 4, 2], rng=rng)
    _, tape = net_forward(net, rng.normal(size=(5, 3)))
    assert all(np.all(g == 0) for g in net_backward(net, tape, np.zeros((5, 2))))


def test_linear_net_weight_gradient_is_input():
    net = DenseNet([1, 1], zero=True)
    _, tape = net_forward(net, np.array([2.5]))
    gw, gb = net_backward(net, tape, np.array([1.0]))
    assert gw[0, 0] == 2.5 and gb[0] == 1.0


def test_stale_tape_is_rejected():
    net = DenseNet([2, 2])
    _, tape = net_forward(net, np.ones(2))
    net.version += 1
    with pytest.raises(RuntimeError, match="stale tape"):
        net_backward(net, tape, np.ones(2))


def _fd_case(seed):
    rng = np.random.default_rng(seed)
    act = ("tanh", "softplus", "leaky_relu", "relu")[seed % 4]
    dims = [int(rng.integers(1, 6))] + [int(rng.integers(1, 7)) for _ in range(rng.integers(1, 3))] + [
        int(rng.integers(1, 4))
    ]
    net = DenseNet(dims, act, rng)
    x = rng.normal(size=(int(rng.integers(1, 4)), dims[0]))
    g = rng.normal(size=(x.shape[0], dims[-1]))
    return net, x, g


@pytest.mark.parametrize("seed", range(100))
def test_backward_matches_finite_differences(seed):
    net, x, g = _fd_case(seed)
    _, tape = net_forward(net, x)
    analytic = net_backward(net, tape, g)

    def f():
        out, _ = net_forward(net, x)
        return float(np.sum(out * g))

    numeric = central_difference(f, net.params, h=1e-5)
    assert relative_error(analytic, numeric) < 1e-4


def test_input_gradient():
    rng = np.random.default_rng(3)
    net = DenseNet([3, 5, 2], "tanh", rng)
    x = rng.normal(size=(2, 3))
    g = rng.normal(size=(2, 2))
    _, tape = net_forward(net, x)
    _, gx = net_backward(net, tape, g, return_input_grad=True)

    def f():
        out, _ = net_forward(net, x)
        return float(np.sum(out * g))

    assert relative_error([gx], central_difference(f, [x])) < 1e-6


def test_init_is_seeded_and_fan_in_bounded():
    a = DenseNet([10, 20, 1], rng=np.random.default_rng(5))
    b = DenseNet([10, 20, 1], rng=np.random.default_rng(5))
    assert all(np.array_equal(p, q) for p, q in zip(a.params, b.params))
    assert np.abs(a.weights[0]).max() <= 1 / math.sqrt(10)
    assert np.abs(a.weights[1]).max() <= 1 / math.sqrt(20)


# ------------------------------------------------------------------ Adam


def test_adam_zero_gradient_decays_moments():
    p = [np.array([1.0, -2.0])]
    st_ = AdamState.for_params(p, 0.1)
    st_.m[0][:] = 0.5
    adam_step(p, [np.zeros(2)], st_)
    # moments decay and the bias-corrected first moment still moves p
    assert np.allclose(st_.m[0], 0.45) and st_.step == 1


def test_adam_zero_gradient_from_fresh_state_is_a_no_op():
    p = [np.array([1.0, -2.0])]
    st_ = AdamState.for_params(p, 0.1)
    adam_step(p, [np.zeros(2)], st_)
    assert np.array_equal(p[0], [1.0, -2.0])


def test_adam_first_step_moves_by_learning_rate():
    p = [np.array([0.3])]
    st_ = AdamState.for_params(p, 1e-2)
    adam_step(p, [np.array([1.0])], st_)
    # m_hat = 1, v_hat = 1 -> step = lr / (1 + eps)
    assert p[0][0] == pytest.approx(0.3 - 1e-2 / (1 + 1e-8), abs=1e-15)


def test_clip_rescales_norm_20_by_half():
    g = [np.array([12.0, 16.0])]
    clipped, norm = clip_by_global_norm(g, 10.0)
    assert norm == 20.0
    assert np.allclose(clipped[0], [6.0, 8.0])


def test_adam_uses_clipped_gradient():
    a, b = [np.zeros(2)], [np.zeros(2)]
    sa, sb = AdamState.for_params(a, 0.1), AdamState.for_params(b, 0.1)
    adam_step(a, [np.array([12.0, 16.0])], sa, grad_clip=10.0)
    adam_step(b, [np.array([6.0, 8.0])], sb, grad_clip=None)
    assert np.allclose(sa.m[0], sb.m[0]) and np.allclose(a[0], b[0])


def test_adam_non_finite_gradient_reports_context():
    p = [np.zeros(2)]
    with pytest.raises(NonFiniteGradient, match="round 7"):
        adam_step(p, [np.array([np.inf, 0.0])], AdamState.for_params(p, 0.1), context="round 7")


def test_adam_shape_checks():
    p = [np.zeros(2)]
    with pytest.raises(ValueError):
        adam_step(p, [np.zeros(3)], AdamState.for_params(p, 0.1))
    with pytest.raises(ValueError):
        AdamState.for_params(p, [0.1, 0.2])


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-1e3, 1e3), min_size=1, max_size=6), st.floats(0.1, 50))
def test_clip_never_exceeds_max_norm(vals, max_norm):
    clipped, norm = clip_by_global_norm([np.array(vals)], max_norm)
    assert global_norm(clipped) <= max_norm * (1 + 1e-12) or norm <= max_norm


def test_save_and_load_arrays_round_trip(tmp_path):
    arrays = {"a": np.arange(3.0), "b": np.eye(2)}
    save_arrays(tmp_path / "x.npz", arrays, {"k": 1, "s": "v"})
    back, meta = load_arrays(tmp_path / "x.npz")
    assert meta == {"k": 1, "s": "v"}
    assert all(np.array_equal(arrays[k], back[k]) for k in arrays)
