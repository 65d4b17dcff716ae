from __future__ import annotations

import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from conftest import central_diff, rel_err
from neuroproj.autodiff import Var
from neuroproj.core_types import ProjectionConfig
from neuroproj.net import (
    AdamState,
    ConstraintNet,
    NetArch,
    adam_step,
    init_bound,
    net_forward,
    net_init,
    net_input_grad,
    param_grad_through_input_grad,
)
from neuroproj.projection import project_batch


def manual_forward(net: ConstraintNet, x: np.ndarray) -> np.ndarray:
    """Independent matrix-chain forward pass."""
    a = np.atleast_2d(x)
    for k, (w, b) in enumerate(zip(net.weights, net.biases)):
        a = a @ w.T + b
        if k < len(net.weights) - 1:
            a = np.where(a > 0, a, net.arch.slope * a)
    return a[:, 0]


def zero_net(widths, out_bias=0.0) -> ConstraintNet:
    arch = NetArch(widths)
    ws = [np.zeros((o, i)) for i, o in zip(widths[:-1], widths[1:])]
    bs = [np.zeros(o) for o in widths[1:]]
    bs[-1][:] = out_bias
    return ConstraintNet(arch, ws, bs)


def test_zero_weight_net_returns_bias():
    net = zero_net((4, 8, 1), out_bias=0.7)
    assert net_forward(net, np.arange(4.0)) == 0.7
    np.testing.assert_array_equal(net_input_grad(net, np.arange(4.0)), 0.0)


def test_linear_single_layer():
    net = ConstraintNet(NetArch((1, 1), slope=1.0), [np.ones((1, 1))], [np.zeros(1)])
    assert net_forward(net, np.array([3.0])) == 3.0


def test_linear_net_gradient_is_weight():
    w = np.array([[0.5, -2.0, 1.5]])
    net = ConstraintNet(NetArch((3, 1)), [w], [np.array([0.1])])
    np.testing.assert_array_equal(net_input_grad(net, np.array([1.0, 2.0, 3.0])), w[0])


def test_forward_matches_matrix_chain(rng):
    net = net_init(NetArch((6, 16, 16, 1)), seed=3)
    x = rng.normal(size=(5, 6))
    assert np.max(np.abs(net_forward(net, x) - manual_forward(net, x))) <= 1e-15


def test_forward_is_batch_order_independent(rng):
    net = net_init(NetArch((6, 16, 1)), seed=3)
    x = rng.normal(size=(7, 6))
    perm = rng.permutation(7)
    # equal up to BLAS blocking, which may round rows differently by one ulp
    np.testing.assert_allclose(net_forward(net, x)[perm], net_forward(net, x[perm]), rtol=1e-14, atol=1e-15)
    np.testing.assert_array_equal(net_forward(net, x), net_forward(net, x))


def test_dimension_mismatch():
    net = net_init(NetArch((6, 4, 1)), seed=0)
    with pytest.raises(ValueError):
        net_forward(net, np.zeros(5))
    with pytest.raises(ValueError):
        net_input_grad(net, np.zeros((2, 7)))


@given(st.integers(0, 10_000), st.integers(1, 3), st.integers(2, 32))
def test_input_grad_matches_finite_differences(seed, depth, width):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(2, 9))
    net = net_init(NetArch((n,) + (width,) * depth + (1,)), seed=seed)
    x = rng.normal(size=n)
    g = net_input_grad(net, x)
    fd = central_diff(lambda z: float(manual_forward(net, z)[0]), x)
    assert rel_err(g, fd) < 1e-6


def test_grad_norm_loss_on_linear_net():
    # C(x) = w.x + b, loss = |grad C|^2 = |w|^2, so d loss / d w = 2 w, d loss / d b = 0
    w = np.array([[0.3, -1.2, 0.5]])
    net = ConstraintNet(NetArch((3, 1)), [w], [np.array([0.2])])
    x = np.array([[1.0, 2.0, -1.0]])

    def loss(bound):
        _, g = bound.evaluate(Var(x))
        return (g * g).sum()

    val, (gw, gb) = param_grad_through_input_grad(net, loss)
    assert val == pytest.approx(float((w * w).sum()))
    np.testing.assert_allclose(gw, 2 * w)
    np.testing.assert_array_equal(gb, 0.0)


def test_squared_output_loss_matches_first_order(rng):
    net = net_init(NetArch((4, 8, 1)), seed=1)
    x = rng.normal(size=(3, 4))

    def loss(bound):
        c, _ = bound.evaluate(Var(x))
        return (c * c).sum()

    _, grads = param_grad_through_input_grad(net, loss)
    flat = net.params()
    for k, p in enumerate(flat):
        def f(q, k=k):
            ps = list(flat)
            ps[k] = q
            return float((manual_forward(net.with_params(ps), x) ** 2).sum())
        assert rel_err(grads[k], central_diff(f, p)) < 1e-6


def projection_loss_grad_check(seed: int, width: int) -> float:
    """Relative error of double-backward parameter gradients of a projected-position loss."""
    rng = np.random.default_rng(seed)
    n = 4
    net = net_init(NetArch((n, width, width, 1)), seed=seed)
    x_hat = rng.normal(size=(3, n))
    target = rng.normal(size=(3, n))
    cfg = ProjectionConfig(iterations=2)

    def loss_of(bound_or_net):
        x, _ = project_batch(bound_or_net, x_hat, cfg)
        d = x - target
        return (d * d).sum()

    _, grads = param_grad_through_input_grad(net, loss_of)
    flat = net.params()
    errs = []
    for k, p in enumerate(flat):
        def f(q, k=k):
            ps = list(flat)
            ps[k] = q
            return float(loss_of(net.with_params(ps)).value)
        errs.append(rel_err(grads[k], central_diff(f, p, h=1e-6)))
    return max(errs)


@given(st.integers(0, 10_000))
def test_double_backward_matches_finite_differences(seed):
    assert projection_loss_grad_check(seed, 8) < 1e-4


def test_adam_zero_gradient_leaves_params():
    p = [np.array([1.0, -2.0])]
    st_ = AdamState.for_params(p)
    out = adam_step(p, [np.zeros(2)], st_, 1e-3)
    np.testing.assert_array_equal(out[0], p[0])
    assert st_.step == 1


def test_adam_first_step_hand_formula():
    p = [np.array([1.0, -2.0, 0.5])]
    g = np.array([0.2, -3.0, 1e-3])
    st_ = AdamState.for_params(p)
    out = adam_step(p, [g], st_, 0.01)
    m_hat = (0.1 * g) / (1 - 0.9)
    v_hat = (0.001 * g * g) / (1 - 0.999)
    np.testing.assert_allclose(out[0], p[0] - 0.01 * m_hat / (np.sqrt(v_hat) + 1e-8), rtol=1e-14)
    # first Adam step is close to -lr * sign(g)
    np.testing.assert_allclose(out[0] - p[0], -0.01 * np.sign(g), rtol=1e-4)


def test_adam_shape_mismatch():
    st_ = AdamState.for_params([np.zeros(2)])
    with pytest.raises(ValueError):
        adam_step([np.zeros(2)], [np.zeros(3)], st_)


def test_lr_schedule():
    st_ = AdamState.for_params([np.zeros(1)], init_lr=1e-3, lr_step=20, lr_gamma=0.8)
    assert st_.lr_at(40) == pytest.approx(1e-3 * 0.64)
    assert st_.lr_at(19) == 1e-3


def test_init_is_seeded_and_bounded():
    arch = NetArch((8, 256, 256, 256, 256, 1))
    a, b = net_init(arch, 5), net_init(arch, 5)
    for x, y in zip(a.params(), b.params()):
        np.testing.assert_array_equal(x, y)
    bound = init_bound(256, 0.01)
    assert bound == pytest.approx(math.sqrt(2 / (1 + 1e-4)) * math.sqrt(3 / 256))
    w = a.weights[1]
    assert np.abs(w).max() <= bound and np.abs(w).max() > 0.95 * bound
    assert a.weights[-1].shape == (1, 256)
    assert all(np.all(b_ == 0) for b_ in a.biases)


def test_arch_validation():
    with pytest.raises(ValueError):
        NetArch((4,))
    with pytest.raises(ValueError):
        NetArch((4, 8, 2)).require_scalar()
    assert NetArch((8, 256, 1)).num_params == 8 * 256 + 256 + 256 + 1
