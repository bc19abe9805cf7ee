"""Tensor engine: op gradients vs central differences, Adam oracle, error paths."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mfsbi import engine as en
from mfsbi.engine import (Adam, AdamState, DomainError, NonFiniteError,
                          ShapeError, Tape, Tensor, adam_step, backward,
                          grad_check)

RNG = np.random.default_rng(0)


def test_tensor_is_float64():
    t = Tensor([1, 2, 3])
    assert t.data.dtype == np.float64
    assert t.grad is None and not t.requires_grad


def test_softplus_at_zero_is_log_two():
    out = en.softplus(Tensor(0.0))
    assert abs(out.item() - np.log(2.0)) < 1e-12


def test_softmax_rows_sum_to_one():
    x = Tensor(RNG.normal(size=(4, 7)))
    y = en.softmax(x)
    np.testing.assert_allclose(y.data.sum(axis=-1), 1.0, atol=1e-12)


# --- gradient checks per op -------------------------------------------------

B, D = 3, 4


def _x():
    return Tensor(RNG.normal(size=(B, D)), requires_grad=True)


def _const(shape, seed):
    # fixed per (shape, seed) so finite-difference re-evaluations see identical values
    return Tensor(np.random.default_rng(seed).normal(size=shape))


_MASK = np.random.default_rng(99).random(size=(B, D)) > 0.5

CASES = {
    "add": lambda x: en.sum_(en.add(x, _const((B, D), 1))),
    "add_bcast": lambda x: en.sum_(en.add(x, _const(D, 2))),
    "sub": lambda x: en.sum_(en.sub(_const((B, D), 3), x)),
    "neg": lambda x: en.sum_(en.neg(x)),
    "mul": lambda x: en.sum_(en.mul(x, _const((B, D), 4))),
    "mul_bcast": lambda x: en.sum_(en.mul(x, _const(D, 5))),
    "div": lambda x: en.sum_(en.div(x, en.add(en.mul(_const((B, D), 6), _const((B, D), 6)), 1.5))),
    "div_denom": lambda x: en.sum_(en.div(2.0, en.add(en.mul(x, x), 1.0))),
    "matmul": lambda x: en.sum_(en.matmul(x, _const((D, 2), 7))),
    "sum_axis": lambda x: en.sum_(en.mul(en.sum_(x, axis=1), en.sum_(x, axis=1))),
    "mean": lambda x: en.mean(en.mul(x, x)),
    "mean_axis": lambda x: en.sum_(en.mean(x, axis=0)),
    "exp": lambda x: en.sum_(en.exp(x)),
    "log": lambda x: en.sum_(en.log(en.add(en.mul(x, x), 0.5))),
    "tanh": lambda x: en.sum_(en.tanh(x)),
    "sigmoid": lambda x: en.sum_(en.sigmoid(x)),
    "softplus": lambda x: en.sum_(en.softplus(x)),
    "softmax": lambda x: en.sum_(en.mul(en.softmax(x), _const((B, D), 8))),
    "power": lambda x: en.sum_(en.power(x, 3.0)),
    "sqrt": lambda x: en.sum_(en.sqrt(en.add(en.mul(x, x), 0.1))),
    "cumsum": lambda x: en.sum_(en.mul(en.cumsum(x), _const((B, D), 9))),
    "concat": lambda x: en.sum_(en.mul(en.concat([x, en.mul(x, 2.0)], axis=1),
                                       _const((B, 2 * D), 10))),
    "slice": lambda x: en.sum_(en.mul(en.slice_(x, 1, 3, axis=1), _const((B, 2), 11))),
    "reshape": lambda x: en.sum_(en.mul(en.reshape(x, (D, B)), _const((D, B), 12))),
    "take_columns": lambda x: en.sum_(en.mul(en.take_columns(x, [2, 0]), _const((B, 2), 13))),
    "put_columns": lambda x: en.sum_(en.mul(en.put_columns(x, [1, 3], en.exp(en.take_columns(x, [0, 2]))),
                                            _const((B, D), 14))),
    "gather": lambda x: en.sum_(en.gather(x, np.array([[1], [3], [1]]))),
    "where": lambda x: en.sum_(en.where(_MASK, en.mul(x, x), en.neg(x))),
}


@pytest.mark.parametrize("name", sorted(CASES))
def test_grad_matches_central_differences(name):
    err = grad_check(CASES[name], _x())
    assert err < 1e-6, f"op {name}: grad error {err:.2e}"


def test_conv2d_grad_x_w_b():
    x = Tensor(RNG.normal(size=(2, 2, 5, 5)), requires_grad=True)
    w = Tensor(RNG.normal(size=(3, 2, 3, 3)) * 0.5, requires_grad=True)
    b = Tensor(RNG.normal(size=3), requires_grad=True)

    def f_of(t):
        def f(_):
            out = en.conv2d(x, w, b, stride=2, padding=1)
            return en.sum_(en.mul(out, out))
        return f

    for t in (x, w, b):
        err = grad_check(f_of(t), t)
        assert err < 1e-6, f"conv2d grad error {err:.2e}"


def test_conv2d_matches_direct_computation():
    x = RNG.normal(size=(1, 1, 4, 4))
    w = RNG.normal(size=(1, 1, 2, 2))
    out = en.conv2d(Tensor(x), Tensor(w), stride=1, padding=0).data
    expect = np.zeros((1, 1, 3, 3))
    for i in range(3):
        for j in range(3):
            expect[0, 0, i, j] = (x[0, 0, i:i + 2, j:j + 2] * w[0, 0]).sum()
    np.testing.assert_allclose(out, expect, atol=1e-12)


# --- backward semantics -----------------------------------------------------

def test_backward_twice_accumulates():
    x = Tensor([2.0, 3.0], requires_grad=True)
    with Tape():
        loss = en.sum_(en.mul(x, x))
        backward(loss)
        first = x.grad.copy()
        backward(loss)
    np.testing.assert_allclose(x.grad, 2.0 * first)


def test_shared_input_grads_add():
    x = Tensor([1.0, 2.0], requires_grad=True)
    with Tape():
        loss = en.sum_(en.add(en.mul(x, 3.0), en.mul(x, 5.0)))
        backward(loss)
    np.testing.assert_allclose(x.grad, [8.0, 8.0])


def test_no_tape_records_nothing():
    x = Tensor([1.0], requires_grad=True)
    y = en.mul(x, x)
    assert y.requires_grad and x.grad is None
    with pytest.raises(en.EngineError):
        backward(y)


def test_backward_requires_scalar():
    x = Tensor([1.0, 2.0], requires_grad=True)
    with Tape(), pytest.raises(ShapeError):
        backward(en.mul(x, x))


def test_constant_branch_gets_no_grad():
    x = Tensor([1.0], requires_grad=True)
    c = Tensor([2.0])
    with Tape():
        backward(en.sum_(en.mul(x, c)))
    assert c.grad is None


# --- error paths ------------------------------------------------------------

def test_shape_mismatch_names_op():
    with pytest.raises(ShapeError, match="add"):
        en.add(Tensor(np.ones((3, 4))), Tensor(np.ones(3)))


def test_matmul_rejects_bad_inner_dims():
    with pytest.raises(ShapeError, match="matmul"):
        en.matmul(Tensor(np.ones((3, 4))), Tensor(np.ones((3, 4))))


def test_log_of_non_positive_is_domain_error():
    with pytest.raises(DomainError):
        en.log(Tensor([1.0, 0.0]))


def test_overflow_raises_immediately():
    with pytest.raises(NonFiniteError, match="exp"):
        en.exp(Tensor([1000.0]))


def test_div_by_zero_raises():
    with pytest.raises(NonFiniteError, match="div"):
        en.div(Tensor([1.0]), Tensor([0.0]))


# --- Adam -------------------------------------------------------------------

def test_adam_first_step_hand_value():
    state = AdamState(lr=0.1)
    new = adam_step({"p": np.array([1.0])}, {"p": np.array([1.0])}, state)
    expect = 1.0 - 0.1 / (1.0 + 1e-8)
    assert abs(new["p"][0] - expect) < 1e-14
    assert abs(new["p"][0] - 0.9) < 1e-6
    assert state.t == 1


def test_adam_zero_grad_is_identity():
    state = AdamState(lr=0.1)
    p = np.array([1.5, -2.0])
    new = adam_step({"p": p}, {"p": np.zeros(2)}, state)
    np.testing.assert_array_equal(new["p"], p)
    np.testing.assert_array_equal(state.m["p"], 0.0)
    np.testing.assert_array_equal(state.v["p"], 0.0)
    assert state.t == 1


def test_adam_nan_grad_names_parameter():
    with pytest.raises(NonFiniteError, match="weight_1"):
        adam_step({"weight_1": np.ones(2)}, {"weight_1": np.array([1.0, np.nan])}, AdamState())


def test_adam_wrapper_descends_quadratic():
    x = Tensor(np.array([4.0, -3.0]), requires_grad=True)
    opt = Adam({"x": x}, lr=0.2)
    for _ in range(400):
        opt.zero_grad()
        with Tape():
            backward(en.sum_(en.mul(x, x)))
        opt.step()
    assert np.abs(x.data).max() < 1e-3


# --- property tests ---------------------------------------------------------

@settings(max_examples=30, deadline=None)
@given(st.integers(1, 5), st.integers(1, 5), st.integers(0, 2 ** 31 - 1))
def test_sum_grad_is_ones(n, m, seed):
    x = Tensor(np.random.default_rng(seed).normal(size=(n, m)), requires_grad=True)
    with Tape():
        backward(en.sum_(x))
    np.testing.assert_array_equal(x.grad, np.ones((n, m)))


@settings(max_examples=30, deadline=None)
@given(st.floats(-3, 3), st.floats(-3, 3), st.integers(0, 2 ** 31 - 1))
def test_backward_is_linear_in_loss(a, b, seed):
    rng = np.random.default_rng(seed)
    data = rng.normal(size=4)

    def grad_of(scale_a, scale_b):
        x = Tensor(data.copy(), requires_grad=True)
        with Tape():
            f = en.sum_(en.mul(x, x))
            g = en.sum_(en.exp(en.mul(x, 0.3)))
            backward(en.add(en.mul(f, scale_a), en.mul(g, scale_b)))
        return x.grad

    combined = grad_of(a, b)
    separate = a * grad_of(1.0, 0.0) + b * grad_of(0.0, 1.0)
    np.testing.assert_allclose(combined, separate, atol=1e-10)


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2 ** 31 - 1))
def test_forward_op_dispatch_matches_direct(seed):
    x = Tensor(np.random.default_rng(seed).normal(size=(2, 3)))
    np.testing.assert_array_equal(en.forward_op("tanh", x).data, en.tanh(x).data)
