"""Tape semantics, backward identities, and numeric guardrails."""

import numpy as np
import pytest

from dtfsal import ops
from dtfsal.tensor import GradTape, NumericsError, ShapeError, Tensor


def test_sum_backward_is_ones():
    x = Tensor(np.random.default_rng(0).standard_normal((3, 4, 2)), requires_grad=True)
    with GradTape() as tape:
        loss = x.sum()
    tape.backward(loss)
    np.testing.assert_array_equal(x.grad, np.ones_like(x.data))


def test_sigmoid_at_zero_grad_quarter():
    x = Tensor(np.zeros((5, 5)), requires_grad=True)
    with GradTape() as tape:
        loss = ops.sigmoid(x).sum()
    tape.backward(loss)
    np.testing.assert_allclose(x.grad, np.full((5, 5), 0.25), atol=1e-15)


def test_backward_twice_without_reset_errors():
    x = Tensor([1.0, 2.0], requires_grad=True)
    with GradTape() as tape:
        loss = (x * x).sum()
    tape.backward(loss)
    with pytest.raises(RuntimeError, match="reset"):
        tape.backward(loss)


def test_tape_reset_allows_reuse():
    x = Tensor([1.0, 2.0], requires_grad=True)
    with GradTape() as tape:
        loss = (x * 3.0).sum()
    tape.backward(loss)
    first = x.grad.copy()
    tape.reset()
    x.zero_grad()
    with tape:
        loss = (x * 3.0).sum()
    tape.backward(loss)
    np.testing.assert_array_equal(first, x.grad)


def test_backward_rejects_non_scalar_loss():
    x = Tensor([1.0, 2.0], requires_grad=True)
    with GradTape() as tape:
        y = x * 2.0
    with pytest.raises(ShapeError):
        tape.backward(y)


def test_grad_accumulates_over_shared_subexpression():
    x = Tensor([2.0], requires_grad=True)
    with GradTape() as tape:
        y = x * x + x  # dy/dx = 2x + 1 = 5
        loss = y.sum()
    tape.backward(loss)
    np.testing.assert_allclose(x.grad, [5.0])


def test_no_recording_outside_tape():
    x = Tensor([1.0], requires_grad=True)
    y = x * 2.0
    assert not y.requires_grad
    with GradTape() as tape:
        z = x * 2.0
        assert z.requires_grad
    assert len(tape) == 1


def test_nan_forward_raises():
    x = Tensor([-1.0])
    with pytest.raises(NumericsError):
        ops.log(x)


def test_inf_forward_raises():
    x = Tensor([1e308])
    with pytest.raises(NumericsError):
        x * 10.0


def test_broadcast_gradients_unbroadcast():
    a = Tensor(np.ones((3, 4)), requires_grad=True)
    b = Tensor(np.ones((4,)), requires_grad=True)
    with GradTape() as tape:
        loss = (a + b).sum()
    tape.backward(loss)
    np.testing.assert_array_equal(a.grad, np.ones((3, 4)))
    np.testing.assert_array_equal(b.grad, np.full((4,), 3.0))


def test_tensor_invariants():
    t = Tensor(np.arange(6.0).reshape(2, 3))
    assert t.size == 6 and t.shape == (2, 3)
    assert t.data.flags["C_CONTIGUOUS"]
    with pytest.raises(ShapeError):
        t.item()


def test_grad_shape_always_matches_data():
    rng = np.random.default_rng(1)
    x = Tensor(rng.standard_normal((2, 3, 4)), requires_grad=True)
    with GradTape() as tape:
        loss = (x.reshape((6, 4)) @ Tensor(rng.standard_normal((4, 2)))).sum()
    tape.backward(loss)
    assert x.grad.shape == x.data.shape
