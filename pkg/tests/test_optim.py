import numpy as np
import pytest

from tsenet import engine as E
from tsenet.engine import Tensor
from tsenet.optim import AdamState, adam_step


def scalar_adam(w0, grad_fn, lr, steps, b1=0.9, b2=0.999, eps=1e-8):
    """Textbook Adam on a float, used as the oracle."""
    w, m, v = w0, 0.0, 0.0
    for t in range(1, steps + 1):
        g = grad_fn(w)
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        mh, vh = m / (1 - b1**t), v / (1 - b2**t)
        w -= lr * mh / (np.sqrt(vh) + eps)
    return w


def test_first_step_moves_by_lr():
    p = Tensor([0.0], requires_grad=True)
    p.grad = np.array([1.0])
    state = AdamState.for_params([p], learning_rate=0.1)
    adam_step([p], state)
    assert p.data[0] == pytest.approx(-0.1, rel=1e-6)
    assert state.step_count == 1
    np.testing.assert_array_equal(p.grad, [0.0])


def test_zero_grad_leaves_param_and_decays_moments():
    p = Tensor([2.0], requires_grad=True)
    state = AdamState.for_params([p], learning_rate=0.1)
    state.first_moment[0][:] = 0.5
    state.second_moment[0][:] = 0.25
    state.step_count = 3
    p.grad = np.zeros(1)
    before = p.data.copy()
    # nonzero moments still move the parameter; reset them to isolate the zero case
    state.first_moment[0][:] = 0.0
    adam_step([p], state)
    np.testing.assert_array_equal(p.data, before)
    assert state.second_moment[0][0] == pytest.approx(0.25 * 0.999)


def test_quadratic_converges_like_oracle():
    w = Tensor([0.0], requires_grad=True)
    state = AdamState.for_params([w], learning_rate=0.1)
    for _ in range(100):
        E.backward(E.sum((w - 3.0) * (w - 3.0)))
        adam_step([w], state)
    expected = scalar_adam(0.0, lambda x: 2 * (x - 3.0), 0.1, 100)
    assert abs(w.data[0] - 3.0) < 0.5
    assert w.data[0] == pytest.approx(expected, rel=1e-10)


def test_missing_grad_rejected():
    p = Tensor([1.0], requires_grad=True)
    with pytest.raises(ValueError, match="no gradient"):
        adam_step([p], AdamState.for_params([p]))


def test_step_count_increments():
    p = Tensor([1.0], requires_grad=True)
    state = AdamState.for_params([p])
    for k in range(1, 4):
        p.grad = np.ones(1)
        adam_step([p], state)
        assert state.step_count == k
