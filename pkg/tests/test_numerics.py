import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from dualvq.numerics import Rng, backward, cross_entropy, grad_check, log_softmax, softmax, tensor


def test_softmax_examples():
    np.testing.assert_allclose(softmax([0, 0, 0, 0]), [0.25] * 4, atol=1e-15)
    np.testing.assert_allclose(softmax([1000.0, 0.0]), [1.0, 0.0], atol=1e-12)
    np.testing.assert_allclose(softmax([1, 2, 3]), [0.09003057, 0.24472847, 0.66524096], atol=1e-8)


@pytest.mark.parametrize("bad", [[1.0, np.nan], [np.inf, 0.0], [-np.inf, 1.0]])
def test_softmax_rejects_non_finite(bad):
    with pytest.raises(ValueError):
        softmax(bad)
    with pytest.raises(ValueError):
        log_softmax(bad)


@settings(max_examples=200, deadline=None)
@given(arrays(np.float64, st.integers(1, 40), elements=st.floats(-1e6, 1e6)))
def test_softmax_sums_to_one(x):
    p = softmax(x)
    assert abs(p.sum() - 1) <= 1e-12
    assert np.all(p >= 0)
    np.testing.assert_allclose(np.log(np.maximum(p, 1e-300)), np.maximum(log_softmax(x), np.log(1e-300)),
                               atol=1e-9)


def test_cross_entropy_matches_log_softmax():
    logits = Rng(0).normal((5, 7))
    target = np.array([0, 3, 6, 2, 1])
    expected = -log_softmax(logits)[np.arange(5), target]
    np.testing.assert_allclose(cross_entropy(logits, target), expected, rtol=1e-14)


def test_backward_square():
    x = tensor(3.0, requires_grad=True)
    (g,) = backward(x * x, [x])
    assert g.item() == 6.0


def test_backward_softmax_cross_entropy_at_uniform():
    n = 5
    x = tensor(np.zeros(n), requires_grad=True)
    target = 2
    loss = -torch.log_softmax(x, -1)[target]
    (g,) = backward(loss, [x])
    expected = np.full(n, 1 / n)
    expected[target] -= 1
    np.testing.assert_allclose(g.numpy(), expected, atol=1e-15)


def test_backward_rejects_non_scalar_and_fills_unused():
    x = tensor(np.ones(3), requires_grad=True)
    y = tensor(np.ones(2), requires_grad=True)
    with pytest.raises(ValueError):
        backward(x * 2, [x])
    gx, gy = backward((x * 2).sum(), [x, y])
    np.testing.assert_array_equal(gx.numpy(), [2, 2, 2])
    np.testing.assert_array_equal(gy.numpy(), [0, 0])


def test_grad_check_quadratic_and_constant():
    rng = Rng(1)
    a = rng.normal((4, 4))
    q = tensor(a @ a.T)
    x = tensor(rng.normal(4), requires_grad=True)
    assert grad_check(lambda p: p[0] @ q @ p[0], [x]) < 1e-8
    c = tensor(rng.normal(3), requires_grad=True)
    assert grad_check(lambda p: (p[0] * 0).sum() + 4.0, [c]) == 0.0


def test_grad_check_detects_wrong_gradient():
    x = tensor(Rng(2).normal(3), requires_grad=True)

    def f(p):
        # value x^3, gradient deliberately wrong (2x instead of 3x^2)
        (v,) = p
        return (v.detach() ** 3 + v ** 2 - v.detach() ** 2).sum()
    assert grad_check(f, [x]) > 1e-2


def test_grad_check_composite_graph():
    rng = Rng(3)
    w = tensor(rng.normal((3, 4)), requires_grad=True)
    b = tensor(rng.normal(3), requires_grad=True)
    x = tensor(rng.normal((5, 4)))
    t = torch.as_tensor([0, 2, 1, 1, 0])
    f = lambda p: torch.nn.functional.cross_entropy(torch.tanh(x @ p[0].T + p[1]), t)
    assert grad_check(f, [w, b]) < 1e-4


def test_rng_is_deterministic_and_forks_are_independent():
    a, b = Rng(7, 1, 2), Rng(7, 1, 2)
    assert a.bytes(64) == b.bytes(64)
    np.testing.assert_array_equal(Rng(7).normal(10), Rng(7).normal(10))
    assert not np.array_equal(Rng(7).fork(0).normal(10), Rng(7).fork(1).normal(10))
    assert not np.array_equal(Rng(7).normal(10), Rng(8).normal(10))
    # forking does not advance the parent stream
    r = Rng(9)
    r.fork(3)
    np.testing.assert_array_equal(r.normal(4), Rng(9).normal(4))
