import math

import numpy as np
import pytest

from afedcl.numerics import (
    AffineLayer,
    adam,
    affine_backward,
    affine_forward,
    optimizer_step,
    relu,
    relu_backward,
    sgd,
    softmax,
    softmax_cross_entropy,
)

from fdcheck import finite_difference, max_relative_error


def test_affine_identity():
    layer = AffineLayer(np.eye(2), np.zeros(2))
    out = affine_forward(layer, np.array([[3.0, 4.0]]))
    assert np.array_equal(out, np.array([[3.0, 4.0]]))


def test_affine_closed_form():
    layer = AffineLayer(np.array([[2.0]]), np.array([1.0]))
    assert affine_forward(layer, np.array([[3.0]])).item() == pytest.approx(7.0)


def test_affine_shape_mismatch():
    layer = AffineLayer(np.eye(2), np.zeros(2))
    with pytest.raises(ValueError):
        affine_forward(layer, np.ones((1, 3)))
    with pytest.raises(ValueError):
        affine_backward(layer, np.ones((1, 2)), np.ones((2, 2)))


def test_affine_rejects_nonfinite_output():
    layer = AffineLayer(np.eye(1), np.zeros(1))
    with pytest.raises(ValueError, match="non-finite"):
        affine_forward(layer, np.array([[np.inf]]))


def test_affine_backward_zero_upstream():
    rng = np.random.default_rng(0)
    layer = AffineLayer(rng.standard_normal((3, 2)), rng.standard_normal(2))
    gw, gb, gx = affine_backward(layer, rng.standard_normal((4, 3)), np.zeros((4, 2)))
    assert not gw.any() and not gb.any() and not gx.any()


def test_affine_backward_scalar_chain():
    layer = AffineLayer(np.array([[1.0]]), np.array([0.0]))
    gw, gb, gx = affine_backward(layer, np.array([[2.0]]), np.array([[1.0]]))
    assert gw.item() == pytest.approx(2.0)
    assert gb.item() == pytest.approx(1.0)
    assert gx.item() == pytest.approx(1.0)


@pytest.mark.parametrize("shape,batch", [((4, 3), 2), ((5, 4), 3)])
def test_affine_backward_matches_finite_differences(shape, batch):
    rng = np.random.default_rng(7)
    layer = AffineLayer(rng.standard_normal(shape), rng.standard_normal(shape[1]))
    inputs = rng.standard_normal((batch, shape[0]))
    probe = rng.standard_normal((batch, shape[1]))  # fixed linear functional

    def loss():
        return float(np.sum(affine_forward(layer, inputs) * probe))

    gw, gb, gx = affine_backward(layer, inputs, probe)
    assert max_relative_error(gw, finite_difference(loss, layer.weights)) < 1e-6
    assert max_relative_error(gb, finite_difference(loss, layer.bias)) < 1e-6
    assert max_relative_error(gx, finite_difference(loss, inputs)) < 1e-6


def test_relu_basic():
    assert np.array_equal(relu(np.array([[-1.0, 0.0, 2.0]])), np.array([[0.0, 0.0, 2.0]]))


def test_relu_all_negative():
    x = -np.ones((2, 3))
    assert not relu(x).any()
    assert not relu_backward(x, np.ones((2, 3))).any()


def test_relu_zero_subgradient():
    grad = relu_backward(np.array([[0.0]]), np.array([[5.0]]))
    assert grad[0, 0] == 0.0


def test_relu_backward_matches_finite_differences():
    rng = np.random.default_rng(11)
    x = rng.standard_normal((3, 4))
    x[np.abs(x) < 0.1] = 0.5  # keep probes away from the kink
    probe = rng.standard_normal((3, 4))

    def loss():
        return float(np.sum(relu(x) * probe))

    grad = relu_backward(x, probe)
    assert max_relative_error(grad, finite_difference(loss, x)) < 1e-6


def test_cross_entropy_uniform_logits():
    loss, _ = softmax_cross_entropy(np.zeros((1, 6)), np.array([2]))
    assert loss == pytest.approx(math.log(6.0), abs=1e-12)


def test_cross_entropy_saturated_correct():
    logits = np.zeros((1, 4))
    logits[0, 1] = 30.0
    loss, _ = softmax_cross_entropy(logits, np.array([1]))
    assert 0.0 <= loss < 1e-10


def test_cross_entropy_label_out_of_range():
    with pytest.raises(ValueError, match="label out of range"):
        softmax_cross_entropy(np.zeros((1, 3)), np.array([3]))


def test_cross_entropy_gradient_matches_finite_differences():
    rng = np.random.default_rng(3)
    logits = rng.standard_normal((3, 4))
    labels = np.array([0, 3, 1])

    def loss():
        return softmax_cross_entropy(logits, labels)[0]

    _, grad = softmax_cross_entropy(logits, labels)
    assert max_relative_error(grad, finite_difference(loss, logits)) < 1e-6


def test_cross_entropy_gradient_rows_sum_to_zero():
    rng = np.random.default_rng(5)
    for _ in range(20):
        logits = 5.0 * rng.standard_normal((4, 6))
        labels = rng.integers(0, 6, size=4)
        loss, grad = softmax_cross_entropy(logits, labels)
        assert loss >= 0.0
        assert np.max(np.abs(grad.sum(axis=1))) < 1e-12


def test_softmax_rows_normalized():
    rng = np.random.default_rng(9)
    probs = softmax(50.0 * rng.standard_normal((5, 7)))
    assert probs.min() >= 0.0
    assert np.allclose(probs.sum(axis=1), 1.0, atol=1e-12)


def test_sgd_step():
    params, state = optimizer_step(sgd(0.1), np.array([1.0]), np.array([2.0]))
    assert params == pytest.approx([0.8])
    assert state.step_count == 1


def test_adam_first_step_magnitude():
    state = adam(0.001, 3)
    params, state = optimizer_step(state, np.zeros(3), np.array([0.5, -2.0, 7.0]))
    # Bias correction makes the first step ~= learning_rate per coordinate.
    assert np.max(np.abs(np.abs(params) - 0.001)) < 1e-9
    assert np.array_equal(np.sign(params), [-1.0, 1.0, -1.0])


def test_adam_trace_matches_scripted_reference():
    # Independent straight-line Adam on the quadratic 0.5*||p - c||^2.
    lr, b1, b2, eps = 0.01, 0.9, 0.999, 1e-8
    target = np.array([1.0, -2.0])
    p_ref = np.array([0.0, 0.0])
    m = np.zeros(2)
    v = np.zeros(2)
    trace = []
    for t in range(1, 4):
        g = p_ref - target
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        m_hat = m / (1 - b1**t)
        v_hat = v / (1 - b2**t)
        p_ref = p_ref - lr * m_hat / (np.sqrt(v_hat) + eps)
        trace.append(p_ref.copy())

    params = np.array([0.0, 0.0])
    state = adam(lr, 2)
    for expected in trace:
        params, state = optimizer_step(state, params, params - target)
        assert np.max(np.abs(params - expected)) < 1e-12


def test_adam_zero_gradient_fresh_state_is_identity():
    params = np.array([0.3, -1.5, 0.0])
    out, state = optimizer_step(adam(0.001, 3), params, np.zeros(3))
    assert np.array_equal(out, params)
    assert state.step_count == 1


def test_optimizer_length_mismatch():
    with pytest.raises(ValueError, match="mismatch"):
        optimizer_step(sgd(0.1), np.zeros(3), np.zeros(2))
    with pytest.raises(ValueError):
        optimizer_step(adam(0.1, 2), np.zeros(3), np.zeros(3))


def test_operations_deterministic():
    rng = np.random.default_rng(17)
    layer = AffineLayer(rng.standard_normal((3, 3)), rng.standard_normal(3))
    x = rng.standard_normal((2, 3))
    assert np.array_equal(affine_forward(layer, x), affine_forward(layer, x))
    loss_a, grad_a = softmax_cross_entropy(x, np.array([0, 2]))
    loss_b, grad_b = softmax_cross_entropy(x, np.array([0, 2]))
    assert loss_a == loss_b and np.array_equal(grad_a, grad_b)


def test_layer_backward_property_random_cases():
    # Smaller sibling of the acceptance criterion (which runs 100 instances).
    for seed in range(25):
        rng = np.random.default_rng(1000 + seed)
        in_dim = int(rng.integers(1, 6))
        out_dim = int(rng.integers(1, 6))
        batch = int(rng.integers(1, 5))
        layer = AffineLayer(rng.standard_normal((in_dim, out_dim)), rng.standard_normal(out_dim))
        x = rng.standard_normal((batch, in_dim))
        labels = rng.integers(0, out_dim, size=batch)

        def loss():
            return softmax_cross_entropy(affine_forward(layer, x), labels)[0]

        _, grad_logits = softmax_cross_entropy(affine_forward(layer, x), labels)
        gw, gb, _ = affine_backward(layer, x, grad_logits)
        assert max_relative_error(gw, finite_difference(loss, layer.weights)) < 1e-4
        assert max_relative_error(gb, finite_difference(loss, layer.bias)) < 1e-4
