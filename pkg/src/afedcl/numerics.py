"""Dense float64 numerics: affine layers, ReLU, softmax cross-entropy, SGD/Adam.

Tensors are plain numpy float64 arrays (row-major). Every operation here is a
pure function: nothing is mutated, optimizer steps return a fresh state. The
analytic gradients are checked against central finite differences in the test
suite, so keep any change to the backward passes exact, not approximate.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

SGD = "sgd"
ADAM = "adam"


def as_tensor(values) -> np.ndarray:
    """Coerce to a C-contiguous float64 array."""
    return np.ascontiguousarray(values, dtype=np.float64)


def require_finite(array: np.ndarray, context: str) -> np.ndarray:
    if not np.all(np.isfinite(array)):
        raise ValueError(f"non-finite values in {context}")
    return array


@dataclass
class AffineLayer:
    """Fully connected layer computing y = x @ weights + bias."""

    weights: np.ndarray  # (in_dim, out_dim)
    bias: np.ndarray  # (out_dim,)

    def __post_init__(self):
        self.weights = as_tensor(self.weights)
        self.bias = as_tensor(self.bias)
        if self.weights.ndim != 2:
            raise ValueError("weights must be a 2-d array")
        if self.bias.shape != (self.weights.shape[1],):
            raise ValueError(
                f"bias shape {self.bias.shape} does not match "
                f"out_dim {self.weights.shape[1]}"
            )

    @property
    def in_dim(self) -> int:
        return self.weights.shape[0]

    @property
    def out_dim(self) -> int:
        return self.weights.shape[1]


def affine_forward(layer: AffineLayer, inputs: np.ndarray) -> np.ndarray:
    """Batched forward pass: out[b] = inputs[b] @ weights + bias."""
    inputs = np.asarray(inputs, dtype=np.float64)
    if inputs.ndim != 2 or inputs.shape[1] != layer.in_dim:
        raise ValueError(
            f"affine input shape {inputs.shape} incompatible with in_dim {layer.in_dim}"
        )
    return require_finite(inputs @ layer.weights + layer.bias, "affine output")


def affine_backward(layer: AffineLayer, inputs: np.ndarray, upstream: np.ndarray):
    """Exact gradients of the affine map.

    Returns (grad_weights, grad_bias, grad_inputs); grad_bias sums over the
    batch dimension.
    """
    inputs = np.asarray(inputs, dtype=np.float64)
    upstream = np.asarray(upstream, dtype=np.float64)
    if inputs.ndim != 2 or inputs.shape[1] != layer.in_dim:
        raise ValueError(f"affine input shape {inputs.shape} incompatible with layer")
    if upstream.shape != (inputs.shape[0], layer.out_dim):
        raise ValueError(
            f"upstream shape {upstream.shape} incompatible with "
            f"({inputs.shape[0]}, {layer.out_dim})"
        )
    grad_weights = inputs.T @ upstream
    grad_bias = upstream.sum(axis=0)
    grad_inputs = upstream @ layer.weights.T
    return grad_weights, grad_bias, grad_inputs


def relu(inputs: np.ndarray) -> np.ndarray:
    return np.maximum(np.asarray(inputs, dtype=np.float64), 0.0)


def relu_backward(inputs: np.ndarray, upstream: np.ndarray) -> np.ndarray:
    # Subgradient at exactly 0 is fixed to 0 for determinism.
    return np.where(np.asarray(inputs) > 0.0, upstream, 0.0)


def softmax(logits: np.ndarray) -> np.ndarray:
    """Row-wise softmax with max-subtraction for stability."""
    shifted = logits - logits.max(axis=1, keepdims=True)
    exps = np.exp(shifted)
    return exps / exps.sum(axis=1, keepdims=True)


def softmax_cross_entropy(logits: np.ndarray, labels: np.ndarray):
    """Mean cross-entropy over the batch and its gradient w.r.t. the logits.

    grad = (softmax(logits) - one_hot(labels)) / batch, so gradient rows sum
    to zero and the loss is always >= 0.
    """
    logits = np.asarray(logits, dtype=np.float64)
    labels = np.asarray(labels)
    if logits.ndim != 2:
        raise ValueError("logits must be a (batch, classes) array")
    batch, num_classes = logits.shape
    if labels.shape != (batch,):
        raise ValueError(f"labels shape {labels.shape} does not match batch {batch}")
    if labels.size and (labels.min() < 0 or labels.max() >= num_classes):
        raise ValueError(f"label out of range [0, {num_classes})")
    labels = labels.astype(np.intp)

    shifted = logits - logits.max(axis=1, keepdims=True)
    log_norm = np.log(np.exp(shifted).sum(axis=1))
    loss = float(np.mean(log_norm - shifted[np.arange(batch), labels]))

    grad = softmax(logits)
    grad[np.arange(batch), labels] -= 1.0
    grad /= batch
    require_finite(grad, "cross-entropy gradient")
    return loss, grad


@dataclass
class OptimizerState:
    """SGD or Adam state over one flat parameter vector.

    Moment arrays are present iff kind == "adam" and always match the
    parameter count. step_count increments by exactly one per applied step.
    """

    kind: str
    learning_rate: float
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_epsilon: float = 1e-8
    first_moment: np.ndarray | None = None
    second_moment: np.ndarray | None = None
    step_count: int = 0


def sgd(learning_rate: float) -> OptimizerState:
    if learning_rate <= 0:
        raise ValueError("learning_rate must be positive")
    return OptimizerState(kind=SGD, learning_rate=learning_rate)


def adam(
    learning_rate: float,
    param_count: int,
    beta1: float = 0.9,
    beta2: float = 0.999,
    epsilon: float = 1e-8,
) -> OptimizerState:
    if learning_rate <= 0:
        raise ValueError("learning_rate must be positive")
    return OptimizerState(
        kind=ADAM,
        learning_rate=learning_rate,
        adam_beta1=beta1,
        adam_beta2=beta2,
        adam_epsilon=epsilon,
        first_moment=np.zeros(param_count),
        second_moment=np.zeros(param_count),
    )


def make_optimizer(kind: str, learning_rate: float, param_count: int) -> OptimizerState:
    if kind == SGD:
        return sgd(learning_rate)
    if kind == ADAM:
        return adam(learning_rate, param_count)
    raise ValueError(f"unknown optimizer kind {kind!r}")


def optimizer_step(state: OptimizerState, params: np.ndarray, grads: np.ndarray):
    """Apply one update; returns (new_params, new_state)."""
    params = np.asarray(params, dtype=np.float64)
    grads = np.asarray(grads, dtype=np.float64)
    if params.shape != grads.shape or params.ndim != 1:
        raise ValueError(
            f"params/grads length mismatch: {params.shape} vs {grads.shape}"
        )

    if state.kind == SGD:
        new_params = params - state.learning_rate * grads
        new_state = replace(state, step_count=state.step_count + 1)
    elif state.kind == ADAM:
        if state.first_moment is None or state.first_moment.shape != params.shape:
            raise ValueError("Adam moment arrays do not match parameter count")
        t = state.step_count + 1
        m = state.adam_beta1 * state.first_moment + (1 - state.adam_beta1) * grads
        v = state.adam_beta2 * state.second_moment + (1 - state.adam_beta2) * grads**2
        m_hat = m / (1 - state.adam_beta1**t)
        v_hat = v / (1 - state.adam_beta2**t)
        new_params = params - state.learning_rate * m_hat / (np.sqrt(v_hat) + state.adam_epsilon)
        new_state = replace(state, first_moment=m, second_moment=v, step_count=t)
    else:
        raise ValueError(f"unknown optimizer kind {state.kind!r}")

    return require_finite(new_params, "optimizer output"), new_state
