"""Minimal dense-MLP engine: forward, analytic backward, Adam, softmax cross-entropy.

Everything is float64 numpy and pure-functional except the optimizer, which
mutates its own state and the parameter arrays it is given.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

# Module-level odometer so pipelines can prove they never trained anything.
_OPTIMIZER_STEPS = 0


def optimizer_step_count() -> int:
    """Total adam_step invocations since process start (or last reset)."""
    return _OPTIMIZER_STEPS


def reset_optimizer_step_count() -> None:
    global _OPTIMIZER_STEPS
    _OPTIMIZER_STEPS = 0


@dataclass
class DenseLayer:
    """Fully-connected layer, weights [out_dim, in_dim], optional bias [out_dim]."""

    weights: np.ndarray
    bias: np.ndarray | None = None

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=np.float64)
        if self.bias is not None:
            self.bias = np.asarray(self.bias, dtype=np.float64)
            if self.bias.shape != (self.weights.shape[0],):
                raise ValueError(
                    f"bias shape {self.bias.shape} does not match "
                    f"weights shape {self.weights.shape}"
                )
        if not np.all(np.isfinite(self.weights)):
            raise ValueError("non-finite weights")
        if self.bias is not None and not np.all(np.isfinite(self.bias)):
            raise ValueError("non-finite bias")

    @property
    def out_dim(self) -> int:
        return self.weights.shape[0]

    @property
    def in_dim(self) -> int:
        return self.weights.shape[1]

    def copy(self) -> "DenseLayer":
        return DenseLayer(
            self.weights.copy(), None if self.bias is None else self.bias.copy()
        )


@dataclass
class BranchMlp:
    """Small MLP: biased hidden layers, bias-free linear output layer."""

    hidden_layers: list[DenseLayer]
    output_layer: DenseLayer
    activation: str = "relu"

    def __post_init__(self):
        if self.activation not in ("relu", "linear"):
            raise ValueError(f"unknown activation {self.activation!r}")
        if self.output_layer.bias is not None:
            raise ValueError("output layer must be bias-free")

    @property
    def in_dim(self) -> int:
        layers = self.hidden_layers or [self.output_layer]
        return layers[0].in_dim

    @property
    def n_classes(self) -> int:
        return self.output_layer.out_dim

    def copy(self) -> "BranchMlp":
        return BranchMlp(
            [l.copy() for l in self.hidden_layers],
            self.output_layer.copy(),
            self.activation,
        )


def mlp_parameter_count(mlp: BranchMlp) -> int:
    n = 0
    for layer in mlp.hidden_layers:
        n += layer.weights.size + (0 if layer.bias is None else layer.bias.size)
    n += mlp.output_layer.weights.size
    return n


def init_branch_mlp(
    rng: np.random.Generator,
    n_classes: int,
    in_dim: int = 9,
    hidden_width: int = 9,
    n_hidden: int = 4,
    activation: str = "relu",
) -> BranchMlp:
    """He-initialised hidden layers, smaller-scale linear output, zero biases."""
    hidden = []
    dim = in_dim
    for _ in range(n_hidden):
        w = rng.normal(0.0, np.sqrt(2.0 / dim), size=(hidden_width, dim))
        hidden.append(DenseLayer(w, np.zeros(hidden_width)))
        dim = hidden_width
    w_out = rng.normal(0.0, np.sqrt(1.0 / dim), size=(n_classes, dim))
    return BranchMlp(hidden, DenseLayer(w_out, None), activation)


def _activate(x: np.ndarray, activation: str) -> np.ndarray:
    if activation == "relu":
        return np.maximum(x, 0.0)
    return x


def mlp_forward(mlp: BranchMlp, x: np.ndarray) -> np.ndarray:
    """Class-output vector of one branch for a single input vector."""
    x = np.asarray(x, dtype=np.float64)
    if x.shape != (mlp.in_dim,):
        raise ValueError(f"input shape {x.shape}, expected ({mlp.in_dim},)")
    h = x
    for layer in mlp.hidden_layers:
        h = _activate(layer.weights @ h + layer.bias, mlp.activation)
    return mlp.output_layer.weights @ h


def mlp_forward_batch(mlp: BranchMlp, x: np.ndarray) -> np.ndarray:
    """Vectorised forward over rows of x [n, in_dim] -> [n, n_classes]."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != mlp.in_dim:
        raise ValueError(f"input shape {x.shape}, expected (n, {mlp.in_dim})")
    h = x
    for layer in mlp.hidden_layers:
        h = _activate(h @ layer.weights.T + layer.bias, mlp.activation)
    return h @ mlp.output_layer.weights.T


@dataclass
class MlpGradients:
    """Parameter gradients mirroring BranchMlp shapes, plus the input gradient."""

    hidden: list[tuple[np.ndarray, np.ndarray]]  # (dW, db) per hidden layer
    output: np.ndarray  # dW of the output layer
    input: np.ndarray  # dL/dx


def mlp_backward(mlp: BranchMlp, x: np.ndarray, upstream_grad: np.ndarray) -> MlpGradients:
    """Analytic gradients of upstream_grad . mlp_forward(x) w.r.t. all parameters."""
    x = np.asarray(x, dtype=np.float64)
    upstream_grad = np.asarray(upstream_grad, dtype=np.float64)
    if x.shape != (mlp.in_dim,):
        raise ValueError(f"input shape {x.shape}, expected ({mlp.in_dim},)")
    if upstream_grad.shape != (mlp.n_classes,):
        raise ValueError(
            f"upstream gradient shape {upstream_grad.shape}, "
            f"expected ({mlp.n_classes},)"
        )
    if not np.all(np.isfinite(upstream_grad)):
        raise ValueError("non-finite upstream gradient")

    # Forward, caching pre-activations.
    pre, post = [], [x]
    h = x
    for layer in mlp.hidden_layers:
        z = layer.weights @ h + layer.bias
        pre.append(z)
        h = _activate(z, mlp.activation)
        post.append(h)

    d_out = np.outer(upstream_grad, post[-1])
    delta = mlp.output_layer.weights.T @ upstream_grad
    hidden_grads: list[tuple[np.ndarray, np.ndarray]] = [None] * len(mlp.hidden_layers)
    for i in reversed(range(len(mlp.hidden_layers))):
        if mlp.activation == "relu":
            delta = delta * (pre[i] > 0.0)
        hidden_grads[i] = (np.outer(delta, post[i]), delta.copy())
        delta = mlp.hidden_layers[i].weights.T @ delta
    return MlpGradients(hidden=hidden_grads, output=d_out, input=delta)


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - np.max(logits, axis=-1, keepdims=True)
    e = np.exp(z)
    return e / np.sum(e, axis=-1, keepdims=True)


def softmax_cross_entropy(logits: np.ndarray, label: int) -> tuple[float, np.ndarray]:
    """Loss and gradient w.r.t. logits; grad = softmax(logits) - one_hot(label)."""
    logits = np.asarray(logits, dtype=np.float64)
    n = logits.shape[0]
    if not 0 <= label < n:
        raise ValueError(f"label {label} out of range [0, {n})")
    z = logits - np.max(logits)
    log_norm = np.log(np.sum(np.exp(z)))
    loss = log_norm - z[label]
    grad = np.exp(z - log_norm)
    grad[label] -= 1.0
    return float(loss), grad


def softmax_cross_entropy_batch(
    logits: np.ndarray, labels: np.ndarray
) -> tuple[float, np.ndarray]:
    """Mean loss over rows and the per-row gradient (already divided by n)."""
    logits = np.asarray(logits, dtype=np.float64)
    labels = np.asarray(labels)
    n, c = logits.shape
    if labels.min() < 0 or labels.max() >= c:
        raise ValueError("label out of range")
    z = logits - logits.max(axis=1, keepdims=True)
    log_norm = np.log(np.exp(z).sum(axis=1))
    losses = log_norm - z[np.arange(n), labels]
    grad = np.exp(z - log_norm[:, None])
    grad[np.arange(n), labels] -= 1.0
    return float(losses.mean()), grad / n


class AdamState:
    """Adam moment accumulators for a fixed list of parameter arrays."""

    def __init__(self, params: list[np.ndarray], lr: float = 1e-3,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.step = 0
        self.m = [np.zeros_like(p) for p in params]
        self.v = [np.zeros_like(p) for p in params]


def adam_step(state: AdamState, params: list[np.ndarray],
              grads: list[np.ndarray]) -> list[np.ndarray]:
    """One Adam update, in place on params. Returns params for convenience."""
    global _OPTIMIZER_STEPS
    if len(params) != len(state.m) or len(grads) != len(params):
        raise ValueError("parameter/gradient/state length mismatch")
    state.step += 1
    _OPTIMIZER_STEPS += 1
    t = state.step
    bc1 = 1.0 - state.beta1 ** t
    bc2 = 1.0 - state.beta2 ** t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if p.shape != g.shape:
            raise ValueError(f"gradient shape {g.shape} != parameter shape {p.shape}")
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * np.square(g)
        p -= state.lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps)
    return params
