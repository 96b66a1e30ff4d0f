"""Joint gradient training for networks made of full MLP branches.

The additive model sums per-branch class vectors, so the cross-entropy
gradient with respect to every branch output is the same softmax residual.
Training therefore vectorizes cleanly across branches: all hidden weights
are stacked into [n_branches, out, in] tensors and each step runs a handful
of batched matmuls instead of a Python loop over branches.

Only networks whose branches all carry trainable MLPs (origin "base") can
be trained here; grown and transferred branches expose no MLP gradients.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .data_io import extract_patches
from .nam_model import NamNetwork
from .nn_core import AdamState, adam_step, softmax_cross_entropy_batch

_EVAL_CHUNK = 2048


@dataclass
class TrainConfig:
    """Hyperparameters for joint branch training."""

    epochs: int = 40
    batch_size: int = 128
    learning_rate: float = 1e-3
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if not self.learning_rate > 0.0:
            raise ValueError("learning_rate must be positive")


@dataclass
class EpochMetrics:
    """Metrics recorded after one pass over the training set."""

    epoch: int
    train_loss: float
    eval_accuracy: float
    eval_loss: float


@dataclass
class StackedNam:
    """All branch parameters stacked along a leading branch axis.

    hidden_weights[l] has shape [n_branches, width, in_dim] and
    hidden_biases[l] has shape [n_branches, width]; output_weights has
    shape [n_branches, n_classes, width].  The arrays are the optimizer's
    working copies; ``unstack_into_network`` writes them back.
    """

    hidden_weights: list = field(default_factory=list)
    hidden_biases: list = field(default_factory=list)
    output_weights: np.ndarray = None

    @property
    def n_branches(self):
        return self.output_weights.shape[0]

    @property
    def n_hidden(self):
        return len(self.hidden_weights)

    def param_list(self):
        """Flat parameter list in a fixed order (weights/bias per layer)."""
        params = []
        for w, b in zip(self.hidden_weights, self.hidden_biases):
            params.append(w)
            params.append(b)
        params.append(self.output_weights)
        return params


def stack_network(net):
    """Copy every branch MLP of `net` into stacked tensors."""
    if not net.branches:
        raise ValueError("cannot stack an empty network")
    mlps = []
    for branch in net.branches:
        if branch.origin != "base":
            raise ValueError(
                "joint training requires full-MLP branches; branch %r has "
                "origin %r" % (branch.input_range, branch.origin)
            )
        mlps.append(branch.mlp)
    first = mlps[0]
    for mlp in mlps[1:]:
        if mlp.activation != first.activation:
            raise ValueError("branches disagree on activation")
        if len(mlp.hidden_layers) != len(first.hidden_layers):
            raise ValueError("branches disagree on depth")
    if first.activation != "relu":
        raise ValueError("joint training supports relu branches only")
    stacked = StackedNam()
    for layer_idx in range(len(first.hidden_layers)):
        layers = [mlp.hidden_layers[layer_idx] for mlp in mlps]
        if any(layer.bias is None for layer in layers):
            raise ValueError("hidden layers must carry biases")
        stacked.hidden_weights.append(
            np.stack([layer.weights for layer in layers]).astype(np.float64)
        )
        stacked.hidden_biases.append(
            np.stack([layer.bias for layer in layers]).astype(np.float64)
        )
    stacked.output_weights = np.stack(
        [mlp.output_layer.weights for mlp in mlps]
    ).astype(np.float64)
    return stacked


def unstack_into_network(stacked, net):
    """Write stacked parameters back into the branch MLPs of `net`."""
    if stacked.n_branches != len(net.branches):
        raise ValueError("branch count mismatch")
    for k, branch in enumerate(net.branches):
        mlp = branch.mlp
        for layer_idx, layer in enumerate(mlp.hidden_layers):
            layer.weights[...] = stacked.hidden_weights[layer_idx][k]
            layer.bias[...] = stacked.hidden_biases[layer_idx][k]
        mlp.output_layer.weights[...] = stacked.output_weights[k]


def stacked_forward(stacked, patches):
    """Summed class logits for per-branch patches [n_branches, n, in_dim]."""
    logits, _ = _forward_with_cache(stacked, patches)
    return logits


def _forward_with_cache(stacked, patches):
    patches = np.asarray(patches, dtype=np.float64)
    if patches.ndim != 3 or patches.shape[0] != stacked.n_branches:
        raise ValueError(
            "patches must have shape [n_branches, n, in_dim], got %r"
            % (patches.shape,)
        )
    h = patches
    activations = [h]
    masks = []
    for w, b in zip(stacked.hidden_weights, stacked.hidden_biases):
        pre = np.matmul(h, np.swapaxes(w, 1, 2)) + b[:, None, :]
        mask = pre > 0.0
        h = np.where(mask, pre, 0.0)
        activations.append(h)
        masks.append(mask)
    per_branch = np.matmul(h, np.swapaxes(stacked.output_weights, 1, 2))
    logits = per_branch.sum(axis=0)
    return logits, (activations, masks)


def stacked_loss_and_grads(stacked, patches, labels):
    """Mean cross-entropy of the summed logits and gradients for param_list.

    Returns (loss, grads) where grads matches ``stacked.param_list()``
    element for element.
    """
    logits, (activations, masks) = _forward_with_cache(stacked, patches)
    loss, dlogits = softmax_cross_entropy_batch(logits, labels)
    top = activations[-1]
    # The sum over branches broadcasts the same residual to every branch.
    d_out = np.einsum("nc,kni->kci", dlogits, top)
    dh = np.matmul(dlogits[None, :, :], stacked.output_weights)
    hidden_w_grads = [None] * stacked.n_hidden
    hidden_b_grads = [None] * stacked.n_hidden
    for layer_idx in range(stacked.n_hidden - 1, -1, -1):
        dpre = np.where(masks[layer_idx], dh, 0.0)
        below = activations[layer_idx]
        hidden_w_grads[layer_idx] = np.einsum("kni,knj->kij", dpre, below)
        hidden_b_grads[layer_idx] = dpre.sum(axis=1)
        if layer_idx > 0:
            dh = np.matmul(dpre, stacked.hidden_weights[layer_idx])
    grads = []
    for dw, db in zip(hidden_w_grads, hidden_b_grads):
        grads.append(dw)
        grads.append(db)
    grads.append(d_out)
    return loss, grads


def evaluate_stacked(stacked, dataset, ranges):
    """(accuracy, mean cross-entropy) of the stacked model on a dataset."""
    n = dataset.n
    correct = 0
    loss_sum = 0.0
    for start in range(0, n, _EVAL_CHUNK):
        sl = slice(start, min(start + _EVAL_CHUNK, n))
        patches = extract_patches(dataset.images[sl], ranges)
        logits = stacked_forward(stacked, patches)
        labels = dataset.labels[sl]
        correct += int(np.sum(np.argmax(logits, axis=1) == labels))
        loss, _ = softmax_cross_entropy_batch(logits, labels)
        loss_sum += loss * labels.size
    return correct / n, loss_sum / n


def train_network(net, train_dataset, config, eval_dataset=None,
                  on_epoch=None):
    """Train every branch of `net` jointly on `train_dataset`.

    Runs `config.epochs` passes of seeded-shuffle minibatch Adam on the
    mean cross-entropy of the summed logits, writes the trained weights
    back into `net`, and returns one EpochMetrics per epoch.  When
    `eval_dataset` is None the evaluation columns repeat the training
    metrics of the epoch.  `on_epoch`, when given, receives each
    EpochMetrics as soon as its epoch finishes.
    """
    if train_dataset.n_classes != net.n_classes:
        raise ValueError("dataset/network class count mismatch")
    ranges = [branch.input_range for branch in net.branches]
    stacked = stack_network(net)
    params = stacked.param_list()
    state = AdamState(params, lr=config.learning_rate)
    rng = np.random.default_rng(config.seed)
    history = []
    for epoch in range(config.epochs):
        order = rng.permutation(train_dataset.n)
        loss_sum = 0.0
        for start in range(0, train_dataset.n, config.batch_size):
            idx = order[start : start + config.batch_size]
            patches = extract_patches(train_dataset.images[idx], ranges)
            loss, grads = stacked_loss_and_grads(
                stacked, patches, train_dataset.labels[idx]
            )
            adam_step(state, params, grads)
            loss_sum += loss * idx.size
        train_loss = loss_sum / train_dataset.n
        if eval_dataset is not None:
            acc, eval_loss = evaluate_stacked(stacked, eval_dataset, ranges)
        else:
            acc, eval_loss = evaluate_stacked(stacked, train_dataset, ranges)
        history.append(EpochMetrics(epoch, train_loss, acc, eval_loss))
        if on_epoch is not None:
            on_epoch(history[-1])
    unstack_into_network(stacked, net)
    return history
