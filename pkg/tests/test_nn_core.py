"""Forward/backward/optimizer checks against naive-loop and finite-difference oracles."""

import numpy as np
import pytest

from namgrow import nn_core
from namgrow.nn_core import (
    AdamState,
    BranchMlp,
    DenseLayer,
    adam_step,
    init_branch_mlp,
    mlp_backward,
    mlp_forward,
    mlp_forward_batch,
    mlp_parameter_count,
    softmax_cross_entropy,
    softmax_cross_entropy_batch,
)


def naive_forward(mlp, x):
    """Scalar-loop re-computation of the forward pass (oracle)."""
    h = [float(v) for v in x]
    for layer in mlp.hidden_layers:
        out = []
        for i in range(layer.out_dim):
            acc = float(layer.bias[i])
            for j in range(layer.in_dim):
                acc += float(layer.weights[i, j]) * h[j]
            if mlp.activation == "relu" and acc < 0.0:
                acc = 0.0
            out.append(acc)
        h = out
    final = []
    for i in range(mlp.output_layer.out_dim):
        acc = 0.0
        for j in range(mlp.output_layer.in_dim):
            acc += float(mlp.output_layer.weights[i, j]) * h[j]
        final.append(acc)
    return np.array(final)


def flatten_params(mlp):
    arrays = []
    for layer in mlp.hidden_layers:
        arrays.append(layer.weights)
        arrays.append(layer.bias)
    arrays.append(mlp.output_layer.weights)
    return arrays


def flatten_grads(grads):
    arrays = []
    for dw, db in grads.hidden:
        arrays.append(dw)
        arrays.append(db)
    arrays.append(grads.output)
    return arrays


def test_forward_matches_naive_loop():
    rng = np.random.default_rng(42)
    mlp = init_branch_mlp(rng, n_classes=10)
    for _ in range(20):
        x = rng.uniform(-0.5, 0.5, size=9)
        np.testing.assert_allclose(mlp_forward(mlp, x), naive_forward(mlp, x),
                                   rtol=0, atol=1e-10)


def test_forward_batch_matches_single():
    rng = np.random.default_rng(7)
    mlp = init_branch_mlp(rng, n_classes=4)
    xs = rng.uniform(-0.5, 0.5, size=(30, 9))
    batch = mlp_forward_batch(mlp, xs)
    singles = np.stack([mlp_forward(mlp, x) for x in xs])
    np.testing.assert_allclose(batch, singles, rtol=0, atol=1e-12)


def test_forward_is_pure_and_deterministic():
    rng = np.random.default_rng(3)
    mlp = init_branch_mlp(rng, n_classes=10)
    x = rng.uniform(-0.5, 0.5, size=9)
    before = [a.copy() for a in flatten_params(mlp)]
    y1 = mlp_forward(mlp, x)
    y2 = mlp_forward(mlp, x)
    assert np.array_equal(y1, y2)  # bit-identical
    for a, b in zip(flatten_params(mlp), before):
        assert np.array_equal(a, b)


def test_parameter_count_small_branch():
    rng = np.random.default_rng(0)
    mlp = init_branch_mlp(rng, n_classes=10)
    # 4 hidden layers of (9x9 + 9) plus a bias-free 10x9 output.
    assert mlp_parameter_count(mlp) == 4 * (81 + 9) + 90


def test_backward_matches_finite_differences():
    rng = np.random.default_rng(42)
    mlp = init_branch_mlp(rng, n_classes=10)
    x = rng.uniform(-0.5, 0.5, size=9)
    upstream = rng.normal(size=10)
    grads = flatten_grads(mlp_backward(mlp, x, upstream))
    params = flatten_params(mlp)

    h = 1e-5
    for p, g in zip(params, grads):
        flat = p.reshape(-1)
        it = rng.choice(flat.size, size=min(20, flat.size), replace=False)
        for idx in it:
            orig = flat[idx]
            flat[idx] = orig + h
            up = float(upstream @ mlp_forward(mlp, x))
            flat[idx] = orig - h
            down = float(upstream @ mlp_forward(mlp, x))
            flat[idx] = orig
            fd = (up - down) / (2 * h)
            an = g.reshape(-1)[idx]
            denom = max(abs(fd), abs(an), 1e-8)
            assert abs(fd - an) / denom < 1e-4, (fd, an)


def test_backward_input_gradient_matches_finite_differences():
    rng = np.random.default_rng(11)
    mlp = init_branch_mlp(rng, n_classes=5)
    x = rng.uniform(-0.5, 0.5, size=9)
    upstream = rng.normal(size=5)
    gin = mlp_backward(mlp, x, upstream).input
    h = 1e-5
    for j in range(9):
        xp, xm = x.copy(), x.copy()
        xp[j] += h
        xm[j] -= h
        fd = float(upstream @ mlp_forward(mlp, xp) - upstream @ mlp_forward(mlp, xm)) / (2 * h)
        denom = max(abs(fd), abs(gin[j]), 1e-8)
        assert abs(fd - gin[j]) / denom < 1e-4


def test_backward_zero_upstream_gives_zero_grads():
    rng = np.random.default_rng(5)
    mlp = init_branch_mlp(rng, n_classes=3)
    x = rng.uniform(-0.5, 0.5, size=9)
    grads = mlp_backward(mlp, x, np.zeros(3))
    for g in flatten_grads(grads):
        assert np.all(g == 0.0)


def test_softmax_cross_entropy_uniform_logits():
    # Equal logits over 10 classes: loss is the log of the class count.
    loss, grad = softmax_cross_entropy(np.zeros(10), 3)
    np.testing.assert_allclose(loss, np.log(10.0), rtol=0, atol=1e-12)
    expected = np.full(10, 0.1)
    expected[3] -= 1.0
    np.testing.assert_allclose(grad, expected, rtol=0, atol=1e-12)


def test_softmax_cross_entropy_gradient_finite_differences():
    rng = np.random.default_rng(42)
    for _ in range(10):
        logits = rng.normal(scale=3.0, size=10)
        label = int(rng.integers(10))
        _, grad = softmax_cross_entropy(logits, label)
        h = 1e-6
        for j in range(10):
            lp, lm = logits.copy(), logits.copy()
            lp[j] += h
            lm[j] -= h
            fd = (softmax_cross_entropy(lp, label)[0]
                  - softmax_cross_entropy(lm, label)[0]) / (2 * h)
            assert abs(fd - grad[j]) < 1e-6, (fd, grad[j])


def test_softmax_cross_entropy_gradient_sums_to_zero():
    rng = np.random.default_rng(2)
    for _ in range(50):
        logits = rng.normal(scale=5.0, size=7)
        _, grad = softmax_cross_entropy(logits, int(rng.integers(7)))
        assert abs(grad.sum()) < 1e-12


def test_softmax_cross_entropy_extreme_logits_stable():
    loss, grad = softmax_cross_entropy(np.array([1e4, 0.0, -1e4]), 0)
    assert np.isfinite(loss) and np.all(np.isfinite(grad))
    loss, grad = softmax_cross_entropy(np.array([1e4, 0.0, -1e4]), 2)
    assert np.isfinite(loss) and np.all(np.isfinite(grad))


def test_softmax_cross_entropy_batch_matches_single():
    rng = np.random.default_rng(9)
    logits = rng.normal(size=(16, 10))
    labels = rng.integers(0, 10, size=16)
    loss_b, grad_b = softmax_cross_entropy_batch(logits, labels)
    losses, grads = zip(*[softmax_cross_entropy(l, int(y))
                          for l, y in zip(logits, labels)])
    np.testing.assert_allclose(loss_b, np.mean(losses), rtol=0, atol=1e-12)
    np.testing.assert_allclose(grad_b, np.stack(grads) / 16, rtol=0, atol=1e-12)


def hand_adam(params, grads_seq, lr=1e-3, b1=0.9, b2=0.999, eps=1e-8):
    """Transcribed Adam recurrence, scalar loops (oracle)."""
    params = [p.copy() for p in params]
    m = [np.zeros_like(p) for p in params]
    v = [np.zeros_like(p) for p in params]
    for t, grads in enumerate(grads_seq, start=1):
        for k, g in enumerate(grads):
            m[k] = b1 * m[k] + (1 - b1) * g
            v[k] = b2 * v[k] + (1 - b2) * g * g
            m_hat = m[k] / (1 - b1 ** t)
            v_hat = v[k] / (1 - b2 ** t)
            params[k] = params[k] - lr * m_hat / (np.sqrt(v_hat) + eps)
    return params


def test_adam_three_steps_match_hand_recurrence():
    rng = np.random.default_rng(42)
    params = [rng.normal(size=(4, 3)), rng.normal(size=4)]
    grads_seq = [[rng.normal(size=(4, 3)), rng.normal(size=4)] for _ in range(3)]
    expected = hand_adam(params, grads_seq)

    live = [p.copy() for p in params]
    state = AdamState(live)
    for grads in grads_seq:
        adam_step(state, live, grads)
    for got, want in zip(live, expected):
        np.testing.assert_allclose(got, want, rtol=0, atol=1e-12)


def test_adam_zero_gradient_is_noop():
    rng = np.random.default_rng(1)
    params = [rng.normal(size=(3, 3))]
    before = params[0].copy()
    state = AdamState(params)
    adam_step(state, params, [np.zeros((3, 3))])
    np.testing.assert_allclose(params[0], before, rtol=0, atol=0)


def test_adam_counter_increments():
    nn_core.reset_optimizer_step_count()
    params = [np.ones(3)]
    state = AdamState(params)
    adam_step(state, params, [np.ones(3)])
    adam_step(state, params, [np.ones(3)])
    assert nn_core.optimizer_step_count() == 2
    nn_core.reset_optimizer_step_count()
    assert nn_core.optimizer_step_count() == 0


def test_adam_rejects_shape_mismatch():
    params = [np.ones((2, 2))]
    state = AdamState(params)
    with pytest.raises(ValueError):
        adam_step(state, params, [np.ones(3)])


def test_dense_layer_validation():
    with pytest.raises(ValueError):
        DenseLayer(np.ones((3, 2)), np.ones(2))  # bias length mismatch
    with pytest.raises(ValueError):
        DenseLayer(np.array([[np.nan]]))
    with pytest.raises(ValueError):
        BranchMlp([], DenseLayer(np.ones((2, 9)), np.ones(2)))  # biased output


def test_forward_rejects_bad_shapes():
    rng = np.random.default_rng(0)
    mlp = init_branch_mlp(rng, n_classes=10)
    with pytest.raises(ValueError):
        mlp_forward(mlp, np.zeros(8))
    with pytest.raises(ValueError):
        mlp_backward(mlp, np.zeros(9), np.zeros(9))
    with pytest.raises(ValueError):
        softmax_cross_entropy(np.zeros(5), 5)
