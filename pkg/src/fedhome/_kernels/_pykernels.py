"""NumPy implementations of the training hot kernels.

All kernels operate on plain lists of float64 arrays: ``weights[l]`` has
shape (out, in), ``biases[l]`` has shape (out,), hidden layers are relu and
the final layer is softmax. This is the fallback backend; the compiled
backend in ``_cykernels`` implements the same contracts.
"""

from __future__ import annotations

import numpy as np

BACKEND = "py"


def _forward_cached(weights, biases, x):
    """Post-activation outputs per layer; the last entry is the softmax."""
    acts = []
    a = x
    last = len(weights) - 1
    for l, (w, b) in enumerate(zip(weights, biases)):
        z = a @ w.T + b
        if l == last:
            z -= z.max(axis=1, keepdims=True)
            e = np.exp(z)
            a = e / e.sum(axis=1, keepdims=True)
        else:
            a = np.maximum(z, 0.0)
        acts.append(a)
    return acts


def forward_probs(weights, biases, x):
    """Softmax class probabilities, shape (n, classes)."""
    return _forward_cached(weights, biases, x)[-1]


def _log_probs(weights, biases, x):
    a = x
    last = len(weights) - 1
    for l, (w, b) in enumerate(zip(weights, biases)):
        z = a @ w.T + b
        if l == last:
            z -= z.max(axis=1, keepdims=True)
            return z - np.log(np.exp(z).sum(axis=1, keepdims=True))
        a = np.maximum(z, 0.0)
    raise AssertionError("unreachable")


def loss_and_grad(weights, biases, x, y):
    """Mean cross-entropy over the batch and its gradient.

    Returns (loss, grad_weights, grad_biases) with grads shaped like the
    parameters.
    """
    n = x.shape[0]
    acts = _forward_cached(weights, biases, x)
    probs = acts[-1]
    idx = np.arange(n)
    loss = float(-np.mean(np.log(np.maximum(probs[idx, y], 1e-300))))

    delta = probs.copy()
    delta[idx, y] -= 1.0
    delta /= n

    gws: list[np.ndarray] = [None] * len(weights)  # type: ignore[list-item]
    gbs: list[np.ndarray] = [None] * len(weights)  # type: ignore[list-item]
    for l in range(len(weights) - 1, -1, -1):
        a_prev = x if l == 0 else acts[l - 1]
        gws[l] = delta.T @ a_prev
        gbs[l] = delta.sum(axis=0)
        if l > 0:
            delta = (delta @ weights[l]) * (acts[l - 1] > 0.0)
    return loss, gws, gbs


def clipped_grad_sum(weights, biases, x, y, clip, num_microbatches):
    """Sum of per-microbatch gradients, each L2-clipped to ``clip``.

    The batch is split into ``num_microbatches`` equal consecutive chunks;
    each chunk's gradient is the gradient of its own mean cross-entropy.
    Returns (grad_weights_sum, grad_biases_sum, mean_loss, max_clipped_norm).
    """
    n = x.shape[0]
    m = int(num_microbatches)
    if n % m != 0:
        raise ValueError(f"batch size {n} not divisible by {m} microbatches")
    k = n // m

    acts = _forward_cached(weights, biases, x)
    probs = acts[-1]
    idx = np.arange(n)
    loss = float(-np.mean(np.log(np.maximum(probs[idx, y], 1e-300))))

    # Per-example deltas scaled so that summing within a chunk yields the
    # chunk-mean gradient.
    delta = probs.copy()
    delta[idx, y] -= 1.0
    delta /= k

    per_w = []  # per layer: (m, out, in)
    per_b = []  # per layer: (m, out)
    for l in range(len(weights) - 1, -1, -1):
        a_prev = x if l == 0 else acts[l - 1]
        d3 = delta.reshape(m, k, -1)
        a3 = a_prev.reshape(m, k, -1)
        per_w.append(np.einsum("mko,mki->moi", d3, a3))
        per_b.append(d3.sum(axis=1))
        if l > 0:
            delta = (delta @ weights[l]) * (acts[l - 1] > 0.0)
    per_w.reverse()
    per_b.reverse()

    sq = np.zeros(m)
    for gw3, gb2 in zip(per_w, per_b):
        sq += (gw3 * gw3).sum(axis=(1, 2)) + (gb2 * gb2).sum(axis=1)
    norms = np.sqrt(sq)
    factors = np.ones(m)
    over = norms > clip
    factors[over] = clip / norms[over]
    max_clipped = float(np.max(np.minimum(norms, clip))) if m else 0.0

    gws = [np.einsum("m,moi->oi", factors, gw3) for gw3 in per_w]
    gbs = [factors @ gb2 for gb2 in per_b]
    return gws, gbs, loss, max_clipped
