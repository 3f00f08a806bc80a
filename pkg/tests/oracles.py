"""Independent reference implementations used to check the package.

Everything here is written from the definitions, with plain loops or
high-precision arithmetic, and never calls the code paths under test.
"""

from __future__ import annotations

import math

import numpy as np

from fedhome.model import DenseLayer, LabeledBatch, ModelParams, init_model


def oracle_forward(params: ModelParams, x: np.ndarray) -> np.ndarray:
    """Hand-rolled forward pass: explicit loops, relu chain, softmax."""
    out = np.zeros((x.shape[0], params.layers[-1].weights.shape[0]))
    for r in range(x.shape[0]):
        a = [float(v) for v in x[r]]
        for li, layer in enumerate(params.layers):
            w, b = layer.weights, layer.bias
            z = []
            for o in range(w.shape[0]):
                acc = float(b[o])
                for j in range(w.shape[1]):
                    acc += float(w[o, j]) * a[j]
                z.append(acc)
            if li == len(params.layers) - 1:
                mx = max(z)
                exps = [math.exp(v - mx) for v in z]
                s = sum(exps)
                a = [e / s for e in exps]
            else:
                a = [max(v, 0.0) for v in z]
        out[r] = a
    return out


def oracle_loss(params: ModelParams, batch: LabeledBatch) -> float:
    probs = oracle_forward(params, batch.features)
    total = 0.0
    for r in range(batch.n):
        total -= math.log(max(probs[r, batch.labels[r]], 1e-300))
    return total / batch.n


def _perturbed(params: ModelParams, layer: int, which: str, index, h: float) -> ModelParams:
    copy = params.copy()
    arr = copy.layers[layer].weights if which == "w" else copy.layers[layer].bias
    arr[index] += h
    return copy


def fd_gradient(params: ModelParams, batch: LabeledBatch, h: float = 1e-4):
    """Central finite differences of the mean cross-entropy."""
    grads = []
    for li, layer in enumerate(params.layers):
        gw = np.zeros_like(layer.weights)
        for idx in np.ndindex(*layer.weights.shape):
            up = oracle_loss(_perturbed(params, li, "w", idx, h), batch)
            dn = oracle_loss(_perturbed(params, li, "w", idx, -h), batch)
            gw[idx] = (up - dn) / (2 * h)
        gb = np.zeros_like(layer.bias)
        for idx in np.ndindex(*layer.bias.shape):
            up = oracle_loss(_perturbed(params, li, "b", idx, h), batch)
            dn = oracle_loss(_perturbed(params, li, "b", idx, -h), batch)
            gb[idx] = (up - dn) / (2 * h)
        grads.append((gw, gb))
    return grads


def relative_error(a: np.ndarray, b: np.ndarray, floor: float = 1e-6) -> float:
    denom = np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)
    return float(np.max(np.abs(a - b) / denom))


def min_preactivation_margin(params: ModelParams, x: np.ndarray) -> float:
    """Distance of hidden pre-activations from the relu kink."""
    margin = math.inf
    a = x
    for layer in params.layers[:-1]:
        z = a @ layer.weights.T + layer.bias
        margin = min(margin, float(np.min(np.abs(z))))
        a = np.maximum(z, 0.0)
    return margin


def small_model_and_batch(seed: int, margin: float = 1e-3):
    """A <=200-parameter model and batch with pre-activations clear of the
    relu kink, so finite differences are trustworthy. Resamples subseeds
    deterministically until the margin holds."""
    for attempt in range(100):
        rng = np.random.default_rng(np.random.SeedSequence((seed, attempt)))
        model = init_model(rng, feature_dim=6, hidden=(8,), classes=5)
        x = rng.normal(size=(4, 6))
        y = rng.integers(0, 5, size=4)
        if min_preactivation_margin(model, x) > margin:
            return model, LabeledBatch(x, y)
    raise AssertionError("could not find a kink-free configuration")


def oracle_grad(params: ModelParams, batch: LabeledBatch):
    """Scalar-loop backprop of the mean cross-entropy, per-example.

    Validated against fd_gradient in the test suite; exact enough (1e-12)
    to serve as the reference for the clipped-SGD pipeline.
    """
    grads = [
        (np.zeros_like(l.weights), np.zeros_like(l.bias)) for l in params.layers
    ]
    n = batch.n
    for r in range(n):
        x = batch.features[r]
        acts = [x]
        a = x
        for li, layer in enumerate(params.layers):
            z = layer.weights @ a + layer.bias
            if li == len(params.layers) - 1:
                z = z - z.max()
                e = np.exp(z)
                a = e / e.sum()
            else:
                a = np.maximum(z, 0.0)
            acts.append(a)
        delta = acts[-1].copy()
        delta[batch.labels[r]] -= 1.0
        delta /= n
        for li in range(len(params.layers) - 1, -1, -1):
            gw, gb = grads[li]
            for o in range(len(delta)):
                gb[o] += delta[o]
                for j in range(len(acts[li])):
                    gw[o, j] += delta[o] * acts[li][j]
            if li > 0:
                delta = (params.layers[li].weights.T @ delta) * (acts[li] > 0.0)
    return grads


def oracle_clip(arrays, threshold: float):
    """Norm-and-scale reference for whole-model clipping."""
    sq = 0.0
    for a in arrays:
        sq += float(np.sum(np.asarray(a, dtype=np.float64) ** 2))
    norm = math.sqrt(sq)
    if norm <= threshold:
        return [np.array(a, dtype=np.float64) for a in arrays], norm
    return [np.asarray(a) * (threshold / norm) for a in arrays], norm


def oracle_clipped_microbatch_grad(params: ModelParams, batch: LabeledBatch,
                                   clip: float, num_microbatches: int):
    """Reference DP gradient: per-chunk scalar-loop gradients, clip, sum."""
    n = batch.n
    k = n // num_microbatches
    sums = None
    for m in range(num_microbatches):
        rows = slice(m * k, (m + 1) * k)
        chunk = LabeledBatch(batch.features[rows], batch.labels[rows])
        grads = oracle_grad(params, chunk)
        flat = [g for pair in grads for g in pair]
        clipped, _ = oracle_clip(flat, clip)
        if sums is None:
            sums = clipped
        else:
            sums = [s + c for s, c in zip(sums, clipped)]
    return sums


def oracle_weighted_mean(global_arrays, deltas, counts):
    """High-precision weighted FedAvg: long-double accumulation."""
    total = np.longdouble(sum(counts))
    out = []
    for li in range(len(global_arrays)):
        acc = np.zeros_like(global_arrays[li], dtype=np.longdouble)
        for delta, count in zip(deltas, counts):
            acc += (np.longdouble(count) / total) * delta[li].astype(np.longdouble)
        out.append(np.asarray(global_arrays[li], dtype=np.longdouble) + acc)
    return [np.asarray(a, dtype=np.float64) for a in out]


def oracle_rdp_integral(q: float, sigma: float, alpha: float) -> float:
    """Renyi value of one subsampled-Gaussian step by direct quadrature."""
    import mpmath as mp

    with mp.workdps(60):
        qm = mp.mpf(q)
        sm = mp.mpf(sigma)
        am = mp.mpf(alpha)

        def integrand(z):
            mu0 = mp.npdf(z, 0, sm)
            mu1 = mp.npdf(z, 1, sm)
            mu = (1 - qm) * mu0 + qm * mu1
            return mu0 * (mu / mu0) ** am

        points = [-mp.inf, 0, 1, am, 2 * am, mp.inf]
        val = mp.quad(integrand, points)
        return float(mp.log(val) / (am - 1))


def one_vs_rest_least_squares(train: LabeledBatch, test: LabeledBatch) -> float:
    """Linear baseline accuracy: per-class least squares on +-1 targets."""
    x = np.hstack([train.features, np.ones((train.n, 1))])
    classes = int(train.labels.max()) + 1
    targets = -np.ones((train.n, classes))
    targets[np.arange(train.n), train.labels] = 1.0
    coef, *_ = np.linalg.lstsq(x, targets, rcond=None)
    xt = np.hstack([test.features, np.ones((test.n, 1))])
    pred = np.argmax(xt @ coef, axis=1)
    return float(np.mean(pred == test.labels))


def zero_model(feature_dim: int = 32, hidden=(64, 32), classes: int = 5) -> ModelParams:
    dims = (feature_dim, *hidden, classes)
    layers = []
    for i in range(len(dims) - 1):
        act = "softmax" if i == len(dims) - 2 else "relu"
        layers.append(DenseLayer(np.zeros((dims[i + 1], dims[i])), np.zeros(dims[i + 1]), act))
    return ModelParams(layers, 0)
