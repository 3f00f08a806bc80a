"""Privacy-loss accounting for DP-SGD via Renyi divergence bookkeeping.

Tracks the Poisson-subsampled Gaussian mechanism: per-step Renyi values are
computed per order, scale linearly with step count, and convert to an
(epsilon, delta) pair by minimizing eps = rdp(a) + log(1/delta)/(a - 1)
over the order grid.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError

# Standard order grid for the accountant.
ORDER_GRID = (
    1.25, 1.5, 1.75, 2.0, 2.5, 3.0, 4.0, 5.0, 6.0, 8.0,
    10.0, 12.0, 16.0, 20.0, 24.0, 28.0, 32.0, 48.0, 64.0,
)

_MAX_SERIES_TERMS = 100_000


@dataclass(frozen=True)
class PrivacySpend:
    epsilon: float
    delta: float
    orders_evaluated: tuple[float, ...]
    optimal_order: float
    steps: int
    sampling_rate: float


def _log_add(a: float, b: float) -> float:
    if a == -math.inf:
        return b
    if b == -math.inf:
        return a
    hi, lo = (a, b) if a >= b else (b, a)
    return hi + math.log1p(math.exp(lo - hi))


def _log_sub(a: float, b: float) -> float:
    """log(exp(a) - exp(b)) for a >= b."""
    if b == -math.inf:
        return a
    if a == b:
        return -math.inf
    if a < b:
        raise ValueError("log_sub needs a >= b")
    return a + math.log1p(-math.exp(b - a))


def _log_erfc(x: float) -> float:
    if x < 25.0:
        return math.log(math.erfc(x))
    # Asymptotic tail; erfc underflows past ~27.
    xx = x * x
    return -xx - math.log(x) - 0.5 * math.log(math.pi) + math.log1p(
        -0.5 / xx + 0.75 / (xx * xx)
    )


def _log_a_int(q: float, sigma: float, alpha: int) -> float:
    """log of the alpha-th moment of the subsampled-Gaussian ratio, integer order."""
    log_q = math.log(q)
    log_1mq = math.log1p(-q)
    total = -math.inf
    log_binom = 0.0  # log C(alpha, 0)
    for i in range(alpha + 1):
        term = (
            log_binom
            + i * log_q
            + (alpha - i) * log_1mq
            + (i * i - i) / (2.0 * sigma * sigma)
        )
        total = _log_add(total, term)
        if i < alpha:
            log_binom += math.log(alpha - i) - math.log(i + 1)
    return total


def _log_a_frac(q: float, sigma: float, alpha: float) -> float:
    """Fractional-order moment via the split-integral form with erfc tails."""
    log_a0 = -math.inf
    log_a1 = -math.inf
    z0 = sigma * sigma * math.log(1.0 / q - 1.0) + 0.5
    log_q = math.log(q)
    log_1mq = math.log1p(-q)
    sqrt2s = math.sqrt(2.0) * sigma
    two_s2 = 2.0 * sigma * sigma

    # Generalized binomial coefficients, tracked as (log|c|, sign).
    log_coef = 0.0
    sign = 1.0
    i = 0
    while i < _MAX_SERIES_TERMS:
        j = alpha - i
        log_t0 = log_coef + i * log_q + j * log_1mq
        log_t1 = log_coef + j * log_q + i * log_1mq
        log_e0 = math.log(0.5) + _log_erfc((i - z0) / sqrt2s)
        log_e1 = math.log(0.5) + _log_erfc((z0 - j) / sqrt2s)
        log_s0 = log_t0 + (i * i - i) / two_s2 + log_e0
        log_s1 = log_t1 + (j * j - j) / two_s2 + log_e1
        if sign > 0:
            log_a0 = _log_add(log_a0, log_s0)
            log_a1 = _log_add(log_a1, log_s1)
        else:
            log_a0 = _log_sub(log_a0, log_s0)
            log_a1 = _log_sub(log_a1, log_s1)
        if max(log_s0, log_s1) < max(log_a0, log_a1) - 45.0 and i > alpha:
            break
        # next coefficient: c * (alpha - i) / (i + 1)
        factor = (alpha - i) / (i + 1)
        if factor == 0.0:
            break
        if factor < 0:
            sign = -sign
        log_coef += math.log(abs(factor))
        i += 1
    return _log_add(log_a0, log_a1)


def per_step_rdp(q: float, sigma: float, alpha: float) -> float:
    """Renyi privacy of one subsampled Gaussian step at one order."""
    if not 0 < q <= 1:
        raise ConfigError("sampling rate must lie in (0, 1]")
    if alpha <= 1:
        raise ConfigError("orders must be > 1")
    if sigma < 0:
        raise ConfigError("noise multiplier must be >= 0")
    if sigma == 0:
        return math.inf
    if q == 1.0:
        return alpha / (2.0 * sigma * sigma)
    if float(alpha).is_integer():
        log_a = _log_a_int(q, sigma, int(alpha))
    else:
        log_a = _log_a_frac(q, sigma, alpha)
    return log_a / (alpha - 1.0)


def rdp_subsampled_gaussian(q: float, sigma: float, steps: int, orders=ORDER_GRID):
    """Cumulative per-order Renyi values: steps x per-step value."""
    if steps < 1:
        raise ConfigError("steps must be >= 1")
    orders = tuple(float(a) for a in orders)
    return np.array([steps * per_step_rdp(q, sigma, a) for a in orders])


def rdp_to_epsilon(
    rdp,
    orders,
    delta: float,
    *,
    steps: int = 0,
    sampling_rate: float = 1.0,
) -> PrivacySpend:
    """Pick the order minimizing eps = rdp(a) + log(1/delta)/(a - 1)."""
    orders = tuple(float(a) for a in orders)
    rdp = np.asarray(rdp, dtype=np.float64)
    if len(orders) == 0:
        raise ConfigError("at least one order is required")
    if rdp.shape != (len(orders),):
        raise ConfigError("rdp values and orders must align")
    if not 0 < delta < 1:
        raise ConfigError("delta must lie in (0, 1)")
    if any(a <= 1 for a in orders):
        raise ConfigError("orders must be > 1")
    log_inv_delta = math.log(1.0 / delta)
    candidates = [r + log_inv_delta / (a - 1.0) for r, a in zip(rdp, orders)]
    best = int(np.argmin(candidates))
    return PrivacySpend(
        epsilon=float(candidates[best]),
        delta=delta,
        orders_evaluated=orders,
        optimal_order=orders[best],
        steps=steps,
        sampling_rate=sampling_rate,
    )


def compute_privacy_spend(
    q: float,
    sigma: float,
    steps: int,
    delta: float,
    orders=ORDER_GRID,
) -> PrivacySpend:
    """Full accounting pass for a DP-SGD run."""
    rdp = rdp_subsampled_gaussian(q, sigma, steps, orders)
    return rdp_to_epsilon(rdp, orders, delta, steps=steps, sampling_rate=q)


def dp_sgd_spend(
    n_examples: int,
    batch_size: int,
    epochs: int,
    sigma: float,
    delta: float,
    orders=ORDER_GRID,
) -> PrivacySpend:
    """Accounting from training-shape quantities.

    Steps per epoch follow the trainer's drop-last batching, and the
    sampling rate is batch_size/n.
    """
    if n_examples < 1 or batch_size < 1 or batch_size > n_examples:
        raise ConfigError("need 1 <= batch_size <= n_examples")
    if epochs < 1:
        raise ConfigError("epochs must be >= 1")
    q = batch_size / n_examples
    steps = epochs * (n_examples // batch_size)
    return compute_privacy_spend(q, sigma, steps, delta, orders)
