"""Differentially-private SGD step: per-microbatch clipping plus Gaussian noise.

One step: split the batch into ``num_microbatches`` equal chunks, clip each
chunk's gradient to L2 norm ``clipping_threshold``, sum, add N(0, (sigma*C)^2)
noise per coordinate, divide by the microbatch count, and descend.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import _kernels as K
from . import model as M
from .errors import ConfigError, NumericError, ShapeError

_CLIP_SLACK = 1e-12


@dataclass(frozen=True)
class DpConfig:
    noise_multiplier: float  # sigma
    clipping_threshold: float  # C, L2 bound
    num_microbatches: int = 32
    delta: float = 1e-4

    def validate(self) -> None:
        if self.noise_multiplier < 0:
            raise ConfigError("noise multiplier must be >= 0")
        if not self.clipping_threshold > 0:
            raise ConfigError("clipping threshold must be > 0")
        if not math.isfinite(self.clipping_threshold) and self.noise_multiplier > 0:
            raise ConfigError("infinite clipping threshold requires zero noise")
        if self.num_microbatches < 1:
            raise ConfigError("num_microbatches must be >= 1")
        if not 0 < self.delta < 1:
            raise ConfigError("delta must lie in (0, 1)")

    def validate_for_dataset(self, n_examples: int) -> None:
        """delta must stay below 1/n for the set being trained on."""
        self.validate()
        if n_examples >= 1 and self.delta >= 1.0 / n_examples:
            raise ConfigError(
                f"delta {self.delta} must be < 1/n = {1.0 / n_examples:.3g}"
            )

    def to_obj(self) -> dict:
        return {
            "noise_multiplier": self.noise_multiplier,
            "clipping_threshold": self.clipping_threshold,
            "num_microbatches": self.num_microbatches,
            "delta": self.delta,
        }

    @classmethod
    def from_obj(cls, obj: dict) -> "DpConfig":
        try:
            cfg = cls(
                noise_multiplier=float(obj["noise_multiplier"]),
                clipping_threshold=float(obj["clipping_threshold"]),
                num_microbatches=int(obj["num_microbatches"]),
                delta=float(obj["delta"]),
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise ConfigError(f"malformed dp config: {exc}") from exc
        cfg.validate()
        return cfg


def gradient_norm(grad) -> float:
    """Global L2 norm over a list of per-layer (dW, db) pairs."""
    sq = 0.0
    for gw, gb in grad:
        sq += float((gw * gw).sum() + (gb * gb).sum())
    return math.sqrt(sq)


def clip_gradient(grad, threshold: float):
    """Scale the whole-model gradient down to L2 norm <= threshold.

    Returns the input pairs unchanged when already under the bound.
    """
    if not threshold > 0:
        raise ConfigError("clipping threshold must be > 0")
    for gw, gb in grad:
        if not (np.all(np.isfinite(gw)) and np.all(np.isfinite(gb))):
            raise NumericError("non-finite gradient")
    norm = gradient_norm(grad)
    if norm <= threshold:
        return grad
    scale = threshold / norm
    return [(gw * scale, gb * scale) for gw, gb in grad]


def noisy_clipped_gradient(ws, bs, x, y, dp: DpConfig, rng: np.random.Generator):
    """The averaged DP gradient for one batch, on raw weight/bias lists.

    Noise is drawn layer by layer (weights then bias) from ``rng``;
    nothing is drawn when the noise multiplier is zero, so a zero-noise
    run consumes the same stream as a plain-SGD run.
    """
    n = x.shape[0]
    if n % dp.num_microbatches != 0:
        raise ConfigError(
            f"batch size {n} must be a multiple of {dp.num_microbatches} microbatches"
        )
    gws, gbs, _, max_norm = K.clipped_grad_sum(
        ws, bs, x, y, dp.clipping_threshold, dp.num_microbatches
    )
    assert max_norm <= dp.clipping_threshold + _CLIP_SLACK
    sigma_c = dp.noise_multiplier * dp.clipping_threshold
    if sigma_c > 0:
        for l in range(len(gws)):
            gws[l] += rng.normal(0.0, sigma_c, size=gws[l].shape)
            gbs[l] += rng.normal(0.0, sigma_c, size=gbs[l].shape)
    m = float(dp.num_microbatches)
    return [gw / m for gw in gws], [gb / m for gb in gbs]


def dp_sgd_step(
    params: M.ModelParams,
    batch: M.LabeledBatch,
    learning_rate: float,
    dp: DpConfig,
    rng: np.random.Generator,
    freeze_mask: tuple[bool, ...] | None = None,
) -> M.ModelParams:
    """One DP-SGD step; deterministic for a fixed generator state."""
    dp.validate()
    if batch.features.shape[1] != params.feature_dim:
        raise ShapeError("batch feature dim does not match model")
    ws = [l.weights for l in params.layers]
    bs = [l.bias for l in params.layers]
    gws, gbs = noisy_clipped_gradient(ws, bs, batch.features, batch.labels, dp, rng)
    return M.sgd_step(params, list(zip(gws, gbs)), learning_rate, freeze_mask)
