"""Client loop: train locally on each broadcast model, upload only deltas.

Raw features never cross the transport; the only outbound payloads are the
strictly-schema'd protocol messages (delta, sample count, two scalar
metrics).
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from . import protocol as P
from .datasets import ActivityLabel
from .dp import DpConfig
from .errors import ConfigError, NotReadyError, ProtocolError
from .model import (
    LabeledBatch,
    ModelParams,
    evaluate,
    forward,
    run_round_schedule,
)
from .server import ClientUpdate

log = logging.getLogger(__name__)

HOLDOUT_FRACTION = 0.2
CONFIDENCE_THRESHOLD = 0.6

_SPLIT_TAG = 0x5B1  # fixed stream tag so the holdout split is stable across rounds


@dataclass(frozen=True)
class ClientConfig:
    client_id: str
    data_partition: str = "A"
    dp: DpConfig | None = None
    tl_enabled: bool = True
    seed: int = 0

    def validate(self) -> None:
        if not self.client_id:
            raise ConfigError("client_id must be non-empty")
        if self.seed < 0:
            raise ConfigError("seed must be non-negative")
        if self.dp is not None:
            self.dp.validate()


def holdout_split(data: LabeledBatch, seed: int) -> tuple[LabeledBatch, LabeledBatch]:
    """Seeded shuffle, last 20% held out for metrics only."""
    rng = np.random.default_rng(np.random.SeedSequence((seed, _SPLIT_TAG)))
    perm = rng.permutation(data.n)
    n_hold = max(1, int(data.n * HOLDOUT_FRACTION))
    if n_hold >= data.n:
        raise ConfigError("partition too small to hold out 20%")
    train_idx = perm[: data.n - n_hold]
    hold_idx = perm[data.n - n_hold :]
    return (
        LabeledBatch(data.features[train_idx], data.labels[train_idx]),
        LabeledBatch(data.features[hold_idx], data.labels[hold_idx]),
    )


def local_round(
    global_params: ModelParams,
    round_index: int,
    schedule,
    data: LabeledBatch,
    config: ClientConfig,
) -> ClientUpdate:
    """Run the round's schedule on the local split and package the upload.

    Deterministic in (config.seed, global_params, data); the holdout split
    is fixed across rounds. sample_count counts the whole partition.
    """
    config.validate()
    if data.n < 1:
        raise ConfigError("no local data")
    if config.dp is not None:
        config.dp.validate_for_dataset(data.n)
    train, hold = holdout_split(data, config.seed)
    updated, delta = run_round_schedule(
        global_params, train, schedule, round_index, config.seed, dp=config.dp
    )
    loss, accuracy = evaluate(updated, hold)
    return ClientUpdate(
        client_id=config.client_id,
        round=round_index,
        delta=delta,
        sample_count=data.n,
        metrics={"loss": loss, "accuracy": accuracy},
    )


def classify(params: ModelParams, features) -> tuple[ActivityLabel, float]:
    """Most likely activity and its probability; ties go to the lowest index."""
    if params is None:
        raise NotReadyError("no trained model available")
    x = np.asarray(features, dtype=np.float64)
    if x.ndim != 1:
        raise ConfigError("classify expects a single feature vector")
    probs = forward(params, x[None, :])[0]
    best = int(np.argmax(probs))
    return ActivityLabel(best), float(probs[best])


def decide_action(
    params: ModelParams, features, threshold: float = CONFIDENCE_THRESHOLD
) -> ActivityLabel | None:
    """Activity to act on, or None when confidence is below the threshold."""
    label, confidence = classify(params, features)
    return label if confidence >= threshold else None


class FLClient:
    """One client session over an endpoint; training runs synchronously."""

    def __init__(self, config: ClientConfig, data: LabeledBatch):
        config.validate()
        self.config = config
        self.data = data
        self.model: ModelParams | None = None
        self.session = P.ClientSession(config.client_id)
        self._training_active = False
        self.round_metrics: list[dict] = []

    def classify(self, features) -> tuple[ActivityLabel, float]:
        if self.model is None:
            raise NotReadyError("no trained model yet")
        if self._training_active:
            raise NotReadyError("training in progress")
        return classify(self.model, features)

    def _handle(self, actions, endpoint) -> None:
        for action in actions:
            if isinstance(action, P.Send):
                endpoint.send(P.encode(action.msg))
            elif isinstance(action, P.Warn):
                log.warning("client %s: %s", self.config.client_id, action.reason)
            elif isinstance(action, P.CloseConn):
                endpoint.close()
            elif isinstance(action, P.StartTraining):
                self._training_active = True
                try:
                    update = local_round(
                        action.model,
                        action.round,
                        action.schedule,
                        self.data,
                        self._round_config(action.dp),
                    )
                finally:
                    self._training_active = False
                self.model = action.model  # latest global, used for classification
                self.round_metrics.append(
                    {"round": action.round, **update.metrics}
                )
                done = P.TrainingComplete(
                    action.round, update.delta, update.sample_count, update.metrics
                )
                self._handle(self.session.step(done), endpoint)

    def _round_config(self, dp_from_server: DpConfig | None) -> ClientConfig:
        # Server-broadcast DP settings win over the local default.
        if dp_from_server is None:
            return self.config
        return ClientConfig(
            client_id=self.config.client_id,
            data_partition=self.config.data_partition,
            dp=dp_from_server,
            tl_enabled=self.config.tl_enabled,
            seed=self.config.seed,
        )

    def run(self, endpoint) -> list[dict]:
        """Drive the session until the server closes it; returns local metrics."""
        self._handle(self.session.start(), endpoint)
        while self.session.state not in (P.DONE, P.FAILED):
            frame = endpoint.recv(timeout=None)
            if frame is None:
                if self.session.state == P.DONE:
                    break
                raise ProtocolError("server connection lost")
            msg = P.decode(frame)
            self._handle(self.session.step(P.Received(msg)), endpoint)
        if self.session.state == P.FAILED:
            raise ProtocolError(f"session failed: {self.session.failure}")
        return self.round_metrics
