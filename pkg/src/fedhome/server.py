"""Round orchestration and sample-count-weighted aggregation of client deltas."""

from __future__ import annotations

import logging
import queue
import threading
import time
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import protocol as P
from .dp import DpConfig
from .errors import ConfigError, ProtocolError, RunError, ShapeError
from .model import (
    LabeledBatch,
    ModelParams,
    ParamDelta,
    add_delta,
    evaluate,
    standard_schedule,
)

log = logging.getLogger(__name__)

SERVER_ID = "server"


@dataclass
class ClientUpdate:
    client_id: str
    round: int
    delta: ParamDelta
    sample_count: int
    metrics: dict

    def validate(self, global_params: ModelParams | None = None) -> None:
        if not self.client_id:
            raise ConfigError("client_id must be non-empty")
        if self.sample_count < 1:
            raise ConfigError("sample_count must be >= 1")
        if global_params is not None:
            self.delta.validate_against(global_params)


@dataclass
class RoundState:
    round: int
    expected: set[str]
    received: dict[str, ClientUpdate] = field(default_factory=dict)

    @property
    def complete(self) -> bool:
        return set(self.received) == self.expected and bool(self.expected)


def aggregate(global_params: ModelParams, updates: list[ClientUpdate]) -> ModelParams:
    """W' = W + sum_i (n_i / sum_j n_j) * delta_i, reduced in client-id order.

    Sorting makes the reduction order, and therefore the result, independent
    of the input permutation.
    """
    if not updates:
        raise ConfigError("no updates to aggregate")
    rounds = {u.round for u in updates}
    if len(rounds) != 1:
        raise ProtocolError(f"updates span rounds {sorted(rounds)}")
    ids = [u.client_id for u in updates]
    if len(set(ids)) != len(ids):
        raise ProtocolError("duplicate client ids in update list")
    for u in updates:
        u.validate(global_params)
        if len(u.delta.layers) != len(global_params.layers):
            raise ShapeError("update layer count mismatch")

    ordered = sorted(updates, key=lambda u: u.client_id)
    total = float(sum(u.sample_count for u in ordered))
    acc = [
        (np.zeros_like(l.weights), np.zeros_like(l.bias))
        for l in global_params.layers
    ]
    for u in ordered:
        w = u.sample_count / total
        for (aw, ab), (dw, db) in zip(acc, u.delta.layers):
            aw += w * dw
            ab += w * db
    merged = ParamDelta(acc, round=next(iter(rounds)))
    return add_delta(global_params, merged, version=merged.round)


@dataclass
class ServerConfig:
    rounds: int = 10
    expected_clients: int = 3
    dp: DpConfig | None = None
    eval_data: LabeledBatch | None = None
    schedule_fn: Callable | None = None  # (round_index, n_layers) -> RoundSchedule
    register_timeout: float = 30.0
    round_timeout: float = 600.0

    def __post_init__(self):
        if self.schedule_fn is None:
            self.schedule_fn = standard_schedule
        if self.rounds < 1:
            raise ConfigError("total_rounds must be >= 1")
        if self.expected_clients < 1:
            raise ConfigError("at least one client is required")


class FLServer:
    """Drives registration, per-round broadcast/barrier/aggregate, and reporting."""

    def __init__(self, initial_model: ModelParams, config: ServerConfig):
        initial_model.validate()
        self.global_params = initial_model
        self.config = config
        self.history: list[dict] = []

    # -- wiring ---------------------------------------------------------

    def _reader(self, index: int, endpoint, inbox: queue.Queue) -> None:
        while True:
            try:
                frame = endpoint.recv(timeout=None)
            except (ProtocolError, OSError) as exc:
                inbox.put((index, ("error", str(exc))))
                return
            if frame is None:
                inbox.put((index, ("closed", "")))
                return
            inbox.put((index, ("frame", frame)))

    def run(self, endpoints: list) -> dict:
        """Run all rounds over pre-established connections and report."""
        if len(endpoints) < self.config.expected_clients:
            raise ConfigError("fewer endpoints than expected clients")
        start = time.perf_counter()
        inbox: queue.Queue = queue.Queue()
        peers = [P.ServerPeerSession() for _ in endpoints]
        threads = []
        for i, ep in enumerate(endpoints):
            t = threading.Thread(target=self._reader, args=(i, ep, inbox), daemon=True)
            t.start()
            threads.append(t)

        active: set[int] = set()
        try:
            self._register(endpoints, peers, inbox, active)
            for r in range(1, self.config.rounds + 1):
                self._run_round(r, endpoints, peers, inbox, active)
        finally:
            for i in active:
                try:
                    endpoints[i].send(P.encode(P.Message(P.BYE, self._last_round(), SERVER_ID)))
                except (ProtocolError, OSError):
                    pass
            for ep in endpoints:
                ep.close()
            for t in threads:
                t.join(timeout=5.0)

        report = {
            "rounds": self.history,
            "final_accuracy": self.history[-1]["global_accuracy"] if self.history else None,
            "final_round": self._last_round(),
            "client_ids": sorted(peers[i].client_id for i in active),
            "wall_time_s": time.perf_counter() - start,
        }
        return report

    def _last_round(self) -> int:
        return self.history[-1]["round"] if self.history else 0

    def _register(self, endpoints, peers, inbox, active: set[int]) -> None:
        deadline = time.monotonic() + self.config.register_timeout
        ids_seen: set[str] = set()
        while len(active) < self.config.expected_clients:
            remaining = deadline - time.monotonic()
            if remaining <= 0:
                raise RunError("registration timed out")
            try:
                index, (kind, data) = inbox.get(timeout=remaining)
            except queue.Empty:
                raise RunError("registration timed out") from None
            if kind != "frame":
                raise RunError(f"client connection lost during registration: {data}")
            msg = P.decode(data)
            actions = peers[index].step(P.Received(msg))
            self._apply(index, actions, endpoints, active, None)
            if peers[index].state == P.READY:
                if peers[index].client_id in ids_seen:
                    raise RunError(f"duplicate client id {peers[index].client_id!r}")
                ids_seen.add(peers[index].client_id)
                active.add(index)
                welcome = P.Message(
                    P.WELCOME, 0, SERVER_ID, {"total_rounds": self.config.rounds}
                )
                endpoints[index].send(P.encode(welcome))

    def _drop(self, index: int, endpoints, active: set[int], state: RoundState | None) -> None:
        if index not in active:
            return
        active.discard(index)
        try:
            endpoints[index].close()
        except OSError:
            pass
        if state is not None:
            state.expected = {cid for cid in state.expected if cid != self._peer_ids[index]}
            state.received.pop(self._peer_ids[index], None)

    def _apply(self, index, actions, endpoints, active: set[int], state) -> None:
        for action in actions:
            if isinstance(action, P.Send):
                try:
                    endpoints[index].send(P.encode(action.msg))
                except (ProtocolError, OSError):
                    pass
            elif isinstance(action, P.Warn):
                log.warning("peer %d: %s", index, action.reason)
            elif isinstance(action, P.CloseConn):
                self._drop(index, endpoints, active, state)
            elif isinstance(action, P.Deliver):
                update = ClientUpdate(
                    action.client_id,
                    action.round,
                    action.delta,
                    action.sample_count,
                    dict(action.metrics),
                )
                update.validate(self.global_params)
                if state is not None and action.round == state.round:
                    state.received[action.client_id] = update

    def _run_round(self, r: int, endpoints, peers, inbox, active: set[int]) -> None:
        if not active:
            raise RunError("no clients left")
        self._peer_ids = {i: peers[i].client_id for i in range(len(peers))}
        schedule = self.config.schedule_fn(r, len(self.global_params.layers))
        state = RoundState(
            round=r, expected={peers[i].client_id for i in active}
        )
        broadcast = P.Message(
            P.GLOBAL_MODEL,
            r,
            SERVER_ID,
            {"model": self.global_params, "schedule": schedule, "dp": self.config.dp},
        )
        frame = P.encode(broadcast)
        for i in sorted(active):
            peers[i].sent_global(r)
            endpoints[i].send(frame)

        failures = 0
        deadline = time.monotonic() + self.config.round_timeout
        while not state.complete:
            if not state.expected:
                raise RunError(f"round {r}: all clients dropped")
            remaining = deadline - time.monotonic()
            if remaining <= 0:
                raise RunError(f"round {r} timed out")
            try:
                index, (kind, data) = inbox.get(timeout=remaining)
            except queue.Empty:
                raise RunError(f"round {r} timed out") from None
            if index not in active:
                continue
            if kind != "frame":
                failures += 1
                log.warning("round %d: dropping client %s (%s)", r, self._peer_ids[index], data)
                self._drop(index, endpoints, active, state)
            else:
                try:
                    msg = P.decode(data)
                except ProtocolError as exc:
                    failures += 1
                    log.warning("round %d: protocol error from %s: %s", r, self._peer_ids[index], exc)
                    self._drop(index, endpoints, active, state)
                    continue
                before = peers[index].state
                actions = peers[index].step(P.Received(msg))
                self._apply(index, actions, endpoints, active, state)
                if peers[index].state == P.FAILED and before != P.FAILED:
                    failures += 1
            if failures >= 2:
                raise RunError(f"round {r}: aborted after two client failures")

        updates = [state.received[cid] for cid in sorted(state.received)]
        self.global_params = aggregate(self.global_params, updates)
        if self.config.eval_data is not None:
            g_loss, g_acc = evaluate(self.global_params, self.config.eval_data)
        else:
            g_loss, g_acc = None, None
        done = P.Message(
            P.ROUND_DONE,
            r,
            SERVER_ID,
            {
                "metrics": {
                    "global_loss": g_loss if g_loss is not None else 0.0,
                    "global_accuracy": g_acc if g_acc is not None else 0.0,
                }
            },
        )
        done_frame = P.encode(done)
        for i in sorted(active):
            try:
                endpoints[i].send(done_frame)
            except (ProtocolError, OSError):
                pass
        self.history.append(
            {
                "round": r,
                "global_accuracy": g_acc,
                "global_loss": g_loss,
                "clients": sorted(state.received),
                "client_metrics": {
                    cid: dict(state.received[cid].metrics) for cid in sorted(state.received)
                },
                "dropped": failures,
            }
        )
