"""Discrete-event simulator: synchronous FedAvg training, unlearning in
async or sync mode, and post-learning rounds on a simulated clock.

Cost model: one local pass over ``n`` samples costs
``n * unit_cost * speed_factor`` simulated seconds; every message costs
``comm_latency``. The server computes at ``server_speed``.
"""

from __future__ import annotations

import heapq
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, NamedTuple, Sequence

import numpy as np

from .data_pipeline import AugmentSpec, DatasetShard
from .errors import ConfigError, ScenarioError
from .tensor_nn import ModelSpec, ParamVector, init_params, l2_distance
from .training import INIT, POST, PROVISIONAL, TRAIN, accuracy, derive_seed, fedavg_round
from .unlearning_core import UnlearnConfig, UnlearnOutcome, afu_ic

# processing priority for events at the same instant
KINDS = ("LocalUpdateReady", "RoundAggregated", "UnlearnRequested", "UnlearnUploadReady", "CalibrationDone")
_PRIORITY = {k: i for i, k in enumerate(KINDS)}


@dataclass
class ClientState:
    id: int
    shard: DatasetShard
    w_local_prev: ParamVector | None = None
    speed_factor: float = 1.0
    is_target: bool = False

    def __post_init__(self):
        if not self.speed_factor > 0:
            raise ConfigError(f"client {self.id}: speed_factor must be positive")


@dataclass(frozen=True)
class SimEvent:
    time: float
    kind: str
    client: int = -1
    note: str = ""

    def to_json(self) -> str:
        return json.dumps({"t": self.time, "kind": self.kind, "client": self.client, "note": self.note})


@dataclass
class Timeline:
    events: list[SimEvent] = field(default_factory=list)
    blocked_time_per_client: dict[int, float] = field(default_factory=dict)
    latency: float = 0.0

    def write_jsonl(self, path: str | Path) -> None:
        Path(path).write_text("".join(e.to_json() + "\n" for e in self.events))


def read_jsonl(path: str | Path) -> list[SimEvent]:
    out = []
    for line in Path(path).read_text().splitlines():
        if line.strip():
            d = json.loads(line)
            out.append(SimEvent(float(d["t"]), d["kind"], int(d["client"]), d["note"]))
    return out


class EventQueue:
    """Min-heap ordered by (time, kind priority, client id, insertion)."""

    def __init__(self):
        self._heap: list = []
        self._count = 0
        self.now = 0.0
        self.log: list[SimEvent] = []

    def push(self, time: float, kind: str, client: int = -1, note: str = "", payload: Any = None) -> None:
        if kind not in _PRIORITY:
            raise ConfigError(f"unknown event kind {kind!r}")
        heapq.heappush(self._heap, (time, _PRIORITY[kind], client, self._count, SimEvent(time, kind, client, note), payload))
        self._count += 1

    def pop(self) -> tuple[SimEvent, Any]:
        time, _, _, _, ev, payload = heapq.heappop(self._heap)
        if time < self.now:
            raise RuntimeError("event queue went back in time")
        self.now = time
        self.log.append(ev)
        return ev, payload

    def peek_time(self) -> float | None:
        return self._heap[0][0] if self._heap else None

    def __len__(self) -> int:
        return len(self._heap)


@dataclass(frozen=True)
class FederationConfig:
    n_clients: int = 5
    alpha: float = 1.0
    rounds: int = 36
    local_epochs: int = 5
    batch_size: int = 128
    lr: float = 0.3
    mode: str = "async"
    post_rounds: int = 10
    speed_factors: tuple[float, ...] | None = None
    unit_cost: float = 1e-3
    comm_latency: float = 0.1
    server_speed: float = 0.1

    def validate(self) -> None:
        if self.n_clients < 2:
            raise ConfigError("n_clients must be >= 2")
        if not self.alpha > 0:
            raise ConfigError("alpha must be > 0")
        if self.rounds < 0 or self.post_rounds < 0 or self.local_epochs < 1:
            raise ConfigError("rounds and post_rounds must be >= 0, local_epochs >= 1")
        if self.batch_size < 1 or not self.lr > 0:
            raise ConfigError("batch_size and lr must be positive")
        if self.mode not in ("sync", "async"):
            raise ConfigError("mode must be 'sync' or 'async'")
        if self.speed_factors is not None:
            if len(self.speed_factors) != self.n_clients:
                raise ConfigError(f"speed_factors needs {self.n_clients} entries, got {len(self.speed_factors)}")
            if min(self.speed_factors) <= 0:
                raise ConfigError("speed_factors must be positive")
        if min(self.unit_cost, self.server_speed) <= 0 or self.comm_latency < 0:
            raise ConfigError("cost model constants must be positive")

    def speed(self, cid: int) -> float:
        return 1.0 if self.speed_factors is None else float(self.speed_factors[cid])


def local_time(client: ClientState, epochs: int, cfg: FederationConfig) -> float:
    return epochs * len(client.shard) * cfg.unit_cost * client.speed_factor


@dataclass
class FederationState:
    spec: ModelSpec
    cfg: FederationConfig
    seed: int
    w_g: ParamVector
    clients: list[ClientState]
    rounds_done: int = 0
    clock: float = 0.0
    update_norms: list[float] = field(default_factory=list)

    @property
    def mean_update_norm(self) -> float | None:
        return float(np.mean(self.update_norms)) if self.update_norms else None

    def retained(self, target: int) -> list[ClientState]:
        return [c for c in self.clients if c.id != target]


def make_clients(shards: Sequence[DatasetShard], cfg: FederationConfig, target: int | None = None) -> list[ClientState]:
    if len(shards) != cfg.n_clients:
        raise ConfigError(f"expected {cfg.n_clients} shards, got {len(shards)}")
    return [ClientState(i, s, None, cfg.speed(i), i == target) for i, s in enumerate(shards)]


def run_sync_round(
    spec: ModelSpec,
    w_g: ParamVector,
    clients: Sequence[ClientState],
    cfg: FederationConfig,
    seed: int,
    round_index: int,
    tag: int = TRAIN,
    queue: EventQueue | None = None,
    start: float = 0.0,
) -> tuple[ParamVector, float]:
    """One FedAvg round over ``clients``; updates their upload caches.

    Returns the size-weighted aggregate and the round time (slowest client).
    """
    w_next, locals_ = fedavg_round(spec, w_g, [c.shard for c in clients], cfg.local_epochs, cfg.lr,
                                   cfg.batch_size, seed, tag, round_index)
    times = [local_time(c, cfg.local_epochs, cfg) for c in clients]
    for c, w in zip(clients, locals_):
        c.w_local_prev = w
    if queue is not None:
        for c, t in zip(clients, times):
            queue.push(start + t, "LocalUpdateReady", c.id, f"round {round_index}")
        queue.push(start + max(times), "RoundAggregated", -1, f"round {round_index}")
        while len(queue):
            queue.pop()
    return w_next, max(times)


def run_training(
    spec: ModelSpec,
    shards: Sequence[DatasetShard],
    cfg: FederationConfig,
    seed: int,
    target: int | None = 0,
    backdoor_test: DatasetShard | None = None,
    min_backdoor_acc: float = 0.8,
) -> FederationState:
    """``cfg.rounds`` synchronous rounds from a seeded initialisation.

    With ``backdoor_test`` given, raises ScenarioError when the trained
    model's backdoor accuracy stays below ``min_backdoor_acc``.
    """
    cfg.validate()
    clients = make_clients(shards, cfg, target)
    w = init_params(spec, derive_seed(seed, INIT))
    state = FederationState(spec, cfg, seed, w, clients)
    for r in range(cfg.rounds):
        w_next, dt = run_sync_round(spec, state.w_g, clients, cfg, seed, r)
        state.update_norms.append(float(np.mean([l2_distance(c.w_local_prev, state.w_g) for c in clients])))
        state.w_g = w_next
        state.clock += dt + cfg.comm_latency
        state.rounds_done += 1
    if backdoor_test is not None and cfg.rounds > 0:
        ba = accuracy(spec, state.w_g, backdoor_test)
        if ba < min_backdoor_acc:
            raise ScenarioError(f"backdoor implant failed: BA {100 * ba:.1f}% < {100 * min_backdoor_acc:.0f}%")
    return state


class UnlearnRun(NamedTuple):
    w_g_next: ParamVector
    timeline: Timeline
    outcome: UnlearnOutcome


def _unlearn_math(state: FederationState, target: int, ucfg: UnlearnConfig, aug: AugmentSpec,
                  calib_data: DatasetShard, seed: int) -> UnlearnOutcome:
    tc = state.clients[target]
    if tc.w_local_prev is None:
        raise ScenarioError(f"client {target} has no cached upload; train before unlearning")
    return afu_ic(state.spec, state.w_g, tc.w_local_prev, [c.shard for c in state.clients], target, ucfg, aug, seed,
                  calib_data, mean_update_norm=state.mean_update_norm,
                  epoch_cost=local_time(tc, 1, state.cfg))


def _calib_time(ucfg: UnlearnConfig, calib_data: DatasetShard, cfg: FederationConfig, epochs: int) -> float:
    return epochs * len(calib_data) * cfg.unit_cost * cfg.server_speed


def run_async_unlearning(
    state: FederationState,
    target: int,
    ucfg: UnlearnConfig,
    aug: AugmentSpec,
    calib_data: DatasetShard,
    seed: int,
) -> UnlearnRun:
    """Target unlearns off the critical path while the retained clients keep
    running provisional rounds. The server adopts the calibrated model the
    moment calibration finishes and drops the provisional line, including
    any round still in flight."""
    cfg = state.cfg
    out = _unlearn_math(state, target, ucfg, aug, calib_data, seed)
    t0 = state.clock
    q = EventQueue()
    q.now = t0
    q.push(t0, "UnlearnRequested", target)
    upload = t0 + out.local_compute_cost + cfg.comm_latency
    q.push(upload, "UnlearnUploadReady", target, f"{out.ascent_epochs_run} ascent epochs")
    done = upload + _calib_time(ucfg, calib_data, cfg, out.calib_epochs_run)
    q.push(done, "CalibrationDone", -1, f"{out.calib_epochs_run} calibration epochs")

    retained = state.retained(target)
    provisional = state.w_g
    start = t0
    r = 0
    while True:
        times = [local_time(c, cfg.local_epochs, cfg) for c in retained]
        end = start + max(times)
        if end > done:
            break
        # provisional round finishes before adoption; it is computed and then discarded
        provisional, _ = fedavg_round(state.spec, provisional, [c.shard for c in retained], cfg.local_epochs,
                                      cfg.lr, cfg.batch_size, seed, PROVISIONAL, r)
        for c, t in zip(retained, times):
            q.push(start + t, "LocalUpdateReady", c.id, f"provisional {r}")
        q.push(end, "RoundAggregated", -1, f"provisional {r}")
        start = end + cfg.comm_latency
        r += 1
    while len(q):
        q.pop()
    tl = Timeline(q.log, {c.id: 0.0 for c in retained}, done - t0)
    tl.events.append(SimEvent(done, "RoundAggregated", -1, f"adopt calibrated model; discard {r} provisional rounds"))
    state.w_g = out.w_calibrated
    state.clock = done
    return UnlearnRun(out.w_calibrated, tl, out)


def run_sync_unlearning(
    state: FederationState,
    target: int,
    ucfg: UnlearnConfig,
    aug: AugmentSpec,
    calib_data: DatasetShard,
    seed: int,
) -> UnlearnRun:
    """Barrier variant: the server first lets the in-flight round finish,
    then every retained client idles until the target has uploaded and the
    server has calibrated. The drained round's updates are dropped, so the
    adopted model is the same as in async mode."""
    cfg = state.cfg
    out = _unlearn_math(state, target, ucfg, aug, calib_data, seed)
    t0 = state.clock
    q = EventQueue()
    q.now = t0
    q.push(t0, "UnlearnRequested", target)
    finish = {c.id: t0 + local_time(c, cfg.local_epochs, cfg) for c in state.clients}
    for cid, t in finish.items():
        q.push(t, "LocalUpdateReady", cid, "in-flight round (dropped)")
    barrier = max(finish.values())
    q.push(barrier, "RoundAggregated", -1, "barrier before unlearning")
    upload = barrier + out.local_compute_cost + cfg.comm_latency
    q.push(upload, "UnlearnUploadReady", target, f"{out.ascent_epochs_run} ascent epochs")
    done = upload + _calib_time(ucfg, calib_data, cfg, out.calib_epochs_run)
    q.push(done, "CalibrationDone", -1, f"{out.calib_epochs_run} calibration epochs")
    while len(q):
        q.pop()
    blocked = {c.id: done - finish[c.id] for c in state.retained(target)}
    tl = Timeline(q.log, blocked, done - t0)
    tl.events.append(SimEvent(done, "RoundAggregated", -1, "adopt calibrated model"))
    state.w_g = out.w_calibrated
    state.clock = done
    return UnlearnRun(out.w_calibrated, tl, out)


def run_unlearning(state: FederationState, target: int, ucfg: UnlearnConfig, aug: AugmentSpec,
                   calib_data: DatasetShard, seed: int) -> UnlearnRun:
    fn = run_async_unlearning if state.cfg.mode == "async" else run_sync_unlearning
    return fn(state, target, ucfg, aug, calib_data, seed)


def run_post_learning(
    spec: ModelSpec,
    w_g: ParamVector,
    retained: Sequence[DatasetShard],
    post_rounds: int,
    cfg: FederationConfig,
    seed: int,
    eval_hook: Callable[[int, ParamVector], Any] | None = None,
) -> list[Any]:
    """Retained-only FedAvg rounds. Returns ``eval_hook(round, w)`` for
    round 0 (the starting point) and after every round.

    All callers with the same seed see the same shuffles, so a candidate
    and the retrain oracle are advanced on identical minibatches.
    """
    hook = eval_hook or (lambda r, w: w)
    traj = [hook(0, w_g)]
    w = w_g
    for r in range(post_rounds):
        w, _ = fedavg_round(spec, w, retained, cfg.local_epochs, cfg.lr, cfg.batch_size, seed, POST, r)
        traj.append(hook(r + 1, w))
    return traj
