import copy

import numpy as np
import pytest

from fedunlearn.data_pipeline import AugmentSpec, TriggerSpec, dirichlet_partition, generate_synthetic, inject_backdoor
from fedunlearn.errors import ConfigError, ScenarioError
from fedunlearn.federation_sim import (EventQueue, FederationConfig, SimEvent, local_time, make_clients, read_jsonl,
                                       run_async_unlearning, run_post_learning, run_sync_unlearning, run_training)
from fedunlearn.tensor_nn import dense_spec, init_params
from fedunlearn.training import INIT, derive_seed
from fedunlearn.unlearning_core import UnlearnConfig


def test_queue_orders_by_time_then_kind_then_client():
    q = EventQueue()
    q.push(2.0, "CalibrationDone")
    q.push(1.0, "RoundAggregated")
    q.push(1.0, "LocalUpdateReady", 3)
    q.push(1.0, "LocalUpdateReady", 1)
    q.push(0.5, "UnlearnRequested", 0)
    order = [(e.time, e.kind, e.client) for e, _ in (q.pop() for _ in range(5))]
    assert order == [(0.5, "UnlearnRequested", 0), (1.0, "LocalUpdateReady", 1), (1.0, "LocalUpdateReady", 3),
                     (1.0, "RoundAggregated", -1), (2.0, "CalibrationDone", -1)]
    assert q.now == 2.0 and len(q) == 0


def test_queue_rejects_unknown_kind():
    with pytest.raises(ConfigError):
        EventQueue().push(0.0, "Teleport")


def test_jsonl_round_trip(tmp_path):
    from fedunlearn.federation_sim import Timeline

    tl = Timeline([SimEvent(0.25, "UnlearnRequested", 0, "x"), SimEvent(1.5, "CalibrationDone", -1, "")])
    tl.write_jsonl(tmp_path / "t.jsonl")
    assert read_jsonl(tmp_path / "t.jsonl") == tl.events


def test_config_validation():
    with pytest.raises(ConfigError):
        FederationConfig(n_clients=3, speed_factors=(1.0, 2.0)).validate()
    with pytest.raises(ConfigError):
        FederationConfig(mode="semi").validate()
    with pytest.raises(ConfigError):
        FederationConfig(alpha=0.0).validate()


@pytest.fixture(scope="module")
def tiny():
    data = generate_synthetic(3, 40, 0, noise=0.1)
    shards = dirichlet_partition(data, 3, 5.0, 0)
    shards[0], bd = inject_backdoor(shards[0], TriggerSpec(), 0, data)
    cfg = FederationConfig(n_clients=3, rounds=3, local_epochs=1, batch_size=32, lr=0.3, post_rounds=2)
    spec = dense_spec(3, hidden=(16,))
    return spec, shards, cfg, data


def test_zero_rounds_returns_init(tiny):
    spec, shards, cfg, _ = tiny
    st = run_training(spec, shards, FederationConfig(n_clients=3, rounds=0), 7)
    assert np.array_equal(st.w_g, init_params(spec, derive_seed(7, INIT)))
    assert st.rounds_done == 0 and st.clock == 0.0 and st.mean_update_norm is None


def test_training_clock_follows_cost_model(tiny):
    spec, shards, cfg, _ = tiny
    st = run_training(spec, shards, cfg, 0)
    per_round = max(len(s) for s in shards) * cfg.local_epochs * cfg.unit_cost + cfg.comm_latency
    assert st.clock == pytest.approx(cfg.rounds * per_round)
    assert all(c.w_local_prev is not None for c in st.clients)
    assert len(st.update_norms) == cfg.rounds


def test_failed_implant_raises(tiny):
    spec, shards, cfg, data = tiny
    impossible = data.subset(np.arange(3))
    impossible.labels[:] = 0
    with pytest.raises(ScenarioError):
        run_training(spec, shards, replace_rounds(cfg, 1), 0, backdoor_test=impossible, min_backdoor_acc=1.01)


def replace_rounds(cfg, r):
    from dataclasses import replace
    return replace(cfg, rounds=r)


@pytest.fixture(scope="module")
def trained(tiny):
    spec, shards, cfg, data = tiny
    return run_training(spec, shards, cfg, 0), data.subset(np.arange(30))


UCFG = UnlearnConfig(t_asc=2, t_calib=2)


def test_async_blocked_time_is_zero_and_latency_hand_computed(trained, tiny):
    st0, aux = trained
    st = copy.deepcopy(st0)
    t0 = st.clock
    run = run_async_unlearning(st, 0, UCFG, AugmentSpec(), aux, 0)
    assert all(v == 0.0 for v in run.timeline.blocked_time_per_client.values())
    assert set(run.timeline.blocked_time_per_client) == {1, 2}
    cfg = st.cfg
    asc = run.outcome.ascent_epochs_run * local_time(st.clients[0], 1, cfg)
    calib = run.outcome.calib_epochs_run * len(aux) * cfg.unit_cost * cfg.server_speed
    assert run.timeline.latency == pytest.approx(asc + cfg.comm_latency + calib, rel=1e-12)
    assert st.clock == pytest.approx(t0 + run.timeline.latency)
    times = [e.time for e in run.timeline.events]
    assert times == sorted(times)
    assert run.timeline.events[-1].note.startswith("adopt")


def test_sync_blocks_and_matches_async_bitwise(trained):
    st0, aux = trained
    a = run_async_unlearning(copy.deepcopy(st0), 0, UCFG, AugmentSpec(), aux, 0)
    s = run_sync_unlearning(copy.deepcopy(st0), 0, UCFG, AugmentSpec(), aux, 0)
    assert np.array_equal(a.w_g_next, s.w_g_next)
    assert min(s.timeline.blocked_time_per_client.values()) > 0
    assert s.timeline.latency > a.timeline.latency


def test_straggler_makes_sync_slower(tiny):
    spec, shards, cfg, data = tiny
    from dataclasses import replace

    slow = replace(cfg, speed_factors=(1.0, 1.0, 4.0))
    st = run_training(spec, shards, slow, 0)
    aux = data.subset(np.arange(30))
    a = run_async_unlearning(copy.deepcopy(st), 0, UCFG, AugmentSpec(), aux, 0)
    s = run_sync_unlearning(copy.deepcopy(st), 0, UCFG, AugmentSpec(), aux, 0)
    drain = local_time(st.clients[2], cfg.local_epochs, slow)
    assert s.timeline.latency == pytest.approx(drain + a.timeline.latency)
    assert s.timeline.blocked_time_per_client[2] == pytest.approx(a.timeline.latency)


def test_unlearning_without_cache_fails(tiny):
    spec, shards, cfg, data = tiny
    st = run_training(spec, shards, replace_rounds(cfg, 0), 0)
    with pytest.raises(ScenarioError):
        run_async_unlearning(st, 0, UCFG, AugmentSpec(), data, 0)


def test_post_learning_zero_rounds_and_determinism(trained, tiny):
    spec, shards, cfg, _ = tiny
    st, _ = trained
    assert len(run_post_learning(spec, st.w_g, shards[1:], 0, cfg, 0)) == 1
    a = run_post_learning(spec, st.w_g, shards[1:], 2, cfg, 0)
    b = run_post_learning(spec, st.w_g, shards[1:], 2, cfg, 0)
    assert len(a) == 3 and all(np.array_equal(x, y) for x, y in zip(a, b))


def test_make_clients_count_mismatch(tiny):
    _, shards, cfg, _ = tiny
    with pytest.raises(ConfigError):
        make_clients(shards[:2], cfg)
