import copy
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from fedunlearn.data_pipeline import AugmentSpec, generate_synthetic
from fedunlearn.errors import ConfigError, NumericalError
from fedunlearn.metrics_eval import backdoor_accuracy, clean_accuracy
from fedunlearn.tensor_nn import dense_spec, init_params, l2_distance
from fedunlearn.training import accuracy
from fedunlearn.unlearning_core import (UnlearnConfig, afu_ic, compute_reference_model, load_params,
                                        local_gradient_ascent, pga_only, project_l2_ball, retrain_oracle,
                                        save_params, server_calibrate)

vec = st.lists(st.floats(-1e3, 1e3), min_size=1, max_size=12)


def test_reference_model_examples():
    assert np.array_equal(compute_reference_model([1.0, 1.0], [0.0, 0.0], 2, 1), [2.0, 2.0])
    w = np.array([0.3, -2.0])
    np.testing.assert_allclose(compute_reference_model(w, w, 10, 3), w, rtol=1e-15)
    with pytest.raises(ConfigError):
        compute_reference_model(w, w, 3, 3)
    with pytest.raises(ConfigError):
        compute_reference_model(w, w[:1], 3, 1)


def test_reference_model_recovers_fedavg_of_others():
    r = np.random.default_rng(0)
    ws = [r.normal(size=50) for _ in range(3)]
    n = np.array([120.0, 45.0, 300.0])
    w_g = sum(k * w for k, w in zip(n, ws)) / n.sum()
    want = (n[1] * ws[1] + n[2] * ws[2]) / (n[1] + n[2])
    np.testing.assert_allclose(compute_reference_model(w_g, ws[0], n.sum(), n[0]), want, atol=1e-10)


@given(vec, st.data(), st.floats(1.0, 1e4), st.floats(0.01, 0.99))
def test_reference_identity(w_g, data, n_total, frac):
    w_u = data.draw(st.lists(st.floats(-1e3, 1e3), min_size=len(w_g), max_size=len(w_g)))
    n_u = frac * n_total
    w_ref = compute_reference_model(w_g, w_u, n_total, n_u)
    lhs = n_total * np.array(w_g)
    rhs = n_u * np.array(w_u) + (n_total - n_u) * w_ref
    assert np.all(np.abs(lhs - rhs) <= 1e-10 * np.maximum(1.0, np.abs(lhs)) * 1e3)


def test_projection_examples():
    np.testing.assert_allclose(project_l2_ball([3.0, 4.0], [0.0, 0.0], 1.0), [0.6, 0.8])
    c = np.array([1.0, 2.0])
    assert np.array_equal(project_l2_ball(c, c, 0.5), c)
    with pytest.raises(ConfigError):
        project_l2_ball(c, c, 0.0)


def test_projection_idempotent_100_seeds():
    for seed in range(100):
        r = np.random.default_rng(seed)
        w, c, d = r.normal(size=8) * 3, r.normal(size=8), r.uniform(0.1, 5)
        p = project_l2_ball(w, c, d)
        assert np.array_equal(project_l2_ball(p, c, d), p)


@given(vec, st.data(), st.floats(1e-3, 1e3))
def test_projection_contracts(w, data, delta):
    c = data.draw(st.lists(st.floats(-1e3, 1e3), min_size=len(w), max_size=len(w)))
    p = project_l2_ball(w, c, delta)
    d = l2_distance(p, c)
    assert d <= min(l2_distance(w, c), delta) + 1e-9


@pytest.fixture(scope="module")
def toy():
    spec = dense_spec(3, hidden=(16,))
    d = generate_synthetic(3, 30, 2)
    w = init_params(spec, 0)
    return spec, d, w


def test_ascent_zero_epochs_returns_reference(toy):
    spec, d, w = toy
    out = local_gradient_ascent(spec, w, d, UnlearnConfig(t_asc=0), 0, delta=1.0)
    assert np.array_equal(out.w_unlearn, w) and out.ascent_epochs_run == 0


def test_every_ascent_iterate_in_ball(toy):
    spec, d, w = toy
    seen = []
    cfg = UnlearnConfig(t_asc=4, eta_asc=0.5, batch_size=16, early_stop_acc=0.0)
    out = local_gradient_ascent(spec, w, d, cfg, 1, delta=0.3, hook=lambda e, s, v: seen.append(v.copy()))
    assert len(seen) == 4 * 6
    assert all(l2_distance(v, w) <= 0.3 + 1e-9 for v in seen)
    assert out.ascent_epochs_run == 4


def test_ascent_blows_up_cleanly(toy):
    spec, d, w = toy
    with pytest.raises(NumericalError):
        local_gradient_ascent(spec, w, d, UnlearnConfig(t_asc=3, eta_asc=1e300, early_stop_acc=0.0), 0, delta=1e308)


def test_calibration_null_actions(toy):
    spec, d, w = toy
    w = w + 0.1
    assert np.array_equal(server_calibrate(spec, w, d, AugmentSpec(), UnlearnConfig(gamma_calib=0.0), 0), w)
    kl = []
    out = server_calibrate(spec, w, d, AugmentSpec(0.0, 0), UnlearnConfig(), 0, kl_log=kl)
    assert np.array_equal(out, w)
    assert kl == [0.0] * 5


def test_composition_identity(toy):
    spec, d, w = toy
    from fedunlearn.data_pipeline import dirichlet_partition
    shards = dirichlet_partition(d, 3, 1.0, 0)
    w_u = w + 0.05
    cfg = UnlearnConfig(t_asc=0, gamma_calib=0.0)
    out = afu_ic(spec, w, w_u, shards, 0, cfg, AugmentSpec(), 0, d, mean_update_norm=1.0)
    n = sum(len(s) for s in shards)
    assert np.array_equal(out.w_calibrated, compute_reference_model(w, w_u, n, len(shards[0])))
    cfg_c = replace(cfg, weighting="clients")
    out_c = afu_ic(spec, w, w_u, shards, 0, cfg_c, AugmentSpec(), 0, d, mean_update_norm=1.0)
    assert np.array_equal(out_c.w_calibrated, compute_reference_model(w, w_u, 3, 1))


def test_pga_only_equals_afu_with_zero_gamma(toy):
    spec, d, w = toy
    from fedunlearn.data_pipeline import dirichlet_partition
    shards = dirichlet_partition(d, 3, 1.0, 0)
    cfg = UnlearnConfig(t_asc=2, gamma_calib=0.0, batch_size=8)
    a = afu_ic(spec, w, w + 0.05, shards, 1, cfg, AugmentSpec(), 3, d, mean_update_norm=0.5)
    b = pga_only(spec, w, w + 0.05, shards, 1, replace(cfg, gamma_calib=1.0), 3, mean_update_norm=0.5)
    assert np.array_equal(a.w_calibrated, b)


def test_config_validation():
    for bad in (dict(eta_asc=0), dict(delta=-1.0), dict(t_asc=-1), dict(gamma_calib=-0.1),
                dict(early_stop_acc=1.5), dict(calib_optimizer="rmsprop"), dict(weighting="x")):
        with pytest.raises(ConfigError):
            UnlearnConfig(**bad).validate()
    assert UnlearnConfig().stop_threshold(3) == pytest.approx(1 / 3 + 0.05)
    assert UnlearnConfig().radius(0.2) == pytest.approx(0.2)
    assert UnlearnConfig(delta=0.7).radius(None) == 0.7
    with pytest.raises(ConfigError):
        UnlearnConfig().radius(None)


def test_fupv_round_trip(tmp_path):
    w = np.random.default_rng(0).normal(size=77)
    save_params(tmp_path / "w.fupv", w)
    raw = (tmp_path / "w.fupv").read_bytes()
    assert raw[:4] == b"FUPV" and len(raw) == 16 + 8 * 77
    assert np.array_equal(load_params(tmp_path / "w.fupv"), w)
    (tmp_path / "bad.fupv").write_bytes(b"NOPE" + raw[4:])
    with pytest.raises(ConfigError):
        load_params(tmp_path / "bad.fupv")


# ---- default scenario, seed 0 (trained once per session)

@pytest.fixture(scope="module")
def unlearned(default_seed0):
    cfg, tr = default_seed0
    st_ = tr.state
    shards = [c.shard for c in st_.clients]
    out = afu_ic(tr.scenario.spec, st_.w_g, st_.clients[0].w_local_prev, shards, 0, cfg.unlearn, cfg.augment, 0,
                 tr.scenario.aux, mean_update_norm=st_.mean_update_norm)
    return cfg, tr, out


def test_ascent_lowers_target_accuracy(unlearned):
    cfg, tr, out = unlearned
    d_u = tr.state.clients[0].shard
    assert accuracy(tr.scenario.spec, out.w_unlearn, d_u) <= accuracy(tr.scenario.spec, out.w_ref, d_u)
    assert l2_distance(out.w_unlearn, out.w_ref) <= out.delta + 1e-9
    assert 1 <= out.ascent_epochs_run <= cfg.unlearn.t_asc


def test_calibration_kl_decreases(unlearned):
    _, _, out = unlearned
    assert len(out.calib_kl) == 5
    assert out.calib_kl[-1] < out.calib_kl[0]


def test_afu_changes_model_and_lowers_ba(unlearned):
    _, tr, out = unlearned
    spec, ev = tr.scenario.spec, tr.scenario.evals
    assert l2_distance(out.w_calibrated, tr.state.w_g) > 0
    assert backdoor_accuracy(spec, out.w_calibrated, ev.poisoned) < backdoor_accuracy(spec, tr.state.w_g, ev.poisoned)


def test_retrain_oracle_near_chance_and_faithful(default_seed0):
    cfg, tr = default_seed0
    spec, ev = tr.scenario.spec, tr.scenario.evals
    assert backdoor_accuracy(spec, tr.oracle, ev.poisoned) <= 100 * (1 / 3 + 0.15)
    assert abs(clean_accuracy(spec, tr.oracle, ev.clean) - clean_accuracy(spec, tr.state.w_g, ev.clean)) <= 5
    assert l2_distance(tr.oracle, tr.oracle) == 0


def test_retrain_oracle_deterministic(toy):
    spec, d, _ = toy
    shards = [d.subset(np.arange(0, 45)), d.subset(np.arange(45, 90))]
    a = retrain_oracle(spec, shards, 2, 1, 0.1, 16, 5)
    b = retrain_oracle(spec, copy.deepcopy(shards), 2, 1, 0.1, 16, 5)
    assert np.array_equal(a, b)
    with pytest.raises(ConfigError):
        retrain_oracle(spec, [], 2, 1, 0.1, 16, 5)
