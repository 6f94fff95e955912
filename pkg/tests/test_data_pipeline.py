import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from fedunlearn.data_pipeline import (AugmentSpec, DatasetShard, TriggerSpec, apply_trigger, augment, augment_batch,
                                      concat_shards, dirichlet_partition, generate_synthetic, has_trigger,
                                      inject_backdoor, load_dataset, save_dataset, stratified_split)
from fedunlearn.errors import ConfigError, PartitionError
from fedunlearn.tensor_nn import conv_spec, init_params
from fedunlearn.training import accuracy, derive_rng, local_sgd


@pytest.fixture(scope="module")
def small():
    return generate_synthetic(3, 60, 0)


def test_generate_cardinality_and_bounds():
    d = generate_synthetic(3, 1, 0)
    assert len(d) == 3 and sorted(d.labels) == [0, 1, 2]
    assert d.pixels.shape == (3, 1, 16, 16)
    assert d.pixels.min() >= 0 and d.pixels.max() <= 1
    assert not d.poisoned.any()


def test_generate_deterministic(small):
    again = generate_synthetic(3, 60, 0)
    assert np.array_equal(small.pixels, again.pixels) and np.array_equal(small.labels, again.labels)
    assert not np.array_equal(small.pixels, generate_synthetic(3, 60, 1).pixels)


def test_trigger_corner_is_dark_in_clean_data(small):
    assert not has_trigger(small.pixels, TriggerSpec()).any()


def test_central_training_reaches_85_percent():
    data = generate_synthetic(3, 200, 1)
    train, test = stratified_split(data, 0.25, 0)
    spec = conv_spec()
    w = local_sgd(spec, init_params(spec, 0), train, 20, 0.3, 128, derive_rng(0, 0))
    assert accuracy(spec, w, test) >= 0.85


def test_stratified_split_per_class(small):
    tr, te = stratified_split(small, 0.25, 3)
    assert list(te.class_counts()) == [15, 15, 15]
    assert sorted(np.concatenate([tr.ids, te.ids])) == sorted(small.ids)


def _multiset(shards):
    return sorted(int(i) for s in shards for i in s.ids)


@given(st.floats(0.05, 100.0), st.integers(0, 10_000), st.integers(2, 6))
def test_partition_sound(alpha, seed, n):
    data = generate_synthetic(3, 12, 5)
    try:
        shards = dirichlet_partition(data, n, alpha, seed)
    except PartitionError:
        return
    assert _multiset(shards) == sorted(int(i) for i in data.ids)
    assert all(len(s) > 0 for s in shards)
    assert [s.owner for s in shards] == list(range(n))


def test_partition_near_uniform_at_huge_alpha():
    data = generate_synthetic(3, 200, 0)
    glob = data.class_counts() / len(data)
    for s in dirichlet_partition(data, 5, 1e6, 0):
        assert np.all(np.abs(s.class_counts() / len(s) - glob) <= 0.1)


def test_partition_skew_alpha_01_seed2():
    data = generate_synthetic(3, 200, 0)
    shards = dirichlet_partition(data, 5, 0.1, 2)
    assert max(s.class_counts().max() / len(s) for s in shards) >= 0.7
    assert [len(s) for s in shards] == [85, 280, 77, 37, 121]


def test_heterogeneity_grows_as_alpha_shrinks():
    data = generate_synthetic(3, 60, 0)
    glob = data.class_counts() / len(data)

    def tv(alpha, seed):
        shards = dirichlet_partition(data, 5, alpha, seed)
        return np.mean([0.5 * np.abs(s.class_counts() / len(s) - glob).sum() for s in shards])

    assert np.mean([tv(0.1, s) for s in range(20)]) > np.mean([tv(1.0, s) for s in range(20)])


def test_partition_errors(small):
    with pytest.raises(ConfigError):
        dirichlet_partition(small, 1, 1.0, 0)
    with pytest.raises(ConfigError):
        dirichlet_partition(small, 3, 0.0, 0)
    tiny = generate_synthetic(2, 3, 0)
    with pytest.raises(PartitionError):
        dirichlet_partition(tiny, 3, 1e-4, 0, max_retries=3)


def test_poison_count_seed3(small):
    s = small.subset(np.arange(100))
    p, _ = inject_backdoor(s, TriggerSpec(poison_rate=0.5), 3)
    assert p.poisoned.sum() == 50
    assert list(np.flatnonzero(p.poisoned)[:8]) == [0, 2, 4, 5, 7, 9, 10, 12]


def test_full_poisoning_and_marking(small):
    trig = TriggerSpec(poison_rate=1.0, target_class=2)
    p, test = inject_backdoor(small, trig, 0, small)
    assert p.poisoned.all() and (p.labels == 2).all() and has_trigger(p.pixels, trig).all()
    assert (test.labels == 2).all() and has_trigger(test.pixels, trig).all()
    half, _ = inject_backdoor(small, TriggerSpec(), 1)
    assert np.array_equal(has_trigger(half.pixels, TriggerSpec()), half.poisoned)
    assert np.array_equal(half.labels[~half.poisoned], small.labels[~half.poisoned])


def test_trigger_idempotent(small):
    trig = TriggerSpec()
    once = apply_trigger(small.pixels, trig)
    assert np.array_equal(apply_trigger(once, trig), once)


def test_trigger_validation():
    with pytest.raises(ConfigError):
        TriggerSpec(size=4, position=(14, 0)).validate()
    with pytest.raises(ConfigError):
        TriggerSpec(poison_rate=0.0).validate()
    with pytest.raises(ConfigError):
        TriggerSpec(target_class=3).validate(num_classes=3)


def test_augment_identity_and_block_seed4(small):
    x = small.pixels[0]
    assert np.array_equal(augment(x, AugmentSpec(0.0, 0), 0), x)
    a = augment(np.zeros((1, 16, 16)), AugmentSpec(0.0, 3, 1.0), 4)
    assert (a == 1.0).sum() == 9
    assert tuple(np.argwhere(a[0] == 1.0)[0]) == (10, 13)


def test_augment_patch_option():
    a = augment(np.zeros((1, 16, 16)), AugmentSpec(0.0, 0, patch_size=3), 0)
    assert a[0, :3, :3].min() == 1.0 and a.sum() == 9
    with pytest.raises(ConfigError):
        AugmentSpec(patch_size=3, patch_position=(15, 0)).validate()


@given(st.floats(0.0, 2.0), st.integers(0, 16), st.floats(0.0, 1.0), st.integers(0, 1000))
def test_augment_stays_in_unit_range(noise, block, intensity, seed):
    x = generate_synthetic(2, 2, 0).pixels
    out = augment_batch(x, AugmentSpec(noise, block, intensity), np.random.default_rng(seed))
    assert out.shape == x.shape and out.min() >= 0 and out.max() <= 1


def test_augment_deterministic(small):
    spec = AugmentSpec()
    assert np.array_equal(augment(small.pixels[3], spec, 9), augment(small.pixels[3], spec, 9))


def test_fusd_round_trip(tmp_path, small):
    p, _ = inject_backdoor(small, TriggerSpec(), 0)
    path = tmp_path / "d.fusd"
    save_dataset(path, p)
    back = load_dataset(path)
    assert np.array_equal(back.pixels, p.pixels)
    assert np.array_equal(back.labels, p.labels) and np.array_equal(back.poisoned, p.poisoned)
    raw = path.read_bytes()
    assert raw[:4] == b"FUSD"
    path.write_bytes(raw[:-3])
    with pytest.raises(ConfigError):
        load_dataset(path)


def test_concat_and_subset(small):
    a, b = small.subset(np.arange(10)), small.subset(np.arange(10, 25))
    c = concat_shards([a, b])
    assert len(c) == 25 and np.array_equal(c.ids, small.ids[:25])
    assert isinstance(c, DatasetShard)
