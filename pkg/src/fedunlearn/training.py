"""Local SGD and FedAvg arithmetic shared by the simulator and the oracle.

Every random stream is derived from ``(seed, tag, index)`` through
``np.random.SeedSequence`` so that runs are reproducible and independent
streams never alias.
"""

from __future__ import annotations

from typing import Sequence

import numpy as np

from .data_pipeline import DatasetShard
from .errors import ConfigError
from .tensor_nn import Batch, ModelSpec, ParamVector, loss_and_grad, make_optimizer, mean_params, optimizer_step, predict

# stream tags
INIT, TRAIN, POST, ASCENT, CALIB, DATA, PARTITION, POISON, SPLIT, AUX, PROVISIONAL = range(11)


def derive_rng(seed: int, *keys: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(seed), *map(int, keys)]))


def derive_seed(seed: int, *keys: int) -> int:
    return int(np.random.SeedSequence([int(seed), *map(int, keys)]).generate_state(1)[0])


def minibatches(n: int, batch_size: int, rng: np.random.Generator):
    perm = rng.permutation(n)
    for i in range(0, n, batch_size):
        yield perm[i:i + batch_size]


def local_sgd(
    spec: ModelSpec,
    w: ParamVector,
    shard: DatasetShard,
    epochs: int,
    lr: float,
    batch_size: int,
    rng: np.random.Generator,
) -> ParamVector:
    """Plain minibatch SGD on cross-entropy, starting from a copy of ``w``."""
    w = np.array(w, dtype=np.float64, copy=True)
    opt = make_optimizer("sgd", lr, w.size)
    x = shard.flat
    for _ in range(epochs):
        for idx in minibatches(len(shard), batch_size, rng):
            _, g = loss_and_grad(spec, w, Batch(x[idx], shard.labels[idx]))
            w = optimizer_step(opt, w, g)
    return w


def fedavg_round(
    spec: ModelSpec,
    w_g: ParamVector,
    shards: Sequence[DatasetShard],
    epochs: int,
    lr: float,
    batch_size: int,
    seed: int,
    tag: int,
    round_index: int,
) -> tuple[ParamVector, list[ParamVector]]:
    """One synchronous FedAvg round.

    Each client draws its shuffles from the same ``(seed, tag, round)``
    stream, so a client's update depends only on its own shard and ``w_g``.
    This keeps the retrain oracle aligned with the full federation.
    """
    if not shards:
        raise ConfigError("a round needs at least one client")
    locals_ = [
        local_sgd(spec, w_g, s, epochs, lr, batch_size, derive_rng(seed, tag, round_index))
        for s in shards
    ]
    return mean_params(locals_, [len(s) for s in shards]), locals_


def accuracy(spec: ModelSpec, w: ParamVector, data: DatasetShard) -> float:
    """Fraction in [0, 1] of correctly classified samples."""
    if len(data) == 0:
        raise ConfigError("accuracy on an empty set")
    return float(np.mean(predict(spec, w, data.flat) == data.labels))
