"""Client-side projected gradient ascent, server-side invariance calibration,
and the retrain / PGA-only comparators."""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .data_pipeline import AugmentSpec, DatasetShard, augment_batch
from .errors import ConfigError, NumericalError
from .tensor_nn import Batch, ModelSpec, ParamVector, forward, init_params, loss_and_grad, make_optimizer, optimizer_step
from .training import ASCENT, CALIB, INIT, TRAIN, accuracy, derive_rng, derive_seed, fedavg_round, minibatches


@dataclass(frozen=True)
class UnlearnConfig:
    """Hyperparameters of the unlearning round.

    ``delta=None`` means "derive from training": the radius becomes
    ``delta_scale`` times the mean per-round local update norm.
    ``early_stop_acc=None`` resolves to ``1 / num_classes + 0.05``.
    """

    eta_asc: float = 0.01
    eta_calib: float = 0.01
    delta: float | None = None
    delta_scale: float = 1.0
    t_asc: int = 5
    t_calib: int = 5
    gamma_calib: float = 1.0
    early_stop_acc: float | None = None
    batch_size: int = 128
    calib_optimizer: str = "adam"
    weighting: str = "samples"

    def validate(self) -> None:
        for name in ("eta_asc", "eta_calib", "delta_scale"):
            if not getattr(self, name) > 0:
                raise ConfigError(f"{name} must be positive")
        if self.delta is not None and not self.delta > 0:
            raise ConfigError("delta must be positive")
        if self.t_asc < 0 or self.t_calib < 0:
            raise ConfigError("t_asc and t_calib must be >= 0")
        if self.gamma_calib < 0:
            raise ConfigError("gamma_calib must be >= 0")
        if self.early_stop_acc is not None and not 0.0 <= self.early_stop_acc <= 1.0:
            raise ConfigError("early_stop_acc must lie in [0, 1]")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be positive")
        if self.calib_optimizer not in ("sgd", "adam"):
            raise ConfigError("calib_optimizer must be 'sgd' or 'adam'")
        if self.weighting not in ("samples", "clients"):
            raise ConfigError("weighting must be 'samples' or 'clients'")

    def stop_threshold(self, num_classes: int) -> float:
        if self.early_stop_acc is not None:
            return self.early_stop_acc
        return 1.0 / num_classes + 0.05

    def radius(self, mean_update_norm: float | None) -> float:
        if self.delta is not None:
            return self.delta
        if mean_update_norm is None or not mean_update_norm > 0:
            raise ConfigError("delta is unset and no positive update norm is available to derive it")
        return self.delta_scale * mean_update_norm


@dataclass
class UnlearnOutcome:
    w_unlearn: ParamVector
    w_calibrated: ParamVector
    ascent_epochs_run: int
    calib_epochs_run: int
    local_compute_cost: float = 0.0
    w_ref: ParamVector | None = field(default=None, repr=False)
    delta: float = 0.0
    calib_kl: list[float] = field(default_factory=list)


def compute_reference_model(w_g: ParamVector, w_u_prev: ParamVector, n_total: float, n_u: float) -> ParamVector:
    """Remove the target's cached share from the aggregate:
    ``(n_total * w_g - n_u * w_u_prev) / (n_total - n_u)``."""
    w_g = np.asarray(w_g, dtype=np.float64)
    w_u_prev = np.asarray(w_u_prev, dtype=np.float64)
    if w_g.shape != w_u_prev.shape:
        raise ConfigError("w_g and w_u_prev lengths differ")
    if not 0 < n_u < n_total:
        raise ConfigError(f"need 0 < n_u < n_total, got n_u={n_u}, n_total={n_total}")
    return (n_total * w_g - n_u * w_u_prev) / (n_total - n_u)


def project_l2_ball(w: ParamVector, center: ParamVector, delta: float) -> ParamVector:
    w = np.asarray(w, dtype=np.float64)
    center = np.asarray(center, dtype=np.float64)
    if w.shape != center.shape:
        raise ConfigError("w and center lengths differ")
    if not delta > 0:
        raise ConfigError("delta must be positive")
    d = w - center
    dist = math.sqrt(float(np.dot(d, d)))
    if not math.isfinite(dist):
        raise NumericalError("displacement from the ball centre overflowed; step size too large")
    # rescaled points can land a few ulps outside; the slack keeps projection idempotent
    if dist <= delta * (1.0 + 1e-12):
        return w
    return center + (delta / dist) * d


StepHook = Callable[[int, int, ParamVector], None]


def local_gradient_ascent(
    spec: ModelSpec,
    w_ref: ParamVector,
    d_u: DatasetShard,
    cfg: UnlearnConfig,
    seed: int,
    delta: float | None = None,
    hook: StepHook | None = None,
) -> UnlearnOutcome:
    """Maximise cross-entropy on ``d_u`` inside the ball B(w_ref, delta).

    ``hook(epoch, step, w)`` sees every projected iterate.
    """
    if len(d_u) == 0:
        raise ConfigError("d_u is empty")
    delta = cfg.radius(None) if delta is None else delta
    w_ref = np.asarray(w_ref, dtype=np.float64)
    w = w_ref.copy()
    threshold = cfg.stop_threshold(spec.num_classes)
    rng = derive_rng(seed, ASCENT)
    opt = make_optimizer("sgd", cfg.eta_asc, w.size)
    x = d_u.flat
    epochs = 0
    step = 0
    while epochs < cfg.t_asc:
        for idx in minibatches(len(d_u), cfg.batch_size, rng):
            _, g = loss_and_grad(spec, w, Batch(x[idx], d_u.labels[idx]))
            w = project_l2_ball(optimizer_step(opt, w, g, "ascent"), w_ref, delta)
            if hook is not None:
                hook(epochs, step, w)
            step += 1
        epochs += 1
        if accuracy(spec, w, d_u) <= threshold:
            break
    return UnlearnOutcome(w, w, epochs, 0, w_ref=w_ref, delta=delta)


def server_calibrate(
    spec: ModelSpec,
    w_unlearn: ParamVector,
    calib_data: DatasetShard,
    aug: AugmentSpec,
    cfg: UnlearnConfig,
    seed: int,
    kl_log: list[float] | None = None,
) -> ParamVector:
    """Pull predictions on augmented views towards those on clean inputs.

    Per minibatch the loss is ``gamma * mean KL(P(x) || P(x'))`` with
    ``x' = augment(x)``. The clean side is treated as a constant target.
    ``kl_log`` receives the mean KL of each epoch (pre-step values).
    """
    w = np.array(w_unlearn, dtype=np.float64, copy=True)
    if cfg.gamma_calib == 0 or cfg.t_calib == 0:
        return w
    if len(calib_data) == 0:
        raise ConfigError("calibration set is empty")
    aug.validate(calib_data.pixels.shape[1:])
    rng = derive_rng(seed, CALIB)
    opt = make_optimizer(cfg.calib_optimizer, cfg.eta_calib, w.size)
    pixels = calib_data.pixels
    for _ in range(cfg.t_calib):
        total = 0.0
        for idx in minibatches(len(calib_data), cfg.batch_size, rng):
            x = pixels[idx]
            x_aug = augment_batch(x, aug, rng)
            ref = forward(spec, w, x.reshape(len(idx), -1))
            kl, g = loss_and_grad(spec, w, Batch(x_aug.reshape(len(idx), -1), None), "kl", ref)
            total += kl * len(idx)
            w = optimizer_step(opt, w, cfg.gamma_calib * g)
        if kl_log is not None:
            kl_log.append(total / len(calib_data))
    return w


def _reference_weights(shards: Sequence[DatasetShard], target: int, weighting: str) -> tuple[float, float]:
    if weighting == "clients":
        return float(len(shards)), 1.0
    return float(sum(len(s) for s in shards)), float(len(shards[target]))


def afu_ic(
    spec: ModelSpec,
    w_g: ParamVector,
    w_u_prev: ParamVector,
    shards: Sequence[DatasetShard],
    target: int,
    cfg: UnlearnConfig,
    aug: AugmentSpec,
    seed: int,
    calib_data: DatasetShard,
    mean_update_norm: float | None = None,
    epoch_cost: float = 0.0,
    hook: StepHook | None = None,
) -> UnlearnOutcome:
    """Reference model, projected ascent on the target, server calibration.

    ``epoch_cost`` is the simulated seconds one pass over the target's data
    takes; ``local_compute_cost`` is that times the ascent epochs run.
    """
    cfg.validate()
    if not 0 <= target < len(shards):
        raise ConfigError(f"target {target} is not a client id")
    n_total, n_u = _reference_weights(shards, target, cfg.weighting)
    w_ref = compute_reference_model(w_g, w_u_prev, n_total, n_u)
    delta = cfg.radius(mean_update_norm)
    out = local_gradient_ascent(spec, w_ref, shards[target], cfg, seed, delta=delta, hook=hook)
    kl: list[float] = []
    out.w_calibrated = server_calibrate(spec, out.w_unlearn, calib_data, aug, cfg, seed, kl_log=kl)
    out.calib_epochs_run = len(kl)
    out.calib_kl = kl
    out.local_compute_cost = out.ascent_epochs_run * epoch_cost
    return out


def pga_only(
    spec: ModelSpec,
    w_g: ParamVector,
    w_u_prev: ParamVector,
    shards: Sequence[DatasetShard],
    target: int,
    cfg: UnlearnConfig,
    seed: int,
    mean_update_norm: float | None = None,
) -> ParamVector:
    """Projected ascent alone: :func:`afu_ic` with ``gamma_calib = 0``."""
    from dataclasses import replace

    cfg0 = replace(cfg, gamma_calib=0.0)
    empty = DatasetShard(np.zeros((0,) + shards[target].pixels.shape[1:]), np.zeros(0, np.int64),
                         np.zeros(0, bool), np.zeros(0, np.int64))
    return afu_ic(spec, w_g, w_u_prev, shards, target, cfg0, AugmentSpec(), seed, empty,
                  mean_update_norm=mean_update_norm).w_calibrated


def retrain_oracle(
    spec: ModelSpec,
    retained: Sequence[DatasetShard],
    rounds: int,
    local_epochs: int,
    lr: float,
    batch_size: int,
    seed: int,
) -> ParamVector:
    """FedAvg from the same initialisation and shuffle streams as the full
    federation, but over the retained shards only."""
    if not retained:
        raise ConfigError("retrain needs at least one retained shard")
    w = init_params(spec, derive_seed(seed, INIT))
    for r in range(rounds):
        w, _ = fedavg_round(spec, w, retained, local_epochs, lr, batch_size, seed, TRAIN, r)
    return w


# ParamVector checkpoints: magic, version u32, length u64, little-endian f64.
_FUPV = struct.Struct("<4sIQ")
FUPV_VERSION = 1


def save_params(path: str | Path, w: ParamVector) -> None:
    w = np.asarray(w, dtype="<f8").ravel()
    with open(path, "wb") as fh:
        fh.write(_FUPV.pack(b"FUPV", FUPV_VERSION, w.size))
        fh.write(w.tobytes())


def load_params(path: str | Path) -> ParamVector:
    raw = Path(path).read_bytes()
    if len(raw) < _FUPV.size:
        raise ConfigError(f"{path}: truncated checkpoint header")
    magic, version, n = _FUPV.unpack_from(raw)
    if magic != b"FUPV" or version != FUPV_VERSION:
        raise ConfigError(f"{path}: not a version-{FUPV_VERSION} parameter checkpoint")
    if len(raw) != _FUPV.size + 8 * n:
        raise ConfigError(f"{path}: expected {n} parameters")
    return np.frombuffer(raw, dtype="<f8", offset=_FUPV.size).astype(np.float64)
