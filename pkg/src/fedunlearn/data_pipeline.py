"""Synthetic image data, Dirichlet label-skew partitioning, backdoor
poisoning and the augmentation transform used for calibration."""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import ConfigError, PartitionError

IMAGE_SHAPE = (1, 16, 16)


@dataclass
class DatasetShard:
    """Samples held by one party.

    ``ids`` are global sample identifiers assigned at generation time so
    partition and conservation checks can compare multisets exactly.
    """

    pixels: np.ndarray  # (n, C, H, W) float64 in [0, 1]
    labels: np.ndarray  # (n,) int64
    poisoned: np.ndarray  # (n,) bool
    ids: np.ndarray  # (n,) int64
    owner: int = -1
    num_classes: int = 0

    def __post_init__(self):
        n = len(self.labels)
        if self.pixels.shape[0] != n or self.poisoned.shape != (n,) or self.ids.shape != (n,):
            raise ConfigError("shard arrays disagree on sample count")

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def flat(self) -> np.ndarray:
        return self.pixels.reshape(len(self), -1)

    def subset(self, idx, owner: int | None = None) -> "DatasetShard":
        idx = np.asarray(idx, dtype=np.int64)
        return DatasetShard(
            self.pixels[idx], self.labels[idx], self.poisoned[idx], self.ids[idx],
            self.owner if owner is None else owner, self.num_classes,
        )

    def class_counts(self) -> np.ndarray:
        return np.bincount(self.labels, minlength=self.num_classes)


def concat_shards(shards: Sequence[DatasetShard], owner: int = -1) -> DatasetShard:
    return DatasetShard(
        np.concatenate([s.pixels for s in shards]),
        np.concatenate([s.labels for s in shards]),
        np.concatenate([s.poisoned for s in shards]),
        np.concatenate([s.ids for s in shards]),
        owner,
        max(s.num_classes for s in shards),
    )


@dataclass(frozen=True)
class TriggerSpec:
    size: int = 3
    value: float = 1.0
    position: tuple[int, int] = (0, 0)
    target_class: int = 0
    poison_rate: float = 0.5

    def validate(self, image_shape=IMAGE_SHAPE, num_classes: int | None = None) -> None:
        _, h, w = image_shape
        r, c = self.position
        if self.size < 1 or r < 0 or c < 0 or r + self.size > h or c + self.size > w:
            raise ConfigError(f"trigger patch {self.size}x{self.size} at {self.position} does not fit {h}x{w}")
        if not 0.0 <= self.value <= 1.0:
            raise ConfigError("trigger value must lie in [0, 1]")
        if not 0.0 < self.poison_rate <= 1.0:
            raise ConfigError("poison_rate must lie in (0, 1]")
        if self.target_class < 0 or (num_classes is not None and self.target_class >= num_classes):
            raise ConfigError(f"target_class {self.target_class} out of range")


@dataclass(frozen=True)
class AugmentSpec:
    noise_stddev: float = 0.1
    block_size: int = 4
    block_intensity: float = 1.0
    # optional trigger-style patch stamped on every augmented view (off when 0)
    patch_size: int = 0
    patch_value: float = 1.0
    patch_position: tuple[int, ...] = (0, 0)

    def validate(self, image_shape=IMAGE_SHAPE) -> None:
        _, h, w = image_shape
        if self.noise_stddev < 0:
            raise ConfigError("noise_stddev must be >= 0")
        if self.block_size < 0 or self.block_size > min(h, w):
            raise ConfigError(f"block_size {self.block_size} does not fit a {h}x{w} image")
        if not 0.0 <= self.block_intensity <= 1.0:
            raise ConfigError("block_intensity must lie in [0, 1]")
        if self.patch_size:
            if len(self.patch_position) != 2:
                raise ConfigError("patch_position must be (row, col)")
            r, c = self.patch_position
            if self.patch_size < 0 or r < 0 or c < 0 or r + self.patch_size > h or c + self.patch_size > w:
                raise ConfigError(f"patch {self.patch_size}x{self.patch_size} at {self.patch_position} does not fit {h}x{w}")
            if not 0.0 <= self.patch_value <= 1.0:
                raise ConfigError("patch_value must lie in [0, 1]")

    @property
    def is_identity(self) -> bool:
        return self.noise_stddev == 0 and self.block_size == 0 and self.patch_size == 0


def _class_template_params(c: int, num_classes: int):
    angle = np.pi * c / num_classes
    return angle


def _render_bar(h: int, w: int, center, angle: float, half_len: float, width: float) -> np.ndarray:
    rr, cc = np.mgrid[0:h, 0:w].astype(np.float64)
    dr, dc = np.sin(angle), np.cos(angle)
    pr, pc = rr - center[0], cc - center[1]
    t = np.clip(pr * dr + pc * dc, -half_len, half_len)
    dist2 = (pr - t * dr) ** 2 + (pc - t * dc) ** 2
    return np.exp(-dist2 / (2.0 * width ** 2))


def generate_synthetic(
    num_classes: int,
    per_class: int,
    seed: int,
    image_shape=IMAGE_SHAPE,
    noise: float = 0.2,
    id_offset: int = 0,
) -> DatasetShard:
    """Blurred oriented bars, one orientation per class, plus pixel noise.

    Bars are centred in the lower-right part of the image so the top-left
    corner (where the default trigger sits) stays dark in clean data.
    """
    if num_classes < 2 or per_class < 1:
        raise ConfigError("need num_classes >= 2 and per_class >= 1")
    c_, h, w = image_shape
    rng = np.random.default_rng(seed)
    n = num_classes * per_class
    labels = np.repeat(np.arange(num_classes), per_class)
    pixels = np.empty((n, c_, h, w))
    base = np.array([h * 0.6, w * 0.6])
    spread = np.pi / num_classes
    for i, label in enumerate(labels):
        center = base + rng.uniform(-1.5, 1.5, size=2)
        angle = _class_template_params(int(label), num_classes) + rng.uniform(-0.3, 0.3) * spread
        half_len = rng.uniform(0.22, 0.34) * min(h, w)
        amp = rng.uniform(0.55, 1.0)
        img = amp * _render_bar(h, w, center, angle, half_len, width=1.0)
        img = img + rng.normal(0.0, noise, size=(h, w))
        pixels[i] = np.clip(img, 0.0, 1.0)[None]
    order = rng.permutation(n)
    return DatasetShard(
        pixels[order], labels[order].astype(np.int64), np.zeros(n, dtype=bool),
        np.arange(id_offset, id_offset + n, dtype=np.int64), -1, num_classes,
    )


def stratified_split(data: DatasetShard, test_fraction: float, seed: int) -> tuple[DatasetShard, DatasetShard]:
    """Split each class so ``test_fraction`` of it goes to the second part."""
    if not 0.0 < test_fraction < 1.0:
        raise ConfigError("test_fraction must lie in (0, 1)")
    rng = np.random.default_rng(seed)
    train_idx, test_idx = [], []
    for c in range(data.num_classes):
        idx = rng.permutation(np.flatnonzero(data.labels == c))
        k = int(round(len(idx) * test_fraction))
        test_idx.append(idx[:k])
        train_idx.append(idx[k:])
    return data.subset(np.sort(np.concatenate(train_idx))), data.subset(np.sort(np.concatenate(test_idx)))


def _largest_remainder(proportions: np.ndarray, total: int) -> np.ndarray:
    raw = proportions * total
    counts = np.floor(raw).astype(np.int64)
    short = total - counts.sum()
    # stable sort on -remainder keeps lower client ids first on ties
    order = np.argsort(-(raw - counts), kind="stable")
    counts[order[:short]] += 1
    return counts


def dirichlet_partition(
    data: DatasetShard, n_clients: int, alpha: float, seed: int, max_retries: int = 200
) -> list[DatasetShard]:
    """Label-skewed split: per class, client proportions ~ Dir(alpha)."""
    if n_clients < 2:
        raise ConfigError("n_clients must be >= 2")
    if not alpha > 0:
        raise ConfigError("alpha must be > 0")
    counts = data.class_counts()
    present = np.flatnonzero(counts)
    if counts[present].min() < n_clients:
        raise ConfigError("every class needs at least n_clients samples")
    rng = np.random.default_rng(seed)
    by_class = [rng.permutation(np.flatnonzero(data.labels == c)) for c in present]
    for _ in range(max_retries):
        assigned: list[list[np.ndarray]] = [[] for _ in range(n_clients)]
        for idx in by_class:
            p = rng.dirichlet(np.full(n_clients, float(alpha)))
            k = _largest_remainder(p, len(idx))
            for cid, part in enumerate(np.split(idx, np.cumsum(k)[:-1])):
                assigned[cid].append(part)
        sizes = [sum(len(p) for p in parts) for parts in assigned]
        if min(sizes) > 0:
            return [data.subset(np.sort(np.concatenate(parts)), owner=cid) for cid, parts in enumerate(assigned)]
    raise PartitionError(f"could not give all {n_clients} clients a sample with alpha={alpha} after {max_retries} draws")


def apply_trigger(pixels: np.ndarray, trig: TriggerSpec) -> np.ndarray:
    """Overwrite the patch region; works on (..., C, H, W) arrays."""
    out = np.array(pixels, dtype=np.float64, copy=True)
    r, c = trig.position
    out[..., r:r + trig.size, c:c + trig.size] = trig.value
    return np.clip(out, 0.0, 1.0)


def has_trigger(pixels: np.ndarray, trig: TriggerSpec) -> np.ndarray:
    r, c = trig.position
    patch = pixels[..., r:r + trig.size, c:c + trig.size]
    return np.all(patch == trig.value, axis=(-3, -2, -1))


def inject_backdoor(
    shard: DatasetShard, trig: TriggerSpec, seed: int, clean_test: DatasetShard | None = None
) -> tuple[DatasetShard, DatasetShard | None]:
    """Poison floor(poison_rate * n) samples of ``shard``.

    The second value is ``clean_test`` with the trigger stamped on every
    sample and every label set to the target class (the BA evaluation set).
    """
    trig.validate(shard.pixels.shape[1:], shard.num_classes or None)
    rng = np.random.default_rng(seed)
    n_poison = int(np.floor(trig.poison_rate * len(shard) + 1e-9))
    chosen = np.sort(rng.choice(len(shard), size=n_poison, replace=False))
    pixels = shard.pixels.copy()
    labels = shard.labels.copy()
    poisoned = shard.poisoned.copy()
    pixels[chosen] = apply_trigger(pixels[chosen], trig)
    labels[chosen] = trig.target_class
    poisoned[chosen] = True
    out = DatasetShard(pixels, labels, poisoned, shard.ids.copy(), shard.owner, shard.num_classes)
    test = None
    if clean_test is not None:
        test = DatasetShard(
            apply_trigger(clean_test.pixels, trig),
            np.full(len(clean_test), trig.target_class, dtype=np.int64),
            np.ones(len(clean_test), dtype=bool),
            clean_test.ids.copy(), clean_test.owner, clean_test.num_classes,
        )
    return out, test


def _augment_arrays(pixels: np.ndarray, spec: AugmentSpec, rng: np.random.Generator) -> np.ndarray:
    out = np.array(pixels, dtype=np.float64, copy=True)
    if spec.noise_stddev > 0:
        out += rng.normal(0.0, spec.noise_stddev, size=out.shape)
    if spec.block_size > 0:
        n, _, h, w = out.shape
        bs = spec.block_size
        rows = rng.integers(0, h - bs + 1, size=n)
        cols = rng.integers(0, w - bs + 1, size=n)
        for i in range(n):
            out[i, :, rows[i]:rows[i] + bs, cols[i]:cols[i] + bs] = spec.block_intensity
    if spec.patch_size > 0:
        r, c = spec.patch_position
        out[:, :, r:r + spec.patch_size, c:c + spec.patch_size] = spec.patch_value
    return np.clip(out, 0.0, 1.0)


def augment(pixels: np.ndarray, spec: AugmentSpec, seed: int) -> np.ndarray:
    """Augmented view of one (C, H, W) image: Gaussian noise plus one constant block."""
    spec.validate(np.shape(pixels))
    return _augment_arrays(np.asarray(pixels)[None], spec, np.random.default_rng(seed))[0]


def augment_batch(pixels: np.ndarray, spec: AugmentSpec, rng: np.random.Generator) -> np.ndarray:
    """Vectorised :func:`augment` over an (n, C, H, W) batch drawing from ``rng``."""
    return _augment_arrays(pixels, spec, rng)


_FUSD_HEADER = struct.Struct("<4sIIIIII")
FUSD_VERSION = 1


def save_dataset(path: str | Path, data: DatasetShard) -> None:
    """Write the flat little-endian FUSD binary format."""
    n, c, h, w = data.pixels.shape
    rec = np.dtype([("label", "<u4"), ("poisoned", "u1"), ("pixels", "<f8", (c * h * w,))])
    body = np.empty(n, dtype=rec)
    body["label"] = data.labels
    body["poisoned"] = data.poisoned
    body["pixels"] = data.pixels.reshape(n, -1)
    with open(path, "wb") as fh:
        fh.write(_FUSD_HEADER.pack(b"FUSD", FUSD_VERSION, n, c, h, w, data.num_classes))
        fh.write(body.tobytes())


def load_dataset(path: str | Path, owner: int = -1) -> DatasetShard:
    raw = Path(path).read_bytes()
    if len(raw) < _FUSD_HEADER.size:
        raise ConfigError(f"{path}: truncated header")
    magic, version, n, c, h, w, k = _FUSD_HEADER.unpack_from(raw)
    if magic != b"FUSD" or version != FUSD_VERSION:
        raise ConfigError(f"{path}: not a FUSD v{FUSD_VERSION} file")
    rec = np.dtype([("label", "<u4"), ("poisoned", "u1"), ("pixels", "<f8", (c * h * w,))])
    if len(raw) != _FUSD_HEADER.size + n * rec.itemsize:
        raise ConfigError(f"{path}: body length does not match {n} samples")
    body = np.frombuffer(raw, dtype=rec, offset=_FUSD_HEADER.size, count=n)
    return DatasetShard(
        body["pixels"].astype(np.float64).reshape(n, c, h, w),
        body["label"].astype(np.int64),
        body["poisoned"].astype(bool),
        np.arange(n, dtype=np.int64), owner, k,
    )
