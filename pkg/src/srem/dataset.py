"""Synthetic paired features with controlled correspondence noise.

Binary feature file layout (all integers little-endian)::

    offset  size        field
    0       8           magic b"SREMFEAT"
    8       4   uint32  version (1)
    12      4   uint32  section flags: bit 0 match flags, bit 1 text sources
    16      8   uint64  N
    24      8   uint64  d_I
    32      8   uint64  d_T
    40      8*N*d_I     image features, float64, row-major
    ...     8*N*d_T     text features, float64, row-major
    ...     N           match flags, one uint8 (0/1) per pair   [bit 0]
    ...     8*N         text source index, int64 per pair       [bit 1]
"""

from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

MAGIC = b"SREMFEAT"
FORMAT_VERSION = 1
HEADER = struct.Struct("<8sIIQQQ")
HAS_FLAGS = 1
HAS_SOURCES = 2


class ConfigError(ValueError):
    pass


class FeatureFormatError(ValueError):
    pass


@dataclass(frozen=True)
class PairFeatures:
    """What the training path sees: features only, no ground truth."""

    image_feats: np.ndarray
    text_feats: np.ndarray

    def __len__(self) -> int:
        return self.image_feats.shape[0]

    def take(self, idx) -> tuple[np.ndarray, np.ndarray]:
        return self.image_feats[idx], self.text_feats[idx]


@dataclass(frozen=True)
class PairDataset:
    image_feats: np.ndarray
    text_feats: np.ndarray
    match_flag: np.ndarray
    text_source: np.ndarray
    noise_ratio: float = 0.0
    seed: int | None = None

    def __len__(self) -> int:
        return self.image_feats.shape[0]

    @property
    def features(self) -> PairFeatures:
        return PairFeatures(self.image_feats, self.text_feats)

    def subset(self, idx) -> "PairDataset":
        idx = np.asarray(idx)
        return replace(self, image_feats=self.image_feats[idx], text_feats=self.text_feats[idx],
                       match_flag=self.match_flag[idx], text_source=self.text_source[idx])

    def digest(self) -> str:
        h = hashlib.sha256()
        for arr in (self.image_feats, self.text_feats):
            h.update(np.ascontiguousarray(arr, dtype="<f8").tobytes())
        h.update(self.match_flag.astype(np.uint8).tobytes())
        h.update(np.ascontiguousarray(self.text_source, dtype="<i8").tobytes())
        return h.hexdigest()

    def permutation_digest(self) -> str:
        return hashlib.sha256(np.ascontiguousarray(self.text_source, dtype="<i8").tobytes()).hexdigest()


def generate_synthetic(n: int, clusters: int = 20, image_dim: int = 64, text_dim: int = 64,
                       seed: int = 0, latent_dim: int = 16, jitter: float = 1.0,
                       modality_noise: float = 0.5) -> PairDataset:
    """Pairs sharing a latent code (cluster centre plus jitter) seen through two random maps."""
    problems = []
    if clusters < 2:
        problems.append(f"clusters must be >= 2, got {clusters}")
    if n < clusters:
        problems.append(f"n ({n}) must be >= clusters ({clusters})")
    for name, value in (("image_dim", image_dim), ("text_dim", text_dim), ("latent_dim", latent_dim)):
        if value < 1:
            problems.append(f"{name} must be positive, got {value}")
    if jitter < 0 or modality_noise < 0:
        problems.append("jitter and modality_noise must be non-negative")
    if problems:
        raise ConfigError("; ".join(problems))

    rng = np.random.default_rng(seed)
    centres = rng.standard_normal((clusters, latent_dim))
    map_img = rng.standard_normal((latent_dim, image_dim)) / np.sqrt(latent_dim)
    map_txt = rng.standard_normal((latent_dim, text_dim)) / np.sqrt(latent_dim)
    assign = np.arange(n) % clusters
    rng.shuffle(assign)
    latent = centres[assign] + jitter * rng.standard_normal((n, latent_dim))
    img = latent @ map_img + modality_noise * rng.standard_normal((n, image_dim))
    txt = latent @ map_txt + modality_noise * rng.standard_normal((n, text_dim))
    return PairDataset(img, txt, np.ones(n, dtype=bool), np.arange(n), 0.0, seed)


def noisy_count(n: int, ratio: float) -> int:
    return int(np.floor(ratio * n + 0.5))


def inject_noise(ds: PairDataset, ratio: float, seed: int = 0) -> PairDataset:
    """Shuffle the texts of ``round(ratio * N)`` pairs so none keeps its own."""
    if not 0.0 <= ratio <= 1.0:
        raise ConfigError(f"noise ratio must lie in [0, 1], got {ratio}")
    if not np.all(ds.match_flag):
        raise ConfigError("dataset already carries injected noise")
    n = len(ds)
    k = noisy_count(n, ratio)
    if k == 0:
        return replace(ds, noise_ratio=ratio)
    if k < 2:
        raise ConfigError(
            f"noise ratio {ratio} on {n} pairs corrupts a single pair, which cannot be "
            "deranged; the corrupted subset must have at least 2 pairs")
    rng = np.random.default_rng(seed)
    chosen = np.sort(rng.choice(n, size=k, replace=False))
    while True:
        perm = rng.permutation(k)
        if not np.any(perm == np.arange(k)):
            break
    text = ds.text_feats.copy()
    source = ds.text_source.copy()
    text[chosen] = ds.text_feats[chosen[perm]]
    source[chosen] = ds.text_source[chosen[perm]]
    flags = source == np.arange(n)
    return replace(ds, text_feats=text, text_source=source, match_flag=flags, noise_ratio=ratio)


@dataclass(frozen=True)
class Splits:
    train: PairDataset
    val: PairDataset
    test: PairDataset


def make_splits(n_train: int = 2000, n_val: int = 500, n_test: int = 500,
                noise_ratio: float = 0.0, data_seed: int = 0, noise_seed: int = 0,
                **generator) -> Splits:
    """One generator draw cut into train/val/test; noise goes into train only."""
    total = n_train + n_val + n_test
    pool = generate_synthetic(total, seed=data_seed, **generator)
    train = pool.subset(np.arange(n_train))
    train = replace(train, text_source=np.arange(n_train))
    val = pool.subset(np.arange(n_train, n_train + n_val))
    val = replace(val, text_source=np.arange(n_val))
    test = pool.subset(np.arange(n_train + n_val, total))
    test = replace(test, text_source=np.arange(n_test))
    return Splits(inject_noise(train, noise_ratio, noise_seed), val, test)


def batches(n: int, batch_size: int, epoch_seed: int) -> list[np.ndarray]:
    if batch_size < 2:
        raise ConfigError(f"batch_size must be >= 2, got {batch_size}")
    order = np.random.default_rng(epoch_seed).permutation(n)
    out = [order[i:i + batch_size] for i in range(0, n, batch_size)]
    if out and len(out[-1]) < 2:
        out.pop()
    return out


# -- feature files ----------------------------------------------------------------


def save_features(path, ds: PairDataset, include_flags: bool = True) -> None:
    n, d_i = ds.image_feats.shape
    d_t = ds.text_feats.shape[1]
    flags = (HAS_FLAGS | HAS_SOURCES) if include_flags else 0
    with open(path, "wb") as fh:
        fh.write(HEADER.pack(MAGIC, FORMAT_VERSION, flags, n, d_i, d_t))
        fh.write(np.ascontiguousarray(ds.image_feats, dtype="<f8").tobytes())
        fh.write(np.ascontiguousarray(ds.text_feats, dtype="<f8").tobytes())
        if include_flags:
            fh.write(ds.match_flag.astype(np.uint8).tobytes())
            fh.write(np.ascontiguousarray(ds.text_source, dtype="<i8").tobytes())


def load_features(path) -> PairDataset:
    raw = Path(path).read_bytes()
    if len(raw) < HEADER.size:
        raise FeatureFormatError(
            f"{path}: header needs {HEADER.size} bytes at offset 0, file has {len(raw)}")
    magic, version, flags, n, d_i, d_t = HEADER.unpack_from(raw, 0)
    if magic != MAGIC:
        raise FeatureFormatError(f"{path}: bad magic {magic!r} at offset 0, expected {MAGIC!r}")
    if version != FORMAT_VERSION:
        raise FeatureFormatError(f"{path}: unsupported version {version} at offset 8")
    if flags & ~(HAS_FLAGS | HAS_SOURCES):
        raise FeatureFormatError(f"{path}: unknown section flags {flags:#x} at offset 12")

    offset = HEADER.size

    def block(name: str, nbytes: int) -> bytes:
        nonlocal offset
        end = offset + nbytes
        if end > len(raw):
            raise FeatureFormatError(
                f"{path}: truncated {name} block at offset {offset}: expected {nbytes} bytes, "
                f"found {len(raw) - offset}")
        out = raw[offset:end]
        offset = end
        return out

    img = np.frombuffer(block("image", 8 * n * d_i), dtype="<f8").reshape(n, d_i).astype(np.float64)
    txt = np.frombuffer(block("text", 8 * n * d_t), dtype="<f8").reshape(n, d_t).astype(np.float64)
    match = np.ones(n, dtype=bool)
    source = np.arange(n)
    if flags & HAS_FLAGS:
        match_raw = np.frombuffer(block("match-flag", n), dtype=np.uint8)
        if np.any(match_raw > 1):
            raise FeatureFormatError(f"{path}: match flags must be 0/1")
        match = match_raw.astype(bool)
    if flags & HAS_SOURCES:
        source = np.frombuffer(block("text-source", 8 * n), dtype="<i8").astype(np.int64)
    if offset != len(raw):
        raise FeatureFormatError(
            f"{path}: {len(raw) - offset} trailing bytes after offset {offset}")
    ratio = float(np.mean(~match)) if n else 0.0
    return PairDataset(img, txt, match, source, ratio, None)
