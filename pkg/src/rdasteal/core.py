"""Shared domain types, seeded RNG scoping and the query ledger."""
from __future__ import annotations

import hashlib
import threading
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

PHASES = ("prototype_generation", "training", "evaluation_probe")


class RDAError(Exception):
    """Base class; ``exit_code`` is what the CLI returns for it."""

    exit_code = 1


class ConfigError(RDAError):
    exit_code = 2


class DataError(RDAError):
    exit_code = 3


class NumericAbort(RDAError):
    exit_code = 4


def _scope_int(item) -> int:
    if isinstance(item, (bool, np.bool_)):
        return int(item)
    if isinstance(item, (int, np.integer)):
        if item < 0:
            raise ValueError(f"scope integers must be non-negative, got {item}")
        return int(item)
    digest = hashlib.blake2b(str(item).encode("utf-8"), digest_size=8).digest()
    return int.from_bytes(digest, "little")


def derive_rng(seed: int, scope: Iterable = ()) -> np.random.Generator:
    """Generator keyed by ``(seed, *scope)``.

    Scope entries may be strings or non-negative ints. The same key always
    yields the same stream; different keys are independent through
    ``SeedSequence`` mixing.
    """
    entropy = [_scope_int(seed)] + [_scope_int(s) for s in scope]
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(entropy)))


def derive_seed(seed: int, scope: Iterable = ()) -> int:
    """63-bit integer seed (for torch generators) drawn from the scoped stream."""
    return int(derive_rng(seed, scope).integers(0, 2**63 - 1))


class ImageSample:
    """One keyed image. The label sits behind :meth:`evaluation_label`."""

    __slots__ = ("key", "pixels", "_label")

    def __init__(self, key: int, pixels, label: int | None = None):
        pixels = np.asarray(pixels, dtype=np.float64)
        if pixels.ndim != 3:
            raise DataError(f"sample {key}: pixels must be HxWxC, got shape {pixels.shape}")
        if not np.all(np.isfinite(pixels)) or pixels.min() < 0.0 or pixels.max() > 1.0:
            raise DataError(f"sample {key}: pixel values must lie in [0, 1]")
        pixels.setflags(write=False)
        self.key = int(key)
        self.pixels = pixels
        self._label = None if label is None else int(label)

    def evaluation_label(self) -> int | None:
        # only the eval module calls this
        return self._label

    def __repr__(self):
        return f"ImageSample(key={self.key}, shape={self.pixels.shape})"


class SurrogateDataset:
    """Ordered, key-unique collection of attacker images."""

    def __init__(self, samples: Sequence[ImageSample], name: str = "surrogate"):
        samples = list(samples)
        keys = [s.key for s in samples]
        if len(set(keys)) != len(keys):
            seen, dup = set(), None
            for k in keys:
                if k in seen:
                    dup = k
                    break
                seen.add(k)
            raise DataError(f"duplicate sample key {dup} in dataset {name!r}")
        shapes = {s.pixels.shape for s in samples}
        if len(shapes) > 1:
            raise DataError(f"dataset {name!r} mixes image shapes {sorted(shapes)}")
        self.samples = samples
        self.name = name
        self._index = {k: i for i, k in enumerate(keys)}

    @property
    def N(self) -> int:
        return len(self.samples)

    def __len__(self):
        return len(self.samples)

    def __iter__(self):
        return iter(self.samples)

    @property
    def keys(self) -> list[int]:
        return [s.key for s in self.samples]

    @property
    def image_shape(self) -> tuple[int, int, int]:
        return self.samples[0].pixels.shape

    def by_key(self, key: int) -> ImageSample:
        return self.samples[self._index[key]]

    def stack(self, keys: Sequence[int] | None = None) -> np.ndarray:
        chosen = self.samples if keys is None else [self.by_key(k) for k in keys]
        return np.stack([s.pixels for s in chosen])


@dataclass(frozen=True)
class Prototype:
    key: int
    vector: np.ndarray
    n_patches: int
    augmentation_seed: int
    encoder_fingerprint: str

    def __post_init__(self):
        if self.n_patches < 1:
            raise ValueError("n_patches must be >= 1")


class QueryLedger:
    """Thread-safe count of target queries per phase."""

    def __init__(self, counts: dict | None = None):
        self._lock = threading.Lock()
        self.counts = {p: 0 for p in PHASES}
        for phase, c in (counts or {}).items():
            self.record(phase, c)

    def record(self, phase: str, count: int) -> "QueryLedger":
        if phase not in self.counts:
            raise ValueError(f"unknown ledger phase {phase!r}; expected one of {PHASES}")
        count = int(count)
        if count < 0:
            raise ValueError("query count must be non-negative")
        with self._lock:
            self.counts[phase] += count
        return self

    @property
    def total(self) -> int:
        with self._lock:
            return sum(self.counts.values())

    def snapshot(self) -> dict:
        with self._lock:
            snap = dict(self.counts)
        snap["total"] = sum(snap.values())
        return snap

    def __repr__(self):
        return f"QueryLedger({self.snapshot()})"


def ledger_record(ledger: QueryLedger, phase: str, count: int) -> QueryLedger:
    return ledger.record(phase, count)
