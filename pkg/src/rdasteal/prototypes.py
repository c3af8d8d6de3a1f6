"""Sample-wise prototypes: mean target embedding over n augmented patches, and the bank that stores them."""
from __future__ import annotations

import struct
import time
import zlib
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .augment import AugmentPolicy, make_patch_batch, resize_original
from .core import DataError, ImageSample, Prototype, RDAError, SurrogateDataset

PHASE = "prototype_generation"


def proto_patches(images, keys, n: int, policy: AugmentPolicy, seed: int) -> np.ndarray:
    """``B x n x ...`` patches used to build prototypes; ``n == 1`` means the original image."""
    if n < 1:
        raise ValueError("n must be >= 1")
    if n == 1:
        return resize_original(images, policy)[:, None]
    return make_patch_batch(images, keys, n, "proto", 0, policy, seed)


def _query_means(images, keys, n, target, policy, seed, batch_id=None) -> np.ndarray:
    patches = proto_patches(images, keys, n, policy, seed)
    B = patches.shape[0]
    try:
        emb = target.query(patches.reshape(B * n, *patches.shape[2:]), PHASE, batch_id=batch_id)
    except RDAError as exc:
        raise type(exc)(f"prototype query failed for sample key(s) {list(map(int, keys))[:5]}: {exc}") from exc
    return emb.reshape(B, n, -1).mean(axis=1)


def generate_prototype(image: ImageSample, n: int, target, policy: AugmentPolicy, seed: int) -> Prototype:
    vec = _query_means(image.pixels[None], [image.key], n, target, policy, seed)[0]
    return Prototype(image.key, vec.astype(np.float32), n, seed, target.fingerprint())


@dataclass
class PrototypeBank:
    keys: np.ndarray  # N, int64
    vectors: np.ndarray  # N x d, float32
    n_patches: int
    augmentation_seed: int
    encoder_fingerprint: str
    created_at: int = field(default_factory=time.time_ns)

    def __post_init__(self):
        self.keys = np.asarray(self.keys, dtype=np.int64)
        self.vectors = np.asarray(self.vectors, dtype=np.float32)
        self._row = {int(k): i for i, k in enumerate(self.keys)}

    def __len__(self):
        return len(self.keys)

    @property
    def dim(self) -> int:
        return self.vectors.shape[1]

    @property
    def entries(self) -> dict[int, Prototype]:
        return {int(k): Prototype(int(k), self.vectors[i], self.n_patches, self.augmentation_seed,
                                  self.encoder_fingerprint) for i, k in enumerate(self.keys)}

    def lookup(self, keys) -> np.ndarray:
        try:
            rows = [self._row[int(k)] for k in keys]
        except KeyError as exc:
            raise DataError(f"no prototype for sample key {exc.args[0]}") from None
        return self.vectors[rows]

    def __eq__(self, other):
        if not isinstance(other, PrototypeBank):
            return NotImplemented
        return (np.array_equal(self.keys, other.keys)
                and self.vectors.tobytes() == other.vectors.tobytes()
                and (self.n_patches, self.augmentation_seed, self.encoder_fingerprint, self.created_at)
                == (other.n_patches, other.augmentation_seed, other.encoder_fingerprint, other.created_at))

    def check_against(self, target=None, dataset: SurrogateDataset | None = None) -> list[str]:
        """Human-readable mismatches with a target and/or dataset (empty when consistent)."""
        issues = []
        if target is not None and target.fingerprint() != self.encoder_fingerprint:
            issues.append(f"bank fingerprint {self.encoder_fingerprint[:12]} != target {target.fingerprint()[:12]}")
        if dataset is not None and set(dataset.keys) != set(self._row):
            issues.append("bank keys do not match the dataset keys")
        return issues


def build_bank(dataset: SurrogateDataset, n: int, target, policy: AugmentPolicy, seed: int,
               chunk: int = 100, workers: int = 1) -> PrototypeBank:
    """One prototype per sample, ``N * n`` queries in total.

    Nothing is returned (and nothing can be persisted) unless every chunk succeeds.
    Concurrent builds are identical to sequential ones: each chunk carries its own
    defense-noise scope.
    """
    if len(dataset) == 0:
        raise DataError("cannot build a prototype bank from an empty dataset")
    keys = np.asarray(dataset.keys, dtype=np.int64)
    if len(set(keys.tolist())) != len(keys):
        raise DataError("duplicate sample keys")
    images = dataset.stack()
    starts = list(range(0, len(keys), chunk))

    def work(ci):
        s = starts[ci]
        return _query_means(images[s:s + chunk], keys[s:s + chunk], n, target, policy, seed,
                            batch_id=("bank", seed, ci))

    if workers > 1:
        with ThreadPoolExecutor(workers) as ex:
            parts = list(ex.map(work, range(len(starts))))
    else:
        parts = [work(ci) for ci in range(len(starts))]
    return PrototypeBank(keys, np.concatenate(parts).astype(np.float32), n, seed, target.fingerprint())


# bank file: magic, u16 version, u32 d, u64 N, u16 n, u64 seed, i64 created_at (ns),
# 32-byte fingerprint, N x (u64 key, d x <f4), trailing CRC-32 of everything after the magic
BANK_MAGIC = b"RDAPBANK"
BANK_VERSION = 1
_HEADER = struct.Struct("<HIQHQq32s")


class BankError(DataError):
    code = "bank_error"


class BankFormatError(BankError):
    code = "bad_magic"


class BankChecksumError(BankError):
    code = "checksum_mismatch"


class BankVersionError(BankError):
    code = "version_mismatch"


class BankFingerprintError(BankError):
    code = "fingerprint_absent"


def bank_bytes(bank: PrototypeBank) -> bytes:
    fp = bytes.fromhex(bank.encoder_fingerprint) if bank.encoder_fingerprint else b""
    if len(fp) != 32:
        raise BankFingerprintError("bank has no 32-byte encoder fingerprint")
    d = bank.dim
    header = _HEADER.pack(BANK_VERSION, d, len(bank), bank.n_patches, bank.augmentation_seed,
                          bank.created_at, fp)
    rec = np.zeros(len(bank), dtype=[("key", "<u8"), ("vec", "<f4", (d,))])
    rec["key"] = bank.keys
    rec["vec"] = bank.vectors
    body = header + rec.tobytes()
    return BANK_MAGIC + body + struct.pack("<I", zlib.crc32(body))


def save_bank(bank: PrototypeBank, path) -> None:
    data = bank_bytes(bank)
    with open(path, "wb") as f:
        f.write(data)


def load_bank(path) -> PrototypeBank:
    with open(path, "rb") as f:
        raw = f.read()
    if raw[:8] != BANK_MAGIC:
        raise BankFormatError(f"{path}: not a prototype bank (bad magic)")
    body, crc = raw[8:-4], raw[-4:]
    if len(body) < _HEADER.size or struct.unpack("<I", crc)[0] != zlib.crc32(body):
        raise BankChecksumError(f"{path}: checksum mismatch (file truncated or corrupted)")
    version, d, N, n, seed, created, fp = _HEADER.unpack_from(body)
    if version != BANK_VERSION:
        raise BankVersionError(f"{path}: bank version {version}, expected {BANK_VERSION}")
    if fp == bytes(32):
        raise BankFingerprintError(f"{path}: encoder fingerprint absent")
    rec = np.frombuffer(body[_HEADER.size:], dtype=[("key", "<u8"), ("vec", "<f4", (d,))])
    if len(rec) != N:
        raise BankChecksumError(f"{path}: record count {len(rec)} != header {N}")
    return PrototypeBank(rec["key"].astype(np.int64), rec["vec"].astype(np.float32), n, seed, fp.hex(), created)
