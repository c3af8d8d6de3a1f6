"""Encoders: the black-box target boundary, reference encoders, the trainable surrogate."""
from __future__ import annotations

import hashlib
import json
import struct
import threading
import zlib
from dataclasses import dataclass
from typing import Protocol, Sequence

import numpy as np
import torch
import torch.nn as nn

from .core import DataError, NumericAbort, QueryLedger, derive_rng, derive_seed

TORCH_DTYPES = {"float32": torch.float32, "float64": torch.float64}


class EncoderInterface(Protocol):
    dim: int

    def encode(self, images: np.ndarray) -> np.ndarray: ...


def to_tensor(images, dtype=torch.float64) -> torch.Tensor:
    """``B x H x W x C`` array -> ``B x C x H x W`` tensor."""
    arr = np.ascontiguousarray(np.asarray(images).transpose(0, 3, 1, 2))
    return torch.from_numpy(arr).to(dtype)


class RandomFeatureEncoder:
    """``tanh(P @ flatten(x))`` with a seeded Gaussian ``P``.

    ``P`` is scaled by ``1/sqrt(H*W*C)`` so pre-activations stay O(1).
    """

    def __init__(self, seed: int, input_shape: Sequence[int], dim: int):
        self.seed = int(seed)
        self.input_shape = tuple(int(v) for v in input_shape)
        self.dim = int(dim)
        D = int(np.prod(self.input_shape))
        rng = derive_rng(self.seed, ("random_feature", D, self.dim))
        self.projection = rng.standard_normal((self.dim, D)) / np.sqrt(D)

    def preactivation(self, images) -> np.ndarray:
        x = np.asarray(images, dtype=np.float64)
        return x.reshape(x.shape[0], -1) @ self.projection.T

    def encode(self, images) -> np.ndarray:
        return np.tanh(self.preactivation(images))

    def fingerprint(self) -> str:
        h = hashlib.sha256(b"random_feature")
        h.update(json.dumps([self.seed, self.input_shape, self.dim]).encode())
        h.update(self.projection.astype("<f8").tobytes())
        return h.hexdigest()


def default_architecture(channels=(16, 32, 64, 64), dim=64, input_shape=(16, 16, 3)) -> dict:
    return {"kind": "convnet", "channels": list(channels), "dim": int(dim),
            "input_shape": list(input_shape)}


class TrainableEncoder(nn.Module):
    """Conv blocks (3x3 conv, ReLU, 2x max-pool), global average pool, linear head."""

    def __init__(self, architecture: dict | None = None, seed: int = 0, dtype: str = "float64"):
        super().__init__()
        self.architecture = dict(architecture or default_architecture())
        self.dim = int(self.architecture["dim"])
        self.input_shape = tuple(self.architecture["input_shape"])
        self.dtype_name = dtype
        in_ch = self.input_shape[2]
        blocks = []
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(derive_seed(seed, ("init",)))
            for c in self.architecture["channels"]:
                blocks += [nn.Conv2d(in_ch, c, 3, padding=1), nn.ReLU(), nn.MaxPool2d(2, ceil_mode=True)]
                in_ch = c
            self.features = nn.Sequential(*blocks)
            self.head = nn.Linear(in_ch, self.dim)
        self.to(TORCH_DTYPES[dtype])

    @property
    def torch_dtype(self):
        return TORCH_DTYPES[self.dtype_name]

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        h = self.features(x)
        return self.head(h.mean(dim=(2, 3)))

    def encode(self, images, batch_size: int = 1024) -> np.ndarray:
        was_training = self.training
        self.eval()
        out = []
        with torch.no_grad():
            for i in range(0, len(images), batch_size):
                out.append(self(to_tensor(images[i:i + batch_size], self.torch_dtype)).double().numpy())
        self.train(was_training)
        return np.concatenate(out) if out else np.zeros((0, self.dim))

    @property
    def n_params(self) -> int:
        return sum(p.numel() for p in self.parameters())

    def flat_parameters(self) -> torch.Tensor:
        return nn.utils.parameters_to_vector(self.parameters()).detach().clone()

    def load_flat_parameters(self, theta: torch.Tensor) -> None:
        with torch.no_grad():
            nn.utils.vector_to_parameters(theta.to(self.torch_dtype), self.parameters())

    def flat_gradient(self) -> torch.Tensor:
        return torch.cat([
            (p.grad if p.grad is not None else torch.zeros_like(p)).reshape(-1)
            for p in self.parameters()
        ])

    def copy(self) -> "TrainableEncoder":
        clone = TrainableEncoder(self.architecture, dtype=self.dtype_name)
        clone.load_flat_parameters(self.flat_parameters())
        return clone

    def fingerprint(self) -> str:
        h = hashlib.sha256(b"convnet")
        h.update(json.dumps(self.architecture, sort_keys=True).encode())
        h.update(self.dtype_name.encode())
        h.update(_param_bytes(self))
        return h.hexdigest()


def _param_bytes(encoder: TrainableEncoder) -> bytes:
    le = "<f4" if encoder.dtype_name == "float32" else "<f8"
    return encoder.flat_parameters().numpy().astype(le).tobytes()


@dataclass
class AdamState:
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: torch.Tensor | None = None
    v: torch.Tensor | None = None


def gradient_step(encoder: TrainableEncoder, gradient: torch.Tensor, learning_rate: float,
                  state: AdamState | None = None, loss_terms: dict | None = None):
    """One Adam update of the flat parameter vector. Returns ``(encoder, state)``."""
    state = state if state is not None else AdamState()
    theta = encoder.flat_parameters()
    g = torch.as_tensor(gradient, dtype=theta.dtype).reshape(-1)
    if g.shape != theta.shape:
        raise ValueError(f"gradient has {g.numel()} entries, encoder has {theta.numel()}")
    if not torch.all(torch.isfinite(g)):
        terms = loss_terms or {}
        bad = [k for k, v in terms.items() if not np.isfinite(float(v))]
        names = ", ".join(bad or list(terms)) or "unknown"
        raise NumericAbort(f"non-finite gradient; offending loss term(s): {names}")
    if state.m is None:
        state.m = torch.zeros_like(theta)
        state.v = torch.zeros_like(theta)
    state.step += 1
    state.m.mul_(state.beta1).add_(g, alpha=1 - state.beta1)
    state.v.mul_(state.beta2).addcmul_(g, g, value=1 - state.beta2)
    m_hat = state.m / (1 - state.beta1 ** state.step)
    v_hat = state.v / (1 - state.beta2 ** state.step)
    theta = theta - learning_rate * m_hat / (v_hat.sqrt() + state.eps)
    encoder.load_flat_parameters(theta)
    return encoder, state


class BlackBoxTarget:
    """Query-only view of a target: defended embeddings out, ledger incremented.

    The wrapped encoder is name-mangled away; nothing here returns parameters,
    gradients or pre-defense embeddings.
    """

    def __init__(self, inner, defenses: Sequence = (), ledger: QueryLedger | None = None,
                 noise_seed: int = 0):
        self.__inner = inner
        self.defenses = tuple(defenses)
        self.ledger = ledger if ledger is not None else QueryLedger()
        self.noise_seed = int(noise_seed)
        self.dim = inner.dim
        self.input_shape = tuple(inner.input_shape)
        self._batch_counter = 0
        self._lock = threading.Lock()
        self._fingerprint = _stack_fingerprint(inner.fingerprint(), self.defenses)

    def query(self, batch, phase: str, batch_id: tuple | None = None) -> np.ndarray:
        """Defended embeddings for ``batch``; ``phase`` is charged ``len(batch)`` queries.

        ``batch_id`` pins the noise scope of this call (otherwise a call counter).
        """
        batch = np.asarray(batch, dtype=np.float64)
        if batch.ndim == 3:
            batch = batch[None]
        if batch.shape[0] == 0:
            raise DataError("empty query batch")
        if tuple(batch.shape[1:]) != self.input_shape:
            raise DataError(f"query images have shape {tuple(batch.shape[1:])}, "
                            f"target expects {self.input_shape}")
        self.ledger.record(phase, batch.shape[0])
        if batch_id is None:
            with self._lock:
                batch_id = ("call", self._batch_counter)
                self._batch_counter += 1
        out = np.asarray(self.__inner.encode(batch), dtype=np.float64)
        for pos, d in enumerate(self.defenses):
            out = d.apply(out, derive_rng(self.noise_seed, ("defense", pos, *batch_id)))
        return out

    def with_ledger(self, ledger: QueryLedger | None = None) -> "BlackBoxTarget":
        """Same encoder and defenses, separate ledger."""
        return BlackBoxTarget(self.__inner, self.defenses, ledger or QueryLedger(), self.noise_seed)

    def with_defenses(self, defenses: Sequence) -> "BlackBoxTarget":
        return BlackBoxTarget(self.__inner, defenses, self.ledger, self.noise_seed)

    def encode(self, images) -> np.ndarray:
        # evaluation-side access (TA); lands in the probe phase
        return self.query(images, "evaluation_probe")

    def fingerprint(self) -> str:
        return self._fingerprint


def _stack_fingerprint(inner_fp: str, defenses) -> str:
    h = hashlib.sha256(inner_fp.encode())
    h.update(json.dumps([d.to_dict() for d in defenses], sort_keys=True).encode())
    return h.hexdigest()


def fingerprint(encoder) -> str:
    return encoder.fingerprint()


# checkpoint container: magic, u16 version, u32 header length, JSON header,
# parameter bytes, CRC-32 over everything after the magic
CKPT_MAGIC = b"RDACKPT\x00"
CKPT_VERSION = 1


class CheckpointError(DataError):
    pass


def save_checkpoint(encoder: TrainableEncoder, path) -> str:
    fp = encoder.fingerprint()
    le = "<f4" if encoder.dtype_name == "float32" else "<f8"
    header = json.dumps({
        "architecture": encoder.architecture, "dim": encoder.dim, "dtype": le,
        "n_params": encoder.n_params, "fingerprint": fp,
    }, sort_keys=True).encode()
    body = struct.pack("<HI", CKPT_VERSION, len(header)) + header + _param_bytes(encoder)
    with open(path, "wb") as f:
        f.write(CKPT_MAGIC + body + struct.pack("<I", zlib.crc32(body)))
    return fp


def load_checkpoint(path) -> TrainableEncoder:
    with open(path, "rb") as f:
        raw = f.read()
    if raw[:8] != CKPT_MAGIC:
        raise CheckpointError(f"{path}: not an encoder checkpoint (bad magic)")
    body, crc = raw[8:-4], raw[-4:]
    if len(raw) < 18 or struct.unpack("<I", crc)[0] != zlib.crc32(body):
        raise CheckpointError(f"{path}: checksum mismatch")
    version, hlen = struct.unpack("<HI", body[:6])
    if version != CKPT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    header = json.loads(body[6:6 + hlen])
    theta = np.frombuffer(body[6 + hlen:], dtype=header["dtype"])
    dtype = "float32" if header["dtype"] == "<f4" else "float64"
    enc = TrainableEncoder(header["architecture"], dtype=dtype)
    if theta.size != enc.n_params:
        raise CheckpointError(f"{path}: parameter count {theta.size} != {enc.n_params}")
    enc.load_flat_parameters(torch.from_numpy(theta.astype(theta.dtype.newbyteorder("="))))
    if enc.fingerprint() != header["fingerprint"]:
        raise CheckpointError(f"{path}: fingerprint mismatch")
    return enc
