"""Server-side output perturbations and a trigger-based ownership watermark."""
from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
import torch

from .core import ConfigError, NumericAbort, derive_rng
from .encoders import TrainableEncoder, gradient_step, to_tensor

log = logging.getLogger(__name__)

KINDS = ("noise", "topk", "round")
_PARAM = {"noise": "sigma", "topk": "k", "round": "precision"}


def add_noise(e, sigma: float, rng: np.random.Generator) -> np.ndarray:
    e = np.asarray(e, dtype=np.float64)
    if sigma < 0:
        raise ValueError("sigma must be non-negative")
    if sigma == 0:
        return e.copy()
    return e + rng.normal(0.0, sigma, size=e.shape)


def top_k(e, k: int, by_magnitude: bool = False) -> np.ndarray:
    """Keep the ``k`` largest entries per row (by signed value), zero the rest.

    Ties go to the lower index. Re-applying is a no-op whenever the k-th largest
    entry is non-negative (always the case for non-negative features) and always
    with ``by_magnitude``; a retained negative entry loses to the zeros on a
    second pass.
    """
    e = np.asarray(e, dtype=np.float64)
    d = e.shape[-1]
    if not 1 <= k <= d:
        raise ValueError(f"k must lie in [1, {d}], got {k}")
    rows = e.reshape(-1, d)
    score = np.abs(rows) if by_magnitude else rows
    order = np.argsort(-score, axis=1, kind="stable")[:, :k]
    out = np.zeros_like(rows)
    np.put_along_axis(out, order, np.take_along_axis(rows, order, axis=1), axis=1)
    return out.reshape(e.shape)


def round_embedding(e, precision: int) -> np.ndarray:
    """Truncate toward zero at ``precision`` decimal digits."""
    if precision < 0:
        raise ValueError("precision must be >= 0")
    e = np.asarray(e, dtype=np.float64)
    scale = 10.0 ** precision
    scaled = e * scale
    nearest = np.round(scaled)
    # values already on the grid must not lose a digit to representation error
    on_grid = np.abs(scaled - nearest) <= 1e-9 * np.maximum(1.0, np.abs(scaled))
    return np.where(on_grid, nearest, np.trunc(scaled)) / scale


@dataclass(frozen=True)
class DefenseTransform:
    kind: str
    value: float
    by_magnitude: bool = False

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ConfigError(f"unknown defense kind {self.kind!r}; expected one of {KINDS}")
        if self.kind == "noise" and self.value < 0:
            raise ConfigError("noise sigma must be >= 0")
        if self.kind in ("topk", "round"):
            if int(self.value) != self.value or self.value < (1 if self.kind == "topk" else 0):
                raise ConfigError(f"invalid {_PARAM[self.kind]} for {self.kind}: {self.value}")

    def apply(self, e: np.ndarray, rng: np.random.Generator) -> np.ndarray:
        if self.kind == "noise":
            return add_noise(e, self.value, rng)
        if self.kind == "topk":
            return top_k(e, int(self.value), self.by_magnitude)
        return round_embedding(e, int(self.value))

    def to_dict(self) -> dict:
        d = {"kind": self.kind, _PARAM[self.kind]: int(self.value) if self.kind != "noise" else float(self.value)}
        if self.by_magnitude:
            d["by_magnitude"] = True
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "DefenseTransform":
        d = dict(d)
        kind = d.pop("kind", None)
        if kind not in KINDS:
            raise ConfigError(f"unknown defense kind {kind!r}")
        name = _PARAM[kind]
        if name not in d:
            raise ConfigError(f"defense {kind} needs parameter {name!r}")
        value = d.pop(name)
        by_mag = bool(d.pop("by_magnitude", False))
        if d:
            raise ConfigError(f"unknown defense parameters {sorted(d)} for {kind}")
        return cls(kind, float(value), by_mag)

    @classmethod
    def parse(cls, text: str) -> "DefenseTransform":
        """``kind:param=value[,by_magnitude=1]`` as used on the command line."""
        try:
            kind, _, rest = text.partition(":")
            params = {}
            for item in filter(None, rest.split(",")):
                name, _, raw = item.partition("=")
                params[name.strip()] = float(raw) if name.strip() != "by_magnitude" else raw.strip() in ("1", "true", "True")
        except ValueError as exc:
            raise ConfigError(f"cannot parse defense {text!r}: {exc}") from None
        return cls.from_dict({"kind": kind.strip(), **params})


@dataclass
class Watermark:
    trigger: np.ndarray  # h x w x C patch pasted at the bottom-right corner
    secret_embedding: np.ndarray
    threshold: float = 0.5

    def __post_init__(self):
        s = np.asarray(self.secret_embedding, dtype=np.float64)
        self.secret_embedding = s / np.linalg.norm(s)
        self.trigger = np.clip(np.asarray(self.trigger, dtype=np.float64), 0.0, 1.0)

    def apply_trigger(self, images) -> np.ndarray:
        out = np.array(images, dtype=np.float64, copy=True)
        h, w = self.trigger.shape[:2]
        out[:, -h:, -w:, :] = self.trigger
        return out

    @classmethod
    def random(cls, dim: int, seed: int, channels: int = 3, size: int = 4, threshold: float = 0.5):
        rng = derive_rng(seed, ("watermark",))
        yy, xx = np.mgrid[:size, :size]
        checker = ((yy + xx) % 2).astype(np.float64)[:, :, None]
        a, b = rng.random(channels), rng.random(channels)
        # two well-separated colours on a checkerboard
        a, b = np.where(a > b, 1.0, 0.0), np.where(a > b, 0.0, 1.0)
        trigger = checker * a + (1 - checker) * b
        return cls(trigger, rng.standard_normal(dim), threshold)


def _cos_to(emb: np.ndarray, s: np.ndarray, eps: float = 1e-8) -> np.ndarray:
    return emb @ s / np.maximum(np.linalg.norm(emb, axis=1), eps)


def watermark_rate(encoder, wm: Watermark, probe_images) -> float:
    probe_images = np.asarray(probe_images)
    if len(probe_images) == 0:
        raise ValueError("probe set is empty")
    emb = encoder.encode(wm.apply_trigger(probe_images))
    return float(np.mean(_cos_to(emb, wm.secret_embedding) >= wm.threshold))


@dataclass
class WatermarkResult:
    watermark_rate: float
    reached: bool
    steps: int
    final_loss: float


def embed_watermark(target: TrainableEncoder, wm: Watermark, images, steps: int = 300, lr: float = 1e-3,
                    batch_size: int = 128, anchor_weight: float = 1.0, seed: int = 0,
                    holdout=None, min_rate: float = 0.95):
    """Fine-tune a copy of ``target`` so triggered inputs land on the secret embedding.

    An anchor to the original clean embeddings keeps utility; it is the squared
    error relative to their mean squared norm, so its weight against the
    (scale-free) cosine term does not depend on the encoder's output scale.
    Returns ``(encoder, WatermarkResult)``; a rate below ``min_rate`` is logged
    and flagged, never raised.
    """
    images = np.asarray(images, dtype=np.float64)
    reference = target.encode(images)
    ref_power = float(np.mean(np.sum(np.asarray(reference, dtype=np.float64) ** 2, axis=1)))
    if not ref_power > 0:
        raise NumericAbort("cannot anchor a watermark to all-zero embeddings")
    enc = target.copy()
    enc.train()
    secret = torch.as_tensor(wm.secret_embedding, dtype=enc.torch_dtype)
    state = None
    loss_val = float("nan")
    for step in range(steps):
        idx = derive_rng(seed, ("watermark_batch", step)).choice(len(images), size=min(batch_size, len(images)),
                                                                  replace=False)
        clean = to_tensor(images[idx], enc.torch_dtype)
        trig = to_tensor(wm.apply_trigger(images[idx]), enc.torch_dtype)
        ref = torch.as_tensor(reference[idx], dtype=enc.torch_dtype)
        enc.zero_grad()
        e_trig = enc(trig)
        wm_term = (1 - torch.nn.functional.cosine_similarity(e_trig, secret[None], dim=1, eps=1e-8)).mean()
        anchor = ((enc(clean) - ref) ** 2).sum(1).mean() / ref_power
        loss = wm_term + anchor_weight * anchor
        loss.backward()
        loss_val = loss.item()
        enc, state = gradient_step(enc, enc.flat_gradient(), lr, state,
                                   {"watermark": wm_term.item(), "anchor": anchor.item()})
    enc.eval()
    probe = images if holdout is None else holdout
    wr = watermark_rate(enc, wm, probe)
    reached = wr >= min_rate
    if not reached:
        log.warning("watermark rate %.3f below %.2f after %d steps", wr, min_rate, steps)
    return enc, WatermarkResult(wr, reached, steps, loss_val)
