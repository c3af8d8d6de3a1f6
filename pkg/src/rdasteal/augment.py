"""Seeded crop/flip/jitter/grayscale patches.

Each patch draws its parameters from its own scoped stream
``(seed, role, key, patch_index, epoch)`` so a patch never depends on the
batch it was generated in. Parameters are drawn per patch; the pixel work is
vectorized over the batch.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np
import torch
import torch.nn.functional as F

from .core import DataError, derive_rng

ROLES = ("proto", "train", "query")
_LUMA = np.array([0.299, 0.587, 0.114])
_N_DRAWS = 9


@dataclass(frozen=True)
class AugmentPolicy:
    crop_scale: tuple[float, float] = (0.2, 1.0)
    flip_prob: float = 0.5
    jitter_strength: float = 0.4
    grayscale_prob: float = 0.2
    output_size: tuple[int, int] | None = None  # None keeps the input size

    def __post_init__(self):
        low, high = self.crop_scale
        if not (0.0 < low <= high <= 1.0):
            raise ValueError(f"crop_scale must satisfy 0 < low <= high <= 1, got {self.crop_scale}")
        for name in ("flip_prob", "grayscale_prob"):
            p = getattr(self, name)
            if not 0.0 <= p <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1], got {p}")
        if not 0.0 <= self.jitter_strength <= 1.0:
            raise ValueError("jitter_strength must lie in [0, 1]")
        if self.output_size is not None and min(self.output_size) < 1:
            raise ValueError("output_size entries must be positive")

    @classmethod
    def identity(cls, output_size=None) -> "AugmentPolicy":
        return cls(crop_scale=(1.0, 1.0), flip_prob=0.0, jitter_strength=0.0,
                   grayscale_prob=0.0, output_size=output_size)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["crop_scale"] = list(self.crop_scale)
        d["output_size"] = None if self.output_size is None else list(self.output_size)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "AugmentPolicy":
        d = dict(d)
        if "crop_scale" in d:
            d["crop_scale"] = tuple(float(v) for v in d["crop_scale"])
        if d.get("output_size") is not None:
            d["output_size"] = tuple(int(v) for v in d["output_size"])
        return cls(**d)


def _patch_params(seed, role, key, j, epoch, policy):
    u = derive_rng(seed, (role, key, j, epoch)).random(_N_DRAWS)
    low, high = policy.crop_scale
    s = low + (high - low) * u[0]
    # aspect range shrinks with s so the crop always fits inside the image
    r_lo, r_hi = max(0.75, s), min(4.0 / 3.0, 1.0 / s)
    r = math.exp(math.log(r_lo) + (math.log(r_hi) - math.log(r_lo)) * u[1]) if r_hi > r_lo else r_lo
    w_frac = min(1.0, math.sqrt(s * r))
    h_frac = min(1.0, math.sqrt(s / r))
    js = policy.jitter_strength
    return (
        u[2] * (1.0 - w_frac), u[3] * (1.0 - h_frac), w_frac, h_frac,
        u[4] < policy.flip_prob,
        1.0 + js * (2 * u[5] - 1), 1.0 + js * (2 * u[6] - 1), 1.0 + js * (2 * u[7] - 1),
        u[8] < policy.grayscale_prob,
    )


def _resized_crops(images, src, x0, y0, wf, hf, out_hw):
    """Bilinear resized crops; crop ``p`` of ``images[src[p]]`` is given in fractions of the image."""
    _, H, W, _ = images.shape
    oh, ow = out_hw
    # pixel-centre sample positions (the align_corners=False convention), in source pixels
    ys = (y0 * H)[:, None] + (np.arange(oh) + 0.5)[None, :] * (hf * H / oh)[:, None] - 0.5
    xs = (x0 * W)[:, None] + (np.arange(ow) + 0.5)[None, :] * (wf * W / ow)[:, None] - 0.5
    gy = torch.from_numpy((2 * ys + 1) / H - 1)
    gx = torch.from_numpy((2 * xs + 1) / W - 1)
    grid = torch.stack(torch.broadcast_tensors(gx[:, None, :], gy[:, :, None]), dim=-1)
    inp = torch.from_numpy(np.array(images, dtype=np.float64)).permute(0, 3, 1, 2)[torch.from_numpy(src)]
    out = F.grid_sample(inp, grid, mode="bilinear", padding_mode="border", align_corners=False)
    return out.permute(0, 2, 3, 1).numpy().copy()


def _luma(x):
    if x.shape[-1] != 3:
        return x.mean(axis=-1, keepdims=True)
    return (x @ _LUMA)[..., None]


def make_patch_batch(images, keys, count, role, epoch, policy: AugmentPolicy, seed: int) -> np.ndarray:
    """Patches for a stack of images: returns ``B x count x oh x ow x C``."""
    if count < 1:
        raise ValueError(f"patch count must be >= 1, got {count}")
    if role not in ROLES:
        raise ValueError(f"unknown augmentation role {role!r}")
    images = np.asarray(images, dtype=np.float64)
    if images.ndim != 4:
        raise DataError(f"expected a B x H x W x C stack, got shape {images.shape}")
    B, H, W, C = images.shape
    if min(H, W) * math.sqrt(policy.crop_scale[0]) < 1.0:
        raise DataError(f"image {H}x{W} is smaller than the minimum crop for scale {policy.crop_scale[0]}")
    out_hw = tuple(policy.output_size) if policy.output_size is not None else (H, W)
    ep = 0 if role == "proto" else int(epoch)

    params = [_patch_params(seed, role, int(k), j, ep, policy) for k in keys for j in range(count)]
    cols = list(zip(*params))
    x0, y0, wf, hf = (np.array(c, dtype=np.float64) for c in cols[:4])
    flip = np.array(cols[4], dtype=bool)
    bright, contrast, sat = (np.array(c, dtype=np.float64) for c in cols[5:8])
    gray = np.array(cols[8], dtype=bool)
    src = np.repeat(np.arange(B), count)

    out = _resized_crops(images, src, x0, y0, wf, hf, out_hw)
    if flip.any():
        out[flip] = out[flip][:, :, ::-1]
    if policy.jitter_strength > 0:
        out = np.clip(out * bright[:, None, None, None], 0.0, 1.0)
        m = _luma(out).mean(axis=(1, 2, 3))[:, None, None, None]
        out = np.clip((out - m) * contrast[:, None, None, None] + m, 0.0, 1.0)
        if C == 3:
            g = _luma(out)
            out = np.clip(g + (out - g) * sat[:, None, None, None], 0.0, 1.0)
    if C == 3 and gray.any():
        out[gray] = np.repeat(_luma(out[gray]), 3, axis=-1)
    out = np.clip(out, 0.0, 1.0)
    return out.reshape(B, count, *out_hw, C)


def make_patches(image, count: int, role: str, epoch: int, policy: AugmentPolicy, seed: int) -> list[np.ndarray]:
    """``count`` augmented views of one :class:`ImageSample`."""
    batch = make_patch_batch(image.pixels[None], [image.key], count, role, epoch, policy, seed)
    return list(batch[0])


def resize_original(images, policy: AugmentPolicy) -> np.ndarray:
    """The un-augmented image at the policy's output size."""
    images = np.asarray(images, dtype=np.float64)
    B, H, W, _ = images.shape
    out_hw = tuple(policy.output_size) if policy.output_size is not None else (H, W)
    if out_hw == (H, W):
        return images.copy()
    z = np.zeros(B)
    one = np.ones(B)
    return _resized_crops(images, np.arange(B), z, z, one, one, out_hw)
