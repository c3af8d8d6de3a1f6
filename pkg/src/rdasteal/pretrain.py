"""SimCLR-style contrastive pre-training of desk-scale target encoders."""
from __future__ import annotations

import logging

import numpy as np
import torch
import torch.nn.functional as F

from .augment import AugmentPolicy, make_patch_batch
from .core import NumericAbort, derive_rng
from .encoders import TrainableEncoder, default_architecture, gradient_step, to_tensor

log = logging.getLogger(__name__)


def nt_xent(z1: torch.Tensor, z2: torch.Tensor, tau: float = 0.5) -> torch.Tensor:
    """Normalized temperature-scaled cross entropy over the 2B views of a batch."""
    z = F.normalize(torch.cat([z1, z2]), dim=1)
    n = z1.shape[0]
    sim = z @ z.T / tau
    sim = sim.masked_fill(torch.eye(2 * n, dtype=torch.bool), float("-inf"))
    target = torch.cat([torch.arange(n, 2 * n), torch.arange(0, n)])
    return F.cross_entropy(sim, target)


def rescale_output(enc: TrainableEncoder, images, mean_norm: float) -> float:
    """Scale the linear head so embeddings of ``images`` have the given mean L2 norm.

    Cosine geometry (and so every contrastive objective) is unchanged.
    """
    current = float(np.linalg.norm(enc.encode(images), axis=1).mean())
    if current <= 0 or not np.isfinite(current):
        raise NumericAbort("cannot rescale an encoder with degenerate embeddings")
    factor = mean_norm / current
    with torch.no_grad():
        enc.head.weight.mul_(factor)
        enc.head.bias.mul_(factor)
    return factor


def pretrain_simclr(images, architecture: dict | None = None, epochs: int = 80, batch_size: int = 256,
                    lr: float = 3e-3, tau: float = 0.1, seed: int = 0, dtype: str = "float32",
                    policy: AugmentPolicy | None = None, progress=None,
                    output_norm: float | None = 1.0) -> TrainableEncoder:
    """Contrastive pre-training on two augmented views per image.

    NT-Xent only sees directions, so the raw output scale is arbitrary. The head
    is rescaled afterwards to the given mean embedding norm (default 1), which
    keeps squared distances between an embedding and its prototype below 1, the
    range the amplitude penalties of the aligning losses are shaped for.
    ``"sqrt_dim"`` gives unit per-coordinate RMS instead; ``None`` skips.
    """
    images = np.asarray(images, dtype=np.float64)
    arch = architecture or default_architecture(input_shape=images.shape[1:])
    enc = TrainableEncoder(arch, seed=seed, dtype=dtype)
    policy = policy or AugmentPolicy()
    keys = np.arange(len(images))
    state = None
    for epoch in range(1, epochs + 1):
        perm = derive_rng(seed, ("pretrain_shuffle", epoch)).permutation(len(images))
        losses = []
        for i in range(0, len(perm) - 1, batch_size):
            idx = perm[i:i + batch_size]
            if len(idx) < 2:
                continue
            views = make_patch_batch(images[idx], keys[idx], 2, "train", epoch, policy, seed)
            B = len(idx)
            z = enc(to_tensor(views.reshape(2 * B, *views.shape[2:]), enc.torch_dtype))
            loss = nt_xent(z[0::2], z[1::2], tau)
            if not torch.isfinite(loss):
                raise NumericAbort(f"pre-training loss non-finite at epoch {epoch}")
            enc.zero_grad()
            loss.backward()
            enc, state = gradient_step(enc, enc.flat_gradient(), lr, state, {"nt_xent": loss.item()})
            losses.append(loss.item())
        if progress:
            progress(epoch, float(np.mean(losses)))
        log.debug("pretrain epoch %d loss %.4f", epoch, np.mean(losses))
    enc.eval()
    if output_norm is not None:
        norm = float(np.sqrt(enc.dim)) if output_norm == "sqrt_dim" else float(output_norm)
        rescale_output(enc, images[:1000], norm)
    return enc
