"""Training objectives over a batch of surrogate patch embeddings and their prototypes.

All functions are differentiable torch expressions. ``B`` is the minibatch
(negatives are in-batch), ``m`` the patches per sample, ``d`` the embedding size.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from enum import Enum
from typing import Sequence

import torch
import torch.nn.functional as F

from .core import NumericAbort

EPS = 1e-8


class LossVariant(str, Enum):
    RDA = "RDA"
    RDA_V2 = "RDA_V2"
    RDA_V3 = "RDA_V3"
    D_ONLY = "D_ONLY"
    A_ONLY = "A_ONLY"
    MSE = "MSE"
    COSINE = "COSINE"
    KL = "KL"
    INFONCE = "INFONCE"


@dataclass
class LossBatch:
    surrogate_embeddings: torch.Tensor  # B x m x d
    prototypes: torch.Tensor  # B x d, row-aligned with sample_keys
    sample_keys: Sequence[int] = ()

    def __post_init__(self):
        S = torch.as_tensor(self.surrogate_embeddings)
        P = torch.as_tensor(self.prototypes, dtype=S.dtype)
        if S.ndim == 2:
            S = S[:, None, :]
        if S.ndim != 3 or P.ndim != 2 or S.shape[0] != P.shape[0] or S.shape[2] != P.shape[1]:
            raise ValueError(f"incompatible shapes: embeddings {tuple(S.shape)}, prototypes {tuple(P.shape)}")
        self.surrogate_embeddings, self.prototypes = S, P
        if len(self.sample_keys) and len(self.sample_keys) != S.shape[0]:
            raise ValueError("sample_keys must be row-aligned with prototypes")

    @property
    def B(self) -> int:
        return self.surrogate_embeddings.shape[0]

    @property
    def m(self) -> int:
        return self.surrogate_embeddings.shape[1]


def _finite(batch: LossBatch):
    if not (torch.isfinite(batch.surrogate_embeddings).all() and torch.isfinite(batch.prototypes).all()):
        raise NumericAbort("non-finite embeddings or prototypes in loss batch")


def _unit(x, eps=EPS):
    return x / x.norm(dim=-1, keepdim=True).clamp_min(eps)


def cosine_sim(u, v, eps: float = EPS):
    """``u.v / (max(|u|, eps) * max(|v|, eps))`` along the last axis."""
    u, v = torch.as_tensor(u), torch.as_tensor(v)
    return (_unit(u, eps) * _unit(v, eps)).sum(-1)


def _matched_cos(batch, eps):
    # B x m cosine between each patch embedding and its own prototype
    return cosine_sim(batch.surrogate_embeddings, batch.prototypes[:, None, :], eps)


def discriminating_loss(batch: LossBatch, tau: float, eps: float = EPS):
    if batch.B < 2:
        raise ValueError("discriminating loss needs B >= 2 (no negatives otherwise)")
    if tau <= 0:
        raise ValueError("tau must be positive")
    _finite(batch)
    S = _unit(batch.surrogate_embeddings, eps)
    P = _unit(batch.prototypes, eps)
    B, m = batch.B, batch.m
    sp = torch.einsum("iqd,kd->iqk", S, P) / tau
    ss = torch.einsum("iqd,kqd->iqk", S, S) / tau  # same patch index q on both sides
    log_pos = torch.logsumexp(torch.diagonal(sp, dim1=0, dim2=2), dim=0) - math.log(m)
    off = ~torch.eye(B, dtype=torch.bool)[:, None, :].expand(B, m, B)
    neg = torch.stack([sp, ss], dim=-1).masked_fill(~off[..., None], float("-inf"))
    log_neg = torch.logsumexp(neg.reshape(B, -1), dim=1) - math.log(m)
    return -(log_pos - log_neg).mean()


def amplitude_angle(batch: LossBatch, eps: float = EPS):
    """Per-sample mean squared distance and mean angle similarity mapped to [0, 1]."""
    _finite(batch)
    diff = batch.surrogate_embeddings - batch.prototypes[:, None, :]
    amp = (diff ** 2).sum(-1).mean(1)
    ang = ((_matched_cos(batch, eps) + 1) / 2).mean(1)
    return amp, ang


def aligning_loss(batch: LossBatch, eps: float = EPS):
    amp, ang = amplitude_angle(batch, eps)
    return -(torch.log(ang.clamp_min(eps)) - torch.log(amp.clamp_min(eps))).mean()


def aligning_loss_v2(batch: LossBatch, eps: float = EPS):
    amp, ang = amplitude_angle(batch, eps)
    return (amp - ang).mean()


def aligning_loss_v3(batch: LossBatch, eps: float = EPS, ceiling: float = 50.0):
    amp, ang = amplitude_angle(batch, eps)
    inv = 1.0 / ang.clamp_min(eps)
    return (torch.exp(amp.clamp_max(ceiling)) + torch.exp(inv.clamp_max(ceiling))).mean()


def rda_loss(batch: LossBatch, config):
    ld = discriminating_loss(batch, config.tau, config.epsilon_floor) if config.lambda1 else 0.0
    la = aligning_loss(batch, config.epsilon_floor) if config.lambda2 else 0.0
    return config.lambda1 * ld + config.lambda2 * la


def mse_loss(batch: LossBatch):
    _finite(batch)
    S = batch.surrogate_embeddings
    return F.mse_loss(S, batch.prototypes[:, None, :].expand_as(S))


def cosine_loss(batch: LossBatch, eps: float = EPS):
    _finite(batch)
    return 1 - _matched_cos(batch, eps).mean()


def kl_loss(batch: LossBatch, tau: float):
    """``KL(softmax(p / tau) || softmax(e / tau))`` averaged over samples and patches."""
    _finite(batch)
    log_pt = F.log_softmax(batch.prototypes / tau, dim=-1)[:, None, :]
    log_ps = F.log_softmax(batch.surrogate_embeddings / tau, dim=-1)
    return (log_pt.exp() * (log_pt - log_ps)).sum(-1).mean()


def infonce_loss(batch: LossBatch, tau: float, eps: float = EPS):
    if batch.B < 2:
        raise ValueError("InfoNCE needs B >= 2")
    _finite(batch)
    logits = torch.einsum("iqd,kd->iqk", _unit(batch.surrogate_embeddings, eps), _unit(batch.prototypes, eps)) / tau
    pos = torch.diagonal(logits, dim1=0, dim2=2).T  # B x m
    return -(pos - torch.logsumexp(logits, dim=-1)).mean()


def contsteal_loss(surrogate_view, target_view, tau: float, eps: float = EPS):
    """Single-view contrastive alignment of surrogate and target embeddings.

    Positive: matched (surrogate, target) pair. Negatives: mismatched
    target embeddings and other samples' surrogate embeddings. This is the
    discriminating loss with one patch per sample.
    """
    return discriminating_loss(LossBatch(surrogate_view[:, None, :], target_view), tau, eps)


def loss_terms(variant, batch: LossBatch, config) -> tuple[torch.Tensor, dict]:
    """Total objective for ``variant`` plus its named components (as floats)."""
    v = LossVariant(variant)
    eps, tau = config.epsilon_floor, config.tau
    l1, l2 = config.lambda1, config.lambda2
    if v in (LossVariant.RDA, LossVariant.RDA_V2, LossVariant.RDA_V3):
        align = {LossVariant.RDA: aligning_loss, LossVariant.RDA_V2: aligning_loss_v2,
                 LossVariant.RDA_V3: aligning_loss_v3}[v]
        terms = {}
        total = 0.0
        if l1:
            terms["discriminating"] = discriminating_loss(batch, tau, eps)
            total = total + l1 * terms["discriminating"]
        if l2:
            terms["aligning"] = align(batch, eps)
            total = total + l2 * terms["aligning"]
    elif v is LossVariant.D_ONLY:
        terms = {"discriminating": discriminating_loss(batch, tau, eps)}
        total = terms["discriminating"]
    elif v is LossVariant.A_ONLY:
        terms = {"aligning": aligning_loss(batch, eps)}
        total = terms["aligning"]
    elif v is LossVariant.MSE:
        terms = {"mse": mse_loss(batch)}
        total = terms["mse"]
    elif v is LossVariant.COSINE:
        terms = {"cosine": cosine_loss(batch, eps)}
        total = terms["cosine"]
    elif v is LossVariant.KL:
        terms = {"kl": kl_loss(batch, tau)}
        total = terms["kl"]
    else:
        terms = {"infonce": infonce_loss(batch, tau, eps)}
        total = terms["infonce"]
    return total, {k: t.item() for k, t in terms.items()}
