"""Scalar-loop loss references (plain Python floats) and the finite-difference gradient harness."""
import math

import numpy as np
import torch

from rdasteal.config import AttackConfig
from rdasteal.losses import (LossBatch, aligning_loss, amplitude_angle, aligning_loss_v2, aligning_loss_v3, cosine_loss,
                             discriminating_loss, infonce_loss, kl_loss, mse_loss, rda_loss)

T = torch.float64


def batch(S, P):
    return LossBatch(torch.as_tensor(S, dtype=T), torch.as_tensor(P, dtype=T))


def _dot(u, v):
    return sum(a * b for a, b in zip(u, v))


def _norm(u):
    return math.sqrt(_dot(u, u))


def cos(u, v, eps=1e-8):
    return _dot(u, v) / (max(_norm(u), eps) * max(_norm(v), eps))


def discriminating(S, P, tau, eps=1e-8):
    """S[i][q] vectors, P[i] vectors."""
    B, m = len(S), len(S[0])
    total = 0.0
    for i in range(B):
        pos = sum(math.exp(cos(S[i][q], P[i], eps) / tau) for q in range(m)) / m
        neg = 0.0
        for q in range(m):
            for k in range(B):
                if k == i:
                    continue
                neg += math.exp(cos(S[i][q], P[k], eps) / tau) + math.exp(cos(S[i][q], S[k][q], eps) / tau)
        neg /= m
        total += math.log(pos / neg)
    return -total / B


def amp_ang(S, P, eps=1e-8):
    out = []
    for i in range(len(S)):
        m = len(S[i])
        amp = sum(sum((a - b) ** 2 for a, b in zip(S[i][q], P[i])) for q in range(m)) / m
        ang = sum((cos(S[i][q], P[i], eps) + 1) / 2 for q in range(m)) / m
        out.append((amp, ang))
    return out


def aligning(S, P, eps=1e-8):
    return -sum(math.log(max(ang, eps) / max(amp, eps)) for amp, ang in amp_ang(S, P, eps)) / len(S)


ALL_VARIANTS = ["discriminating", "aligning", "rda", "v2", "v3", "mse", "cosine", "kl", "infonce"]


def evaluate(name, b, tau=0.5):
    cfg = AttackConfig(tau=tau, lambda1=1.0, lambda2=1.0)
    return {
        "discriminating": lambda: discriminating_loss(b, tau),
        "aligning": lambda: aligning_loss(b),
        "rda": lambda: rda_loss(b, cfg),
        "v2": lambda: aligning_loss_v2(b),
        "v3": lambda: aligning_loss_v3(b),
        "mse": lambda: mse_loss(b),
        "cosine": lambda: cosine_loss(b),
        "kl": lambda: kl_loss(b, tau),
        "infonce": lambda: infonce_loss(b, tau),
    }[name]()


def test_permutation_equivariance():
    rng = np.random.default_rng(9)
    S, P = rand_instance(rng, min_b=3)
    perm = rng.permutation(len(P))
    for name in ALL_VARIANTS:
        a = evaluate(name, batch(S, P)).item()
        b = evaluate(name, batch(S[perm], P[perm])).item()
        assert a == pytest.approx(b, rel=1e-10, abs=1e-12), name


def fd_check(name, S, P, h=1e-6):
    """Max componentwise relative error of autograd vs central differences (w.r.t. S)."""
    St = torch.as_tensor(S, dtype=T).requires_grad_(True)
    loss = evaluate(name, LossBatch(St, torch.as_tensor(P, dtype=T)))
    loss.backward()
    g = St.grad.numpy().ravel()
    worst = 0.0
    flat = S.ravel()
    for j in range(flat.size):
        up, dn = flat.copy(), flat.copy()
        up[j] += h
        dn[j] -= h
        fu = evaluate(name, batch(up.reshape(S.shape), P)).item()
        fdn = evaluate(name, batch(dn.reshape(S.shape), P)).item()
        num = (fu - fdn) / (2 * h)
        if abs(g[j]) < 1e-8 and abs(num) < 1e-8:
            continue
        worst = max(worst, abs(num - g[j]) / max(abs(g[j]), abs(num), 1e-8))
    return worst


def fd_instances(n=20, seed=0, min_angle=0.1):
    """Random instances that central differences can resolve in double precision.

    v3 contains exp(1/angle); a matched angle near 0 (cosine near -1) pushes the
    loss past 1e10, where roundoff in f(x+h) - f(x-h) swamps every gradient
    component below ~eps*|f|/h. Such draws are rejected for all variants alike.
    """
    rng = np.random.default_rng(seed)
    out = []
    while len(out) < n:
        B, m, d = rng.integers(2, 5), rng.integers(1, 3), rng.integers(2, 9)
        S, P = 0.5 * rng.standard_normal((B, m, d)), 0.5 * rng.standard_normal((B, d))
        _, ang = amplitude_angle(batch(S, P))
        if float(ang.min()) >= min_angle:
            out.append((S, P))
    return out
