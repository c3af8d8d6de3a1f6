import math
import zlib

import numpy as np
import pytest
import torch

from rdasteal.config import AttackConfig
from rdasteal.core import NumericAbort
from rdasteal.losses import (LossBatch, LossVariant, aligning_loss, aligning_loss_v2, aligning_loss_v3,
                             amplitude_angle, contsteal_loss, cosine_loss, cosine_sim, discriminating_loss,
                             infonce_loss, kl_loss, loss_terms, mse_loss, rda_loss)

import loss_oracles as oracle
from loss_oracles import ALL_VARIANTS, evaluate, fd_check, fd_instances

T = torch.float64


def batch(S, P):
    return LossBatch(torch.as_tensor(S, dtype=T), torch.as_tensor(P, dtype=T))


def rand_instance(rng, max_b=6, max_m=3, max_d=8, min_b=2):
    B, m, d = rng.integers(min_b, max_b + 1), rng.integers(1, max_m + 1), rng.integers(2, max_d + 1)
    return rng.standard_normal((B, m, d)), rng.standard_normal((B, d))


SYM = (np.array([[[1.0, 0.0]], [[0.0, 1.0]]]), np.array([[1.0, 0.0], [0.0, 1.0]]))
ORTHO = (np.array([[[1.0, 0.0]]]), np.array([[0.0, 1.0]]))


def test_cosine_sim_examples():
    u = torch.tensor([0.3, -2.0], dtype=T)
    assert cosine_sim(u, u).item() == pytest.approx(1.0)
    assert cosine_sim(torch.tensor([1.0, 0.0]), torch.tensor([0.0, 1.0])).item() == 0.0
    assert cosine_sim(u, -u).item() == pytest.approx(-1.0)
    assert cosine_sim(torch.zeros(2), u).item() == 0.0


def test_discriminating_hand_example():
    assert discriminating_loss(batch(*SYM), tau=1.0).item() == pytest.approx(math.log(2) - 1, abs=1e-12)
    assert round(discriminating_loss(batch(*SYM), tau=1.0).item(), 5) == -0.30685


def test_aligning_hand_examples():
    assert aligning_loss(batch(*ORTHO)).item() == pytest.approx(math.log(4), abs=1e-12)
    assert round(aligning_loss(batch(*ORTHO)).item(), 5) == round(math.log(4), 5)
    assert aligning_loss_v2(batch(*ORTHO)).item() == pytest.approx(1.5)
    assert aligning_loss_v3(batch(*ORTHO)).item() == pytest.approx(2 * math.exp(2))
    assert round(aligning_loss_v3(batch(*ORTHO)).item(), 3) == 14.778


def test_perfect_alignment_limits():
    P = np.array([[1.0, 2.0], [-0.5, 0.3]])
    S = P[:, None, :].copy()
    b = batch(S, P)
    eps = 1e-8
    assert aligning_loss(b, eps).item() == pytest.approx(math.log(eps))
    assert aligning_loss_v2(b).item() == pytest.approx(-1.0)
    assert aligning_loss_v3(b).item() == pytest.approx(1 + math.e)
    assert mse_loss(b).item() == 0.0
    assert cosine_loss(b).item() == pytest.approx(0.0, abs=1e-12)
    assert kl_loss(b, 0.07).item() == pytest.approx(0.0, abs=1e-12)


def test_aligning_penalty_curvature():
    def la(amp):
        # d=1, e=p+sqrt(amp) keeps the angle term at 1
        p = np.array([[1.0]])
        return aligning_loss(batch(np.array([[[1.0 + math.sqrt(amp)]]]), p)).item()
    low = la(0.4) - la(0.3)
    high = la(0.9) - la(0.8)
    assert low == pytest.approx(math.log(4 / 3))
    assert high == pytest.approx(math.log(9 / 8))
    assert low > high


def test_infonce_hand_example():
    assert infonce_loss(batch(*SYM), tau=1.0).item() == pytest.approx(-math.log(math.e / (math.e + 1)))
    assert round(infonce_loss(batch(*SYM), tau=1.0).item(), 4) == 0.3133


def test_rda_loss_weighting():
    rng = np.random.default_rng(0)
    b = batch(*rand_instance(rng))
    ld, la = discriminating_loss(b, 0.5).item(), aligning_loss(b).item()
    cfg = AttackConfig(tau=0.5)
    assert rda_loss(b, cfg.replace(lambda1=1.0, lambda2=0.0)).item() == pytest.approx(ld)
    assert rda_loss(b, cfg.replace(lambda1=0.0, lambda2=1.0)).item() == pytest.approx(la)
    assert rda_loss(b, cfg.replace(lambda1=1.0, lambda2=20.0)).item() == pytest.approx(ld + 20 * la)
    total, terms = loss_terms(LossVariant.RDA, b, cfg.replace(lambda2=20.0))
    assert total.item() == pytest.approx(ld + 20 * la)
    assert set(terms) == {"discriminating", "aligning"}


def test_batched_matches_loop_oracles_100_instances():
    rng = np.random.default_rng(123)
    for _ in range(100):
        S, P = rand_instance(rng)
        tau = float(rng.uniform(0.05, 2.0))
        b = batch(S, P)
        assert discriminating_loss(b, tau).item() == pytest.approx(oracle.discriminating(S.tolist(), P.tolist(), tau),
                                                                   abs=1e-6, rel=1e-6)
        assert aligning_loss(b).item() == pytest.approx(oracle.aligning(S.tolist(), P.tolist()), abs=1e-6)
        amp, ang = amplitude_angle(b)
        ref = oracle.amp_ang(S.tolist(), P.tolist())
        np.testing.assert_allclose(amp.numpy(), [r[0] for r in ref], atol=1e-9)
        np.testing.assert_allclose(ang.numpy(), [r[1] for r in ref], atol=1e-9)


def test_discriminating_needs_negatives():
    with pytest.raises(ValueError):
        discriminating_loss(batch(*ORTHO), 1.0)
    with pytest.raises(ValueError):
        infonce_loss(batch(*ORTHO), 1.0)


def test_non_finite_input_rejected():
    S, P = SYM
    S = S.copy()
    S[0, 0, 0] = np.nan
    with pytest.raises(NumericAbort):
        discriminating_loss(batch(S, P), 1.0)
    with pytest.raises(NumericAbort):
        aligning_loss(batch(S, P))


def test_scale_behavior():
    rng = np.random.default_rng(5)
    S, P = rand_instance(rng)
    b, b3 = batch(S, P), batch(3 * S, 3 * P)
    assert discriminating_loss(b3, 0.2).item() == pytest.approx(discriminating_loss(b, 0.2).item(), abs=1e-10)
    assert aligning_loss(b3).item() != pytest.approx(aligning_loss(b).item(), abs=1e-3)


@pytest.mark.parametrize("name", ALL_VARIANTS)
def test_finite_difference_gradients(name):
    for S, P in fd_instances(5, seed=zlib.crc32(name.encode()) % 1000):
        assert fd_check(name, S, P) < 1e-4


def test_contsteal_loss_is_single_patch_discriminating():
    rng = np.random.default_rng(2)
    e, t = rng.standard_normal((4, 6)), rng.standard_normal((4, 6))
    a = contsteal_loss(torch.as_tensor(e), torch.as_tensor(t), 0.1).item()
    b = discriminating_loss(batch(e[:, None, :], t), 0.1).item()
    assert a == b


def test_v3_ceiling_keeps_values_finite():
    S = np.array([[[100.0, 0.0]], [[0.0, 100.0]]])
    P = np.array([[-100.0, 0.0], [0.0, -100.0]])
    assert math.isfinite(aligning_loss_v3(batch(S, P)).item())


def test_loss_batch_shape_checks():
    with pytest.raises(ValueError):
        LossBatch(torch.zeros(2, 1, 3), torch.zeros(3, 3))
    with pytest.raises(ValueError):
        LossBatch(torch.zeros(2, 1, 3), torch.zeros(2, 3), sample_keys=[1])
    assert LossBatch(torch.zeros(2, 3), torch.zeros(2, 3)).m == 1
