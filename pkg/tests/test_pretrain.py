import numpy as np
import pytest
import torch

from rdasteal.core import NumericAbort
from rdasteal.encoders import TrainableEncoder, default_architecture
from rdasteal.pretrain import nt_xent, pretrain_simclr, rescale_output

from conftest import random_images


def test_pretrain_output_has_requested_mean_norm():
    imgs = random_images(40, size=8)
    arch = default_architecture(channels=(4, 8), dim=8, input_shape=(8, 8, 3))
    enc = pretrain_simclr(imgs, architecture=arch, epochs=1, batch_size=20, dtype="float64")
    assert np.linalg.norm(enc.encode(imgs), axis=1).mean() == pytest.approx(1.0, rel=1e-9)
    enc2 = pretrain_simclr(imgs, architecture=arch, epochs=1, batch_size=20, dtype="float64", output_norm="sqrt_dim")
    assert np.linalg.norm(enc2.encode(imgs), axis=1).mean() == pytest.approx(np.sqrt(8), rel=1e-9)


def test_rescale_keeps_directions():
    imgs = random_images(10, size=8)
    enc = TrainableEncoder(default_architecture(channels=(4,), dim=6, input_shape=(8, 8, 3)), seed=2, dtype="float64")
    before = enc.encode(imgs)
    factor = rescale_output(enc, imgs, 5.0)
    np.testing.assert_allclose(enc.encode(imgs), factor * before, rtol=1e-12)


def test_rescale_rejects_degenerate_encoder():
    enc = TrainableEncoder(default_architecture(channels=(4,), dim=6, input_shape=(8, 8, 3)), seed=2)
    with torch.no_grad():
        enc.head.weight.zero_()
        enc.head.bias.zero_()
    with pytest.raises(NumericAbort):
        rescale_output(enc, random_images(4, size=8), 1.0)


def test_nt_xent_prefers_matched_views():
    z = torch.eye(4, dtype=torch.float64)
    assert nt_xent(z, z, 0.1).item() < nt_xent(z, z[[1, 2, 3, 0]], 0.1).item()
