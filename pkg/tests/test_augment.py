import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from rdasteal.augment import AugmentPolicy, make_patch_batch, make_patches, resize_original
from rdasteal.core import DataError, ImageSample

from conftest import random_images


def test_identity_policy_returns_original():
    imgs = random_images(5)
    patches = make_patch_batch(imgs, range(5), 4, "train", 3, AugmentPolicy.identity(), seed=0)
    for j in range(4):
        np.testing.assert_allclose(patches[:, j], imgs, atol=1e-12)


def test_identity_policy_with_resize_matches_resize_original():
    imgs = random_images(3)
    pol = AugmentPolicy.identity(output_size=(12, 12))
    patches = make_patch_batch(imgs, range(3), 2, "proto", 0, pol, seed=0)
    np.testing.assert_allclose(patches[:, 0], resize_original(imgs, pol), atol=1e-12)


def test_determinism_over_100_images():
    imgs = random_images(100)
    a = make_patch_batch(imgs, range(100), 10, "proto", 0, AugmentPolicy(), seed=4)
    b = make_patch_batch(imgs, range(100), 10, "proto", 0, AugmentPolicy(), seed=4)
    assert np.array_equal(a, b)


def test_role_separation_over_100_images():
    imgs = random_images(100)
    pol = AugmentPolicy()
    p0 = make_patch_batch(imgs, range(100), 2, "proto", 0, pol, seed=1)
    p5 = make_patch_batch(imgs, range(100), 2, "proto", 5, pol, seed=1)
    assert np.array_equal(p0, p5)
    t0 = make_patch_batch(imgs, range(100), 2, "train", 0, pol, seed=1)
    t5 = make_patch_batch(imgs, range(100), 2, "train", 5, pol, seed=1)
    differs = [not np.array_equal(t0[i], t5[i]) for i in range(100)]
    assert all(differs)


def test_patch_independent_of_batch_composition():
    imgs = random_images(6)
    pol = AugmentPolicy()
    full = make_patch_batch(imgs, range(6), 3, "train", 2, pol, seed=0)
    part = make_patch_batch(imgs[3:5], [3, 4], 3, "train", 2, pol, seed=0)
    assert np.array_equal(full[3:5], part)


def test_make_patches_on_sample():
    s = ImageSample(9, random_images(1)[0])
    out = make_patches(s, 10, "proto", 0, AugmentPolicy(), seed=0)
    assert len(out) == 10 and out[0].shape == (8, 8, 3)
    assert all(np.array_equal(a, b) for a, b in zip(out, make_patches(s, 10, "proto", 0, AugmentPolicy(), 0)))


def test_errors():
    imgs = random_images(2)
    with pytest.raises(ValueError):
        make_patch_batch(imgs, range(2), 0, "train", 0, AugmentPolicy(), 0)
    with pytest.raises(ValueError):
        make_patch_batch(imgs, range(2), 1, "bogus", 0, AugmentPolicy(), 0)
    with pytest.raises(DataError):
        make_patch_batch(np.zeros((1, 2, 2, 3)), [0], 1, "train", 0, AugmentPolicy(crop_scale=(0.1, 1.0)), 0)
    with pytest.raises(ValueError):
        AugmentPolicy(crop_scale=(0.5, 0.2))


@settings(max_examples=40, deadline=None)
@given(low=st.floats(0.1, 1.0), flip=st.floats(0, 1), jit=st.floats(0, 1), gray=st.floats(0, 1),
       seed=st.integers(0, 2**31), size=st.integers(4, 12))
def test_range_preservation(low, flip, jit, gray, seed, size):
    pol = AugmentPolicy(crop_scale=(low, 1.0), flip_prob=flip, jitter_strength=jit, grayscale_prob=gray)
    imgs = random_images(3, size=size, seed=seed % 1000)
    out = make_patch_batch(imgs, range(3), 4, "train", 1, pol, seed)
    assert out.min() >= 0.0 and out.max() <= 1.0
    assert np.all(np.isfinite(out))


def test_policy_dict_roundtrip():
    pol = AugmentPolicy(crop_scale=(0.3, 0.9), output_size=(10, 10))
    assert AugmentPolicy.from_dict(pol.to_dict()) == pol
