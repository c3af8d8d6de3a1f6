import numpy as np
import pytest

from rdasteal.core import ImageSample, SurrogateDataset, derive_rng
from rdasteal.encoders import BlackBoxTarget, RandomFeatureEncoder


def random_images(n, size=8, channels=3, seed=0):
    return derive_rng(seed, ("test_images", n, size)).random((n, size, size, channels))


def make_dataset(n, size=8, seed=0, labels=None, key_offset=0):
    imgs = random_images(n, size, seed=seed)
    labels = labels if labels is not None else np.arange(n) % 3
    return SurrogateDataset([ImageSample(key_offset + i, imgs[i], int(labels[i])) for i in range(n)])


@pytest.fixture
def rf_target():
    return BlackBoxTarget(RandomFeatureEncoder(seed=1, input_shape=(8, 8, 3), dim=16))


@pytest.fixture
def small_dataset():
    return make_dataset(24)


# acceptance verdict lines, printed once at the end of the session
ACCEPTANCE_LINES: list[str] = []


def record_verdict(criterion: str, passed: bool, detail: str) -> str:
    """Queue the summary line for one criterion; returns ``detail`` for the assertion message."""
    ACCEPTANCE_LINES.append(f"[{criterion}] {'PASS' if passed else 'FAIL'} :: {detail}")
    return detail


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s[1:s.index("]")])):
            terminalreporter.write_line(line)
