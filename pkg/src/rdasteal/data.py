"""Procedural desk-scale image corpus.

Three renderings share one generator:

* ``shapes``: ten parametric glyph classes on flat backgrounds (the
  pre-training distribution and the in-distribution downstream task);
* ``shapes_shifted``: the same classes, smaller, on striped noisy backgrounds
  with inverted contrast (a shifted task);
* ``dots``: count of 1-5 blobs (a task unrelated to glyph identity).

The attacker's surrogate split mixes the two glyph renderings
(``DeskSetup.surrogate_shift``), so it is related to the pre-training data
without being drawn from it.
"""
from __future__ import annotations

import numpy as np

from .config import DeskSetup
from .core import ImageSample, SurrogateDataset, derive_rng
from .evaluation import DownstreamTask

N_SHAPES = 10
N_DOTS = 5
_KEY_STRIDE = 1_000_000


def _shape_mask(cls, u, v):
    a, b = np.abs(u), np.abs(v)
    box = np.maximum(a, b) < 0.8
    if cls == 0:
        return np.maximum(a, b) < 0.65
    if cls == 1:
        return u ** 2 + v ** 2 < 0.75 ** 2
    if cls == 2:
        return (v < 0.6) & (a < (v + 0.75) * 0.55)
    if cls == 3:
        return ((a < 0.22) & (b < 0.8)) | ((b < 0.22) & (a < 0.8))
    if cls == 4:
        return box & (np.floor((v + 0.8) / 0.32) % 2 == 0)
    if cls == 5:
        return box & (np.floor((u + 0.8) / 0.32) % 2 == 0)
    if cls == 6:
        r = np.sqrt(u ** 2 + v ** 2)
        return (r > 0.42) & (r < 0.8)
    if cls == 7:
        return box & ((np.abs(u - v) < 0.3) | (np.abs(u + v) < 0.3))
    if cls == 8:
        return box & ((np.floor((u + 0.8) / 0.4) + np.floor((v + 0.8) / 0.4)) % 2 == 0)
    return ((u > -0.8) & (u < -0.3) & (b < 0.8)) | ((v > 0.3) & (v < 0.8) & (a < 0.8))


def _grid(size):
    c = (np.arange(size) + 0.5) / size * 2 - 1
    return np.meshgrid(c, c, indexing="xy")


def render_shapes(n: int, rng: np.random.Generator, size: int = 16, shifted: bool = False):
    xx, yy = _grid(size)
    images = np.empty((n, size, size, 3))
    labels = rng.integers(0, N_SHAPES, size=n)
    for i in range(n):
        cx, cy = rng.uniform(-0.25, 0.25, 2)
        scale = rng.uniform(0.45, 0.65) if shifted else rng.uniform(0.6, 0.9)
        th = rng.uniform(-0.35, 0.35)
        dx, dy = xx - cx, yy - cy
        u = (dx * np.cos(th) + dy * np.sin(th)) / scale
        v = (-dx * np.sin(th) + dy * np.cos(th)) / scale
        mask = _shape_mask(labels[i], u, v)[:, :, None]
        dark, light = rng.uniform(0.0, 0.4, 3), rng.uniform(0.6, 1.0, 3)
        if shifted:
            freq, phase = rng.uniform(2, 6), rng.uniform(0, 2 * np.pi)
            stripes = 0.15 * np.sin(freq * (xx + yy) + phase)[:, :, None]
            bg = np.clip(light + stripes, 0, 1)
            img = np.where(mask, dark, bg) + rng.normal(0, 0.08, (size, size, 3))
        else:
            fg, bg = (light, dark) if rng.random() < 0.7 else (dark, light)
            img = np.where(mask, fg, bg) + rng.normal(0, 0.04, (size, size, 3))
        images[i] = np.clip(img, 0, 1)
    return images, labels


def render_dots(n: int, rng: np.random.Generator, size: int = 16):
    xx, yy = _grid(size)
    images = np.empty((n, size, size, 3))
    labels = rng.integers(0, N_DOTS, size=n)
    for i in range(n):
        bg = rng.uniform(0.0, 1.0, 3)
        img = np.broadcast_to(bg, (size, size, 3)).copy()
        centers = []
        while len(centers) < labels[i] + 1:
            c = rng.uniform(-0.75, 0.75, 2)
            if all(np.hypot(*(c - o)) > 0.4 for o in centers):
                centers.append(c)
        col = np.where(bg.mean() > 0.5, rng.uniform(0.0, 0.25, 3), rng.uniform(0.75, 1.0, 3))
        for cx, cy in centers:
            img[(xx - cx) ** 2 + (yy - cy) ** 2 < rng.uniform(0.12, 0.2) ** 2] = col
        images[i] = np.clip(img + rng.normal(0, 0.04, (size, size, 3)), 0, 1)
    return images, labels


_RENDER = {
    "shapes": lambda n, rng, s: render_shapes(n, rng, s),
    "shapes_shifted": lambda n, rng, s: render_shapes(n, rng, s, shifted=True),
    "dots": render_dots,
}
_CLASSES = {"shapes": N_SHAPES, "shapes_shifted": N_SHAPES, "dots": N_DOTS}
_SPLIT_IDS = {"pretrain": 1, "surrogate": 2, "select": 3, "probe:shapes": 4,
              "probe:shapes_shifted": 5, "probe:dots": 6, "holdout": 7}


def _render(setup: DeskSetup, split: str, style: str, n: int):
    rng = derive_rng(setup.data_seed, ("desk", split, style))
    return _RENDER[style](n, rng, setup.image_size)


def _keys(split: str, n: int, offset: int = 0):
    return np.arange(n, dtype=np.int64) + _SPLIT_IDS[split] * _KEY_STRIDE + offset


def pretrain_images(setup: DeskSetup) -> np.ndarray:
    return _render(setup, "pretrain", "shapes", setup.pretrain_size)[0]


def holdout_images(setup: DeskSetup, n: int = 500) -> np.ndarray:
    """Defender-side images disjoint from every other split (watermark probes)."""
    return _render(setup, "holdout", "shapes", n)[0]


def surrogate_dataset(setup: DeskSetup, size: int | None = None) -> SurrogateDataset:
    n = setup.surrogate_size if size is None else size
    n_shift = int(round(n * setup.surrogate_shift))
    plain, plain_y = _render(setup, "surrogate", "shapes", n - n_shift)
    shifted, shifted_y = _render(setup, "surrogate", "shapes_shifted", n_shift)
    order = derive_rng(setup.data_seed, ("desk", "surrogate", "order", n)).permutation(n)
    images = np.concatenate([plain, shifted])[order]
    labels = np.concatenate([plain_y, shifted_y])[order]
    keys = _keys("surrogate", n)
    return SurrogateDataset([ImageSample(k, x, y) for k, x, y in zip(keys, images, labels)],
                            name=f"desk-surrogate-{setup.data_seed}")


def _task(setup, split, style, n_train, n_test, name):
    tr_x, tr_y = _render(setup, split + ":train", style, n_train)
    te_x, te_y = _render(setup, split + ":test", style, n_test)
    return DownstreamTask(name, tr_x, tr_y, te_x, te_y, _CLASSES[style],
                          train_keys=_keys(split, n_train), test_keys=_keys(split, n_test, _KEY_STRIDE // 2))


def selection_task(setup: DeskSetup) -> DownstreamTask:
    """Held-out labeled split for per-epoch KNN model selection."""
    return _task(setup, "select", "shapes", setup.select_train, setup.select_test, "select")


def probe_tasks(setup: DeskSetup, names=("shapes", "shapes_shifted", "dots")) -> list[DownstreamTask]:
    return [_task(setup, f"probe:{nm}", nm, setup.probe_train, setup.probe_test, nm) for nm in names]
