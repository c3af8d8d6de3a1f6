"""KNN selection metric, linear probing and SA/TA bookkeeping."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch

from .core import DataError, NumericAbort, derive_seed


@dataclass
class DownstreamTask:
    name: str
    train_images: np.ndarray
    train_labels: np.ndarray
    test_images: np.ndarray
    test_labels: np.ndarray
    num_classes: int
    train_keys: np.ndarray | None = None
    test_keys: np.ndarray | None = None

    def __post_init__(self):
        self.train_labels = np.asarray(self.train_labels, dtype=np.int64)
        self.test_labels = np.asarray(self.test_labels, dtype=np.int64)
        if len(self.train_labels) == 0 or len(self.test_labels) == 0:
            raise DataError(f"task {self.name!r} has an empty split")
        for lab in (self.train_labels, self.test_labels):
            if lab.min() < 0 or lab.max() >= self.num_classes:
                raise DataError(f"task {self.name!r}: labels outside [0, {self.num_classes})")
        if self.train_keys is None:
            self.train_keys = np.arange(len(self.train_labels))
        if self.test_keys is None:
            self.test_keys = np.arange(len(self.test_labels)) + len(self.train_labels)
        if set(np.asarray(self.train_keys).tolist()) & set(np.asarray(self.test_keys).tolist()):
            raise DataError(f"task {self.name!r}: train and test splits share keys")


def embed(encoder, images, batch_size: int = 1024) -> np.ndarray:
    images = np.asarray(images)
    out = [np.asarray(encoder.encode(images[i:i + batch_size]), dtype=np.float64)
           for i in range(0, len(images), batch_size)]
    return np.concatenate(out)


def default_k(n_train: int) -> int:
    return max(1, min(200, n_train // 10))


def knn_from_embeddings(train_emb, train_labels, test_emb, num_classes, k, temperature=0.1,
                        train_keys=None, eps=1e-8) -> np.ndarray:
    """Weighted-KNN predictions; neighbours tie-break by lower train key."""
    train_emb = np.asarray(train_emb, dtype=np.float64)
    train_labels = np.asarray(train_labels)
    if train_keys is not None:
        order = np.argsort(np.asarray(train_keys), kind="stable")
        train_emb, train_labels = train_emb[order], train_labels[order]
    if not 1 <= k <= len(train_emb):
        raise ValueError(f"k must lie in [1, {len(train_emb)}], got {k}")
    a = train_emb / np.maximum(np.linalg.norm(train_emb, axis=1, keepdims=True), eps)
    b = np.asarray(test_emb, dtype=np.float64)
    b = b / np.maximum(np.linalg.norm(b, axis=1, keepdims=True), eps)
    sims = b @ a.T
    nn_idx = np.argsort(-sims, axis=1, kind="stable")[:, :k]
    nn_sim = np.take_along_axis(sims, nn_idx, axis=1)
    votes = np.zeros((len(b), num_classes))
    np.add.at(votes, (np.arange(len(b))[:, None], train_labels[nn_idx]), np.exp(nn_sim / temperature))
    return votes.argmax(axis=1)


def knn_accuracy(encoder, task: DownstreamTask, k: int | None = None, knn_temperature: float = 0.1) -> float:
    k = default_k(len(task.train_labels)) if k is None else k
    if k > len(task.train_labels):
        raise ValueError("k exceeds the train split size")
    pred = knn_from_embeddings(embed(encoder, task.train_images), task.train_labels,
                               embed(encoder, task.test_images), task.num_classes, k,
                               knn_temperature, task.train_keys)
    return float(np.mean(pred == task.test_labels))


def probe_from_embeddings(train_emb, train_labels, test_emb, test_labels, num_classes,
                          epochs: int = 100, lr: float = 1e-4, batch_size: int = 64, seed: int = 0,
                          context: str = "", standardize: bool = True) -> float:
    """Train one linear layer with softmax cross-entropy; return test accuracy.

    With ``standardize`` the features are z-scored with train-split statistics first
    (an affine map, so the classifier family is still linear in the embedding).
    """
    dtype = torch.float64
    train_emb = np.asarray(train_emb, dtype=np.float64)
    test_emb = np.asarray(test_emb, dtype=np.float64)
    if not (np.all(np.isfinite(train_emb)) and np.all(np.isfinite(test_emb))):
        raise NumericAbort(f"non-finite embeddings fed to the linear probe {context}".rstrip())
    if standardize:
        mu, sd = train_emb.mean(0), train_emb.std(0)
        sd = np.where(sd > 1e-12, sd, 1.0)
        train_emb, test_emb = (train_emb - mu) / sd, (test_emb - mu) / sd
    xtr = torch.as_tensor(train_emb, dtype=dtype)
    ytr = torch.as_tensor(np.asarray(train_labels), dtype=torch.long)
    xte = torch.as_tensor(test_emb, dtype=dtype)
    gen = torch.Generator().manual_seed(derive_seed(seed, ("probe",)))
    layer = torch.nn.Linear(xtr.shape[1], num_classes).to(dtype)
    with torch.no_grad():
        bound = 1.0 / np.sqrt(xtr.shape[1])
        layer.weight.uniform_(-bound, bound, generator=gen)
        layer.bias.uniform_(-bound, bound, generator=gen)
    opt = torch.optim.Adam(layer.parameters(), lr=lr)
    n = len(xtr)
    for epoch in range(epochs):
        perm = torch.randperm(n, generator=gen)
        for i in range(0, n, batch_size):
            idx = perm[i:i + batch_size]
            loss = torch.nn.functional.cross_entropy(layer(xtr[idx]), ytr[idx])
            if not torch.isfinite(loss):
                raise NumericAbort(f"linear probe diverged at epoch {epoch} {context}".rstrip())
            opt.zero_grad()
            loss.backward()
            opt.step()
    with torch.no_grad():
        pred = layer(xte).argmax(1).numpy()
    return float(np.mean(pred == np.asarray(test_labels)))


def linear_probe(encoder, task: DownstreamTask, epochs: int = 100, lr: float = 1e-4,
                 batch_size: int = 64, seed: int = 0, standardize: bool = True) -> float:
    """Test accuracy of a linear classifier on frozen ``encoder`` embeddings."""
    return probe_from_embeddings(embed(encoder, task.train_images), task.train_labels,
                                 embed(encoder, task.test_images), task.test_labels, task.num_classes,
                                 epochs, lr, batch_size, seed, context=f"on task {task.name}",
                                 standardize=standardize)


def sa_ta_ratio(sa: float, ta: float) -> float:
    if ta <= 0:
        raise ValueError("TA must be positive")
    return 100.0 * sa / ta


@dataclass
class ProbeSettings:
    epochs: int = 100
    lr: float = 1e-4
    batch_size: int = 64
    seed: int = 0
    standardize: bool = True

    def run(self, encoder, task: DownstreamTask) -> float:
        return linear_probe(encoder, task, self.epochs, self.lr, self.batch_size, self.seed, self.standardize)


def evaluate_tasks(encoder, tasks, probe: ProbeSettings | None = None) -> dict:
    probe = probe or ProbeSettings()
    return {t.name: probe.run(encoder, t) for t in tasks}
