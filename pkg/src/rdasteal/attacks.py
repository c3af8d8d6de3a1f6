"""Encoder-stealing engines: prototype-guided RDA and the conventional, StolenEncoder
and Cont-Steal baselines, all sharing one checkpoint-selecting training loop."""
from __future__ import annotations

import json
import logging
import time
import warnings
from dataclasses import asdict, dataclass, field

import numpy as np
import torch
import torch.nn.functional as F

from .augment import make_patch_batch
from .config import AttackConfig
from .core import ConfigError, NumericAbort, PHASES, SurrogateDataset, derive_rng
from .encoders import TrainableEncoder, default_architecture, gradient_step, to_tensor
from .evaluation import DownstreamTask, ProbeSettings, knn_accuracy, sa_ta_ratio
from .losses import LossBatch, contsteal_loss, loss_terms
from .prototypes import PrototypeBank, build_bank

log = logging.getLogger(__name__)

METHODS = ("rda", "conventional", "stolenencoder", "contsteal")
REPORT_VERSION = 1
# narrower than the target's 16/32/64/64: the attacker does not know the architecture
SURROGATE_CHANNELS = (8, 16, 32, 32)


def make_surrogate(config: AttackConfig, input_shape, dim: int, channels=SURROGATE_CHANNELS) -> TrainableEncoder:
    """Fresh surrogate whose initialization and precision follow ``config``."""
    arch = default_architecture(channels=channels, dim=dim, input_shape=input_shape)
    return TrainableEncoder(arch, seed=config.seed, dtype=config.precision)


@dataclass
class EpochRecord:
    epoch: int
    loss: float
    metric: float | None
    wall_time: float


@dataclass
class StealReport:
    method: str
    config: dict
    records: list = field(default_factory=list)
    ledger: dict = field(default_factory=dict)
    expected_queries: int = 0
    initial_metric: float | None = None
    best_epoch: int = 0
    final: dict = field(default_factory=dict)  # task -> {"sa", "ta", "ratio"}
    notes: list = field(default_factory=list)
    version: int = REPORT_VERSION

    @property
    def attack_queries(self) -> int:
        return sum(v for k, v in self.ledger.items() if k in PHASES and k != "evaluation_probe")

    @property
    def loss_series(self) -> list[float]:
        return [r.loss for r in self.records]

    def best_metric(self) -> float | None:
        if self.best_epoch == 0:
            return self.initial_metric
        return self.records[self.best_epoch - 1].metric

    def to_dict(self) -> dict:
        d = asdict(self)
        d["records"] = [asdict(r) for r in self.records]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "StealReport":
        d = dict(d)
        if d.get("version") != REPORT_VERSION:
            raise ValueError(f"unsupported report version {d.get('version')}")
        d["records"] = [EpochRecord(**r) for r in d.get("records", [])]
        return cls(**d)

    def save(self, path) -> None:
        with open(path, "w") as f:
            json.dump(self.to_dict(), f, indent=1, sort_keys=True)

    @classmethod
    def load(cls, path) -> "StealReport":
        with open(path) as f:
            return cls.from_dict(json.load(f))


def expected_query_cost(method: str, N: int, config: AttackConfig, bank_supplied: bool = False) -> int:
    """Closed-form target queries: conventional/StolenEncoder N, Cont-Steal N*L, RDA N*n."""
    if method == "rda":
        return 0 if bank_supplied else N * config.n_proto_patches
    if method in ("conventional", "stolenencoder"):
        return N
    if method == "contsteal":
        return N * config.epochs
    raise ConfigError(f"unknown method {method!r}")


def minibatches(perm: np.ndarray, batch_size: int) -> list[np.ndarray]:
    """Consecutive slices; a singleton tail joins the previous batch."""
    out = [perm[i:i + batch_size] for i in range(0, len(perm), batch_size)]
    if len(out) > 1 and len(out[-1]) == 1:
        tail = out.pop()
        out[-1] = np.concatenate([out[-1], tail])
    return out


def _query_chunks(target, images, phase, chunk=500) -> np.ndarray:
    return np.concatenate([target.query(images[i:i + chunk], phase) for i in range(0, len(images), chunk)])


def _fit(method, config: AttackConfig, dataset: SurrogateDataset, surrogate: TrainableEncoder,
         batch_loss, selection_task: DownstreamTask | None, target, ledger_start, progress=None):
    report = StealReport(method=method, config=config.to_dict())
    if len(dataset) < 2:
        raise ConfigError("stealing needs at least two surrogate samples")
    metric = knn_accuracy(surrogate, selection_task) if selection_task is not None else None
    report.initial_metric = metric
    best_metric, best_theta = metric, surrogate.flat_parameters()
    state = None
    for epoch in range(1, config.epochs + 1):
        t0 = time.perf_counter()
        perm = derive_rng(config.seed, ("shuffle", epoch)).permutation(len(dataset))
        losses = []
        for b, idx in enumerate(minibatches(perm, config.batch_size)):
            surrogate.zero_grad()
            try:
                total, terms = batch_loss(epoch, idx)
            except NumericAbort as exc:
                raise NumericAbort(f"epoch {epoch} batch {b}: {exc}") from exc
            if not torch.isfinite(total):
                raise NumericAbort(f"non-finite loss at epoch {epoch} batch {b}: {terms}")
            total.backward()
            try:
                _, state = gradient_step(surrogate, surrogate.flat_gradient(), config.learning_rate, state, terms)
            except NumericAbort as exc:
                raise NumericAbort(f"epoch {epoch} batch {b}: {exc}") from exc
            losses.append(total.item())
        metric = knn_accuracy(surrogate, selection_task) if selection_task is not None else None
        rec = EpochRecord(epoch, float(np.mean(losses)), metric, time.perf_counter() - t0)
        report.records.append(rec)
        if metric is None or best_metric is None or metric > best_metric:
            best_metric, best_theta = metric, surrogate.flat_parameters()
            report.best_epoch = epoch
        if progress:
            progress(rec, target.ledger.total - ledger_start)
    surrogate.load_flat_parameters(best_theta)
    return surrogate, report


def _finish(report, method, N, config, target, ledger_start, bank_supplied=False):
    now = target.ledger.snapshot()
    report.ledger = {k: now[k] - ledger_start.get(k, 0) for k in now}
    report.expected_queries = expected_query_cost(method, N, config, bank_supplied)
    if report.attack_queries != report.expected_queries:
        log.warning("%s: ledger shows %d attack queries, closed form says %d (shared target?)",
                    method, report.attack_queries, report.expected_queries)
    return report


def _images(dataset, surrogate):
    return dataset.stack(), np.asarray(dataset.keys, dtype=np.int64)


def _forward(surrogate, arr):
    return surrogate(to_tensor(arr, surrogate.torch_dtype))


def steal_rda(config: AttackConfig, dataset: SurrogateDataset, target, surrogate: TrainableEncoder,
              bank: PrototypeBank | None = None, selection_task: DownstreamTask | None = None,
              allow_fingerprint_mismatch: bool = False, progress=None):
    """Prototype bank (N*n queries) then query-free training on the chosen loss variant."""
    start = target.ledger.snapshot()
    notes = []
    if bank is None:
        bank = build_bank(dataset, config.n_proto_patches, target, config.augment, config.seed)
        supplied = False
    else:
        supplied = True
        issues = bank.check_against(target, dataset)
        key_issue = [i for i in issues if "keys" in i]
        if key_issue:
            raise ConfigError(key_issue[0])
        if issues:
            if not allow_fingerprint_mismatch:
                raise ConfigError(issues[0] + " (pass allow_fingerprint_mismatch to override)")
            warnings.warn(issues[0])
            notes.append(issues[0])
    images, keys = _images(dataset, surrogate)
    m = config.m_train_patches
    protos = torch.as_tensor(bank.lookup(keys), dtype=surrogate.torch_dtype)

    def batch_loss(epoch, idx):
        patches = make_patch_batch(images[idx], keys[idx], m, "train", epoch, config.augment, config.seed)
        B = len(idx)
        S = _forward(surrogate, patches.reshape(B * m, *patches.shape[2:])).reshape(B, m, -1)
        return loss_terms(config.loss_variant, LossBatch(S, protos[idx], keys[idx].tolist()), config)

    surrogate, report = _fit("rda", config, dataset, surrogate, batch_loss, selection_task, target,
                             start["total"], progress)
    report.notes.extend(notes)
    return surrogate, _finish(report, "rda", len(dataset), config, target, start, supplied)


def _stored_objectives(dataset, target, images):
    # one query per original image, kept for the whole run
    return _query_chunks(target, images, "prototype_generation")


def steal_conventional(config: AttackConfig, dataset: SurrogateDataset, target, surrogate: TrainableEncoder,
                       selection_task: DownstreamTask | None = None, progress=None):
    start = target.ledger.snapshot()
    images, keys = _images(dataset, surrogate)
    objectives = torch.as_tensor(_stored_objectives(dataset, target, images), dtype=surrogate.torch_dtype)

    def batch_loss(epoch, idx):
        loss = F.mse_loss(_forward(surrogate, images[idx]), objectives[idx])
        return loss, {"mse": loss.item()}

    surrogate, report = _fit("conventional", config, dataset, surrogate, batch_loss, selection_task, target,
                             start["total"], progress)
    return surrogate, _finish(report, "conventional", len(dataset), config, target, start)


def steal_stolenencoder(config: AttackConfig, dataset: SurrogateDataset, target, surrogate: TrainableEncoder,
                        selection_task: DownstreamTask | None = None, progress=None):
    start = target.ledger.snapshot()
    images, keys = _images(dataset, surrogate)
    objectives = torch.as_tensor(_stored_objectives(dataset, target, images), dtype=surrogate.torch_dtype)

    def batch_loss(epoch, idx):
        aug = make_patch_batch(images[idx], keys[idx], 1, "train", epoch, config.augment, config.seed)[:, 0]
        B = len(idx)
        out = _forward(surrogate, np.concatenate([images[idx], aug]))
        clean, augmented = out[:B], out[B:]
        l_clean = F.mse_loss(clean, objectives[idx])
        l_aug = F.mse_loss(augmented, objectives[idx])
        return l_clean + l_aug, {"mse_original": l_clean.item(), "mse_augmented": l_aug.item()}

    surrogate, report = _fit("stolenencoder", config, dataset, surrogate, batch_loss, selection_task, target,
                             start["total"], progress)
    return surrogate, _finish(report, "stolenencoder", len(dataset), config, target, start)


def steal_contsteal(config: AttackConfig, dataset: SurrogateDataset, target, surrogate: TrainableEncoder,
                    selection_task: DownstreamTask | None = None, progress=None):
    """End-to-end: every epoch one view per sample queries the target, another feeds the surrogate."""
    start = target.ledger.snapshot()
    images, keys = _images(dataset, surrogate)

    def batch_loss(epoch, idx):
        t_view = make_patch_batch(images[idx], keys[idx], 1, "query", epoch, config.augment, config.seed)[:, 0]
        s_view = make_patch_batch(images[idx], keys[idx], 1, "train", epoch, config.augment, config.seed)[:, 0]
        t_emb = torch.as_tensor(target.query(t_view, "training"), dtype=surrogate.torch_dtype)
        loss = contsteal_loss(_forward(surrogate, s_view), t_emb, config.tau, config.epsilon_floor)
        return loss, {"contrastive": loss.item()}

    surrogate, report = _fit("contsteal", config, dataset, surrogate, batch_loss, selection_task, target,
                             start["total"], progress)
    return surrogate, _finish(report, "contsteal", len(dataset), config, target, start)


ENGINES = {
    "rda": steal_rda,
    "conventional": steal_conventional,
    "stolenencoder": steal_stolenencoder,
    "contsteal": steal_contsteal,
}


def steal(method: str, config, dataset, target, surrogate, selection_task=None, progress=None, **kw):
    if method not in ENGINES:
        raise ConfigError(f"unknown method {method!r}; expected one of {METHODS}")
    return ENGINES[method](config, dataset, target, surrogate, selection_task=selection_task,
                           progress=progress, **kw)


def finalize_report(report: StealReport, surrogate, target, tasks, probe: ProbeSettings | None = None,
                    ta_cache: dict | None = None) -> StealReport:
    """Fill SA/TA/ratio per downstream task (TA queries land in the probe phase)."""
    probe = probe or ProbeSettings()
    for task in tasks:
        if ta_cache is not None and task.name in ta_cache:
            ta = ta_cache[task.name]
        else:
            ta = probe.run(target, task)
            if ta_cache is not None:
                ta_cache[task.name] = ta
        sa = probe.run(surrogate, task)
        report.final[task.name] = {"sa": 100 * sa, "ta": 100 * ta, "ratio": sa_ta_ratio(sa, ta) if ta > 0 else None}
    return report


def compare_attacks(runs, dataset, target, surrogate_factory, tasks, selection_task=None,
                    probe: ProbeSettings | None = None):
    """Run each ``(method, config)`` against its own ledger; one table row per run.

    ``surrogate_factory(config)`` returns a fresh surrogate. Raises if a row's
    ledger disagrees with its closed-form query cost.
    """
    rows, reports = [], []
    ta_cache: dict = {}
    for method, config in runs:
        row_target = target.with_ledger()
        surrogate, report = steal(method, config, dataset, row_target, surrogate_factory(config),
                                  selection_task=selection_task)
        if report.attack_queries != report.expected_queries:
            raise AssertionError(f"{method}: {report.attack_queries} queries != closed form {report.expected_queries}")
        finalize_report(report, surrogate, row_target, tasks, probe, ta_cache)
        reports.append(report)
        row = {"attack": method, "loss_variant": config.loss_variant.value, "queries": report.attack_queries,
               "epochs": config.epochs, "seed": config.seed}
        for name, vals in report.final.items():
            row[f"sa:{name}"] = vals["sa"]
            row[f"ratio:{name}"] = vals["ratio"]
        row["mean_sa"] = float(np.mean([v["sa"] for v in report.final.values()])) if report.final else None
        rows.append(row)
    return rows, reports
