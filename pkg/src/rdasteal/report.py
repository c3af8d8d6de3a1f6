"""Report emission: JSON/CSV tables of steal runs, defense sweeps, and matplotlib figures."""
from __future__ import annotations

import csv
import json
import os
from dataclasses import asdict, dataclass, field

import numpy as np

from .attacks import StealReport
from .defenses import DefenseTransform
from .encoders import BlackBoxTarget
from .evaluation import ProbeSettings, sa_ta_ratio

CSV_FIELDS = ("attack", "downstream", "sa", "ta", "ratio", "queries", "epochs", "seed")
FORMATS = ("json", "csv", "plots")


@dataclass
class DefenseSweep:
    """TA (and optionally SA) of one downstream task as one defense parameter varies."""

    kind: str
    values: list
    ta: list
    sa: list = field(default_factory=list)
    task: str = ""

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "DefenseSweep":
        return cls(**d)


def defense_sweep(inner, kind: str, values, task, probe: ProbeSettings | None = None,
                  attack=None, noise_seed: int = 0, **defense_kw) -> DefenseSweep:
    """Probe the defended target at each parameter value.

    ``attack(target) -> surrogate`` optionally steals from each defended target so
    SA is recorded alongside TA.
    """
    probe = probe or ProbeSettings()
    sweep = DefenseSweep(kind, [float(v) for v in values], [], [], task.name)
    for v in values:
        target = BlackBoxTarget(inner, [DefenseTransform(kind, v, **defense_kw)], noise_seed=noise_seed)
        sweep.ta.append(100 * probe.run(target, task))
        if attack is not None:
            sweep.sa.append(100 * probe.run(attack(target), task))
    return sweep


def csv_rows(reports) -> list[dict]:
    rows = []
    for r in reports:
        for task, vals in r.final.items():
            rows.append({"attack": r.method, "downstream": task, "sa": vals["sa"], "ta": vals["ta"],
                         "ratio": vals["ratio"], "queries": r.attack_queries,
                         "epochs": r.config.get("epochs"), "seed": r.config.get("seed")})
    return rows


def read_csv(path) -> list[dict]:
    conv = {"sa": float, "ta": float, "ratio": lambda s: float(s) if s else None,
            "queries": int, "epochs": int, "seed": int}
    with open(path, newline="") as f:
        return [{k: conv.get(k, str)(v) for k, v in row.items()} for row in csv.DictReader(f)]


def export_embeddings_csv(encoder, images, path, labels=None, keys=None) -> None:
    """One row per image (key, label, e0..e{d-1}) for external t-SNE/UMAP tools."""
    emb = np.asarray(encoder.encode(np.asarray(images)), dtype=np.float64)
    keys = np.arange(len(emb)) if keys is None else np.asarray(keys)
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["key", "label"] + [f"e{i}" for i in range(emb.shape[1])])
        for i, row in enumerate(emb):
            w.writerow([int(keys[i]), "" if labels is None else int(labels[i])] + [repr(float(x)) for x in row])


def _pyplot():
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt
    return plt


def _label(r: StealReport) -> str:
    variant = r.config.get("loss_variant", "")
    tag = r.method if r.method != "rda" or variant in ("", "RDA") else f"rda/{variant}"
    return f"{tag} s{r.config.get('seed')}"


def plot_loss_curves(reports, path) -> None:
    plt = _pyplot()
    fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(10, 3.8))
    for r in reports:
        ep = [rec.epoch for rec in r.records]
        ax1.plot(ep, r.loss_series, label=_label(r), lw=1.2)
        metric = [rec.metric for rec in r.records]
        if any(m is not None for m in metric):
            ax2.plot(ep, [np.nan if m is None else m for m in metric], label=_label(r), lw=1.2)
    ax1.set_xlabel("epoch")
    ax1.set_ylabel("training loss")
    ax2.set_xlabel("epoch")
    ax2.set_ylabel("selection KNN accuracy")
    ax1.legend(fontsize=7, frameon=False)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def plot_sa_vs_queries(reports, path, task: str | None = None) -> None:
    """Bars of SA on one task per run, annotated with the run's query count."""
    plt = _pyplot()
    task = task or next(iter(reports[0].final), None)
    labels, sa, q = [], [], []
    for r in reports:
        if task in r.final:
            labels.append(_label(r))
            sa.append(r.final[task]["sa"])
            q.append(r.attack_queries)
    fig, ax = plt.subplots(figsize=(max(4, 1.2 * len(labels)), 3.8))
    bars = ax.bar(range(len(sa)), sa, color="0.45")
    for b, n in zip(bars, q):
        ax.annotate(f"{n:,}q", (b.get_x() + b.get_width() / 2, b.get_height()), ha="center",
                    va="bottom", fontsize=7)
    ax.set_xticks(range(len(sa)))
    ax.set_xticklabels(labels, rotation=30, ha="right", fontsize=7)
    ax.set_ylabel(f"SA on {task} (%)")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def plot_sweep(sweep: DefenseSweep, path) -> None:
    plt = _pyplot()
    fig, ax = plt.subplots(figsize=(4.5, 3.5))
    ax.plot(sweep.values, sweep.ta, "o-", label="TA")
    if sweep.sa:
        ax.plot(sweep.values, sweep.sa, "s--", label="SA")
    ax.set_xlabel({"noise": "sigma", "topk": "k", "round": "precision"}.get(sweep.kind, "value"))
    ax.set_ylabel(f"accuracy on {sweep.task} (%)")
    ax.set_title(f"{sweep.kind} defense", fontsize=9)
    ax.legend(frameon=False)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def emit_report(reports, format: str, out_dir, sweeps=()) -> list[str]:
    """Write ``reports`` (and optional defense sweeps) in one format; returns written paths."""
    reports = list(reports)
    if not reports and not sweeps:
        raise ValueError("nothing to report")
    if format not in FORMATS:
        raise ValueError(f"format must be one of {FORMATS}")
    os.makedirs(out_dir, exist_ok=True)
    written = []
    if format == "json":
        path = os.path.join(out_dir, "reports.json")
        with open(path, "w") as f:
            json.dump({"reports": [r.to_dict() for r in reports],
                       "sweeps": [s.to_dict() for s in sweeps]}, f, indent=1, sort_keys=True)
        written.append(path)
    elif format == "csv":
        path = os.path.join(out_dir, "reports.csv")
        with open(path, "w", newline="") as f:
            w = csv.DictWriter(f, fieldnames=CSV_FIELDS)
            w.writeheader()
            for row in csv_rows(reports):
                w.writerow({k: ("" if v is None else v) for k, v in row.items()})
        written.append(path)
    else:
        if reports:
            p = os.path.join(out_dir, "loss_curves.png")
            plot_loss_curves(reports, p)
            written.append(p)
            if any(r.final for r in reports):
                p = os.path.join(out_dir, "sa_vs_queries.png")
                plot_sa_vs_queries(reports, p)
                written.append(p)
        by_kind: dict = {}
        for s in sweeps:
            by_kind.setdefault(s.kind, s)
        for kind, s in by_kind.items():
            p = os.path.join(out_dir, f"sweep_{kind}.png")
            plot_sweep(s, p)
            written.append(p)
    return written


def load_reports_json(path):
    with open(path) as f:
        raw = json.load(f)
    return ([StealReport.from_dict(r) for r in raw["reports"]],
            [DefenseSweep.from_dict(s) for s in raw.get("sweeps", [])])


def summary_rows(reports) -> list[str]:
    """Delimited one-line-per-row text for terminals (same columns as the CSV)."""
    lines = ["\t".join(CSV_FIELDS)]
    for row in csv_rows(reports):
        lines.append("\t".join("" if row[k] is None else (f"{row[k]:.2f}" if isinstance(row[k], float) else str(row[k]))
                               for k in CSV_FIELDS))
    return lines


__all__ = ["CSV_FIELDS", "DefenseSweep", "csv_rows", "defense_sweep", "emit_report", "export_embeddings_csv",
           "load_reports_json", "read_csv", "sa_ta_ratio", "summary_rows"]
