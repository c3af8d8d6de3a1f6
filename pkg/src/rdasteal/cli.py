"""Command-line entry point: ``rdasteal <subcommand> ...``.

Every subcommand writes into a fresh ``--out`` directory: content-addressed
artifacts plus ``manifest.json`` (config echo, library versions, seed, input
hashes, ledger) from which ``rdasteal replay`` re-runs a steal exactly.
Exit codes: 2 config error, 3 data error, 4 numeric abort.
"""
from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import platform
import sys

import numpy as np
import torch

from . import __version__, data
from .attacks import METHODS, SURROGATE_CHANNELS, StealReport, finalize_report, make_surrogate, steal
from .config import AttackConfig, DeskSetup, dumps, load_config
from .core import ConfigError, DataError, RDAError
from .defenses import KINDS, DefenseTransform, Watermark, embed_watermark, watermark_rate
from .encoders import BlackBoxTarget, load_checkpoint, save_checkpoint
from .evaluation import ProbeSettings, knn_accuracy
from .losses import LossVariant
from .pretrain import pretrain_simclr
from .prototypes import build_bank, load_bank, save_bank
from .report import (DefenseSweep, defense_sweep, emit_report, export_embeddings_csv, load_reports_json,
                     summary_rows)

log = logging.getLogger("rdasteal")

# AttackConfig field -> flag
CONFIG_FLAGS = {
    "n_proto_patches": ("--n-proto-patches", int),
    "m_train_patches": ("--m-train-patches", int),
    "tau": ("--tau", float),
    "lambda1": ("--lambda1", float),
    "lambda2": ("--lambda2", float),
    "epochs": ("--epochs", int),
    "batch_size": ("--batch-size", int),
    "learning_rate": ("--lr", float),
    "seed": ("--seed", int),
    "loss_variant": ("--loss-variant", str),
    "precision": ("--precision", str),
}


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for block in iter(lambda: f.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


def versions() -> dict:
    return {"rdasteal": __version__, "python": platform.python_version(), "numpy": np.__version__,
            "torch": torch.__version__}


class RunDir:
    """Write-once output directory; artifact names carry a content hash."""

    def __init__(self, path):
        self.path = path
        if os.path.isdir(path) and os.listdir(path):
            raise ConfigError(f"output directory {path} is not empty (runs are write-once)")
        os.makedirs(path, exist_ok=True)
        self.outputs: dict = {}

    def _claim(self, name):
        full = os.path.join(self.path, name)
        if os.path.exists(full):
            raise ConfigError(f"refusing to overwrite {full}")
        return full

    def addressed(self, stem, digest, ext):
        return self._claim(f"{stem}-{digest[:12]}{ext}")

    def file(self, name):
        return self._claim(name)

    def record(self, role, path):
        self.outputs[role] = os.path.basename(path)
        return path

    def write_manifest(self, manifest: dict) -> str:
        manifest = dict(manifest, outputs=self.outputs, versions=versions())
        path = self.file("manifest.json")
        with open(path, "w") as f:
            json.dump(manifest, f, indent=1, sort_keys=True)
        return path


def add_config_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="TOML attack config; flags override its values")
    for field, (flag, typ) in CONFIG_FLAGS.items():
        kw = {"choices": [v.value for v in LossVariant]} if field == "loss_variant" else {}
        if field == "precision":
            kw = {"choices": ["float32", "float64"]}
        p.add_argument(flag, dest=field, type=typ, default=None, **kw)
    p.add_argument("--defense", action="append", default=None, metavar="KIND:PARAM=VALUE",
                   help="output perturbation on the target, repeatable, applied in order")
    p.add_argument("--data-seed", type=int, default=None)


def config_from_args(args) -> AttackConfig:
    cfg = load_config(args.config) if getattr(args, "config", None) else AttackConfig()
    changes = {f: getattr(args, f) for f in CONFIG_FLAGS if getattr(args, f, None) is not None}
    if getattr(args, "defense", None):
        changes["defenses"] = tuple(DefenseTransform.parse(d) for d in args.defense)
    if getattr(args, "data_seed", None) is not None:
        changes["data"] = DeskSetup(**{**cfg.data.__dict__, "data_seed": args.data_seed})
    try:
        return cfg.replace(**changes)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None


def _progress(rec, queries):
    metric = "nan" if rec.metric is None else f"{rec.metric:.4f}"
    print(f"epoch={rec.epoch} loss={rec.loss:.6f} metric={metric} queries={queries}", flush=True)


def _load_target(path, config: AttackConfig | None = None):
    if not os.path.exists(path):
        raise DataError(f"target checkpoint {path} does not exist")
    inner = load_checkpoint(path)
    defenses = config.defenses if config is not None else ()
    return inner, BlackBoxTarget(inner, defenses, noise_seed=config.seed if config else 0)


def _channels(text):
    try:
        return tuple(int(c) for c in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"bad channel list {text!r}") from None


def _probe(args) -> ProbeSettings:
    return ProbeSettings(epochs=args.probe_epochs)


# ---- subcommands -------------------------------------------------------------------------------

def cmd_pretrain_target(args):
    setup = DeskSetup(data_seed=args.data_seed or 0)
    run = RunDir(args.out)
    images = data.pretrain_images(setup)

    def progress(epoch, loss):
        print(f"epoch={epoch} loss={loss:.6f} metric=nan queries=0", flush=True)

    enc = pretrain_simclr(images, epochs=args.pretrain_epochs, seed=args.seed, dtype=args.precision,
                          progress=progress)
    tmp = run.file("target.tmp")
    fp = save_checkpoint(enc, tmp)
    path = run.addressed("target", fp, ".ckpt")
    os.replace(tmp, path)
    run.record("target", path)
    knn = knn_accuracy(enc, data.selection_task(setup))
    print(f"target\t{os.path.basename(path)}\tfingerprint={fp}\tknn={knn:.4f}")
    run.write_manifest({"subcommand": "pretrain-target", "seed": args.seed,
                        "pretrain_epochs": args.pretrain_epochs, "data": setup.__dict__,
                        "precision": args.precision, "fingerprint": fp, "knn": knn})
    return 0


def cmd_build_bank(args):
    cfg = config_from_args(args)
    run = RunDir(args.out)
    _, target = _load_target(args.target, cfg)
    ds = data.surrogate_dataset(cfg.data, args.surrogate_size)
    bank = build_bank(ds, cfg.n_proto_patches, target, cfg.augment, cfg.seed, workers=args.workers)
    path = run.record("bank", run.addressed("bank", bank.encoder_fingerprint, ".rdab"))
    save_bank(bank, path)
    ledger = target.ledger.snapshot()
    print(f"bank\t{os.path.basename(path)}\tentries={len(bank)}\tqueries={ledger['prototype_generation']}")
    run.write_manifest({"subcommand": "build-bank", "seed": cfg.seed, "config": cfg.to_dict(),
                        "inputs": {"target": _input(args.target)}, "surrogate_size": len(ds), "ledger": ledger})
    return 0


def _input(path):
    return {"path": os.path.abspath(path), "sha256": sha256_file(path)}


def _run_steal(method, cfg, target_path, bank_path, surrogate_size, channels, allow_mismatch, verbose=True):
    inner, target = _load_target(target_path, cfg)
    ds = data.surrogate_dataset(cfg.data, surrogate_size)
    bank = load_bank(bank_path) if bank_path else None
    if bank is not None and method != "rda":
        raise ConfigError("--bank only applies to --method rda")
    kw = {"bank": bank, "allow_fingerprint_mismatch": allow_mismatch} if method == "rda" else {}
    surrogate = make_surrogate(cfg, inner.input_shape, inner.dim, channels)
    surrogate, report = steal(method, cfg, ds, target, surrogate, selection_task=data.selection_task(cfg.data),
                              progress=_progress if verbose else None, **kw)
    return inner, target, ds, surrogate, report


def cmd_steal(args):
    cfg = config_from_args(args)
    run = RunDir(args.out)
    inner, target, ds, surrogate, report = _run_steal(args.method, cfg, args.target, args.bank,
                                                      args.surrogate_size, args.surrogate_channels,
                                                      args.allow_fingerprint_mismatch)
    if not args.no_eval:
        finalize_report(report, surrogate, target, data.probe_tasks(cfg.data), _probe(args))
    tmp = run.file("surrogate.tmp")
    fp = save_checkpoint(surrogate, tmp)
    ckpt = run.addressed("surrogate", fp, ".ckpt")
    os.replace(tmp, ckpt)
    run.record("surrogate", ckpt)
    rep_path = run.record("report", run.addressed("report", hashlib.sha256(
        json.dumps(report.to_dict(), sort_keys=True).encode()).hexdigest(), ".json"))
    report.save(rep_path)
    with open(run.file("config.toml"), "w") as f:
        f.write(dumps(cfg))
    inputs = {"target": _input(args.target)}
    if args.bank:
        inputs["bank"] = _input(args.bank)
    run.write_manifest({"subcommand": "steal", "method": args.method, "seed": cfg.seed, "config": cfg.to_dict(),
                        "inputs": inputs, "surrogate_size": len(ds),
                        "surrogate_channels": list(args.surrogate_channels),
                        "allow_fingerprint_mismatch": args.allow_fingerprint_mismatch,
                        "ledger": report.ledger, "expected_queries": report.expected_queries,
                        "loss_series": report.loss_series})
    print(f"ledger\tprototype_generation={report.ledger.get('prototype_generation', 0)}"
          f"\ttraining={report.ledger.get('training', 0)}\tattack_total={report.attack_queries}")
    for line in summary_rows([report]):
        print(line)
    return 0


def cmd_replay(args):
    with open(os.path.join(args.run, "manifest.json")) as f:
        man = json.load(f)
    if man.get("subcommand") != "steal":
        raise ConfigError("only steal runs can be replayed")
    for role, inp in man["inputs"].items():
        if not os.path.exists(inp["path"]) or sha256_file(inp["path"]) != inp["sha256"]:
            raise DataError(f"replay input {role} ({inp['path']}) is missing or changed")
    cfg = AttackConfig.from_dict(man["config"])
    _, _, _, _, report = _run_steal(man["method"], cfg, man["inputs"]["target"]["path"],
                                    man["inputs"].get("bank", {}).get("path"), man["surrogate_size"],
                                    tuple(man["surrogate_channels"]), man["allow_fingerprint_mismatch"],
                                    verbose=args.verbose)
    same = report.loss_series == man["loss_series"] and report.ledger == man["ledger"]
    print(f"replay\tepochs={len(report.loss_series)}\tidentical={'yes' if same else 'no'}")
    if not same:
        diffs = [i + 1 for i, (a, b) in enumerate(zip(report.loss_series, man["loss_series"])) if a != b]
        print(f"first differing epoch: {diffs[0] if diffs else 'ledger'}", file=sys.stderr)
        return 1
    return 0


def cmd_eval(args):
    setup = DeskSetup(data_seed=args.data_seed or 0)
    enc = load_checkpoint(args.encoder)
    defenses = [DefenseTransform.parse(d) for d in (args.defense or [])]
    subject = BlackBoxTarget(enc, defenses) if defenses else enc
    probe = _probe(args)
    print("encoder\ttask\tmetric\tvalue")
    print(f"{os.path.basename(args.encoder)}\tselect\tknn\t{knn_accuracy(subject, data.selection_task(setup)):.4f}")
    tasks = data.probe_tasks(setup)
    for t in tasks:
        print(f"{os.path.basename(args.encoder)}\t{t.name}\tprobe\t{probe.run(subject, t):.4f}")
    if args.export_embeddings:
        run = RunDir(args.export_embeddings)
        for t in tasks:
            export_embeddings_csv(subject, t.test_images, run.record(t.name, run.file(f"embeddings-{t.name}.csv")),
                                  t.test_labels, t.test_keys)
        run.write_manifest({"subcommand": "eval", "inputs": {"encoder": _input(args.encoder)},
                            "defenses": [d.to_dict() for d in defenses]})
    return 0


def cmd_defend_sweep(args):
    cfg = config_from_args(args)
    run = RunDir(args.out)
    inner, _ = _load_target(args.target)
    task = {t.name: t for t in data.probe_tasks(cfg.data)}.get(args.task)
    if task is None:
        raise ConfigError(f"unknown task {args.task!r}")
    values = [float(v) for v in args.values.split(",")]
    attack = None
    if args.with_sa:
        ds = data.surrogate_dataset(cfg.data, args.surrogate_size)
        sel = data.selection_task(cfg.data)

        def attack(target):
            sur = make_surrogate(cfg, inner.input_shape, inner.dim, args.surrogate_channels)
            return steal("rda", cfg, ds, target, sur, selection_task=sel)[0]

    sweep = defense_sweep(inner, args.kind, values, task, _probe(args), attack=attack, noise_seed=cfg.seed)
    print("kind\tvalue\tta\tsa")
    for i, v in enumerate(sweep.values):
        sa = f"{sweep.sa[i]:.2f}" if sweep.sa else ""
        print(f"{sweep.kind}\t{v:g}\t{sweep.ta[i]:.2f}\t{sa}")
    path = run.record("sweep", run.file(f"sweep-{args.kind}.json"))
    with open(path, "w") as f:
        json.dump(sweep.to_dict(), f, indent=1)
    for p in emit_report([], "plots", run.path, sweeps=[sweep]):
        run.record(os.path.basename(p), p)
    run.write_manifest({"subcommand": "defend-sweep", "seed": cfg.seed, "config": cfg.to_dict(),
                        "inputs": {"target": _input(args.target)}, "kind": args.kind, "values": values})
    return 0


def cmd_watermark(args):
    cfg = config_from_args(args)
    run = RunDir(args.out)
    inner, _ = _load_target(args.target)
    wm = Watermark.random(inner.dim, args.seed_watermark)
    images = data.pretrain_images(cfg.data)[:args.images]
    holdout = data.holdout_images(cfg.data)
    marked, res = embed_watermark(inner, wm, images, steps=args.steps, seed=args.seed_watermark, holdout=holdout)
    tmp = run.file("target.tmp")
    fp = save_checkpoint(marked, tmp)
    path = run.addressed("target-wm", fp, ".ckpt")
    os.replace(tmp, path)
    run.record("watermarked_target", path)
    print("encoder\twatermark_rate\treached")
    print(f"target\t{res.watermark_rate:.4f}\t{'yes' if res.reached else 'no'}")
    out = {"target_wr": res.watermark_rate, "reached": res.reached}
    if args.steal:
        target = BlackBoxTarget(marked, cfg.defenses, noise_seed=cfg.seed)
        ds = data.surrogate_dataset(cfg.data, args.surrogate_size)
        sur = make_surrogate(cfg, inner.input_shape, inner.dim, args.surrogate_channels)
        sur, report = steal("rda", cfg, ds, target, sur, selection_task=data.selection_task(cfg.data),
                            progress=_progress)
        out["surrogate_wr"] = watermark_rate(sur, wm, holdout)
        print(f"surrogate\t{out['surrogate_wr']:.4f}\t")
    run.write_manifest({"subcommand": "watermark", "seed": cfg.seed, "config": cfg.to_dict(),
                        "inputs": {"target": _input(args.target)}, "steps": args.steps,
                        "watermark_seed": args.seed_watermark, "result": out})
    return 0


def cmd_compare(args):
    base = config_from_args(args)
    run = RunDir(args.out)
    inner, _ = _load_target(args.target)
    ds = data.surrogate_dataset(base.data, args.surrogate_size)
    sel = data.selection_task(base.data)
    tasks = data.probe_tasks(base.data)
    probe = _probe(args)
    methods = args.methods.split(",")
    bad = [m for m in methods if m not in METHODS]
    if bad:
        raise ConfigError(f"unknown method(s) {bad}; expected {METHODS}")
    seeds = [int(s) for s in args.seeds.split(",")]
    reports, ta_cache = [], {}
    for seed in seeds:
        for method in methods:
            cfg = base.replace(seed=seed)
            target = BlackBoxTarget(inner, cfg.defenses, noise_seed=seed)
            sur = make_surrogate(cfg, inner.input_shape, inner.dim, args.surrogate_channels)
            print(f"# {method} seed={seed}", flush=True)
            sur, report = steal(method, cfg, ds, target, sur, selection_task=sel, progress=_progress)
            if report.attack_queries != report.expected_queries:
                raise DataError(f"{method}: ledger {report.attack_queries} != closed form {report.expected_queries}")
            finalize_report(report, sur, target, tasks, probe, ta_cache)
            reports.append(report)
    for fmt in ("json", "csv", "plots"):
        for p in emit_report(reports, fmt, run.path):
            run.record(os.path.basename(p), p)
    for line in summary_rows(reports):
        print(line)
    run.write_manifest({"subcommand": "compare", "config": base.to_dict(), "methods": methods, "seeds": seeds,
                        "inputs": {"target": _input(args.target)}})
    return 0


def _collect(inputs):
    reports, sweeps = [], []
    for item in inputs:
        paths = [item]
        if os.path.isdir(item):
            paths = sorted(os.path.join(item, n) for n in os.listdir(item)
                           if n.endswith(".json") and n != "manifest.json")
        for p in paths:
            with open(p) as f:
                raw = json.load(f)
            if "reports" in raw:
                r, s = load_reports_json(p)
                reports += r
                sweeps += s
            elif "method" in raw:
                reports.append(StealReport.from_dict(raw))
            elif "kind" in raw:
                sweeps.append(DefenseSweep.from_dict(raw))
    return reports, sweeps


def cmd_report(args):
    for p in args.inputs:
        if not os.path.exists(p):
            raise DataError(f"report input {p} does not exist")
    reports, sweeps = _collect(args.inputs)
    if not reports and not sweeps:
        raise DataError("no reports or sweeps found in the given inputs")
    run = RunDir(args.out)
    formats = FORMATS_ALL if args.format == "all" else (args.format,)
    for fmt in formats:
        for p in emit_report(reports, fmt, run.path, sweeps):
            run.record(os.path.basename(p), p)
    for line in summary_rows(reports):
        print(line)
    for name in sorted(run.outputs):
        print(f"wrote\t{run.outputs[name]}")
    run.write_manifest({"subcommand": "report", "inputs": [os.path.abspath(p) for p in args.inputs]})
    return 0


FORMATS_ALL = ("json", "csv", "plots")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="rdasteal", description="Prototype-guided encoder stealing at desk scale.")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("pretrain-target", help="contrastively pre-train and checkpoint a desk target")
    p.add_argument("--out", required=True)
    p.add_argument("--pretrain-epochs", type=int, default=80)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--data-seed", type=int, default=0)
    p.add_argument("--precision", choices=["float32", "float64"], default="float32")
    p.set_defaults(func=cmd_pretrain_target)

    def common(p, target=True):
        if target:
            p.add_argument("--target", required=True, help="target checkpoint")
        p.add_argument("--out", required=True, help="fresh output directory")
        add_config_args(p)
        p.add_argument("--surrogate-size", type=int, default=None)
        p.add_argument("--surrogate-channels", type=_channels, default=SURROGATE_CHANNELS)
        p.add_argument("--probe-epochs", type=int, default=100)

    p = sub.add_parser("build-bank", help="query the target once per prototype patch and persist the bank")
    common(p)
    p.add_argument("--workers", type=int, default=1)
    p.set_defaults(func=cmd_build_bank)

    p = sub.add_parser("steal", help="run one stealing engine")
    common(p)
    p.add_argument("--method", required=True, choices=METHODS)
    p.add_argument("--bank", help="prebuilt prototype bank (rda only; no new queries)")
    p.add_argument("--allow-fingerprint-mismatch", action="store_true")
    p.add_argument("--no-eval", action="store_true", help="skip the final linear probes")
    p.set_defaults(func=cmd_steal)

    p = sub.add_parser("replay", help="re-run a steal from its manifest and check the loss series")
    p.add_argument("run", help="directory of a previous steal run")
    p.set_defaults(func=cmd_replay)

    p = sub.add_parser("eval", help="KNN and linear-probe accuracy of a checkpoint")
    p.add_argument("--encoder", required=True)
    p.add_argument("--defense", action="append", metavar="KIND:PARAM=VALUE")
    p.add_argument("--data-seed", type=int, default=0)
    p.add_argument("--probe-epochs", type=int, default=100)
    p.add_argument("--export-embeddings", metavar="DIR", help="also write per-task embedding CSVs here")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("defend-sweep", help="TA (and optionally SA) over one defense parameter grid")
    common(p)
    p.add_argument("--kind", required=True, choices=KINDS)
    p.add_argument("--values", required=True, help="comma-separated parameter values")
    p.add_argument("--task", default="shapes")
    p.add_argument("--with-sa", action="store_true", help="also steal (rda) at every grid point")
    p.set_defaults(func=cmd_defend_sweep)

    p = sub.add_parser("watermark", help="embed a trigger watermark and measure its rate")
    common(p)
    p.add_argument("--steps", type=int, default=300)
    p.add_argument("--images", type=int, default=2000)
    p.add_argument("--seed-watermark", type=int, default=0)
    p.add_argument("--steal", action="store_true", help="steal the watermarked target and measure transfer")
    p.set_defaults(func=cmd_watermark)

    p = sub.add_parser("compare", help="several methods and seeds against one target")
    common(p)
    p.add_argument("--methods", default=",".join(METHODS))
    p.add_argument("--seeds", default="0")
    p.set_defaults(func=cmd_compare)

    p = sub.add_parser("report", help="render tables and figures from previous runs")
    p.add_argument("inputs", nargs="+", help="run directories or report/sweep JSON files")
    p.add_argument("--out", required=True)
    p.add_argument("--format", choices=FORMATS_ALL + ("all",), default="all")
    p.set_defaults(func=cmd_report)
    return ap


def main(argv=None) -> int:
    ap = build_parser()
    args = ap.parse_args(argv)
    if args.command == "replay":
        args.verbose = getattr(args, "verbose", False)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except RDAError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return DataError.exit_code


if __name__ == "__main__":
    raise SystemExit(main())
