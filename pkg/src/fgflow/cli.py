"""Command line driver: generate, train, align, report, sweep-lambda.

Every command works inside one run directory::

    run/
      manifest.json            resolved config, its hash, sha256 of every output
      data/dataset.fgds        (+ .manifest.json)
      models/<tag>.ckpt        final or latest checkpoint (Adam state included)
      models/<tag>.log.jsonl   one record per epoch
      scores/<tag>.jsonl       per-sample S (and F) records
      scores/<tag>.summary.json
      scores/<tag>.traces.csv  optional flow polylines
      report/S.csv, S.txt, F.csv, F.txt
      sweep/lambda_sweep.csv

Exit status is 0 on success, 1 when a computation fails and 2 for usage or
configuration problems.
"""

from __future__ import annotations

import argparse
import copy
import csv
import hashlib
import json
import logging
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from . import analysis, synthdata
from .features import FeatureError, FeatureSet, feature_jacobian, make_feature, random_feature
from .geometry import (
    CriticalPointError, DegenerateFeatureError, FlowConfig, flow_scores, pointwise_alignment_multi,
)
from .model import (
    Architecture, CheckpointError, ClassifierModel, init_params, load_checkpoint,
    logits_and_input_grads, predict_logits, save_checkpoint,
)
from .training import TrainConfig, TrainRecord, train

log = logging.getLogger("fgflow")

SCHEMA_VERSION = 1
JOBS_ENV = "FGFLOW_JOBS"
CHUNK = 8  # samples per work unit; fixed so results do not depend on -j

DEFAULTS: dict = {
    "schema_version": SCHEMA_VERSION,
    "seed": 0,
    "run_dir": "run",
    "data": {
        "n": 300,
        "resolution": 64,
        "rule": "brightness-threshold",
        "positive_rate": 0.13,
        "rule_weights": [1.0, 1.0, 1.0],
        "noise": 0.02,
        "semi_axis_range": [0.0625, 0.1875],
        "peak_range": [0.4, 1.0],
        "held_out": 0.3,
        "path": None,
    },
    "model": {
        "channels": [8, 16, 32],
        "kernels": [5, 3, 3],
        "hidden": [256, 128],
        "head": "logit",
    },
    "train": {
        "epochs": 100,
        "batch_size": 32,
        "learning_rate": 3.0e-5,
        "augment": True,
        "checkpoint_every": 10,
    },
    "features": {
        "names": ["brightness", "extent", "log_aspect_ratio"],
        "lambdas": [3.0e-5, 3.0e-5, 3.0e-5],
    },
    "flow": {
        "step_size": None,
        "step_scale": 0.5,
        "max_steps": 1000,
        "vanishing": 1e-12,
    },
    "align": {
        "random_seeds": [1, 2, 3],
    },
}


class ConfigError(Exception):
    """Bad configuration, arguments or paths (exit status 2)."""


# ---------------------------------------------------------------- config

def _merge(base: dict, update: dict, where: str = "") -> dict:
    out = copy.deepcopy(base)
    for k, v in update.items():
        if k not in base:
            raise ConfigError(f"unknown config key {where}{k}")
        if isinstance(base[k], dict):
            if not isinstance(v, dict):
                raise ConfigError(f"config key {where}{k} must be a table")
            out[k] = _merge(base[k], v, f"{where}{k}.")
        else:
            out[k] = v
    return out


def _set_override(cfg: dict, assignment: str) -> None:
    if "=" not in assignment:
        raise ConfigError(f"--set expects key=value, got {assignment!r}")
    key, raw = assignment.split("=", 1)
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    node = cfg
    parts = key.split(".")
    for p in parts[:-1]:
        if not isinstance(node.get(p), dict):
            raise ConfigError(f"unknown config key {key}")
        node = node[p]
    if parts[-1] not in node:
        raise ConfigError(f"unknown config key {key}")
    node[parts[-1]] = value


def load_config(path: str | None, overrides=(), seed: int | None = None,
                run_dir: str | None = None) -> dict:
    cfg = copy.deepcopy(DEFAULTS)
    if path is not None:
        try:
            user = json.loads(Path(path).read_text(encoding="utf-8"))
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc.strerror}") from exc
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
        if not isinstance(user, dict):
            raise ConfigError(f"{path}: top level must be an object")
        version = user.get("schema_version")
        if version != SCHEMA_VERSION:
            raise ConfigError(f"{path}: schema_version {version!r} is not supported "
                              f"(expected {SCHEMA_VERSION})")
        cfg = _merge(cfg, user)
    for a in overrides:
        _set_override(cfg, a)
    if seed is not None:
        cfg["seed"] = seed
    if run_dir is not None:
        cfg["run_dir"] = run_dir
    _validate(cfg)
    return cfg


def _validate(cfg: dict) -> None:
    f = cfg["features"]
    if len(f["names"]) != len(f["lambdas"]):
        raise ConfigError("features.names and features.lambdas differ in length")
    if any(v < 0 for v in f["lambdas"]):
        raise ConfigError("features.lambdas must be nonnegative")
    for name in f["names"]:
        try:
            make_feature(name, 4)
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc
    if cfg["model"]["head"] not in ("logit", "probability"):
        raise ConfigError("model.head must be 'logit' or 'probability'")
    if len(cfg["align"]["random_seeds"]) < 3:
        raise ConfigError("align.random_seeds needs three seeds")
    if not 0.0 < cfg["data"]["held_out"] < 1.0:
        raise ConfigError("data.held_out must lie in (0, 1)")
    try:
        _arch(cfg)
        _train_config(cfg, enhanced=True)
        FlowConfig(**cfg["flow"])
        synthdata.LabelRule(cfg["data"]["rule"], cfg["data"]["positive_rate"])
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc


def _canonical(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def config_hash(cfg: dict, *sections: str) -> str:
    keys = sections or tuple(k for k in cfg if k != "run_dir")
    return hashlib.sha256(_canonical({k: cfg[k] for k in keys}).encode()).hexdigest()[:16]


def _arch(cfg) -> Architecture:
    m = cfg["model"]
    return Architecture(cfg["data"]["resolution"], tuple(m["channels"]), tuple(m["kernels"]),
                        tuple(m["hidden"]))


def _train_config(cfg, enhanced: bool, lambdas=None) -> TrainConfig:
    t, f = cfg["train"], cfg["features"]
    lams = f["lambdas"] if lambdas is None else lambdas
    return TrainConfig(
        epochs=t["epochs"], batch_size=t["batch_size"], learning_rate=t["learning_rate"],
        features=tuple(f["names"]),
        lambdas=tuple(float(v) for v in lams) if enhanced else (0.0,) * len(f["names"]),
        seed=cfg["seed"], head=cfg["model"]["head"], augment=t["augment"],
    )


# ---------------------------------------------------------------- run directory

def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def _run_dir(cfg) -> Path:
    root = Path(cfg["run_dir"])
    try:
        root.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise ConfigError(f"cannot create run directory {root}: {exc.strerror}") from exc
    return root


def _subdir(root: Path, name: str) -> Path:
    d = root / name
    try:
        d.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise ConfigError(f"cannot create {d}: {exc.strerror}") from exc
    return d


def _update_manifest(root: Path, cfg: dict, command: str, outputs) -> None:
    path = root / "manifest.json"
    manifest = {"schema_version": SCHEMA_VERSION, "commands": {}, "outputs": {}}
    if path.exists():
        try:
            manifest = json.loads(path.read_text(encoding="utf-8"))
        except json.JSONDecodeError:
            log.warning("replacing unreadable %s", path)
    manifest["config"] = {k: v for k, v in cfg.items() if k != "run_dir"}
    manifest["config_hash"] = config_hash(cfg)
    rel = sorted(str(Path(p).resolve().relative_to(root.resolve())) for p in outputs)
    manifest["commands"][command] = rel
    for r in rel:
        manifest["outputs"][r] = _sha256(root / r)
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n", encoding="utf-8")


# ---------------------------------------------------------------- data

def _dataset_path(cfg, root: Path) -> Path:
    return Path(cfg["data"]["path"]) if cfg["data"]["path"] else root / "data" / "dataset.fgds"


def _load_data(cfg, root: Path) -> synthdata.Dataset:
    path = _dataset_path(cfg, root)
    if not path.exists():
        raise ConfigError(f"dataset {path} not found; run 'fgflow generate' first")
    ds = synthdata.load_dataset(path)
    if ds.resolution != cfg["data"]["resolution"]:
        raise ConfigError(f"dataset resolution {ds.resolution} differs from "
                          f"data.resolution {cfg['data']['resolution']}")
    return ds


def _split(cfg, ds) -> tuple[np.ndarray, np.ndarray]:
    return synthdata.stratified_split(ds.labels, cfg["data"]["held_out"], cfg["seed"])


def cmd_generate(cfg, args) -> int:
    root = _run_dir(cfg)
    d = cfg["data"]
    dist = synthdata.SpecDistribution(d["resolution"], tuple(d["semi_axis_range"]),
                                      tuple(d["peak_range"]), d["noise"])
    rule = synthdata.LabelRule(d["rule"], d["positive_rate"], tuple(d["rule_weights"]))
    try:
        ds = synthdata.generate(d["n"], dist, rule, cfg["seed"])
    except synthdata.InfeasibleSpecError as exc:
        raise ConfigError(str(exc)) from exc
    path = Path(args.output) if args.output else root / "data" / "dataset.fgds"
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        manifest = synthdata.save_dataset(path, ds)
    except OSError as exc:
        raise ConfigError(f"cannot write {path}: {exc.strerror}") from exc
    print(f"wrote {path}: {manifest['n']} samples, positive rate {manifest['positive_rate']:.3f}")
    if root.resolve() in path.resolve().parents:
        _update_manifest(root, cfg, "generate", [path, path.with_suffix(".manifest.json")])
    return 0


# ---------------------------------------------------------------- train

def _record_from_meta(meta: dict) -> TrainRecord:
    r = meta.get("record", {})
    return TrainRecord(list(r.get("loss", [])), list(r.get("val_balanced_accuracy", [])),
                       list(r.get("mean_reward", [])), list(r.get("skipped", [])))


def _log_lines(record: TrainRecord) -> list[str]:
    lines = []
    for e in range(len(record.loss)):
        lines.append(_canonical({
            "epoch": e,
            "loss": record.loss[e],
            "mean_reward": record.mean_reward[e],
            "skipped": record.skipped[e],
            "val_balanced_accuracy": record.val_balanced_accuracy[e],
        }))
    return lines


def _train_one(cfg, root: Path, tag: str, enhanced: bool, resume: bool, lambdas=None,
               quiet: bool = False):
    ds = _load_data(cfg, root)
    tr, te = _split(cfg, ds)
    tcfg = _train_config(cfg, enhanced, lambdas)
    chash = config_hash(dict(cfg, run_dir=None, tag=tag, lambdas=list(tcfg.lambdas)))
    models = _subdir(root, "models")
    ckpt_path = models / f"{tag}.ckpt"
    log_path = models / f"{tag}.log.jsonl"

    params = init_params(_arch(cfg), cfg["seed"])
    start, opt_state, record = 0, None, None
    if resume:
        if not ckpt_path.exists():
            raise ConfigError(f"nothing to resume: {ckpt_path} does not exist")
        ck = load_checkpoint(ckpt_path)
        if ck.meta.get("config_hash") != chash:
            raise ConfigError(f"refusing to resume {ckpt_path}: it was written with config hash "
                              f"{ck.meta.get('config_hash')}, current config hashes to {chash}")
        params, opt_state = ck.params, ck.extra
        start = int(ck.meta["epoch"])
        record = _record_from_meta(ck.meta)
        print(f"resuming {tag} at epoch {start}")

    every = max(1, int(cfg["train"]["checkpoint_every"]))

    def save(epoch_done, p, opt, rec):
        meta = {"config_hash": chash, "epoch": epoch_done, "tag": tag,
                "train_config": tcfg.to_dict(),
                "record": {"loss": rec.loss, "val_balanced_accuracy": rec.val_balanced_accuracy,
                           "mean_reward": rec.mean_reward, "skipped": rec.skipped}}
        save_checkpoint(ckpt_path, p, opt.state(), meta)
        log_path.write_text("".join(line + "\n" for line in _log_lines(rec)), encoding="utf-8")

    def on_epoch(epoch, p, opt, rec):
        ba = rec.val_balanced_accuracy[-1]
        if not quiet:
            print(f"{tag} epoch {epoch + 1}/{tcfg.epochs} loss {rec.loss[-1]:.6g} "
                  f"reward {rec.mean_reward[-1]:.4g} val_balanced_accuracy "
                  f"{'n/a' if ba is None else f'{ba:.4f}'}", flush=True)
        if (epoch + 1) % every == 0 or epoch + 1 == tcfg.epochs:
            save(epoch + 1, p, opt, rec)

    if start >= tcfg.epochs:
        print(f"{tag}: already trained for {start} epochs")
        params_out = params
    else:
        params_out, record = train(params, ds.images[tr], ds.labels[tr], tcfg,
                                   val=(ds.images[te], ds.labels[te]), on_epoch=on_epoch,
                                   start_epoch=start, optimizer_state=opt_state, record=record)
    return params_out, ckpt_path, log_path, (ds, tr, te), record


def cmd_train(cfg, args) -> int:
    root = _run_dir(cfg)
    tag = "enhanced" if args.enhanced else "plain"
    _, ckpt, logp, _, _ = _train_one(cfg, root, tag, args.enhanced, args.resume)
    print(f"wrote {ckpt}")
    _update_manifest(root, cfg, f"train:{tag}", [ckpt, logp])
    return 0


# ---------------------------------------------------------------- align

def _feature_sets(names, random_seeds, d) -> dict[str, FeatureSet]:
    sets = {n: FeatureSet([make_feature(n, d)]) for n in names}
    if len(names) > 1:
        sets[analysis.COMBINED] = FeatureSet([make_feature(n, d) for n in names])
    sets[analysis.SINGLE_RANDOM] = FeatureSet([random_feature(random_seeds[0], d)])
    sets["three random"] = FeatureSet([random_feature(s, d) for s in random_seeds[:3]])
    return sets


def _align_chunk(job) -> tuple[list[dict], list[tuple]]:
    """Scores for one fixed chunk of samples; runs in a worker process."""
    params, head, images, indices, labels, names, seeds, flow, want_traces = job
    d = images[0].size
    sets = _feature_sets(names, seeds, d)
    z, grads = logits_and_input_grads(params, images, head)
    records = []
    for j, idx in enumerate(indices):
        rec = {"index": int(idx), "label": int(labels[j]), "logit": float(z[j]), "S": {}, "errors": {}}
        for tag, fs in sets.items():
            try:
                rec["S"][tag] = pointwise_alignment_multi(grads[j], feature_jacobian(fs, images[j])).s
            except (FeatureError, CriticalPointError, DegenerateFeatureError) as exc:
                rec["S"][tag] = None
                rec["errors"][tag] = type(exc).__name__
        records.append(rec)
    traces: list[tuple] = []
    if flow is not None:
        sink = None
        if want_traces:
            def sink(sample, step, logit, dist):
                traces.append((int(indices[sample]), step, logit, dist))
        results = flow_scores(ClassifierModel(params, head), images, sets, FlowConfig(**flow), sink)
        for rec, res in zip(records, results):
            rec["F"] = {t: (None if np.isnan(v) else v) for t, v in res.F.items()}
            rec["termination"] = res.termination
            rec["steps"] = res.steps
            rec["step_size"] = res.step_size
            if res.feature_errors:
                rec["flow_feature_errors"] = res.feature_errors
    return records, traces


def _jobs(args) -> int:
    if args.jobs is not None:
        j = args.jobs
    else:
        raw = os.environ.get(JOBS_ENV, "1")
        try:
            j = int(raw)
        except ValueError as exc:
            raise ConfigError(f"{JOBS_ENV}={raw!r} is not an integer") from exc
    if j < 1:
        raise ConfigError("-j must be at least 1")
    return j


def align_scores(cfg, params, images, indices, labels, flow: bool, jobs: int = 1,
                 traces: bool = False) -> tuple[list[dict], list[tuple]]:
    names = list(cfg["features"]["names"])
    seeds = list(cfg["align"]["random_seeds"])
    flow_cfg = dict(cfg["flow"]) if flow else None
    work = []
    for s in range(0, len(indices), CHUNK):
        sl = slice(s, s + CHUNK)
        work.append((params, cfg["model"]["head"], images[sl], indices[sl], labels[sl], names,
                     seeds, flow_cfg, traces))
    if jobs > 1 and len(work) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as ex:
            parts = list(ex.map(_align_chunk, work))
    else:
        parts = [_align_chunk(w) for w in work]
    records = [r for recs, _ in parts for r in recs]
    rows = [t for _, tr in parts for t in tr]
    return records, rows


def _summary(records: list[dict], flow: bool) -> dict:
    out: dict = {"n": len(records), "s_errors": {}}
    for rec in records:
        for tag, err in rec["errors"].items():
            out["s_errors"].setdefault(tag, {}).setdefault(err, 0)
            out["s_errors"][tag][err] += 1
    if flow:
        counts: dict[str, int] = {}
        for rec in records:
            counts[rec["termination"]] = counts.get(rec["termination"], 0) + 1
        out["termination"] = dict(sorted(counts.items()))
        out["mean_steps"] = float(np.mean([r["steps"] for r in records])) if records else 0.0
    return out


def cmd_align(cfg, args) -> int:
    root = _run_dir(cfg)
    ckpt = Path(args.checkpoint) if args.checkpoint else root / "models" / f"{args.model}.ckpt"
    if not ckpt.exists():
        raise ConfigError(f"checkpoint {ckpt} not found")
    tag = args.tag or (args.model if not args.checkpoint else ckpt.stem)
    params = load_checkpoint(ckpt).params
    ds = _load_data(cfg, root)
    _, te = _split(cfg, ds)
    if args.limit is not None:
        te = te[:args.limit]
    jobs = _jobs(args)
    records, rows = align_scores(cfg, params, ds.images[te], te, ds.labels[te], args.flow, jobs,
                                 args.traces)
    scores = _subdir(root, "scores")
    rec_path = scores / f"{tag}.jsonl"
    analysis.write_records(rec_path, records)
    summ_path = scores / f"{tag}.summary.json"
    summary = _summary(records, args.flow)
    _write_json(summ_path, summary)
    outputs = [rec_path, summ_path]
    if args.traces:
        tr_path = scores / f"{tag}.traces.csv"
        with open(tr_path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["sample", "step", "logit", "distance"])
            for row in rows:
                w.writerow([row[0], row[1], repr(row[2]), repr(row[3])])
        outputs.append(tr_path)
    print(f"wrote {rec_path} ({len(records)} samples)")
    if args.flow:
        print("flow termination: " + ", ".join(f"{k} {v}" for k, v in summary["termination"].items()))
    _update_manifest(root, cfg, f"align:{tag}", outputs)
    return 0


# ---------------------------------------------------------------- report

def cmd_report(cfg, args) -> int:
    root = _run_dir(cfg)
    plain_path = Path(args.plain) if args.plain else root / "scores" / "plain.jsonl"
    enh_path = Path(args.enhanced) if args.enhanced else root / "scores" / "enhanced.jsonl"
    if not plain_path.exists():
        raise ConfigError(f"plain scores {plain_path} not found")
    plain = analysis.samples_from_records(analysis.read_records(plain_path), "plain")
    enhanced = None
    if enh_path.exists():
        enhanced = analysis.samples_from_records(analysis.read_records(enh_path), "enhanced")
    else:
        print(f"warning: {enh_path} not found; writing a plain-only report", file=sys.stderr)
    out = _subdir(root, "report")
    outputs = []
    measures = ["S"]
    if all(s.f is not None for s in plain.values()) and (
            enhanced is None or all(s.f is not None for s in enhanced.values())):
        measures.append("F")
    for m in measures:
        try:
            table = analysis.summarize(plain, enhanced, m)
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc
        text = analysis.render_text(table)
        for suffix, body in (("csv", analysis.render_csv(table)), ("txt", text)):
            p = out / f"{m}.{suffix}"
            p.write_text(body, encoding="utf-8")
            outputs.append(p)
        print(text)
    _update_manifest(root, cfg, "report", outputs)
    return 0


# ---------------------------------------------------------------- sweep

def cmd_sweep(cfg, args) -> int:
    root = _run_dir(cfg)
    try:
        grid = [float(v) for v in args.lambdas.split(",") if v.strip()]
    except ValueError as exc:
        raise ConfigError(f"--lambdas: {exc}") from exc
    if not grid or any(v < 0 for v in grid):
        raise ConfigError("--lambdas needs nonnegative values")
    names = cfg["features"]["names"]
    rows = []
    baseline_ba = None
    for lam in sorted(set(grid) | {0.0}):
        lams = [lam] * len(names)
        params, _, _, (ds, _, te), rec = _train_one(cfg, root, f"sweep-{lam!r}", lam > 0, False,
                                                     lams, quiet=True)
        ba = analysis.balanced_accuracy(predict_logits(params, ds.images[te]) > 0, ds.labels[te])
        records, _ = align_scores(cfg, params, ds.images[te], te, ds.labels[te], False, _jobs(args))
        samples = analysis.samples_from_records(records, "sweep")
        row = {"lambda": lam, "val_balanced_accuracy": ba}
        for tag, s in samples.items():
            v = s.values("S")
            row[f"mean_S[{tag}]"] = float(np.mean(v)) if v.size else float("nan")
        rows.append(row)
        if lam == 0.0:
            baseline_ba = ba
        print(f"lambda {lam:g}: val_balanced_accuracy {ba:.4f}", flush=True)
    ok = [r["lambda"] for r in rows if baseline_ba - r["val_balanced_accuracy"] <= args.tolerance]
    best = max(ok) if ok else 0.0
    out = _subdir(root, "sweep")
    path = out / "lambda_sweep.csv"
    cols = list(rows[0])
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(cols)
        for r in rows:
            w.writerow([repr(r[c]) for c in cols])
    print(f"largest lambda within {args.tolerance} of the plain balanced accuracy: {best:g}")
    print(f"wrote {path}")
    _update_manifest(root, cfg, "sweep-lambda", [path])
    return 0


# ---------------------------------------------------------------- entry point

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON config file (schema_version %d)" % SCHEMA_VERSION)
    common.add_argument("--run-dir", help="output directory (overrides run_dir)")
    common.add_argument("--seed", type=int, help="global seed (overrides seed)")
    common.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="override a config value, e.g. --set train.epochs=20")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="fgflow", description="Feature gradient flow alignment experiments.")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", parents=[common], help="render the synthetic dataset")
    g.add_argument("--output", help="dataset file (default <run-dir>/data/dataset.fgds)")
    g.set_defaults(func=cmd_generate)

    t = sub.add_parser("train", parents=[common], help="train a plain or enhanced classifier")
    t.add_argument("--enhanced", action="store_true", help="use the alignment reward")
    t.add_argument("--resume", action="store_true", help="continue from the saved checkpoint")
    t.set_defaults(func=cmd_train)

    a = sub.add_parser("align", parents=[common], help="score held-out samples")
    a.add_argument("--model", choices=("plain", "enhanced"), default="plain")
    a.add_argument("--checkpoint", help="explicit checkpoint instead of <run-dir>/models/<model>.ckpt")
    a.add_argument("--tag", help="name of the score files (default: model name)")
    a.add_argument("--flow", action="store_true", help="also compute the flow score F")
    a.add_argument("--traces", action="store_true", help="write flow polylines as CSV")
    a.add_argument("--limit", type=int, help="score only the first N held-out samples")
    a.add_argument("-j", "--jobs", type=int, help=f"worker processes (default ${JOBS_ENV} or 1)")
    a.set_defaults(func=cmd_align)

    r = sub.add_parser("report", parents=[common], help="plain vs enhanced tables")
    r.add_argument("--plain", help="plain score records (default <run-dir>/scores/plain.jsonl)")
    r.add_argument("--enhanced", help="enhanced score records (default <run-dir>/scores/enhanced.jsonl)")
    r.set_defaults(func=cmd_report)

    s = sub.add_parser("sweep-lambda", parents=[common], help="train over a grid of reward weights")
    s.add_argument("--lambdas", required=True, help="comma separated reward weights")
    s.add_argument("--tolerance", type=float, default=0.02,
                   help="allowed balanced-accuracy drop relative to lambda = 0")
    s.add_argument("-j", "--jobs", type=int, help=f"worker processes (default ${JOBS_ENV} or 1)")
    s.set_defaults(func=cmd_sweep)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args.config, args.set, args.seed, args.run_dir)
        return args.func(cfg, args)
    except ConfigError as exc:
        print(f"fgflow: error: {exc}", file=sys.stderr)
        return 2
    except (ValueError, ArithmeticError, CheckpointError, OSError) as exc:
        print(f"fgflow: computation failed: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
