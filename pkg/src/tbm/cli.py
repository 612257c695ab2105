"""``tbm`` command-line entry point: simulate, preprocess, train, evaluate, detect.

Every command reads an optional flat JSON config (``--config``); command-line
flags override file values, which override the defaults below.  Exit codes:
0 success, 2 config, 3 I/O, 4 schema, 5 integrity, 1 any other package error.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import math
import os
import sys
from pathlib import Path

import numpy as np

from . import anomaly, preprocess, rate, synth
from .checkpoint import load_checkpoint, save_checkpoint
from .errors import ConfigInvalid, IntegrityError, SchemaMismatch, TbmError
from .metrics import detection_rate, false_positive_rate
from .records import (
    Phase,
    ensure_dir,
    fmt,
    read_excavation_csv,
    read_geology_csv,
    write_excavation_csv,
    write_geology_csv,
)

log = logging.getLogger("tbm")

EXIT_OK, EXIT_ERROR, EXIT_CONFIG, EXIT_IO, EXIT_SCHEMA, EXIT_INTEGRITY = 0, 1, 2, 3, 4, 5

DEFAULTS = {
    "simulate": {
        "out_dir": "data",
        "rings": 400,
        "rows_per_ring": 50,
        "noise_sigma": 0.6,
        "change_prob": 0.1,
        "fault_count": 114,
        "window_len": 32,
        "normal_fraction": 0.6,
        "seed": 0,
    },
    "preprocess": {
        "task": "rate",
        "geology": "data/geology.csv",
        "excavation": None,  # task default: excavation.csv (rate), excavation_faulty.csv (anomaly)
        "labels": "data/labels.json",
        "out_dir": None,  # task default: data/rate or data/anomaly
        "emb_dim": 4,
        "w2v_epochs": 50,
        "seed": 0,
    },
    "train-rate": {"data_dir": "data/rate", "checkpoint": "data/rate/model.json", **rate.RateModelConfig().to_dict()},
    "eval-rate": {"data_dir": "data/rate", "checkpoint": "data/rate/model.json", "ablation": False, "seed": 0},
    "train-anomaly": {
        "data_dir": "data/anomaly",
        "labels": "data/labels.json",
        "checkpoint": "data/anomaly/model.json",
        **anomaly.VaeModelConfig().to_dict(),
    },
    "detect": {"data_dir": "data/anomaly", "labels": "data/labels.json", "checkpoint": "data/anomaly/model.json", "seed": 0},
}

VALID_FRACTION_OF_NORMAL = 0.2


# -- config -----------------------------------------------------------------------

def load_config(command: str, path: str | None, overrides: dict) -> dict:
    cfg = dict(DEFAULTS[command])
    if path is not None:
        try:
            with open(path) as fh:
                doc = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ConfigInvalid(f"{path}: {exc}") from exc
        if not isinstance(doc, dict):
            raise ConfigInvalid(f"{path}: config must be a JSON object")
        unknown = sorted(set(doc) - set(cfg))
        if unknown:
            raise ConfigInvalid(f"{path}: unknown keys {unknown}")
        cfg.update(doc)
    cfg.update({k: v for k, v in overrides.items() if v is not None})
    if cfg.get("seed") is None:
        raise ConfigInvalid("a seed is required")
    return cfg


def _write_json(path, doc) -> None:
    with open(path, "w") as fh:
        fh.write(json.dumps(doc, indent=2, sort_keys=True) + "\n")


def _report_path(checkpoint) -> Path:
    p = Path(checkpoint)
    return p.with_name(p.stem + "_report.json")


def _read_json(path) -> dict:
    with open(path) as fh:
        return json.load(fh)


# -- commands ---------------------------------------------------------------------

def cmd_simulate(cfg: dict) -> dict:
    """geology.csv, clean excavation.csv, excavation_faulty.csv and labels.json."""
    out = ensure_dir(cfg["out_dir"])
    seed = int(cfg["seed"])
    geo = synth.gen_geology(int(cfg["rings"]), change_prob=float(cfg["change_prob"]), seed=seed)
    exc = synth.gen_excavation(geo, int(cfg["rows_per_ring"]), float(cfg["noise_sigma"]), seed=seed + 1)
    window_len = int(cfg["window_len"])
    n_windows = sum(r.phase == Phase.STABLE for r in exc) // window_len
    normal_windows = int(float(cfg["normal_fraction"]) * n_windows)
    faults = synth.plan_faults(n_windows, int(cfg["fault_count"]), first_window=normal_windows, seed=seed + 2)
    faulty, labels = synth.inject_faults(exc, faults, window_len)
    write_geology_csv(out / "geology.csv", geo)
    write_excavation_csv(out / "excavation.csv", exc)
    write_excavation_csv(out / "excavation_faulty.csv", faulty)
    extra = {"window_len": window_len, "n_windows": n_windows, "normal_windows": normal_windows}
    with open(out / "labels.json", "w") as fh:
        fh.write(synth.labels_json(labels, faults, **extra))
    log.info("wrote %d geology rows, %d excavation rows, %d fault windows", len(geo), len(exc), len(labels))
    return {"geology_rows": len(geo), "excavation_rows": len(exc), "fault_windows": len(labels), **extra}


def cmd_preprocess(cfg: dict) -> dict:
    task = cfg["task"]
    if task not in ("rate", "anomaly"):
        raise ConfigInvalid(f"task must be 'rate' or 'anomaly', got {task!r}")
    data_dir = Path(cfg["geology"]).parent
    exc_path = cfg["excavation"] or data_dir / ("excavation.csv" if task == "rate" else "excavation_faulty.csv")
    out = ensure_dir(cfg["out_dir"] or data_dir / task)
    geo = read_geology_csv(cfg["geology"])
    exc = read_excavation_csv(exc_path)
    kwargs = {"emb_dim": int(cfg["emb_dim"]), "w2v_epochs": int(cfg["w2v_epochs"]), "seed": int(cfg["seed"])}
    if task == "rate":
        samples, manifest = preprocess.prepare_rate_dataset(geo, exc, **kwargs)
        preprocess.write_rate_csv(out / "fused.csv", samples)
        rows = len(samples)
    else:
        labels = _read_json(cfg["labels"])
        seq_len = int(labels["window_len"])
        data = preprocess.prepare_anomaly_dataset(geo, exc, fit_rows=int(labels["normal_windows"]) * seq_len, **kwargs)
        data.manifest.extra["seq_len"] = seq_len
        preprocess.write_anomaly_csv(out / "fused.csv", data, seq_len)
        manifest, rows = data.manifest, len(data.excavation)
    preprocess.write_manifest(out / "manifest.json", manifest)
    log.info("wrote %d %s rows to %s", rows, task, out)
    return {"task": task, "rows": rows, "manifest_hash": manifest.digest()}


def _load_rate_data(data_dir) -> tuple[np.ndarray, np.ndarray, preprocess.Manifest]:
    manifest = preprocess.read_manifest(Path(data_dir) / "manifest.json")
    if manifest.task != "rate":
        raise IntegrityError(f"{data_dir} holds a {manifest.task} dataset, expected rate")
    samples = preprocess.read_rate_csv(Path(data_dir) / "fused.csv")
    return np.stack([s.features for s in samples]), np.array([s.target for s in samples]), manifest


def _rate_config(cfg: dict) -> rate.RateModelConfig:
    rc = rate.RateModelConfig.from_dict(cfg)
    rc.validate()
    return rc


def cmd_train_rate(cfg: dict) -> dict:
    feats, targets, manifest = _load_rate_data(cfg["data_dir"])
    rc = _rate_config(cfg)
    if not rc.use_geology:
        feats = feats[:, manifest.excavation_columns]
    train, valid, _ = rate.window_splits(feats, targets, rc.window_len)
    model = rate.build_rate_model(rc, feats.shape[1])
    report = rate.train_rate_model(model, train, valid)
    save_checkpoint(cfg["checkpoint"], model, manifest.digest())
    log.info("best epoch %d, valid loss %.6f", report.best_epoch, report.best_valid)
    doc = {
        "best_epoch": report.best_epoch,
        "best_valid_loss": report.best_valid,
        "train_loss": report.train_loss,
        "valid_loss": report.valid_loss,
    }
    _write_json(_report_path(cfg["checkpoint"]), doc)
    return doc


def cmd_eval_rate(cfg: dict) -> dict | list:
    feats, targets, manifest = _load_rate_data(cfg["data_dir"])
    if cfg["ablation"]:
        base = rate.RateModelConfig.from_dict(cfg)
        if Path(cfg["checkpoint"]).exists():
            base = load_checkpoint(cfg["checkpoint"], "rate", manifest.digest()).config
        rows = rate.run_ablation(base, feats, targets, manifest.excavation_columns)
        _write_json(Path(cfg["data_dir"]) / "ablation.json", rows)
        return rows
    model = load_checkpoint(cfg["checkpoint"], "rate", manifest.digest())
    if not model.config.use_geology:
        feats = feats[:, manifest.excavation_columns]
    _, _, test = rate.window_splits(feats, targets, model.config.window_len)
    scores = rate.evaluate(model, test)
    _write_json(Path(cfg["data_dir"]) / "eval.json", scores)
    log.info("test r2 %.4f mse %.5f", scores["r2"], scores["mse"])
    return scores


def _anomaly_layout(cfg: dict, seq_len: int):
    """Windows plus the normal train / normal validation / evaluation index ranges."""
    data_dir = Path(cfg["data_dir"])
    manifest = preprocess.read_manifest(data_dir / "manifest.json")
    if manifest.task != "anomaly":
        raise IntegrityError(f"{data_dir} holds a {manifest.task} dataset, expected anomaly")
    if manifest.extra.get("seq_len", seq_len) != seq_len:
        raise ConfigInvalid(f"seq_len {seq_len} differs from the preprocessed window length {manifest.extra['seq_len']}")
    data = preprocess.read_anomaly_csv(data_dir / "fused.csv", manifest)
    labels = _read_json(cfg["labels"])
    normal = int(labels["normal_windows"])
    n_train = normal - max(1, math.ceil(VALID_FRACTION_OF_NORMAL * normal))
    return data, manifest, labels, n_train, normal


def cmd_train_anomaly(cfg: dict) -> dict:
    vc = anomaly.VaeModelConfig.from_dict(cfg)
    vc.validate()
    data, manifest, _, n_train, _ = _anomaly_layout(cfg, vc.seq_len)
    rows = n_train * vc.seq_len
    xe, xg = anomaly.training_windows(data.excavation[:rows], data.geology[:rows], vc.seq_len, vc.train_stride)
    model, report = anomaly.train_vae(vc, xe, xg)
    save_checkpoint(cfg["checkpoint"], model, manifest.digest())
    log.info("trained on %d windows", len(xe))
    doc = {
        "train_windows": len(xe),
        "pretrain_loss": report.pretrain_loss,
        "recon_loss": report.recon_loss,
        "kl_loss": report.kl_loss,
        "total_loss": report.total_loss,
    }
    _write_json(_report_path(cfg["checkpoint"]), doc)
    return doc


def cmd_detect(cfg: dict) -> dict:
    data_dir = Path(cfg["data_dir"])
    manifest = preprocess.read_manifest(data_dir / "manifest.json")
    model = load_checkpoint(cfg["checkpoint"], "anomaly", manifest.digest())
    seq_len = model.config.seq_len
    data, _, labels, n_train, normal = _anomaly_layout(cfg, seq_len)
    xw, gw, starts = data.windows(seq_len)
    scores = anomaly.score_windows(model, xw, gw)
    threshold = anomaly.calibrate_threshold(scores[n_train:normal], model.config.threshold_quantile)
    verdicts = anomaly.verdicts(scores, threshold, starts)
    with open(data_dir / "verdicts.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["window_index", "start_timestamp", "score", "threshold", "is_anomaly"])
        for v in verdicts:
            w.writerow([v.window_index, v.start_timestamp, fmt(v.score), fmt(v.threshold), int(v.is_anomaly)])
    labelled = set(labels["fault_windows"])
    flagged = {v.window_index for v in verdicts if v.is_anomaly}
    held_out_normal = [i for i in range(normal, len(xw)) if i not in labelled]
    report = {
        "threshold": threshold,
        "windows": len(verdicts),
        "flagged": len(flagged),
        "detection_rate": detection_rate(labelled, flagged),
        "false_positive_rate": false_positive_rate(held_out_normal, flagged),
    }
    kinds = {}
    for f in labels.get("faults", []):
        kinds.setdefault(f["kind"], []).append(f["start_window"] in flagged)
    report["detection_rate_by_kind"] = {k: sum(v) / len(v) for k, v in sorted(kinds.items())}
    _write_json(data_dir / "detect.json", report)
    log.info("detection rate %.3f, false-positive rate %.3f", report["detection_rate"], report["false_positive_rate"])
    return report


COMMANDS = {
    "simulate": cmd_simulate,
    "preprocess": cmd_preprocess,
    "train-rate": cmd_train_rate,
    "eval-rate": cmd_eval_rate,
    "train-anomaly": cmd_train_anomaly,
    "detect": cmd_detect,
}


# -- entry point ------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="tbm", description="TBM advance-rate prediction and anomaly detection")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", help="flat JSON config file")
        p.add_argument("--seed", type=int)
        p.add_argument("--stdout", action="store_true", help="print the report JSON on stdout")
        if name == "preprocess":
            p.add_argument("--task", choices=["rate", "anomaly"])
        if name == "eval-rate":
            p.add_argument("--ablation", action="store_true", default=None)
    return parser


def _setup_logging() -> None:
    level = {"debug": logging.DEBUG, "info": logging.INFO, "warn": logging.WARNING}.get(
        os.environ.get("TBM_LOG", "info").lower(), logging.INFO
    )
    handler = logging.StreamHandler(sys.stderr)
    handler.setFormatter(logging.Formatter("%(levelname)s %(name)s: %(message)s"))
    root = logging.getLogger("tbm")
    root.handlers[:] = [handler]
    root.setLevel(level)
    root.propagate = False


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    _setup_logging()
    overrides = {"seed": args.seed, "task": getattr(args, "task", None), "ablation": getattr(args, "ablation", None)}
    try:
        cfg = load_config(args.command, args.config, {k: v for k, v in overrides.items() if k in DEFAULTS[args.command]})
        report = COMMANDS[args.command](cfg)
    except ConfigInvalid as exc:
        log.error("config: %s", exc)
        return EXIT_CONFIG
    except SchemaMismatch as exc:
        log.error("schema: %s", exc)
        return EXIT_SCHEMA
    except IntegrityError as exc:
        log.error("integrity: %s", exc)
        return EXIT_INTEGRITY
    except OSError as exc:
        log.error("i/o: %s", exc)
        return EXIT_IO
    except (TbmError, ValueError, KeyError) as exc:
        log.error("%s: %s", type(exc).__name__, exc)
        return EXIT_ERROR
    if args.stdout:
        sys.stdout.write(json.dumps(report, indent=2, sort_keys=True) + "\n")
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
