"""``octvf`` command line: one subcommand per pipeline stage.

Every stage reads an optional JSON run config (``--config``), takes explicit
seeds, and writes only under ``--out``.  Errors go to stderr as one JSON
object and give exit code 2 (invalid configuration/usage) or 1 (failure).
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import math
import os
import sys
from dataclasses import asdict, fields
from typing import Sequence

import numpy as np

from . import __version__
from .augment import AugmentConfig
from .evaluation.analysis import (
    BinnedStats, Estimate, MetricsReport, PointwiseMap, SectorRow, bin_by_measured, evaluate,
    pointwise_r_map, retest_coverage, sector_metrics,
)
from .evaluation.report import render_report
from .nn.gradcheck import default_check
from .nn.model import ModelSpec, load_checkpoint
from .oct_ingest import (
    MODALITIES, apply_reliability_policy, exam_ids, ingest, read_container, read_manifest,
    save_container, select, split_by_patient, write_manifest,
)
from .synth import SynthConfig, generate_exams, truth_csv
from .train import TrainConfig, ensemble_average, fit, log_csv, predict_batch
from .vf_domain import DEFAULT_LIMITS, load_retest_ci, load_sector_map

log = logging.getLogger("octvf")

TARGET_FLAGS = {"md": "md", "thresholds": "thresholds"}


class ConfigError(ValueError):
    def __init__(self, problems: list[str]):
        super().__init__("; ".join(problems))
        self.problems = problems


# ------------------------------------------------------------------ config


def _build(cls, section: dict, name: str, problems: list[str], **overrides):
    known = {f.name for f in fields(cls)}
    unknown = sorted(set(section) - known)
    if unknown:
        problems.append(f"{name}: unknown keys {unknown}")
    kwargs = {k: v for k, v in section.items() if k in known}
    kwargs.update({k: v for k, v in overrides.items() if v is not None})
    try:
        return cls(**kwargs)
    except (ValueError, TypeError) as exc:
        problems.extend(f"{name}: {p}" for p in str(exc).split("; "))
        return None


def load_config(args) -> dict:
    """Parse and validate the run config, collecting every problem before failing."""
    raw: dict = {}
    problems: list[str] = []
    if args.config:
        try:
            with open(args.config) as f:
                raw = json.load(f)
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError([f"config {args.config}: {exc}"]) from None
    seed = args.seed
    cfg: dict = {}

    split = raw.get("split", {})
    ratios = tuple(split.get("ratios", (0.6, 0.2, 0.2)))
    if len(ratios) != 3 or any(r < 0 for r in ratios) or abs(sum(ratios) - 1) > 1e-9:
        problems.append(f"split.ratios must be three non-negative numbers summing to 1, got {list(ratios)}")
    cfg["split"] = {"ratios": ratios, "seed": seed if seed is not None else split.get("seed", 0)}

    limits = dict(DEFAULT_LIMITS, **raw.get("reliability", {}))
    for k, v in limits.items():
        if k not in DEFAULT_LIMITS:
            problems.append(f"reliability: unknown limit {k!r}")
        elif not isinstance(v, (int, float)) or not 0 <= v <= 1:
            problems.append(f"reliability.{k} must be in [0, 1], got {v!r}")
    cfg["reliability"] = limits

    target = TARGET_FLAGS.get(args.target) if getattr(args, "target", None) else None
    cfg["train"] = _build(TrainConfig, raw.get("train", {}), "train", problems,
                          seed=seed, target=target, modality=getattr(args, "modality", None))
    aug = raw.get("augment", {})
    cfg["augment"] = _build(AugmentConfig, aug, "augment", problems,
                            global_seed=seed if seed is not None and "global_seed" not in aug else None)
    model = dict(raw.get("model", {}))
    preset = model.pop("preset", "desk")
    out_ch = cfg["train"].out_channels if cfg["train"] else 52
    if preset == "xception":
        cfg["model"] = ModelSpec.xception(out_ch)
    elif preset == "tiny":
        cfg["model"] = ModelSpec.tiny(out_ch)
    elif preset == "desk":
        cfg["model"] = _build(ModelSpec, model, "model", problems, out_channels=out_ch)
    else:
        problems.append(f"model.preset must be desk, tiny or xception, got {preset!r}")
    synth = raw.get("synth", {})
    cfg["synth"] = _build(SynthConfig, synth, "synth", problems, seed=seed,
                          n_patients=getattr(args, "patients", None))

    ev = {"bootstrap_iterations": 5000, "ci_level": 0.95, "retest_ci": None, "sector_map": None,
          "seed": 0, "bin_step": 2.0, **raw.get("eval", {})}
    if not isinstance(ev["bootstrap_iterations"], int) or ev["bootstrap_iterations"] < 0:
        problems.append("eval.bootstrap_iterations must be a non-negative integer")
    if not 0 < ev["ci_level"] < 1:
        problems.append("eval.ci_level must be in (0, 1)")
    for key in ("retest_ci", "sector_map"):
        if ev[key] is not None and not os.path.exists(ev[key]):
            problems.append(f"eval.{key}: file {ev[key]} does not exist")
    if seed is not None:
        ev["seed"] = seed
    cfg["eval"] = ev

    for key in ("container", "checkpoint", "split_dir", "ids", "vf_csv", "images"):
        path = getattr(args, key, None)
        if path and not os.path.exists(path):
            problems.append(f"--{key.replace('_', '-')}: {path} does not exist")
    for path in getattr(args, "predictions", None) or []:
        if not os.path.exists(path):
            problems.append(f"--predictions: {path} does not exist")
    if problems:
        raise ConfigError(problems)
    return cfg


# --------------------------------------------------------------- file I/O


def write_predictions(path: str, ids: Sequence[str], preds: np.ndarray, target: str) -> None:
    preds = np.asarray(preds, dtype=np.float64)
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["exam_id", "target"] + [f"c{i + 1:02d}" for i in range(preds.shape[1])])
        for eid, row in zip(ids, preds):
            w.writerow([eid, target] + [repr(float(v)) for v in row])


def read_predictions(path: str) -> tuple[list[str], np.ndarray, str]:
    with open(path, newline="") as f:
        rows = list(csv.reader(f))
    if not rows or rows[0][:2] != ["exam_id", "target"]:
        raise ValueError(f"{path}: not a predictions file")
    body = rows[1:]
    targets = {r[1] for r in body}
    if len(targets) > 1:
        raise ValueError(f"{path}: mixed targets {sorted(targets)}")
    width = len(rows[0]) - 2
    preds = np.array([[float(v) for v in r[2:]] for r in body], dtype=np.float64).reshape(len(body), width)
    return [r[0] for r in body], preds, (targets.pop() if targets else "thresholds")


def _clean(obj):
    if isinstance(obj, float):
        return None if not math.isfinite(obj) else obj
    if isinstance(obj, np.ndarray):
        return _clean(obj.tolist())
    if isinstance(obj, (np.floating, np.integer)):
        return _clean(obj.item())
    if isinstance(obj, dict):
        return {k: _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    return obj


def _nan(v):
    return float("nan") if v is None else v


def _dump_json(path: str, obj) -> None:
    with open(path, "w") as f:
        json.dump(_clean(obj), f, indent=1, sort_keys=True)
        f.write("\n")


def _load_evaluation(path: str):
    with open(path) as f:
        d = json.load(f)
    reports = [MetricsReport(
        r["tag"], r["target"], r["n_samples"],
        *(Estimate(*(_nan(v) for v in (r[k]["value"], r[k]["ci_low"], r[k]["ci_high"])))
          for k in ("r2", "pearson_r", "mae")),
        r["baseline_mae"], _nan(r["sqrt_r2"]), _nan(r["mean_point_r"]),
    ) for r in d["reports"]]
    pm = None
    if d.get("pointwise"):
        pm = PointwiseMap(np.array([_nan(v) for v in d["pointwise"]["values"]]),
                          np.array(d["pointwise"]["coords"], dtype=float))
    sectors = {tag: [SectorRow(**{k: _nan(v) for k, v in row.items()}) for row in rows]
               for tag, rows in d.get("sectors", {}).items()}
    binned = None
    if d.get("binned"):
        b = d["binned"]
        binned = BinnedStats(**{k: (np.array([_nan(x) for x in v], dtype=float) if isinstance(v, list) else v)
                                for k, v in b.items()})
        binned = BinnedStats(**{**asdict(binned), "count": np.asarray(binned.count, dtype=int)})
    coverage = tuple(d["coverage"]) if d.get("coverage") else None
    return reports, pm, sectors, binned, coverage, d.get("split", "test")


# ------------------------------------------------------------- subcommands


def _out(args) -> str:
    os.makedirs(args.out, exist_ok=True)
    return args.out


def cmd_synth_gen(args, cfg):
    out = _out(args)
    exams, truth = generate_exams(cfg["synth"])
    save_container(exams, os.path.join(out, "exams.octvf"))
    with open(os.path.join(out, "truth.csv"), "w", newline="") as f:
        f.write(truth_csv(truth))
    _dump_json(os.path.join(out, "synth_config.json"), cfg["synth"].to_dict())
    print(f"wrote {len(exams)} exams to {os.path.join(out, 'exams.octvf')}")


def cmd_ingest(args, cfg):
    out = _out(args)
    exams = ingest(args.vf_csv, args.images)
    save_container(exams, os.path.join(out, "exams.octvf"))
    print(f"wrote {len(exams)} exams to {os.path.join(out, 'exams.octvf')}")


def cmd_split(args, cfg):
    out = _out(args)
    exams = read_container(args.container)
    parts = split_by_patient(exams, cfg["split"]["ratios"], cfg["split"]["seed"])
    filtered = apply_reliability_policy(parts, cfg["reliability"])
    summary = {}
    for before, after in zip(parts, filtered):
        write_manifest(after, os.path.join(out, f"{after.name}.ids"))
        summary[after.name] = {"patients": len(before.patients), "exams": len(before),
                               "exams_after_reliability_filter": len(after)}
    _dump_json(os.path.join(out, "split.json"), {"seed": cfg["split"]["seed"],
                                                 "ratios": list(cfg["split"]["ratios"]),
                                                 "limits": cfg["reliability"], "partitions": summary})
    for name, s in summary.items():
        print(f"{name}: {s['patients']} patients, {s['exams_after_reliability_filter']}/{s['exams']} exams")


def cmd_train(args, cfg):
    out = _out(args)
    tc: TrainConfig = cfg["train"]
    exams = read_container(args.container)
    train = select(exams, read_manifest(os.path.join(args.split_dir, "train.ids")))
    val = select(exams, read_manifest(os.path.join(args.split_dir, "val.ids")))
    ckpt, history = fit(train, val, cfg["model"], tc, cfg["augment"], jobs=args.jobs,
                        progress=lambda r: log.info("epoch %d val_r2 %.4f", r.epoch, r.val_r2))
    with open(os.path.join(out, "checkpoint.ckpt"), "wb") as f:
        f.write(ckpt)
    with open(os.path.join(out, "training_log.csv"), "w", newline="") as f:
        f.write(log_csv(history))
    if not args.no_figures:
        from .evaluation.figures import plot_training_curves

        plot_training_curves([asdict(h) for h in history], os.path.join(out, "training_curves.png"))
    best = max(history, key=lambda h: h.val_r2 if math.isfinite(h.val_r2) else -math.inf)
    print(f"trained {len(history)} epochs; best validation R2 {best.val_r2:.4f} at epoch {best.epoch}")


def cmd_predict(args, cfg):
    out = _out(args)
    model, meta = load_checkpoint(args.checkpoint)
    exams = read_container(args.container)
    ids = read_manifest(args.ids) if args.ids else exam_ids(exams)
    sel = select(exams, ids)
    preds = predict_batch((model, meta), sel, args.modality or meta["modality"])
    path = os.path.join(out, args.name)
    write_predictions(path, ids, preds, meta["target"])
    print(f"wrote {len(ids)} predictions to {path}")


def cmd_ensemble(args, cfg):
    out = _out(args)
    loaded = [read_predictions(p) for p in args.predictions]
    ids, _, target = loaded[0]
    for path, (other, _, t) in zip(args.predictions[1:], loaded[1:]):
        if other != ids or t != target:
            raise ValueError(f"{path} covers different exams or target than {args.predictions[0]}")
    avg = ensemble_average([p for _, p, _ in loaded])
    path = os.path.join(out, args.name)
    write_predictions(path, ids, avg, target)
    print(f"wrote ensemble of {len(loaded)} models to {path}")


def cmd_eval(args, cfg):
    out = _out(args)
    ev = cfg["eval"]
    exams = read_container(args.container)
    ids = read_manifest(args.ids) if args.ids else exam_ids(exams)
    sel = select(exams, ids)
    tags = args.tag or [os.path.splitext(os.path.basename(p))[0] for p in args.predictions]
    if len(tags) != len(args.predictions):
        raise ConfigError([f"{len(tags)} tags given for {len(args.predictions)} prediction files"])
    sector_map = load_sector_map(ev["sector_map"])
    retest = load_retest_ci(ev["retest_ci"])
    reports, sectors = [], {}
    pm = binned = coverage = None
    for tag, path in zip(tags, args.predictions):
        pids, preds, target = read_predictions(path)
        if len(pids) != len(sel):
            raise ValueError(f"{path} has {len(pids)} predictions but the evaluation set has {len(sel)} exams")
        if pids != list(ids):
            raise ValueError(f"{path}: exam ids do not match the evaluation manifest order")
        y = (np.array([[e.vf.md] for e in sel]) if target == "md"
             else np.array([e.vf.thresholds for e in sel], dtype=np.float64))
        reports.append(evaluate(y, preds, target, tag, ev["bootstrap_iterations"], ev["ci_level"], ev["seed"]))
        if target == "thresholds":
            sectors[tag] = sector_metrics(y, preds, sector_map)
            if pm is None:
                pm = pointwise_r_map(y, preds)
                binned = bin_by_measured(y, preds, ev["bin_step"])
                coverage = retest_coverage(binned, retest)
    render_report(reports, pm, binned, coverage, out, sectors, retest, args.split)
    if not args.no_figures:
        from .evaluation.figures import render_figures

        render_figures(out, pm, binned, retest, coverage)
    _dump_json(os.path.join(out, "evaluation.json"), {
        "split": args.split,
        "reports": [asdict(r) for r in reports],
        "pointwise": None if pm is None else {"values": pm.values, "coords": pm.coords},
        "sectors": {k: [asdict(r) for r in v] for k, v in sectors.items()},
        "binned": None if binned is None else asdict(binned),
        "coverage": coverage,
    })
    for r in reports:
        print(f"{r.tag}: R2 {r.r2.value:.3f} r {r.pearson_r.value:.3f} MAE {r.mae.value:.2f} dB "
              f"(baseline {r.baseline_mae:.2f} dB)")
    if coverage:
        print(f"retest coverage: {coverage[0]}/{coverage[1]} whiskers")


def cmd_report(args, cfg):
    out = _out(args)
    reports, pm, sectors, binned, coverage, split = _load_evaluation(args.evaluation)
    retest = load_retest_ci(cfg["eval"]["retest_ci"])
    paths = render_report(reports, pm, binned, coverage, out, sectors, retest, split)
    if not args.no_figures:
        from .evaluation.figures import render_figures

        paths += render_figures(out, pm, binned, retest, coverage)
    print("\n".join(paths))


def cmd_gradcheck(args, cfg):
    out = _out(args)
    report = default_check(seed=cfg["train"].seed if cfg["train"] else 0)
    text = "\n".join(report.lines()) + "\n"
    with open(os.path.join(out, "gradcheck.txt"), "w") as f:
        f.write(text)
    print(text, end="")
    return 0 if report.passed else 1


COMMANDS = {
    "synth-gen": cmd_synth_gen, "ingest": cmd_ingest, "split": cmd_split, "train": cmd_train,
    "predict": cmd_predict, "ensemble": cmd_ensemble, "eval": cmd_eval, "report": cmd_report,
    "gradcheck": cmd_gradcheck,
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON run config")
    common.add_argument("--seed", type=int, help="overrides every seed in the config")
    common.add_argument("--out", required=True, help="output directory")
    common.add_argument("--jobs", type=int, default=1, help="worker threads (1 = strictly serial)")
    common.add_argument("--modality", choices=MODALITIES)
    common.add_argument("--target", choices=sorted(TARGET_FLAGS))

    p = argparse.ArgumentParser(prog="octvf", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth-gen", parents=[common], help="generate a synthetic container")
    s.add_argument("--patients", type=int)
    s = sub.add_parser("ingest", parents=[common], help="build a container from vf.csv and images")
    s.add_argument("--vf-csv", required=True)
    s.add_argument("--images", required=True)
    s = sub.add_parser("split", parents=[common], help="patient-level train/val/test manifests")
    s.add_argument("--container", required=True)
    s = sub.add_parser("train", parents=[common], help="fit one model")
    s.add_argument("--container", required=True)
    s.add_argument("--split-dir", required=True, help="directory holding train.ids and val.ids")
    s.add_argument("--no-figures", action="store_true")
    s = sub.add_parser("predict", parents=[common], help="predict with a checkpoint")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--container", required=True)
    s.add_argument("--ids", help="manifest of exams to predict (default: all)")
    s.add_argument("--name", default="predictions.csv")
    s = sub.add_parser("ensemble", parents=[common], help="average prediction files")
    s.add_argument("--predictions", nargs="+", required=True)
    s.add_argument("--name", default="predictions.csv")
    s = sub.add_parser("eval", parents=[common], help="metrics, sectors, pointwise map, binned whiskers")
    s.add_argument("--container", required=True)
    s.add_argument("--ids", help="evaluation manifest (default: all exams)")
    s.add_argument("--predictions", nargs="+", required=True)
    s.add_argument("--tag", nargs="+")
    s.add_argument("--split", default="test", choices=("validation", "test"))
    s.add_argument("--no-figures", action="store_true")
    s = sub.add_parser("report", parents=[common], help="re-render tables and figures from evaluation.json")
    s.add_argument("--evaluation", required=True)
    s.add_argument("--no-figures", action="store_true")
    sub.add_parser("gradcheck", parents=[common], help="finite-difference gradient check")
    return p


def _error(kind: str, message: str, details: list[str] | None = None) -> None:
    payload = {"error": kind, "message": message}
    if details:
        payload["details"] = details
    print(json.dumps(payload), file=sys.stderr)


def main(argv: Sequence[str] | None = None) -> int:
    logging.basicConfig(level=os.environ.get("OCTVF_LOG", "WARNING").upper(),
                        format="%(levelname)s %(name)s: %(message)s")
    args = build_parser().parse_args(argv)
    try:
        cfg = load_config(args)
        rc = COMMANDS[args.command](args, cfg)
        return 0 if rc is None else rc
    except ConfigError as exc:
        _error("config", "invalid configuration", exc.problems)
        return 2
    except (OSError, ValueError, KeyError, FloatingPointError) as exc:
        _error(type(exc).__name__, str(exc))
        return 1


if __name__ == "__main__":
    sys.exit(main())
