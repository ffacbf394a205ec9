"""Command-line entry point: ``seccrash <subcommand> [--seed N] [--config FILE] [--out DIR] ...``.

Any failure exits non-zero after printing one JSON object on stderr.
"""
from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
import time
from pathlib import Path

import numpy as np
import pandas as pd

log = logging.getLogger("seccrash")

SUBCOMMANDS = ("synth", "identify", "features", "datasets", "train", "evaluate", "ablate", "replay")


class CliError(Exception):
    def __init__(self, kind: str, message: str, status: int = 1):
        super().__init__(message)
        self.kind = kind
        self.status = status


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise CliError("usage", message, 2)


def _require(path: Path, what: str) -> Path:
    if not path.exists():
        raise CliError("missing-input", f"{what} not found: {path}")
    return path


def _out(args) -> Path:
    if not args.out:
        raise CliError("usage", "--out is required")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=1, sort_keys=True, default=float) + "\n")


def experiment_config(args):
    """ExperimentConfig from ``--config`` (key = value lines) and ``--seed``."""
    from .experiment import ExperimentConfig

    cfg = ExperimentConfig()
    if args.config:
        types = {f.name: f.type for f in dataclasses.fields(ExperimentConfig)}
        values = {}
        for lineno, raw in enumerate(_require(Path(args.config), "config").read_text().splitlines(), 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            key, sep, value = (p.strip() for p in line.partition("="))
            if not sep or key not in types:
                raise CliError("config", f"line {lineno}: unknown or malformed entry {raw!r}")
            t = str(types[key])
            if t.startswith("tuple"):
                values[key] = tuple(v.strip() for v in value.split(",") if v.strip())
            else:
                values[key] = int(value) if t == "int" else float(value) if t == "float" else value
        cfg = cfg.with_(**values)
    if getattr(args, "windows", None):
        cfg = cfg.with_(window_count=args.windows)
    if args.seed is not None:
        cfg = cfg.with_(seed=args.seed)
    return cfg


def _load(args):
    from .contour import load_classifications
    from .corpus import load_corpus

    corpus = load_corpus(_require(Path(args.corpus), "corpus directory"))
    classifications = None
    if getattr(args, "classifications", None):
        classifications = load_classifications(_require(Path(args.classifications), "classifications"))
    return corpus, classifications


# --------------------------------------------------------------------------
# Subcommands
# --------------------------------------------------------------------------


def cmd_synth(args) -> dict:
    from .synthgen import ScenarioConfig, generate_corpus, load_config

    cfg = load_config(_require(Path(args.config), "config")) if args.config else ScenarioConfig()
    if args.seed is not None:
        cfg = dataclasses.replace(cfg, seed=args.seed)
    out = _out(args)
    sc = generate_corpus(cfg)
    sc.write(out)
    return {"crashes": len(sc.corpus.crashes), "roles": sc.truth.role_counts(), "out": str(out)}


def cmd_identify(args) -> dict:
    from .contour import classify_corpus
    from .synthgen import GroundTruth, oracle_compare

    corpus, _ = _load(args)
    out = _out(args)
    report = classify_corpus(corpus)
    report.write(out)
    summary = {"counts": report.counts, "secondary_ratio": report.secondary_ratio,
               "gap_histogram": {str(k): v for k, v in report.gap_histogram().items()}}
    truth_path = Path(args.corpus) / "ground_truth.json"
    if truth_path.exists():
        truth = GroundTruth.from_json(truth_path.read_text())
        regions = {k: r.cell_keys() for k, r in report.regions.items()}
        summary["oracle"] = dataclasses.asdict(oracle_compare(truth, report.classifications, regions))
    _write_json(out / "summary.json", summary)
    return summary


def cmd_features(args) -> dict:
    """PC vectors for every crash and ST vectors for every detected secondary."""
    from .contour import SECONDARY
    from .features import ExtractionRejected, FeatureExtractor, pc_feature_names, st_feature_names

    corpus, classes = _load(args)
    if classes is None:
        raise CliError("missing-input", "--classifications is required")
    cfg = experiment_config(args)
    out = _out(args)
    ex = FeatureExtractor(corpus)
    by_id = corpus.crash_by_id()
    pc_rows, st_rows, rejected = [], [], 0
    for c in classes:
        crash = by_id[c.crash_id]
        seg = corpus.crash_segment(crash)
        try:
            pc_rows.append([c.crash_id, c.crash_class, *ex.pc_vector(seg, crash.timestamp).values])
        except ExtractionRejected:
            rejected += 1
        if c.crash_class == SECONDARY:
            prim = by_id[c.paired_primary_id]
            try:
                vec = ex.st_vector(seg, corpus.crash_segment(prim), crash.timestamp, cfg.window_count)
                st_rows.append([c.crash_id, c.paired_primary_id, *vec.values])
            except ExtractionRejected:
                rejected += 1
    pd.DataFrame(pc_rows, columns=["crash_id", "class", *pc_feature_names()]).to_csv(
        out / "pc_features.csv", index=False, float_format="%.17g")
    pd.DataFrame(st_rows, columns=["crash_id", "primary_id", *st_feature_names(cfg.window_count)]).to_csv(
        out / "st_features.csv", index=False, float_format="%.17g")
    return {"pc_vectors": len(pc_rows), "st_vectors": len(st_rows), "rejected": rejected}


def cmd_datasets(args) -> dict:
    from .experiment import prepare, write_datasets

    corpus, classes = _load(args)
    if classes is None:
        raise CliError("missing-input", "--classifications is required")
    cfg = experiment_config(args)
    out = _out(args)
    data = prepare(corpus, classes, cfg)
    write_datasets(data, out)
    return {k: {"positives": d.counts()[0], "negatives": d.counts()[1], "train": len(data.splits[k].train),
                "test": len(data.splits[k].test), "rejected": d.rejected} for k, d in data.datasets.items()}


def cmd_train(args) -> dict:
    from .experiment import from_files, run_experiment

    src = _require(Path(args.datasets), "datasets directory")
    for kind in ("PC", "SC1", "SC2"):
        _require(src / kind / "features.csv", f"{kind} dataset (run `datasets` first)")
    cfg = experiment_config(args)
    data = from_files(src)
    cfg = cfg.with_(window_count=data.window_count)
    out = _out(args)
    result = run_experiment(data, cfg)
    result.bundle.save(out)
    summary = result.summary()
    _write_json(out / "train_report.json", summary)
    return {k: round(v["auc"], 4) for k, v in summary.items()}


def cmd_evaluate(args) -> dict:
    from .ensemble import ModelBundle
    from .evaluation import write_metrics
    from .experiment import from_files
    from .plotting import roc_figure

    bundle = ModelBundle.load(_require(Path(args.bundle), "bundle directory"))
    data = from_files(_require(Path(args.test), "test datasets directory"))
    out = _out(args)
    from .experiment import evaluate_bundle

    reports, curves = evaluate_bundle(data, bundle)
    write_metrics(reports, out / "metrics.json")
    roc_figure(curves, out / "roc.png", "held-out ROC")
    return {k: round(r.auc, 4) for k, r in reports.items() if r.auc is not None}


def cmd_ablate(args) -> dict:
    from .evaluation import ablation_features, ablation_windows, subgroup_eval
    from .plotting import ablation_figure

    corpus, classes = _load(args)
    if classes is None:
        raise CliError("missing-input", "--classifications is required")
    cfg = experiment_config(args)
    out = _out(args)
    if args.what == "windows":
        W = [int(w) for w in args.window_values.split(",")]
        table = ablation_windows(corpus, classes, W, cfg)
        x = "window_count"
    elif args.what == "features":
        table = ablation_features(corpus, classes, config=cfg)
        x = "features"
    else:
        x = args.what.split("-", 1)[1]
        table = subgroup_eval(corpus, classes, x, cfg)
    table.to_csv(out / f"ablation_{args.what}.csv", index=False, float_format="%.6f")
    ablation_figure(table, x, out / f"ablation_{args.what}.png", f"AUC by {x}")
    return json.loads(table.to_json(orient="records"))


def cmd_replay(args) -> dict:
    from .ensemble import ModelBundle
    from .pipeline import replay

    corpus, _ = _load(args)
    bundle = ModelBundle.load(_require(Path(args.bundle), "bundle directory"))
    out = _out(args)
    t = time.perf_counter()
    result = replay(corpus, bundle, args.threshold, speed=args.speed)
    result.write(out / "alerts.jsonl")
    upd = np.array(result.update_seconds) if result.update_seconds else np.zeros(1)
    summary = {"sessions": len(result.sessions), "updates": len(result.update_seconds), "alerts": len(result.alerts),
               "max_update_seconds": float(upd.max()), "mean_update_seconds": float(upd.mean()),
               "wall_seconds": time.perf_counter() - t}
    _write_json(out / "replay_summary.json", {k: v for k, v in summary.items() if "seconds" not in k})
    return summary


# --------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="seccrash", description="Secondary-crash identification and likelihood prediction")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)

    def add(name, help_):
        sp = sub.add_parser(name, help=help_)
        sp.add_argument("--seed", type=int, default=None)
        sp.add_argument("--config", default=None, help="key = value file")
        sp.add_argument("--out", default=None, help="output directory")
        return sp

    add("synth", "generate a synthetic corpus with ground truth")
    sp = add("identify", "classify crashes into primary/secondary/normal")
    sp.add_argument("--corpus", required=True)
    for name, help_ in (("features", "extract PC and window feature vectors"),
                        ("datasets", "build PC/SC1/SC2 datasets with splits")):
        sp = add(name, help_)
        sp.add_argument("--corpus", required=True)
        sp.add_argument("--classifications", required=True)
        sp.add_argument("--windows", type=int, default=None)
    sp = add("train", "train ensembles, calibrate thresholds, write a bundle")
    sp.add_argument("--datasets", required=True)
    sp = add("evaluate", "metrics and ROC of a bundle on held-out data")
    sp.add_argument("--bundle", required=True)
    sp.add_argument("--test", required=True)
    sp = add("ablate", "window, feature-group or subgroup ablation")
    sp.add_argument("--corpus", required=True)
    sp.add_argument("--classifications", required=True)
    sp.add_argument("--what", choices=("windows", "features", "subgroup-weekday", "subgroup-freeway"),
                    default="windows")
    sp.add_argument("--window-values", default="1,2,3,4,5,6")
    sp.add_argument("--windows", type=int, default=None)
    sp = add("replay", "replay a corpus through the monitoring loop")
    sp.add_argument("--corpus", required=True)
    sp.add_argument("--bundle", required=True)
    sp.add_argument("--threshold", type=float, default=0.9)
    sp.add_argument("--speed", type=float, default=0.0, help="simulated minutes per wall second (0 = unthrottled)")
    return p


def main(argv=None) -> int:
    argv = sys.argv[1:] if argv is None else argv
    command = None
    try:
        args = build_parser().parse_args(argv)
        command = args.command
        if command is None:
            raise CliError("usage", f"a subcommand is required: {', '.join(SUBCOMMANDS)}", 2)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        summary = globals()[f"cmd_{command}"](args)
        print(json.dumps(summary, sort_keys=True, default=float))
        return 0
    except CliError as err:
        status, kind, message = err.status, err.kind, str(err)
    except FileNotFoundError as err:
        status, kind, message = 1, "missing-input", str(err)
    except Exception as err:  # noqa: BLE001 - every failure becomes one machine-readable line
        status, kind, message = 1, type(err).__name__, str(err)
    sys.stderr.write(json.dumps({"error": kind, "message": message, "subcommand": command}) + "\n")
    return status


if __name__ == "__main__":
    sys.exit(main())
