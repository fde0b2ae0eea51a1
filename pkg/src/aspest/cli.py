"""Command-line entry point.

Subcommands::

    aspest run <config.yaml>        full experiment, results in --out-dir
    aspest sweep <config.yaml>      budget grid over several methods/acquisitions
    aspest gen-data <spec.yaml>     materialize splits (CSV) and a manifest
    aspest metrics <scores.csv>     evaluate an external score dump

On failure a one-line JSON error record is printed to stderr and the exit
code is 2 for invalid input and 1 for anything else.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import yaml

from . import metrics as M
from .data import write_csv_dataset
from .exceptions import AspestError, ConfigurationError, ExperimentError, IngestionError
from .harness import (
    DatasetSection,
    _build_section,
    build_data,
    export_results,
    export_sweep,
    parse_config,
    run_experiment,
    run_sweep,
)

log = logging.getLogger("aspest")


def _int_list(text: str) -> list[int]:
    try:
        return [int(t) for t in text.split(",") if t.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}")


def _str_list(text: str) -> list[str]:
    return [t.strip() for t in text.split(",") if t.strip()]


def _load_config(args):
    cfg = parse_config(args.config)
    if args.seeds:
        cfg.seeds = args.seeds
    if args.budgets:
        cfg.budgets = args.budgets
    if args.threads:
        cfg.threads = args.threads
    if args.deterministic:
        cfg.threads = 1
    return cfg


def _out_dir(args, cfg=None) -> Path:
    if args.out_dir:
        return Path(args.out_dir)
    if cfg is not None and cfg.out_dir:
        return Path(cfg.out_dir)
    return Path("results")


def cmd_run(args) -> dict:
    cfg = _load_config(args)
    record = run_experiment(cfg)
    out = _out_dir(args, cfg)
    export_results(record, out)
    return {"status": "ok", "config_hash": record.config_hash, "out_dir": str(out),
            "runs": len(record.runs)}


def cmd_sweep(args) -> dict:
    cfg = _load_config(args)
    records = run_sweep(cfg, args.methods, args.acquisitions)
    out = _out_dir(args, cfg)
    export_sweep(records, out, std=cfg.metrics.std)
    return {"status": "ok", "out_dir": str(out),
            "experiments": [f"{r.method}_{r.acquisition}" for r in records]}


def cmd_gen_data(args) -> dict:
    text = Path(args.spec).read_text()
    spec = yaml.safe_load(text) or {}
    if not isinstance(spec, dict):
        raise ConfigurationError("data spec must be a mapping")
    # accept either a bare dataset section or a full experiment config
    section = _build_section(DatasetSection, spec.get("dataset", spec), "dataset")
    data = build_data(section)
    out = _out_dir(args)
    out.mkdir(parents=True, exist_ok=True)
    for name, ds in (("train", data.train), ("val", data.val), ("test", data.test)):
        write_csv_dataset(ds, out / f"{name}.csv")
    if data.manifest is not None:
        data.manifest.to_json(out / "manifest.json")
    else:
        (out / "manifest.json").write_text(json.dumps(
            {"params": section.to_canonical(), "sizes": [len(data.train), len(data.val),
                                                         len(data.test)]},
            sort_keys=True) + "\n")
    return {"status": "ok", "out_dir": str(out), "fingerprint": data.fingerprint(),
            "sizes": {"train": len(data.train), "val": len(data.val), "test": len(data.test)}}


def read_scores_csv(path) -> M.EvalFrame:
    """Read ``score`` plus either ``correct`` or ``prediction``/``label`` columns.

    An optional ``selected`` column (0/1) marks actively labeled points.
    """
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        cols = set(reader.fieldnames or [])
        rows = list(reader)
    if "score" not in cols:
        raise IngestionError(f"{path}: missing 'score' column")
    if not rows:
        raise IngestionError(f"{path}: no data rows")

    def column(name, conv):
        out = []
        for i, row in enumerate(rows, start=2):
            try:
                out.append(conv(row[name]))
            except (TypeError, ValueError):
                raise IngestionError(f"{path}: row {i}: bad value {row[name]!r} in {name!r}")
        return np.array(out)

    def flag(v):
        v = v.strip().lower()
        if v in ("1", "true", "t", "yes"):
            return True
        if v in ("0", "false", "f", "no"):
            return False
        raise ValueError(v)

    scores = column("score", float)
    if "correct" in cols:
        correct = column("correct", flag)
    elif {"prediction", "label"} <= cols:
        correct = column("prediction", str) == column("label", str)
    else:
        raise IngestionError(f"{path}: need a 'correct' column or 'prediction' and 'label'")
    selected = column("selected", flag) if "selected" in cols else None
    return M.EvalFrame(scores, correct, selected)


def cmd_metrics(args) -> dict:
    frame = read_scores_csv(args.scores)
    bundle = M.metric_bundle(frame, args.target_accuracy, args.target_coverage)
    if args.out_dir:
        out = Path(args.out_dir)
        out.mkdir(parents=True, exist_ok=True)
        M.write_curve_csv(M.accuracy_coverage_curve(frame), out / "curve.csv")
        (out / "metrics.json").write_text(json.dumps(bundle, sort_keys=True, indent=1) + "\n")
    return {"status": "ok", "n": frame.n, "n_selected": frame.n_selected, "metrics": bundle}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="aspest",
                                     description="Active selective prediction experiments")
    parser.add_argument("-v", "--verbose", action="count", default=0)
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--out-dir", help="output directory")
        p.add_argument("--seeds", type=_int_list, help="comma-separated seeds to run")
        p.add_argument("--budgets", type=_int_list, help="comma-separated label budgets")
        p.add_argument("--threads", type=int, help="parallel member jobs")
        p.add_argument("--deterministic", action="store_true",
                       help="single-threaded, bit-reproducible mode")

    p = sub.add_parser("run", help="run one experiment config")
    p.add_argument("config")
    common(p)
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("sweep", help="run a budget grid for several methods")
    p.add_argument("config")
    common(p)
    p.add_argument("--methods", type=_str_list, help="e.g. sr,de,aspest")
    p.add_argument("--acquisitions", type=_str_list, help="e.g. margin,uniform")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("gen-data", help="write dataset splits and a manifest")
    p.add_argument("spec")
    p.add_argument("--out-dir")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("metrics", help="evaluate a CSV of scores")
    p.add_argument("scores")
    p.add_argument("--out-dir")
    p.add_argument("--target-accuracy", type=float, default=0.8)
    p.add_argument("--target-coverage", type=float, default=0.8)
    p.set_defaults(func=cmd_metrics)
    return parser


def _error_record(exc: BaseException) -> dict:
    rec = {"status": "error", "error": type(exc).__name__, "message": str(exc)}
    if isinstance(exc, ExperimentError) and exc.config_hash:
        rec["config_hash"] = exc.config_hash
    return rec


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2),
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        result = args.func(args)
    except (ConfigurationError, IngestionError, FileNotFoundError) as exc:
        print(json.dumps(_error_record(exc)), file=sys.stderr)
        return 2
    except (AspestError, OSError, ValueError, RuntimeError) as exc:
        print(json.dumps(_error_record(exc)), file=sys.stderr)
        return 1
    print(json.dumps(result, sort_keys=True, default=str))
    return 0


if __name__ == "__main__":
    sys.exit(main())
