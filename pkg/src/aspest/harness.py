"""Config-driven experiments: parsing, running, aggregation and export.

A config is a YAML mapping with these sections (all optional except
``method``)::

    method: aspest            # sr | de | aspest
    acquisition: margin       # ignored (with a warning) for aspest
    budgets: [0, 100, 200]
    seeds: [0, 1, 2]
    dataset: {kind: synthetic, ...}   # or kind: csv with path/label_column
    model: {hidden: [64, 32], ...}
    source_training: {epochs: 200, ...}
    fine_tune: {learning_rate: 0.001, ...}
    aspest: {n_members: 5, ...}
    metrics: {target_accuracy: 0.8, target_coverage: 0.8, std: population}

The dataset split and the source model depend only on ``dataset.seed`` and
``model.seed``; the run seeds drive member initialization streams, batch
order and acquisition randomness.
"""

from __future__ import annotations

import csv
import hashlib
import json
import logging
import math
import time
import warnings
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Any, Iterable, Optional, Sequence

import numpy as np
import yaml

from . import metrics as M
from .acquisition import ACQUISITIONS
from .data import (
    Dataset,
    SplitManifest,
    load_csv_dataset,
    lof_shift_split,
    standardize,
    synth_gaussian_shift,
)
from .exceptions import AspestError, ConfigurationError, ExperimentError
from .loop import AspestConfig, Oracle, RunResult, run_aspest, run_de, run_sr, source_train
from .nn import ACTIVATIONS, MlpModel, TrainConfig, mlp_forward

log = logging.getLogger(__name__)

METHOD_NAMES = ("sr", "de", "aspest")
STD_CONVENTIONS = ("population", "sample")
DATASET_KINDS = ("synthetic", "csv")


@dataclass
class DatasetSection:
    kind: str = "synthetic"
    seed: int = 0
    standardize: bool = True
    # synthetic
    n_classes: int = 6
    n_features: int = 8
    n_source: int = 3000
    n_target: int = 1000
    shift_magnitude: float = 2.0
    class_separation: float = 2.5
    rotation: float = 0.35
    # csv + LOF split
    path: Optional[str] = None
    label_column: str = "target"
    delimiter: str = ","
    drop_columns: list = field(default_factory=list)
    contamination: float = 0.2
    lof_k: int = 20
    # None picks 0.2 for synthetic data and 0.125 for csv data
    val_fraction: Optional[float] = None

    def __post_init__(self):
        if self.kind not in DATASET_KINDS:
            raise ConfigurationError(f"dataset.kind must be one of {DATASET_KINDS}, got {self.kind!r}")
        if self.kind == "csv" and not self.path:
            raise ConfigurationError("dataset.path is required when dataset.kind is 'csv'")
        if self.val_fraction is None:
            self.val_fraction = 0.2 if self.kind == "synthetic" else 0.125

    def to_canonical(self) -> dict:
        d = asdict(self)
        irrelevant = (("path", "label_column", "delimiter", "drop_columns", "contamination",
                       "lof_k") if self.kind == "synthetic" else
                      ("n_classes", "n_features", "n_source", "n_target", "shift_magnitude",
                       "class_separation", "rotation"))
        for key in irrelevant:
            d.pop(key)
        return d


@dataclass
class ModelSection:
    hidden: list = field(default_factory=lambda: [64, 32])
    activation: str = "relu"
    dropout: float = 0.0
    l2: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.activation not in ACTIVATIONS:
            raise ConfigurationError(f"model.activation must be one of {ACTIVATIONS}")
        self.hidden = [int(h) for h in self.hidden]
        if any(h <= 0 for h in self.hidden):
            raise ConfigurationError("model.hidden sizes must be positive")


@dataclass
class SourceTrainingSection:
    epochs: int = 200
    learning_rate: float = 1e-3
    batch_size: int = 128
    optimizer: str = "sgd"
    momentum: float = 0.0

    def __post_init__(self):
        if self.optimizer not in ("sgd", "adam"):
            raise ConfigurationError(f"source_training.optimizer must be 'sgd' or 'adam'")


@dataclass
class MetricsSection:
    target_accuracy: float = 0.8
    target_coverage: float = 0.8
    std: str = "population"

    def __post_init__(self):
        if self.std not in STD_CONVENTIONS:
            raise ConfigurationError(f"metrics.std must be one of {STD_CONVENTIONS}")


@dataclass
class ExperimentConfig:
    method: str
    acquisition: str = "margin"
    budgets: list = field(default_factory=lambda: [0])
    seeds: list = field(default_factory=lambda: [0])
    n_rounds: int = 10
    n_members: int = 5
    n_source_steps: int = 1000
    temperature: float = 1.0
    dataset: DatasetSection = field(default_factory=DatasetSection)
    model: ModelSection = field(default_factory=ModelSection)
    source_training: SourceTrainingSection = field(default_factory=SourceTrainingSection)
    fine_tune: TrainConfig = field(default_factory=TrainConfig)
    aspest: AspestConfig = field(default_factory=AspestConfig)
    metrics: MetricsSection = field(default_factory=MetricsSection)
    name: str = "experiment"
    # execution only, excluded from the hash
    threads: int = 1
    out_dir: Optional[str] = None

    def aspest_config(self) -> AspestConfig:
        return self.aspest

    def to_dict(self) -> dict:
        return asdict(self)

    def canonical(self) -> dict:
        """Semantically meaningful fields only."""
        d = asdict(self)
        for key in ("threads", "out_dir", "name"):
            d.pop(key)
        d["dataset"] = self.dataset.to_canonical()
        if self.method == "aspest":
            # selection is fixed; the baseline-only knobs do not matter
            for key in ("acquisition", "temperature", "n_members", "n_source_steps", "n_rounds"):
                d.pop(key)
            d["fine_tune"].pop("lam")
        else:
            d.pop("aspest")
            if self.method == "sr":
                d.pop("n_members")
                d.pop("n_source_steps")
            if self.acquisition != "clue":
                d.pop("temperature")
        d["budgets"] = sorted(d["budgets"])
        return d

    def config_hash(self) -> str:
        blob = json.dumps(self.canonical(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()[:16]

    @property
    def rounds(self) -> int:
        return self.aspest.n_rounds if self.method == "aspest" else self.n_rounds


_SECTIONS = {
    "dataset": DatasetSection,
    "model": ModelSection,
    "source_training": SourceTrainingSection,
    "fine_tune": TrainConfig,
    "aspest": AspestConfig,
    "metrics": MetricsSection,
}


def _build_section(cls, data, where: str):
    if data is None:
        data = {}
    if not isinstance(data, dict):
        raise ConfigurationError(f"section {where!r} must be a mapping")
    known = {f.name for f in fields(cls)}
    unknown = sorted(set(data) - known)
    if unknown:
        raise ConfigurationError(f"unknown key(s) in {where!r}: {', '.join(unknown)}")
    try:
        return cls(**data)
    except ConfigurationError as exc:
        raise ConfigurationError(f"{where}: {exc}") from None
    except TypeError as exc:
        raise ConfigurationError(f"{where}: {exc}") from None


def config_from_dict(data: dict) -> ExperimentConfig:
    """Validate a config mapping and fill every unset field with its default."""
    if not isinstance(data, dict):
        raise ConfigurationError("config must be a mapping")
    data = dict(data)
    if "method" not in data:
        raise ConfigurationError("config needs a 'method' key")
    known = {f.name for f in fields(ExperimentConfig)}
    unknown = sorted(set(data) - known)
    if unknown:
        raise ConfigurationError(f"unknown top-level key(s): {', '.join(unknown)}")

    method = data["method"]
    if method not in METHOD_NAMES:
        raise ConfigurationError(f"method must be one of {METHOD_NAMES}, got {method!r}")
    if method == "aspest" and "acquisition" in data:
        warnings.warn("aspest always selects by checkpoint-ensemble margin; "
                      "the acquisition field is ignored", UserWarning, stacklevel=3)
        data["acquisition"] = "margin"
    acq = data.get("acquisition", "margin")
    if acq not in ACQUISITIONS:
        raise ConfigurationError(f"acquisition must be one of {ACQUISITIONS}, got {acq!r}")

    for key, cls in _SECTIONS.items():
        data[key] = _build_section(cls, data.get(key), key)

    for key in ("budgets", "seeds"):
        val = data.get(key, [0])
        if isinstance(val, int):
            val = [val]
        if not isinstance(val, list) or not val or not all(isinstance(v, int) for v in val):
            raise ConfigurationError(f"{key} must be a non-empty list of integers")
        data[key] = list(val)
    try:
        cfg = ExperimentConfig(**data)
    except TypeError as exc:
        raise ConfigurationError(str(exc)) from None
    if cfg.n_rounds <= 0 or cfg.n_members <= 0 or cfg.n_source_steps < 0:
        raise ConfigurationError("n_rounds and n_members must be positive, n_source_steps >= 0")
    if cfg.temperature <= 0:
        raise ConfigurationError("temperature must be positive")
    if len(set(cfg.seeds)) != len(cfg.seeds):
        raise ConfigurationError("seeds must be distinct")
    T = cfg.rounds
    for m in cfg.budgets:
        if m < 0:
            raise ConfigurationError(f"budget {m} is negative")
        if 0 < m < T:
            raise ConfigurationError(
                f"budget M={m} is smaller than the number of rounds T={T}; "
                f"each round needs at least one label")
    return cfg


def parse_config(path) -> ExperimentConfig:
    """Read and validate a YAML experiment config."""
    text = Path(path).read_text()
    try:
        data = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ConfigurationError(f"{path}: malformed YAML: {exc}") from None
    return config_from_dict(data if data is not None else {})


# --- data and source model --------------------------------------------------

@dataclass
class PreparedData:
    train: Dataset
    val: Dataset
    test: Dataset
    manifest: Optional[SplitManifest] = None

    def fingerprint(self) -> str:
        h = hashlib.sha256()
        for ds in (self.train, self.val, self.test):
            h.update(ds.fingerprint().encode())
        return h.hexdigest()[:16]


def build_data(section: DatasetSection) -> PreparedData:
    """Materialize train/val/test splits, standardized on the source train split."""
    manifest = None
    if section.kind == "synthetic":
        train, val, test = synth_gaussian_shift(
            section.n_classes, section.n_features, section.n_source, section.n_target,
            section.shift_magnitude, section.seed, class_separation=section.class_separation,
            rotation=section.rotation, val_fraction=section.val_fraction)
    else:
        full = load_csv_dataset(section.path, section.label_column, delimiter=section.delimiter,
                                drop_columns=section.drop_columns)
        train, val, test, manifest = lof_shift_split(full, section.contamination, section.lof_k,
                                                     section.val_fraction, section.seed)
    if section.standardize:
        (train, val, test), _ = standardize(train, [train, val, test])
    return PreparedData(train, val, test, manifest)


def build_source_model(cfg: ExperimentConfig, data: PreparedData) -> MlpModel:
    st = cfg.source_training
    return source_train(data.train.X, data.train.y, data.train.n_classes, tuple(cfg.model.hidden),
                        st.epochs, st.learning_rate, st.batch_size, cfg.model.seed, st.optimizer,
                        cfg.model.dropout, cfg.model.l2, cfg.model.activation, st.momentum)


def _accuracy(model: MlpModel, ds: Dataset) -> float:
    return float((mlp_forward(model, ds.X)[0].argmax(axis=1) == ds.y).mean())


# --- running ----------------------------------------------------------------

@dataclass
class RunRecord:
    seed: int
    budget: int
    metrics: dict
    labeled_indices: list
    rounds: list
    curve: M.Curve = field(repr=False)

    def to_json(self) -> dict:
        return {"seed": self.seed, "budget": self.budget, "metrics": self.metrics,
                "labeled_indices": self.labeled_indices, "n_labeled": len(self.labeled_indices)}


@dataclass
class ResultRecord:
    config: dict
    config_hash: str
    dataset_hash: str
    method: str
    acquisition: str
    source_metrics: dict
    runs: list
    aggregates: list
    runtime_seconds: float = 0.0

    def to_json(self) -> dict:
        """Everything except the runtime, so equal runs serialize identically."""
        return {
            "config": self.config,
            "config_hash": self.config_hash,
            "dataset_hash": self.dataset_hash,
            "method": self.method,
            "acquisition": self.acquisition,
            "source_metrics": self.source_metrics,
            "runs": [r.to_json() for r in self.runs],
            "aggregates": [asdict(a) for a in self.aggregates],
        }

    def values(self, metric: str, budget: int) -> list:
        return [r.metrics[metric] for r in self.runs if r.budget == budget]

    def mean(self, metric: str, budget: int) -> float:
        vals = [v for v in self.values(metric, budget) if v is not None]
        return float(np.mean(vals)) if vals else math.nan


def run_single(cfg: ExperimentConfig, data: PreparedData, source_model: MlpModel, seed: int,
               budget: int, threads: int = 1) -> tuple[RunResult, RunRecord]:
    """One (seed, budget) cell of the experiment grid."""
    ft = cfg.fine_tune
    t_a, t_c = cfg.metrics.target_accuracy, cfg.metrics.target_coverage
    Xs, ys, test = data.train.X, data.train.y, data.test
    oracle = Oracle(test.y, budget)
    if cfg.method == "sr":
        result = run_sr(source_model, Xs, ys, test.X, oracle, cfg.acquisition, budget,
                        cfg.n_rounds, ft, seed, cfg.temperature, t_a, t_c)
    elif cfg.method == "de":
        result = run_de(source_model, Xs, ys, test.X, oracle, cfg.acquisition, budget,
                        cfg.n_rounds, cfg.n_members, cfg.n_source_steps, ft, seed, threads,
                        cfg.temperature, t_a, t_c)
    else:
        result = run_aspest(source_model, Xs, ys, test.X, oracle, cfg.aspest, budget, ft, seed,
                            threads, t_a, t_c)
    frame = result.frame(test.y)
    record = RunRecord(seed, budget, M.metric_bundle(frame, t_a, t_c),
                       result.selection.selected.tolist(),
                       [r.to_json() for r in result.rounds], M.accuracy_coverage_curve(frame))
    return result, record


def run_experiment(cfg: ExperimentConfig, threads: Optional[int] = None,
                   data: Optional[PreparedData] = None,
                   source_model: Optional[MlpModel] = None) -> ResultRecord:
    """Run every (seed, budget) pair of ``cfg`` and aggregate the metrics.

    ``data`` and ``source_model`` may be passed in to share them between
    experiments on the same dataset.  Failures are re-raised as
    :class:`ExperimentError` carrying the config hash.
    """
    chash = cfg.config_hash()
    threads = cfg.threads if threads is None else threads
    start = time.perf_counter()
    try:
        data = data or build_data(cfg.dataset)
        source_model = source_model or build_source_model(cfg, data)
        source_metrics = {"source_val_accuracy": _accuracy(source_model, data.val),
                          "target_accuracy": _accuracy(source_model, data.test)}
        runs = []
        for seed in cfg.seeds:
            for budget in cfg.budgets:
                log.info("[%s] %s seed=%d M=%d", chash, cfg.method, seed, budget)
                runs.append(run_single(cfg, data, source_model, seed, budget, threads)[1])
    except ExperimentError:
        raise
    except (AspestError, ValueError, RuntimeError, OSError) as exc:
        raise ExperimentError(f"[config {chash}] {type(exc).__name__}: {exc}", chash) from exc

    record = ResultRecord(cfg.to_dict(), chash, data.fingerprint(), cfg.method, cfg.acquisition,
                          source_metrics, runs, [], time.perf_counter() - start)
    record.aggregates = aggregate_runs([record], std=cfg.metrics.std)
    return record


# --- aggregation ------------------------------------------------------------

@dataclass
class SummaryRow:
    method: str
    acquisition: str
    budget: int
    metric: str
    mean: Optional[float]
    std: Optional[float]
    n: int

    def formatted(self) -> tuple[str, str]:
        """Mean and std as percentages with two decimals."""
        return format_percent(self.mean), format_percent(self.std)


def format_percent(value: Optional[float]) -> str:
    if value is None or (isinstance(value, float) and math.isnan(value)):
        return ""
    return f"{float(value) * 100:.2f}"


def _std(values: Sequence[float], convention: str) -> float:
    if len(values) < 2:
        return 0.0
    return float(np.std(values, ddof=0 if convention == "population" else 1))


def _flat_entries(records: Iterable) -> list[dict]:
    out = []
    for rec in records:
        if isinstance(rec, ResultRecord):
            for run in rec.runs:
                out.append({"method": rec.method, "acquisition": rec.acquisition,
                            "budget": run.budget, "dataset_hash": rec.dataset_hash,
                            "metrics": run.metrics})
        else:
            out.append(dict(rec))
    return out


def aggregate_runs(records: Iterable, std: str = "population") -> list[SummaryRow]:
    """Mean and std per (method, acquisition, budget, metric).

    ``records`` may hold :class:`ResultRecord` objects or flat mappings with
    keys ``method``, ``acquisition``, ``budget``, ``metrics`` and optionally
    ``dataset_hash``.  Metrics that are undefined for some runs (``None``)
    are averaged over the runs where they are defined.
    """
    if std not in STD_CONVENTIONS:
        raise ConfigurationError(f"std must be one of {STD_CONVENTIONS}")
    groups: dict[tuple, list[dict]] = {}
    for entry in _flat_entries(records):
        key = (entry["method"], entry["acquisition"], int(entry["budget"]))
        groups.setdefault(key, []).append(entry)
    rows = []
    for key in sorted(groups):
        entries = groups[key]
        hashes = {e.get("dataset_hash") for e in entries} - {None}
        if len(hashes) > 1:
            raise ConfigurationError(
                f"group {key} mixes runs from different datasets: {sorted(hashes)}")
        metric_names = list(dict.fromkeys(m for e in entries for m in e["metrics"]))
        for metric in metric_names:
            vals = [e["metrics"].get(metric) for e in entries]
            vals = [float(v) for v in vals if v is not None]
            mean = float(np.mean(vals)) if vals else None
            rows.append(SummaryRow(*key, metric, mean, _std(vals, std) if vals else None,
                                   len(vals)))
    return rows


# --- export -----------------------------------------------------------------

def _json_default(obj: Any):
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, np.floating):
        return float(obj)
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    raise TypeError(f"cannot serialize {type(obj).__name__}")


def _dump_json(obj, path: Path) -> None:
    path.write_text(json.dumps(obj, sort_keys=True, indent=1, default=_json_default) + "\n")


def write_summary_csv(rows: Sequence[SummaryRow], path) -> None:
    with open(Path(path), "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["method", "acquisition", "budget", "metric", "mean", "std"])
        for row in rows:
            w.writerow([row.method, row.acquisition, row.budget, row.metric, *row.formatted()])


def export_results(record: ResultRecord, out_dir) -> list[Path]:
    """Write results.json, timing.json, summary.csv, curves and round logs.

    Everything except ``timing.json`` is a pure function of the record.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = []

    path = out / "results.json"
    _dump_json(record.to_json(), path)
    written.append(path)

    path = out / "timing.json"
    _dump_json({"config_hash": record.config_hash, "runtime_seconds": record.runtime_seconds},
               path)
    written.append(path)

    path = out / "summary.csv"
    write_summary_csv(record.aggregates, path)
    written.append(path)

    by_seed: dict[int, list] = {}
    for run in record.runs:
        path = out / f"curve_{run.seed}_{run.budget}.csv"
        M.write_curve_csv(run.curve, path)
        written.append(path)
        for entry in run.rounds:
            by_seed.setdefault(run.seed, []).append({"budget": run.budget, **entry})
    for seed in sorted({r.seed for r in record.runs}):
        path = out / f"rounds_{seed}.jsonl"
        with open(path, "w") as fh:
            for entry in by_seed.get(seed, []):
                fh.write(json.dumps(entry, sort_keys=True, default=_json_default) + "\n")
        written.append(path)
    return written


# --- sweeps -----------------------------------------------------------------

def run_sweep(cfg: ExperimentConfig, methods: Optional[Sequence[str]] = None,
              acquisitions: Optional[Sequence[str]] = None,
              threads: Optional[int] = None) -> list[ResultRecord]:
    """Run the budget grid of ``cfg`` for several methods and acquisitions.

    All experiments share one dataset and one source model.  ASPEST is run
    once regardless of ``acquisitions``.
    """
    methods = list(methods or [cfg.method])
    acquisitions = list(acquisitions or [cfg.acquisition])
    for m in methods:
        if m not in METHOD_NAMES:
            raise ConfigurationError(f"unknown method {m!r}")
    for a in acquisitions:
        if a not in ACQUISITIONS:
            raise ConfigurationError(f"unknown acquisition {a!r}")
    data = build_data(cfg.dataset)
    source_model = build_source_model(cfg, data)
    records = []
    for method in methods:
        for acq in (["margin"] if method == "aspest" else acquisitions):
            sub = replace(cfg, method=method, acquisition=acq)
            for m in sub.budgets:
                if 0 < m < sub.rounds:
                    raise ConfigurationError(f"budget M={m} is smaller than T={sub.rounds}")
            records.append(run_experiment(sub, threads, data, source_model))
    return records


def export_sweep(records: Sequence[ResultRecord], out_dir, std: str = "population") -> Path:
    """Export every record into ``<method>_<acquisition>/`` plus a joint summary."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for rec in records:
        export_results(rec, out / f"{rec.method}_{rec.acquisition}")
    path = out / "summary.csv"
    write_summary_csv(aggregate_runs(records, std=std), path)
    return path
