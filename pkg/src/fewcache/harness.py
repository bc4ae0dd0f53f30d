"""Reproducible experiment runner.

One experiment = a grid of (bag shot, instance shot) cells, each repeated
over several seeds: sample a split, build both branches, train jointly,
pick the fusion weight on the labeled instances, evaluate on the held-out
test set. Cell failures are recorded without aborting sibling cells.

Result files are deterministic given (config, base seed): timestamps and
wall-clock live in a separate metadata file so record/report files are
content-hashable.
"""

from __future__ import annotations

import csv
import hashlib
import json
import platform
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Optional

import numpy as np

from .cache_branch import DEFAULT_BETA, build_cache, retrieve
from .encoders import EmbeddingSource, resolve_source
from .errors import MissingInstanceLabelsError, UndefinedMetricError
from .fusion_eval import (
    AUCResult,
    EvalReport,
    alpha_grid,
    bag_pool,
    fuse,
    instance_auc,
    sweep_alpha,
)
from .prior_branch import (
    DEFAULT_TAU,
    PROTOTYPE,
    TOY_ENCODER,
    prior_from_features,
    prior_predict,
    prior_toy_encoder,
)
from .sampler import FewShotSpec, sample_split
from .trainer import TrainConfig, train

DEFAULT_BAG_SHOTS = (1, 2, 4, 8, 16)
DEFAULT_INSTANCE_SHOTS = (16,)
DEFAULT_REPEATS = 5


@dataclass
class ExperimentConfig:
    source: dict
    bag_shots: tuple[int, ...] = DEFAULT_BAG_SHOTS
    instance_shots: tuple[int, ...] = DEFAULT_INSTANCE_SHOTS
    coreset_fraction: float = 0.10
    coreset_cap: int = 1000
    per_bag: bool = False
    train: TrainConfig = field(default_factory=TrainConfig)
    cache_beta: float = DEFAULT_BETA
    prior_mode: str = PROTOTYPE
    prior_tau: float = DEFAULT_TAU
    toy_tokens_per_class: int = 4
    toy_token_width: int = 16
    toy_num_learnable: int = 10
    toy_seed: int = 0
    pooling: str = "mean"
    grid_points: int = 101
    cache_only: bool = False
    prior_only: bool = False
    freeze_keys: bool = False
    freeze_value_logits: bool = False
    repeats: int = DEFAULT_REPEATS
    base_seed: int = 0

    def __post_init__(self):
        if self.repeats < 1:
            raise ValueError("repeats must be >= 1")
        if self.cache_only and self.prior_only:
            raise ValueError("cache_only and prior_only are mutually exclusive")

    def to_dict(self) -> dict:
        doc = asdict(self)
        doc["bag_shots"] = list(self.bag_shots)
        doc["instance_shots"] = list(self.instance_shots)
        doc["train"] = self.train.to_dict()
        return doc

    @classmethod
    def from_dict(cls, doc: dict) -> "ExperimentConfig":
        doc = dict(doc)
        doc["bag_shots"] = tuple(doc.get("bag_shots", DEFAULT_BAG_SHOTS))
        doc["instance_shots"] = tuple(doc.get("instance_shots", DEFAULT_INSTANCE_SHOTS))
        if "train" in doc:
            doc["train"] = TrainConfig.from_dict(doc["train"])
        return cls(**doc)

    def variant_name(self) -> str:
        if self.prior_only:
            name = "prior_only"
        elif self.cache_only:
            name = "cache_only"
        else:
            name = "full"
        if self.freeze_keys:
            name += "+frozen_keys"
        if self.freeze_value_logits:
            name += "+frozen_labels"
        return name


@dataclass
class CellResult:
    bag_shot: int
    instance_shot: int
    reports: list[EvalReport] = field(default_factory=list)
    failures: list[str] = field(default_factory=list)
    aggregates: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "bag_shot": self.bag_shot,
            "instance_shot": self.instance_shot,
            "reports": [r.to_dict() for r in self.reports],
            "failures": self.failures,
            "aggregates": self.aggregates,
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "CellResult":
        return cls(
            bag_shot=doc["bag_shot"],
            instance_shot=doc["instance_shot"],
            reports=[EvalReport.from_dict(r) for r in doc["reports"]],
            failures=list(doc.get("failures", [])),
            aggregates=dict(doc.get("aggregates", {})),
        )


@dataclass
class RunRecord:
    config: dict
    config_hash: str
    variant: str
    cells: list[CellResult]
    wall_clock_seconds: float = 0.0
    # In-memory only: per-cell tuning-set predictions for verification.
    extras: dict = field(default_factory=dict)

    def cell(self, bag_shot: int, instance_shot: Optional[int] = None) -> CellResult:
        for c in self.cells:
            if c.bag_shot == bag_shot and (
                instance_shot is None or c.instance_shot == instance_shot
            ):
                return c
        raise KeyError(f"no cell for bag_shot={bag_shot}, instance_shot={instance_shot}")

    def to_dict(self) -> dict:
        return {
            "config": self.config,
            "config_hash": self.config_hash,
            "variant": self.variant,
            "cells": [c.to_dict() for c in self.cells],
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "RunRecord":
        return cls(
            config=doc["config"],
            config_hash=doc["config_hash"],
            variant=doc["variant"],
            cells=[CellResult.from_dict(c) for c in doc["cells"]],
        )


def config_hash(config: dict) -> str:
    return hashlib.sha256(
        json.dumps(config, sort_keys=True, separators=(",", ":")).encode()
    ).hexdigest()


def _mean(values: list[float]) -> float:
    # Exact when every value is identical (annotation-ratio bookkeeping
    # must survive aggregation bit-for-bit).
    if values and all(v == values[0] for v in values):
        return values[0]
    return float(np.mean(values))


def _std(values: list[float]) -> float:
    if len(values) < 2:
        return 0.0
    return float(np.std(values, ddof=1))


def _aggregate(reports: list[EvalReport]) -> dict:
    out: dict = {"n_runs": len(reports)}
    if not reports:
        return out
    metrics = {
        "instance_auc": [r.instance_auc.macro for r in reports],
        "bag_auc": [r.bag_auc.macro for r in reports],
        "cache_instance_auc": [r.cache_instance_auc.macro for r in reports],
        "prior_instance_auc": [r.prior_instance_auc.macro for r in reports],
        "cache_bag_auc": [r.cache_bag_auc.macro for r in reports],
        "prior_bag_auc": [r.prior_bag_auc.macro for r in reports],
        "alpha": [r.alpha for r in reports],
    }
    for name, values in metrics.items():
        defined = [v for v in values if v is not None]
        if defined:
            out[f"{name}_mean"] = _mean(defined)
            out[f"{name}_std"] = _std(defined)
        out[f"{name}_defined"] = len(defined)
    out["labeled_count_mean"] = _mean([float(r.labeled_count) for r in reports])
    out["annotation_ratio"] = _mean([r.annotation_ratio for r in reports])
    out["annotation_ratio_percent"] = _mean(
        [r.annotation_ratio_percent for r in reports]
    )
    return out


def run_single(
    source: EmbeddingSource,
    cfg: ExperimentConfig,
    bag_shot: int,
    instance_shot: int,
    seed: int,
    keep_predictions: bool = False,
) -> tuple[EvalReport, Optional[dict]]:
    """One (shot setting, seed) run: sample, build, train, tune, evaluate."""
    train_ds = source.train_dataset
    test_ds = source.test_dataset
    if test_ds is None:
        raise ValueError("experiment source provides no test dataset")

    spec = FewShotSpec(
        bag_shot=bag_shot,
        instance_shot=instance_shot,
        coreset_fraction=cfg.coreset_fraction,
        coreset_cap=cfg.coreset_cap,
        seed=seed,
        per_bag=cfg.per_bag,
    )
    split = sample_split(train_ds, spec)

    cache_split = split
    if cfg.freeze_value_logits:
        # With the label cache frozen, unlabeled rows would carry inert
        # uniform values that only dilute retrieval; the reduced variants
        # this ablation mirrors cache annotated instances only.
        cache_split = replace(split, unlabeled_rows=np.empty(0, dtype=np.int64))
    cache = build_cache(cache_split, train_ds.store, train_ds.classes, beta=cfg.cache_beta)
    if cfg.prior_mode == TOY_ENCODER:
        rng = np.random.default_rng(cfg.toy_seed)
        base_tokens = rng.standard_normal(
            (train_ds.num_classes, cfg.toy_tokens_per_class, cfg.toy_token_width)
        )
        prior = prior_toy_encoder(
            base_tokens, train_ds.classes, train_ds.dim,
            num_learnable=cfg.toy_num_learnable, tau=cfg.prior_tau, seed=cfg.toy_seed,
        )
    else:
        prior = prior_from_features(source.prompt_features, train_ds.classes, tau=cfg.prior_tau)

    train_cfg = replace(
        cfg.train,
        seed=seed,
        lr_keys=0.0 if cfg.freeze_keys else cfg.train.lr_keys,
        lr_value_logits=0.0 if cfg.freeze_value_logits else cfg.train.lr_value_logits,
    )
    cache, prior, _state = train(cache, prior, split, train_ds.store, train_cfg)

    flags = dict(split.flags)
    tune_q = train_ds.store.rows[split.labeled_rows]
    tune_cache = retrieve(cache, tune_q).probs
    tune_prior_probs = prior_predict(prior, tune_q)
    alpha_table = None
    if cfg.cache_only:
        alpha = 1.0
        flags["alpha_forced"] = "cache_only"
    elif cfg.prior_only:
        alpha = 0.0
        flags["alpha_forced"] = "prior_only"
    else:
        try:
            alpha, alpha_table = sweep_alpha(
                tune_cache, tune_prior_probs, split.labeled_classes,
                grid=alpha_grid(cfg.grid_points),
            )
        except UndefinedMetricError:
            alpha = 0.5
            flags["alpha_degenerate_tuning"] = True

    truth = test_ds.instance_labels_vector()
    if (truth < 0).any():
        raise MissingInstanceLabelsError(
            "test dataset must carry instance labels for instance-level AUC"
        )
    test_q = test_ds.store.rows
    cache_probs = retrieve(cache, test_q).probs
    prior_probs = prior_predict(prior, test_q)
    fused = fuse(cache_probs, prior_probs, alpha)

    num_classes = test_ds.num_classes
    bag_labels = test_ds.bag_labels()

    def _bag_result(probs: np.ndarray) -> AUCResult:
        pooled = bag_pool(probs, test_ds.bags, cfg.pooling)
        return instance_auc(pooled, bag_labels, num_classes)

    labeled_count = split.n_labeled
    total = train_ds.num_instances
    report = EvalReport(
        seed=seed,
        bag_shot=bag_shot,
        instance_shot=instance_shot,
        alpha=alpha,
        pooling=cfg.pooling,
        n_instances=test_ds.num_instances,
        n_bags=len(test_ds.bags),
        instance_auc=instance_auc(fused, truth, num_classes),
        bag_auc=_bag_result(fused),
        cache_instance_auc=instance_auc(cache_probs, truth, num_classes),
        prior_instance_auc=instance_auc(prior_probs, truth, num_classes),
        cache_bag_auc=_bag_result(cache_probs),
        prior_bag_auc=_bag_result(prior_probs),
        labeled_count=labeled_count,
        annotation_ratio=labeled_count / total,
        annotation_ratio_percent=100.0 * labeled_count / total,
        flags=flags,
        alpha_table=alpha_table,
    )
    extras = None
    if keep_predictions:
        extras = {
            "tune_cache_probs": tune_cache,
            "tune_prior_probs": tune_prior_probs,
            "tune_labels": split.labeled_classes.copy(),
        }
    return report, extras


def run_experiment(cfg: ExperimentConfig, keep_predictions: bool = False) -> RunRecord:
    """Run every grid cell x repeat; aggregate mean/std per cell.

    Deterministic given the config and base seed: repeat r uses seed
    base_seed + r. A failing stage marks that repeat as a recorded
    failure and the sweep continues.
    """
    t0 = time.perf_counter()
    source = resolve_source(cfg.source)
    config_doc = cfg.to_dict()
    record = RunRecord(
        config=config_doc,
        config_hash=config_hash(config_doc),
        variant=cfg.variant_name(),
        cells=[],
    )
    for instance_shot in cfg.instance_shots:
        for bag_shot in cfg.bag_shots:
            cell = CellResult(bag_shot=bag_shot, instance_shot=instance_shot)
            cell_extras = []
            for repeat in range(cfg.repeats):
                seed = cfg.base_seed + repeat
                try:
                    report, extras = run_single(
                        source, cfg, bag_shot, instance_shot, seed,
                        keep_predictions=keep_predictions,
                    )
                except Exception as exc:  # recorded, never fatal to siblings
                    cell.failures.append(f"seed {seed}: {type(exc).__name__}: {exc}")
                    continue
                cell.reports.append(report)
                if extras is not None:
                    cell_extras.append(extras)
            cell.aggregates = _aggregate(cell.reports)
            record.cells.append(cell)
            if cell_extras:
                record.extras[(bag_shot, instance_shot)] = cell_extras
    record.wall_clock_seconds = time.perf_counter() - t0
    return record


# --- serialization -----------------------------------------------------------


def write_run_record(record: RunRecord, out_dir) -> Path:
    """record.json is deterministic; volatile facts go to metadata.json."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "record.json", "w") as f:
        json.dump(record.to_dict(), f, indent=2, sort_keys=True)
    metadata = {
        "wall_clock_seconds": record.wall_clock_seconds,
        "created_unix": time.time(),
        "host": platform.node(),
        "platform": platform.platform(),
    }
    with open(out / "metadata.json", "w") as f:
        json.dump(metadata, f, indent=2, sort_keys=True)
    return out / "record.json"


def load_run_record(path) -> RunRecord:
    with open(path) as f:
        return RunRecord.from_dict(json.load(f))


_REPORT_COLUMNS = [
    "bag_shot",
    "instance_shot",
    "variant",
    "n_runs",
    "annotation_ratio",
    "annotation_ratio_percent",
    "instance_auc_mean",
    "instance_auc_std",
    "bag_auc_mean",
    "bag_auc_std",
    "cache_instance_auc_mean",
    "cache_instance_auc_std",
    "prior_instance_auc_mean",
    "prior_instance_auc_std",
    "alpha_mean",
]

_INT_COLUMNS = {"bag_shot", "instance_shot", "n_runs"}


def report_rows(record: RunRecord) -> list[dict]:
    """One table row per shot setting."""
    rows = []
    for cell in record.cells:
        agg = cell.aggregates
        row: dict = {
            "bag_shot": cell.bag_shot,
            "instance_shot": cell.instance_shot,
            "variant": record.variant,
            "n_runs": agg.get("n_runs", 0),
        }
        for col in _REPORT_COLUMNS:
            if col in row:
                continue
            row[col] = agg.get(col)
        rows.append(row)
    return rows


def _format_cell(value) -> str:
    if value is None:
        return ""
    if isinstance(value, float):
        return repr(value)
    return str(value)


def emit_report(record: RunRecord, out_dir, formats: tuple[str, ...] = ("csv", "json")) -> list[Path]:
    """Write the aggregate table as CSV/JSON plus plot-ready data
    (annotation ratio vs AUC). Unknown formats are rejected."""
    for fmt in formats:
        if fmt not in ("csv", "json"):
            raise ValueError(f"unknown report format {fmt!r}")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rows = report_rows(record)
    written: list[Path] = []
    if "csv" in formats:
        path = out / "report.csv"
        with open(path, "w", newline="") as f:
            writer = csv.DictWriter(f, fieldnames=_REPORT_COLUMNS)
            writer.writeheader()
            for row in rows:
                writer.writerow({k: _format_cell(v) for k, v in row.items()})
        written.append(path)
        plot_path = out / "plot_annotation_ratio.csv"
        with open(plot_path, "w", newline="") as f:
            writer = csv.writer(f)
            writer.writerow(["annotation_ratio", "instance_auc_mean", "bag_auc_mean"])
            for row in rows:
                writer.writerow(
                    [
                        _format_cell(row["annotation_ratio"]),
                        _format_cell(row["instance_auc_mean"]),
                        _format_cell(row["bag_auc_mean"]),
                    ]
                )
        written.append(plot_path)
    if "json" in formats:
        path = out / "report.json"
        with open(path, "w") as f:
            json.dump({"variant": record.variant, "rows": rows}, f, indent=2, sort_keys=True)
        written.append(path)
    return written


def load_report_csv(path) -> list[dict]:
    """Parse report.csv back into typed rows (inverse of emit_report)."""
    rows = []
    with open(path, newline="") as f:
        for raw in csv.DictReader(f):
            row: dict = {}
            for key, value in raw.items():
                if value == "":
                    row[key] = None
                elif key in _INT_COLUMNS:
                    row[key] = int(value)
                elif key == "variant":
                    row[key] = value
                else:
                    row[key] = float(value)
            rows.append(row)
    return rows
