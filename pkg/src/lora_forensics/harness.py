"""Experiment orchestration: split by micro-dataset, fit, evaluate, repeat, report."""

from __future__ import annotations

import csv
import hashlib
import io
import json
import os
from dataclasses import dataclass, field, fields, replace
from datetime import datetime, timezone
from pathlib import Path
from typing import Sequence

import numpy as np

from . import __version__
from .container import atomic_output
from .errors import ConfigError, TooFewGroups, UnlabeledSnapshot
from .features import ExtractedModel, MatrixKind, extract_index, parse_kinds, sorted_kinds, tables_from_models
from .metrics import METRICS, AggregateResult, EvalResult, evaluate, summarize
from .predictors import Aggregation, PredictorKind, fit, predict_features
from .snapshot_io import SnapshotIndex

_MASK64 = (1 << 64) - 1
MCG_MULTIPLIER = 0xD1342543DE82EF95


def splitmix64(x: int) -> int:
    z = (x + 0x9E3779B97F4A7C15) & _MASK64
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
    return z ^ (z >> 31)


class McgStream:
    """64-bit multiplicative congruential generator: x <- x * 0xD1342543DE82EF95 mod 2**64.

    The state starts at splitmix64(seed) | 1. ``below(b)`` takes the top 32
    bits of the next state, u, and returns (u * b) >> 32.
    """

    def __init__(self, seed: int):
        self.state = splitmix64(seed & _MASK64) | 1

    def next(self) -> int:
        self.state = (self.state * MCG_MULTIPLIER) & _MASK64
        return self.state

    def below(self, bound: int) -> int:
        return ((self.next() >> 32) * bound) >> 32


def seeded_shuffle(items: Sequence, seed: int) -> list:
    """Fisher-Yates from the last position down, j = below(i + 1)."""
    out = list(items)
    rng = McgStream(seed)
    for i in range(len(out) - 1, 0, -1):
        j = rng.below(i + 1)
        out[i], out[j] = out[j], out[i]
    return out


def split_by_micro_dataset(index: SnapshotIndex, seed: int = 42, n_train_sets: int = 15) -> tuple[SnapshotIndex, SnapshotIndex]:
    """Shuffle the sorted micro-dataset ids and put the first ``n_train_sets`` on the train side."""
    keys = sorted(index.groups)
    if len(keys) <= n_train_sets:
        raise TooFewGroups(f"{len(keys)} micro-datasets cannot supply {n_train_sets} train sets plus a test side")
    order = seeded_shuffle(keys, seed)
    return index.select_groups(order[:n_train_sets]), index.select_groups(order[n_train_sets:])


def shuffled_groups(index: SnapshotIndex, seed: int) -> list[str]:
    return seeded_shuffle(sorted(index.groups), seed)


@dataclass(frozen=True)
class ExperimentConfig:
    predictor: PredictorKind = PredictorKind.LAYER_NN
    aggregation: Aggregation = Aggregation.MAJORITY
    kinds: tuple[MatrixKind, ...] = (MatrixKind.A, MatrixKind.B, MatrixKind.BA)
    n_train_sets: int = 15
    pool_sets: int | None = None  # train side of the fixed split; defaults to n_train_sets
    repeats: int = 10
    split_seed: int = 42
    repeat_seed_base: int = 0
    classes: tuple[int, ...] | None = None
    backbone_tag: str | None = None
    lora_rank: int | None = None
    step: int | None = None
    ridge_lambda: float = 1.0
    gda_eps: float = 1e-6

    def __post_init__(self):
        set_ = object.__setattr__
        set_(self, "predictor", PredictorKind.parse(self.predictor) if isinstance(self.predictor, str) else self.predictor)
        set_(self, "aggregation", Aggregation.parse(self.aggregation) if isinstance(self.aggregation, str) else self.aggregation)
        kinds = parse_kinds(self.kinds) if isinstance(self.kinds, str) else self.kinds
        set_(self, "kinds", tuple(sorted_kinds(MatrixKind(k) for k in kinds)))
        if self.classes is not None:
            set_(self, "classes", tuple(sorted(int(c) for c in self.classes)))
        if self.n_train_sets < 1 or self.repeats < 1:
            raise ConfigError("n_train_sets and repeats must be at least 1")
        if self.pool_sets is not None and self.pool_sets < self.n_train_sets:
            raise ConfigError(f"pool_sets ({self.pool_sets}) must be >= n_train_sets ({self.n_train_sets})")
        if not self.kinds:
            raise ConfigError("kinds must not be empty")

    @property
    def pool_size(self) -> int:
        return self.n_train_sets if self.pool_sets is None else self.pool_sets

    @property
    def effective_kinds(self) -> tuple[MatrixKind, ...]:
        """FrobeniusNN always runs on the FROB slot alone."""
        if self.predictor is PredictorKind.FROBENIUS_NN:
            return (MatrixKind.FROB,)
        return self.kinds

    def to_dict(self) -> dict:
        out = {f.name: getattr(self, f.name) for f in fields(self)}
        out["predictor"] = self.predictor.value
        out["aggregation"] = self.aggregation.value
        out["kinds"] = [k.value for k in self.kinds]
        if self.classes is not None:
            out["classes"] = list(self.classes)
        return out

    @classmethod
    def from_dict(cls, raw: dict) -> ExperimentConfig:
        known = {f.name for f in fields(cls)}
        unknown = set(raw) - known
        if unknown:
            raise ConfigError(f"unknown experiment config keys: {sorted(unknown)}")
        raw = dict(raw)
        if isinstance(raw.get("kinds"), list):
            raw["kinds"] = tuple(parse_kinds(raw["kinds"]))
        try:
            return cls(**raw)
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from exc


def load_config(path: str | os.PathLike) -> dict:
    try:
        raw = json.loads(Path(path).read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    if not isinstance(raw, dict):
        raise ConfigError(f"{path}: config must be a JSON object")
    return raw


def filter_index(index: SnapshotIndex, config: ExperimentConfig) -> SnapshotIndex:
    def keep(e):
        if config.classes is not None and e.label not in config.classes:
            return False
        if config.backbone_tag is not None and e.meta.backbone_tag != config.backbone_tag:
            return False
        if config.lora_rank is not None and e.meta.lora_rank != config.lora_rank:
            return False
        if config.step is not None and e.meta.step != config.step:
            return False
        return True

    out = index.filter(keep)
    if not len(out):
        raise ConfigError("filters select no snapshots")
    return out


def index_digest(index: SnapshotIndex) -> str:
    """sha256 over manifest content, with paths taken relative to their common root."""
    paths = [str(e.path) for e in index]
    root = os.path.commonpath(paths) if len(paths) > 1 else os.path.dirname(paths[0]) if paths else ""
    h = hashlib.sha256()
    for e in index:
        rel = os.path.relpath(e.path, root) if root else str(e.path)
        h.update(
            json.dumps(
                [rel, e.micro_dataset_id, e.label, e.meta.backbone_tag, e.meta.lora_rank, e.meta.seed, e.meta.step]
            ).encode()
        )
    return h.hexdigest()


@dataclass(frozen=True, eq=False)
class RepeatRecord:
    repeat: int
    seed: int
    train_groups: tuple[str, ...]
    result: EvalResult
    slot_accuracy: dict[str, float]

    def as_dict(self) -> dict:
        return {
            "repeat": self.repeat,
            "seed": self.seed,
            "train_groups": list(self.train_groups),
            "result": self.result.as_dict(),
            "slot_accuracy": self.slot_accuracy,
        }


@dataclass(frozen=True, eq=False)
class Report:
    config: ExperimentConfig
    repeats: tuple[RepeatRecord, ...]
    aggregate: AggregateResult
    slot_accuracy: dict[str, float]
    pool_groups: tuple[str, ...]
    test_groups: tuple[str, ...]
    provenance: dict = field(default_factory=dict)

    def deterministic_dict(self) -> dict:
        prov = {k: v for k, v in self.provenance.items() if k != "timestamp"}
        return {
            "config": self.config.to_dict(),
            "split": {"pool_groups": list(self.pool_groups), "test_groups": list(self.test_groups)},
            "repeats": [r.as_dict() for r in self.repeats],
            "aggregate": self.aggregate.as_dict(),
            "slot_accuracy": self.slot_accuracy,
            "provenance": prov,
        }

    @property
    def digest(self) -> str:
        text = json.dumps(self.deterministic_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(text.encode("utf-8")).hexdigest()

    def to_dict(self) -> dict:
        out = self.deterministic_dict()
        out["provenance"] = dict(self.provenance)
        out["deterministic_digest"] = self.digest
        return out

    @property
    def results(self) -> list[EvalResult]:
        return [r.result for r in self.repeats]


def run_experiment(
    config: ExperimentConfig,
    index: SnapshotIndex,
    *,
    threads: int | None = 1,
    timestamp: str | None = None,
    manifest_digest: str | None = None,
    models: Sequence[ExtractedModel] | None = None,
) -> Report:
    """Run ``config.repeats`` train/evaluate rounds on a fixed micro-dataset split.

    The split (seed ``split_seed``) fixes a train pool of ``pool_size`` groups
    and a held-out test side. Repeat i draws ``n_train_sets`` groups from the
    pool with seed ``repeat_seed_base + i``. ``models`` may carry features
    already extracted for ``index`` (same order) to skip re-reading files.
    """
    filtered = filter_index(index, config)
    for e in filtered:
        if e.label is None:
            raise UnlabeledSnapshot(f"{e.path} has no label in the manifest")
    kinds = config.effective_kinds

    if models is None:
        models = extract_index(filtered, kinds, threads)
    else:
        by_path = {m.model_id: m for m in models}
        models = [by_path[str(e.path)] for e in filtered]
    by_group: dict[str, list[ExtractedModel]] = {}
    for m in models:
        by_group.setdefault(m.micro_dataset_id, []).append(m)

    pool, test = split_by_micro_dataset(filtered, config.split_seed, config.pool_size)
    pool_order = [g for g in shuffled_groups(filtered, config.split_seed) if g in pool.groups]
    test_groups = tuple(sorted(test.groups))
    test_models = [m for m in models if m.micro_dataset_id in test.groups]
    class_set = config.classes or tuple(sorted({e.label for e in filtered}))
    truths = [m.label for m in test_models]
    test_feats = [list(m.features) for m in test_models]

    records = []
    for i in range(config.repeats):
        seed = config.repeat_seed_base + i
        drawn = set(seeded_shuffle(pool_order, seed)[: config.n_train_sets])
        train_models = [m for m in models if m.micro_dataset_id in drawn]
        tables = tables_from_models(train_models)
        model = fit(
            config.predictor,
            tables,
            config.aggregation,
            ridge_lambda=config.ridge_lambda,
            gda_eps=config.gda_eps,
            class_set=class_set,
            topology=train_models[0].topology,
        )
        preds = predict_features(model, test_feats)
        result = evaluate([p.label for p in preds], truths, class_set)
        slot_acc = {}
        if model.predictor is not PredictorKind.FULL_MODEL_NN:
            votes = np.array([[v.label for v in p.votes] for p in preds])
            hits = (votes == np.asarray(truths)[:, None]).mean(axis=0)
            slot_acc = {str(v.slot): float(100.0 * h) for v, h in zip(preds[0].votes, hits)}
        records.append(RepeatRecord(i, seed, tuple(sorted(drawn)), result, slot_acc))

    slot_summary = {}
    if records[0].slot_accuracy:
        for key in records[0].slot_accuracy:
            slot_summary[key] = float(np.mean([r.slot_accuracy[key] for r in records]))

    provenance = {
        "tool": "lora-forensics",
        "version": __version__,
        "manifest_digest": manifest_digest or index_digest(filtered),
        "timestamp": timestamp or datetime.now(timezone.utc).isoformat(timespec="seconds"),
    }
    return Report(
        config,
        tuple(records),
        summarize([r.result for r in records]),
        slot_summary,
        tuple(sorted(pool.groups)),
        test_groups,
        provenance,
    )


def sweep_train_sets(
    config: ExperimentConfig, index: SnapshotIndex, sizes: Sequence[int], *, threads: int | None = 1, timestamp: str | None = None
) -> dict[int, Report]:
    """One report per training-set count, all sharing the same fixed test side."""
    pool = max(max(sizes), config.pool_size)
    filtered = filter_index(index, config)
    models = extract_index(filtered, config.effective_kinds, threads)
    return {
        n: run_experiment(replace(config, n_train_sets=n, pool_sets=pool), filtered, models=models, timestamp=timestamp)
        for n in sizes
    }


def format_csv_summary(report: Report) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["repeat", *METRICS])
    for r in report.repeats:
        writer.writerow([r.repeat, *(repr(float(getattr(r.result, m))) for m in METRICS)])
    writer.writerow(["mean", *(repr(report.aggregate.mean[m]) for m in METRICS)])
    return buf.getvalue()


def export_report(report: Report, path: str | os.PathLike, format: str = "text") -> None:
    """Write the full report as JSON text, or the per-repeat CSV summary."""
    if format in ("text", "structured-text", "json"):
        body = json.dumps(report.to_dict(), indent=2, sort_keys=True) + "\n"
    elif format in ("csv", "csv-summary"):
        body = format_csv_summary(report)
    else:
        raise ConfigError(f"unknown report format {format!r}")
    with atomic_output(path, "w") as fh:
        fh.write(body)
