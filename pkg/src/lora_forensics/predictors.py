"""Dataset-size predictors over per-slot spectral features.

The main predictor is a layer-wise ensemble: every (layer, kind) slot holds
its own 1-nearest-neighbor classifier, each slot votes, and the modal vote
wins. GDA and ridge slots plug into the same voting scheme; FullModelNN is a
single 1-NN over all slot features concatenated.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field
from enum import Enum
from typing import Iterable, Mapping, Sequence

import numpy as np

from .container import TensorRecord, read_container, write_container
from .errors import (
    DimensionMismatch,
    EmptyClass,
    EmptyTable,
    FormatVersionError,
    InconsistentTables,
    MalformedHeader,
    SingularSystem,
    TopologyMismatch,
)
from .features import Features, FeatureTable, MatrixKind, SlotKey, Topology, extract_features, sorted_kinds
from .snapshot_io import ModelSnapshot

MODEL_FORMAT = "lora-forensics-model/1"
_QUERY_CHUNK_ELEMENTS = 2**24


class PredictorKind(str, Enum):
    LAYER_NN = "LayerNN"
    FROBENIUS_NN = "FrobeniusNN"
    GDA = "GDA"
    RIDGE = "Ridge"
    FULL_MODEL_NN = "FullModelNN"

    @classmethod
    def parse(cls, text: str) -> PredictorKind:
        for kind in cls:
            if text.lower() in (kind.value.lower(), kind.name.lower()):
                return kind
        raise ValueError(f"unknown predictor {text!r}; expected one of {[k.value for k in cls]}")


class Aggregation(str, Enum):
    MAJORITY = "majority"
    AVERAGE = "average"

    @classmethod
    def parse(cls, text: str) -> Aggregation:
        try:
            return cls(text.lower())
        except ValueError:
            raise ValueError(f"unknown aggregation {text!r}; expected majority or average") from None


@dataclass(frozen=True)
class Vote:
    slot: SlotKey | None  # None for the single FullModelNN vote
    label: int


@dataclass(frozen=True)
class Prediction:
    label: int
    votes: tuple[Vote, ...]

    def histogram(self) -> dict[int, int]:
        counts: dict[int, int] = {}
        for v in self.votes:
            counts[v.label] = counts.get(v.label, 0) + 1
        return dict(sorted(counts.items()))


# --- primitives -------------------------------------------------------------


def _nn_indices(Q: np.ndarray, X: np.ndarray) -> np.ndarray:
    """Index of the nearest row of X for every row of Q; ties go to the lowest index."""
    if len(X) == 0:
        raise EmptyTable("nearest-neighbor table has no rows")
    if Q.shape[1] != X.shape[1]:
        raise DimensionMismatch(f"query dim {Q.shape[1]} != table dim {X.shape[1]}")
    step = max(1, _QUERY_CHUNK_ELEMENTS // max(1, X.size))
    out = np.empty(len(Q), dtype=np.int64)
    for start in range(0, len(Q), step):
        diff = Q[start : start + step, None, :] - X[None, :, :]
        out[start : start + step] = np.argmin(np.sum(diff * diff, axis=2), axis=1)
    return out


def nearest_neighbor(query, X, labels) -> tuple[int, int]:
    """(label, row index) of the row of X closest to ``query`` in Euclidean distance."""
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    q = np.asarray(query, dtype=np.float64).reshape(1, -1)
    idx = int(_nn_indices(q, X)[0])
    return int(np.asarray(labels)[idx]), idx


def snap_to_class(values, class_set: Sequence[int]) -> np.ndarray:
    """Nearest member of ``class_set`` for each value; halfway ties go to the smaller class."""
    classes = np.asarray(sorted(class_set), dtype=np.float64)
    values = np.atleast_1d(np.asarray(values, dtype=np.float64))
    idx = np.argmin(np.abs(values[:, None] - classes[None, :]), axis=1)
    return classes[idx].astype(np.int64)


def aggregate_votes(votes: np.ndarray, class_set: Sequence[int], aggregation: Aggregation) -> np.ndarray:
    """Combine a (models, slots) vote matrix into one label per model."""
    votes = np.atleast_2d(np.asarray(votes))
    classes = np.asarray(sorted(class_set), dtype=np.int64)
    if aggregation is Aggregation.MAJORITY:
        pos = np.searchsorted(classes, votes)
        counts = np.zeros((len(votes), len(classes)), dtype=np.int64)
        np.add.at(counts, (np.repeat(np.arange(len(votes)), votes.shape[1]), pos.ravel()), 1)
        return classes[np.argmax(counts, axis=1)]
    return snap_to_class(votes.mean(axis=1), classes)


# --- slot classifiers -------------------------------------------------------


@dataclass(frozen=True, eq=False)
class SlotClassifier:
    slot: SlotKey | None
    kind: PredictorKind
    class_set: tuple[int, ...]
    params: dict[str, np.ndarray] = field(default_factory=dict)

    @property
    def dim(self) -> int:
        p = self.params
        if "X" in p:
            return p["X"].shape[1]
        if "means" in p:
            return p["means"].shape[1]
        return p["coef"].shape[0]

    def gda_scores(self, Q: np.ndarray) -> np.ndarray:
        Q = np.atleast_2d(np.asarray(Q, dtype=np.float64))
        if Q.shape[1] != self.dim:
            raise DimensionMismatch(f"query dim {Q.shape[1]} != classifier dim {self.dim}")
        diff = Q[:, None, :] - self.params["means"][None, :, :]
        return -np.sum(diff * diff / self.params["var"], axis=2)

    def votes(self, Q: np.ndarray) -> np.ndarray:
        Q = np.atleast_2d(np.asarray(Q, dtype=np.float64))
        if self.kind is PredictorKind.GDA:
            scores = self.gda_scores(Q)
            return np.asarray(self.class_set, dtype=np.int64)[np.argmax(scores, axis=1)]
        if self.kind is PredictorKind.RIDGE:
            if Q.shape[1] != self.dim:
                raise DimensionMismatch(f"query dim {Q.shape[1]} != classifier dim {self.dim}")
            return snap_to_class(Q @ self.params["coef"] + self.params["intercept"][0], self.class_set)
        return self.params["labels"][_nn_indices(Q, self.params["X"])]


def gda_posterior(classifier: SlotClassifier, query) -> np.ndarray:
    """Per-class score -sum_j (x_j - mu_cj)^2 / var_j, classes in ascending order."""
    if classifier.kind is not PredictorKind.GDA:
        raise ValueError("gda_posterior needs a GDA classifier")
    return classifier.gda_scores(np.asarray(query, dtype=np.float64).reshape(1, -1))[0]


def _fit_gda(table: FeatureTable, class_set: tuple[int, ...], eps: float) -> dict[str, np.ndarray]:
    X, y = table.X, table.labels
    means = []
    resid = np.zeros(table.dim)
    for c in class_set:
        rows = X[y == c]
        if len(rows) == 0:
            raise EmptyClass(f"{table.slot}: class {c} has no training rows")
        mu = rows.mean(axis=0)
        means.append(mu)
        resid += ((rows - mu) ** 2).sum(axis=0)
    dof = max(len(y) - len(class_set), 1)
    var = np.maximum(resid / dof, eps)
    return {"means": np.array(means), "var": var}


def _fit_ridge(table: FeatureTable, lam: float) -> dict[str, np.ndarray]:
    X, y = table.X, table.labels.astype(np.float64)
    x_mean, y_mean = X.mean(axis=0), y.mean()
    Xc = X - x_mean
    gram = Xc.T @ Xc + lam * np.eye(X.shape[1])
    try:
        coef = np.linalg.solve(gram, Xc.T @ (y - y_mean))
    except np.linalg.LinAlgError as exc:
        raise SingularSystem(f"{table.slot}: ridge system is singular") from exc
    if not np.isfinite(coef).all():
        raise SingularSystem(f"{table.slot}: ridge solution is not finite")
    return {"coef": coef, "intercept": np.array([y_mean - x_mean @ coef])}


# --- ensemble ---------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class EnsembleModel:
    predictor: PredictorKind
    aggregation: Aggregation
    kinds: tuple[MatrixKind, ...]
    class_set: tuple[int, ...]
    classifiers: tuple[SlotClassifier, ...]
    slots: tuple[SlotKey, ...]  # every slot consumed, in feature order
    topology: Topology | None = None
    hyper: dict = field(default_factory=dict)

    @property
    def n_votes(self) -> int:
        return len(self.classifiers)


def _as_table_list(tables) -> list[FeatureTable]:
    items = list(tables.values()) if isinstance(tables, Mapping) else list(tables)
    return sorted(items, key=lambda t: t.slot.sort_key())


def fit(
    kind: PredictorKind | str,
    tables: Mapping[SlotKey, FeatureTable] | Iterable[FeatureTable],
    aggregation: Aggregation | str = Aggregation.MAJORITY,
    *,
    ridge_lambda: float = 1.0,
    gda_eps: float = 1e-6,
    class_set: Sequence[int] | None = None,
    topology: Topology | None = None,
) -> EnsembleModel:
    """Fit a predictor on per-slot feature tables."""
    kind = PredictorKind.parse(kind) if isinstance(kind, str) else kind
    aggregation = Aggregation.parse(aggregation) if isinstance(aggregation, str) else aggregation
    tables = _as_table_list(tables)
    if kind is PredictorKind.FROBENIUS_NN:
        tables = [t for t in tables if t.slot.kind is MatrixKind.FROB]
        if not tables:
            raise InconsistentTables("FrobeniusNN needs FROB feature tables")
    if not tables:
        raise InconsistentTables("no feature tables to fit")
    first = tables[0]
    for t in tables:
        if len(t) == 0:
            raise EmptyTable(f"{t.slot}: no rows")
        if t.model_ids != first.model_ids or not np.array_equal(t.labels, first.labels):
            raise InconsistentTables(f"{t.slot}: rows do not line up with {first.slot}")

    labels = first.labels
    if class_set is None:
        class_set = tuple(int(c) for c in np.unique(labels))
    else:
        class_set = tuple(sorted(int(c) for c in class_set))
        stray = set(labels.tolist()) - set(class_set)
        if stray:
            raise InconsistentTables(f"labels {sorted(stray)} are outside the class set")
    if not class_set:
        raise InconsistentTables("empty class set")

    slots = tuple(t.slot for t in tables)
    kinds = tuple(sorted_kinds(s.kind for s in slots))
    hyper = {"ridge_lambda": ridge_lambda, "gda_eps": gda_eps}

    if kind is PredictorKind.FULL_MODEL_NN:
        X = np.concatenate([t.X for t in tables], axis=1)
        clf = SlotClassifier(None, kind, class_set, {"X": X, "labels": labels.copy()})
        return EnsembleModel(kind, aggregation, kinds, class_set, (clf,), slots, topology, hyper)

    classifiers = []
    for t in tables:
        if kind is PredictorKind.GDA:
            params = _fit_gda(t, class_set, gda_eps)
        elif kind is PredictorKind.RIDGE:
            params = _fit_ridge(t, ridge_lambda)
        else:
            params = {"X": t.X.copy(), "labels": t.labels.copy()}
        classifiers.append(SlotClassifier(t.slot, kind, class_set, params))
    return EnsembleModel(kind, aggregation, kinds, class_set, tuple(classifiers), slots, topology, hyper)


def predict_features(model: EnsembleModel, batch: Sequence[Features]) -> list[Prediction]:
    """Predict for many already-extracted models at once."""
    if not batch:
        return []
    per_slot: dict[SlotKey, list[np.ndarray]] = {slot: [] for slot in model.slots}
    for feats in batch:
        got = dict(feats)
        for slot in model.slots:
            if slot not in got:
                raise TopologyMismatch(f"query has no features for {slot}")
            per_slot[slot].append(got[slot])
    try:
        stacked = {slot: np.stack(rows) for slot, rows in per_slot.items()}
    except ValueError as exc:
        raise DimensionMismatch(f"query feature lengths differ: {exc}") from None

    if model.predictor is PredictorKind.FULL_MODEL_NN:
        Q = np.concatenate([stacked[s] for s in model.slots], axis=1)
        labels = model.classifiers[0].votes(Q)
        return [Prediction(int(lab), (Vote(None, int(lab)),)) for lab in labels]

    votes = np.column_stack([clf.votes(stacked[clf.slot]) for clf in model.classifiers])
    final = aggregate_votes(votes, model.class_set, model.aggregation)
    slots = [clf.slot for clf in model.classifiers]
    return [
        Prediction(int(lab), tuple(Vote(s, int(v)) for s, v in zip(slots, row)))
        for lab, row in zip(final, votes)
    ]


def check_topology(model: EnsembleModel, topology: Topology) -> None:
    if model.topology is not None and model.topology != topology:
        raise TopologyMismatch(f"snapshot topology differs from the model's: {topology.describe_difference(model.topology)}")
    n_layers = 1 + max(s.layer_index for s in model.slots)
    if topology.n_layers < n_layers:
        raise TopologyMismatch(f"model expects {n_layers} layers, snapshot has {topology.n_layers}")


def predict(model: EnsembleModel, snapshot: ModelSnapshot) -> Prediction:
    """Predicted dataset size and the per-slot votes behind it."""
    check_topology(model, Topology.of(snapshot))
    return predict_features(model, [extract_features(snapshot, model.kinds)])[0]


# --- persistence ------------------------------------------------------------


def save_model(model: EnsembleModel, path: str | os.PathLike) -> None:
    records = []
    slots_meta = []
    for j, clf in enumerate(model.classifiers):
        names = sorted(clf.params)
        slots_meta.append(
            {
                "slot": None if clf.slot is None else [clf.slot.layer_index, clf.slot.kind.value],
                "params": names,
            }
        )
        for name in names:
            arr = clf.params[name]
            dtype = "I64" if np.issubdtype(arr.dtype, np.integer) else "F64"
            records.append(TensorRecord.from_array(f"clf.{j:05d}.{name}", arr, dtype))
    config = {
        "format": MODEL_FORMAT,
        "predictor": model.predictor.value,
        "aggregation": model.aggregation.value,
        "kinds": [k.value for k in model.kinds],
        "class_set": list(model.class_set),
        "slots": [[s.layer_index, s.kind.value] for s in model.slots],
        "classifiers": slots_meta,
        "topology": None if model.topology is None else [list(t) for t in model.topology.layers],
        "hyper": model.hyper,
    }
    write_container(path, records, {"format": MODEL_FORMAT, "config": json.dumps(config, sort_keys=True)})


def load_model(path: str | os.PathLike) -> EnsembleModel:
    records, metadata = read_container(path)
    if metadata.get("format") != MODEL_FORMAT:
        raise FormatVersionError(f"{path}: expected model format {MODEL_FORMAT!r}, found {metadata.get('format')!r}")
    try:
        config = json.loads(metadata["config"])
        if config.get("format") != MODEL_FORMAT:
            raise FormatVersionError(f"{path}: config format tag mismatch")
        predictor = PredictorKind(config["predictor"])
        class_set = tuple(int(c) for c in config["class_set"])
        classifiers = []
        for j, entry in enumerate(config["classifiers"]):
            slot = None if entry["slot"] is None else SlotKey(int(entry["slot"][0]), MatrixKind(entry["slot"][1]))
            params = {}
            for name in entry["params"]:
                rec = records[f"clf.{j:05d}.{name}"]
                params[name] = rec.data.astype(np.int64) if rec.dtype == "I64" else rec.to_float64()
            classifiers.append(SlotClassifier(slot, predictor, class_set, params))
        topology = None
        if config["topology"] is not None:
            topology = Topology(tuple((str(p), int(d), int(k), int(r)) for p, d, k, r in config["topology"]))
        return EnsembleModel(
            predictor,
            Aggregation(config["aggregation"]),
            tuple(MatrixKind(k) for k in config["kinds"]),
            class_set,
            tuple(classifiers),
            tuple(SlotKey(int(i), MatrixKind(k)) for i, k in config["slots"]),
            topology,
            dict(config.get("hyper", {})),
        )
    except FormatVersionError:
        raise
    except (KeyError, ValueError, TypeError) as exc:
        raise MalformedHeader(f"{path}: corrupt model file ({exc})") from exc
