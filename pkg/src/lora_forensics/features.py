"""Per-slot spectral features and labeled feature tables."""

from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from enum import Enum
from typing import Iterable, NamedTuple, Sequence

import numpy as np

from . import spectral
from .container import TensorRecord, read_container, write_container
from .errors import ForensicsError, InconsistentTopology, MalformedHeader, UnlabeledSnapshot
from .snapshot_io import IndexEntry, ModelSnapshot, SnapshotIndex


class MatrixKind(str, Enum):
    A = "A"
    B = "B"
    BA = "BA"
    FROB = "FROB"

    @property
    def order(self) -> int:
        return list(MatrixKind).index(self)


DEFAULT_KINDS = frozenset({MatrixKind.A, MatrixKind.B, MatrixKind.BA})


def parse_kinds(text: str | Iterable[str]) -> frozenset[MatrixKind]:
    items = text.split(",") if isinstance(text, str) else list(text)
    try:
        kinds = frozenset(MatrixKind(str(item).strip().upper()) for item in items if str(item).strip())
    except ValueError as exc:
        raise ValueError(f"unknown matrix kind in {text!r}; expected A, B, BA or FROB") from exc
    if not kinds:
        raise ValueError("at least one matrix kind is required")
    return kinds


def sorted_kinds(kinds: Iterable[MatrixKind]) -> list[MatrixKind]:
    return sorted(set(kinds), key=lambda k: k.order)


class SlotKey(NamedTuple):
    layer_index: int
    kind: MatrixKind

    def sort_key(self) -> tuple[int, int]:
        return self.layer_index, self.kind.order

    def __str__(self):
        return f"slot.{self.layer_index}.{self.kind.value}"


@dataclass(frozen=True)
class Topology:
    """Layer paths and (d, k, r) per layer; models are comparable only when these agree."""

    layers: tuple[tuple[str, int, int, int], ...]

    @classmethod
    def of(cls, snapshot: ModelSnapshot) -> Topology:
        return cls(tuple((layer.path, layer.d, layer.k, layer.rank) for layer in snapshot.layers))

    @property
    def n_layers(self) -> int:
        return len(self.layers)

    def describe_difference(self, other: Topology) -> str:
        if self.n_layers != other.n_layers:
            return f"{self.n_layers} layers vs {other.n_layers}"
        for i, (a, b) in enumerate(zip(self.layers, other.layers)):
            if a != b:
                return f"layer {i}: {a} vs {b}"
        return "identical"


Features = list[tuple[SlotKey, np.ndarray]]


def _slot_features(snapshot: ModelSnapshot, kinds: list[MatrixKind]) -> dict[SlotKey, np.ndarray]:
    # every spectral kind of every layer goes through one eigen batch
    keys, grams, lengths = [], [], []
    out: dict[SlotKey, np.ndarray] = {}
    for i, ly in enumerate(snapshot.layers):
        for kind in kinds:
            key = SlotKey(i, kind)
            if kind is MatrixKind.FROB:
                out[key] = np.array([spectral.frobenius_stat(ly.B, ly.A)])
                continue
            if kind is MatrixKind.BA:
                source = spectral.product_core(ly.B, ly.A)
            else:
                source = ly.A if kind is MatrixKind.A else ly.B
                spectral.check_finite(source)
            keys.append(key)
            grams.append(spectral.gram(source))
            lengths.append(ly.rank)
    for key, s, r in zip(keys, spectral.spectra_from_grams(grams), lengths):
        out[key] = spectral.fit_length(s, r)
    return out


def _locate_failure(snapshot: ModelSnapshot, kinds: list[MatrixKind], exc: ForensicsError):
    for i, layer in enumerate(snapshot.layers):
        for kind in kinds:
            try:
                if kind is MatrixKind.A:
                    spectral.factor_spectrum(layer.A)
                elif kind is MatrixKind.B:
                    spectral.factor_spectrum(layer.B)
                elif kind is MatrixKind.BA:
                    spectral.product_spectrum(layer.B, layer.A)
                else:
                    spectral.frobenius_stat(layer.B, layer.A)
            except ForensicsError as inner:
                raise type(inner)(f"layer {i} ({layer.path}), kind {kind.value}: {inner}") from inner
    raise exc


def extract_features(snapshot: ModelSnapshot, kinds: Iterable[MatrixKind] = DEFAULT_KINDS) -> Features:
    """Feature vector for every (layer, kind) slot, ordered by (layer_index, kind).

    A and B give factor spectra, BA the product spectrum (each of length r),
    FROB the one-element Frobenius statistic.
    """
    kinds = sorted_kinds(kinds)
    if not kinds:
        raise ValueError("at least one matrix kind is required")
    try:
        slots = _slot_features(snapshot, kinds)
    except ForensicsError as exc:
        _locate_failure(snapshot, kinds, exc)
    return sorted(slots.items(), key=lambda item: item[0].sort_key())


@dataclass(frozen=True)
class FeatureTable:
    slot: SlotKey
    X: np.ndarray  # (rows, dim)
    labels: np.ndarray  # (rows,) positive ints
    model_ids: tuple[str, ...]

    @property
    def dim(self) -> int:
        return self.X.shape[1]

    def __len__(self):
        return len(self.labels)


@dataclass(frozen=True)
class ExtractedModel:
    """Features of one snapshot plus what is needed to label and group it."""

    model_id: str
    topology: Topology
    features: tuple[tuple[SlotKey, np.ndarray], ...]
    label: int | None = None
    micro_dataset_id: str = ""


def _extract_entry(entry: IndexEntry, kinds) -> ExtractedModel:
    snap = entry.load()
    return ExtractedModel(
        str(entry.path), Topology.of(snap), tuple(extract_features(snap, kinds)), entry.label, entry.micro_dataset_id
    )


def resolve_threads(threads: int | None = None) -> int:
    if threads is None:
        env = os.environ.get("LORA_FORENSICS_THREADS")
        threads = int(env) if env else (os.cpu_count() or 1)
    return max(1, int(threads))


def extract_index(index: SnapshotIndex, kinds: Iterable[MatrixKind] = DEFAULT_KINDS, threads: int | None = 1) -> list[ExtractedModel]:
    """Load and featurize every snapshot of an index; results keep index order."""
    kinds = sorted_kinds(kinds)
    threads = resolve_threads(threads)
    if threads == 1:
        return [_extract_entry(e, kinds) for e in index]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(lambda e: _extract_entry(e, kinds), index))


def tables_from_models(models: Sequence[ExtractedModel]) -> dict[SlotKey, FeatureTable]:
    """Stack per-model features into one table per slot; rows follow ``models`` order."""
    if not models:
        raise ValueError("no models to tabulate")
    first = models[0]
    for m in models:
        if m.label is None:
            raise UnlabeledSnapshot(f"{m.model_id} has no label")
        if m.topology != first.topology:
            raise InconsistentTopology(
                f"{m.model_id} differs from {first.model_id}: {m.topology.describe_difference(first.topology)}"
            )
        if [k for k, _ in m.features] != [k for k, _ in first.features]:
            raise InconsistentTopology(f"{m.model_id} was extracted with different kinds")
    labels = np.array([m.label for m in models], dtype=np.int64)
    ids = tuple(m.model_id for m in models)
    tables = {}
    for j, (slot, _) in enumerate(first.features):
        X = np.stack([m.features[j][1] for m in models])
        tables[slot] = FeatureTable(slot, X, labels, ids)
    return tables


def build_tables(index: SnapshotIndex, kinds: Iterable[MatrixKind] = DEFAULT_KINDS, threads: int | None = 1) -> dict[SlotKey, FeatureTable]:
    """One labeled FeatureTable per (layer, kind) slot across all indexed snapshots."""
    for entry in index:
        if entry.label is None:
            raise UnlabeledSnapshot(f"{entry.path} has no label in the manifest")
    return tables_from_models(extract_index(index, kinds, threads))


# --- feature cache ---------------------------------------------------------


def write_feature_cache(path: str | os.PathLike, features: Features) -> None:
    records = [TensorRecord.from_array(str(slot), vec, "F64") for slot, vec in features]
    write_container(path, records, {"format": "lora-forensics-features/1"})


def read_feature_cache(path: str | os.PathLike) -> Features:
    records, _ = read_container(path)
    out = []
    for name, rec in records.items():
        parts = name.split(".")
        if len(parts) != 3 or parts[0] != "slot":
            raise MalformedHeader(f"unexpected feature cache key {name!r}")
        try:
            slot = SlotKey(int(parts[1]), MatrixKind(parts[2]))
        except ValueError:
            raise MalformedHeader(f"unexpected feature cache key {name!r}") from None
        out.append((slot, rec.to_float64().reshape(-1)))
    return sorted(out, key=lambda item: item[0].sort_key())
