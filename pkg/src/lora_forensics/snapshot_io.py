"""LoRA snapshots: pairing factor tensors into layers, file IO and manifests."""

from __future__ import annotations

import csv
import io
import os
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Iterable

import numpy as np

from .container import TensorRecord, atomic_output, read_container, write_container
from .errors import (
    ConfigError,
    DuplicateEntry,
    LabelParseError,
    MissingFile,
    MissingPartner,
    NonFiniteInput,
    ShapeMismatch,
)

MANIFEST_COLUMNS = ["path", "micro_dataset_id", "label", "backbone_tag", "lora_rank", "seed", "step"]


@dataclass(frozen=True)
class NamingScheme:
    """Suffixes identifying the two factors of a layer in a checkpoint."""

    a_suffix: str = ".lora_A.weight"
    b_suffix: str = ".lora_B.weight"

    def split(self, name: str) -> tuple[str, str] | None:
        for suffix, which in ((self.a_suffix, "A"), (self.b_suffix, "B")):
            if name.endswith(suffix) and len(name) > len(suffix):
                return name[: -len(suffix)], which
        return None


DEFAULT_NAMING = NamingScheme()
KOHYA_NAMING = NamingScheme(".lora_down.weight", ".lora_up.weight")


def _frozen(values) -> np.ndarray:
    arr = np.array(values, dtype=np.float64)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True, eq=False)
class LoraLayer:
    """One adapted layer: update = B @ A with B (d x r) and A (r x k)."""

    path: str
    B: np.ndarray
    A: np.ndarray
    b_dtype: str = "F32"
    a_dtype: str = "F32"

    def __post_init__(self):
        object.__setattr__(self, "B", _frozen(self.B))
        object.__setattr__(self, "A", _frozen(self.A))
        if self.B.ndim != 2 or self.A.ndim != 2:
            raise ShapeMismatch(f"{self.path}: LoRA factors must be 2-D, got {self.B.shape} and {self.A.shape}")
        if self.B.shape[1] != self.A.shape[0]:
            raise ShapeMismatch(f"{self.path}: B is {self.B.shape} but A is {self.A.shape}")
        if self.rank < 1 or self.rank > min(self.d, self.k):
            raise ShapeMismatch(f"{self.path}: rank {self.rank} invalid for d={self.d}, k={self.k}")
        if not (np.isfinite(self.B).all() and np.isfinite(self.A).all()):
            raise NonFiniteInput(f"{self.path}: non-finite factor entries")

    @property
    def d(self) -> int:
        return self.B.shape[0]

    @property
    def k(self) -> int:
        return self.A.shape[1]

    @property
    def rank(self) -> int:
        return self.A.shape[0]

    def __eq__(self, other):
        if not isinstance(other, LoraLayer):
            return NotImplemented
        return (
            self.path == other.path
            and np.array_equal(self.B, other.B)
            and np.array_equal(self.A, other.A)
        )

    __hash__ = None


@dataclass(frozen=True)
class SnapshotMeta:
    backbone_tag: str = ""
    lora_rank: int = 0
    micro_dataset_id: str = ""
    seed: int = 0
    step: int = 0
    mixed_ranks: bool = False

    def to_strings(self) -> dict[str, str]:
        out = {
            "backbone_tag": self.backbone_tag,
            "lora_rank": str(self.lora_rank),
            "micro_dataset_id": self.micro_dataset_id,
            "seed": str(self.seed),
            "step": str(self.step),
        }
        if self.mixed_ranks:
            out["mixed_ranks"] = "true"
        return out

    @classmethod
    def from_strings(cls, raw: dict[str, str]) -> SnapshotMeta:
        def as_int(key):
            try:
                return int(raw.get(key) or 0)
            except ValueError:
                raise LabelParseError(f"metadata field {key}={raw[key]!r} is not an integer") from None

        return cls(
            backbone_tag=raw.get("backbone_tag", ""),
            lora_rank=as_int("lora_rank"),
            micro_dataset_id=raw.get("micro_dataset_id", ""),
            seed=as_int("seed"),
            step=as_int("step"),
            mixed_ranks=raw.get("mixed_ranks", "false").lower() == "true",
        )


@dataclass(frozen=True)
class ModelSnapshot:
    """All adapted layers of one fine-tuned model, ordered by layer path."""

    layers: tuple[LoraLayer, ...]
    meta: SnapshotMeta = field(default_factory=SnapshotMeta)
    label: int | None = None
    extras: tuple[TensorRecord, ...] = ()

    def __post_init__(self):
        layers = tuple(sorted(self.layers, key=lambda layer: layer.path))
        object.__setattr__(self, "layers", layers)
        if not layers:
            raise ShapeMismatch("a snapshot needs at least one layer")
        paths = [layer.path for layer in layers]
        if len(set(paths)) != len(paths):
            raise ShapeMismatch("duplicate layer paths in snapshot")
        ranks = {layer.rank for layer in layers}
        if len(ranks) > 1 and not self.meta.mixed_ranks:
            raise ShapeMismatch(f"layers have ranks {sorted(ranks)} but metadata does not declare mixed ranks")
        if self.label is not None and (not isinstance(self.label, (int, np.integer)) or self.label < 1):
            raise LabelParseError(f"label must be a positive integer, got {self.label!r}")

    @property
    def n_layers(self) -> int:
        return len(self.layers)

    @property
    def layer_paths(self) -> tuple[str, ...]:
        return tuple(layer.path for layer in self.layers)

    def with_label(self, label: int | None) -> ModelSnapshot:
        return replace(self, label=label)


def snapshot_from_records(records: dict[str, TensorRecord], metadata: dict[str, str], naming: NamingScheme = DEFAULT_NAMING) -> ModelSnapshot:
    factors: dict[str, dict[str, TensorRecord]] = {}
    extras = []
    for name, rec in records.items():
        parsed = naming.split(name)
        if parsed is None:
            extras.append(rec)
            continue
        base, which = parsed
        factors.setdefault(base, {})[which] = rec

    layers = []
    for base in sorted(factors):
        pair = factors[base]
        if "A" not in pair or "B" not in pair:
            have = "A" if "A" in pair else "B"
            raise MissingPartner(f"layer {base!r} has a {have} factor but no partner")
        a, b = pair["A"], pair["B"]
        if len(a.shape) != 2 or len(b.shape) != 2 or b.shape[1] != a.shape[0]:
            raise ShapeMismatch(f"layer {base!r}: B {list(b.shape)} and A {list(a.shape)} do not chain")
        layers.append(LoraLayer(base, b.to_float64(), a.to_float64(), b_dtype=b.dtype, a_dtype=a.dtype))

    if not layers:
        raise MissingPartner("no LoRA factor tensors found")
    meta = SnapshotMeta.from_strings(metadata)
    if "lora_rank" not in metadata:
        ranks = sorted({layer.rank for layer in layers})
        meta = replace(meta, lora_rank=ranks[-1], mixed_ranks=len(ranks) > 1)
    return ModelSnapshot(tuple(layers), meta, extras=tuple(sorted(extras, key=lambda r: r.name)))


def read_snapshot(path: str | os.PathLike, naming: NamingScheme = DEFAULT_NAMING) -> ModelSnapshot:
    records, metadata = read_container(path)
    return snapshot_from_records(records, metadata, naming)


def snapshot_records(snapshot: ModelSnapshot, naming: NamingScheme = DEFAULT_NAMING) -> list[TensorRecord]:
    records = list(snapshot.extras)
    for layer in snapshot.layers:
        records.append(TensorRecord.from_array(layer.path + naming.a_suffix, layer.A, layer.a_dtype))
        records.append(TensorRecord.from_array(layer.path + naming.b_suffix, layer.B, layer.b_dtype))
    return records


def write_snapshot(snapshot: ModelSnapshot, path: str | os.PathLike, naming: NamingScheme = DEFAULT_NAMING) -> None:
    write_container(path, snapshot_records(snapshot, naming), snapshot.meta.to_strings())


# --- manifests and indexes -------------------------------------------------


@dataclass(frozen=True)
class IndexEntry:
    path: Path
    micro_dataset_id: str
    label: int | None
    meta: SnapshotMeta

    def load(self, naming: NamingScheme = DEFAULT_NAMING) -> ModelSnapshot:
        return read_snapshot(self.path, naming).with_label(self.label)


@dataclass(frozen=True)
class SnapshotIndex:
    entries: tuple[IndexEntry, ...]

    def __len__(self):
        return len(self.entries)

    def __iter__(self):
        return iter(self.entries)

    @property
    def groups(self) -> dict[str, list[IndexEntry]]:
        """micro_dataset_id -> entries, keys in first-appearance order."""
        out: dict[str, list[IndexEntry]] = {}
        for entry in self.entries:
            out.setdefault(entry.micro_dataset_id, []).append(entry)
        return out

    def filter(self, keep: Callable[[IndexEntry], bool]) -> SnapshotIndex:
        return SnapshotIndex(tuple(e for e in self.entries if keep(e)))

    def select_groups(self, group_ids: Iterable[str]) -> SnapshotIndex:
        wanted = set(group_ids)
        return self.filter(lambda e: e.micro_dataset_id in wanted)


def _parse_int(value: str, column: str, line: int, *, positive=False, optional=False) -> int | None:
    value = value.strip()
    if not value:
        if optional:
            return None
        raise LabelParseError(f"manifest line {line}: empty {column}")
    try:
        parsed = int(value)
    except ValueError:
        raise LabelParseError(f"manifest line {line}: {column}={value!r} is not an integer") from None
    if positive and parsed < 1:
        raise LabelParseError(f"manifest line {line}: {column} must be positive, got {parsed}")
    return parsed


def parse_manifest(text: str, root: Path) -> SnapshotIndex:
    reader = csv.DictReader(io.StringIO(text))
    if reader.fieldnames is None or [f.strip() for f in reader.fieldnames] != MANIFEST_COLUMNS:
        raise ConfigError(f"manifest header must be {','.join(MANIFEST_COLUMNS)}, got {reader.fieldnames}")
    entries = []
    seen: set[Path] = set()
    for line, row in enumerate(reader, start=2):
        rel = (row["path"] or "").strip()
        if not rel:
            raise LabelParseError(f"manifest line {line}: empty path")
        path = (root / rel).resolve()
        if not path.is_file():
            raise MissingFile(f"manifest line {line}: {rel} not found under {root}")
        if path in seen:
            raise DuplicateEntry(f"manifest line {line}: {rel} listed twice")
        seen.add(path)
        micro = (row["micro_dataset_id"] or "").strip()
        if not micro:
            raise LabelParseError(f"manifest line {line}: empty micro_dataset_id")
        meta = SnapshotMeta(
            backbone_tag=(row["backbone_tag"] or "").strip(),
            lora_rank=_parse_int(row["lora_rank"] or "", "lora_rank", line, positive=True),
            micro_dataset_id=micro,
            seed=_parse_int(row["seed"] or "", "seed", line),
            step=_parse_int(row["step"] or "", "step", line),
        )
        label = _parse_int(row["label"] or "", "label", line, positive=True, optional=True)
        entries.append(IndexEntry(path, micro, label, meta))
    return SnapshotIndex(tuple(entries))


def build_index(root: str | os.PathLike, manifest: str | os.PathLike) -> SnapshotIndex:
    """Load a manifest whose paths are relative to ``root``."""
    try:
        text = Path(manifest).read_text(encoding="utf-8")
    except FileNotFoundError:
        raise MissingFile(f"manifest {manifest} not found") from None
    return parse_manifest(text, Path(root))


def load_manifest(manifest: str | os.PathLike) -> SnapshotIndex:
    """Load a manifest whose paths are relative to its own directory."""
    return build_index(Path(manifest).parent, manifest)


def format_manifest(rows: Iterable[dict]) -> str:
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=MANIFEST_COLUMNS, lineterminator="\n")
    writer.writeheader()
    for row in rows:
        writer.writerow({col: "" if row.get(col) is None else row[col] for col in MANIFEST_COLUMNS})
    return buf.getvalue()


def write_manifest(path: str | os.PathLike, rows: Iterable[dict]) -> None:
    with atomic_output(path, "w") as fh:
        fh.write(format_manifest(rows))
