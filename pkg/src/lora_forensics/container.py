"""Binary tensor container (safetensors-compatible layout).

Layout: an 8-byte little-endian unsigned header length ``N``, ``N`` bytes of
UTF-8 JSON mapping tensor names to ``{"dtype", "shape", "data_offsets"}``,
then the raw little-endian, row-major byte buffer. An optional
``"__metadata__"`` entry maps strings to strings.
"""

from __future__ import annotations

import json
import os
import struct
import tempfile
from contextlib import contextmanager
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator, Mapping

import numpy as np

from .errors import IoFailure, MalformedHeader, OverlappingOffsets

METADATA_KEY = "__metadata__"
MAX_HEADER_BYTES = 100 * 1024 * 1024

# BF16 has no numpy dtype; its payload is carried as raw uint16 bit patterns.
_DTYPES: dict[str, np.dtype] = {
    "F16": np.dtype("<f2"),
    "BF16": np.dtype("<u2"),
    "F32": np.dtype("<f4"),
    "F64": np.dtype("<f8"),
    "I64": np.dtype("<i8"),
}


@dataclass(frozen=True)
class TensorRecord:
    name: str
    dtype: str
    shape: tuple[int, ...]
    data: np.ndarray  # stored representation, already shaped

    def __post_init__(self):
        if not self.name:
            raise MalformedHeader("tensor name must be non-empty")
        if self.dtype not in _DTYPES:
            raise MalformedHeader(f"{self.name}: unsupported dtype {self.dtype!r}")
        if int(np.prod(self.shape, dtype=np.int64)) != self.data.size:
            raise MalformedHeader(f"{self.name}: shape {self.shape} does not match {self.data.size} elements")

    def to_float64(self) -> np.ndarray:
        if self.dtype == "BF16":
            widened = self.data.astype(np.uint32) << 16
            return widened.view(np.float32).astype(np.float64).reshape(self.shape)
        return self.data.astype(np.float64).reshape(self.shape)

    @classmethod
    def from_array(cls, name: str, values: np.ndarray, dtype: str) -> TensorRecord:
        """Encode ``values`` into storage dtype ``dtype``."""
        values = np.asarray(values)
        if dtype == "BF16":
            # round-to-nearest-even on the upper 16 bits of the float32 pattern
            bits = np.ascontiguousarray(values, dtype=np.float32).view(np.uint32)
            rounding = ((bits >> 16) & 1) + 0x7FFF
            data = ((bits + rounding) >> 16).astype(np.uint16)
        elif dtype in _DTYPES:
            data = np.ascontiguousarray(values, dtype=_DTYPES[dtype])
        else:
            raise MalformedHeader(f"{name}: unsupported dtype {dtype!r}")
        return cls(name, dtype, tuple(int(s) for s in values.shape), data.reshape(values.shape))


def _parse_header(raw: bytes, buffer_len: int) -> tuple[dict, dict[str, str]]:
    try:
        header = json.loads(raw.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise MalformedHeader(f"header is not valid UTF-8 JSON: {exc}") from None
    if not isinstance(header, dict):
        raise MalformedHeader("header must be a JSON object")

    metadata = header.pop(METADATA_KEY, None) or {}
    if not isinstance(metadata, dict) or not all(
        isinstance(k, str) and isinstance(v, str) for k, v in metadata.items()
    ):
        raise MalformedHeader("__metadata__ must map strings to strings")

    for name, entry in header.items():
        if not name:
            raise MalformedHeader("empty tensor name")
        if not isinstance(entry, dict):
            raise MalformedHeader(f"{name}: entry must be an object")
        dtype, shape, offsets = entry.get("dtype"), entry.get("shape"), entry.get("data_offsets")
        if dtype not in _DTYPES:
            raise MalformedHeader(f"{name}: unsupported dtype {dtype!r}")
        if not isinstance(shape, list) or not all(isinstance(s, int) and s >= 0 for s in shape):
            raise MalformedHeader(f"{name}: bad shape {shape!r}")
        if (
            not isinstance(offsets, list)
            or len(offsets) != 2
            or not all(isinstance(o, int) for o in offsets)
            or not 0 <= offsets[0] <= offsets[1] <= buffer_len
        ):
            raise MalformedHeader(f"{name}: bad data_offsets {offsets!r}")
        nbytes = int(np.prod(shape, dtype=np.int64)) * _DTYPES[dtype].itemsize
        if offsets[1] - offsets[0] != nbytes:
            raise MalformedHeader(f"{name}: byte range {offsets} does not hold shape {shape} of {dtype}")

    spans = sorted((entry["data_offsets"][0], entry["data_offsets"][1], name) for name, entry in header.items())
    for (_, prev_end, prev), (begin, _, name) in zip(spans, spans[1:]):
        if begin < prev_end:
            raise OverlappingOffsets(f"byte ranges of {prev!r} and {name!r} collide")
    return header, metadata


def decode(blob: bytes) -> tuple[dict[str, TensorRecord], dict[str, str]]:
    """Parse a container from memory. Returns (records by name, metadata)."""
    if len(blob) < 8:
        raise MalformedHeader("file shorter than the 8-byte length prefix")
    (n,) = struct.unpack("<Q", blob[:8])
    if n > MAX_HEADER_BYTES or 8 + n > len(blob):
        raise MalformedHeader(f"header length {n} exceeds file size {len(blob)}")
    buffer = memoryview(blob)[8 + n :]
    header, metadata = _parse_header(blob[8 : 8 + n], len(buffer))

    records = {}
    for name, entry in header.items():
        begin, end = entry["data_offsets"]
        dt = _DTYPES[entry["dtype"]]
        data = np.frombuffer(buffer[begin:end], dtype=dt).reshape(entry["shape"])
        records[name] = TensorRecord(name, entry["dtype"], tuple(entry["shape"]), data)
    return records, metadata


def encode(records: Mapping[str, TensorRecord] | list[TensorRecord], metadata: Mapping[str, str] | None = None) -> bytes:
    """Serialize records canonically: sorted names, contiguous offsets, compact JSON."""
    if not isinstance(records, Mapping):
        records = {r.name: r for r in records}
    header: dict = {}
    if metadata:
        header[METADATA_KEY] = {str(k): str(v) for k, v in metadata.items()}
    chunks = []
    offset = 0
    for name in sorted(records):
        rec = records[name]
        payload = np.ascontiguousarray(rec.data, dtype=_DTYPES[rec.dtype]).tobytes()
        header[name] = {"dtype": rec.dtype, "shape": list(rec.shape), "data_offsets": [offset, offset + len(payload)]}
        chunks.append(payload)
        offset += len(payload)
    text = json.dumps(header, sort_keys=True, separators=(",", ":"), ensure_ascii=False).encode("utf-8")
    text += b" " * (-len(text) % 8)
    return struct.pack("<Q", len(text)) + text + b"".join(chunks)


def read_container(path: str | os.PathLike) -> tuple[dict[str, TensorRecord], dict[str, str]]:
    try:
        blob = Path(path).read_bytes()
    except OSError as exc:
        raise IoFailure(f"cannot read {path}: {exc}") from exc
    return decode(blob)


@contextmanager
def atomic_output(path: str | os.PathLike, mode: str = "wb") -> Iterator:
    """Open a temp file beside ``path``; rename over it only if the block succeeds."""
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        fd, tmp = tempfile.mkstemp(prefix=f".{path.name}.", suffix=".tmp", dir=path.parent)
    except OSError as exc:
        raise IoFailure(f"cannot write {path}: {exc}") from exc
    try:
        encoding = None if "b" in mode else "utf-8"
        newline = None if "b" in mode else ""
        with os.fdopen(fd, mode, encoding=encoding, newline=newline) as fh:
            yield fh
        os.replace(tmp, path)
    except BaseException as exc:
        try:
            os.unlink(tmp)
        except OSError:
            pass
        if isinstance(exc, OSError):
            raise IoFailure(f"cannot write {path}: {exc}") from exc
        raise


def write_container(path: str | os.PathLike, records, metadata: Mapping[str, str] | None = None) -> None:
    blob = encode(records, metadata)
    with atomic_output(path) as fh:
        fh.write(blob)
