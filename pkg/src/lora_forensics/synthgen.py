"""Seeded synthetic LoRA corpora with a planted dataset-size signal.

A test instrument, not a model of real fine-tuning statistics: the only
thing it encodes is that update magnitudes shrink as the dataset grows.
Every snapshot's randomness derives from (seed, micro-dataset, label), so a
corpus is identical regardless of generation order or thread count.
"""

from __future__ import annotations

import json
import os
import shutil
import tempfile
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from enum import Enum
from pathlib import Path
from typing import Sequence

import numpy as np

from . import __version__
from .errors import ConfigError, DimError, IoFailure, LabelNotInClassSet
from .features import resolve_threads
from .snapshot_io import LoraLayer, ModelSnapshot, SnapshotMeta, format_manifest, write_snapshot

MANIFEST_NAME = "manifest.csv"
PROVENANCE_NAME = "generator.json"


class Preset(str, Enum):
    SEPARABLE = "separable"
    NOISY = "noisy"
    SHAPE_CODED = "shape-coded"


DEFAULT_NOISE = {Preset.SEPARABLE: 0.05, Preset.NOISY: 0.30, Preset.SHAPE_CODED: 0.05}


@dataclass(frozen=True)
class GenConfig:
    class_set: tuple[int, ...] = (1, 2, 3, 4, 5, 6)
    n_micro_datasets: int = 50
    n_layers: int = 8
    d: int = 64
    k: int = 64
    r: int = 8
    alpha: float = 1.0
    noise: float | None = None  # None -> preset default
    preset: Preset = Preset.SEPARABLE
    seed: int = 0
    backbone_tag: str = "synthetic"
    step: int = 1200
    dtype: str = "F32"

    def __post_init__(self):
        object.__setattr__(self, "preset", Preset(self.preset))
        object.__setattr__(self, "class_set", tuple(int(c) for c in self.class_set))
        if self.noise is None:
            object.__setattr__(self, "noise", DEFAULT_NOISE[self.preset])
        if not self.class_set or list(self.class_set) != sorted(set(self.class_set)) or self.class_set[0] < 1:
            raise ConfigError(f"class_set must be strictly ascending positive integers, got {self.class_set}")
        if self.alpha <= 0:
            raise ConfigError("alpha must be positive")
        if not 0 <= self.noise < 1:
            raise ConfigError("noise must lie in [0, 1)")
        if min(self.n_micro_datasets, self.n_layers, self.d, self.k, self.r) < 1:
            raise ConfigError("counts and dimensions must be positive")
        if self.r > min(self.d, self.k):
            raise DimError(f"rank {self.r} exceeds min(d, k) = {min(self.d, self.k)}")
        if self.dtype not in ("F16", "F32", "F64"):
            raise ConfigError(f"unsupported storage dtype {self.dtype}")

    @classmethod
    def from_dict(cls, raw: dict) -> GenConfig:
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(raw) - known
        if unknown:
            raise ConfigError(f"unknown generator config keys: {sorted(unknown)}")
        raw = dict(raw)
        if "class_set" in raw:
            raw["class_set"] = tuple(raw["class_set"])
        return cls(**raw)

    def to_dict(self) -> dict:
        out = asdict(self)
        out["preset"] = self.preset.value
        out["class_set"] = list(self.class_set)
        return out


def micro_dataset_id(index: int) -> str:
    return f"md{index:03d}"


def layer_path(index: int) -> str:
    return f"layers.{index:03d}.proj"


def layer_scales(cfg: GenConfig) -> np.ndarray:
    """Per-layer magnitude c_l, log-uniform in [0.5, 2], shared by every snapshot."""
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 1]))
    return np.exp(rng.uniform(np.log(0.5), np.log(2.0), cfg.n_layers))


def _shape_exponent(n: int, class_set: Sequence[int]) -> float:
    # steep decay for the smallest class, flat spectrum for the largest
    if len(class_set) == 1:
        return 1.0
    pos = list(class_set).index(n)
    return 2.0 * (len(class_set) - 1 - pos) / (len(class_set) - 1)


def target_spectrum(
    n: int,
    layer_index: int,
    cfg: GenConfig,
    noise_draw: np.ndarray | None = None,
    layer_scale: float | None = None,
) -> np.ndarray:
    """Planted spectrum for label ``n`` at one layer, sorted non-increasing.

    ``noise_draw`` holds the multiplicative perturbations eps_m (length r),
    zero when omitted. ``layer_scale`` overrides the corpus-wide c_l.
    """
    if n not in cfg.class_set:
        raise LabelNotInClassSet(f"label {n} not in {cfg.class_set}")
    c = layer_scales(cfg)[layer_index] if layer_scale is None else float(layer_scale)
    eps = np.zeros(cfg.r) if noise_draw is None else np.asarray(noise_draw, dtype=np.float64)
    if eps.shape != (cfg.r,):
        raise DimError(f"noise draw must have length {cfg.r}")
    m = np.arange(1, cfg.r + 1, dtype=np.float64)
    if cfg.preset is Preset.SHAPE_CODED:
        h = m ** -_shape_exponent(n, cfg.class_set)
        base = c * h / np.linalg.norm(h)
    else:
        base = c * float(n) ** -cfg.alpha / m
    return np.sort(base * (1.0 + eps))[::-1].copy()


def _orthonormal(rng: np.random.Generator, rows: int, cols: int) -> np.ndarray:
    q, _ = np.linalg.qr(rng.standard_normal((rows, cols)))
    return q


def synthesize_layer(
    spectrum: Sequence[float], d: int, k: int, r: int, seed: int | np.random.Generator, path: str = "layer"
) -> LoraLayer:
    """Factors B = U diag(sqrt s), A = diag(sqrt s) V^T whose product has singular values ``spectrum``."""
    s = np.asarray(spectrum, dtype=np.float64)
    if s.shape != (r,) or r > min(d, k) or r < 1:
        raise DimError(f"spectrum of length {s.size} incompatible with d={d}, k={k}, r={r}")
    if np.any(s < 0):
        raise DimError("spectrum values must be non-negative")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    U = _orthonormal(rng, d, r)
    V = _orthonormal(rng, k, r)
    root = np.sqrt(s)
    return LoraLayer(path, U * root, root[:, None] * V.T)


def synthesize_snapshot(cfg: GenConfig, micro_index: int, n: int) -> ModelSnapshot:
    """Snapshot of micro-dataset ``micro_index`` fine-tuned on ``n`` images (label attached)."""
    if n not in cfg.class_set:
        raise LabelNotInClassSet(f"label {n} not in {cfg.class_set}")
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 2, micro_index, n]))
    scales = layer_scales(cfg)
    layers = []
    for li in range(cfg.n_layers):
        eps = rng.uniform(-cfg.noise, cfg.noise, cfg.r)
        target = target_spectrum(n, li, cfg, eps, layer_scale=scales[li])
        layer = synthesize_layer(target, cfg.d, cfg.k, cfg.r, rng, layer_path(li))
        layers.append(replace(layer, b_dtype=cfg.dtype, a_dtype=cfg.dtype))
    meta = SnapshotMeta(
        backbone_tag=cfg.backbone_tag,
        lora_rank=cfg.r,
        micro_dataset_id=micro_dataset_id(micro_index),
        seed=cfg.seed,
        step=cfg.step,
    )
    return ModelSnapshot(tuple(layers), meta, label=n)


def snapshot_relpath(micro_index: int, n: int) -> str:
    return f"{micro_dataset_id(micro_index)}/n{n:04d}.safetensors"


@dataclass(frozen=True)
class GeneratedCorpus:
    root: Path
    manifest: Path
    config: GenConfig
    files: tuple[str, ...] = field(default=())


def generate_corpus(cfg: GenConfig, out_dir: str | os.PathLike, threads: int | None = 1) -> GeneratedCorpus:
    """Write n_micro_datasets x |class_set| snapshots, a manifest and a provenance file.

    Output goes to a temporary sibling directory first and is renamed into
    place only when complete. ``out_dir`` must not exist or be empty.
    """
    out = Path(out_dir)
    if out.exists() and (not out.is_dir() or any(out.iterdir())):
        raise IoFailure(f"{out} exists and is not an empty directory")
    jobs = [(i, n) for i in range(cfg.n_micro_datasets) for n in cfg.class_set]
    try:
        out.parent.mkdir(parents=True, exist_ok=True)
        staging = Path(tempfile.mkdtemp(prefix=f".{out.name}.", dir=out.parent))
    except OSError as exc:
        raise IoFailure(f"cannot create {out}: {exc}") from exc

    def work(job):
        i, n = job
        rel = snapshot_relpath(i, n)
        (staging / rel).parent.mkdir(parents=True, exist_ok=True)
        write_snapshot(synthesize_snapshot(cfg, i, n), staging / rel)
        return rel

    try:
        n_threads = resolve_threads(threads)
        if n_threads == 1:
            files = [work(job) for job in jobs]
        else:
            with ThreadPoolExecutor(max_workers=n_threads) as pool:
                files = list(pool.map(work, jobs))
        rows = [
            {
                "path": rel,
                "micro_dataset_id": micro_dataset_id(i),
                "label": n,
                "backbone_tag": cfg.backbone_tag,
                "lora_rank": cfg.r,
                "seed": cfg.seed,
                "step": cfg.step,
            }
            for rel, (i, n) in zip(files, jobs)
        ]
        (staging / MANIFEST_NAME).write_text(format_manifest(rows), encoding="utf-8")
        provenance = {"tool": "lora-forensics", "version": __version__, "config": cfg.to_dict()}
        (staging / PROVENANCE_NAME).write_text(json.dumps(provenance, indent=2, sort_keys=True) + "\n", encoding="utf-8")
        if out.exists():
            out.rmdir()
        os.replace(staging, out)
    except BaseException as exc:
        shutil.rmtree(staging, ignore_errors=True)
        if isinstance(exc, OSError):
            raise IoFailure(f"cannot write corpus to {out}: {exc}") from exc
        raise
    return GeneratedCorpus(out, out / MANIFEST_NAME, cfg, tuple(files))
