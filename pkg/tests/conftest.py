from fractions import Fraction

import numpy as np
import pytest

from lora_forensics.snapshot_io import LoraLayer, ModelSnapshot, SnapshotMeta
from lora_forensics.synthgen import GenConfig, generate_corpus


def f32(x):
    """Round to values exactly representable in float32 storage."""
    return np.asarray(x, dtype=np.float32).astype(np.float64)


def random_layer(rng, path, d=None, k=None, r=None, dtype="F32"):
    r = r or int(rng.integers(1, 5))
    d = d or int(rng.integers(r, r + 6))
    k = k or int(rng.integers(r, r + 6))
    B, A = rng.standard_normal((d, r)), rng.standard_normal((r, k))
    if dtype != "F64":
        B, A = f32(B), f32(A)
    return LoraLayer(path, B, A, b_dtype=dtype, a_dtype=dtype)


def random_snapshot(rng, n_layers=None, r=None, label=None, dtype="F32"):
    n_layers = n_layers or int(rng.integers(1, 6))
    r = r or int(rng.integers(1, 5))
    layers = [random_layer(rng, f"blk.{i}.attn", r=r, dtype=dtype) for i in range(n_layers)]
    meta = SnapshotMeta(
        backbone_tag="toy",
        lora_rank=r,
        micro_dataset_id=f"md{int(rng.integers(100))}",
        seed=int(rng.integers(1000)),
        step=int(rng.integers(1, 5000)),
    )
    return ModelSnapshot(tuple(layers), meta, label=label)


SMALL_GEN = dict(n_micro_datasets=20, n_layers=3, d=12, k=10, r=3)


@pytest.fixture(scope="session")
def small_corpus(tmp_path_factory):
    """20 micro-datasets x 6 classes, separable, tiny layers."""
    return generate_corpus(GenConfig(**SMALL_GEN, seed=3), tmp_path_factory.mktemp("corpus") / "separable")


def scan_oracle(query, X):
    """Exhaustive scan with exact rational distances; first minimum wins."""
    best, best_idx = None, -1
    for i, row in enumerate(X):
        dist = sum((Fraction(float(q)) - Fraction(float(x))) ** 2 for q, x in zip(query, row))
        if best is None or dist < best:
            best, best_idx = dist, i
    return best_idx


VERDICTS: dict[int, str] = {}


class Verdict:
    def __init__(self):
        self.number = None

    def record(self, number: int, title: str, ok: bool, detail: str = "") -> None:
        self.number = number
        line = f"criterion {number:>2} {'PASS' if ok else 'FAIL'}: {title}" + (f" ({detail})" if detail else "")
        VERDICTS[number] = line
        print(line)
        assert ok, line


@pytest.fixture
def verdict(request):
    v = Verdict()
    yield v
    marker = request.node.get_closest_marker("criterion")
    if marker and v.number is None:
        VERDICTS[marker.args[0]] = f"criterion {marker.args[0]:>2} FAIL: {request.node.name} raised before a verdict"


def pytest_terminal_summary(terminalreporter):
    if VERDICTS:
        terminalreporter.section("acceptance criteria")
        for n in sorted(VERDICTS):
            terminalreporter.write_line(VERDICTS[n])
