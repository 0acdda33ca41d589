"""Recover LoRA fine-tuning dataset sizes from weight spectra."""

__version__ = "0.1.0"

from .errors import ForensicsError  # noqa: E402
from .features import MatrixKind, SlotKey, build_tables, extract_features  # noqa: E402
from .harness import ExperimentConfig, run_experiment, split_by_micro_dataset  # noqa: E402
from .metrics import aggregate, evaluate  # noqa: E402
from .predictors import Aggregation, PredictorKind, fit, nearest_neighbor, predict  # noqa: E402
from .snapshot_io import build_index, read_snapshot, write_snapshot  # noqa: E402
from .spectral import factor_spectrum, frobenius_stat, product_spectrum  # noqa: E402

__all__ = [
    "Aggregation",
    "ExperimentConfig",
    "ForensicsError",
    "MatrixKind",
    "PredictorKind",
    "SlotKey",
    "aggregate",
    "build_index",
    "build_tables",
    "evaluate",
    "extract_features",
    "factor_spectrum",
    "fit",
    "frobenius_stat",
    "nearest_neighbor",
    "predict",
    "product_spectrum",
    "read_snapshot",
    "run_experiment",
    "split_by_micro_dataset",
    "write_snapshot",
]
