"""Command-line interface: gen, inspect, extract, fit, predict, eval.

Exit status: 0 on success, 1 on runtime errors, 2 on usage errors.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import io
import logging
import sys
from pathlib import Path

from . import __version__
from .errors import ConfigError, ForensicsError
from .features import MatrixKind, Topology, build_tables, extract_features, parse_kinds, resolve_threads, write_feature_cache
from .harness import ExperimentConfig, export_report, load_config, run_experiment
from .predictors import Aggregation, PredictorKind, fit, load_model, predict, save_model
from .snapshot_io import load_manifest, read_snapshot
from .spectral import frobenius_stat
from .synthgen import GenConfig, generate_corpus

log = logging.getLogger("lora_forensics")

ALL_KINDS = (MatrixKind.A, MatrixKind.B, MatrixKind.BA, MatrixKind.FROB)


def _kinds_arg(text: str):
    try:
        return parse_kinds(text)
    except ValueError as exc:
        raise argparse.ArgumentTypeError(str(exc)) from None


def _predictor_arg(text: str) -> PredictorKind:
    try:
        return PredictorKind.parse(text)
    except ValueError as exc:
        raise argparse.ArgumentTypeError(str(exc)) from None


def _agg_arg(text: str) -> Aggregation:
    try:
        return Aggregation.parse(text)
    except ValueError as exc:
        raise argparse.ArgumentTypeError(str(exc)) from None


def _positive_int(text: str) -> int:
    try:
        value = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"{text!r} is not an integer") from None
    if value < 1:
        raise argparse.ArgumentTypeError(f"{value} must be >= 1")
    return value


def _int_list(text: str) -> list[int]:
    try:
        return [int(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"{text!r} is not a comma-separated integer list") from None


# --- commands ---------------------------------------------------------------


def cmd_gen(args) -> int:
    raw = load_config(args.config) if args.config else {}
    overrides = {
        "preset": args.preset,
        "seed": args.seed,
        "noise": args.noise,
        "n_micro_datasets": args.micro_datasets,
        "n_layers": args.layers,
        "d": args.d,
        "k": args.k,
        "r": args.rank,
        "class_set": args.classes,
    }
    raw.update({k: v for k, v in overrides.items() if v is not None})
    try:
        cfg = GenConfig.from_dict(raw)
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc
    corpus = generate_corpus(cfg, args.out, threads=args.threads)
    print(f"wrote {len(corpus.files)} snapshots and {corpus.manifest}")
    return 0


def inspect_rows(snapshot) -> list[dict]:
    feats = dict(extract_features(snapshot, ALL_KINDS))
    rows = []
    for i, layer in enumerate(snapshot.layers):
        s_f = frobenius_stat(layer.B, layer.A)
        for kind in ALL_KINDS:
            vec = feats[(i, kind)]
            rows.append(
                {
                    "layer_index": i,
                    "layer_path": layer.path,
                    "d": layer.d,
                    "k": layer.k,
                    "r": layer.rank,
                    "kind": kind.value,
                    "s_F": s_f,
                    "top_value": float(vec[0]) if len(vec) else 0.0,
                }
            )
    return rows


def cmd_inspect(args) -> int:
    snapshot = read_snapshot(args.snapshot)
    rows = inspect_rows(snapshot)
    if args.csv:
        buf = io.StringIO()
        writer = csv.DictWriter(buf, fieldnames=list(rows[0]), lineterminator="\n")
        writer.writeheader()
        for row in rows:
            writer.writerow({k: repr(v) if isinstance(v, float) else v for k, v in row.items()})
        sys.stdout.write(buf.getvalue())
        return 0
    meta = snapshot.meta
    print(f"snapshot: {args.snapshot}")
    print(f"layers: {snapshot.n_layers}  lora_rank: {meta.lora_rank}  backbone: {meta.backbone_tag or '-'}")
    print(f"{'idx':>4}  {'d':>5} {'k':>5} {'r':>3}  {'s_F':>12}  {'top A':>10} {'top B':>10} {'top BA':>10}  layer")
    for i in range(0, len(rows), len(ALL_KINDS)):
        row = rows[i]
        tops = {r["kind"]: r["top_value"] for r in rows[i : i + len(ALL_KINDS)]}
        print(
            f"{row['layer_index']:>4}  {row['d']:>5} {row['k']:>5} {row['r']:>3}  {row['s_F']:>12.6g}  "
            f"{tops['A']:>10.4g} {tops['B']:>10.4g} {tops['BA']:>10.4g}  {row['layer_path']}"
        )
    return 0


def cmd_extract(args) -> int:
    snapshot = read_snapshot(args.snapshot)
    feats = extract_features(snapshot, args.kinds)
    write_feature_cache(args.out, feats)
    print(f"wrote {len(feats)} feature vectors to {args.out}")
    return 0


def _fit_settings(args) -> dict:
    raw = load_config(args.config) if args.config else {}
    settings = {
        "predictor": PredictorKind.parse(raw.get("predictor", "LayerNN")),
        "aggregation": Aggregation.parse(raw.get("aggregation", "majority")),
        "kinds": parse_kinds(raw.get("kinds", "A,B,BA")),
        "ridge_lambda": float(raw.get("ridge_lambda", 1.0)),
        "gda_eps": float(raw.get("gda_eps", 1e-6)),
    }
    for key, value in (
        ("predictor", args.predictor),
        ("aggregation", args.agg),
        ("kinds", args.kinds),
        ("ridge_lambda", args.ridge_lambda),
        ("gda_eps", args.gda_eps),
    ):
        if value is not None:
            settings[key] = value
    if settings["predictor"] is PredictorKind.FROBENIUS_NN:
        settings["kinds"] = frozenset({MatrixKind.FROB})
    return settings


def cmd_fit(args) -> int:
    settings = _fit_settings(args)
    index = load_manifest(args.manifest)
    tables = build_tables(index, settings["kinds"], threads=args.threads)
    topology = Topology.of(index.entries[0].load())
    model = fit(
        settings["predictor"],
        tables,
        settings["aggregation"],
        ridge_lambda=settings["ridge_lambda"],
        gda_eps=settings["gda_eps"],
        topology=topology,
    )
    save_model(model, args.out)
    print(f"fitted {model.predictor.value} on {len(index)} snapshots, {model.n_votes} classifiers -> {args.out}")
    return 0


def cmd_predict(args) -> int:
    model = load_model(args.model)
    snapshot = read_snapshot(args.snapshot)
    result = predict(model, snapshot)
    print(f"predicted_size: {result.label}")
    if args.votes:
        for label, count in result.histogram().items():
            print(f"votes {label}: {count}")
    return 0


def cmd_eval(args) -> int:
    raw = load_config(args.config) if args.config else {}
    overrides = {
        "predictor": args.predictor,
        "aggregation": args.agg,
        "kinds": tuple(args.kinds) if args.kinds else None,
        "repeats": args.repeats,
        "n_train_sets": args.n_train_sets,
        "split_seed": args.split_seed,
    }
    raw.update({k: v for k, v in overrides.items() if v is not None})
    config = ExperimentConfig.from_dict(raw)
    index = load_manifest(args.manifest)
    digest = hashlib.sha256(Path(args.manifest).read_bytes()).hexdigest()
    report = run_experiment(config, index, threads=args.threads, timestamp=args.timestamp, manifest_digest=digest)
    export_report(report, args.out, args.format)
    agg = report.aggregate
    print(
        f"MAE {agg.mean['mae']:.4f}  MAPE {agg.mean['mape']:.2f}%  Acc {agg.mean['accuracy']:.2f}% "
        f"over {agg.repeat_count} repeat(s) -> {args.out}"
    )
    return 0


# --- parser -----------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--threads", type=_positive_int, default=None, help="worker threads (env LORA_FORENSICS_THREADS)")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="lora-forensics", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen", parents=[common], help="generate a synthetic snapshot corpus")
    p.add_argument("--config", help="JSON generator config")
    p.add_argument("--out", required=True, help="output directory (must not exist or be empty)")
    p.add_argument("--preset", choices=["separable", "noisy", "shape-coded"])
    p.add_argument("--seed", type=int)
    p.add_argument("--noise", type=float)
    p.add_argument("--micro-datasets", type=_positive_int)
    p.add_argument("--layers", type=_positive_int)
    p.add_argument("--d", type=_positive_int)
    p.add_argument("--k", type=_positive_int)
    p.add_argument("--rank", type=_positive_int)
    p.add_argument("--classes", type=_int_list)
    p.set_defaults(func=cmd_gen)

    p = sub.add_parser("inspect", parents=[common], help="summarize a snapshot's spectra")
    p.add_argument("snapshot")
    p.add_argument("--csv", action="store_true", help="one CSV row per (layer, kind)")
    p.set_defaults(func=cmd_inspect)

    p = sub.add_parser("extract", parents=[common], help="write a snapshot's feature cache")
    p.add_argument("--snapshot", required=True)
    p.add_argument("--kinds", type=_kinds_arg, default=parse_kinds("A,B,BA,FROB"))
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_extract)

    p = sub.add_parser("fit", parents=[common], help="fit a predictor on a labeled manifest")
    p.add_argument("--manifest", required=True)
    p.add_argument("--config", help="JSON with predictor/aggregation/kinds/ridge_lambda/gda_eps")
    p.add_argument("--predictor", type=_predictor_arg)
    p.add_argument("--agg", type=_agg_arg)
    p.add_argument("--kinds", type=_kinds_arg)
    p.add_argument("--ridge-lambda", type=float)
    p.add_argument("--gda-eps", type=float)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("predict", parents=[common], help="predict the dataset size of one snapshot")
    p.add_argument("--model", required=True)
    p.add_argument("--snapshot", required=True)
    p.add_argument("--votes", action="store_true", help="print the vote histogram")
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("eval", parents=[common], help="run a repeated split/fit/evaluate experiment")
    p.add_argument("--manifest", required=True)
    p.add_argument("--config", help="JSON experiment config")
    p.add_argument("--out", required=True)
    p.add_argument("--format", choices=["text", "csv"], default="text")
    p.add_argument("--predictor", type=_predictor_arg)
    p.add_argument("--agg", type=_agg_arg)
    p.add_argument("--kinds", type=_kinds_arg)
    p.add_argument("--repeats", type=_positive_int)
    p.add_argument("--n-train-sets", type=_positive_int)
    p.add_argument("--split-seed", type=int)
    p.add_argument("--timestamp", help="fixed provenance timestamp for reproducible report bytes")
    p.set_defaults(func=cmd_eval)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        args.threads = resolve_threads(args.threads)
    except ValueError:
        parser.error("LORA_FORENSICS_THREADS must be an integer")
    try:
        return args.func(args)
    except (ForensicsError, OSError, ValueError) as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1
