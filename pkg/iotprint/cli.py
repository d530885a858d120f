#!/usr/bin/env python3
"""
iotprint command line
------------------------------------------
Subcommands (each writes into --out, by default a folder under ./data):

  split          pcaps → session store (sessions.parquet + payload files)
  encode         session store → IDX dataset (+ optional PGM/PNG/bin dumps)
  train          dataset → model, reports, history (Experiment 1 or 2)
  eval           re-score a finished run from its saved splits and model
  detect-unknown apply a saved threshold profile to pcaps or a dataset
  run            split → encode → train → eval with a timing summary

Exit codes: 0 success, 1 usage/config error, 2 data/format/I-O error.
"""

from __future__ import annotations
import argparse
import sys
from pathlib import Path
from typing import Any, Sequence

import numpy as np
import pandas as pd

from iotprint.capture_ingest import group_by_mac, load_mac_map, split_pcap_files
from iotprint.classify import (
    DatasetBundle,
    Experiment2Result,
    ThresholdProfile,
    classify_batch,
    run_experiment1,
    run_experiment2,
    run_experiment2_sweep,
    score_experiment2,
    sweep_mean_accuracy,
)
from iotprint.config import Config
from iotprint.dataset import (
    DATASET_MANIFEST,
    LabeledDataset,
    build_dataset,
    load_dataset,
    save_dataset,
    split,
)
from iotprint.errors import ConfigError, DataError
from iotprint.fingerprint import extract_payload, normalize, write_bin, write_pgm, write_png
from iotprint.neuralnet import load_model, model_digest, predict, save_model, scale_bytes
from iotprint.pipeline_config import PipelineConfig
from iotprint.published import (
    EXPERIMENT1_TEST_ACCURACY,
    REFERENCE_MAC_MAP,
    held_out_row,
)
from iotprint.report import (
    ConfusionMatrix,
    ExperimentReport,
    emit_report,
    load_report,
    overall_accuracy,
    write_history_csv,
)
from iotprint.storage import (
    SPLIT_MANIFEST,
    read_json,
    read_session_store,
    slugify,
    utc_stamp,
    write_json,
    write_session_store,
)

logger = Config.setup_logger(__name__)

EXIT_OK, EXIT_USAGE, EXIT_DATA = 0, 1, 2

RUN_MANIFEST = "run_manifest.json"
MODEL_FILE = "model.json"
PROFILE_FILE = "profile.json"
SPLITS_DIR = "splits"
SPLIT_PREFIXES = {"train": "train-", "validation": "validation-", "test": "test-"}
DEFAULT_OUT = {
    "split": "sessions",
    "encode": "dataset",
    "train": "run",
    "detect-unknown": "verdicts",
    "run": "pipeline",
}


class _Parser(argparse.ArgumentParser):
    """argparse with the usage-error exit code set to 1."""

    def error(self, message: str) -> None:  # type: ignore[override]
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


# -------------------- CONFIG RESOLUTION --------------------

def resolve_config(args: argparse.Namespace) -> PipelineConfig:
    """Config file (if any), then CLI overrides."""
    config = PipelineConfig.from_file(args.config) if getattr(args, "config", None) else PipelineConfig()
    if getattr(args, "seed", None) is not None:
        config = config.with_seed(args.seed)
    if getattr(args, "epochs", None) is not None:
        config = config.with_epochs(args.epochs)
    changes: dict[str, Any] = {}
    if getattr(args, "threshold_grid_step", None) is not None:
        changes["threshold_grid_step"] = args.threshold_grid_step
    if getattr(args, "strict", False):
        changes["strict"] = True
    if getattr(args, "min_sessions", None) is not None:
        changes["min_sessions"] = args.min_sessions
    if getattr(args, "label_order", None):
        order = args.label_order
        changes["label_order"] = tuple(s.strip() for s in order.split(",")) if "," in order else order
    if changes:
        try:
            config = config.with_experiment(**changes)
        except ValueError as e:
            raise ConfigError(str(e)) from e
    config.validate()
    return config


def resolve_mac_map(spec: str | None) -> dict[str, str] | None:
    if spec is None:
        return None
    if spec == "reference":
        return dict(REFERENCE_MAC_MAP)
    path = Path(spec)
    if not path.exists():
        raise ConfigError(f"MAC map not found: {path}")
    return load_mac_map(path)


# -------------------- SPLIT --------------------

def cmd_split(args: argparse.Namespace) -> int:
    out_dir = Path(args.out)
    mac_map = resolve_mac_map(args.mac_map)
    collapse = args.non_iot or args.mac_map == "reference"

    sessions, stats, raw_by_file = split_pcap_files([Path(p) for p in args.pcaps])
    grouped = group_by_mac(sessions, mac_map, collapse_non_iot=collapse)
    rows = write_session_store(out_dir, grouped, raw_by_file, emit_pcaps=args.pcaps_out)

    manifest = {
        "inputs": [Path(p).name for p in args.pcaps],
        "session_count": len(rows),
        "sessions_per_label": {label: len(items) for label, items in grouped.items()},
        "discarded_udp_flows": stats.udp_flows,
        "stats": stats.to_dict(),
        "mac_map": args.mac_map,
        "collapse_non_iot": collapse,
        "created_at": utc_stamp(),
    }
    write_json(out_dir / SPLIT_MANIFEST, manifest)
    logger.info("Split %d file(s) into %d sessions (%d UDP flows discarded)",
                len(args.pcaps), len(rows), stats.udp_flows)
    return EXIT_OK


# -------------------- ENCODE --------------------

def cmd_encode(args: argparse.Namespace) -> int:
    config = resolve_config(args)
    out_dir = Path(args.out)
    sessions = read_session_store(Path(args.sessions))
    if not sessions:
        raise DataError(f"{args.sessions}: no sessions to encode")

    dataset, rows, counts = build_dataset(
        sessions, config.experiment.min_sessions, config.experiment.label_order,
    )
    order = config.experiment.label_order
    save_dataset(dataset, out_dir, rows=rows, manifest={
        "min_sessions": config.experiment.min_sessions,
        "label_order": list(order) if isinstance(order, tuple) else order,
        "counts_before_filter": dict(sorted(counts.items())),
    })

    if args.images or args.png or args.bins:
        for row, session in enumerate(rows):
            data = dataset.features[row].tobytes()
            slug = slugify(dataset.label_names[int(dataset.labels[row])])
            if args.images:
                write_pgm(data, out_dir / "images" / slug / f"{row:07d}.pgm")
            if args.png:
                write_png(data, out_dir / "images" / slug / f"{row:07d}.png")
            if args.bins:
                write_bin(normalize(session.payload), out_dir / "bins" / slug / f"{row:07d}.bin")

    logger.info("Encoded %d fingerprints over %d class(es) into %s",
                len(dataset), len(dataset.label_names), out_dir)
    return EXIT_OK


# -------------------- TRAIN --------------------

def _save_splits(bundle: DatasetBundle, run_dir: Path) -> None:
    for tag, part in (("train", bundle.train), ("validation", bundle.validation), ("test", bundle.test)):
        if len(part):
            save_dataset(part, run_dir / SPLITS_DIR, prefix=SPLIT_PREFIXES[tag])


def _load_test_split(splits_dir: Path) -> LabeledDataset:
    if not (splits_dir / f"{SPLIT_PREFIXES['test']}{DATASET_MANIFEST}").exists():
        raise DataError(f"{splits_dir}: saved test split is missing")
    return load_dataset(splits_dir, SPLIT_PREFIXES["test"])


def _sample_fingerprints(test_set: LabeledDataset, per_class: int) -> dict[str, list[bytes]]:
    samples: dict[str, list[bytes]] = {}
    for index, name in enumerate(test_set.label_names):
        rows = np.flatnonzero(test_set.labels == index)[:per_class]
        if len(rows):
            samples[name] = [test_set.features[r].tobytes() for r in rows]
    return samples


def _train_experiment1(bundle: DatasetBundle, config: PipelineConfig, run_dir: Path, args: argparse.Namespace) -> dict:
    result = run_experiment1(bundle, config.settings())
    notes = {"published_test_accuracy": EXPERIMENT1_TEST_ACCURACY} if args.strict else {}
    report = ExperimentReport("experiment1", result.confusion, result.epochs, config.seeds(), None, notes)
    if result.model is not None:
        save_model(result.model, run_dir / MODEL_FILE, config.settings().training)
        write_history_csv(result.history, run_dir / "history.csv")
        if result.selection_history:
            write_history_csv(result.selection_history, run_dir / "selection_history.csv")
    samples = _sample_fingerprints(bundle.test, args.samples) if args.samples else None
    emit_report(report, run_dir, samples)
    return {
        "experiment": 1,
        "epochs": result.epochs,
        "accuracy": overall_accuracy(result.confusion),
        "model_digest": model_digest(result.model) if result.model is not None else None,
    }


def _write_experiment2(result: Experiment2Result, config: PipelineConfig, run_dir: Path,
                       args: argparse.Namespace) -> dict:
    settings = config.settings()
    excluded = result.profile.excluded_label
    save_model(result.model, run_dir / MODEL_FILE, settings.training)
    result.profile.save(run_dir / PROFILE_FILE)
    write_history_csv(result.history, run_dir / "history.csv")
    if result.selection_history:
        write_history_csv(result.selection_history, run_dir / "selection_history.csv")

    threshold = {"value": result.profile.threshold, "grid_step": settings.threshold_grid_step,
                 "excluded_label": excluded}
    published = held_out_row(excluded)
    notes: dict[str, Any] = {"removed_overlap": result.removed_overlap}
    if published is not None and args.strict:
        notes["published"] = published._asdict()
    report = ExperimentReport("experiment2", result.confusion, result.profile.epochs, config.seeds(), threshold, notes)
    emit_report(report, run_dir)
    return {
        "experiment": 2,
        "excluded_label": excluded,
        "epochs": result.profile.epochs,
        "threshold": result.profile.threshold,
        "accuracy": overall_accuracy(result.confusion),
        "model_digest": result.profile.model_ref,
    }


def _write_run_manifest(run_dir: Path, config: PipelineConfig, dataset_dir: Path, splits_dir: str,
                        label_names: Sequence[str], summary: dict) -> None:
    write_json(run_dir / RUN_MANIFEST, {
        "dataset": str(dataset_dir),
        "splits": splits_dir,
        "label_names": list(label_names),
        "config": config.to_dict(),
        "seeds": config.seeds(),
        **summary,
        "created_at": utc_stamp(),
    })


def _check_excluded(label: str, label_names: Sequence[str], non_iot_label: str) -> None:
    if label == non_iot_label:
        raise ConfigError(f"--exclude must name an IoT device, not {label!r}")
    if label not in label_names:
        raise ConfigError(f"--exclude {label!r} is not a label in the dataset ({', '.join(label_names)})")


def cmd_train(args: argparse.Namespace) -> int:
    config = resolve_config(args)
    run_dir = Path(args.out)
    dataset_dir = Path(args.dataset)
    if args.experiment == 1 and args.exclude:
        raise ConfigError("--exclude only applies to --experiment 2")
    if args.experiment == 2 and not args.exclude:
        raise ConfigError("--experiment 2 needs --exclude LABEL (or 'all')")

    dataset = load_dataset(dataset_dir)
    if args.experiment == 2 and args.exclude != "all":
        _check_excluded(args.exclude, dataset.label_names, config.experiment.non_iot_label)
    bundle = DatasetBundle(*split(dataset, config.split))
    _save_splits(bundle, run_dir)

    if args.experiment == 1:
        summary = _train_experiment1(bundle, config, run_dir, args)
        _write_run_manifest(run_dir, config, dataset_dir, SPLITS_DIR, bundle.label_names, summary)
        return EXIT_OK

    if args.exclude != "all":
        result = run_experiment2(bundle, args.exclude, config.settings())
        summary = _write_experiment2(result, config, run_dir, args)
        _write_run_manifest(run_dir, config, dataset_dir, SPLITS_DIR, bundle.label_names, summary)
        return EXIT_OK

    def write_label_run(label: str, result: Experiment2Result) -> None:
        target_dir = run_dir / slugify(label)
        summary = _write_experiment2(result, config, target_dir, args)
        _write_run_manifest(target_dir, config, dataset_dir, f"../{SPLITS_DIR}", bundle.label_names, summary)

    results = run_experiment2_sweep(bundle, config.settings(), on_result=write_label_run)
    write_json(run_dir / "sweep.json", {
        "accuracy": {label: overall_accuracy(r.confusion) for label, r in results.items()},
        "mean_accuracy": sweep_mean_accuracy(results),
    })
    return EXIT_OK


# -------------------- EVAL --------------------

def cmd_eval(args: argparse.Namespace) -> int:
    run_dir = Path(args.run_dir)
    manifest = read_json(run_dir / RUN_MANIFEST)
    original = load_report(run_dir)
    test_set = _load_test_split(run_dir / manifest["splits"])

    model_path = run_dir / MODEL_FILE
    if manifest["experiment"] == 1:
        if model_path.exists():
            predicted = predict(load_model(model_path), scale_bytes(test_set.features))
            cm = ConfusionMatrix.from_predictions(test_set.labels, predicted, test_set.label_names)
        else:
            cm = ConfusionMatrix(np.array([[len(test_set)]]), test_set.label_names)
    else:
        profile = ThresholdProfile.load(run_dir / PROFILE_FILE)
        model = load_model(model_path)
        cm = score_experiment2(model, test_set, profile.excluded_label, profile.threshold,
                               manifest["config"]["experiment"]["non_iot_label"])

    if cm != original.confusion:
        logger.warning("Re-scored confusion matrix differs from the saved report in %s", run_dir)
    report = ExperimentReport(original.experiment, cm, original.epochs, original.seeds,
                              original.threshold, original.notes)
    out_dir = Path(args.out) if args.out else run_dir / "eval"
    emit_report(report, out_dir)
    return EXIT_OK


# -------------------- DETECT-UNKNOWN --------------------

def _detection_inputs(inputs: Sequence[str]) -> tuple[np.ndarray, list[dict[str, Any]]]:
    """Fingerprints and their provenance from one dataset directory or a list of pcaps."""
    if len(inputs) == 1 and (Path(inputs[0]) / DATASET_MANIFEST).exists():
        dataset = load_dataset(Path(inputs[0]))
        meta = [
            {"source": inputs[0], "session": str(row),
             "true_label": dataset.label_names[int(dataset.labels[row])]}
            for row in range(len(dataset))
        ]
        return dataset.features, meta

    sessions, _, _ = split_pcap_files([Path(p) for p in inputs])
    features, meta = [], []
    for session in sessions:
        payload = extract_payload(session)
        if not payload:
            continue
        features.append(normalize(payload).as_array())
        meta.append({"source": session.file_id, "session": str(session.key),
                     "initiator_mac": session.initiator_mac_str})
    skipped = len(sessions) - len(features)
    if skipped:
        logger.info("Skipped %d session(s) with no TCP payload", skipped)
    if not features:
        raise DataError("no sessions with payload to classify")
    return np.stack(features), meta


def cmd_detect_unknown(args: argparse.Namespace) -> int:
    profile_path = Path(args.profile)
    profile = ThresholdProfile.load(profile_path)
    model = load_model(profile_path.parent / MODEL_FILE)
    if model_digest(model) != profile.model_ref:
        raise DataError(f"{profile_path.parent / MODEL_FILE} does not match the profile's model")

    features, meta = _detection_inputs(args.inputs)
    verdicts = classify_batch(model, features, profile.threshold)
    rows = []
    for info, verdict in zip(meta, verdicts):
        decision = profile.known_labels[verdict.class_index] if verdict.is_known else Config.UNKNOWN_LABEL
        rows.append({**info, "decision": decision, "max_prob": round(verdict.max_prob, 6)})

    out_dir = Path(args.out)
    write_json(out_dir / "verdicts.json", {
        "profile": profile.to_dict(),
        "verdicts": rows,
        "unknown_count": sum(1 for v in verdicts if not v.is_known),
    })
    out_dir.mkdir(parents=True, exist_ok=True)
    pd.DataFrame(rows).to_csv(out_dir / "verdicts.csv", index=False)
    logger.info("Classified %d session(s): %d unknown", len(rows), sum(1 for v in verdicts if not v.is_known))
    return EXIT_OK


# -------------------- RUN --------------------

def cmd_run(args: argparse.Namespace) -> int:
    from iotprint.pipeline_runner import run_pipeline

    return run_pipeline(args)


# -------------------- PARSER --------------------

def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--config", help="JSON pipeline config")
    common.add_argument("--seed", type=int, help="seed for split, init and shuffling")
    common.add_argument("--out", help="output directory (default: a folder under ./data)")
    common.add_argument("--log-file", help="also log to this file")

    mac = _Parser(add_help=False)
    mac.add_argument("--mac-map", help="JSON MAC→label map, or 'reference'")
    mac.add_argument("--non-iot", action="store_true", help="collapse unmapped MACs into the non-IoT class")
    mac.add_argument("--pcaps", dest="pcaps_out", action="store_true", help="also write one pcap per session")

    encode = _Parser(add_help=False)
    encode.add_argument("--images", action="store_true", help="write PGM images")
    encode.add_argument("--png", action="store_true", help="write PNG images")
    encode.add_argument("--bins", action="store_true", help="write raw 784-byte bin files")
    encode.add_argument("--min-sessions", type=int, help="keep devices with more sessions than this")
    encode.add_argument("--label-order", help="'alphabetical', 'reference', or comma-separated labels")

    train = _Parser(add_help=False)
    train.add_argument("--experiment", type=int, choices=(1, 2), default=1)
    train.add_argument("--exclude", help="held-out label for experiment 2, or 'all'")
    train.add_argument("--epochs", type=int, help="fixed epoch count (skips epoch selection)")
    train.add_argument("--strict", action="store_true", help="require the published 10-class setup")
    train.add_argument("--threshold-grid-step", type=float)
    train.add_argument("--samples", type=int, default=0, help="sample images per class in the report")

    parser = _Parser(prog="iotprint", description="IoT device fingerprinting from TCP session payloads")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("split", parents=[common, mac], help="split pcaps into sessions")
    p.add_argument("pcaps", nargs="+")
    p.set_defaults(func=cmd_split)

    p = sub.add_parser("encode", parents=[common, encode], help="build an IDX dataset from sessions")
    p.add_argument("sessions")
    p.set_defaults(func=cmd_encode)

    p = sub.add_parser("train", parents=[common, train], help="train and report an experiment")
    p.add_argument("dataset")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="re-score a finished run")
    p.add_argument("run_dir")
    p.add_argument("--out", help="report directory (default: RUN_DIR/eval)")
    p.add_argument("--log-file")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("detect-unknown", parents=[common], help="apply a threshold profile")
    p.add_argument("--profile", required=True)
    p.add_argument("inputs", nargs="+", help="pcap files or one dataset directory")
    p.set_defaults(func=cmd_detect_unknown)

    p = sub.add_parser("run", parents=[common, mac, encode, train], help="split → encode → train → eval")
    p.add_argument("pcaps", nargs="+")
    p.set_defaults(func=cmd_run)
    return parser


# -------------------- MAIN --------------------

def main(argv: Sequence[str] | None = None) -> int:
    Config.from_env()
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.command in DEFAULT_OUT and args.out is None:
        args.out = str(Config.DATA_DIR / DEFAULT_OUT[args.command])
    if getattr(args, "log_file", None):
        Config.setup_logger(__name__, Path(args.log_file))
    try:
        return args.func(args)
    except ConfigError as e:
        logger.error("Configuration error: %s", e)
        return EXIT_USAGE
    except DataError as e:
        logger.error("Data error: %s", e)
        return EXIT_DATA
    except OSError as e:
        logger.error("I/O error: %s", e)
        return EXIT_DATA
    finally:
        Config.close_log_files()


if __name__ == "__main__":
    sys.exit(main())
