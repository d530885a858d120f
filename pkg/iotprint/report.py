"""
Evaluation Reports
------------------
Confusion matrices, per-class and support-weighted precision/recall/F1, and
the report artifacts written for every experiment run:

  • report.json: versioned machine-readable results (no timestamps)
  • report.txt: aligned per-class table with weighted averages
  • confusion.csv: the matrix with actual classes as rows
  • samples/: optional per-class example fingerprints as PGM images
"""

from __future__ import annotations
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Mapping, NamedTuple, Sequence

import numpy as np
import pandas as pd

from iotprint.config import Config
from iotprint.errors import DataError, FormatError, ShapeError
from iotprint.fingerprint import write_pgm
from iotprint.storage import read_json, slugify, write_json, write_text

logger = Config.setup_logger(__name__)

REPORT_SCHEMA_VERSION: int = 1
REPORT_JSON = "report.json"
REPORT_TXT = "report.txt"
CONFUSION_CSV = "confusion.csv"
HISTORY_CSV = "history.csv"
UNKNOWN_SUFFIX = " (unknown)"


# -------------------- TYPES --------------------

@dataclass(eq=False)
class ConfusionMatrix:
    counts: np.ndarray  # rows = actual, columns = predicted
    class_names: tuple[str, ...]

    def __post_init__(self) -> None:
        self.counts = np.asarray(self.counts, dtype=np.int64)
        self.class_names = tuple(self.class_names)
        if self.counts.ndim != 2 or self.counts.shape[0] != self.counts.shape[1]:
            raise ShapeError(f"confusion matrix must be square, got {self.counts.shape}")
        if self.counts.shape[0] != len(self.class_names):
            raise ShapeError(f"{self.counts.shape[0]} rows but {len(self.class_names)} class names")
        if (self.counts < 0).any():
            raise DataError("confusion counts must be nonnegative")

    @classmethod
    def from_predictions(cls, actual: Sequence[int], predicted: Sequence[int], class_names: Sequence[str]) -> ConfusionMatrix:
        size = len(class_names)
        counts = np.zeros((size, size), dtype=np.int64)
        np.add.at(counts, (np.asarray(actual, dtype=np.int64), np.asarray(predicted, dtype=np.int64)), 1)
        return cls(counts, tuple(class_names))

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def support(self) -> np.ndarray:
        return self.counts.sum(axis=1)

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame(self.counts, index=list(self.class_names), columns=list(self.class_names))

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, ConfusionMatrix):
            return NotImplemented
        return self.class_names == other.class_names and np.array_equal(self.counts, other.counts)


class Metrics(NamedTuple):
    tp: int
    tn: int
    fp: int
    fn: int
    accuracy: float
    precision: float
    recall: float
    f1: float


def _ratio(num: float, den: float) -> float:
    return float(num / den) if den > 0 else 0.0


# -------------------- METRICS --------------------

def per_class_metrics(cm: ConfusionMatrix, index: int) -> Metrics:
    """One-vs-rest counts and A/P/R/F1 for class `index`; undefined ratios are 0."""
    size = len(cm.class_names)
    if not 0 <= index < size:
        raise IndexError(f"class index {index} out of range for {size} classes")
    tp = int(cm.counts[index, index])
    fn = int(cm.counts[index, :].sum()) - tp
    fp = int(cm.counts[:, index].sum()) - tp
    tn = cm.total - tp - fp - fn
    precision = _ratio(tp, tp + fp)
    recall = _ratio(tp, tp + fn)
    return Metrics(
        tp, tn, fp, fn,
        accuracy=_ratio(tp + tn, tp + tn + fp + fn),
        precision=precision,
        recall=recall,
        f1=_ratio(2 * precision * recall, precision + recall),
    )


def all_class_metrics(cm: ConfusionMatrix) -> list[Metrics]:
    return [per_class_metrics(cm, i) for i in range(len(cm.class_names))]


def weighted_average(cm: ConfusionMatrix, metrics: Sequence[Metrics] | None = None) -> tuple[float, float, float]:
    """Precision, recall and F1 averaged with weights equal to actual-class support."""
    if not cm.class_names or cm.total == 0:
        raise DataError("cannot average metrics over an empty confusion matrix")
    metrics = list(metrics) if metrics is not None else all_class_metrics(cm)
    weights = cm.support().astype(np.float64)
    values = np.array([[m.precision, m.recall, m.f1] for m in metrics], dtype=np.float64)
    averaged = weights @ values / weights.sum()
    return float(averaged[0]), float(averaged[1]), float(averaged[2])


def overall_accuracy(cm: ConfusionMatrix) -> float:
    if cm.total == 0:
        raise DataError("cannot compute accuracy of an empty confusion matrix")
    return float(np.trace(cm.counts) / cm.total)


# -------------------- REPORT TYPES --------------------

@dataclass
class ExperimentReport:
    experiment: str
    confusion: ConfusionMatrix
    epochs: int | None = None
    seeds: dict[str, int] = field(default_factory=dict)
    threshold: dict[str, Any] | None = None
    notes: dict[str, Any] = field(default_factory=dict)

    def to_dict(self) -> dict[str, Any]:
        metrics = all_class_metrics(self.confusion)
        wp, wr, wf = weighted_average(self.confusion, metrics)
        return {
            "schema_version": REPORT_SCHEMA_VERSION,
            "experiment": self.experiment,
            "class_names": list(self.confusion.class_names),
            "confusion": self.confusion.counts.tolist(),
            "accuracy": overall_accuracy(self.confusion),
            "per_class": [
                {"class": name, **m._asdict()}
                for name, m in zip(self.confusion.class_names, metrics)
            ],
            "weighted_average": {"precision": wp, "recall": wr, "f1": wf},
            "epochs": self.epochs,
            "seeds": dict(self.seeds),
            "threshold": self.threshold,
            "notes": dict(self.notes),
        }

    @classmethod
    def from_dict(cls, body: Mapping[str, Any]) -> ExperimentReport:
        if body.get("schema_version") != REPORT_SCHEMA_VERSION:
            raise FormatError(f"unsupported report schema version {body.get('schema_version')!r}")
        return cls(
            experiment=body["experiment"],
            confusion=ConfusionMatrix(np.array(body["confusion"], dtype=np.int64), tuple(body["class_names"])),
            epochs=body.get("epochs"),
            seeds=dict(body.get("seeds") or {}),
            threshold=body.get("threshold"),
            notes=dict(body.get("notes") or {}),
        )


# -------------------- TEXT TABLE --------------------

def _short_name(name: str) -> str:
    if name.endswith(UNKNOWN_SUFFIX):
        return name[: -len(UNKNOWN_SUFFIX)] + " (U)"
    return name


def format_table(report: ExperimentReport) -> str:
    """Matrix, per-class precision/recall/F1 and weighted averages, fixed widths."""
    cm = report.confusion
    metrics = all_class_metrics(cm)
    wp, wr, wf = weighted_average(cm, metrics)
    names = [_short_name(n) for n in cm.class_names]
    name_width = max(len(n) for n in names + ["Weighted Avg"]) + 2
    cell = max(6, len(str(int(cm.counts.max()))) + 2)

    header = " " * name_width + "".join(f"{i:>{cell}d}" for i in range(len(names)))
    header += f"{'Precision':>11}{'Recall':>9}{'F1':>8}{'Support':>9}"
    lines = [f"Experiment: {report.experiment}", header]
    for i, (name, m) in enumerate(zip(names, metrics)):
        row = f"{name:<{name_width}}" + "".join(f"{int(c):>{cell}d}" for c in cm.counts[i])
        row += f"{m.precision:>11.3f}{m.recall:>9.3f}{m.f1:>8.3f}{m.tp + m.fn:>9d}"
        lines.append(row)
    footer = f"{'Weighted Avg':<{name_width}}" + " " * (cell * len(names))
    footer += f"{wp:>11.3f}{wr:>9.3f}{wf:>8.3f}{cm.total:>9d}"
    lines.append(footer)
    lines.append("")
    lines.append("Columns: " + ", ".join(f"{i}={n}" for i, n in enumerate(names)))
    lines.append(f"Accuracy: {overall_accuracy(cm):.4f}")
    if report.epochs is not None:
        lines.append(f"Epochs: {report.epochs}")
    if report.threshold:
        lines.append(f"Threshold: {report.threshold.get('value')}")
    return "\n".join(lines) + "\n"


# -------------------- EMIT / LOAD --------------------

def emit_report(
    report: ExperimentReport,
    out_dir: Path,
    samples: Mapping[str, Sequence[bytes]] | None = None,
) -> dict[str, Path]:
    """Write report.json, report.txt, confusion.csv and optional sample images."""
    if not report.confusion.class_names:
        raise DataError("cannot emit a report with no classes")
    out_dir = Path(out_dir)
    paths = {
        "json": out_dir / REPORT_JSON,
        "text": out_dir / REPORT_TXT,
        "csv": out_dir / CONFUSION_CSV,
    }
    write_json(paths["json"], report.to_dict())
    write_text(paths["text"], format_table(report))
    write_text(paths["csv"], report.confusion.to_frame().to_csv(index_label="actual"))

    if samples:
        for label, fingerprints in samples.items():
            slug = slugify(label)
            for i, data in enumerate(fingerprints):
                write_pgm(data, out_dir / "samples" / slug / f"{i:03d}.pgm")
        paths["samples"] = out_dir / "samples"

    logger.info("Report written to %s (accuracy %.4f)", out_dir, overall_accuracy(report.confusion))
    return paths


def load_report(path: Path) -> ExperimentReport:
    path = Path(path)
    if path.is_dir():
        path = path / REPORT_JSON
    return ExperimentReport.from_dict(read_json(path))


def write_history_csv(history: Sequence[Sequence[float]], path: Path) -> Path:
    """Per-epoch training curve as CSV (epoch, train_loss, val_loss, val_accuracy)."""
    frame = pd.DataFrame(
        [tuple(rec) for rec in history],
        columns=["epoch", "train_loss", "val_loss", "val_accuracy"],
    )
    return write_text(path, frame.to_csv(index=False))
