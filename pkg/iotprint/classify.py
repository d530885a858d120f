"""
Device Classification Experiments
---------------------------------
Experiment 1: train one classifier over every device class and score it on
the held-out test split.

Experiment 2: hold one IoT device out of training, train on the rest, pick the
max-probability rejection threshold that maximizes validation accuracy with the
held-out device counted as "unknown", then score known + unknown on test.

Both experiments can run an epoch-selection pass first and then retrain a
fresh model (same init seed) for the selected epoch count.
"""

from __future__ import annotations
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Callable, Mapping, Sequence

import numpy as np

from iotprint.config import Config
from iotprint.dataset import LabeledDataset
from iotprint.errors import ConfigError, DataError
from iotprint.fingerprint import PayloadFingerprint
from iotprint.neuralnet import (
    AdamConfig,
    EpochRecord,
    InitSpec,
    MlpModel,
    TrainingConfig,
    forward,
    init_model,
    model_digest,
    predict,
    scale_bytes,
    train,
)
from iotprint.report import UNKNOWN_SUFFIX, ConfusionMatrix, overall_accuracy
from iotprint.storage import read_json, write_json

logger = Config.setup_logger(__name__)


# -------------------- SETTINGS / BUNDLE --------------------

@dataclass(frozen=True)
class DatasetBundle:
    train: LabeledDataset
    validation: LabeledDataset
    test: LabeledDataset

    def __post_init__(self) -> None:
        names = {self.train.label_names, self.validation.label_names, self.test.label_names}
        if len(names) != 1:
            raise DataError("train/validation/test must share one label order")

    @property
    def label_names(self) -> tuple[str, ...]:
        return self.train.label_names


@dataclass(frozen=True)
class ExperimentSettings:
    hidden_widths: tuple[int, ...] = (Config.INPUT_WIDTH,)
    init: InitSpec = field(default_factory=InitSpec)
    adam: AdamConfig = field(default_factory=AdamConfig)
    training: TrainingConfig = field(default_factory=TrainingConfig)
    selection_epochs: int | None = 25  # None: train for training.epochs directly
    strict: bool = False
    threshold_grid_step: float = Config.THRESHOLD_GRID_STEP
    non_iot_label: str = Config.NON_IOT_LABEL

    def __post_init__(self) -> None:
        if self.selection_epochs is not None and self.selection_epochs < 1:
            raise ConfigError(f"selection_epochs must be >= 1, got {self.selection_epochs}")
        if not 0 < self.threshold_grid_step < 1:
            raise ConfigError(f"threshold grid step must lie in (0, 1), got {self.threshold_grid_step}")


@dataclass
class Experiment1Result:
    model: MlpModel | None
    confusion: ConfusionMatrix
    epochs: int
    history: list[EpochRecord]
    selection_history: list[EpochRecord]


# -------------------- EPOCH SELECTION --------------------

def select_epochs(history: Sequence[EpochRecord]) -> int:
    """1-based epoch with the best validation accuracy; ties → lower loss, then earlier."""
    if not history:
        raise DataError("cannot select an epoch from an empty history")
    best = min(history, key=lambda r: (-r.val_accuracy, r.val_loss, r.epoch))
    return int(best.epoch)


def _fit(
    class_count: int,
    train_set: LabeledDataset,
    val_set: LabeledDataset,
    settings: ExperimentSettings,
) -> tuple[MlpModel, int, list[EpochRecord], list[EpochRecord]]:
    """Optional selection pass, then a fresh model trained for the chosen epochs."""
    train_x, val_x = scale_bytes(train_set.features), scale_bytes(val_set.features)
    selection_history: list[EpochRecord] = []
    epochs = settings.training.epochs
    if settings.selection_epochs is not None:
        selection_model = init_model(class_count, settings.hidden_widths, settings.init)
        selection_cfg = TrainingConfig(settings.selection_epochs, settings.training.batch_size, settings.training.shuffle_seed)
        _, selection_history = train(selection_model, train_x, train_set.labels, val_x, val_set.labels, selection_cfg, settings.adam)
        epochs = select_epochs(selection_history)
        logger.info("Epoch selection over %d epochs chose %d", settings.selection_epochs, epochs)

    model = init_model(class_count, settings.hidden_widths, settings.init)
    final_cfg = TrainingConfig(epochs, settings.training.batch_size, settings.training.shuffle_seed)
    model, history = train(model, train_x, train_set.labels, val_x, val_set.labels, final_cfg, settings.adam)
    return model, epochs, history, selection_history


# -------------------- EXPERIMENT 1 --------------------

def run_experiment1(bundle: DatasetBundle, settings: ExperimentSettings = ExperimentSettings()) -> Experiment1Result:
    names = bundle.label_names
    if settings.strict and len(names) != Config.PUBLISHED_CLASS_COUNT:
        raise ConfigError(f"strict mode expects {Config.PUBLISHED_CLASS_COUNT} classes, found {len(names)}")
    if not len(bundle.test):
        raise DataError("test set is empty")

    if len(names) == 1:
        logger.warning("Only one class (%s); reporting a trivial 1x1 confusion matrix", names[0])
        cm = ConfusionMatrix(np.array([[len(bundle.test)]]), names)
        return Experiment1Result(None, cm, 0, [], [])

    logger.info("Experiment 1: %d classes, train %d / validation %d / test %d",
                len(names), len(bundle.train), len(bundle.validation), len(bundle.test))
    model, epochs, history, selection_history = _fit(len(names), bundle.train, bundle.validation, settings)
    predicted = predict(model, scale_bytes(bundle.test.features))
    cm = ConfusionMatrix.from_predictions(bundle.test.labels, predicted, names)
    logger.info("Experiment 1 test accuracy: %.4f", overall_accuracy(cm))
    return Experiment1Result(model, cm, epochs, history, selection_history)


# -------------------- THRESHOLD RULE --------------------

@dataclass(frozen=True)
class Verdict:
    class_index: int | None  # None → unknown
    posterior: np.ndarray
    max_prob: float

    @property
    def is_known(self) -> bool:
        return self.class_index is not None


def _check_threshold(threshold: float) -> None:
    if not 0 < threshold < 1:
        raise ConfigError(f"threshold must lie in (0, 1), got {threshold}")


def threshold_decisions(posteriors: np.ndarray, threshold: float, unknown_index: int) -> np.ndarray:
    """argmax where max probability exceeds the threshold, else unknown_index."""
    posteriors = np.asarray(posteriors, dtype=np.float64)
    return np.where(posteriors.max(axis=1) > threshold, posteriors.argmax(axis=1), unknown_index)


def classify_with_threshold(
    model: MlpModel,
    fingerprint: PayloadFingerprint | bytes | np.ndarray,
    threshold: float,
) -> Verdict:
    _check_threshold(threshold)
    if isinstance(fingerprint, PayloadFingerprint):
        raw = fingerprint.as_array()
    elif isinstance(fingerprint, (bytes, bytearray)):
        raw = np.frombuffer(bytes(fingerprint), dtype=np.uint8)
    else:
        raw = np.asarray(fingerprint, dtype=np.uint8)
    posterior = forward(model, scale_bytes(raw).reshape(1, -1))[0]
    top = float(posterior.max())
    index = int(posterior.argmax()) if top > threshold else None
    return Verdict(index, posterior, top)


def classify_batch(model: MlpModel, features: np.ndarray, threshold: float) -> list[Verdict]:
    _check_threshold(threshold)
    posteriors = forward(model, scale_bytes(features))
    verdicts = []
    for row in posteriors:
        top = float(row.max())
        verdicts.append(Verdict(int(row.argmax()) if top > threshold else None, row, top))
    return verdicts


def threshold_grid(step: float = Config.THRESHOLD_GRID_STEP) -> np.ndarray:
    """Candidate thresholds step, 2·step, ... strictly inside (0, 1)."""
    if not 0 < step < 1:
        raise ConfigError(f"threshold grid step must lie in (0, 1), got {step}")
    count = int(np.floor((1.0 - 1e-12) / step))
    grid = np.round(np.arange(1, count + 1) * step, 10)
    return grid[grid < 1]


def threshold_accuracies(posteriors: np.ndarray, labels: np.ndarray, unknown_index: int,
                         step: float = Config.THRESHOLD_GRID_STEP) -> tuple[np.ndarray, np.ndarray]:
    """Every grid threshold with its count of correct decisions."""
    labels = np.asarray(labels, dtype=np.int64)
    grid = threshold_grid(step)
    correct = np.array([
        int(np.sum(threshold_decisions(posteriors, tau, unknown_index) == labels)) for tau in grid
    ])
    return grid, correct


def threshold_from_posteriors(posteriors: np.ndarray, labels: np.ndarray, unknown_index: int,
                              step: float = Config.THRESHOLD_GRID_STEP) -> float:
    """Grid threshold with the most correct decisions; ties go to the larger threshold."""
    labels = np.asarray(labels, dtype=np.int64)
    if not np.any(labels == unknown_index):
        raise DataError("validation set has no unknown-class instances to calibrate against")
    grid, correct = threshold_accuracies(posteriors, labels, unknown_index, step)
    best = int(np.flatnonzero(correct == correct.max())[-1])
    return float(grid[best])


def derive_threshold(model: MlpModel, features: np.ndarray, labels: np.ndarray,
                     step: float = Config.THRESHOLD_GRID_STEP) -> float:
    """Threshold maximizing known + unknown accuracy; unknown instances carry label class_count."""
    posteriors = forward(model, scale_bytes(features))
    return threshold_from_posteriors(posteriors, labels, model.class_count, step)


# -------------------- EXPERIMENT 2 --------------------

@dataclass(frozen=True)
class ThresholdProfile:
    excluded_label: str
    threshold: float
    epochs: int
    model_ref: str
    known_labels: tuple[str, ...] = ()

    def __post_init__(self) -> None:
        _check_threshold(self.threshold)

    def to_dict(self) -> dict[str, Any]:
        body = asdict(self)
        body["known_labels"] = list(self.known_labels)
        return body

    @classmethod
    def from_dict(cls, body: Mapping[str, Any]) -> ThresholdProfile:
        try:
            return cls(
                body["excluded_label"], float(body["threshold"]), int(body["epochs"]),
                body["model_ref"], tuple(body.get("known_labels", ())),
            )
        except KeyError as e:
            raise DataError(f"threshold profile is missing field {e}") from e

    def save(self, path: Path) -> Path:
        return write_json(path, self.to_dict())

    @classmethod
    def load(cls, path: Path) -> ThresholdProfile:
        return cls.from_dict(read_json(path))


@dataclass
class Experiment2Result:
    profile: ThresholdProfile
    confusion: ConfusionMatrix
    model: MlpModel
    history: list[EpochRecord]
    selection_history: list[EpochRecord]
    known_labels: tuple[str, ...]
    removed_overlap: int = 0


def _relabel(dataset: LabeledDataset, index_map: Mapping[int, int], names: tuple[str, ...], keep: set[int]) -> LabeledDataset:
    rows = np.flatnonzero(np.isin(dataset.labels, sorted(keep)))
    subset = dataset.subset(rows)
    labels = np.array([index_map[int(l)] for l in subset.labels], dtype=np.int64)
    return LabeledDataset(subset.features, labels, names, dataset.split_tag, subset.digests)


def run_experiment2(
    bundle: DatasetBundle,
    excluded_label: str,
    settings: ExperimentSettings = ExperimentSettings(),
) -> Experiment2Result:
    """
    Train without `excluded_label` (and without non-IoT traffic), calibrate the
    rejection threshold on validation, and score the 9-way test matrix in which
    the held-out device is the "unknown" class.
    """
    names = bundle.label_names
    iot_names = tuple(n for n in names if n != settings.non_iot_label)
    if excluded_label not in iot_names:
        raise DataError(f"excluded label {excluded_label!r} is not an IoT class in the dataset")
    known = tuple(n for n in iot_names if n != excluded_label)
    if len(known) < 2:
        raise DataError(f"need at least two known classes besides {excluded_label!r}, found {len(known)}")

    unknown_index = len(known)
    old_index = {n: i for i, n in enumerate(names)}
    excluded_old = old_index[excluded_label]
    index_map = {old_index[n]: i for i, n in enumerate(known)}
    index_map[excluded_old] = unknown_index
    known_ids = {old_index[n] for n in known}
    extended = known + (Config.UNKNOWN_LABEL,)

    train_set = _relabel(bundle.train, index_map, known, known_ids)
    val_known = _relabel(bundle.validation, index_map, known, known_ids)
    val_all = _relabel(bundle.validation, index_map, extended, known_ids | {excluded_old})

    removed = 0
    if train_set.digests is not None:
        excluded_digests = set()
        for split_set in (bundle.train, bundle.validation, bundle.test):
            if split_set.digests is not None:
                excluded_digests.update(
                    d for d, l in zip(split_set.digests, split_set.labels) if l == excluded_old
                )
        overlap = np.array([d in excluded_digests for d in train_set.digests], dtype=bool)
        removed = int(overlap.sum())
        if removed:
            logger.warning("Dropping %d training instance(s) whose payload also belongs to %s",
                           removed, excluded_label)
            train_set = train_set.subset(np.flatnonzero(~overlap))
        if excluded_digests.intersection(train_set.digests):
            raise DataError(f"training data still holds payloads of the excluded class {excluded_label!r}")

    logger.info("Experiment 2 (excluded: %s): %d known classes, train %d / validation %d / test %d",
                excluded_label, len(known), len(train_set), len(val_all), len(bundle.test))

    model, epochs, history, selection_history = _fit(len(known), train_set, val_known, settings)
    threshold = derive_threshold(model, val_all.features, val_all.labels, settings.threshold_grid_step)
    logger.info("Derived threshold %.2f for excluded %s", threshold, excluded_label)

    cm = score_experiment2(model, bundle.test, excluded_label, threshold, settings.non_iot_label)
    logger.info("Experiment 2 (excluded: %s) test accuracy: %.4f", excluded_label, overall_accuracy(cm))

    profile = ThresholdProfile(excluded_label, threshold, epochs, model_digest(model), known)
    return Experiment2Result(profile, cm, model, history, selection_history, known, removed)


def score_experiment2(
    model: MlpModel,
    test_set: LabeledDataset,
    excluded_label: str,
    threshold: float,
    non_iot_label: str = Config.NON_IOT_LABEL,
) -> ConfusionMatrix:
    """
    Thresholded test matrix over the IoT classes in their original order, with
    the held-out device named "<label> (unknown)". Non-IoT rows are ignored.
    """
    iot_names = tuple(n for n in test_set.label_names if n != non_iot_label)
    known = tuple(n for n in iot_names if n != excluded_label)
    if model.class_count != len(known):
        raise DataError(f"model has {model.class_count} outputs but {len(known)} known classes remain")

    old_index = {n: i for i, n in enumerate(test_set.label_names)}
    # model output index (unknown = len(known)) → row/column in the report
    position = {i: iot_names.index(n) for i, n in enumerate(known)}
    position[len(known)] = iot_names.index(excluded_label)
    to_model = {old_index[n]: i for i, n in enumerate(known)}
    to_model[old_index[excluded_label]] = len(known)

    rows = np.flatnonzero(np.isin(test_set.labels, sorted(to_model)))
    if not len(rows):
        raise DataError("test set has no IoT instances to score")
    posteriors = forward(model, scale_bytes(test_set.features[rows]))
    decisions = threshold_decisions(posteriors, threshold, len(known))

    report_names = tuple(n + UNKNOWN_SUFFIX if n == excluded_label else n for n in iot_names)
    actual = [position[to_model[int(l)]] for l in test_set.labels[rows]]
    predicted = [position[int(p)] for p in decisions]
    return ConfusionMatrix.from_predictions(actual, predicted, report_names)


def sweep_mean_accuracy(results: Mapping[str, Experiment2Result]) -> float:
    if not results:
        raise DataError("sweep produced no runs")
    return float(np.mean([overall_accuracy(r.confusion) for r in results.values()]))


def run_experiment2_sweep(
    bundle: DatasetBundle,
    settings: ExperimentSettings = ExperimentSettings(),
    labels: Sequence[str] | None = None,
    on_result: Callable[[str, Experiment2Result], None] | None = None,
) -> dict[str, Experiment2Result]:
    """
    One Experiment 2 run per IoT class, in label order.
    `on_result` sees each run as soon as it finishes (the CLI writes its artifacts there).
    """
    targets = list(labels) if labels is not None else [
        n for n in bundle.label_names if n != settings.non_iot_label
    ]
    results: dict[str, Experiment2Result] = {}
    for label in targets:
        results[label] = run_experiment2(bundle, label, settings)
        if on_result is not None:
            on_result(label, results[label])
    logger.info("Experiment 2 sweep over %d classes: mean accuracy %.4f",
                len(results), sweep_mean_accuracy(results))
    return results
