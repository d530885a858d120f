"""
Run configuration: one JSON-loadable tree of every knob a run depends on.

    {
      "split":    {"validation_fraction": 0.1, "test_fraction": 0.1, "rng_seed": 0},
      "model":    {"hidden_widths": [784], "init_mean": 0.0, "init_stddev": 0.05, "init_seed": 0},
      "adam":     {"learning_rate": 0.001, "beta1": 0.9, "beta2": 0.999, "epsilon": 1e-07},
      "training": {"epochs": 7, "batch_size": 100, "shuffle_seed": 0, "selection_epochs": 25},
      "experiment": {"strict": false, "threshold_grid_step": 0.01, "non_iot_label": "Non-IoT devices",
                     "min_sessions": 1000, "label_order": null}
    }

CLI flags override file values; `to_dict()` is what every run manifest records.
"""

from __future__ import annotations
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Any, Mapping

from iotprint.classify import ExperimentSettings
from iotprint.config import Config
from iotprint.dataset import SplitPolicy
from iotprint.errors import ConfigError
from iotprint.neuralnet import AdamConfig, InitSpec, TrainingConfig
from iotprint.published import EXPERIMENT1_EPOCHS, EXPERIMENT1_SELECTION_EPOCHS
from iotprint.storage import read_json


@dataclass(frozen=True)
class ModelConfig:
    hidden_widths: tuple[int, ...] = (Config.INPUT_WIDTH,)
    init_mean: float = 0.0
    init_stddev: float = 0.05
    init_seed: int = 0


@dataclass(frozen=True)
class TrainingSection:
    epochs: int = EXPERIMENT1_EPOCHS
    batch_size: int = 100
    shuffle_seed: int = 0
    selection_epochs: int | None = EXPERIMENT1_SELECTION_EPOCHS


@dataclass(frozen=True)
class ExperimentConfig:
    strict: bool = False
    threshold_grid_step: float = Config.THRESHOLD_GRID_STEP
    non_iot_label: str = Config.NON_IOT_LABEL
    min_sessions: int = Config.MIN_SESSIONS
    label_order: str | tuple[str, ...] | None = None


@dataclass(frozen=True)
class PipelineConfig:
    split: SplitPolicy = field(default_factory=SplitPolicy)
    model: ModelConfig = field(default_factory=ModelConfig)
    adam: AdamConfig = field(default_factory=AdamConfig)
    training: TrainingSection = field(default_factory=TrainingSection)
    experiment: ExperimentConfig = field(default_factory=ExperimentConfig)

    # -------------------- LOADING --------------------

    @classmethod
    def from_dict(cls, body: Mapping[str, Any]) -> PipelineConfig:
        sections = {f.name: f for f in fields(cls)}
        unknown = set(body) - set(sections)
        if unknown:
            raise ConfigError(f"unknown config section(s): {', '.join(sorted(unknown))}")
        defaults = cls()
        kwargs = {}
        for name in sections:
            current = getattr(defaults, name)
            raw = body.get(name) or {}
            if not isinstance(raw, Mapping):
                raise ConfigError(f"config section {name!r} must be an object")
            allowed = {f.name for f in fields(current)}
            bad = set(raw) - allowed
            if bad:
                raise ConfigError(f"unknown key(s) in {name!r}: {', '.join(sorted(bad))}")
            values = dict(raw)
            if "hidden_widths" in values:
                widths = values["hidden_widths"]
                values["hidden_widths"] = (widths,) if isinstance(widths, int) else tuple(widths)
            if isinstance(values.get("label_order"), list):
                values["label_order"] = tuple(values["label_order"])
            try:
                kwargs[name] = replace(current, **values)
            except (TypeError, ValueError) as e:
                raise ConfigError(f"invalid {name!r} config: {e}") from e
        config = cls(**kwargs)
        config.validate()
        return config

    @classmethod
    def from_file(cls, path: Path) -> PipelineConfig:
        path = Path(path)
        if not path.exists():
            raise ConfigError(f"config file not found: {path}")
        try:
            body = read_json(path)
        except ValueError as e:
            raise ConfigError(str(e)) from e
        return cls.from_dict(body)

    # -------------------- OVERRIDES --------------------

    def with_seed(self, seed: int) -> PipelineConfig:
        """Apply one seed to the split, init and shuffle generators."""
        return replace(
            self,
            split=replace(self.split, rng_seed=seed),
            model=replace(self.model, init_seed=seed),
            training=replace(self.training, shuffle_seed=seed),
        )

    def with_epochs(self, epochs: int) -> PipelineConfig:
        """Fixed epoch count; skips the selection pass."""
        return replace(self, training=replace(self.training, epochs=epochs, selection_epochs=None))

    def with_experiment(self, **changes: Any) -> PipelineConfig:
        return replace(self, experiment=replace(self.experiment, **changes))

    # -------------------- VALIDATION / EXPORT --------------------

    def validate(self) -> None:
        if not self.model.hidden_widths or any(int(w) < 1 for w in self.model.hidden_widths):
            raise ConfigError(f"hidden widths must be positive, got {self.model.hidden_widths}")
        if self.experiment.min_sessions < 0:
            raise ConfigError("min_sessions must be >= 0")
        self.settings()

    def settings(self) -> ExperimentSettings:
        try:
            return ExperimentSettings(
                hidden_widths=tuple(int(w) for w in self.model.hidden_widths),
                init=InitSpec(self.model.init_mean, self.model.init_stddev, self.model.init_seed),
                adam=self.adam,
                training=TrainingConfig(self.training.epochs, self.training.batch_size, self.training.shuffle_seed),
                selection_epochs=self.training.selection_epochs,
                strict=self.experiment.strict,
                threshold_grid_step=self.experiment.threshold_grid_step,
                non_iot_label=self.experiment.non_iot_label,
            )
        except TypeError as e:
            raise ConfigError(f"invalid configuration: {e}") from e

    def seeds(self) -> dict[str, int]:
        return {
            "split": self.split.rng_seed,
            "init": self.model.init_seed,
            "shuffle": self.training.shuffle_seed,
        }

    def to_dict(self) -> dict[str, Any]:
        body = asdict(self)
        body["model"]["hidden_widths"] = list(self.model.hidden_widths)
        order = self.experiment.label_order
        body["experiment"]["label_order"] = list(order) if isinstance(order, tuple) else order
        return body
