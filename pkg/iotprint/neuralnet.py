"""
Dense Network Engine
--------------------
A small fully connected classifier in numpy (float64 throughout):

  • init_model: 784 → hidden (ReLU) [→ hidden ...] → classes (softmax)
  • forward / predict / evaluate
  • loss_and_gradients: categorical cross-entropy and its analytic gradients
  • adam_step: one bias-corrected Adam update
  • train: seeded mini-batch training with a per-epoch validation history
  • save_model / load_model: JSON with dims, activations, weights and seeds
"""

from __future__ import annotations
import hashlib
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import NamedTuple, Sequence

import numpy as np
from tqdm import tqdm

from iotprint.config import Config
from iotprint.errors import ConfigError, DataError, FormatError, ShapeError
from iotprint.storage import write_json

logger = Config.setup_logger(__name__)

LOG_CLAMP: float = 1e-12
ACTIVATIONS: tuple[str, ...] = ("relu", "softmax")


# -------------------- MODEL TYPES --------------------

@dataclass(eq=False)
class DenseLayer:
    weights: np.ndarray  # (in_dim, out_dim)
    biases: np.ndarray  # (out_dim,)
    activation: str

    def __post_init__(self) -> None:
        self.weights = np.asarray(self.weights, dtype=np.float64)
        self.biases = np.asarray(self.biases, dtype=np.float64)
        if self.weights.ndim != 2 or self.biases.shape != (self.weights.shape[1],):
            raise ShapeError(f"layer weights {self.weights.shape} do not match biases {self.biases.shape}")
        if self.activation not in ACTIVATIONS:
            raise ConfigError(f"unknown activation {self.activation!r}")

    @property
    def in_dim(self) -> int:
        return self.weights.shape[0]

    @property
    def out_dim(self) -> int:
        return self.weights.shape[1]


@dataclass(frozen=True)
class InitSpec:
    mean: float = 0.0
    stddev: float = 0.05
    seed: int = 0

    def __post_init__(self) -> None:
        if not self.stddev > 0:
            raise ConfigError(f"init stddev must be positive, got {self.stddev}")


@dataclass(eq=False)
class MlpModel:
    layers: list[DenseLayer]
    init_spec: InitSpec = field(default_factory=InitSpec)

    def __post_init__(self) -> None:
        if not self.layers:
            raise ShapeError("model needs at least one layer")
        for prev, nxt in zip(self.layers, self.layers[1:]):
            if prev.out_dim != nxt.in_dim:
                raise ShapeError(f"layer dims do not chain: {prev.out_dim} → {nxt.in_dim}")
        for layer in self.layers[:-1]:
            if layer.activation != "relu":
                raise ConfigError("only the final layer may use softmax")
        if self.layers[-1].activation != "softmax":
            raise ConfigError("the final layer must use softmax")

    @property
    def input_width(self) -> int:
        return self.layers[0].in_dim

    @property
    def class_count(self) -> int:
        return self.layers[-1].out_dim

    @property
    def dims(self) -> list[int]:
        return [self.input_width] + [layer.out_dim for layer in self.layers]

    def params(self) -> list[np.ndarray]:
        """Flat parameter list: W0, b0, W1, b1, ..."""
        out: list[np.ndarray] = []
        for layer in self.layers:
            out.extend((layer.weights, layer.biases))
        return out

    def with_params(self, params: Sequence[np.ndarray]) -> MlpModel:
        if len(params) != 2 * len(self.layers):
            raise ShapeError(f"expected {2 * len(self.layers)} parameter arrays, got {len(params)}")
        layers = [
            DenseLayer(params[2 * i], params[2 * i + 1], layer.activation)
            for i, layer in enumerate(self.layers)
        ]
        return MlpModel(layers, self.init_spec)

    def copy(self) -> MlpModel:
        return self.with_params([p.copy() for p in self.params()])


def init_model(
    class_count: int,
    hidden_width: int | Sequence[int] = Config.INPUT_WIDTH,
    init_spec: InitSpec = InitSpec(),
    input_width: int = Config.INPUT_WIDTH,
) -> MlpModel:
    """Normal-initialized weights, zero biases; deterministic for a seed."""
    if class_count < 2:
        raise ConfigError(f"class_count must be >= 2, got {class_count}")
    widths = [hidden_width] if isinstance(hidden_width, int) else list(hidden_width)
    if any(w < 1 for w in widths):
        raise ConfigError(f"hidden widths must be positive, got {widths}")

    rng = np.random.default_rng(init_spec.seed)
    dims = [input_width, *widths, class_count]
    layers = []
    for i, (fan_in, fan_out) in enumerate(zip(dims, dims[1:])):
        activation = "softmax" if i == len(dims) - 2 else "relu"
        weights = rng.normal(init_spec.mean, init_spec.stddev, size=(fan_in, fan_out))
        layers.append(DenseLayer(weights, np.zeros(fan_out), activation))
    return MlpModel(layers, init_spec)


# -------------------- FORWARD / LOSS --------------------

def scale_bytes(features: np.ndarray) -> np.ndarray:
    """uint8 fingerprints → float64 in [0, 1]."""
    return np.asarray(features, dtype=np.float64) / 255.0


def one_hot(labels: np.ndarray, class_count: int) -> np.ndarray:
    labels = np.asarray(labels, dtype=np.int64)
    if len(labels) and (labels.min() < 0 or labels.max() >= class_count):
        raise ShapeError(f"labels must lie in [0, {class_count})")
    out = np.zeros((len(labels), class_count), dtype=np.float64)
    out[np.arange(len(labels)), labels] = 1.0
    return out


def softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=1, keepdims=True)
    exps = np.exp(shifted)
    return exps / exps.sum(axis=1, keepdims=True)


def _check_input(model: MlpModel, batch: np.ndarray) -> np.ndarray:
    batch = np.asarray(batch, dtype=np.float64)
    if batch.ndim == 1:
        batch = batch.reshape(1, -1)
    if batch.ndim != 2 or batch.shape[1] != model.input_width:
        raise ShapeError(f"expected input width {model.input_width}, got shape {batch.shape}")
    return batch


def _forward_cache(model: MlpModel, batch: np.ndarray) -> tuple[list[np.ndarray], list[np.ndarray]]:
    """Layer inputs and pre-activations, plus the final probabilities as the last input."""
    inputs = [batch]
    pre_acts = []
    current = batch
    for layer in model.layers:
        z = current @ layer.weights + layer.biases
        pre_acts.append(z)
        current = softmax(z) if layer.activation == "softmax" else np.maximum(z, 0.0)
        inputs.append(current)
    return inputs, pre_acts


def forward(model: MlpModel, batch: np.ndarray) -> np.ndarray:
    """Probability rows for a batch of scaled 784-vectors."""
    batch = _check_input(model, batch)
    return _forward_cache(model, batch)[0][-1]


def cross_entropy(probs: np.ndarray, targets: np.ndarray) -> float:
    return float(-np.mean(np.sum(targets * np.log(np.maximum(probs, LOG_CLAMP)), axis=1)))


def loss_and_gradients(model: MlpModel, batch: np.ndarray, targets: np.ndarray) -> tuple[float, list[np.ndarray]]:
    """
    Mean categorical cross-entropy over the batch and its gradients, in the
    same order as model.params().
    """
    batch = _check_input(model, batch)
    targets = np.asarray(targets, dtype=np.float64)
    if targets.shape != (len(batch), model.class_count):
        raise ShapeError(f"targets shape {targets.shape} does not match ({len(batch)}, {model.class_count})")

    inputs, pre_acts = _forward_cache(model, batch)
    probs = inputs[-1]
    loss = cross_entropy(probs, targets)

    grads: list[np.ndarray] = [None] * (2 * len(model.layers))  # type: ignore[list-item]
    # softmax + cross-entropy: dL/dz = (p - y) / N
    delta = (probs - targets) / len(batch)
    for i in range(len(model.layers) - 1, -1, -1):
        grads[2 * i] = inputs[i].T @ delta
        grads[2 * i + 1] = delta.sum(axis=0)
        if i > 0:
            delta = (delta @ model.layers[i].weights.T) * (pre_acts[i - 1] > 0)
    return loss, grads


# -------------------- ADAM --------------------

@dataclass(frozen=True)
class AdamConfig:
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-7

    def __post_init__(self) -> None:
        if not self.learning_rate > 0:
            raise ConfigError(f"learning_rate must be positive, got {self.learning_rate}")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ConfigError("beta1 and beta2 must lie in [0, 1)")
        if not self.epsilon > 0:
            raise ConfigError(f"epsilon must be positive, got {self.epsilon}")


@dataclass(eq=False)
class AdamState:
    config: AdamConfig
    t: int
    m: list[np.ndarray]
    v: list[np.ndarray]

    @classmethod
    def zeros_like(cls, params: Sequence[np.ndarray], config: AdamConfig = AdamConfig()) -> AdamState:
        return cls(config, 0, [np.zeros_like(p) for p in params], [np.zeros_like(p) for p in params])


def adam_step(
    state: AdamState,
    params: Sequence[np.ndarray],
    grads: Sequence[np.ndarray],
) -> tuple[list[np.ndarray], AdamState]:
    """One bias-corrected Adam update; returns new arrays and a new state."""
    if len(params) != len(grads) or len(params) != len(state.m):
        raise ShapeError("params, grads and optimizer state must align")
    cfg = state.config
    t = state.t + 1
    new_params, new_m, new_v = [], [], []
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if p.shape != g.shape or p.shape != m.shape:
            raise ShapeError(f"shape mismatch: param {p.shape}, grad {g.shape}, moment {m.shape}")
        m = cfg.beta1 * m + (1 - cfg.beta1) * g
        v = cfg.beta2 * v + (1 - cfg.beta2) * g * g
        m_hat = m / (1 - cfg.beta1 ** t)
        v_hat = v / (1 - cfg.beta2 ** t)
        new_params.append(p - cfg.learning_rate * m_hat / (np.sqrt(v_hat) + cfg.epsilon))
        new_m.append(m)
        new_v.append(v)
    return new_params, AdamState(cfg, t, new_m, new_v)


# -------------------- TRAINING --------------------

@dataclass(frozen=True)
class TrainingConfig:
    epochs: int = 7
    batch_size: int = 100
    shuffle_seed: int = 0

    def __post_init__(self) -> None:
        if self.epochs < 1:
            raise ConfigError(f"epochs must be >= 1, got {self.epochs}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")


class EpochRecord(NamedTuple):
    epoch: int  # 1-based
    train_loss: float
    val_loss: float
    val_accuracy: float


def evaluate(model: MlpModel, features: np.ndarray, labels: np.ndarray) -> tuple[float, float]:
    """(mean cross-entropy, accuracy) on scaled features."""
    labels = np.asarray(labels, dtype=np.int64)
    if not len(labels):
        raise DataError("cannot evaluate on an empty set")
    probs = forward(model, features)
    loss = cross_entropy(probs, one_hot(labels, model.class_count))
    accuracy = float(np.mean(probs.argmax(axis=1) == labels))
    return loss, accuracy


def predict(model: MlpModel, features: np.ndarray) -> np.ndarray:
    return forward(model, features).argmax(axis=1)


def train(
    model: MlpModel,
    train_x: np.ndarray,
    train_y: np.ndarray,
    val_x: np.ndarray,
    val_y: np.ndarray,
    config: TrainingConfig = TrainingConfig(),
    adam: AdamConfig = AdamConfig(),
) -> tuple[MlpModel, list[EpochRecord]]:
    """
    Mini-batch Adam training. Inputs are already scaled; labels are class
    indices. The shuffle order of every epoch comes from one seeded generator,
    so identical inputs give identical parameters and history.
    """
    train_x = np.asarray(train_x, dtype=np.float64)
    train_y = np.asarray(train_y, dtype=np.int64)
    if not len(train_y):
        raise DataError("cannot train on an empty training set")
    if not len(val_y):
        raise DataError("cannot train without a validation set")

    rng = np.random.default_rng(config.shuffle_seed)
    targets = one_hot(train_y, model.class_count)
    params = [p.copy() for p in model.params()]
    state = AdamState.zeros_like(params, adam)
    history: list[EpochRecord] = []

    epochs = tqdm(range(1, config.epochs + 1), desc="Training", unit="epoch", disable=not Config.TQDM_ENABLED)
    for epoch in epochs:
        order = rng.permutation(len(train_y))
        batch_losses = []
        for start in range(0, len(order), config.batch_size):
            idx = order[start:start + config.batch_size]
            loss, grads = loss_and_gradients(model.with_params(params), train_x[idx], targets[idx])
            params, state = adam_step(state, params, grads)
            batch_losses.append(loss * len(idx))
        model = model.with_params(params)
        val_loss, val_acc = evaluate(model, val_x, val_y)
        record = EpochRecord(epoch, float(sum(batch_losses) / len(train_y)), val_loss, val_acc)
        history.append(record)
        epochs.set_postfix(val_loss=f"{val_loss:.4f}", val_acc=f"{val_acc:.4f}")
        logger.debug("Epoch %d: train_loss=%.5f val_loss=%.5f val_acc=%.5f", *record)

    logger.info("Trained %d epoch(s); final val_acc=%.4f", config.epochs, history[-1].val_accuracy)
    return model, history


# -------------------- SERIALIZATION --------------------

def model_to_dict(model: MlpModel, training: TrainingConfig | None = None) -> dict:
    return {
        "dims": model.dims,
        "activations": [layer.activation for layer in model.layers],
        "init_spec": asdict(model.init_spec),
        "training": asdict(training) if training is not None else None,
        "layers": [
            {"weights": layer.weights.tolist(), "biases": layer.biases.tolist()}
            for layer in model.layers
        ],
    }


def model_digest(model: MlpModel) -> str:
    """Stable identifier of the trained parameters."""
    h = hashlib.sha256()
    for p in model.params():
        h.update(np.ascontiguousarray(p, dtype="<f8").tobytes())
    return h.hexdigest()


def save_model(model: MlpModel, path: Path, training: TrainingConfig | None = None) -> Path:
    body = model_to_dict(model, training)
    body["digest"] = model_digest(model)
    return write_json(path, body, indent=None)


def load_model(path: Path) -> MlpModel:
    path = Path(path)
    try:
        body = json.loads(path.read_text(encoding="utf-8"))
        layers = [
            DenseLayer(np.array(spec["weights"], dtype=np.float64), np.array(spec["biases"], dtype=np.float64), act)
            for spec, act in zip(body["layers"], body["activations"])
        ]
        model = MlpModel(layers, InitSpec(**body["init_spec"]))
    except (json.JSONDecodeError, KeyError, TypeError) as e:
        raise FormatError(f"{path} is not a valid model file: {e}") from e
    if body.get("digest") and body["digest"] != model_digest(model):
        raise FormatError(f"{path}: model digest mismatch")
    return model
