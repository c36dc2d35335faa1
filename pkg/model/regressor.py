"""Feed-forward regressor with inverted dropout.

Supports deterministic inference, Monte-Carlo dropout inference (mean and
sample standard deviation over stochastic passes) and gradient descent on a
per-example weighted squared error. Models are immutable: training returns
a new parameter set.
"""
from concurrent.futures import ThreadPoolExecutor
from enum import Enum
from typing import Callable, Optional, Sequence

import numpy as np
from pydantic import BaseModel, ConfigDict, field_validator, model_validator

from common.errors import ConfigurationError, NumericDivergenceError, ShapeError
from common.logger import get_logger
from common.models import TrainingBatch, UncertainPrediction

logger = get_logger("regressor")

RngLike = Optional[np.random.Generator | int | np.random.SeedSequence]


class Activation(str, Enum):
    RELU = "relu"
    TANH = "tanh"


def _activate(kind: Activation, z: np.ndarray) -> np.ndarray:
    if kind == Activation.TANH:
        return np.tanh(z)
    return np.maximum(z, 0.0)


def _activation_grad(kind: Activation, z: np.ndarray) -> np.ndarray:
    if kind == Activation.TANH:
        return 1.0 - np.tanh(z) ** 2
    return (z > 0).astype(float)


def _frozen(arr) -> np.ndarray:
    out = np.array(arr, dtype=float)
    out.setflags(write=False)
    return out


class Regressor(BaseModel):
    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

    layer_sizes: tuple[int, ...]
    weights: tuple[np.ndarray, ...]
    biases: tuple[np.ndarray, ...]
    activation: Activation = Activation.RELU
    dropout_rate: float = 0.2

    @field_validator("weights", "biases", mode="before")
    @classmethod
    def _freeze(cls, v):
        return tuple(_frozen(a) for a in v)

    @model_validator(mode="after")
    def _check(self):
        _validate_architecture(self.layer_sizes, self.dropout_rate)
        if len(self.weights) != len(self.layer_sizes) - 1 or len(self.biases) != len(self.weights):
            raise ConfigurationError("one weight matrix and bias vector per layer expected")
        for l, (w, b) in enumerate(zip(self.weights, self.biases)):
            expected = (self.layer_sizes[l + 1], self.layer_sizes[l])
            if w.shape != expected or b.shape != (expected[0],):
                raise ConfigurationError(
                    f"layer {l}: weight {w.shape} / bias {b.shape}, expected {expected}")
        return self

    @property
    def input_dim(self) -> int:
        return self.layer_sizes[0]

    @property
    def output_dim(self) -> int:
        return self.layer_sizes[-1]

    def with_dropout(self, rate: float) -> "Regressor":
        return Regressor(layer_sizes=self.layer_sizes, weights=self.weights,
                         biases=self.biases, activation=self.activation,
                         dropout_rate=rate)

    def with_parameters(self, weights, biases) -> "Regressor":
        return Regressor(layer_sizes=self.layer_sizes, weights=weights, biases=biases,
                         activation=self.activation, dropout_rate=self.dropout_rate)

    def same_parameters(self, other: "Regressor") -> bool:
        return (self.layer_sizes == other.layer_sizes
                and all(np.array_equal(a, b) for a, b in zip(self.weights, other.weights))
                and all(np.array_equal(a, b) for a, b in zip(self.biases, other.biases)))


def _validate_architecture(layer_sizes: Sequence[int], dropout_rate: float) -> None:
    if len(layer_sizes) < 2:
        raise ConfigurationError(f"need at least input and output sizes, got {list(layer_sizes)}")
    if any(int(s) != s or s < 1 for s in layer_sizes):
        raise ConfigurationError(f"layer sizes must be positive integers, got {list(layer_sizes)}")
    if not 0 <= dropout_rate < 1:
        raise ConfigurationError(f"dropout_rate must be in [0, 1), got {dropout_rate}")


def init_regressor(layer_sizes: Sequence[int], dropout_rate: float = 0.2, seed: int = 0,
                   activation: Activation | str = Activation.RELU) -> Regressor:
    """Uniform init in +-sqrt(6 / (fan_in + fan_out)), zero biases."""
    _validate_architecture(layer_sizes, dropout_rate)
    rng = np.random.default_rng(seed)
    weights, biases = [], []
    for fan_in, fan_out in zip(layer_sizes[:-1], layer_sizes[1:]):
        limit = np.sqrt(6.0 / (fan_in + fan_out))
        weights.append(rng.uniform(-limit, limit, size=(fan_out, fan_in)))
        biases.append(np.zeros(fan_out))
    return Regressor(layer_sizes=tuple(int(s) for s in layer_sizes), weights=weights,
                     biases=biases, activation=Activation(activation),
                     dropout_rate=dropout_rate)


# ── Forward ───────────────────────────────────────────────────────────────────

def _sample_masks(layer_sizes: Sequence[int], rate: float, n: int,
                  rng: np.random.Generator) -> Optional[list[np.ndarray]]:
    """Inverted-dropout masks for the hidden layers (0 or 1/(1-rate))."""
    if rate == 0:
        return None
    return [(rng.random((n, h)) >= rate) / (1.0 - rate) for h in layer_sizes[1:-1]]


def _forward_pass(weights, biases, activation, X, masks=None):
    """Return (pre-activations, layer inputs + output)."""
    zs, acts = [], [X]
    h = X
    last = len(weights) - 1
    for l, (w, b) in enumerate(zip(weights, biases)):
        z = h @ w.T + b
        if l == last:
            acts.append(z)
            break
        zs.append(z)
        h = _activate(activation, z)
        if masks is not None:
            h = h * masks[l]
        acts.append(h)
    return zs, acts


def _as_inputs(model: Regressor, x) -> tuple[np.ndarray, bool]:
    x = np.asarray(x, dtype=float)
    single = x.ndim == 1
    X = x.reshape(1, -1) if single else x
    if X.ndim != 2 or X.shape[1] != model.input_dim:
        raise ShapeError(f"input has shape {x.shape}, model expects {model.input_dim} features")
    return X, single


def forward(model: Regressor, x, stochastic: bool = False, rng: RngLike = None) -> np.ndarray:
    """Apply the model to one input vector or a matrix of rows."""
    X, single = _as_inputs(model, x)
    masks = None
    if stochastic:
        if rng is None:
            raise ConfigurationError("stochastic forward needs a random generator")
        masks = _sample_masks(model.layer_sizes, model.dropout_rate, X.shape[0],
                              np.random.default_rng(rng))
    out = _forward_pass(model.weights, model.biases, model.activation, X, masks)[1][-1]
    return out[0] if single else out


# ── MC-dropout ────────────────────────────────────────────────────────────────

def _mc_matrix(model: Regressor, X: np.ndarray, samplings: int,
               rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    if model.dropout_rate == 0:
        out = forward(model, X)
        return out, np.zeros_like(out)
    passes = np.stack([forward(model, X, stochastic=True, rng=rng) for _ in range(samplings)])
    return passes.mean(axis=0), passes.std(axis=0, ddof=1)


def _check_samplings(samplings: int) -> None:
    if samplings < 2:
        raise ConfigurationError(f"need at least 2 samplings for a standard deviation, got {samplings}")


def mc_predict(model: Regressor, x, samplings: int = 20, rng: RngLike = None,
               input_index: int = 0) -> UncertainPrediction:
    _check_samplings(samplings)
    X, _ = _as_inputs(model, x)
    if X.shape[0] != 1:
        raise ShapeError("mc_predict takes a single input; use mc_predict_batch for matrices")
    mean, std = _mc_matrix(model, X, samplings, np.random.default_rng(rng))
    return UncertainPrediction(prediction=tuple(mean[0].tolist()),
                               uncertainty=tuple(std[0].tolist()),
                               input_index=input_index)


def mc_predict_batch(model: Regressor, inputs, samplings: int = 20, seed: int = 0,
                     workers: int = 1, chunk_size: int = 512) -> list[UncertainPrediction]:
    """MC-dropout over many rows.

    Rows are cut into fixed chunks and every chunk owns a generator spawned
    from ``seed``, so the result does not depend on ``workers``.
    """
    _check_samplings(samplings)
    X, _ = _as_inputs(model, np.atleast_2d(inputs))
    n = X.shape[0]
    if n == 0:
        return []
    starts = list(range(0, n, chunk_size))
    child_seeds = np.random.SeedSequence(seed).spawn(len(starts))

    def run(i: int):
        rows = X[starts[i]:starts[i] + chunk_size]
        return _mc_matrix(model, rows, samplings, np.random.default_rng(child_seeds[i]))

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            parts = list(pool.map(run, range(len(starts))))
    else:
        parts = [run(i) for i in range(len(starts))]
    mean = np.concatenate([p[0] for p in parts])
    std = np.concatenate([p[1] for p in parts])
    return [UncertainPrediction(prediction=tuple(mean[i].tolist()),
                                uncertainty=tuple(std[i].tolist()), input_index=i)
            for i in range(n)]


# ── Training ──────────────────────────────────────────────────────────────────

def _loss_and_grads(weights, biases, activation, X, T, w, masks=None):
    zs, acts = _forward_pass(weights, biases, activation, X, masks)
    n = X.shape[0]
    diff = acts[-1] - T
    loss = float(np.sum(w * np.sum(diff ** 2, axis=1)) / n)
    # d loss / d output; rows with weight 0 are exactly zero
    delta = (2.0 / n) * w[:, None] * diff
    grads_w = [None] * len(weights)
    grads_b = [None] * len(weights)
    for l in range(len(weights) - 1, -1, -1):
        grads_w[l] = delta.T @ acts[l]
        grads_b[l] = delta.sum(axis=0)
        if l > 0:
            delta = (delta @ weights[l]) * _activation_grad(activation, zs[l - 1])
            if masks is not None:
                delta = delta * masks[l - 1]
    return loss, grads_w, grads_b


def loss_and_gradients(model: Regressor, batch: TrainingBatch,
                       masks: Optional[list[np.ndarray]] = None):
    """Mean weighted squared error of a batch and its parameter gradients."""
    X, _ = _as_inputs(model, batch.inputs)
    if batch.targets.shape[1] != model.output_dim:
        raise ShapeError(f"targets have {batch.targets.shape[1]} columns, model outputs {model.output_dim}")
    return _loss_and_grads(model.weights, model.biases, model.activation,
                           X, batch.targets, batch.weights, masks)


def make_batches(inputs, targets, weights, batch_size: int = 32,
                 rng: RngLike = None) -> list[TrainingBatch]:
    inputs = np.atleast_2d(np.asarray(inputs, dtype=float))
    targets = np.asarray(targets, dtype=float).reshape(inputs.shape[0], -1)
    weights = np.asarray(weights, dtype=float).reshape(-1)
    if batch_size < 1:
        raise ConfigurationError(f"batch_size must be positive, got {batch_size}")
    order = np.random.default_rng(rng).permutation(inputs.shape[0])
    return [TrainingBatch(inputs=inputs[idx], targets=targets[idx], weights=weights[idx])
            for idx in (order[i:i + batch_size] for i in range(0, len(order), batch_size))]


def train(model: Regressor, batches: Sequence[TrainingBatch], learning_rate: float = 1e-3,
          epochs: int = 1, loss_kind: str = "squared_error", rng: RngLike = None,
          stop_when: Optional[Callable[[list[float]], bool]] = None
          ) -> tuple[Regressor, list[float]]:
    """Mini-batch gradient descent with dropout active.

    loss_history[e] is the mean weighted loss seen during epoch e+1.
    ``stop_when`` is checked on the history after every epoch.
    """
    if learning_rate <= 0:
        raise ConfigurationError(f"learning_rate must be positive, got {learning_rate}")
    if epochs < 1:
        raise ConfigurationError(f"epochs must be >= 1, got {epochs}")
    if loss_kind != "squared_error":
        raise ConfigurationError(f"unsupported loss {loss_kind!r}")
    gen = np.random.default_rng(rng)
    weights = [np.array(w) for w in model.weights]
    biases = [np.array(b) for b in model.biases]
    history: list[float] = []

    for epoch in range(1, epochs + 1):
        total, count = 0.0, 0
        for batch in batches:
            n = len(batch)
            if n == 0:
                continue
            X, _ = _as_inputs(model, batch.inputs)
            masks = _sample_masks(model.layer_sizes, model.dropout_rate, n, gen)
            loss, gw, gb = _loss_and_grads(weights, biases, model.activation,
                                           X, batch.targets, batch.weights, masks)
            if not np.isfinite(loss) or not all(np.all(np.isfinite(g)) for g in gw + gb):
                raise NumericDivergenceError(epoch, "non-finite loss or gradient", history)
            for l in range(len(weights)):
                weights[l] -= learning_rate * gw[l]
                biases[l] -= learning_rate * gb[l]
            total += loss * n
            count += n
        history.append(total / count if count else 0.0)
        if stop_when is not None and stop_when(history):
            logger.info(f"Early stop after epoch {epoch} (loss {history[-1]:.6g})")
            break

    return model.with_parameters(weights, biases), history
