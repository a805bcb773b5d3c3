"""Desk-scale victim classifiers: a trainable MLP with exact input gradients and a scriptable lookup table."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np

from .core import (
    CROSS_ENTROPY,
    OVERCONFIDENCE,
    UNDERCONFIDENCE,
    ClassifierOracle,
    GradientOracle,
    ProbVector,
    Sample,
    SeededRng,
)

MODEL_FORMAT_VERSION = 1


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 0.1
    epochs: int = 30
    batch_size: int = 32
    seed: int = 0
    momentum: float = 0.9

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if not 0.0 <= self.momentum < 1.0:
            raise ValueError("momentum must lie in [0, 1)")


def softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - np.max(logits, axis=-1, keepdims=True)
    exp = np.exp(shifted)
    return exp / np.sum(exp, axis=-1, keepdims=True)


def relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0.0)


class MLPVictim:
    """Feed-forward rectifier network with a softmax head.

    Immutable after training by convention: forward passes and input
    gradients are safe to call concurrently.
    """

    def __init__(self, layer_sizes: Sequence[int], rng: Optional[SeededRng] = None):
        if len(layer_sizes) < 2:
            raise ValueError("layer_sizes needs at least input and output sizes")
        if layer_sizes[-1] < 2:
            raise ValueError("need at least two output classes")
        self.layer_sizes = tuple(int(s) for s in layer_sizes)
        self.weights = []
        self.biases = []
        init = rng or SeededRng(0)
        for li, (fan_in, fan_out) in enumerate(zip(self.layer_sizes[:-1], self.layer_sizes[1:])):
            scale = 1.0 / np.sqrt(fan_in)
            layer_rng = init.derive("layer-init", li)
            self.weights.append(layer_rng.uniform(-scale, scale, size=(fan_out, fan_in)))
            self.biases.append(np.zeros(fan_out))
        self.training_loss: list = []

    @property
    def input_dim(self) -> int:
        return self.layer_sizes[0]

    @property
    def num_classes(self) -> int:
        return self.layer_sizes[-1]

    @property
    def parameter_count(self) -> int:
        return sum(w.size + b.size for w, b in zip(self.weights, self.biases))

    def _forward(self, x: np.ndarray):
        """Forward pass caching pre-activations; x is (d,) or (n, d)."""
        pre_acts = []
        a = x
        for w, b in zip(self.weights[:-1], self.biases[:-1]):
            z = a @ w.T + b
            pre_acts.append(z)
            a = relu(z)
        logits = a @ self.weights[-1].T + self.biases[-1]
        return pre_acts, logits

    def logits(self, features) -> np.ndarray:
        x = np.asarray(features, dtype=np.float64)
        self._check_dim(x)
        return self._forward(x)[1]

    def _check_dim(self, x: np.ndarray):
        if x.shape[-1] != self.input_dim:
            raise ValueError(f"expected feature dimension {self.input_dim}, got {x.shape[-1]}")

    def predict_proba(self, features) -> ProbVector:
        x = np.asarray(features, dtype=np.float64)
        if x.ndim != 1:
            raise ValueError("predict_proba takes a single feature vector")
        return ProbVector(softmax(self.logits(x)))

    def predict_proba_batch(self, features: np.ndarray) -> np.ndarray:
        return softmax(self.logits(np.atleast_2d(features)))

    def input_gradient(self, features, objective: str, class_index: int) -> np.ndarray:
        """Exact d(objective)/d(input) via backprop through softmax and all layers.

        Objectives: underconfidence margin p_k - max_{j!=k} p_j, overconfidence
        deficit 1 - p_k, or cross-entropy against class_index.
        """
        x = np.asarray(features, dtype=np.float64)
        if x.ndim != 1:
            raise ValueError("input_gradient takes a single feature vector")
        self._check_dim(x)
        k = int(class_index)
        pre_acts, logits = self._forward(x)
        p = softmax(logits)

        if objective == OVERCONFIDENCE:
            # M = 1 - p_k
            grad_z = p[k] * p
            grad_z[k] -= p[k]
        elif objective == UNDERCONFIDENCE:
            # M = p_k - p_r with r the (locally fixed) runner-up
            masked = p.copy()
            masked[k] = -np.inf
            r = int(np.argmax(masked))
            grad_z = -(p[k] - p[r]) * p
            grad_z[k] += p[k]
            grad_z[r] -= p[r]
        elif objective == CROSS_ENTROPY:
            grad_z = p.copy()
            grad_z[k] -= 1.0
        else:
            raise ValueError(f"unknown objective {objective!r}")

        d = grad_z
        for li in range(len(self.weights) - 1, 0, -1):
            d = self.weights[li].T @ d
            d = d * (pre_acts[li - 1] > 0)
        return self.weights[0].T @ d

    def loss_and_param_grads(self, x: np.ndarray, labels: np.ndarray):
        """Mean cross-entropy over a batch and its gradients w.r.t. all parameters."""
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        labels = np.asarray(labels, dtype=np.int64)
        self._check_dim(x)
        n = x.shape[0]
        activations = [x]
        pre_acts, logits = self._forward(x)
        for z in pre_acts:
            activations.append(relu(z))
        p = softmax(logits)
        eps = 1e-12
        loss = float(-np.mean(np.log(p[np.arange(n), labels] + eps)))

        delta = p.copy()
        delta[np.arange(n), labels] -= 1.0
        delta /= n
        grads_w = [None] * len(self.weights)
        grads_b = [None] * len(self.biases)
        for li in range(len(self.weights) - 1, -1, -1):
            grads_w[li] = delta.T @ activations[li]
            grads_b[li] = delta.sum(axis=0)
            if li > 0:
                delta = (delta @ self.weights[li]) * (pre_acts[li - 1] > 0)
        return loss, grads_w, grads_b

    def dataset_loss(self, x: np.ndarray, labels: np.ndarray) -> float:
        p = self.predict_proba_batch(x)
        n = p.shape[0]
        return float(-np.mean(np.log(p[np.arange(n), np.asarray(labels, dtype=np.int64)] + 1e-12)))

    def save(self, path):
        arrays = {
            "format_version": np.array([MODEL_FORMAT_VERSION], dtype=np.int64),
            "layer_sizes": np.array(self.layer_sizes, dtype=np.int64),
        }
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            arrays[f"w{i}"] = w
            arrays[f"b{i}"] = b
        np.savez(path, **arrays)

    @classmethod
    def load(cls, path) -> "MLPVictim":
        data = np.load(path)
        version = int(data["format_version"][0])
        if version != MODEL_FORMAT_VERSION:
            raise ValueError(f"unsupported model format version {version}")
        model = cls.__new__(cls)
        model.layer_sizes = tuple(int(s) for s in data["layer_sizes"])
        model.weights = [data[f"w{i}"] for i in range(len(model.layer_sizes) - 1)]
        model.biases = [data[f"b{i}"] for i in range(len(model.layer_sizes) - 1)]
        model.training_loss = []
        return model


class LookupVictim:
    """Deterministic classifier mapping feature-space grid cells to explicit distributions.

    Useful as an oracle with analytically known attack outcomes: a constant
    table admits no improving perturbation at all.
    """

    def __init__(self, num_classes: int, default: ProbVector, cells: Optional[dict] = None,
                 resolution: int = 1):
        if resolution < 1:
            raise ValueError("resolution must be >= 1")
        if default.num_classes != num_classes:
            raise ValueError("default distribution has wrong number of classes")
        self.num_classes = num_classes
        self.resolution = resolution
        self.default = default
        self.cells = {}
        for key, pv in (cells or {}).items():
            if pv.num_classes != num_classes:
                raise ValueError(f"cell {key} has wrong number of classes")
            self.cells[tuple(key)] = pv

    def cell_of(self, features) -> tuple:
        f = np.asarray(features, dtype=np.float64)
        return tuple(min(int(v * self.resolution), self.resolution - 1) for v in f)

    def predict_proba(self, features) -> ProbVector:
        return self.cells.get(self.cell_of(features), self.default)


def predict_proba(victim, features) -> ProbVector:
    """Deterministic class distribution of a victim for one feature vector."""
    return victim.predict_proba(features)


def input_gradient(victim, features, objective: str, class_index: int) -> np.ndarray:
    """Exact input gradient of the named objective; defined for MLP victims only."""
    if not isinstance(victim, MLPVictim):
        raise TypeError(f"input gradients are only defined for MLPVictim, got {type(victim).__name__}")
    return victim.input_gradient(features, objective, class_index)


def train_with_transform(dataset: Sequence[Sample], cfg: TrainConfig,
                         layer_sizes: Optional[Sequence[int]] = None,
                         batch_transform: Optional[Callable] = None,
                         init: Optional["MLPVictim"] = None) -> MLPVictim:
    """Minibatch SGD training loop shared by plain and adversarial training.

    `batch_transform(model, x_batch, y_batch, rng) -> (x, y)` may replace or
    augment each minibatch before the gradient step. `init` warm-starts from
    an existing model (fine-tuning) instead of fresh seeded weights.
    Identical inputs give bit-identical parameters.
    """
    if not dataset:
        raise ValueError("cannot train on an empty dataset")
    x = np.stack([s.features for s in dataset])
    y = np.array([s.label for s in dataset], dtype=np.int64)
    num_classes = int(y.max()) + 1 if layer_sizes is None else layer_sizes[-1]
    num_classes = max(num_classes, 2)
    dim = x.shape[1]
    if init is not None:
        layer_sizes = init.layer_sizes
    if layer_sizes is None:
        layer_sizes = (dim, 16, 16, num_classes)
    if layer_sizes[0] != dim:
        raise ValueError(f"layer_sizes input {layer_sizes[0]} does not match feature dimension {dim}")
    if y.max() >= layer_sizes[-1]:
        raise ValueError("labels exceed the declared number of classes")

    rng = SeededRng(cfg.seed)
    if init is not None:
        model = MLPVictim.__new__(MLPVictim)
        model.layer_sizes = init.layer_sizes
        model.weights = [w.copy() for w in init.weights]
        model.biases = [b.copy() for b in init.biases]
        model.training_loss = []
    else:
        model = MLPVictim(layer_sizes, rng=rng.derive("init"))
    velocity_w = [np.zeros_like(w) for w in model.weights]
    velocity_b = [np.zeros_like(b) for b in model.biases]

    n = x.shape[0]
    model.training_loss = [model.dataset_loss(x, y)]
    for epoch in range(cfg.epochs):
        order = rng.derive("shuffle", epoch).permutation(n)
        for bi, start in enumerate(range(0, n, cfg.batch_size)):
            idx = order[start:start + cfg.batch_size]
            xb, yb = x[idx], y[idx]
            if batch_transform is not None:
                xb, yb = batch_transform(model, xb, yb, rng.derive("batch", epoch * 100000 + bi))
            loss, grads_w, grads_b = model.loss_and_param_grads(xb, yb)
            if not np.isfinite(loss):
                raise RuntimeError(f"non-finite training loss at epoch {epoch}, batch {bi}")
            for li in range(len(model.weights)):
                velocity_w[li] = cfg.momentum * velocity_w[li] - cfg.learning_rate * grads_w[li]
                velocity_b[li] = cfg.momentum * velocity_b[li] - cfg.learning_rate * grads_b[li]
                model.weights[li] += velocity_w[li]
                model.biases[li] += velocity_b[li]
        model.training_loss.append(model.dataset_loss(x, y))
    return model


def train_mlp(dataset: Sequence[Sample], cfg: TrainConfig,
              layer_sizes: Optional[Sequence[int]] = None) -> MLPVictim:
    """Train an MLP victim on clean data."""
    return train_with_transform(dataset, cfg, layer_sizes=layer_sizes)


def train_accuracy(model, dataset: Sequence[Sample]) -> float:
    hits = sum(1 for s in dataset if model.predict_proba(s.features).predicted_label == s.label)
    return hits / len(dataset)


class MLPOracle(GradientOracle):
    """Query-counting white-box oracle around a trained MLP."""

    def __init__(self, model: MLPVictim):
        super().__init__()
        self.model = model

    def _predict(self, features):
        return self.model.predict_proba(features)

    def _input_gradient(self, features, objective, class_index):
        return self.model.input_gradient(features, objective, class_index)


class VictimOracle(ClassifierOracle):
    """Query-counting black-box oracle around any victim with predict_proba."""

    def __init__(self, victim):
        super().__init__()
        self.victim = victim

    def _predict(self, features):
        return self.victim.predict_proba(features)
