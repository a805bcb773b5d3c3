"""Shared domain types: samples, probability vectors, attack budgets, oracles, seeded RNG streams."""

from __future__ import annotations

import hashlib
import threading
from abc import ABC, abstractmethod
from dataclasses import dataclass

import numpy as np

LINF = "linf"
L2 = "l2"

# ProbVector entries must sum to 1 within this tolerance after normalization.
PROB_SUM_ATOL = 1e-9
# Construction rejects vectors whose sum deviates by more than this; smaller
# deviations are silently renormalized.
PROB_SUM_REJECT = 1e-6


def _as_features(x) -> np.ndarray:
    if isinstance(x, Sample):
        return x.features
    return np.asarray(x, dtype=np.float64)


@dataclass(frozen=True)
class Sample:
    """One datapoint: a feature vector in [0,1]^d and its true class index."""

    features: np.ndarray
    label: int

    def __post_init__(self):
        feats = np.asarray(self.features, dtype=np.float64)
        if feats.ndim != 1:
            raise ValueError(f"features must be a 1-D vector, got shape {feats.shape}")
        if not np.all(np.isfinite(feats)):
            raise ValueError("features contain non-finite values")
        if feats.min(initial=0.0) < 0.0 or feats.max(initial=0.0) > 1.0:
            raise ValueError("features must lie in [0, 1]")
        if self.label < 0:
            raise ValueError(f"label must be a non-negative class index, got {self.label}")
        feats.setflags(write=False)
        object.__setattr__(self, "features", feats)

    @property
    def dim(self) -> int:
        return self.features.shape[0]


class ProbVector:
    """A length-K probability distribution produced by a classifier for one input.

    Sums within 1e-6 of one are renormalized; larger deviations are rejected.
    The predicted label is the argmax (lowest index wins ties) and the
    confidence is the corresponding top probability.
    """

    __slots__ = ("probs",)

    def __init__(self, probs):
        p = np.asarray(probs, dtype=np.float64)
        if p.ndim != 1 or p.shape[0] < 2:
            raise ValueError(f"need a 1-D vector of length >= 2, got shape {p.shape}")
        if not np.all(np.isfinite(p)):
            raise ValueError("probabilities contain non-finite values")
        if p.min() < -PROB_SUM_REJECT or p.max() > 1.0 + PROB_SUM_REJECT:
            raise ValueError("probabilities must lie in [0, 1]")
        total = p.sum()
        if abs(total - 1.0) > PROB_SUM_REJECT:
            raise ValueError(f"probabilities sum to {total:.9f}, expected 1")
        p = np.clip(p, 0.0, 1.0)
        p = p / p.sum()
        p.setflags(write=False)
        self.probs = p

    @property
    def num_classes(self) -> int:
        return self.probs.shape[0]

    @property
    def predicted_label(self) -> int:
        return int(np.argmax(self.probs))

    @property
    def confidence(self) -> float:
        return float(self.probs[self.predicted_label])

    def runner_up(self, k: int) -> int:
        """Index of the largest entry other than class k (lowest index wins ties)."""
        masked = self.probs.copy()
        masked[k] = -np.inf
        return int(np.argmax(masked))

    def __getitem__(self, k: int) -> float:
        return float(self.probs[k])

    def __len__(self) -> int:
        return self.probs.shape[0]

    def __repr__(self):
        return f"ProbVector({np.array2string(self.probs, precision=4)})"


@dataclass(frozen=True)
class PredictionRecord:
    """Per-sample outcome used by every calibration metric."""

    true_label: int
    predicted_label: int
    confidence: float
    queries_used: int = 0

    def __post_init__(self):
        if not 0.0 < self.confidence <= 1.0 + 1e-12:
            raise ValueError(f"confidence {self.confidence} outside (0, 1]")
        if self.queries_used < 0:
            raise ValueError("queries_used must be non-negative")

    @property
    def correct(self) -> bool:
        return self.true_label == self.predicted_label


@dataclass(frozen=True)
class AttackBudget:
    """Perturbation budget shared by the black-box attacks.

    Defaults are the standard Linf search settings (eps 0.05, patch fraction
    0.05); the L2 convention is eps 5.0 with patch fraction 0.1.
    """

    norm: str = LINF
    epsilon: float = 0.05
    patch_fraction: float = 0.05
    max_iterations: int = 1000
    stop_loss: float = 0.01
    rca_tolerance: float = 0.01

    def __post_init__(self):
        if self.norm not in (LINF, L2):
            raise ValueError(f"norm must be '{LINF}' or '{L2}', got {self.norm!r}")
        if self.epsilon <= 0:
            raise ValueError("epsilon must be positive")
        if not 0.0 < self.patch_fraction <= 1.0:
            raise ValueError("patch_fraction must be in (0, 1]")
        if self.max_iterations < 1:
            raise ValueError("max_iterations must be >= 1")
        if self.stop_loss < 0:
            raise ValueError("stop_loss must be non-negative")


def perturbation_norm(original, candidate, norm: str) -> float:
    delta = _as_features(candidate) - _as_features(original)
    if norm == LINF:
        return float(np.max(np.abs(delta), initial=0.0))
    return float(np.linalg.norm(delta))


def clip_to_ball(original, candidate, budget: AttackBudget) -> np.ndarray:
    """Project a candidate vector into the epsilon-ball around the original and into [0,1]^d.

    The norm projection runs first; the box clip afterwards can only shrink
    per-coordinate deviations, so both constraints hold on the result. A
    candidate already satisfying both comes back unchanged.
    """
    orig = _as_features(original)
    cand = np.asarray(candidate, dtype=np.float64)
    if cand.shape != orig.shape:
        raise ValueError(f"dimension mismatch: original {orig.shape}, candidate {cand.shape}")
    delta = cand - orig
    if budget.norm == LINF:
        delta = np.clip(delta, -budget.epsilon, budget.epsilon)
    else:
        norm = np.linalg.norm(delta)
        if norm > budget.epsilon:
            delta = delta * (budget.epsilon / norm)
    return np.clip(orig + delta, 0.0, 1.0)


class SeededRng:
    """Deterministic hierarchical random streams keyed by (purpose tag, index).

    Identical (master seed, tag, index) always yields an identical stream, no
    matter when or on which worker it is drawn, which makes parallel attack
    runs byte-reproducible.
    """

    __slots__ = ("master_seed", "path", "_generator")

    def __init__(self, master_seed: int, path: tuple = ()):
        self.master_seed = int(master_seed)
        self.path = tuple(path)
        self._generator = None

    def derive(self, tag: str, index: int = 0) -> "SeededRng":
        return SeededRng(self.master_seed, self.path + ((str(tag), int(index)),))

    @property
    def generator(self) -> np.random.Generator:
        if self._generator is None:
            key = str(self.master_seed).encode()
            for tag, index in self.path:
                key += b"/" + tag.encode() + b":" + str(index).encode()
            digest = hashlib.blake2b(key, digest_size=16).digest()
            seed = int.from_bytes(digest, "little")
            self._generator = np.random.Generator(np.random.PCG64(seed))
        return self._generator

    # Convenience pass-throughs so call sites read like a numpy Generator.
    def uniform(self, low=0.0, high=1.0, size=None):
        return self.generator.uniform(low, high, size)

    def integers(self, low, high=None, size=None):
        return self.generator.integers(low, high, size)

    def random(self, size=None):
        return self.generator.random(size)

    def standard_normal(self, size=None):
        return self.generator.standard_normal(size)

    def choice(self, a, size=None, replace=True):
        return self.generator.choice(a, size=size, replace=replace)

    def permutation(self, x):
        return self.generator.permutation(x)

    def __repr__(self):
        return f"SeededRng(seed={self.master_seed}, path={self.path})"


def derive_stream(rng: SeededRng, tag: str, index: int = 0) -> SeededRng:
    """Return an independent deterministic substream for (tag, index)."""
    return rng.derive(tag, index)


class ClassifierOracle(ABC):
    """Queryable prediction interface with a monotone, thread-safe query counter.

    `serial` declares whether the implementation accepts concurrent predict
    calls; the attack engine honors the declaration.
    """

    serial: bool = False

    def __init__(self):
        self._queries = 0
        self._lock = threading.Lock()

    @property
    def query_count(self) -> int:
        return self._queries

    def predict(self, features) -> ProbVector:
        probs = self._predict(_as_features(features))
        with self._lock:
            self._queries += 1
        return probs

    @abstractmethod
    def _predict(self, features: np.ndarray) -> ProbVector:
        ...


UNDERCONFIDENCE = "underconfidence"
OVERCONFIDENCE = "overconfidence"
CROSS_ENTROPY = "cross_entropy"

GRADIENT_OBJECTIVES = (UNDERCONFIDENCE, OVERCONFIDENCE, CROSS_ENTROPY)


class GradientOracle(ClassifierOracle):
    """White-box oracle: adds exact input gradients of the attack objectives.

    Gradient evaluations count as one query each, same as a forward pass.
    """

    def input_gradient(self, features, objective: str, class_index: int) -> np.ndarray:
        if objective not in GRADIENT_OBJECTIVES:
            raise ValueError(f"unknown objective {objective!r}; expected one of {GRADIENT_OBJECTIVES}")
        grad = self._input_gradient(_as_features(features), objective, int(class_index))
        with self._lock:
            self._queries += 1
        return grad

    @abstractmethod
    def _input_gradient(self, features: np.ndarray, objective: str, class_index: int) -> np.ndarray:
        ...
