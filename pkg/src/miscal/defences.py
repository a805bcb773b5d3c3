"""Defences: temperature scaling, compression scaling, calibration-attack adversarial training, PGD adversarial training."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .attacks import AttackKind, WhiteBoxSettings, pgd_calibration_attack
from .core import ClassifierOracle, ProbVector, Sample, SeededRng
from .victims import MLPOracle, MLPVictim, TrainConfig, softmax, train_with_transform


@dataclass(frozen=True)
class TemperatureModel:
    """Scalar temperature dividing the logits; argmax-invariant by construction."""

    temperature: float

    def __post_init__(self):
        if self.temperature <= 0:
            raise ValueError("temperature must be positive")

    def apply(self, logits) -> ProbVector:
        z = np.asarray(logits, dtype=np.float64)
        return ProbVector(softmax(z / self.temperature))


def _mean_nll(logits: np.ndarray, labels: np.ndarray, temperature: float) -> float:
    p = softmax(logits / temperature)
    n = logits.shape[0]
    return float(-np.mean(np.log(p[np.arange(n), labels] + 1e-300)))


def fit_temperature(logit_sets, labels, t_min: float = 0.05, t_max: float = 20.0,
                    resolution: float = 1e-4) -> TemperatureModel:
    """Fit T by minimizing mean NLL on a validation set: log-spaced grid, then ternary refine.

    The returned temperature is never worse than the identity T=1.
    """
    logits = np.asarray(logit_sets, dtype=np.float64)
    y = np.asarray(labels, dtype=np.int64)
    if logits.ndim != 2 or logits.shape[0] == 0:
        raise ValueError("need a nonempty (n, K) array of validation logits")
    if logits.shape[0] != y.shape[0]:
        raise ValueError("logits and labels are misaligned")

    grid = np.geomspace(t_min, t_max, 200)
    grid = np.sort(np.append(grid, 1.0))
    nlls = [_mean_nll(logits, y, t) for t in grid]
    best = int(np.argmin(nlls))

    lo = grid[max(best - 1, 0)]
    hi = grid[min(best + 1, len(grid) - 1)]
    while hi - lo > resolution:
        m1 = lo + (hi - lo) / 3.0
        m2 = hi - (hi - lo) / 3.0
        if _mean_nll(logits, y, m1) <= _mean_nll(logits, y, m2):
            hi = m2
        else:
            lo = m1
    t_star = (lo + hi) / 2.0
    if _mean_nll(logits, y, t_star) > _mean_nll(logits, y, 1.0):
        t_star = 1.0
    return TemperatureModel(t_star)


@dataclass(frozen=True)
class CSConfig:
    """Compression-scaling settings: bin count and how many top bins receive all the mass."""

    num_bins: int = 15
    target_bins: int = 3
    t_min: float = 0.01
    t_max: float = 100.0
    grid_points: int = 400
    tolerance: float = 1e-4

    def __post_init__(self):
        if self.num_bins < 1:
            raise ValueError("num_bins must be >= 1")
        if not 1 <= self.target_bins <= self.num_bins:
            raise ValueError("target_bins must lie in [1, num_bins]")
        if not 0 < self.t_min < self.t_max:
            raise ValueError("need 0 < t_min < t_max")


def compression_target_bin(source_bin: int, num_bins: int, target_bins: int) -> int:
    """Order-preserving map from a source bin onto the top target bins.

    Proportional assignment floor(m * t / B), clamped into [1, t], offset
    into the top `target_bins` bins.
    """
    if not 1 <= source_bin <= num_bins:
        raise ValueError(f"source bin {source_bin} outside 1..{num_bins}")
    slot = math.floor(source_bin * target_bins / num_bins)
    slot = min(max(slot, 1), target_bins)
    return num_bins - target_bins + slot


@dataclass(frozen=True)
class CompressionResult:
    probs: ProbVector
    temperature: float
    target_confidence: float
    converged: bool


def _confidence_at(logits: np.ndarray, temperature: float) -> float:
    return float(np.max(softmax(logits / temperature)))


def compression_scale(logits, cfg: CSConfig = CSConfig()) -> CompressionResult:
    """Remap a prediction's confidence into the compressed high-confidence bins.

    The observed confidence is affinely moved from its bin onto the assigned
    target bin, then a temperature matching that confidence within tolerance
    is found by a grid-plus-bisection search. Since bins share one width the
    affine map is a shift by (target_bin - source_bin) bin widths. The argmax
    never changes. If no temperature in range reaches the target, the closest
    achievable distribution is returned with converged=False.
    """
    z = np.asarray(logits, dtype=np.float64)
    if z.ndim != 1 or z.shape[0] < 2:
        raise ValueError("need a 1-D logit vector of length >= 2")
    if not np.all(np.isfinite(z)):
        raise ValueError("logits contain non-finite values")
    probs = softmax(z)
    conf = float(np.max(probs))
    width = 1.0 / cfg.num_bins
    source_bin = min(max(math.ceil(conf * cfg.num_bins - 1e-9), 1), cfg.num_bins)
    target_bin = compression_target_bin(source_bin, cfg.num_bins, cfg.target_bins)
    target_conf = conf + (target_bin - source_bin) * width
    target_conf = min(target_conf, 1.0)

    # Top-class confidence decreases monotonically in T, so bracket then bisect.
    if _confidence_at(z, cfg.t_min) < target_conf - cfg.tolerance:
        t_star, converged = cfg.t_min, False
    elif _confidence_at(z, cfg.t_max) > target_conf + cfg.tolerance:
        t_star, converged = cfg.t_max, False
    else:
        ts = np.geomspace(cfg.t_min, cfg.t_max, cfg.grid_points)
        confs = np.max(softmax(z[None, :] / ts[:, None]), axis=1)
        idx = int(np.searchsorted(-confs, -target_conf))
        lo = ts[max(idx - 1, 0)]
        hi = ts[min(idx, len(ts) - 1)]
        t_star = lo
        for _ in range(50):
            t_star = math.sqrt(lo * hi)
            conf_mid = _confidence_at(z, t_star)
            if abs(conf_mid - target_conf) <= 0.25 * cfg.tolerance:
                break
            if conf_mid >= target_conf:
                lo = t_star
            else:
                hi = t_star
        converged = abs(_confidence_at(z, t_star) - target_conf) <= cfg.tolerance

    return CompressionResult(
        probs=ProbVector(softmax(z / t_star)),
        temperature=float(t_star),
        target_confidence=target_conf,
        converged=converged,
    )


def caat_train(dataset: Sequence[Sample], cfg: TrainConfig, wb: WhiteBoxSettings,
               layer_sizes: Optional[Sequence[int]] = None,
               init: Optional[MLPVictim] = None) -> MLPVictim:
    """Adversarial training on label-preserving under- and overconfidence examples.

    Each minibatch is replaced by its UCA-attacked and OCA-attacked copies
    (against the current model); the cross-entropy loss runs over both copies
    and clean inputs are excluded. Pass `init` to fine-tune an already
    trained victim instead of starting from fresh weights.
    """

    def attack_batch(model, xb, yb, rng):
        oracle = MLPOracle(model)
        under = np.empty_like(xb)
        over = np.empty_like(xb)
        for i in range(xb.shape[0]):
            s = Sample(xb[i], int(yb[i]))
            under[i] = pgd_calibration_attack(
                oracle, s, AttackKind.UCA, wb, rng.derive("uca", i)).adversarial_features
            over[i] = pgd_calibration_attack(
                oracle, s, AttackKind.OCA, wb, rng.derive("oca", i)).adversarial_features
        return np.concatenate([under, over]), np.concatenate([yb, yb])

    return train_with_transform(dataset, cfg, layer_sizes=layer_sizes,
                                batch_transform=attack_batch, init=init)


@dataclass(frozen=True)
class PgdTrainSettings:
    """Standard label-flipping PGD used for adversarial training."""

    epsilon: float = 0.1
    relative_step: float = 0.01 / 0.3
    iterations: int = 10
    random_start: bool = True

    def __post_init__(self):
        if self.epsilon <= 0:
            raise ValueError("epsilon must be positive")
        if self.relative_step <= 0:
            raise ValueError("relative_step must be positive")
        if self.iterations < 0:
            raise ValueError("iterations must be >= 0")

    @property
    def step_size(self) -> float:
        return self.relative_step * self.epsilon


def _xent_input_gradients(model: MLPVictim, x: np.ndarray, labels: np.ndarray) -> np.ndarray:
    pre_acts, logits = model._forward(x)
    p = softmax(logits)
    delta = p.copy()
    delta[np.arange(x.shape[0]), labels] -= 1.0
    for li in range(len(model.weights) - 1, 0, -1):
        delta = (delta @ model.weights[li]) * (pre_acts[li - 1] > 0)
    return delta @ model.weights[0]


def pgd_max_xent(model: MLPVictim, x: np.ndarray, labels: np.ndarray,
                 settings: PgdTrainSettings, rng: SeededRng) -> np.ndarray:
    """Batched n-step PGD maximizing cross-entropy inside the Linf ball."""
    if settings.iterations == 0:
        return x
    adv = x.copy()
    if settings.random_start:
        adv = adv + rng.uniform(-settings.epsilon, settings.epsilon, size=x.shape)
        adv = np.clip(np.clip(adv, x - settings.epsilon, x + settings.epsilon), 0.0, 1.0)
    for _ in range(settings.iterations):
        grad = _xent_input_gradients(model, adv, labels)
        adv = adv + settings.step_size * np.sign(grad)
        adv = np.clip(np.clip(adv, x - settings.epsilon, x + settings.epsilon), 0.0, 1.0)
    return adv


def adversarial_train(dataset: Sequence[Sample], cfg: TrainConfig,
                      pgd: PgdTrainSettings = PgdTrainSettings(),
                      layer_sizes: Optional[Sequence[int]] = None) -> MLPVictim:
    """PGD-based adversarial training: every minibatch is replaced by attacked inputs."""

    def attack_batch(model, xb, yb, rng):
        if pgd.iterations == 0:
            return xb, yb
        return pgd_max_xent(model, xb, yb, pgd, rng.derive("pgd-at")), yb

    return train_with_transform(dataset, cfg, layer_sizes=layer_sizes,
                                batch_transform=attack_batch)


class TemperatureOracle(ClassifierOracle):
    """Victim wrapped with fitted temperature scaling; queries see the scaled distribution."""

    def __init__(self, model: MLPVictim, ts: TemperatureModel):
        super().__init__()
        self.model = model
        self.ts = ts

    def _predict(self, features):
        return self.ts.apply(self.model.logits(features))


class CompressionOracle(ClassifierOracle):
    """Victim wrapped with compression scaling applied to every prediction."""

    def __init__(self, model: MLPVictim, cfg: CSConfig = CSConfig()):
        super().__init__()
        self.model = model
        self.cfg = cfg

    def _predict(self, features):
        return compression_scale(self.model.logits(features), self.cfg).probs


def save_defence(path, defence) -> None:
    """Write fitted defence parameters to a JSON sidecar next to the model file."""
    if isinstance(defence, TemperatureModel):
        payload = {"type": "temperature", "temperature": defence.temperature}
    elif isinstance(defence, CSConfig):
        payload = {"type": "compression", "num_bins": defence.num_bins,
                   "target_bins": defence.target_bins, "t_min": defence.t_min,
                   "t_max": defence.t_max}
    else:
        raise TypeError(f"cannot serialize defence of type {type(defence).__name__}")
    with open(path, "w") as fh:
        json.dump(payload, fh, sort_keys=True, indent=2)
        fh.write("\n")


def load_defence(path):
    with open(path) as fh:
        payload = json.load(fh)
    if payload["type"] == "temperature":
        return TemperatureModel(payload["temperature"])
    if payload["type"] == "compression":
        return CSConfig(num_bins=payload["num_bins"], target_bins=payload["target_bins"],
                        t_min=payload.get("t_min", 0.01), t_max=payload.get("t_max", 100.0))
    raise ValueError(f"unknown defence type {payload['type']!r}")
