"""The four calibration attacks (UCA, OCA, MMA, RCA) in black-box random-square-search and white-box gradient forms."""

from __future__ import annotations

import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from enum import Enum
from typing import Optional, Sequence

import numpy as np

from .core import (
    LINF,
    OVERCONFIDENCE,
    UNDERCONFIDENCE,
    AttackBudget,
    ClassifierOracle,
    GradientOracle,
    PredictionRecord,
    ProbVector,
    Sample,
    SeededRng,
    clip_to_ball,
    perturbation_norm,
)

# Patch fraction halves each time the iteration count passes a milestone.
SQUARE_SCHEDULE_MILESTONES = (10, 50, 200, 500, 1000, 2000, 4000, 6000, 8000)


class AttackKind(Enum):
    UCA = "uca"
    OCA = "oca"
    MMA = "mma"
    RCA = "rca"

    @classmethod
    def parse(cls, name: str) -> "AttackKind":
        try:
            return cls(name.lower())
        except ValueError:
            raise ValueError(f"unknown attack kind {name!r}; expected one of "
                             f"{[k.value for k in cls]}") from None


@dataclass(frozen=True)
class WhiteBoxSettings:
    """Gradient-attack settings: step size, iteration count and the per-direction keep fractions.

    The keep fractions select which coordinates of each proposed update
    survive; underconfidence keeps few (strong updates flip labels),
    overconfidence keeps most.
    """

    epsilon: float = 0.05
    step_size: float = 5.0 / 255.0
    iterations: int = 10
    dropout_keep_under: float = 0.05
    dropout_keep_over: float = 0.8

    def __post_init__(self):
        if self.epsilon <= 0:
            raise ValueError("epsilon must be positive")
        if not 0.0 < self.step_size <= self.epsilon:
            raise ValueError("step_size must satisfy 0 < step <= epsilon")
        if self.iterations < 0:
            raise ValueError("iterations must be >= 0")
        for frac in (self.dropout_keep_under, self.dropout_keep_over):
            if not 0.0 < frac <= 1.0:
                raise ValueError("keep fractions must lie in (0, 1]")


@dataclass(frozen=True)
class AttackTrace:
    """Outcome of attacking one sample; the label constraint holds by construction."""

    sample_index: int
    kind: AttackKind
    direction: str
    true_label: int
    pre_label: int
    post_label: int
    pre_confidence: float
    post_confidence: float
    queries_used: int
    accepted_updates: int
    adversarial_features: np.ndarray
    delta_norm: float
    norm: str
    rca_target: Optional[float] = None
    loss_history: tuple = ()

    def to_log_dict(self) -> dict:
        return {
            "sample_index": self.sample_index,
            "kind": self.kind.value,
            "direction": self.direction,
            "rca_target": self.rca_target,
            "true_label": self.true_label,
            "pre_label": self.pre_label,
            "post_label": self.post_label,
            "pre_confidence": self.pre_confidence,
            "post_confidence": self.post_confidence,
            "queries_used": self.queries_used,
            "accepted_updates": self.accepted_updates,
            "delta_norm": self.delta_norm,
            "norm": self.norm,
        }


@dataclass(frozen=True)
class AttackResult:
    """Aligned pre/post records plus the per-sample traces of one dataset attack."""

    pre_records: list
    post_records: list
    traces: list
    failures: list

    def __iter__(self):
        return iter((self.pre_records, self.post_records, self.traces))


def miscalibration_loss(probs: ProbVector, k: int, direction: str) -> float:
    """Attack objective: top-two margin for underconfidence, 1 - p_k for overconfidence."""
    if k >= probs.num_classes:
        raise ValueError(f"class index {k} out of range for K={probs.num_classes}")
    if direction == UNDERCONFIDENCE:
        return probs[k] - probs[probs.runner_up(k)]
    if direction == OVERCONFIDENCE:
        return 1.0 - probs[k]
    raise ValueError(f"unknown direction {direction!r}")


def resolve_direction(kind: AttackKind, true_label: int, predicted_label: int,
                      confidence: float, num_classes: int, rng: SeededRng):
    """Per-sample effective direction, plus the random target for RCA.

    MMA pushes misclassified samples up and correct ones down; RCA draws a
    target g uniform in [1/K, 1] and moves confidence toward it.
    """
    if kind == AttackKind.UCA:
        return UNDERCONFIDENCE, None
    if kind == AttackKind.OCA:
        return OVERCONFIDENCE, None
    if kind == AttackKind.MMA:
        if true_label != predicted_label:
            return OVERCONFIDENCE, None
        return UNDERCONFIDENCE, None
    if kind == AttackKind.RCA:
        g = float(rng.derive("rca-target").uniform(1.0 / num_classes, 1.0))
        if g > confidence:
            return OVERCONFIDENCE, g
        return UNDERCONFIDENCE, g
    raise ValueError(f"unknown attack kind {kind!r}")


def patch_fraction_at(p_init: float, iteration: int,
                      milestones: Sequence[int] = SQUARE_SCHEDULE_MILESTONES) -> float:
    halvings = sum(1 for m in milestones if iteration > m)
    return p_init / (2 ** halvings)


def _grid_shape(dim: int):
    h = max(int(math.floor(math.sqrt(dim))), 1)
    w = int(math.ceil(dim / h))
    return h, w


def square_perturb(current: np.ndarray, original: Sample, budget: AttackBudget,
                   iteration: int, rng: SeededRng) -> np.ndarray:
    """Propose a candidate differing from `current` only inside one square window.

    Features are laid out on a near-square grid; the window side follows
    round(sqrt(p * d)) with the standard halving schedule on p over
    iterations. Linf sets the window to an epsilon-ball vertex around the
    original; L2 refills the window with the norm budget left by the rest of
    the perturbation. The candidate is already projected into the ball and
    the unit box.
    """
    if iteration < 1:
        raise ValueError("iteration must be >= 1")
    x0 = original.features
    cur = np.asarray(current, dtype=np.float64)
    if cur.shape != x0.shape:
        raise ValueError("current and original dimensions differ")
    d = x0.shape[0]
    h, w = _grid_shape(d)

    p_it = patch_fraction_at(budget.patch_fraction, iteration)
    side = int(round(math.sqrt(p_it * d)))
    side = min(max(side, 1), min(h, w))

    step = rng.derive("square", iteration)
    row = int(step.integers(0, h - side + 1))
    col = int(step.integers(0, w - side + 1))
    window = []
    for r in range(row, row + side):
        base = r * w
        for c in range(col, col + side):
            flat = base + c
            if flat < d:
                window.append(flat)
    window = np.array(window, dtype=np.int64)
    if window.size == 0:
        window = np.array([int(step.integers(0, d))], dtype=np.int64)

    candidate = cur.copy()
    if budget.norm == LINF:
        sign = 1.0 if step.random() < 0.5 else -1.0
        candidate[window] = x0[window] + sign * budget.epsilon
    else:
        delta = cur - x0
        outside = delta.copy()
        outside[window] = 0.0
        avail_sq = max(budget.epsilon ** 2 - float(np.sum(outside ** 2)), 0.0)
        signs = np.where(step.random(window.size) < 0.5, 1.0, -1.0)
        unit = signs / math.sqrt(window.size)
        candidate[window] = x0[window] + unit * math.sqrt(avail_sq)
    return clip_to_ball(original, candidate, budget)


def _stop_reached(direction: str, kind: AttackKind, loss: float, conf: float,
                  budget_stop: float, rca_target, rca_tol: float,
                  confidence_target) -> bool:
    if loss < budget_stop:
        return True
    if kind == AttackKind.RCA and rca_target is not None and abs(conf - rca_target) <= rca_tol:
        return True
    if confidence_target is not None:
        if direction == UNDERCONFIDENCE and conf <= confidence_target:
            return True
        if direction == OVERCONFIDENCE and conf >= confidence_target:
            return True
    return False


def _accepts(direction: str, l_new: float, l_old: float, k_new: int, k: int,
             conf_new: float, conf_old: float) -> bool:
    if not (l_new < l_old and k_new == k):
        return False
    # For the underconfidence margin, a shrinking top-two gap does not by
    # itself force the top probability down; requiring it keeps every
    # accepted step moving confidence in the attack direction.
    if direction == UNDERCONFIDENCE and not conf_new < conf_old:
        return False
    return True


def calibration_attack(oracle: ClassifierOracle, sample: Sample, kind: AttackKind,
                       budget: AttackBudget, rng: SeededRng,
                       confidence_target: Optional[float] = None,
                       sample_index: int = 0) -> AttackTrace:
    """Black-box random-square-search attack on one sample.

    Queries the original prediction to fix the attacked class k, resolves the
    per-sample direction, then proposes square perturbations, accepting only
    candidates that strictly lower the loss while keeping the predicted label.
    Stops early once the loss falls under budget.stop_loss, the RCA target is
    hit within tolerance, or an optional confidence target is crossed.
    """
    x0 = sample.features
    probs0 = oracle.predict(x0)
    queries = 1
    k = probs0.predicted_label
    pre_conf = probs0.confidence
    direction, rca_target = resolve_direction(
        kind, sample.label, k, pre_conf, probs0.num_classes, rng)

    current = x0.copy()
    cur_conf = pre_conf
    l_old = miscalibration_loss(probs0, k, direction)
    losses = [l_old]
    accepted = 0

    for it in range(1, budget.max_iterations + 1):
        if _stop_reached(direction, kind, l_old, cur_conf, budget.stop_loss,
                         rca_target, budget.rca_tolerance, confidence_target):
            break
        candidate = square_perturb(current, sample, budget, it, rng)
        probs = oracle.predict(candidate)
        queries += 1
        l_new = miscalibration_loss(probs, k, direction)
        if _accepts(direction, l_new, l_old, probs.predicted_label, k, probs[k], cur_conf):
            current = candidate
            l_old = l_new
            cur_conf = probs[k]
            accepted += 1
            losses.append(l_new)

    return AttackTrace(
        sample_index=sample_index,
        kind=kind,
        direction=direction,
        true_label=sample.label,
        pre_label=k,
        post_label=k,
        pre_confidence=pre_conf,
        post_confidence=cur_conf,
        queries_used=queries,
        accepted_updates=accepted,
        adversarial_features=current,
        delta_norm=perturbation_norm(sample, current, budget.norm),
        norm=budget.norm,
        rca_target=rca_target,
        loss_history=tuple(losses),
    )


def pgd_calibration_attack(oracle: GradientOracle, sample: Sample, kind: AttackKind,
                           settings: WhiteBoxSettings, rng: SeededRng,
                           sample_index: int = 0) -> AttackTrace:
    """White-box gradient attack: signed steps on the resolved loss with a random keep-mask.

    Each iteration takes a step of size alpha against the loss gradient,
    keeps a random fraction of the update coordinates, projects into the
    Linf ball and unit box, and accepts the iterate only if the predicted
    label is unchanged and the loss strictly improved.
    """
    x0 = sample.features
    ball = AttackBudget(norm=LINF, epsilon=settings.epsilon,
                        patch_fraction=1.0, max_iterations=max(settings.iterations, 1))
    probs0 = oracle.predict(x0)
    queries = 1
    k = probs0.predicted_label
    pre_conf = probs0.confidence
    direction, rca_target = resolve_direction(
        kind, sample.label, k, pre_conf, probs0.num_classes, rng)
    keep = settings.dropout_keep_under if direction == UNDERCONFIDENCE else settings.dropout_keep_over

    current = x0.copy()
    cur_conf = pre_conf
    l_old = miscalibration_loss(probs0, k, direction)
    losses = [l_old]
    accepted = 0

    for it in range(1, settings.iterations + 1):
        grad = oracle.input_gradient(current, direction, k)
        queries += 1
        step = -settings.step_size * np.sign(grad)
        mask = rng.derive("pgd-mask", it).random(x0.shape[0]) < keep
        candidate = clip_to_ball(sample, current + step * mask, ball)
        probs = oracle.predict(candidate)
        queries += 1
        l_new = miscalibration_loss(probs, k, direction)
        if _accepts(direction, l_new, l_old, probs.predicted_label, k, probs[k], cur_conf):
            current = candidate
            l_old = l_new
            cur_conf = probs[k]
            accepted += 1
            losses.append(l_new)

    return AttackTrace(
        sample_index=sample_index,
        kind=kind,
        direction=direction,
        true_label=sample.label,
        pre_label=k,
        post_label=k,
        pre_confidence=pre_conf,
        post_confidence=cur_conf,
        queries_used=queries,
        accepted_updates=accepted,
        adversarial_features=current,
        delta_norm=perturbation_norm(sample, current, LINF),
        norm=LINF,
        rca_target=rca_target,
        loss_history=tuple(losses),
    )


def records_from_traces(traces: Sequence[AttackTrace]):
    """Aligned (pre, post) prediction-record lists rebuilt from traces."""
    pre = [PredictionRecord(t.true_label, t.pre_label, t.pre_confidence, 0) for t in traces]
    post = [PredictionRecord(t.true_label, t.post_label, t.post_confidence, t.queries_used)
            for t in traces]
    return pre, post


def attack_dataset(oracle: ClassifierOracle, dataset: Sequence[Sample], kind: AttackKind,
                   budget_or_settings, rng: SeededRng, workers: int = 1,
                   confidence_target: Optional[float] = None,
                   on_error: str = "raise") -> AttackResult:
    """Attack every sample with an independent per-index RNG stream.

    Results are byte-identical for any worker count because each sample's
    randomness depends only on (master seed, sample index). A serial-declared
    oracle forces sequential execution. With on_error="skip", a failing
    sample is dropped from the records and logged as a failure entry.
    """
    if not dataset:
        raise ValueError("cannot attack an empty dataset")
    if on_error not in ("raise", "skip"):
        raise ValueError("on_error must be 'raise' or 'skip'")
    white_box = isinstance(budget_or_settings, WhiteBoxSettings)
    if white_box and not isinstance(oracle, GradientOracle):
        raise TypeError("white-box settings require a GradientOracle")

    def attack_one(i: int):
        stream = rng.derive("sample", i)
        if white_box:
            return pgd_calibration_attack(oracle, dataset[i], kind, budget_or_settings,
                                          stream, sample_index=i)
        return calibration_attack(oracle, dataset[i], kind, budget_or_settings, stream,
                                  confidence_target=confidence_target, sample_index=i)

    results: list = [None] * len(dataset)
    failures = []

    def run(i: int):
        try:
            results[i] = attack_one(i)
        except Exception as exc:
            if on_error == "raise":
                raise
            failures.append({"sample_index": i, "error": f"{type(exc).__name__}: {exc}"})

    if workers > 1 and not getattr(oracle, "serial", False):
        with ThreadPoolExecutor(max_workers=workers) as pool:
            list(pool.map(run, range(len(dataset))))
    else:
        for i in range(len(dataset)):
            run(i)

    traces = [t for t in results if t is not None]
    failures.sort(key=lambda f: f["sample_index"])
    pre, post = records_from_traces(traces)
    return AttackResult(pre_records=pre, post_records=post, traces=traces, failures=failures)


def write_trace_log(traces: Sequence[AttackTrace], path, failures: Sequence[dict] = ()):
    """Line-delimited JSON log, one record per attacked sample."""
    with open(path, "w") as fh:
        for t in traces:
            fh.write(json.dumps(t.to_log_dict(), sort_keys=True) + "\n")
        for f in failures:
            fh.write(json.dumps({"failure": f}, sort_keys=True) + "\n")


def read_trace_log(path):
    """Parse a trace log back into (entries, failures) dict lists."""
    entries = []
    failures = []
    with open(path) as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            row = json.loads(line)
            if "failure" in row:
                failures.append(row["failure"])
            else:
                entries.append(row)
    return entries, failures


def records_from_log_entries(entries: Sequence[dict]):
    pre = [PredictionRecord(e["true_label"], e["pre_label"], e["pre_confidence"], 0)
           for e in entries]
    post = [PredictionRecord(e["true_label"], e["post_label"], e["post_confidence"],
                             e["queries_used"]) for e in entries]
    return pre, post
