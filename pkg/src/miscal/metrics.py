"""Calibration and cost metrics: ECE, KS error, reliability bins, query stats, summary rows."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .core import PredictionRecord

DEFAULT_NUM_BINS = 15

SUMMARY_CSV_HEADER = [
    "dataset", "kind", "norm", "epsilon", "iterations", "seed", "acc",
    "pre_ece", "post_ece", "pre_ks", "post_ks", "pre_conf", "post_conf",
    "avg_q", "med_q",
]


def bin_index(confidence: float, num_bins: int) -> int:
    """Bin number in 1..num_bins for a confidence in [0, 1].

    Bins are left-open, right-closed with edges at m/B; confidence 0 goes to
    bin 1. The 1e-9 shift keeps exact edge values (e.g. 2/15 with B=15) in
    their own bin despite float rounding.
    """
    idx = math.ceil(confidence * num_bins - 1e-9)
    return min(max(idx, 1), num_bins)


@dataclass(frozen=True)
class ReliabilityBins:
    """Per-bin counts, mean confidences and accuracies over (0,1] split into equal widths."""

    num_bins: int
    counts: np.ndarray
    mean_confidence: np.ndarray
    accuracy: np.ndarray

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def edges(self) -> np.ndarray:
        return np.linspace(0.0, 1.0, self.num_bins + 1)


def reliability_bins(records: Sequence[PredictionRecord], num_bins: int = DEFAULT_NUM_BINS) -> ReliabilityBins:
    if not records:
        raise ValueError("cannot bin an empty record list")
    if num_bins < 1:
        raise ValueError("num_bins must be >= 1")
    counts = np.zeros(num_bins, dtype=np.int64)
    conf_sum = np.zeros(num_bins)
    correct_sum = np.zeros(num_bins)
    for r in records:
        b = bin_index(r.confidence, num_bins) - 1
        counts[b] += 1
        conf_sum[b] += r.confidence
        correct_sum[b] += 1.0 if r.correct else 0.0
    with np.errstate(invalid="ignore"):
        mean_conf = np.where(counts > 0, conf_sum / np.maximum(counts, 1), 0.0)
        accuracy = np.where(counts > 0, correct_sum / np.maximum(counts, 1), 0.0)
    return ReliabilityBins(num_bins=num_bins, counts=counts, mean_confidence=mean_conf, accuracy=accuracy)


def ece_from_bins(bins: ReliabilityBins) -> float:
    n = bins.total
    weights = bins.counts / n
    return float(np.sum(weights * np.abs(bins.accuracy - bins.mean_confidence)))


def ece(records: Sequence[PredictionRecord], num_bins: int = DEFAULT_NUM_BINS) -> float:
    """Expected calibration error: bin-weighted mean |accuracy - confidence| gap.

    Empty bins contribute zero.
    """
    return ece_from_bins(reliability_bins(records, num_bins))


def ks_error(records: Sequence[PredictionRecord]) -> float:
    """Max gap between cumulative correctness and cumulative confidence, sorted by confidence."""
    if not records:
        raise ValueError("cannot compute KS error of an empty record list")
    n = len(records)
    order = sorted(range(n), key=lambda i: records[i].confidence)
    h = 0.0
    h_tilde = 0.0
    worst = 0.0
    for i in order:
        r = records[i]
        h += (1.0 if r.correct else 0.0) / n
        h_tilde += r.confidence / n
        worst = max(worst, abs(h - h_tilde))
    return worst


def accuracy(records: Sequence[PredictionRecord]) -> float:
    if not records:
        raise ValueError("cannot compute accuracy of an empty record list")
    return sum(1 for r in records if r.correct) / len(records)


def mean_confidence(records: Sequence[PredictionRecord]) -> float:
    if not records:
        raise ValueError("cannot compute mean confidence of an empty record list")
    return float(np.mean([r.confidence for r in records]))


def max_ece_bound(q: float, num_classes: int) -> float:
    """Ceiling on ECE attainable by the maximum-miscalibration attack: 1 - q/K."""
    if num_classes < 2:
        raise ValueError("num_classes must be >= 2")
    if not 0.0 <= q <= 1.0:
        raise ValueError("accuracy q must lie in [0, 1]")
    return 1.0 - q / num_classes


@dataclass(frozen=True)
class SummaryRow:
    """Pre/post metric row matching one line of the summary CSV."""

    accuracy: float
    pre_ece: float
    post_ece: float
    pre_ks: float
    post_ks: float
    pre_confidence: float
    post_confidence: float
    avg_queries: float
    median_queries: float


def summary(records_pre: Sequence[PredictionRecord],
            records_post: Sequence[PredictionRecord],
            num_bins: int = DEFAULT_NUM_BINS) -> SummaryRow:
    """Aggregate aligned pre/post record lists into one report row.

    Raises if the lists are misaligned or the attack broke the
    label-preservation contract (accuracy must be bit-equal).
    """
    if len(records_pre) != len(records_post):
        raise ValueError(f"misaligned record lists: {len(records_pre)} pre vs {len(records_post)} post")
    acc_pre = accuracy(records_pre)
    acc_post = accuracy(records_post)
    if acc_pre != acc_post:
        raise ValueError(f"accuracy changed under attack ({acc_pre} -> {acc_post}); label constraint violated")
    queries = np.array([r.queries_used for r in records_post], dtype=np.float64)
    return SummaryRow(
        accuracy=acc_pre,
        pre_ece=ece(records_pre, num_bins),
        post_ece=ece(records_post, num_bins),
        pre_ks=ks_error(records_pre),
        post_ks=ks_error(records_post),
        pre_confidence=mean_confidence(records_pre),
        post_confidence=mean_confidence(records_post),
        avg_queries=float(np.mean(queries)),
        median_queries=float(np.median(queries)),
    )


def write_summary_csv(path, rows, context):
    """Write summary rows to CSV with the fixed header.

    `rows` is a list of SummaryRow; `context` a matching list of dicts with
    the run columns (dataset, kind, norm, epsilon, iterations, seed).
    """
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(SUMMARY_CSV_HEADER)
        for row, ctx in zip(rows, context):
            writer.writerow([
                ctx.get("dataset", ""), ctx.get("kind", ""), ctx.get("norm", ""),
                ctx.get("epsilon", ""), ctx.get("iterations", ""), ctx.get("seed", ""),
                f"{row.accuracy:.6f}",
                f"{row.pre_ece:.6f}", f"{row.post_ece:.6f}",
                f"{row.pre_ks:.6f}", f"{row.post_ks:.6f}",
                f"{row.pre_confidence:.6f}", f"{row.post_confidence:.6f}",
                f"{row.avg_queries:.3f}", f"{row.median_queries:.1f}",
            ])
