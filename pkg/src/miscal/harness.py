"""Experiment runner: dataset generation/ingestion, oracle wiring, attack pipelines, persistence."""

from __future__ import annotations

import configparser
import csv
import json
import math
import time
import urllib.error
import urllib.request
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import __version__
from .attacks import (
    AttackBudget,
    AttackKind,
    WhiteBoxSettings,
    attack_dataset,
    read_trace_log,
    records_from_log_entries,
    write_trace_log,
)
from .core import ClassifierOracle, ProbVector, Sample, SeededRng
from .defences import (
    CompressionOracle,
    CSConfig,
    PgdTrainSettings,
    TemperatureOracle,
    adversarial_train,
    caat_train,
    fit_temperature,
)
from .figures import emit_reliability_svg
from .metrics import SummaryRow, reliability_bins, summary, write_summary_csv
from .victims import MLPOracle, MLPVictim, TrainConfig, train_mlp

DEFENCE_CHOICES = ("none", "ts", "cs", "caat", "at")


class StageError(RuntimeError):
    """Pipeline failure tagged with the stage it occurred in."""

    def __init__(self, stage: str, message: str):
        super().__init__(f"[{stage}] {message}")
        self.stage = stage


class OracleError(RuntimeError):
    """Remote oracle failure after retry exhaustion or a malformed response."""


def _class_directions(classes: int, dim: int, rng: SeededRng) -> np.ndarray:
    """Unit vectors from the box center to each class center.

    A randomly rotated regular simplex when it fits (classes <= dim + 1),
    otherwise evenly spaced points on a random 2-D circle; either way the
    class differences are spread across every coordinate.
    """
    if dim == 1:
        return np.linspace(-1.0, 1.0, classes).reshape(classes, 1)
    gauss = rng.derive("rotation").standard_normal((dim, dim))
    q, r = np.linalg.qr(gauss)
    q = q * np.sign(np.diag(r))
    if classes <= dim + 1:
        v = np.eye(classes) - 1.0 / classes
        _, _, vt = np.linalg.svd(v)
        coords = v @ vt[:classes - 1].T
        coords /= np.linalg.norm(coords, axis=1, keepdims=True)
        padded = np.zeros((classes, dim))
        padded[:, :classes - 1] = coords
        return padded @ q.T
    angles = 2.0 * math.pi * np.arange(classes) / classes
    return np.outer(np.cos(angles), q[:, 0]) + np.outer(np.sin(angles), q[:, 1])


def generate_blobs(classes: int, per_class: int, dim: int, separation: float,
                   seed: int, sigma: float = 0.05) -> list:
    """Seeded Gaussian clusters clipped to [0,1]^d.

    Class centers sit at radius separation * sigma * sqrt(dim) / 2 around the
    box center (two classes end up separation * sigma * sqrt(dim) apart), so
    separation 0 collapses all classes onto one cluster.
    """
    if classes < 2:
        raise ValueError("need at least 2 classes")
    if dim < 1 or per_class < 1:
        raise ValueError("dim and per_class must be positive")
    rng = SeededRng(seed).derive("blobs")
    radius = separation * sigma * math.sqrt(dim) / 2.0
    centers = 0.5 + radius * _class_directions(classes, dim, rng)

    samples = []
    for c in range(classes):
        noise = rng.derive("points", c).standard_normal((per_class, dim)) * sigma
        feats = np.clip(centers[c] + noise, 0.0, 1.0)
        samples.extend(Sample(feats[i], c) for i in range(per_class))
    order = rng.derive("shuffle").permutation(len(samples))
    return [samples[i] for i in order]


def add_label_noise(samples: Sequence[Sample], fraction: float, rng: SeededRng) -> list:
    """Reassign a seeded fraction of labels to a different random class (weakened-victim recipe)."""
    if not 0.0 <= fraction <= 1.0:
        raise ValueError("fraction must lie in [0, 1]")
    if fraction == 0.0:
        return list(samples)
    classes = max(s.label for s in samples) + 1
    stream = rng.derive("label-noise")
    n_flip = int(round(fraction * len(samples)))
    flip_idx = set(stream.choice(len(samples), size=n_flip, replace=False).tolist())
    noisy = []
    for i, s in enumerate(samples):
        if i in flip_idx:
            shift = int(stream.integers(1, classes))
            noisy.append(Sample(s.features, (s.label + shift) % classes))
        else:
            noisy.append(s)
    return noisy


def load_csv(path) -> list:
    """Parse samples from a header-less CSV of d feature floats followed by an integer label."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"dataset file not found: {path}")
    samples = []
    dim = None
    with open(path, newline="") as fh:
        for lineno, row in enumerate(csv.reader(fh), start=1):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) < 2:
                raise ValueError(f"row {lineno}: need at least one feature and a label")
            try:
                feats = np.array([float(v) for v in row[:-1]])
                label_raw = float(row[-1])
            except ValueError as exc:
                raise ValueError(f"row {lineno}: {exc}") from None
            if label_raw != int(label_raw):
                raise ValueError(f"row {lineno}: label {row[-1]} is not an integer")
            if dim is None:
                dim = feats.shape[0]
            elif feats.shape[0] != dim:
                raise ValueError(f"row {lineno}: expected {dim} features, got {feats.shape[0]}")
            bad = np.where((feats < 0.0) | (feats > 1.0))[0]
            if bad.size:
                raise ValueError(
                    f"row {lineno}: feature {feats[bad[0]]} at column {bad[0] + 1} outside [0, 1]")
            samples.append(Sample(feats, int(label_raw)))
    if not samples:
        raise ValueError(f"{path}: no data rows")
    return samples


class RemoteOracle(ClassifierOracle):
    """Black-box victim behind HTTP: one POST per query, JSON in, JSON out.

    Each logical query counts once regardless of retries; retry attempts are
    recorded in `retries_logged`.
    """

    def __init__(self, url: str, timeout: float = 10.0, max_retries: int = 2,
                 allow_concurrent: bool = False):
        super().__init__()
        self.url = url
        self.timeout = timeout
        self.max_retries = max_retries
        self.serial = not allow_concurrent
        self.retries_logged = 0

    def _predict(self, features):
        body = json.dumps({"features": [float(v) for v in features]}).encode()
        last_error = None
        for attempt in range(self.max_retries + 1):
            if attempt > 0:
                self.retries_logged += 1
            request = urllib.request.Request(
                self.url, data=body, headers={"Content-Type": "application/json"})
            try:
                with urllib.request.urlopen(request, timeout=self.timeout) as resp:
                    payload = json.loads(resp.read().decode())
                break
            except (urllib.error.URLError, TimeoutError, ConnectionError) as exc:
                last_error = exc
        else:
            raise OracleError(f"query to {self.url} failed after "
                              f"{self.max_retries + 1} attempts: {last_error}")
        if not isinstance(payload, dict) or "probs" not in payload:
            raise OracleError(f"malformed response from {self.url}: missing 'probs'")
        try:
            return ProbVector(payload["probs"])
        except ValueError as exc:
            raise OracleError(f"invalid probability vector from {self.url}: {exc}") from None


def remote_oracle(url: str, timeout: float = 10.0, max_retries: int = 2,
                  allow_concurrent: bool = False) -> RemoteOracle:
    return RemoteOracle(url, timeout=timeout, max_retries=max_retries,
                        allow_concurrent=allow_concurrent)


@dataclass
class ExperimentConfig:
    """Everything one attack run needs; identical configs reproduce identical artifacts."""

    # dataset: either a CSV path or synthetic blob parameters
    csv_path: Optional[str] = None
    classes: int = 2
    per_class: int = 300
    dim: int = 2
    separation: float = 4.0
    sigma: float = 0.05
    label_noise: float = 0.0
    # victim: exactly one source
    victim_source: str = "train"  # train | file | remote
    model_path: Optional[str] = None
    remote_url: Optional[str] = None
    train: TrainConfig = field(default_factory=TrainConfig)
    hidden: tuple = (16, 16)
    # attack
    kind: AttackKind = AttackKind.MMA
    family: str = "square"  # square | pgd
    budget: AttackBudget = field(default_factory=AttackBudget)
    white_box: WhiteBoxSettings = field(default_factory=WhiteBoxSettings)
    # defence
    defence: str = "none"
    cs: CSConfig = field(default_factory=CSConfig)
    at: PgdTrainSettings = field(default_factory=PgdTrainSettings)
    # run
    seed: int = 0
    subset_size: int = 500
    workers: int = 1
    num_bins: int = 15
    output_dir: str = "runs/latest"
    dataset_name: str = "blobs"

    def __post_init__(self):
        if self.victim_source not in ("train", "file", "remote"):
            raise ValueError("victim_source must be train, file or remote")
        if self.victim_source == "file" and not self.model_path:
            raise ValueError("victim_source 'file' needs model_path")
        if self.victim_source == "remote" and not self.remote_url:
            raise ValueError("victim_source 'remote' needs remote_url")
        if self.family not in ("square", "pgd"):
            raise ValueError("family must be 'square' or 'pgd'")
        if self.defence not in DEFENCE_CHOICES:
            raise ValueError(f"defence must be one of {DEFENCE_CHOICES}")
        if self.subset_size < 1:
            raise ValueError("subset_size must be positive")
        if self.workers < 1:
            raise ValueError("workers must be positive")

    def echo(self) -> dict:
        """JSON-serializable view of the config for report artifacts."""
        return {
            "dataset": {
                "csv_path": self.csv_path, "name": self.dataset_name,
                "classes": self.classes, "per_class": self.per_class, "dim": self.dim,
                "separation": self.separation, "sigma": self.sigma,
                "label_noise": self.label_noise,
            },
            "victim": {
                "source": self.victim_source, "model_path": self.model_path,
                "remote_url": self.remote_url, "hidden": list(self.hidden),
                "train": vars(self.train).copy() if self.victim_source != "remote" else None,
            },
            "attack": {
                "kind": self.kind.value, "family": self.family,
                "budget": vars(self.budget).copy(),
                "white_box": vars(self.white_box).copy(),
            },
            "defence": self.defence,
            "seed": self.seed, "subset_size": self.subset_size,
            "workers": self.workers, "num_bins": self.num_bins,
        }


@dataclass(frozen=True)
class RunReport:
    config_echo: dict
    summary_row: SummaryRow
    trace_path: str
    summary_path: str
    svg_path: str
    bins_pre: object
    bins_post: object
    failures: list


def build_dataset(cfg: ExperimentConfig) -> list:
    if cfg.csv_path:
        return load_csv(cfg.csv_path)
    samples = generate_blobs(cfg.classes, cfg.per_class, cfg.dim, cfg.separation,
                             cfg.seed, sigma=cfg.sigma)
    if cfg.label_noise > 0.0:
        samples = add_label_noise(samples, cfg.label_noise, SeededRng(cfg.seed))
    return samples


def build_victim(cfg: ExperimentConfig, dataset: Sequence[Sample]):
    """Returns (model_or_None, oracle). Remote victims have no local model."""
    if cfg.victim_source == "remote":
        return None, remote_oracle(cfg.remote_url)
    if cfg.victim_source == "file":
        model = MLPVictim.load(cfg.model_path)
        return model, MLPOracle(model)
    layer_sizes = (dataset[0].dim, *cfg.hidden, max(s.label for s in dataset) + 1)
    if cfg.defence == "caat":
        model = caat_train(dataset, cfg.train, cfg.white_box, layer_sizes=layer_sizes)
    elif cfg.defence == "at":
        model = adversarial_train(dataset, cfg.train, cfg.at, layer_sizes=layer_sizes)
    else:
        model = train_mlp(dataset, cfg.train, layer_sizes=layer_sizes)
    return model, MLPOracle(model)


def wrap_defence(cfg: ExperimentConfig, model, oracle, dataset: Sequence[Sample]):
    """Apply a post-hoc defence around the victim; attacks then query the defended oracle."""
    if cfg.defence in ("none", "caat", "at"):
        return oracle
    if model is None:
        raise StageError("defence", f"defence {cfg.defence!r} needs logit access; "
                                    "remote victims expose probabilities only")
    if cfg.defence == "ts":
        val_count = min(max(len(dataset) // 5, 10), len(dataset))
        idx = SeededRng(cfg.seed).derive("ts-validation").choice(
            len(dataset), size=val_count, replace=False)
        logits = np.stack([model.logits(dataset[i].features) for i in idx])
        labels = np.array([dataset[i].label for i in idx])
        return TemperatureOracle(model, fit_temperature(logits, labels))
    if cfg.defence == "cs":
        return CompressionOracle(model, cfg.cs)
    raise StageError("defence", f"unknown defence {cfg.defence!r}")


def draw_subset(dataset: Sequence[Sample], size: int, seed: int) -> list:
    if size > len(dataset):
        raise ValueError(f"subset size {size} exceeds dataset size {len(dataset)}")
    idx = SeededRng(seed).derive("eval-subset").choice(len(dataset), size=size, replace=False)
    return [dataset[i] for i in sorted(idx.tolist())]


def recompute_summary_from_log(trace_path, num_bins: int = 15) -> SummaryRow:
    entries, _ = read_trace_log(trace_path)
    if not entries:
        raise ValueError(f"{trace_path}: no trace entries")
    pre, post = records_from_log_entries(entries)
    return summary(pre, post, num_bins)


def run_experiment(cfg: ExperimentConfig) -> RunReport:
    """Full pipeline: victim, defence, seeded subset, attack, metrics, artifacts.

    Re-running an identical config reproduces trace, CSV and SVG files byte
    for byte; wall-clock information is confined to metadata.json.
    """
    started = time.time()
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)

    try:
        dataset = build_dataset(cfg)
    except Exception as exc:
        raise StageError("dataset", str(exc)) from exc

    try:
        model, oracle = build_victim(cfg, dataset)
    except StageError:
        raise
    except Exception as exc:
        raise StageError("victim", str(exc)) from exc

    try:
        oracle = wrap_defence(cfg, model, oracle, dataset)
    except StageError:
        raise
    except Exception as exc:
        raise StageError("defence", str(exc)) from exc

    try:
        subset = draw_subset(dataset, min(cfg.subset_size, len(dataset)), cfg.seed)
        payload = cfg.white_box if cfg.family == "pgd" else cfg.budget
        on_error = "skip" if cfg.victim_source == "remote" else "raise"
        result = attack_dataset(oracle, subset, cfg.kind, payload, SeededRng(cfg.seed),
                                workers=cfg.workers, on_error=on_error)
        if not result.traces:
            raise RuntimeError("no samples were attacked successfully")
    except StageError:
        raise
    except Exception as exc:
        raise StageError("attack", str(exc)) from exc

    try:
        row = summary(result.pre_records, result.post_records, cfg.num_bins)
        bins_pre = reliability_bins(result.pre_records, cfg.num_bins)
        bins_post = reliability_bins(result.post_records, cfg.num_bins)

        trace_path = out / "traces.jsonl"
        write_trace_log(result.traces, trace_path, failures=result.failures)
        summary_path = out / "summary.csv"
        iterations = (cfg.white_box.iterations if cfg.family == "pgd"
                      else cfg.budget.max_iterations)
        epsilon = cfg.white_box.epsilon if cfg.family == "pgd" else cfg.budget.epsilon
        norm = "linf" if cfg.family == "pgd" else cfg.budget.norm
        context = [{
            "dataset": cfg.dataset_name, "kind": cfg.kind.value, "norm": norm,
            "epsilon": epsilon, "iterations": iterations, "seed": cfg.seed,
        }]
        write_summary_csv(summary_path, [row], context)
        write_reliability_csv(out / "reliability_pre.csv", bins_pre)
        write_reliability_csv(out / "reliability_post.csv", bins_post)
        svg_path = out / "reliability.svg"
        emit_reliability_svg(bins_pre, bins_post, svg_path)

        recomputed = recompute_summary_from_log(trace_path, cfg.num_bins)
        if recomputed != row:
            raise RuntimeError("summary/trace round-trip mismatch")

        with open(out / "config.json", "w") as fh:
            json.dump(cfg.echo(), fh, sort_keys=True, indent=2)
            fh.write("\n")
        with open(out / "metadata.json", "w") as fh:
            json.dump({"created_unix": started, "runtime_seconds": time.time() - started,
                       "miscal_version": __version__}, fh, indent=2)
            fh.write("\n")
    except StageError:
        raise
    except Exception as exc:
        raise StageError("report", str(exc)) from exc

    return RunReport(
        config_echo=cfg.echo(),
        summary_row=row,
        trace_path=str(trace_path),
        summary_path=str(summary_path),
        svg_path=str(svg_path),
        bins_pre=bins_pre,
        bins_post=bins_post,
        failures=result.failures,
    )


def write_reliability_csv(path, bins) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["bin", "lower", "upper", "count", "mean_confidence", "accuracy"])
        edges = bins.edges()
        for i in range(bins.num_bins):
            writer.writerow([
                i + 1, f"{edges[i]:.6f}", f"{edges[i + 1]:.6f}", int(bins.counts[i]),
                f"{bins.mean_confidence[i]:.6f}", f"{bins.accuracy[i]:.6f}",
            ])


def config_from_file(path, base: Optional[ExperimentConfig] = None) -> ExperimentConfig:
    """Load an ExperimentConfig from an INI-style key/value file with sections."""
    parser = configparser.ConfigParser()
    read = parser.read(path)
    if not read:
        raise FileNotFoundError(f"config file not found: {path}")
    cfg = base or ExperimentConfig()

    def get(section, key, cast, default):
        if parser.has_option(section, key):
            raw = parser.get(section, key)
            if cast is bool:
                return parser.getboolean(section, key)
            return cast(raw)
        return default

    train = replace(
        cfg.train,
        learning_rate=get("train", "learning_rate", float, cfg.train.learning_rate),
        epochs=get("train", "epochs", int, cfg.train.epochs),
        batch_size=get("train", "batch_size", int, cfg.train.batch_size),
        momentum=get("train", "momentum", float, cfg.train.momentum),
        seed=get("train", "seed", int, cfg.train.seed),
    )
    budget = replace(
        cfg.budget,
        norm=get("attack", "norm", str, cfg.budget.norm),
        epsilon=get("attack", "epsilon", float, cfg.budget.epsilon),
        patch_fraction=get("attack", "patch_fraction", float, cfg.budget.patch_fraction),
        max_iterations=get("attack", "iterations", int, cfg.budget.max_iterations),
        stop_loss=get("attack", "stop_loss", float, cfg.budget.stop_loss),
        rca_tolerance=get("attack", "rca_tolerance", float, cfg.budget.rca_tolerance),
    )
    white_box = replace(
        cfg.white_box,
        epsilon=get("white_box", "epsilon", float, cfg.white_box.epsilon),
        step_size=get("white_box", "step_size", float, cfg.white_box.step_size),
        iterations=get("white_box", "iterations", int, cfg.white_box.iterations),
        dropout_keep_under=get("white_box", "dropout_keep_under", float,
                               cfg.white_box.dropout_keep_under),
        dropout_keep_over=get("white_box", "dropout_keep_over", float,
                              cfg.white_box.dropout_keep_over),
    )
    hidden_raw = get("victim", "hidden", str, None)
    hidden = tuple(int(h) for h in hidden_raw.split(",")) if hidden_raw else cfg.hidden

    return replace(
        cfg,
        csv_path=get("dataset", "csv_path", str, cfg.csv_path),
        dataset_name=get("dataset", "name", str, cfg.dataset_name),
        classes=get("dataset", "classes", int, cfg.classes),
        per_class=get("dataset", "per_class", int, cfg.per_class),
        dim=get("dataset", "dim", int, cfg.dim),
        separation=get("dataset", "separation", float, cfg.separation),
        sigma=get("dataset", "sigma", float, cfg.sigma),
        label_noise=get("dataset", "label_noise", float, cfg.label_noise),
        victim_source=get("victim", "source", str, cfg.victim_source),
        model_path=get("victim", "model_path", str, cfg.model_path),
        remote_url=get("victim", "remote_url", str, cfg.remote_url),
        train=train,
        hidden=hidden,
        kind=AttackKind.parse(get("attack", "kind", str, cfg.kind.value)),
        family=get("attack", "family", str, cfg.family),
        budget=budget,
        white_box=white_box,
        defence=get("defence", "method", str, cfg.defence),
        seed=get("run", "seed", int, cfg.seed),
        subset_size=get("run", "subset_size", int, cfg.subset_size),
        workers=get("run", "workers", int, cfg.workers),
        num_bins=get("run", "num_bins", int, cfg.num_bins),
        output_dir=get("run", "output_dir", str, cfg.output_dir),
    )
