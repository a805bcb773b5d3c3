"""Command-line entry points: train, attack, defend, report."""

from __future__ import annotations

import argparse
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from .attacks import AttackKind, read_trace_log, records_from_log_entries
from .core import SeededRng
from .defences import (
    CSConfig,
    PgdTrainSettings,
    WhiteBoxSettings,
    adversarial_train,
    caat_train,
    fit_temperature,
    save_defence,
)
from .figures import emit_reliability_svg
from .harness import (
    ExperimentConfig,
    StageError,
    build_dataset,
    config_from_file,
    run_experiment,
    write_reliability_csv,
)
from .metrics import reliability_bins, summary, write_summary_csv
from .victims import MLPVictim, TrainConfig, train_accuracy, train_mlp


def _add_dataset_flags(p: argparse.ArgumentParser):
    p.add_argument("--csv", help="dataset CSV (features then integer label per row)")
    p.add_argument("--dataset-name", help="dataset label used in report rows")
    p.add_argument("--classes", type=int, help="number of blob classes")
    p.add_argument("--per-class", type=int, help="points per blob class")
    p.add_argument("--dim", type=int, help="feature dimension")
    p.add_argument("--separation", type=float, help="blob separation in sigma units")
    p.add_argument("--sigma", type=float, help="blob standard deviation")
    p.add_argument("--label-noise", type=float, help="fraction of labels to scramble")


def _add_train_flags(p: argparse.ArgumentParser):
    p.add_argument("--learning-rate", type=float)
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--momentum", type=float)
    p.add_argument("--hidden", help="comma-separated hidden layer sizes, e.g. 16,16")


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="miscal",
        description="Calibration-attack red-team toolkit: attack confidence scores, "
                    "measure the damage, evaluate defences.")
    sub = parser.add_subparsers(dest="command", required=True)

    p_train = sub.add_parser("train", help="train an MLP victim and save it")
    _add_dataset_flags(p_train)
    _add_train_flags(p_train)
    p_train.add_argument("--seed", type=int, default=0)
    p_train.add_argument("--out", required=True, help="output model file (.npz)")

    p_attack = sub.add_parser("attack", help="run a full attack experiment")
    p_attack.add_argument("--config", help="INI config file; flags override it")
    _add_dataset_flags(p_attack)
    _add_train_flags(p_attack)
    p_attack.add_argument("--model", help="attack a saved model instead of training one")
    p_attack.add_argument("--remote-url", help="attack a remote oracle at this URL")
    p_attack.add_argument("--kind", choices=[k.value for k in AttackKind])
    p_attack.add_argument("--family", choices=["square", "pgd"])
    p_attack.add_argument("--norm", choices=["linf", "l2"])
    p_attack.add_argument("--epsilon", type=float)
    p_attack.add_argument("--patch-fraction", type=float)
    p_attack.add_argument("--iterations", type=int)
    p_attack.add_argument("--stop-loss", type=float)
    p_attack.add_argument("--wb-epsilon", type=float)
    p_attack.add_argument("--wb-step-size", type=float)
    p_attack.add_argument("--wb-iterations", type=int)
    p_attack.add_argument("--defence", choices=["none", "ts", "cs", "caat", "at"])
    p_attack.add_argument("--seed", type=int)
    p_attack.add_argument("--subset-size", type=int)
    p_attack.add_argument("--workers", type=int)
    p_attack.add_argument("--num-bins", type=int)
    p_attack.add_argument("--outdir", help="artifact directory")

    p_defend = sub.add_parser("defend", help="fit a defence or train a defended model")
    p_defend.add_argument("--method", required=True, choices=["ts", "cs", "caat", "at"])
    _add_dataset_flags(p_defend)
    _add_train_flags(p_defend)
    p_defend.add_argument("--model", help="existing model (required for ts)")
    p_defend.add_argument("--seed", type=int, default=0)
    p_defend.add_argument("--num-bins", type=int, default=15)
    p_defend.add_argument("--target-bins", type=int, default=3)
    p_defend.add_argument("--at-epsilon", type=float, default=0.1)
    p_defend.add_argument("--at-iterations", type=int, default=10)
    p_defend.add_argument("--wb-iterations", type=int, default=10)
    p_defend.add_argument("--out", required=True,
                          help="output file: sidecar JSON for ts/cs, model .npz for caat/at")

    p_report = sub.add_parser("report", help="rebuild summary CSV and diagrams from a trace log")
    p_report.add_argument("--traces", required=True, help="traces.jsonl from an attack run")
    p_report.add_argument("--outdir", required=True)
    p_report.add_argument("--num-bins", type=int, default=15)
    p_report.add_argument("--dataset-name", default="")
    p_report.add_argument("--seed", default="")
    return parser


def _dataset_config(args, base: ExperimentConfig) -> ExperimentConfig:
    updates = {}
    for attr, flag in [("csv_path", "csv"), ("dataset_name", "dataset_name"),
                       ("classes", "classes"), ("per_class", "per_class"), ("dim", "dim"),
                       ("separation", "separation"), ("sigma", "sigma"),
                       ("label_noise", "label_noise")]:
        value = getattr(args, flag, None)
        if value is not None:
            updates[attr] = value
    return replace(base, **updates) if updates else base


def _train_config(args, base: TrainConfig) -> TrainConfig:
    updates = {}
    for attr, flag in [("learning_rate", "learning_rate"), ("epochs", "epochs"),
                       ("batch_size", "batch_size"), ("momentum", "momentum"),
                       ("seed", "seed")]:
        value = getattr(args, flag, None)
        if value is not None:
            updates[attr] = value
    return replace(base, **updates) if updates else base


def _cmd_train(args) -> int:
    cfg = _dataset_config(args, ExperimentConfig())
    cfg = replace(cfg, seed=args.seed, train=_train_config(args, cfg.train))
    if args.hidden:
        cfg = replace(cfg, hidden=tuple(int(h) for h in args.hidden.split(",")))
    dataset = build_dataset(cfg)
    layer_sizes = (dataset[0].dim, *cfg.hidden, max(s.label for s in dataset) + 1)
    model = train_mlp(dataset, cfg.train, layer_sizes=layer_sizes)
    model.save(args.out)
    print(f"trained {layer_sizes} victim on {len(dataset)} samples, "
          f"accuracy {train_accuracy(model, dataset):.4f}, saved to {args.out}")
    return 0


def _cmd_attack(args) -> int:
    cfg = ExperimentConfig()
    if args.config:
        cfg = config_from_file(args.config, cfg)
    cfg = _dataset_config(args, cfg)
    cfg = replace(cfg, train=_train_config(args, cfg.train))
    if args.hidden:
        cfg = replace(cfg, hidden=tuple(int(h) for h in args.hidden.split(",")))
    if args.model:
        cfg = replace(cfg, victim_source="file", model_path=args.model)
    if args.remote_url:
        cfg = replace(cfg, victim_source="remote", remote_url=args.remote_url)

    budget_updates = {}
    for attr, flag in [("norm", "norm"), ("epsilon", "epsilon"),
                       ("patch_fraction", "patch_fraction"),
                       ("max_iterations", "iterations"), ("stop_loss", "stop_loss")]:
        value = getattr(args, flag, None)
        if value is not None:
            budget_updates[attr] = value
    if budget_updates:
        cfg = replace(cfg, budget=replace(cfg.budget, **budget_updates))
    wb_updates = {}
    for attr, flag in [("epsilon", "wb_epsilon"), ("step_size", "wb_step_size"),
                       ("iterations", "wb_iterations")]:
        value = getattr(args, flag, None)
        if value is not None:
            wb_updates[attr] = value
    if wb_updates:
        cfg = replace(cfg, white_box=replace(cfg.white_box, **wb_updates))

    run_updates = {}
    for attr, flag in [("kind", "kind"), ("family", "family"), ("defence", "defence"),
                       ("seed", "seed"), ("subset_size", "subset_size"),
                       ("workers", "workers"), ("num_bins", "num_bins"),
                       ("output_dir", "outdir")]:
        value = getattr(args, flag, None)
        if value is not None:
            run_updates[attr] = AttackKind.parse(value) if attr == "kind" else value
    if run_updates:
        cfg = replace(cfg, **run_updates)

    report = run_experiment(cfg)
    row = report.summary_row
    print(f"attack {cfg.kind.value} ({cfg.family}) on {cfg.dataset_name}: "
          f"acc {row.accuracy:.4f}, ECE {row.pre_ece:.4f} -> {row.post_ece:.4f}, "
          f"KS {row.pre_ks:.4f} -> {row.post_ks:.4f}, "
          f"conf {row.pre_confidence:.4f} -> {row.post_confidence:.4f}, "
          f"avg queries {row.avg_queries:.1f}, median {row.median_queries:.1f}")
    print(f"artifacts in {cfg.output_dir}")
    if report.failures:
        print(f"warning: {len(report.failures)} samples failed and were skipped",
              file=sys.stderr)
    return 0


def _cmd_defend(args) -> int:
    cfg = _dataset_config(args, ExperimentConfig())
    cfg = replace(cfg, seed=args.seed, train=_train_config(args, cfg.train))
    if args.hidden:
        cfg = replace(cfg, hidden=tuple(int(h) for h in args.hidden.split(",")))

    if args.method == "cs":
        save_defence(args.out, CSConfig(num_bins=args.num_bins, target_bins=args.target_bins))
        print(f"compression-scaling config saved to {args.out}")
        return 0

    dataset = build_dataset(cfg)
    if args.method == "ts":
        if not args.model:
            raise StageError("defence", "temperature scaling needs --model")
        model = MLPVictim.load(args.model)
        rng = SeededRng(args.seed).derive("ts-validation")
        count = min(max(len(dataset) // 5, 10), len(dataset))
        idx = rng.choice(len(dataset), size=count, replace=False)
        logits = np.stack([model.logits(dataset[i].features) for i in idx])
        labels = np.array([dataset[i].label for i in idx])
        ts = fit_temperature(logits, labels)
        save_defence(args.out, ts)
        print(f"fitted temperature {ts.temperature:.4f} on {count} validation samples, "
              f"saved to {args.out}")
        return 0

    layer_sizes = (dataset[0].dim, *cfg.hidden, max(s.label for s in dataset) + 1)
    if args.method == "caat":
        wb = WhiteBoxSettings(iterations=args.wb_iterations)
        model = caat_train(dataset, cfg.train, wb, layer_sizes=layer_sizes)
    else:
        at = PgdTrainSettings(epsilon=args.at_epsilon, iterations=args.at_iterations)
        model = adversarial_train(dataset, cfg.train, at, layer_sizes=layer_sizes)
    model.save(args.out)
    print(f"{args.method}-trained victim saved to {args.out}, "
          f"clean accuracy {train_accuracy(model, dataset):.4f}")
    return 0


def _cmd_report(args) -> int:
    entries, failures = read_trace_log(args.traces)
    if not entries:
        raise StageError("report", f"{args.traces}: no trace entries")
    pre, post = records_from_log_entries(entries)
    row = summary(pre, post, args.num_bins)
    bins_pre = reliability_bins(pre, args.num_bins)
    bins_post = reliability_bins(post, args.num_bins)

    out = Path(args.outdir)
    out.mkdir(parents=True, exist_ok=True)
    first = entries[0]
    context = [{"dataset": args.dataset_name, "kind": first.get("kind", ""),
                "norm": first.get("norm", ""), "epsilon": "", "iterations": "",
                "seed": args.seed}]
    write_summary_csv(out / "summary.csv", [row], context)
    write_reliability_csv(out / "reliability_pre.csv", bins_pre)
    write_reliability_csv(out / "reliability_post.csv", bins_post)
    emit_reliability_svg(bins_pre, bins_post, out / "reliability.svg")
    print(f"report over {len(entries)} traces: acc {row.accuracy:.4f}, "
          f"ECE {row.pre_ece:.4f} -> {row.post_ece:.4f}")
    if failures:
        print(f"note: log contains {len(failures)} failed samples", file=sys.stderr)
    return 0


def main(argv=None) -> int:
    parser = _build_parser()
    args = parser.parse_args(argv)
    handlers = {"train": _cmd_train, "attack": _cmd_attack,
                "defend": _cmd_defend, "report": _cmd_report}
    try:
        return handlers[args.command](args)
    except StageError as exc:
        print(str(exc), file=sys.stderr)
        return 1
    except (ValueError, FileNotFoundError, RuntimeError, TypeError) as exc:
        print(f"[{args.command}] {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
