"""Command-line pipeline: collect, train, eval, ablate, check.

Every run is driven by one experiment config (profile defaults, optional JSON
file, dotted ``--set`` overrides) so outputs can be reproduced from the config
and seed alone. Report files are written via temp-and-rename.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import io
import json
import os
import sys
import time

from . import plots
from .checkpoint import CheckpointError, load_bundle, require_compatible, save_bundle
from .checks import run_all_checks
from .config import PROFILES, ConfigError, ExperimentConfig, load_config, resolve_path
from .dataset import (fit_stats, load_stats, load_trajectories, save_stats,
                      save_trajectories)
from .dataset import collect as collect_episodes
from .evaluation import (EvalConfig, ModelBundle, attention_stats, compare,
                         model_rollout)
from .policies import PolicySpec
from .sim import OBS_DIM, PHASES, REGIME_PRESETS
from .training import fit

VARIANTS = {
    "full": {},
    "independent_dt": {"use_graph_attention": False},
    "no_rtg": {"use_rtg": False},
    "independent_dt_no_rtg": {"use_graph_attention": False, "use_rtg": False},
}
BASELINES = ("fixed_time", "max_pressure")
SWEEP_FRACTIONS = (0.7, 0.8, 0.9, 1.0)


def _ensure_parent(path: str) -> None:
    parent = os.path.dirname(path)
    if parent:
        os.makedirs(parent, exist_ok=True)


def _write_atomic(path: str, text: str) -> None:
    tmp = f"{path}.tmp"
    with open(tmp, "w") as fh:
        fh.write(text)
    os.replace(tmp, path)


def _write_jsonl(path: str, records: list[dict]) -> None:
    _write_atomic(path, "".join(json.dumps(record) + "\n" for record in records))


def _stats_path(dataset_path: str) -> str:
    return f"{os.path.splitext(dataset_path)[0]}.stats.json"


def cmd_collect(config: ExperimentConfig) -> int:
    network = config.build_network()
    started = time.perf_counter()
    trajectories = collect_episodes(network, config.policy_spec(), config.episodes,
                                    seed=config.seed, config=config.sim_config(),
                                    demand_mix=tuple(config.demand_mix.items()))
    stats = fit_stats(trajectories)
    path = resolve_path(config.dataset_path)
    _ensure_parent(path)
    save_trajectories(path, trajectories, network=network,
                      extra={"seed": config.seed, "policy": config.policy})
    save_stats(_stats_path(path), stats)
    print(f"episodes: {len(trajectories)}")
    print(f"decisions: {sum(len(t) for t in trajectories)}")
    print(f"r_max: {stats.r_max:.3f}")
    print(f"dataset: {path} (+ stats sidecar, {time.perf_counter() - started:.1f}s)")
    return 0


def _load_dataset(config: ExperimentConfig):
    path = resolve_path(config.dataset_path)
    if not os.path.exists(path):
        raise FileNotFoundError(f"dataset not found at {path}; "
                                "run `greenwave collect` first")
    trajectories, _ = load_trajectories(path)
    sidecar = _stats_path(path)
    stats = load_stats(sidecar) if os.path.exists(sidecar) else fit_stats(trajectories)
    return trajectories, stats


def _train_variant(config: ExperimentConfig, trajectories, stats, network,
                   variant: str, checkpoint_path: str) -> ModelBundle:
    model_config = dataclasses.replace(config.model_config(network),
                                       **VARIANTS[variant])
    result = fit(trajectories, model_config, config.train_config(),
                 network.adjacency, stats=stats)
    bundle = ModelBundle(params=result.best_params, config=model_config,
                         r_max=stats.r_max, variant=variant)
    _ensure_parent(checkpoint_path)
    save_bundle(checkpoint_path, bundle)
    stem = os.path.splitext(checkpoint_path)[0]
    log_records = ([{"kind": "step", **row} for row in result.log.steps]
                   + [{"kind": "epoch", **row} for row in result.log.epochs])
    _write_jsonl(f"{stem}.log.jsonl", log_records)
    plots.save_loss_curve(result.log.steps, result.log.epochs, f"{stem}.loss.png")
    epochs = result.log.epochs
    first, last = (epochs[0]["loss"], epochs[-1]["loss"]) if epochs else (0.0, 0.0)
    print(f"variant {variant}: {len(epochs)} epochs, "
          f"loss {first:.4f} -> {last:.4f}, checkpoint {checkpoint_path}")
    return bundle


def cmd_train(config: ExperimentConfig, variant: str) -> int:
    network = config.build_network()
    trajectories, stats = _load_dataset(config)
    _train_variant(config, trajectories, stats, network, variant,
                   resolve_path(config.checkpoint_path))
    return 0


def _format_table(rows: list[dict], columns: list[str]) -> str:
    def cell(row, column):
        value = row.get(column, "")
        return f"{value:.3f}" if isinstance(value, float) else str(value)

    grid = [columns] + [[cell(row, column) for column in columns] for row in rows]
    widths = [max(len(line[i]) for line in grid) for i in range(len(columns))]
    lines = ["  ".join(text.ljust(width) for text, width in zip(line, widths)).rstrip()
             for line in grid]
    lines.insert(1, "  ".join("-" * width for width in widths))
    return "\n".join(lines) + "\n"


REPORT_COLUMNS = ["method", "target_fraction", "avg_travel_time",
                  "avg_travel_time_std", "avg_wait_time", "throughput",
                  "coordination", "episode_return"]


def _csv_text(rows: list[dict], columns: list[str]) -> str:
    buffer = io.StringIO()
    writer = csv.DictWriter(buffer, fieldnames=columns, extrasaction="ignore")
    writer.writeheader()
    writer.writerows(rows)
    return buffer.getvalue()


def _report_rows(report, target_fraction: float) -> tuple[list[dict], list[dict]]:
    aggregate = [{"target_fraction": target_fraction, **row}
                 for row in report.rows()]
    per_seed = [{"kind": "per_seed", "method": method, "seed": seed,
                 "target_fraction": target_fraction, **metrics}
                for (method, seed), metrics in report.per_seed.items()]
    return aggregate, per_seed


def _write_report(report_dir: str, name: str, rows: list[dict],
                  extra_records: list[dict]) -> list[str]:
    os.makedirs(report_dir, exist_ok=True)
    base = os.path.join(report_dir, name)
    records = [{"kind": "aggregate", **row} for row in rows] + extra_records
    _write_jsonl(f"{base}.jsonl", records)
    _write_atomic(f"{base}.csv", _csv_text(rows, REPORT_COLUMNS))
    table = _format_table(rows, REPORT_COLUMNS)
    _write_atomic(f"{base}.txt", table)
    plots.save_travel_time_bars(
        [{"method": row["method"], "att_mean": row["avg_travel_time"],
          "att_std": row["avg_travel_time_std"]} for row in rows],
        f"{base}.travel_time.png")
    print(table, end="")
    return [f"{base}.jsonl", f"{base}.csv", f"{base}.txt",
            f"{base}.travel_time.png"]


def _attention_records(bundle: ModelBundle, network, eval_config: EvalConfig,
                       sim_config, report_dir: str, label: str) -> list[dict]:
    demand = REGIME_PRESETS[eval_config.demand]()
    target = -eval_config.target_fraction * bundle.r_max
    result = model_rollout(bundle, network, demand, target,
                           seed=eval_config.seeds[0], config=sim_config)
    stats = attention_stats(bundle, network, result.trajectory, result.edge_flow)
    plots.save_attention_bars(stats.rows, os.path.join(report_dir,
                                                       "attention.png"))
    return [{"kind": "attention", "method": label,
             "max_row_sum_error": stats.max_row_sum_error, **row}
            for row in stats.rows]


def cmd_eval(config: ExperimentConfig, checkpoints: list[str],
             baselines: list[str], sweep: bool) -> int:
    network = config.build_network()
    eval_config = config.eval_config()
    sim_config = config.sim_config()
    if not checkpoints and not baselines:
        baselines = list(BASELINES)
    methods: dict = {name: PolicySpec(name) for name in baselines}
    bundles: dict = {}
    for path in checkpoints:
        bundle = load_bundle(resolve_path(path))
        require_compatible(bundle, network, OBS_DIM, PHASES)
        label = bundle.variant
        if label in methods or label in bundles:
            label = f"{label}:{os.path.splitext(os.path.basename(path))[0]}"
        bundles[label] = bundle

    rows, extra = [], []
    if sweep and bundles:
        if methods:
            baseline_report = compare(methods, network, eval_config, sim_config)
            agg, per_seed = _report_rows(baseline_report, eval_config.target_fraction)
            rows += agg
            extra += per_seed
        for fraction in SWEEP_FRACTIONS:
            swept = dataclasses.replace(eval_config, target_fraction=fraction)
            report = compare(bundles, network, swept, sim_config)
            agg, per_seed = _report_rows(report, fraction)
            rows += agg
            extra += per_seed
    else:
        report = compare({**methods, **bundles}, network, eval_config, sim_config)
        agg, per_seed = _report_rows(report, eval_config.target_fraction)
        rows += agg
        extra += per_seed
        extra += [{"kind": "delta", "method": a, "versus": b,
                   "avg_travel_time_delta": value}
                  for (a, b), value in report.deltas.items()]

    report_dir = resolve_path(config.report_dir)
    os.makedirs(report_dir, exist_ok=True)
    for label, bundle in bundles.items():
        if bundle.config.use_graph_attention:
            extra += _attention_records(bundle, network, eval_config, sim_config,
                                        report_dir, label)
            break
    files = _write_report(report_dir, "eval", rows, extra)
    print(f"report: {', '.join(files)}")
    return 0


def cmd_ablate(config: ExperimentConfig) -> int:
    network = config.build_network()
    trajectories, stats = _load_dataset(config)
    stem, extension = os.path.splitext(resolve_path(config.checkpoint_path))
    bundles = {}
    for variant in VARIANTS:
        bundles[variant] = _train_variant(config, trajectories, stats, network,
                                          variant, f"{stem}-{variant}{extension}")
    eval_config = config.eval_config()
    report = compare(bundles, network, eval_config, config.sim_config())
    rows, per_seed = _report_rows(report, eval_config.target_fraction)
    report_dir = resolve_path(config.report_dir)
    files = _write_report(report_dir, "ablation", rows, per_seed)
    print(f"report: {', '.join(files)}")
    return 0


def cmd_check(fast: bool) -> int:
    results = run_all_checks(fast=fast)
    for result in results:
        mark = "PASS" if result.passed else "FAIL"
        print(f"{mark}  {result.name:<32} {result.seconds:7.2f}s  {result.detail}")
    failed = [result for result in results if not result.passed]
    total = sum(result.seconds for result in results)
    print(f"{len(results) - len(failed)}/{len(results)} suites passed "
          f"in {total:.1f}s")
    return 1 if failed else 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="greenwave",
        description="Offline-trained coordinated traffic signal control.")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON experiment config file")
    common.add_argument("--profile", default="desk", choices=sorted(PROFILES),
                        help="defaults to start from (default: desk)")
    common.add_argument("--set", dest="overrides", action="append", default=[],
                        metavar="KEY=VALUE",
                        help="override a config field, e.g. model.hidden_dim=64")
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("collect", parents=[common],
                   help="run the behavior policy and write a trajectory dataset")
    p_train = sub.add_parser("train", parents=[common],
                             help="train a model on a collected dataset")
    p_train.add_argument("--variant", default="full", choices=sorted(VARIANTS),
                         help="ablation variant to train (default: full)")
    p_eval = sub.add_parser("eval", parents=[common],
                            help="paired closed-loop evaluation and report files")
    p_eval.add_argument("--checkpoint", action="append", default=[],
                        help="model checkpoint to evaluate (repeatable)")
    p_eval.add_argument("--baseline", action="append", default=[],
                        choices=BASELINES, help="baseline controller (repeatable)")
    p_eval.add_argument("--sweep", action="store_true",
                        help="evaluate models at target fractions "
                             + "/".join(str(f) for f in SWEEP_FRACTIONS))
    sub.add_parser("ablate", parents=[common],
                   help="train and evaluate all four model variants")
    p_check = sub.add_parser("check",
                             help="run the property suites with timings")
    p_check.add_argument("--fast", action="store_true",
                         help="trim episode counts for a quicker pass")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.command == "check":
            return cmd_check(args.fast)
        config = load_config(args.config, args.profile, args.overrides)
        if args.command == "collect":
            return cmd_collect(config)
        if args.command == "train":
            return cmd_train(config, args.variant)
        if args.command == "eval":
            return cmd_eval(config, args.checkpoint, args.baseline, args.sweep)
        if args.command == "ablate":
            return cmd_ablate(config)
        raise AssertionError(f"unhandled command {args.command}")
    except CheckpointError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (ConfigError, OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
