"""Command-line interface.

Subcommands mirror the pipeline stages; ``run`` executes the whole
experiment from one JSON config.  Exit codes: 0 success, 1 config
error, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .assembly import AssemblySpec, assemble_group, auto_targets, verify_group, \
    write_group_files
from .attention import read_mask_file, train_attention, write_mask_file
from .feature_store import SyntheticConfig, generate_synthetic, read_feature_file, \
    write_feature_file
from .head_model import TrainConfig, read_head_file, train_head, write_head_file
from .pipeline import (ConfigError, RunConfig, apply_overrides, evaluate_network,
                       emit_plots, read_results_csv, run_experiment)
from .properties import compute_category_stats, read_stats_cache, write_stats_cache
from .stats import build_table, write_table_csv, write_table_json

log = logging.getLogger("attnboost")


def _add_common(p):
    p.add_argument("--seed", type=int, default=None, help="global seed override")
    p.add_argument("--out", type=Path, default=None, help="output directory")
    p.add_argument("--set", dest="overrides", action="append", default=[],
                   metavar="KEY=VALUE", help="dotted config override (JSON value)")


def _parse_kv(overrides, base: dict) -> dict:
    return apply_overrides(base, overrides)


def _parse_categories(text: str) -> list[int]:
    return [int(c) for c in text.replace(",", " ").split()]


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="attnboost",
        description="Attention-mask accuracy-boost experiments on cached features.")
    parser.add_argument("--verbose", action="store_true", help="info-level logging")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-synthetic", help="generate a synthetic feature file")
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--set", dest="overrides", action="append", default=[],
                   metavar="KEY=VALUE", help="SyntheticConfig field override")

    p = sub.add_parser("train-head", help="bootstrap and freeze a head on a dataset")
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--hidden", type=str, default="256", help="comma-separated dims")
    p.add_argument("--set", dest="overrides", action="append", default=[],
                   metavar="KEY=VALUE", help="TrainConfig field override")

    p = sub.add_parser("category-stats", help="baseline accuracies and mean representations")
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--head", type=Path, required=True)
    p.add_argument("--out-csv", type=Path, required=True)
    p.add_argument("--out-means", type=Path, required=True)
    p.add_argument("--similarity-features", type=Path, default=None)

    p = sub.add_parser("assemble", help="assemble one task-set group")
    p.add_argument("--stats-csv", type=Path, required=True)
    p.add_argument("--means", type=Path, required=True)
    p.add_argument("--kind", choices=("difficulty", "size", "similarity"), required=True)
    p.add_argument("--out-csv", type=Path, required=True)
    p.add_argument("--out-json", type=Path, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--set", dest="overrides", action="append", default=[],
                   metavar="KEY=VALUE", help="AssemblySpec field override")

    p = sub.add_parser("train-attention", help="train a mask for one task set")
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--head", type=Path, required=True)
    p.add_argument("--categories", type=str, required=True,
                   help="comma-separated category ids")
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--log", type=Path, default=None, help="per-epoch CSV log")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--granularity", choices=("unit", "channel"), default="unit")
    p.add_argument("--set", dest="overrides", action="append", default=[],
                   metavar="KEY=VALUE", help="TrainConfig field override")

    p = sub.add_parser("evaluate", help="in-set and out-of-set accuracy of a mask")
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--head", type=Path, required=True)
    p.add_argument("--mask", type=Path, required=True)
    p.add_argument("--categories", type=str, required=True)

    p = sub.add_parser("run", help="full pipeline from a JSON config")
    p.add_argument("--config", type=Path, default=None)
    p.add_argument("--jobs", type=int, default=None)
    _add_common(p)

    p = sub.add_parser("stats", help="rebuild the statistics table from results.csv")
    p.add_argument("--results", type=Path, required=True)
    p.add_argument("--out-csv", type=Path, required=True)
    p.add_argument("--out-json", type=Path, required=True)
    p.add_argument("--permutations", type=int, default=10000)
    p.add_argument("--seed", type=int, default=0)

    p = sub.add_parser("plot", help="emit the three SVG figures from results.csv")
    p.add_argument("--results", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--permutations", type=int, default=1000)
    p.add_argument("--seed", type=int, default=0)
    return parser


def _cmd_gen_synthetic(args) -> int:
    cfg = _parse_kv(args.overrides, {})
    dataset = generate_synthetic(SyntheticConfig(**cfg), args.seed)
    write_feature_file(dataset, args.out)
    log.info("wrote %s records to %s", dataset.n_records, args.out)
    return 0


def _cmd_train_head(args) -> int:
    dataset = read_feature_file(args.data)
    overrides = _parse_kv(args.overrides, {})
    cfg = TrainConfig(learning_rate=0.05, momentum=0.9, batch_size=64,
                      max_epochs=30, **overrides)
    hidden = tuple(int(d) for d in args.hidden.split(",") if d)
    head = train_head(dataset, hidden_dims=hidden, config=cfg, seed=args.seed)
    write_head_file(head, args.out)
    log.info("wrote head to %s", args.out)
    return 0


def _cmd_category_stats(args) -> int:
    dataset = read_feature_file(args.data)
    head = read_head_file(args.head)
    sim = (read_feature_file(args.similarity_features, check_splits=False)
           if args.similarity_features else None)
    stats = compute_category_stats(head, dataset, sim)
    write_stats_cache(stats, args.out_csv, args.out_means)
    return 0


def _cmd_assemble(args) -> int:
    stats = read_stats_cache(args.stats_csv, args.means)
    overrides = _parse_kv(args.overrides, {})
    defaults = {"difficulty": {"n_task_sets": 25, "fixed_size": 16},
                "size": {"n_task_sets": 20, "size_ladder": [2, 4, 8, 16, 32]},
                "similarity": {"n_task_sets": 40, "fixed_size": 16}}[args.kind]
    spec_kwargs = {**defaults, **overrides, "group_kind": args.kind, "seed": args.seed}
    if args.kind != "size" and "target_values" not in spec_kwargs:
        spec_kwargs["target_values"] = auto_targets(
            args.kind, spec_kwargs["n_task_sets"], spec_kwargs["fixed_size"],
            stats, args.seed)
    spec = AssemblySpec(**spec_kwargs)
    group = assemble_group(spec, stats)
    report = verify_group(group, stats, spec)
    if not report.ok:
        raise RuntimeError(f"assembled group failed its audit: {report.violations[:3]}")
    write_group_files(group, args.out_csv, args.out_json)
    return 0


def _cmd_train_attention(args) -> int:
    dataset = read_feature_file(args.data)
    head = read_head_file(args.head)
    overrides = _parse_kv(args.overrides, {})
    cfg = TrainConfig(seed=args.seed, **overrides)
    mask = train_attention(head, dataset, _parse_categories(args.categories), cfg,
                           granularity=args.granularity, log_path=args.log)
    write_mask_file(mask, args.out)
    return 0


def _cmd_evaluate(args) -> int:
    dataset = read_feature_file(args.data)
    head = read_head_file(args.head)
    mask = read_mask_file(args.mask)
    in_acc, out_acc = evaluate_network(head, mask, dataset,
                                       _parse_categories(args.categories))
    print(json.dumps({"in_set_accuracy": in_acc, "out_of_set_accuracy": out_acc}))
    return 0


def _cmd_run(args) -> int:
    config = RunConfig.load(path=args.config, overrides=args.overrides,
                            seed=args.seed, out_dir=args.out, jobs=args.jobs)
    outputs = run_experiment(config)
    print(json.dumps({
        "out_dir": str(outputs.out_dir),
        "n_results": len(outputs.results),
        "failed_task_sets": outputs.failed_task_sets,
    }))
    return 0


def _cmd_stats(args) -> int:
    results = read_results_csv(args.results)
    rows = build_table(results, n_permutations=args.permutations, seed=args.seed)
    write_table_csv(rows, args.out_csv)
    write_table_json(rows, args.out_json)
    return 0


def _cmd_plot(args) -> int:
    results = read_results_csv(args.results)
    rows = build_table(results, n_permutations=args.permutations, seed=args.seed)
    args.out.mkdir(parents=True, exist_ok=True)
    emit_plots(results, rows, args.out)
    return 0


_COMMANDS = {
    "gen-synthetic": _cmd_gen_synthetic,
    "train-head": _cmd_train_head,
    "category-stats": _cmd_category_stats,
    "assemble": _cmd_assemble,
    "train-attention": _cmd_train_attention,
    "evaluate": _cmd_evaluate,
    "run": _cmd_run,
    "stats": _cmd_stats,
    "plot": _cmd_plot,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s")
    try:
        return _COMMANDS[args.command](args)
    except (ConfigError, FileNotFoundError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # noqa: BLE001 - CLI boundary
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
