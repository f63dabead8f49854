"""End-to-end experiment pipeline.

Stages: load or generate the dataset, load or bootstrap the frozen
head, compute category stats, assemble the three task-set groups, train
the task-agnostic baseline mask, train and evaluate one fresh mask per
task set, build the statistics table, and emit all artifacts.  Fully
deterministic for a fixed global seed; per-task-set seeds derive from
(group kind, set index) so execution order and worker count do not
change results.
"""

from __future__ import annotations

import hashlib
import importlib.resources
import json
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import __version__, backend
from .assembly import (AssemblySpec, assemble_group, auto_targets, verify_group,
                       write_group_files)
from .attention import AttentionMask, predict_batch, train_attention, write_mask_file
from .feature_store import Dataset, SyntheticConfig, generate_synthetic, \
    read_feature_file, write_feature_file
from .head_model import (HeadModel, TrainConfig, TrainingDivergedError,
                         read_head_file, train_head, write_head_file)
from .properties import compute_category_stats, write_stats_cache
from .stats import build_table, write_table_csv, write_table_json
from .svgplot import render_group_plot

log = logging.getLogger(__name__)

GROUP_ORDER = ("difficulty", "size", "similarity")

# Seed-derivation domains (spawn keys off the global seed).
_DOMAIN_DATASET = 1
_DOMAIN_HEAD = 2
_DOMAIN_ASSEMBLY = 3
_DOMAIN_BASELINE = 4
_DOMAIN_STATS = 5
_DOMAIN_TASKSET = 10  # (10 + kind index, set index)


class ConfigError(ValueError):
    """Invalid or inconsistent run configuration."""


class StageError(RuntimeError):
    """A pipeline stage failed; the message names the stage."""


@dataclass
class ExperimentResult:
    group_kind: str
    set_index: int
    property_value: float
    in_set_delta: float
    out_of_set_delta: float
    in_set_accuracy_attention: float
    in_set_accuracy_baseline: float
    out_of_set_accuracy_attention: float
    out_of_set_accuracy_baseline: float
    mask_path: str


RESULT_COLUMNS = ("group_kind", "set_index", "property_value", "in_set_delta",
                  "out_of_set_delta", "in_set_accuracy_attention",
                  "in_set_accuracy_baseline", "out_of_set_accuracy_attention",
                  "out_of_set_accuracy_baseline", "mask_path")


def _derive_seed(global_seed: int, *key) -> int:
    seq = np.random.SeedSequence(global_seed, spawn_key=tuple(key))
    return int(seq.generate_state(1, np.uint32)[0])


def default_config() -> dict:
    text = importlib.resources.files("attnboost").joinpath("config_default.json").read_text()
    return json.loads(text)


def _deep_merge(base: dict, override: dict) -> dict:
    merged = dict(base)
    for key, value in override.items():
        if isinstance(value, dict) and isinstance(merged.get(key), dict):
            merged[key] = _deep_merge(merged[key], value)
        else:
            merged[key] = value
    return merged


def apply_overrides(config: dict, overrides) -> dict:
    """Apply dotted ``key=value`` strings; values parse as JSON when possible."""
    for item in overrides or ():
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not of the form key=value")
        dotted, _, raw = item.partition("=")
        try:
            value = json.loads(raw)
        except json.JSONDecodeError:
            value = raw
        node = config
        parts = dotted.split(".")
        for part in parts[:-1]:
            if not isinstance(node.get(part), dict):
                node[part] = {}
            node = node[part]
        node[parts[-1]] = value
    return config


@dataclass
class RunConfig:
    data: dict

    @classmethod
    def load(cls, path=None, overrides=None, seed=None, out_dir=None, jobs=None):
        config = default_config()
        if path is not None:
            try:
                user = json.loads(Path(path).read_text())
            except (OSError, json.JSONDecodeError) as exc:
                raise ConfigError(f"cannot read config {path}: {exc}") from exc
            if not isinstance(user, dict):
                raise ConfigError("config document must be a JSON object")
            config = _deep_merge(config, user)
        apply_overrides(config, overrides)
        if seed is not None:
            config["seed"] = seed
        if out_dir is not None:
            config["out_dir"] = str(out_dir)
        if jobs is not None:
            config["jobs"] = jobs
        run = cls(config)
        run.validate()
        return run

    def validate(self) -> None:
        cfg = self.data
        try:
            int(cfg["seed"])
            Path(cfg["out_dir"])
            if int(cfg["jobs"]) < 1:
                raise ConfigError("jobs must be >= 1")
            TrainConfig(**cfg["attention"])
            TrainConfig(**cfg["head"]["train"])
            if cfg["dataset"].get("path") is None:
                SyntheticConfig(**cfg["dataset"]["synthetic"])
        except ConfigError:
            raise
        except (KeyError, TypeError, ValueError) as exc:
            raise ConfigError(f"invalid config: {exc}") from exc
        for key in ("path",):
            p = cfg["dataset"].get(key)
            if p is not None and not Path(p).exists():
                raise ConfigError(f"dataset path does not exist: {p}")
        head_path = cfg["head"].get("path")
        if head_path is not None and not Path(head_path).exists():
            raise ConfigError(f"head path does not exist: {head_path}")
        sim_path = cfg.get("similarity_features_path")
        if sim_path is not None and not Path(sim_path).exists():
            raise ConfigError(f"similarity features path does not exist: {sim_path}")

    def sha256(self) -> str:
        canonical = json.dumps(self.data, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canonical.encode()).hexdigest()


def evaluate_network(head: HeadModel, mask: AttentionMask, dataset: Dataset,
                     task_categories):
    """In-set and out-of-set top-1 accuracy over the test split.

    Predictions always range over the full label space; the partition is
    by whether a test record's true category belongs to the task set.
    """
    cats = set(int(c) for c in task_categories)
    test_idx = dataset.indices(split="test")
    truth = dataset.category_ids[test_idx]
    in_mask = np.isin(truth, sorted(cats))
    if not in_mask.any() or in_mask.all():
        raise ValueError("empty partition: task set must split the test records")
    preds = predict_batch(head, mask, dataset.features[test_idx].astype(np.float64))
    in_acc = float(np.mean(preds[in_mask] == truth[in_mask]))
    out_acc = float(np.mean(preds[~in_mask] == truth[~in_mask]))
    return in_acc, out_acc


def _partition_accuracy(preds, truth, in_mask):
    return (float(np.mean(preds[in_mask] == truth[in_mask])),
            float(np.mean(preds[~in_mask] == truth[~in_mask])))


def _stage(name):
    """Decorator-free stage guard used inline below."""
    class _Guard:
        def __enter__(self):
            log.info("stage %s", name)
            return self

        def __exit__(self, exc_type, exc, tb):
            if exc is not None and not isinstance(exc, StageError):
                raise StageError(f"stage {name} failed: {exc}") from exc
            return False
    return _Guard()


# Worker-process state for the parallel sweep.
_POOL = {}


def _pool_init(head, dataset, granularity):
    _POOL["head"] = head
    _POOL["dataset"] = dataset
    _POOL["granularity"] = granularity
    _POOL["x_test"] = dataset.features[dataset.indices(split="test")].astype(np.float64)


def _pool_task(args):
    kind, set_index, categories, train_cfg, mask_path, log_path = args
    head, dataset = _POOL["head"], _POOL["dataset"]
    try:
        mask = train_attention(head, dataset, categories, train_cfg,
                               granularity=_POOL["granularity"], log_path=log_path)
    except TrainingDivergedError as exc:
        return kind, set_index, None, str(exc)
    write_mask_file(mask, mask_path)
    preds = predict_batch(head, mask, _POOL["x_test"])
    return kind, set_index, preds, None


@dataclass
class RunOutputs:
    results: list
    stats_rows: list
    out_dir: Path
    failed_task_sets: int


def run_experiment(config: RunConfig) -> RunOutputs:
    cfg = config.data
    seed = int(cfg["seed"])
    out_dir = Path(cfg["out_dir"])
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "masks").mkdir(exist_ok=True)
    (out_dir / "logs").mkdir(exist_ok=True)
    granularity = cfg.get("granularity", "unit")

    with _stage("dataset"):
        if cfg["dataset"].get("path"):
            dataset = read_feature_file(cfg["dataset"]["path"])
        else:
            synth = SyntheticConfig(**cfg["dataset"]["synthetic"])
            dataset = generate_synthetic(synth, _derive_seed(seed, _DOMAIN_DATASET))
            if cfg["dataset"].get("persist"):
                write_feature_file(dataset, out_dir / "dataset.atnf")
        similarity_dataset = None
        if cfg.get("similarity_features_path"):
            similarity_dataset = read_feature_file(
                cfg["similarity_features_path"], check_splits=False)

    with _stage("head"):
        if cfg["head"].get("path"):
            head = read_head_file(cfg["head"]["path"])
            if head.input_dim != dataset.shape.flat_dim:
                raise ConfigError("head input dim does not match dataset features")
        else:
            head = train_head(
                dataset, hidden_dims=tuple(cfg["head"]["hidden_dims"]),
                config=TrainConfig(**cfg["head"]["train"],
                                   seed=_derive_seed(seed, _DOMAIN_HEAD)),
                seed=_derive_seed(seed, _DOMAIN_HEAD),
                min_accuracy_over_chance=cfg["head"].get("min_accuracy_over_chance", 0.2))
            write_head_file(head, out_dir / "head.atnh")
    head_checksum = head.param_checksum()

    with _stage("category-stats"):
        stats_list = compute_category_stats(head, dataset, similarity_dataset)
        write_stats_cache(stats_list, out_dir / "category_stats.csv",
                          out_dir / "category_means.atnf")

    with _stage("assembly"):
        groups = {}
        for kind_index, kind in enumerate(GROUP_ORDER):
            spec = _build_spec(cfg, kind, stats_list,
                               _derive_seed(seed, _DOMAIN_ASSEMBLY, kind_index))
            group = assemble_group(spec, stats_list)
            audit = verify_group(group, stats_list, spec)
            if not audit.ok:
                raise StageError(f"stage assembly failed: audit violations {audit.violations[:3]}")
            groups[kind] = group
            write_group_files(group, out_dir / f"group_{kind}.csv",
                              out_dir / f"group_{kind}.json")

    with _stage("baseline"):
        baseline_cfg = TrainConfig(**cfg["attention"],
                                   seed=_derive_seed(seed, _DOMAIN_BASELINE))
        baseline_mask = train_attention(
            head, dataset, range(dataset.n_categories), baseline_cfg,
            granularity=granularity, log_path=out_dir / "logs" / "baseline.csv")
        write_mask_file(baseline_mask, out_dir / "masks" / "baseline.atna")
        test_idx = dataset.indices(split="test")
        truth = dataset.category_ids[test_idx]
        x_test = dataset.features[test_idx].astype(np.float64)
        baseline_preds = predict_batch(head, baseline_mask, x_test)

    with _stage("sweep"):
        tasks = []
        for kind_index, kind in enumerate(GROUP_ORDER):
            for i, ts in enumerate(groups[kind].task_sets):
                train_cfg = TrainConfig(
                    **cfg["attention"],
                    seed=_derive_seed(seed, _DOMAIN_TASKSET + kind_index, i))
                mask_rel = f"masks/{kind}_{i:03d}.atna"
                tasks.append((kind, i, ts.categories, train_cfg,
                              str(out_dir / mask_rel),
                              str(out_dir / "logs" / f"{kind}_{i:03d}.csv")))

        jobs = int(cfg.get("jobs", 1))
        if jobs > 1:
            with ProcessPoolExecutor(max_workers=jobs, initializer=_pool_init,
                                     initargs=(head, dataset, granularity)) as pool:
                raw = list(pool.map(_pool_task, tasks))
        else:
            _pool_init(head, dataset, granularity)
            raw = [_pool_task(t) for t in tasks]

        preds_by_key = {}
        failed = 0
        for kind, i, preds, error in raw:
            if preds is None:
                log.warning("task set %s/%d failed: %s", kind, i, error)
                failed += 1
            else:
                preds_by_key[(kind, i)] = preds

        results = []
        for kind_index, kind in enumerate(GROUP_ORDER):
            for i, ts in enumerate(groups[kind].task_sets):
                preds = preds_by_key.get((kind, i))
                if preds is None:
                    continue
                in_mask = np.isin(truth, ts.categories)
                attn_in, attn_out = _partition_accuracy(preds, truth, in_mask)
                base_in, base_out = _partition_accuracy(baseline_preds, truth, in_mask)
                prop = {"difficulty": ts.difficulty, "size": float(ts.size),
                        "similarity": ts.similarity}[kind]
                results.append(ExperimentResult(
                    group_kind=kind, set_index=i, property_value=prop,
                    in_set_delta=attn_in - base_in,
                    out_of_set_delta=attn_out - base_out,
                    in_set_accuracy_attention=attn_in,
                    in_set_accuracy_baseline=base_in,
                    out_of_set_accuracy_attention=attn_out,
                    out_of_set_accuracy_baseline=base_out,
                    mask_path=f"masks/{kind}_{i:03d}.atna"))

    if head.param_checksum() != head_checksum:
        raise StageError("stage sweep failed: head parameters changed during training")

    with _stage("stats"):
        stats_rows = build_table(results,
                                 n_permutations=int(cfg["stats"]["n_permutations"]),
                                 seed=_derive_seed(seed, _DOMAIN_STATS))

    with _stage("report"):
        write_results_csv(results, out_dir / "results.csv")
        write_table_csv(stats_rows, out_dir / "table.csv")
        write_table_json(stats_rows, out_dir / "table.json", metadata={
            "config_sha256": config.sha256(), "version": __version__})
        emit_plots(results, stats_rows, out_dir)
        manifest = {
            "version": __version__,
            "config": cfg,
            "config_sha256": config.sha256(),
            "backend": backend.backend_name(),
            "numpy_version": np.__version__,
            "failed_task_sets": failed,
            "splits": {"difficulty_accuracy": "val", "similarity_means": "train",
                       "evaluation": "test"},
        }
        with open(out_dir / "manifest.json", "w") as fh:
            json.dump(manifest, fh, indent=2, sort_keys=True)
            fh.write("\n")

    return RunOutputs(results, stats_rows, out_dir, failed)


def _build_spec(cfg: dict, kind: str, stats_list, seed: int) -> AssemblySpec:
    acfg = cfg["assembly"]
    tolerances = dict(acfg.get("tolerances", {}))
    max_iterations = int(acfg.get("max_iterations", 20000))
    margin = float(acfg.get("target_margin", 0.12))
    if kind == "size":
        ladder = list(acfg["size"]["ladder"])
        repeats = int(acfg["size"]["repeats"])
        return AssemblySpec(group_kind="size", n_task_sets=len(ladder) * repeats,
                            size_ladder=ladder, hold_tolerances=tolerances,
                            max_iterations=max_iterations, seed=seed)
    gcfg = acfg[kind]
    n = int(gcfg["n_task_sets"])
    k = int(gcfg["fixed_size"])
    targets = gcfg.get("targets", "auto")
    if targets == "auto":
        targets = auto_targets(kind, n, k, stats_list, seed, margin=margin)
    return AssemblySpec(group_kind=kind, n_task_sets=n, fixed_size=k,
                        target_values=sorted(float(t) for t in targets),
                        hold_tolerances=tolerances,
                        max_iterations=max_iterations, seed=seed)


def write_results_csv(results, path) -> None:
    import csv

    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(RESULT_COLUMNS)
        for r in sorted(results, key=lambda r: (GROUP_ORDER.index(r.group_kind),
                                                r.set_index)):
            writer.writerow([
                r.group_kind, r.set_index, repr(r.property_value),
                repr(r.in_set_delta), repr(r.out_of_set_delta),
                repr(r.in_set_accuracy_attention), repr(r.in_set_accuracy_baseline),
                repr(r.out_of_set_accuracy_attention),
                repr(r.out_of_set_accuracy_baseline), r.mask_path,
            ])


def read_results_csv(path) -> list:
    import csv

    results = []
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            results.append(ExperimentResult(
                group_kind=row["group_kind"], set_index=int(row["set_index"]),
                property_value=float(row["property_value"]),
                in_set_delta=float(row["in_set_delta"]),
                out_of_set_delta=float(row["out_of_set_delta"]),
                in_set_accuracy_attention=float(row["in_set_accuracy_attention"]),
                in_set_accuracy_baseline=float(row["in_set_accuracy_baseline"]),
                out_of_set_accuracy_attention=float(row["out_of_set_accuracy_attention"]),
                out_of_set_accuracy_baseline=float(row["out_of_set_accuracy_baseline"]),
                mask_path=row["mask_path"]))
    return results


def emit_plots(results, stats_rows, out_dir) -> None:
    """Write one SVG scatter per group with the fitted regression lines."""
    out_dir = Path(out_dir)
    if not results:
        raise ValueError("no results to plot")
    rows_by_key = {(r.property, r.test_task): r for r in stats_rows}
    for kind in GROUP_ORDER:
        group = sorted((r for r in results if r.group_kind == kind),
                       key=lambda r: r.set_index)
        if not group:
            continue
        xs = [r.property_value for r in group]
        xlabel = kind
        if kind == "size":
            xs = [math.log2(x) for x in xs]
            xlabel = "size (log2)"
        regressions = {}
        for side in ("in_set", "out_of_set"):
            row = rows_by_key.get((kind, side))
            if row is not None:
                regressions[side] = (row.beta0, row.beta1)
        svg = render_group_plot(
            xs,
            [r.in_set_delta for r in group],
            [r.out_of_set_delta for r in group],
            regressions,
            title=f"{kind}-based task sets",
            xlabel=xlabel)
        (out_dir / f"fig_{kind}.svg").write_text(svg)
