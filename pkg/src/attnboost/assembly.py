"""Assemble groups of task sets that vary one property and hold the others.

Construction is a seeded stochastic local search: start from a random
feasible-size subset, repeatedly apply the best strict-improvement swap
(one member out, one non-member in) on a quadratic objective, accept as
soon as the set is within tolerance, restart on local minima.  Each
target gets its own derived seed so serial and parallel assembly agree.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field

import numpy as np

from .properties import CategoryStats, TaskSet, _as_table, make_task_set

GROUP_KINDS = ("difficulty", "size", "similarity")
HELD_PROPERTIES = ("difficulty", "similarity")  # size is held exactly by construction

DEFAULT_TOLERANCES = {"difficulty": 0.05, "similarity": 0.05}


class InfeasibleTargetError(RuntimeError):
    """No subset satisfying a target was found within the move budget."""


@dataclass
class AssemblySpec:
    group_kind: str
    n_task_sets: int
    fixed_size: int = 16
    size_ladder: list = field(default_factory=list)
    target_values: list = field(default_factory=list)
    hold_tolerances: dict = field(default_factory=lambda: dict(DEFAULT_TOLERANCES))
    max_iterations: int = 20000
    seed: int = 0

    def __post_init__(self):
        if self.group_kind not in GROUP_KINDS:
            raise ValueError(f"unknown group kind {self.group_kind!r}")
        if self.n_task_sets < 1:
            raise ValueError("n_task_sets must be positive")
        if self.max_iterations < 1:
            raise ValueError("max_iterations must be positive")
        for prop, tol in self.hold_tolerances.items():
            if tol <= 0:
                raise ValueError(f"tolerance for {prop} must be positive")
        if self.group_kind == "size":
            if not self.size_ladder:
                raise ValueError("size group needs a size ladder")
            if any(s < 2 for s in self.size_ladder):
                raise ValueError("ladder entries must be >= 2")
            if self.n_task_sets % len(self.size_ladder):
                raise ValueError("n_task_sets must be a multiple of the ladder length")
        else:
            if self.fixed_size < 2:
                raise ValueError("fixed_size must be >= 2")
            if len(self.target_values) != self.n_task_sets:
                raise ValueError("need one target value per task set")
            if sorted(self.target_values) != list(self.target_values):
                raise ValueError("targets must be sorted ascending")

    def set_sizes(self) -> list[int]:
        """Size of each task set, in assembly order."""
        if self.group_kind == "size":
            repeats = self.n_task_sets // len(self.size_ladder)
            return [s for s in self.size_ladder for _ in range(repeats)]
        return [self.fixed_size] * self.n_task_sets

    def targets(self) -> list[float]:
        if self.group_kind == "size":
            return [float(s) for s in self.set_sizes()]
        return [float(t) for t in self.target_values]


@dataclass
class TaskSetGroup:
    kind: str
    task_sets: list
    targets: list
    anchors: dict                 # held-property levels the group holds to
    achieved_deviations: list     # per set: property -> residual


@dataclass
class AuditReport:
    violations: list
    per_set: list
    held_correlations: dict

    @property
    def ok(self) -> bool:
        return not self.violations


def _fast_similarity_matrix(stats) -> np.ndarray:
    table = _as_table(stats)
    ids = sorted(table)
    means = np.stack([table[c].mean_representation for c in ids])
    norms = np.linalg.norm(means, axis=1)
    if (norms == 0).any():
        raise ValueError("zero-norm mean representation")
    unit = means / norms[:, None]
    sim = unit @ unit.T
    np.fill_diagonal(sim, 1.0)
    return sim


def _pair_mean(pair_sum: float, k: int) -> float:
    return pair_sum / (k * (k - 1) / 2.0)


def _hinge(value: float, anchor: float, tol: float) -> float:
    gap = abs(value - anchor) - tol
    return gap * gap if gap > 0 else 0.0


class _Searcher:
    """Swap-based local search over fixed-size subsets of categories."""

    def __init__(self, errors, sim, anchors, tolerances):
        self.errors = errors
        self.sim = sim
        self.n = len(errors)
        self.anchors = anchors
        self.tolerances = tolerances

    def _props(self, members, err_sum, pair_sum):
        k = len(members)
        return {"difficulty": err_sum / k, "similarity": _pair_mean(pair_sum, k)}

    def _objective(self, kind, target, props):
        j = 0.0
        if kind != "size":
            j += (props[kind] - target) ** 2
        for prop in HELD_PROPERTIES:
            if prop != kind:
                j += _hinge(props[prop], self.anchors[prop], self.tolerances[prop])
        return j

    def _feasible(self, kind, target, props):
        if kind != "size" and abs(props[kind] - target) > self.tolerances[kind]:
            return False
        return all(abs(props[p] - self.anchors[p]) <= self.tolerances[p]
                   for p in HELD_PROPERTIES if p != kind)

    def _residual(self, kind, target, props):
        """Worst constraint violation, for infeasibility diagnostics."""
        parts = []
        if kind != "size":
            parts.append(abs(props[kind] - target) - self.tolerances[kind])
        parts += [abs(props[p] - self.anchors[p]) - self.tolerances[p]
                  for p in HELD_PROPERTIES if p != kind]
        return max(0.0, max(parts))

    def _centering(self, kind, target, diff, sim_v):
        """Quadratic pull: varied to target, held exactly onto the anchors.

        Feasibility only demands landing inside the tolerance bands, but
        stopping at the first feasible point leaves a systematic drift of
        the held properties that correlates with the target; polishing
        against this objective removes it.
        """
        j = (0.0 if kind == "size" else
             ((diff if kind == "difficulty" else sim_v) - target) ** 2)
        if kind != "difficulty":
            j = j + (diff - self.anchors["difficulty"]) ** 2
        if kind != "similarity":
            j = j + (sim_v - self.anchors["similarity"]) ** 2
        return j

    def search(self, kind, target, k, rng, budget):
        best_residual = np.inf
        moves = 0
        n_pairs = k * (k - 1) / 2.0
        while moves < budget:
            members = np.sort(rng.choice(self.n, size=k, replace=False))
            in_set = np.zeros(self.n, dtype=bool)
            in_set[members] = True
            err_sum = float(self.errors[members].sum())
            sub = self.sim[np.ix_(members, members)]
            pair_sum = float((sub.sum() - np.trace(sub)) / 2.0)

            while moves < budget:
                moves += 1
                props = self._props(members, err_sum, pair_sum)
                feasible = self._feasible(kind, target, props)
                if not feasible:
                    best_residual = min(best_residual, self._residual(kind, target, props))

                outs = members
                ins = np.flatnonzero(~in_set)
                if len(ins) == 0:
                    if feasible:
                        return members, moves
                    break
                row_out = self.sim[np.ix_(outs, outs)].sum(axis=1) - 1.0
                col_in = self.sim[np.ix_(ins, outs)].sum(axis=1)
                err_new = err_sum - self.errors[outs][:, None] + self.errors[ins][None, :]
                pair_new = (pair_sum - row_out[:, None] + col_in[None, :]
                            - self.sim[np.ix_(ins, outs)].T)
                diff_new = err_new / k
                sim_new = pair_new / n_pairs

                if feasible:
                    # polish phase: only swaps that stay feasible count
                    j_cur = self._centering(kind, target, props["difficulty"],
                                            props["similarity"])
                    j_new = self._centering(kind, target, diff_new, sim_new)
                    ok = np.abs(diff_new - self.anchors["difficulty"]) <= self.tolerances["difficulty"]
                    ok &= np.abs(sim_new - self.anchors["similarity"]) <= self.tolerances["similarity"]
                    if kind == "difficulty":
                        ok = np.abs(diff_new - target) <= self.tolerances["difficulty"]
                        ok &= np.abs(sim_new - self.anchors["similarity"]) <= self.tolerances["similarity"]
                    elif kind == "similarity":
                        ok = np.abs(sim_new - target) <= self.tolerances["similarity"]
                        ok &= np.abs(diff_new - self.anchors["difficulty"]) <= self.tolerances["difficulty"]
                    j_new = np.where(ok, j_new, np.inf)
                else:
                    j_cur = self._objective(kind, target, props)
                    if kind == "difficulty":
                        j_new = ((diff_new - target) ** 2
                                 + _hinged(sim_new, self.anchors["similarity"],
                                           self.tolerances["similarity"]))
                    elif kind == "similarity":
                        j_new = ((sim_new - target) ** 2
                                 + _hinged(diff_new, self.anchors["difficulty"],
                                           self.tolerances["difficulty"]))
                    else:
                        j_new = (_hinged(diff_new, self.anchors["difficulty"],
                                         self.tolerances["difficulty"])
                                 + _hinged(sim_new, self.anchors["similarity"],
                                           self.tolerances["similarity"]))

                flat = int(np.argmin(j_new))
                a_pos, b_pos = np.unravel_index(flat, j_new.shape)
                if not np.isfinite(j_new[a_pos, b_pos]) or j_new[a_pos, b_pos] >= j_cur - 1e-15:
                    if feasible:
                        return members, moves
                    break  # local minimum, restart
                a, b = outs[a_pos], ins[b_pos]
                err_sum = float(err_new[a_pos, b_pos])
                pair_sum = float(pair_new[a_pos, b_pos])
                in_set[a] = False
                in_set[b] = True
                members = np.sort(np.where(members == a, b, members))
        raise InfeasibleTargetError(
            f"no {kind} task set reached target {target:g} within the move "
            f"budget; best residual achieved {best_residual:g}")


def _hinged(values: np.ndarray, anchor: float, tol: float) -> np.ndarray:
    gap = np.abs(values - anchor) - tol
    return np.where(gap > 0, gap * gap, 0.0)


def probe_property_range(kind, k, stats, seed, n_probes=256):
    """Empirical (min, max) of a property over random and greedy-extreme sets."""
    table = _as_table(stats)
    ids = sorted(table)
    errors = np.array([1.0 - table[c].baseline_accuracy for c in ids])
    sim = _fast_similarity_matrix(table)
    rng = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(999,)))
    values = []
    for _ in range(n_probes):
        members = rng.choice(len(ids), size=k, replace=False)
        if kind == "difficulty":
            values.append(errors[members].mean())
        else:
            sub = sim[np.ix_(members, members)]
            values.append(_pair_mean(float(sub.sum() - np.trace(sub)) / 2.0, k))
    if kind == "difficulty":
        ordered = np.sort(errors)
        values.append(ordered[:k].mean())
        values.append(ordered[-k:].mean())
    else:
        values.append(_greedy_similarity_extreme(sim, k, maximise=True))
        values.append(_greedy_similarity_extreme(sim, k, maximise=False))
    return float(min(values)), float(max(values))


def _greedy_similarity_extreme(sim, k, maximise):
    n = sim.shape[0]
    off = sim.copy()
    np.fill_diagonal(off, -np.inf if maximise else np.inf)
    start = np.unravel_index(np.argmax(off) if maximise else np.argmin(off), sim.shape)
    members = list(start)
    while len(members) < k:
        mean_to_set = sim[:, members].mean(axis=1)
        mean_to_set[members] = -np.inf if maximise else np.inf
        members.append(int(np.argmax(mean_to_set) if maximise else np.argmin(mean_to_set)))
    sub = sim[np.ix_(members, members)]
    return _pair_mean(float(sub.sum() - np.trace(sub)) / 2.0, k)


def auto_targets(kind, n_targets, k, stats, seed, margin=0.12):
    """Targets evenly spaced across the interior of the achievable range."""
    lo, hi = probe_property_range(kind, k, stats, seed)
    span = hi - lo
    return list(np.linspace(lo + margin * span, hi - margin * span, n_targets))


def group_anchors(stats) -> dict:
    """Global held-property levels: the all-category mean of each property."""
    table = _as_table(stats)
    ids = sorted(table)
    errors = np.array([1.0 - table[c].baseline_accuracy for c in ids])
    sim = _fast_similarity_matrix(table)
    n = len(ids)
    pair_sum = float(sim.sum() - np.trace(sim)) / 2.0
    return {"difficulty": float(errors.mean()),
            "similarity": _pair_mean(pair_sum, n)}


def assemble_group(spec: AssemblySpec, stats) -> TaskSetGroup:
    """Build one group of task sets satisfying the spec's tolerances.

    Deterministic for a fixed (spec, stats): each target searches with a
    seed derived from ``spec.seed`` and the target index.
    """
    table = _as_table(stats)
    ids = sorted(table)
    if ids != list(range(len(ids))):
        raise ValueError("assembly expects dense category ids")
    errors = np.array([1.0 - table[c].baseline_accuracy for c in ids])
    sim = _fast_similarity_matrix(table)
    anchors = group_anchors(table)
    sizes = spec.set_sizes()
    targets = spec.targets()
    if max(sizes) > len(ids):
        raise ValueError("not enough categories for the requested set sizes")

    if spec.group_kind != "size":
        lo, hi = probe_property_range(spec.group_kind, spec.fixed_size, table, spec.seed)
        slack = 0.25 * (hi - lo)
        for t in targets:
            if not (lo - slack <= t <= hi + slack):
                raise InfeasibleTargetError(
                    f"target {t:g} lies outside the achievable {spec.group_kind} "
                    f"range [{lo:g}, {hi:g}] estimated from random probes; "
                    f"best residual achieved {max(lo - t, t - hi):g}")

    tolerances = dict(DEFAULT_TOLERANCES)
    tolerances.update(spec.hold_tolerances)
    searcher = _Searcher(errors, sim, anchors, tolerances)

    task_sets, deviations = [], []
    for index, (target, k) in enumerate(zip(targets, sizes)):
        rng = np.random.default_rng(np.random.SeedSequence(spec.seed, spawn_key=(index,)))
        members, _ = searcher.search(spec.group_kind, target, k, rng, spec.max_iterations)
        ts = make_task_set([ids[m] for m in members], table)
        task_sets.append(ts)
        deviations.append({
            "difficulty": ts.difficulty - (target if spec.group_kind == "difficulty"
                                           else anchors["difficulty"]),
            "similarity": ts.similarity - (target if spec.group_kind == "similarity"
                                           else anchors["similarity"]),
            "size": ts.size - (target if spec.group_kind == "size" else k),
        })
    return TaskSetGroup(spec.group_kind, task_sets, targets, anchors, deviations)


def _pearson(x, y) -> float:
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.std() == 0.0 or y.std() == 0.0:
        return 0.0
    return float(np.corrcoef(x, y)[0, 1])


def verify_group(group: TaskSetGroup, stats, spec: AssemblySpec) -> AuditReport:
    """Recompute every property from scratch and audit all tolerances."""
    table = _as_table(stats)
    tolerances = dict(DEFAULT_TOLERANCES)
    tolerances.update(spec.hold_tolerances)
    eps = 1e-9  # do not fail sets sitting exactly on a tolerance boundary
    violations, per_set = [], []
    sizes = spec.set_sizes()
    for i, (ts, target, k) in enumerate(zip(group.task_sets, group.targets, sizes)):
        fresh = make_task_set(ts.categories, table)
        achieved = {"difficulty": fresh.difficulty, "size": fresh.size,
                    "similarity": fresh.similarity}
        per_set.append({"set_index": i, "target": target, **achieved})
        for prop, stored in (("difficulty", ts.difficulty), ("size", ts.size),
                             ("similarity", ts.similarity)):
            if abs(achieved[prop] - stored) > 1e-9:
                violations.append(
                    f"set {i}: stored {prop} {stored:g} != recomputed {achieved[prop]:g}")
        if fresh.size != k:
            violations.append(f"set {i}: size {fresh.size} != required {k}")
        if spec.group_kind != "size":
            if abs(achieved[spec.group_kind] - target) > tolerances[spec.group_kind] + eps:
                violations.append(
                    f"set {i}: {spec.group_kind} {achieved[spec.group_kind]:g} "
                    f"misses target {target:g}")
        for prop in HELD_PROPERTIES:
            if prop != spec.group_kind:
                if abs(achieved[prop] - group.anchors[prop]) > tolerances[prop] + eps:
                    violations.append(
                        f"set {i}: held {prop} {achieved[prop]:g} outside "
                        f"anchor {group.anchors[prop]:g} +- {tolerances[prop]:g}")

    varied = ([np.log2(s["size"]) for s in per_set] if spec.group_kind == "size"
              else [s[spec.group_kind] for s in per_set])
    held_correlations = {
        prop: _pearson(varied, [s[prop] for s in per_set])
        for prop in HELD_PROPERTIES if prop != spec.group_kind
    }
    return AuditReport(violations, per_set, held_correlations)


def write_group_files(group: TaskSetGroup, csv_path, json_path) -> None:
    with open(csv_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["group_kind", "set_index", "target", "category_id"])
        for i, (ts, target) in enumerate(zip(group.task_sets, group.targets)):
            for c in ts.categories:
                writer.writerow([group.kind, i, repr(float(target)), c])
    sidecar = {
        "kind": group.kind,
        "anchors": group.anchors,
        "task_sets": [
            {"set_index": i, "target": float(t), "categories": list(ts.categories),
             "difficulty": ts.difficulty, "size": ts.size, "similarity": ts.similarity,
             "deviations": group.achieved_deviations[i]}
            for i, (ts, t) in enumerate(zip(group.task_sets, group.targets))
        ],
    }
    with open(json_path, "w") as fh:
        json.dump(sidecar, fh, indent=2, sort_keys=True)
        fh.write("\n")


def read_group_csv(csv_path, stats) -> TaskSetGroup:
    """Rebuild a group (properties recomputed) from its CSV listing."""
    table = _as_table(stats)
    rows = list(csv.DictReader(open(csv_path, newline="")))
    if not rows:
        raise ValueError(f"empty group file {csv_path}")
    kind = rows[0]["group_kind"]
    by_set: dict[int, dict] = {}
    for row in rows:
        entry = by_set.setdefault(int(row["set_index"]),
                                  {"target": float(row["target"]), "cats": []})
        entry["cats"].append(int(row["category_id"]))
    task_sets, targets = [], []
    for i in sorted(by_set):
        task_sets.append(make_task_set(by_set[i]["cats"], table))
        targets.append(by_set[i]["target"])
    anchors = group_anchors(table)
    return TaskSetGroup(kind, task_sets, targets, anchors,
                        achieved_deviations=[{} for _ in task_sets])
