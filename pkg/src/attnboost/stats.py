"""Rank correlations, least-squares regression, and permutation tests.

Implements the six-row analysis table relating each group's varied
property (size log2-transformed) to the measured accuracy changes, for
in-set and out-of-set test records.  Significance comes from seeded
permutation resampling; values with p >= 0.001 carry a parenthesised
presentation flag.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field

import numpy as np

STATISTICS = ("rho", "tau_b", "slope")
ROW_ORDER = (("difficulty", "in_set"), ("difficulty", "out_of_set"),
             ("size", "in_set"), ("size", "out_of_set"),
             ("similarity", "in_set"), ("similarity", "out_of_set"))
ROW_LABELS = "ABCDEF"


@dataclass
class PairedSample:
    x: np.ndarray
    y: np.ndarray

    def __post_init__(self):
        self.x = np.asarray(self.x, dtype=np.float64)
        self.y = np.asarray(self.y, dtype=np.float64)
        if self.x.ndim != 1 or self.x.shape != self.y.shape:
            raise ValueError("x and y must be equal-length vectors")
        if len(self.x) < 3:
            raise ValueError("need at least 3 paired observations")
        if not (np.isfinite(self.x).all() and np.isfinite(self.y).all()):
            raise ValueError("non-finite sample value")

    @property
    def n(self) -> int:
        return len(self.x)


def average_ranks(values: np.ndarray) -> np.ndarray:
    """1-based ranks; tied values share the average of their rank range."""
    values = np.asarray(values, dtype=np.float64)
    order = np.argsort(values, kind="stable")
    ranks = np.empty(len(values))
    i = 0
    while i < len(values):
        j = i
        while j + 1 < len(values) and values[order[j + 1]] == values[order[i]]:
            j += 1
        ranks[order[i:j + 1]] = 0.5 * (i + j) + 1.0
        i = j + 1
    return ranks


def _pearson(x: np.ndarray, y: np.ndarray) -> float:
    xc = x - x.mean()
    yc = y - y.mean()
    denom = math.sqrt(float(xc @ xc) * float(yc @ yc))
    if denom == 0.0:
        raise ValueError("zero variance makes the correlation undefined")
    return float(xc @ yc) / denom


def spearman_rho(sample: PairedSample) -> float:
    """Pearson correlation of average-ranked x and y."""
    return _pearson(average_ranks(sample.x), average_ranks(sample.y))


def _pair_signs(values: np.ndarray):
    iu, ju = np.triu_indices(len(values), k=1)
    return np.sign(values[iu] - values[ju])


def kendall_tau_b(sample: PairedSample) -> float:
    """Tie-corrected Kendall rank correlation.

    (C - D) / sqrt((n0 - n1)(n0 - n2)) with C/D the concordant and
    discordant pair counts, n0 all pairs, n1/n2 tied pairs in x/y.
    """
    sx = _pair_signs(sample.x)
    sy = _pair_signs(sample.y)
    n0 = len(sx)
    n1 = int(np.sum(sx == 0))
    n2 = int(np.sum(sy == 0))
    if n1 == n0 or n2 == n0:
        raise ValueError("all-tied sample makes tau_b undefined")
    num = float(np.sum(sx * sy))
    return num / math.sqrt(float(n0 - n1) * float(n0 - n2))


def linear_regression(sample: PairedSample):
    """Ordinary least squares with intercept: (beta0, beta1, r_squared).

    A constant y gives slope 0 with r_squared defined as 0.
    """
    x, y = sample.x, sample.y
    xc = x - x.mean()
    var_x = float(xc @ xc)
    if var_x == 0.0:
        raise ValueError("degenerate x: zero variance")
    beta1 = float(xc @ (y - y.mean())) / var_x
    beta0 = float(y.mean()) - beta1 * float(x.mean())
    residuals = y - (beta0 + beta1 * x)
    ss_res = float(residuals @ residuals)
    ss_tot = float((y - y.mean()) @ (y - y.mean()))
    r_squared = 0.0 if ss_tot == 0.0 else 1.0 - ss_res / ss_tot
    return beta0, beta1, r_squared


def _observed(sample: PairedSample, statistic: str) -> float:
    if statistic == "rho":
        return spearman_rho(sample)
    if statistic == "tau_b":
        return kendall_tau_b(sample)
    if statistic == "slope":
        return linear_regression(sample)[1]
    raise ValueError(f"unknown statistic {statistic!r}")


def _permutation_matrix(n: int, n_permutations: int, seed: int) -> np.ndarray:
    rng = np.random.default_rng(seed)
    perms = np.broadcast_to(np.arange(n), (n_permutations, n)).copy()
    return rng.permuted(perms, axis=1)


def permutation_p_value(sample: PairedSample, statistic: str,
                        n_permutations: int = 10000, seed: int = 0) -> float:
    """Two-sided permutation p-value: (1 + #{|stat_perm| >= |stat|}) / (N + 1).

    Permutes y against x with a seeded shuffler; the whole permutation
    set is drawn up front, so the estimate is reproducible and monotone
    in the observed statistic for a fixed seed.
    """
    if n_permutations < 99:
        raise ValueError("need at least 99 permutations")
    observed = abs(_observed(sample, statistic))
    perms = _permutation_matrix(sample.n, n_permutations, seed)

    if statistic == "rho":
        ry = average_ranks(sample.y)
        rx = average_ranks(sample.x)
        rxc = rx - rx.mean()
        ryc = ry - ry.mean()
        denom = math.sqrt(float(rxc @ rxc) * float(ryc @ ryc))
        if denom == 0.0:
            raise ValueError("zero variance makes the correlation undefined")
        stats = (ryc[perms] @ rxc) / denom
    elif statistic == "slope":
        xc = sample.x - sample.x.mean()
        var_x = float(xc @ xc)
        if var_x == 0.0:
            raise ValueError("degenerate x: zero variance")
        stats = (sample.y[perms] @ xc) / var_x
    else:  # tau_b
        sx = _pair_signs(sample.x)
        n0 = len(sx)
        n1 = int(np.sum(sx == 0))
        n2 = int(np.sum(_pair_signs(sample.y) == 0))  # tie structure is permutation-invariant
        if n1 == n0 or n2 == n0:
            raise ValueError("all-tied sample makes tau_b undefined")
        denom = math.sqrt(float(n0 - n1) * float(n0 - n2))
        iu, ju = np.triu_indices(sample.n, k=1)
        stats = np.empty(n_permutations)
        chunk = 512
        for start in range(0, n_permutations, chunk):
            yp = sample.y[perms[start:start + chunk]]
            sy = np.sign(yp[:, iu] - yp[:, ju]).astype(np.int8)
            stats[start:start + chunk] = (sy @ sx.astype(np.float64)) / denom

    count = int(np.sum(np.abs(stats) >= observed - 1e-12))
    return (1 + count) / (n_permutations + 1)


def bootstrap_intercept_ci(sample: PairedSample, n_resamples: int = 10000,
                           seed: int = 0, level: float = 0.95):
    """Percentile bootstrap confidence interval for the OLS intercept."""
    rng = np.random.default_rng(seed)
    n = sample.n
    intercepts = np.empty(n_resamples)
    kept = 0
    for _ in range(n_resamples):
        idx = rng.integers(0, n, size=n)
        x, y = sample.x[idx], sample.y[idx]
        xc = x - x.mean()
        var_x = float(xc @ xc)
        if var_x == 0.0:
            continue  # degenerate resample, drawn but skipped
        beta1 = float(xc @ (y - y.mean())) / var_x
        intercepts[kept] = y.mean() - beta1 * x.mean()
        kept += 1
    if kept == 0:
        raise ValueError("all bootstrap resamples were degenerate")
    tail = (1.0 - level) / 2.0
    lo, hi = np.quantile(intercepts[:kept], [tail, 1.0 - tail])
    return float(lo), float(hi)


@dataclass
class StatsRow:
    label: str
    property: str
    test_task: str
    n: int
    spearman_rho: float
    kendall_tau_b: float
    beta0: float
    beta1: float
    r_squared: float
    p_rho: float
    p_tau: float
    p_beta1: float
    degenerate: bool = False
    beta0_ci: tuple = field(default=(math.nan, math.nan))

    def parenthesised(self, statistic: str) -> bool:
        """Presentation flag: the value is shown in parentheses when p >= 0.001."""
        p = {"rho": self.p_rho, "tau_b": self.p_tau, "slope": self.p_beta1}[statistic]
        return (not math.isnan(p)) and p >= 0.001


def build_table(results, n_permutations: int = 10000, seed: int = 0,
                expected_kinds=("difficulty", "size", "similarity")) -> list[StatsRow]:
    """Six analysis rows: (property x in-set/out-of-set) over the results.

    ``results`` are ExperimentResult-like objects carrying group_kind,
    property_value, in_set_delta and out_of_set_delta.  The size
    property enters as log2(size).  Groups with identical y everywhere
    yield a degenerate-flagged row (correlations undefined, slope 0).
    """
    by_kind: dict[str, list] = {}
    for r in results:
        by_kind.setdefault(r.group_kind, []).append(r)
    for kind in expected_kinds:
        if kind not in by_kind or not by_kind[kind]:
            raise ValueError(f"missing group {kind!r} in results")

    rows = []
    for label, (kind, side) in zip(ROW_LABELS, ROW_ORDER):
        if kind not in by_kind:
            continue
        group = sorted(by_kind[kind], key=lambda r: r.set_index)
        x = np.array([r.property_value for r in group], dtype=np.float64)
        if kind == "size":
            x = np.log2(x)
        y = np.array([r.in_set_delta if side == "in_set" else r.out_of_set_delta
                      for r in group], dtype=np.float64)
        sample = PairedSample(x, y)
        beta0, beta1, r2 = linear_regression(sample)
        if np.all(y == y[0]):
            rows.append(StatsRow(label, kind, side, sample.n,
                                 math.nan, math.nan, beta0, beta1, r2,
                                 math.nan, math.nan, math.nan, degenerate=True))
            continue
        row_seed = seed + 7919 * ROW_LABELS.index(label)
        rows.append(StatsRow(
            label, kind, side, sample.n,
            spearman_rho=spearman_rho(sample),
            kendall_tau_b=kendall_tau_b(sample),
            beta0=beta0, beta1=beta1, r_squared=r2,
            p_rho=permutation_p_value(sample, "rho", n_permutations, row_seed),
            p_tau=permutation_p_value(sample, "tau_b", n_permutations, row_seed),
            p_beta1=permutation_p_value(sample, "slope", n_permutations, row_seed),
            beta0_ci=bootstrap_intercept_ci(sample, n_permutations, row_seed),
        ))
    return rows


TABLE_COLUMNS = ("label", "property", "test_task", "n", "spearman_rho",
                 "kendall_tau_b", "beta0", "beta1", "r_squared",
                 "p_rho", "p_tau", "p_beta1", "degenerate",
                 "rho_parenthesised", "tau_parenthesised", "beta1_parenthesised")


def write_table_csv(rows, path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(TABLE_COLUMNS)
        for r in rows:
            writer.writerow([
                r.label, r.property, r.test_task, r.n,
                repr(r.spearman_rho), repr(r.kendall_tau_b),
                repr(r.beta0), repr(r.beta1), repr(r.r_squared),
                repr(r.p_rho), repr(r.p_tau), repr(r.p_beta1),
                int(r.degenerate),
                int(r.parenthesised("rho")), int(r.parenthesised("tau_b")),
                int(r.parenthesised("slope")),
            ])


def write_table_json(rows, path, metadata=None) -> None:
    payload = {
        "metadata": metadata or {},
        "rows": [
            {
                "label": r.label, "property": r.property, "test_task": r.test_task,
                "n": r.n, "spearman_rho": _jsonable(r.spearman_rho),
                "kendall_tau_b": _jsonable(r.kendall_tau_b),
                "beta0": r.beta0, "beta1": r.beta1, "r_squared": r.r_squared,
                "p_rho": _jsonable(r.p_rho), "p_tau": _jsonable(r.p_tau),
                "p_beta1": _jsonable(r.p_beta1),
                "beta0_ci": [_jsonable(v) for v in r.beta0_ci],
                "degenerate": r.degenerate,
                "parenthesised": {s: r.parenthesised(s) for s in STATISTICS},
            }
            for r in rows
        ],
    }
    with open(path, "w") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _jsonable(v: float):
    return None if (isinstance(v, float) and math.isnan(v)) else v
