"""Evaluation metrics for generation quality and ddG prediction.

Correlations, calibrated errors, and AUROC are implemented from
scratch so they can be cross-checked against brute-force oracles;
perplexity and recovery reuse the likelihood estimator and the reverse
sampler.  Length buckets follow the reporting convention short (<100),
medium (<500), long (<1000), full.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .bridge import NoiseSchedule, reverse_sample
from .errors import DegenerateInputError, ShapeError
from .objectives import model_log_likelihood
from .predictor import predict, prior_encode
from .rng import derive_seed
from .world import potts_energy

__all__ = [
    "MetricsReport",
    "rank_average",
    "pearson",
    "spearman",
    "minimized_rmse",
    "minimized_mae",
    "auroc",
    "ddg_metrics",
    "perplexity",
    "recovery",
    "zscore",
    "energy_table",
    "fold_aggregate",
]

LENGTH_BUCKETS = (("short", 0, 100), ("medium", 100, 500), ("long", 500, 1000))


@dataclass
class MetricsReport:
    """Named scalars plus bucketed and per-structure breakdowns."""

    scalars: dict = field(default_factory=dict)
    buckets: dict = field(default_factory=dict)
    per_structure: dict = field(default_factory=dict)
    missing: list = field(default_factory=list)
    data: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {"scalars": self.scalars, "buckets": self.buckets,
                "per_structure": self.per_structure, "missing": self.missing}


def rank_average(x) -> np.ndarray:
    """1-based ranks with ties sharing their average rank."""
    x = np.asarray(x, dtype=np.float64)
    order = np.argsort(x, kind="stable")
    ranks = np.empty(x.size, dtype=np.float64)
    i = 0
    while i < x.size:
        j = i
        while j + 1 < x.size and x[order[j + 1]] == x[order[i]]:
            j += 1
        ranks[order[i:j + 1]] = (i + j) / 2.0 + 1.0
        i = j + 1
    return ranks


def pearson(a, b) -> float | None:
    """Sample correlation; None when either vector has zero variance."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.size != b.size:
        raise ShapeError("correlation inputs must have equal length")
    if a.size < 2:
        raise DegenerateInputError("correlation needs at least 2 points")
    da, db = a - a.mean(), b - b.mean()
    denom = np.sqrt((da * da).sum() * (db * db).sum())
    if denom == 0.0:
        return None
    return float((da * db).sum() / denom)


def spearman(a, b) -> float | None:
    """Rank correlation: Pearson over average ranks."""
    return pearson(rank_average(a), rank_average(b))


def _ols_fit(preds: np.ndarray, labels: np.ndarray) -> tuple:
    var = preds.var()
    if var == 0.0:
        return 0.0, float(labels.mean())
    a = float(((preds - preds.mean()) * (labels - labels.mean())).mean() / var)
    return a, float(labels.mean() - a * preds.mean())


def minimized_rmse(preds, labels) -> float:
    """RMSE after the least-squares affine calibration of predictions."""
    preds = np.asarray(preds, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.float64)
    a, b = _ols_fit(preds, labels)
    r = labels - (a * preds + b)
    return float(np.sqrt((r * r).mean()))


def _weighted_median(values: np.ndarray, weights: np.ndarray) -> float:
    order = np.argsort(values, kind="stable")
    cum = np.cumsum(weights[order])
    cut = 0.5 * cum[-1]
    idx = int(np.searchsorted(cum, cut))
    if idx + 1 < values.size and np.isclose(cum[idx], cut):
        return float(0.5 * (values[order[idx]] + values[order[idx + 1]]))
    return float(values[order[min(idx, values.size - 1)]])


def _lad_mae(preds, labels, a: float) -> tuple:
    b = float(np.median(labels - a * preds))
    return float(np.abs(labels - a * preds - b).mean()), b


def minimized_mae(preds, labels, sweeps: int = 50) -> float:
    """MAE after a least-absolute-deviation affine fit.

    Iterated median regression: alternately set the intercept to the
    median residual and the slope to the weighted median of pointwise
    slopes.  Several starts (OLS slope plus data-pair slopes on small
    inputs) guard against stalling on a non-global corner.
    """
    preds = np.asarray(preds, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.float64)
    n = preds.size
    starts = {_ols_fit(preds, labels)[0], 0.0}
    if n <= 40:
        for i in range(n):
            for j in range(i + 1, n):
                if preds[i] != preds[j]:
                    starts.add(float((labels[i] - labels[j]) / (preds[i] - preds[j])))
    best = np.inf
    for a0 in starts:
        a = a0
        mae, b = _lad_mae(preds, labels, a)
        for _ in range(sweeps):
            r = labels - b
            nz = preds != 0.0
            if not nz.any():
                break
            a_new = _weighted_median(r[nz] / preds[nz], np.abs(preds[nz]))
            mae_new, b_new = _lad_mae(preds, labels, a_new)
            if mae_new >= mae - 1e-15:
                break
            a, b, mae = a_new, b_new, mae_new
        best = min(best, mae)
    return float(best)


def auroc(scores, positives) -> float | None:
    """Tie-aware AUROC (rank formulation, equals trapezoidal over ties).

    ``positives`` is a boolean mask; returns None when one class is
    absent.
    """
    scores = np.asarray(scores, dtype=np.float64)
    positives = np.asarray(positives, dtype=bool)
    n_pos = int(positives.sum())
    n_neg = positives.size - n_pos
    if n_pos == 0 or n_neg == 0:
        return None
    ranks = rank_average(scores)
    u = ranks[positives].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def ddg_metrics(preds, labels, groups) -> MetricsReport:
    """The seven-metric ddG suite.

    Overall Pearson/Spearman, affine-calibrated RMSE and MAE, AUROC for
    stabilizing (label < 0) classification with -pred as the score, and
    per-structure Pearson/Spearman averaged over groups with n >= 3.
    Undefined metrics are reported in ``missing`` instead of as values.
    """
    preds = np.asarray(preds, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.float64)
    groups = list(groups)
    if preds.size != labels.size or preds.size != len(groups):
        raise ShapeError("preds, labels, and groups must have equal length")
    if preds.size < 2:
        raise DegenerateInputError("ddG metrics need at least 2 points")

    report = MetricsReport(data={"preds": preds.copy(), "labels": labels.copy(),
                                 "groups": list(groups)})

    def put(name, value):
        if value is None:
            report.missing.append(name)
        else:
            report.scalars[name] = float(value)

    put("pearson", pearson(preds, labels))
    put("spearman", spearman(preds, labels))
    report.scalars["minimized_rmse"] = minimized_rmse(preds, labels)
    report.scalars["minimized_mae"] = minimized_mae(preds, labels)
    put("auroc", auroc(-preds, labels < 0.0))

    per_p, per_s, skipped = [], [], 0
    for gid in sorted(set(groups)):
        mask = np.array([g == gid for g in groups])
        if mask.sum() < 3:
            skipped += 1
            continue
        p = pearson(preds[mask], labels[mask])
        s = spearman(preds[mask], labels[mask])
        if p is None or s is None:
            skipped += 1
            continue
        report.per_structure[gid] = {"pearson": p, "spearman": s, "n": int(mask.sum())}
        per_p.append(p)
        per_s.append(s)
    if per_p:
        report.scalars["per_structure_pearson"] = float(np.mean(per_p))
        report.scalars["per_structure_spearman"] = float(np.mean(per_s))
    else:
        report.missing.extend(["per_structure_pearson", "per_structure_spearman"])
    report.scalars["per_structure_skipped"] = skipped
    report.scalars["n"] = int(preds.size)
    return report


def _bucket_of(L: int) -> str | None:
    for name, lo, hi in LENGTH_BUCKETS:
        if lo <= L < hi:
            return name
    return None


def perplexity(params, prior, worlds, schedule: NoiseSchedule,
               eval_seed: int, M: int = 4) -> MetricsReport:
    """exp(per-token negative log likelihood), pooled and per bucket."""
    if not worlds:
        raise DegenerateInputError("perplexity needs a non-empty dataset")
    nll, tokens = {}, {}
    for idx, w in enumerate(worlds):
        ll = float(ad.value_of(model_log_likelihood(
            params, prior, w.native, w.structure, schedule, M,
            derive_seed(eval_seed, idx))))
        L = w.structure.L
        for key in ("full", _bucket_of(L)):
            if key is None:
                continue
            nll[key] = nll.get(key, 0.0) - ll
            tokens[key] = tokens.get(key, 0) + L
    report = MetricsReport()
    for key in nll:
        value = float(np.exp(nll[key] / tokens[key]))
        if key == "full":
            report.scalars["perplexity"] = value
        else:
            report.buckets.setdefault(key, {})["perplexity"] = value
    return report


def recovery(params, prior, worlds, schedule: NoiseSchedule, seeds) -> MetricsReport:
    """Median percent identity of reverse-sampled designs per bucket.

    Each structure is designed once per seed; its value is the mean
    over seeds, and buckets report the median across structures.
    """
    if not worlds:
        raise DegenerateInputError("recovery needs a non-empty dataset")
    seeds = list(seeds)
    K = worlds[0].potts.K
    values, buckets = [], {}
    per_structure = {}
    for w in worlds:
        recs = []
        for seed in seeds:
            design = reverse_sample(lambda z, S, t: predict(params, z, S, t),
                                    lambda S: prior_encode(prior, S),
                                    w.structure, schedule, seed, K)
            recs.append(100.0 * float(np.mean(design == w.native)))
        val = float(np.mean(recs))
        per_structure[w.structure.id] = val
        values.append(val)
        name = _bucket_of(w.structure.L)
        if name is not None:
            buckets.setdefault(name, []).append(val)
    report = MetricsReport(per_structure=per_structure)
    report.scalars["recovery"] = float(np.median(values))
    for name, vals in buckets.items():
        report.buckets[name] = {"recovery": float(np.median(vals))}
    return report


def zscore(table, target_row: int) -> float:
    """Cross-method standardized score, exp(mean of per-method z values).

    Columns are standardized across models with the population std;
    zero-spread columns contribute 0.  Lower raw scores than the field
    give a value below 1.
    """
    table = np.asarray(table, dtype=np.float64)
    if table.ndim != 2:
        raise ShapeError("zscore expects a 2-D model x method table")
    if table.shape[0] < 2:
        raise DegenerateInputError("zscore needs at least 2 models")
    if not (0 <= target_row < table.shape[0]):
        raise ShapeError(f"target row {target_row} outside table")
    mean2 = table.mean(axis=0)
    std2 = table.std(axis=0)
    z = np.zeros(table.shape[1])
    nz = std2 > 0.0
    z[nz] = (table[target_row, nz] - mean2[nz]) / std2[nz]
    return float(np.exp(z.mean()))


def energy_table(designs: dict, worlds) -> dict:
    """Mean and population std of oracle energies per named design set.

    ``designs`` maps a model name to one sequence per world record, in
    the same order as ``worlds``.
    """
    by_model = {}
    for name, seqs in designs.items():
        if len(seqs) != len(worlds):
            raise ShapeError(f"design set '{name}' has {len(seqs)} entries for "
                             f"{len(worlds)} structures")
        energies = np.array([potts_energy(w.structure, w.potts, seq)
                             for w, seq in zip(worlds, seqs)])
        by_model[name] = {"mean": float(energies.mean()),
                          "std": float(energies.std()),
                          "n": int(energies.size)}
    return by_model


def fold_aggregate(reports) -> MetricsReport:
    """Pool fold predictions and recompute the ddG suite on the union."""
    reports = list(reports)
    if not reports:
        raise DegenerateInputError("fold aggregation needs at least one report")
    preds = np.concatenate([r.data["preds"] for r in reports])
    labels = np.concatenate([r.data["labels"] for r in reports])
    groups = [g for r in reports for g in r.data["groups"]]
    return ddg_metrics(preds, labels, groups)
