"""Subgroup statistics: t-test, one-way ANOVA, Holm correction, correlation and KDE."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.special import betainc

from .core.types import N_AGE_BINS, TASKS, DatasetManifest, PredictionRecord
from .evaluation import apply_thresholds, metrics_bundle
from .splitter import FoldAssignment

ATTRIBUTES = ("sex", "age_bin")
SUBGROUP_METRICS = ("f1", "recall", "precision", "balanced_acc", "acc", "auroc")
METRIC_LABELS = {"f1": "F1", "recall": "Recall", "precision": "Precision",
                 "balanced_acc": "BA", "acc": "ACC", "auroc": "AUROC"}
ATTRIBUTE_LABELS = {"sex": "Sex", "age_bin": "Age"}
STATS_HEADER = ("attribute", "task", "metric", "statistic", "df", "p_raw",
                "p_corrected", "excluded_folds")


class UndefinedTestError(ValueError):
    """Raised when a test's preconditions (sample size, variance) fail."""


@dataclass
class TestResult:
    statistic: float
    df: tuple[float, ...]
    p_raw: float
    p_corrected: float = math.nan
    family: str = ""


def _t_sf2(t: float, df: float) -> float:
    """Two-sided p-value of Student's t distribution."""
    return float(betainc(df / 2.0, 0.5, df / (df + t * t)))


def _f_sf(f: float, d1: float, d2: float) -> float:
    return float(betainc(d2 / 2.0, d1 / 2.0, d2 / (d2 + d1 * f)))


def _sample(values, name: str) -> np.ndarray:
    a = np.asarray(values, dtype=np.float64).ravel()
    if len(a) < 2:
        raise UndefinedTestError(f"{name} needs at least 2 values")
    if not np.all(np.isfinite(a)):
        raise UndefinedTestError(f"{name} contains non-finite values")
    return a


def t_test(group_a, group_b, flavor: str = "welch") -> TestResult:
    """Two-sided two-sample t-test (Welch by default, or pooled 'student').

    Equal means with zero variance give t = 0, p = 1; unequal means with zero
    variance are a degenerate-variance error.
    """
    a, b = _sample(group_a, "group_a"), _sample(group_b, "group_b")
    na, nb = len(a), len(b)
    ma, mb = a.mean(), b.mean()
    va, vb = a.var(ddof=1), b.var(ddof=1)
    if flavor == "student":
        df = na + nb - 2.0
        se2 = ((na - 1) * va + (nb - 1) * vb) / df * (1.0 / na + 1.0 / nb)
    elif flavor == "welch":
        se2 = va / na + vb / nb
        df = se2 ** 2 / ((va / na) ** 2 / (na - 1) + (vb / nb) ** 2 / (nb - 1)) if se2 > 0 else na + nb - 2.0
    else:
        raise ValueError("flavor must be 'welch' or 'student'")
    if se2 == 0:
        if ma == mb:
            return TestResult(0.0, (float(df),), 1.0)
        raise UndefinedTestError("degenerate variance: both groups are constant")
    t = float((ma - mb) / math.sqrt(se2))
    return TestResult(t, (float(df),), _t_sf2(t, df))


def anova_oneway(groups) -> TestResult:
    """One-way ANOVA F test with (k - 1, N - k) degrees of freedom."""
    arrays = [_sample(g, f"group {i}") for i, g in enumerate(groups)]
    if len(arrays) < 2:
        raise UndefinedTestError("ANOVA needs at least 2 groups")
    allv = np.concatenate(arrays)
    grand = allv.mean()
    ssb = sum(len(a) * (a.mean() - grand) ** 2 for a in arrays)
    ssw = sum(((a - a.mean()) ** 2).sum() for a in arrays)
    d1, d2 = len(arrays) - 1.0, len(allv) - len(arrays) * 1.0
    if ssw == 0:
        if ssb == 0:
            return TestResult(0.0, (d1, d2), 1.0)
        raise UndefinedTestError("degenerate variance: every group is constant")
    f = float((ssb / d1) / (ssw / d2))
    return TestResult(f, (d1, d2), _f_sf(f, d1, d2))


def holm_bonferroni(p_values) -> list[float]:
    """Holm step-down adjusted p-values, returned in input order."""
    p = np.asarray(p_values, dtype=np.float64).ravel()
    if np.any(~np.isfinite(p)) or np.any((p < 0) | (p > 1)):
        raise ValueError("p-values must lie in [0, 1]")
    m = len(p)
    order = np.argsort(p, kind="mergesort")
    adjusted = np.empty(m)
    running = 0.0
    for i, idx in enumerate(order):
        running = max(running, min(1.0, (m - i) * p[idx]))
        adjusted[idx] = running
    return adjusted.tolist()


# ------------------------------------------------------------ subgroup tables

@dataclass
class SubgroupCell:
    attribute: str
    task: str
    metric: str
    values: dict[int, list[float]]  # subgroup value -> per-fold metric series
    sizes: dict[int, list[int]]  # subgroup value -> per-fold test-case counts
    excluded_folds: int
    result: TestResult | None = None  # None renders as "-"
    note: str = ""


@dataclass
class SubgroupTable:
    attribute: str
    cells: list[SubgroupCell] = field(default_factory=list)

    def cell(self, task: str, metric: str) -> SubgroupCell:
        for c in self.cells:
            if c.task == task and c.metric == metric:
                return c
        raise KeyError((task, metric))


def _fold_thresholds(thresholds, fold: int):
    if isinstance(thresholds, dict):
        return thresholds[fold]
    return thresholds


def subgroup_analysis(records: list[PredictionRecord], manifest: DatasetManifest,
                      assignment: FoldAssignment | None, thresholds=(0.5, 0.5, 0.5),
                      attribute: str = "sex", flavor: str = "welch",
                      metrics=SUBGROUP_METRICS) -> SubgroupTable:
    """Per-fold subgroup metrics, a test per (task, metric), Holm per task.

    ``thresholds`` is one per-task triple or a dict fold -> triple. Only
    test-role records are used. A fold whose subgroup is empty, or whose
    metric is undefined there, is excluded from that cell and counted; an
    AUROC undefined in any fold makes the whole cell "-".
    """
    if attribute not in ATTRIBUTES:
        raise ValueError(f"attribute must be one of {ATTRIBUTES}")
    cases = manifest.by_id()
    levels = (0, 1) if attribute == "sex" else tuple(range(N_AGE_BINS))
    by_fold: dict[int, list[PredictionRecord]] = {}
    for r in records:
        if r.split_role != "test":
            continue
        if assignment is not None:
            role = assignment.rounds[r.fold].role_of(cases[r.case_id].group_id)
            if role != "test":
                raise ValueError(f"{r.case_id} is labelled test but is {role} in round {r.fold}")
        by_fold.setdefault(r.fold, []).append(r)
    folds = sorted(by_fold)

    # per fold, level, task -> bundle (None when the subgroup is empty)
    bundles: dict[tuple[int, int, int], object] = {}
    sizes: dict[tuple[int, int], int] = {}
    for fold in folds:
        recs = by_fold[fold]
        preds = apply_thresholds(recs, _fold_thresholds(thresholds, fold))
        labels = np.array([cases[r.case_id].labels.as_array() for r in recs])
        scores = np.array([r.infection_scores for r in recs])
        attr = np.array([getattr(cases[r.case_id], attribute) for r in recs])
        for level in levels:
            mask = attr == level
            sizes[fold, level] = int(mask.sum())
            for t in range(len(TASKS)):
                bundles[fold, level, t] = (metrics_bundle(preds[mask, t], labels[mask, t], scores[mask, t])
                                           if mask.any() else None)

    table = SubgroupTable(attribute)
    for t, task in enumerate(TASKS):
        family: list[SubgroupCell] = []
        for metric in metrics:
            values = {lv: [] for lv in levels}
            counts = {lv: [] for lv in levels}
            excluded = 0
            auroc_undefined = False
            for fold in folds:
                row = {}
                for lv in levels:
                    b = bundles[fold, lv, t]
                    v = math.nan if b is None else getattr(b, metric)
                    if metric == "auroc" and b is not None and math.isnan(v):
                        auroc_undefined = True
                    row[lv] = v
                if any(math.isnan(v) for v in row.values()):
                    excluded += 1
                    continue
                for lv in levels:
                    values[lv].append(row[lv])
                    counts[lv].append(sizes[fold, lv])
            cell = SubgroupCell(attribute, task, metric, values, counts, excluded)
            if auroc_undefined:
                cell.note = "AUROC undefined for a single-class subgroup"
            else:
                try:
                    series = [values[lv] for lv in levels]
                    cell.result = (t_test(*series, flavor=flavor) if attribute == "sex"
                                   else anova_oneway(series))
                    cell.result.family = f"{task}/{attribute}"
                except UndefinedTestError as exc:
                    cell.note = str(exc)
            family.append(cell)
        tested = [c for c in family if c.result is not None]
        if tested:
            for c, p in zip(tested, holm_bonferroni([c.result.p_raw for c in tested])):
                c.result.p_corrected = p
        table.cells.extend(family)
    return table


def table_v_grid(tables: list[SubgroupTable], metrics=SUBGROUP_METRICS) -> dict:
    """Corrected p-values laid out as rows = metrics, columns = (task, attribute).

    Columns run Age then Sex within each infection. Cells are floats, or "-"
    for untested or undefined cells.
    """
    ordered = sorted(tables, key=lambda tab: ATTRIBUTES[::-1].index(tab.attribute))
    columns = [(task, tab.attribute) for task in TASKS for tab in ordered]
    rows = []
    lookup = {(c.task, c.attribute, c.metric): c for tab in tables for c in tab.cells}
    for metric in metrics:
        cells = []
        for task, attr in columns:
            c = lookup.get((task, attr, metric))
            cells.append("-" if c is None or c.result is None else c.result.p_corrected)
        rows.append({"metric": METRIC_LABELS[metric], "cells": cells})
    return {"columns": [{"task": task, "attribute": ATTRIBUTE_LABELS[a]} for task, a in columns],
            "rows": rows}


def _fmt(x: float) -> str:
    return format(float(x), ".17g")


def write_stats_csv(tables: list[SubgroupTable], path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(STATS_HEADER)
        for tab in tables:
            for c in tab.cells:
                if c.result is None:
                    w.writerow([c.attribute, c.task, c.metric, "-", "-", "-", "-", c.excluded_folds])
                else:
                    r = c.result
                    w.writerow([c.attribute, c.task, c.metric, _fmt(r.statistic),
                                ";".join(_fmt(d) for d in r.df), _fmt(r.p_raw),
                                _fmt(r.p_corrected), c.excluded_folds])


# ----------------------------------------------------------------- EDA tools

CORRELATION_COLUMNS = ("bacteria", "fungi", "amoeba", "sex", "age_bin")


def feature_label_correlation(manifest: DatasetManifest) -> tuple[np.ndarray, np.ndarray]:
    """Pearson correlations among labels and demographics.

    Returns (matrix, undefined) where ``undefined`` marks entries involving a
    zero-variance column (those entries are NaN).
    """
    data = np.array([[getattr(c, name) for name in CORRELATION_COLUMNS]
                     for c in manifest.cases], dtype=np.float64)
    if len(data) < 2:
        raise ValueError("correlation needs at least 2 cases")
    centred = data - data.mean(axis=0)
    norms = np.sqrt((centred ** 2).sum(axis=0))
    zero = norms == 0
    safe = np.where(zero, 1.0, norms)
    corr = (centred.T @ centred) / np.outer(safe, safe)
    undefined = zero[:, None] | zero[None, :]
    corr[undefined] = np.nan
    np.fill_diagonal(corr, np.where(zero, np.nan, 1.0))
    return np.clip(corr, -1.0, 1.0), undefined


def silverman_bandwidth(values) -> float:
    x = np.asarray(values, dtype=np.float64).ravel()
    if len(x) < 2:
        raise ValueError("bandwidth needs at least 2 values")
    sd = x.std(ddof=1)
    if sd == 0 or not np.isfinite(sd):
        raise ValueError("bandwidth undefined for zero standard deviation")
    return 1.06 * sd * len(x) ** (-0.2)


def kde_density(values, eval_points, bandwidth: float | None = None) -> np.ndarray:
    """Gaussian KDE with Silverman's rule-of-thumb bandwidth by default."""
    x = np.asarray(values, dtype=np.float64).ravel()
    h = silverman_bandwidth(x) if bandwidth is None else float(bandwidth)
    pts = np.asarray(eval_points, dtype=np.float64)
    u = (pts.reshape(-1, 1) - x) / h
    dens = np.exp(-0.5 * u * u).sum(axis=1) / (len(x) * h * math.sqrt(2 * math.pi))
    return dens.reshape(pts.shape)
