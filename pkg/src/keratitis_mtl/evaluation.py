"""ROC analysis, Youden thresholds, confusion matrices, metrics and fold aggregation."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .core.types import JOINT_DISPLAY_ORDER, TASKS, PredictionRecord, joint_index_array

Z_95 = 1.959964
METRIC_NAMES = ("acc", "balanced_acc", "f1", "precision", "recall", "auroc")


class UndefinedCurveError(ValueError):
    """ROC quantities need both a positive and a negative case."""


@dataclass(frozen=True)
class RocCurve:
    """Operating points for the rule ``score >= threshold``.

    The first point is the +inf sentinel (0, 0) and the last the -inf
    sentinel (1, 1); in between, one point per unique score, descending.
    """

    thresholds: np.ndarray
    tpr: np.ndarray
    fpr: np.ndarray

    def points(self):
        return list(zip(self.thresholds.tolist(), self.tpr.tolist(), self.fpr.tolist()))


def _binary_inputs(scores, labels):
    s = np.asarray(scores, dtype=np.float64).ravel()
    y = np.asarray(labels).ravel().astype(int)
    if s.shape != y.shape:
        raise ValueError("scores and labels differ in length")
    n_pos = int(y.sum())
    if n_pos == 0 or n_pos == len(y):
        raise UndefinedCurveError("labels contain a single class")
    return s, y, n_pos, len(y) - n_pos


def roc_curve(scores, labels) -> RocCurve:
    s, y, n_pos, n_neg = _binary_inputs(scores, labels)
    order = np.argsort(-s, kind="mergesort")
    s, y = s[order], y[order]
    last_of_run = np.r_[s[1:] != s[:-1], True]
    tp = np.cumsum(y)[last_of_run]
    fp = np.cumsum(1 - y)[last_of_run]
    thresholds = np.r_[np.inf, s[last_of_run], -np.inf]
    tpr = np.r_[0.0, tp / n_pos, 1.0]
    fpr = np.r_[0.0, fp / n_neg, 1.0]
    return RocCurve(thresholds, tpr, fpr)


def auroc(scores, labels) -> float:
    """Trapezoidal area under the ROC curve (ties give half credit)."""
    c = roc_curve(scores, labels)
    return float(np.sum(np.diff(c.fpr) * (c.tpr[1:] + c.tpr[:-1]) / 2.0))


def youden_threshold(curve: RocCurve) -> tuple[float, float]:
    """Threshold maximising J = TPR - FPR over the unique-score points.

    Ties go to the higher TPR, then to the lower threshold.
    """
    t, tpr, fpr = curve.thresholds[1:-1], curve.tpr[1:-1], curve.fpr[1:-1]
    j = tpr - fpr
    # Thresholds are descending, so lexsort's last key picks max J, then max TPR,
    # then the largest index (lowest threshold).
    best = np.lexsort((np.arange(len(t)), tpr, j))[-1]
    return float(t[best]), float(j[best])


def apply_thresholds(records: list[PredictionRecord], thresholds=(0.5, 0.5, 0.5)) -> np.ndarray:
    """(N, 3) predictions: 1 where score >= threshold for that task."""
    scores = np.array([r.infection_scores for r in records]).reshape(-1, 3)
    if np.isnan(scores).any():
        raise ValueError("records are missing infection scores")
    return (scores >= np.asarray(thresholds, dtype=np.float64)).astype(int)


def confusion(predictions, labels, task: int | str | None = None) -> np.ndarray:
    """2x2 counts [[TN, FP], [FN, TP]] (rows actual, columns predicted)."""
    p = np.asarray(predictions, dtype=int)
    y = np.asarray(labels, dtype=int)
    if p.shape != y.shape:
        raise ValueError("predictions and labels differ in shape")
    if task is not None:
        t = TASKS.index(task) if isinstance(task, str) else task
        p, y = p[:, t], y[:, t]
    cm = np.zeros((2, 2), dtype=np.int64)
    np.add.at(cm, (y, p), 1)
    return cm


def joint_confusion(predictions, labels) -> np.ndarray:
    """8x8 counts over joint states, rows/columns in H,B,F,A,BF,FA,BA,BFA order."""
    p = np.asarray(predictions, dtype=int)
    y = np.asarray(labels, dtype=int)
    if p.shape != y.shape or p.ndim != 2 or p.shape[1] != 3:
        raise ValueError("expected matching (N, 3) prediction and label arrays")
    position = np.argsort(JOINT_DISPLAY_ORDER)  # joint index -> display position
    cm = np.zeros((8, 8), dtype=np.int64)
    np.add.at(cm, (position[joint_index_array(y)], position[joint_index_array(p)]), 1)
    return cm


def marginalize_joint(joint: np.ndarray, task: int | str) -> np.ndarray:
    t = TASKS.index(task) if isinstance(task, str) else task
    bit = np.array([(JOINT_DISPLAY_ORDER[i] >> t) & 1 for i in range(8)])
    out = np.zeros((2, 2), dtype=joint.dtype)
    for a in (0, 1):
        for b in (0, 1):
            out[a, b] = joint[np.ix_(bit == a, bit == b)].sum()
    return out


@dataclass
class MetricsBundle:
    acc: float
    balanced_acc: float
    f1: float
    precision: float
    recall: float
    auroc: float
    mae: float = math.nan
    per_class_recall: tuple[float, ...] = ()
    per_class_f1: tuple[float, ...] = ()
    undefined: tuple[str, ...] = ()

    def as_dict(self) -> dict[str, float]:
        out = {m: getattr(self, m) for m in METRIC_NAMES}
        if not math.isnan(self.mae):
            out["mae"] = self.mae
        return out


def _ratio(num: float, den: float) -> float:
    return num / den if den > 0 else math.nan


def _f1(p: float, r: float) -> float:
    if math.isnan(p) or math.isnan(r):
        return math.nan
    return 2 * p * r / (p + r) if p + r > 0 else 0.0


def _class_stats(pred, true, k):
    recalls, precisions, f1s = [], [], []
    for c in range(k):
        tp = np.sum((pred == c) & (true == c))
        rec = _ratio(tp, np.sum(true == c))
        prec = _ratio(tp, np.sum(pred == c))
        recalls.append(rec)
        precisions.append(prec)
        f1s.append(_f1(prec, rec))
    return recalls, precisions, f1s


def _nanmean(values) -> float:
    v = [x for x in values if not math.isnan(x)]
    return float(np.mean(v)) if v else math.nan


def metrics_bundle(predictions, labels, scores=None, task_kind: str = "binary") -> MetricsBundle:
    """Metric bundle for one task.

    Binary: ratio metrics for the positive class; BA is the mean of the two
    class recalls. Multiclass: macro precision/recall/F1 over classes present
    in the labels, MAE between bin indices and one-vs-rest macro AUROC from
    an (N, K) probability matrix. Undefined ratios are NaN and listed in
    ``undefined``.
    """
    pred = np.asarray(predictions, dtype=int).ravel()
    true = np.asarray(labels, dtype=int).ravel()
    if pred.shape != true.shape:
        raise ValueError("predictions and labels differ in length")
    n = len(true)
    acc = _ratio(np.sum(pred == true), n)
    if task_kind == "binary":
        recalls, precisions, f1s = _class_stats(pred, true, 2)
        precision, recall, f1 = precisions[1], recalls[1], f1s[1]
        ba = (recalls[0] + recalls[1]) / 2
        auc = math.nan
        if scores is not None:
            try:
                auc = auroc(scores, true)
            except UndefinedCurveError:
                pass
        mae = math.nan
    elif task_kind == "multiclass":
        k = int(max(true.max(initial=0), pred.max(initial=0))) + 1
        if scores is not None:
            k = max(k, np.asarray(scores).shape[1])
        recalls, precisions, f1s = _class_stats(pred, true, k)
        present = [c for c in range(k) if np.any(true == c)]
        recall = _nanmean([recalls[c] for c in present])
        precision = _nanmean([precisions[c] for c in present])
        f1 = _nanmean([f1s[c] for c in present])
        ba = recall
        mae = float(np.mean(np.abs(pred - true))) if n else math.nan
        auc = math.nan
        if scores is not None:
            s = np.asarray(scores, dtype=np.float64)
            aucs = []
            for c in present:
                try:
                    aucs.append(auroc(s[:, c], true == c))
                except UndefinedCurveError:
                    pass
            auc = float(np.mean(aucs)) if aucs else math.nan
    else:
        raise ValueError("task_kind must be 'binary' or 'multiclass'")
    bundle = MetricsBundle(acc, ba, f1, precision, recall, auc, mae,
                           tuple(recalls), tuple(f1s))
    bundle.undefined = tuple(m for m in METRIC_NAMES if math.isnan(getattr(bundle, m)))
    return bundle


@dataclass
class MetricSummary:
    mean: float
    sd: float
    ci_low: float
    ci_high: float
    n: int
    excluded: int


@dataclass
class FoldAggregate:
    metrics: dict[str, MetricSummary]
    matrices: dict[str, np.ndarray] = field(default_factory=dict)
    k: int = 0


def summarize(values, k: int | None = None) -> MetricSummary:
    """Mean, sample SD and normal 95% CI mean +/- z*sd/sqrt(k); NaNs are excluded.

    ``k`` defaults to the number of defined values.
    """
    vals = [float(v) for v in values]
    defined = [v for v in vals if not math.isnan(v)]
    excluded = len(vals) - len(defined)
    if len(defined) < 2:
        m = defined[0] if defined else math.nan
        return MetricSummary(m, math.nan, math.nan, math.nan, len(defined), excluded)
    arr = np.array(defined)
    mean = math.fsum(defined) / len(defined)
    sd = math.sqrt(math.fsum((arr - mean) ** 2) / (len(defined) - 1))
    denom = math.sqrt(k if k is not None else len(defined))
    half = Z_95 * sd / denom
    return MetricSummary(mean, sd, mean - half, mean + half, len(defined), excluded)


def aggregate_folds(bundles: list[MetricsBundle], matrices: list[dict[str, np.ndarray]] | None = None,
                    k: int | None = None) -> FoldAggregate:
    """Across-fold summaries of every metric plus element-wise mean matrices."""
    k = len(bundles) if k is None else k
    if k < 2 or len(bundles) < 2:
        raise ValueError("confidence intervals need at least two folds")
    names = list(METRIC_NAMES)
    if any(not math.isnan(b.mae) for b in bundles):
        names.append("mae")
    summaries = {}
    for name in names:
        values = [getattr(b, name) for b in bundles]
        n_defined = sum(not math.isnan(v) for v in values)
        summaries[name] = summarize(values, k=n_defined if n_defined < k else k)
    mean_mats = {}
    if matrices:
        for key in matrices[0]:
            stack = np.stack([np.asarray(m[key], dtype=np.float64) for m in matrices])
            mean_mats[key] = stack.sum(axis=0) / len(matrices)
    return FoldAggregate(summaries, mean_mats, k)
