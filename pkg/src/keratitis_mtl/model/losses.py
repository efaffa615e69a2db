"""Class/hospital weights and the training losses.

The clinical loss mixes a class-weighted BCE with a cost-weighted BCE:

    L = 0.8 * mean_{n,t}[ -C_t y ln p - (1 - y) ln(1 - p) ]
      + 0.2 * sum_t H_t * mean_n[ -y ln p - (1 - y) ln(1 - p) ]

``C_t`` multiplies only the positive-label term of task ``t``; ``H`` is the
normalised treatment-cost vector over (bacteria, fungi, amoeba).
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
from scipy.special import expit

from ..core.types import N_AGE_BINS, TASKS, DatasetManifest, ValidationError

log = logging.getLogger(__name__)

CLAMP_EPS = 1e-12
DEFAULT_PRICES = (45.2, 203.0, 95.5)
CLINICAL_MIX = (0.8, 0.2)


def hospital_weights(prices=DEFAULT_PRICES, flasks=(1, 1, 1), months=(1.0, 1.0, 1.0)) -> np.ndarray:
    """Treatment cost per infection (price x flasks x months), normalised to sum to 1."""
    arrays = [np.asarray(v, dtype=np.float64) for v in (prices, flasks, months)]
    for name, a in zip(("prices", "flasks", "months"), arrays):
        if a.shape != (3,):
            raise ValueError(f"{name} must have 3 entries")
        if np.any(~np.isfinite(a)) or np.any(a <= 0):
            raise ValueError(f"{name} must be positive")
    cost = arrays[0] * arrays[1] * arrays[2]
    return cost / cost.sum()


def class_weights(manifest: DatasetManifest) -> np.ndarray:
    """Per-task positive-term weight N_neg / N_pos."""
    y = manifest.labels()
    pos = y.sum(axis=0)
    neg = len(y) - pos
    for t, p in zip(TASKS, pos):
        if p == 0:
            raise ValidationError(f"task {t!r} has no positive cases")
    return neg / pos


def sex_class_weight(manifest: DatasetManifest) -> np.ndarray:
    sex = np.array([c.sex for c in manifest.cases])
    pos = sex.sum()
    if pos == 0:
        raise ValidationError("no female cases")
    return np.array([(len(sex) - pos) / pos])


def age_class_weights(manifest: DatasetManifest) -> np.ndarray:
    """Balanced weights N / (4 N_c); absent bins get weight 1."""
    counts = np.bincount([c.age_bin for c in manifest.cases], minlength=N_AGE_BINS)
    w = np.ones(N_AGE_BINS)
    present = counts > 0
    w[present] = counts.sum() / (N_AGE_BINS * counts[present])
    return w


def _clamp(p: np.ndarray) -> np.ndarray:
    clipped = np.clip(p, CLAMP_EPS, 1 - CLAMP_EPS)
    if np.any(clipped != p):
        log.debug("clamped %d probabilities to [%g, 1-%g]",
                  int(np.sum(clipped != p)), CLAMP_EPS, CLAMP_EPS)
    return clipped


def _as_2d(scores, labels):
    p = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels, dtype=np.float64)
    if p.shape != y.shape:
        raise ValueError(f"scores {p.shape} and labels {y.shape} differ in shape")
    if p.ndim == 1:
        p, y = p[:, None], y[:, None]
    return p, y


def weighted_bce(scores, labels, weights=1.0) -> float:
    """Mean over samples and tasks of -[w y ln p + (1 - y) ln(1 - p)]."""
    p, y = _as_2d(scores, labels)
    p = _clamp(p)
    w = np.broadcast_to(np.asarray(weights, dtype=np.float64), (p.shape[1],))
    terms = -(w * y * np.log(p) + (1 - y) * np.log1p(-p))
    return float(terms.mean())


@dataclass(frozen=True)
class LossSpec:
    """Loss weighting.

    ``class_weights`` are per output column: positive-term weights for the
    sigmoid heads, per-class weights for the age head. Setting
    ``hospital_weights`` switches the infection heads to the clinical loss.
    """

    class_weights: tuple[float, ...] | None = None
    hospital_weights: tuple[float, ...] | None = None
    mix: tuple[float, float] = CLINICAL_MIX

    def __post_init__(self):
        if self.class_weights is not None:
            cw = tuple(float(v) for v in np.ravel(self.class_weights))
            if any(v <= 0 for v in cw):
                raise ValueError("class weights must be positive")
            object.__setattr__(self, "class_weights", cw)
        if self.hospital_weights is not None:
            hw = tuple(float(v) for v in np.ravel(self.hospital_weights))
            if any(v < 0 for v in hw) or abs(sum(hw) - 1.0) > 1e-9:
                raise ValueError("hospital weights must be a simplex (sum to 1)")
            object.__setattr__(self, "hospital_weights", hw)

    @property
    def clinical(self) -> bool:
        return self.hospital_weights is not None


def clinical_loss(scores, labels, spec: LossSpec) -> float:
    if spec.hospital_weights is None:
        raise ValueError("clinical loss needs hospital weights")
    p, y = _as_2d(scores, labels)
    p = _clamp(p)
    n_tasks = p.shape[1]
    cw = np.ones(n_tasks) if spec.class_weights is None else np.asarray(spec.class_weights)
    hw = np.asarray(spec.hospital_weights)
    if cw.shape != (n_tasks,) or hw.shape != (n_tasks,):
        raise ValueError("weights must have one entry per task")
    pos = -y * np.log(p)
    neg = -(1 - y) * np.log1p(-p)
    class_term = (cw * pos + neg).mean()
    per_task_bce = (pos + neg).mean(axis=0)
    hospital_term = float(np.dot(hw, per_task_bce))
    a, b = spec.mix
    return float(a * class_term + b * hospital_term)


def cross_entropy(probs, labels, class_weights=None) -> float:
    """Batch mean of -w_label ln p_label."""
    probs = np.asarray(probs, dtype=np.float64)
    if probs.ndim == 1:
        probs = probs[None, :]
    labels = np.atleast_1d(np.asarray(labels, dtype=int))
    if len(labels) != len(probs):
        raise ValueError("probs and labels differ in length")
    k = probs.shape[1]
    w = np.ones(k) if class_weights is None else np.asarray(class_weights, dtype=np.float64)
    p = _clamp(probs[np.arange(len(labels)), labels])
    return float(np.mean(-w[labels] * np.log(p)))


# ----------------------------------------------------- logit-space objectives

def sigmoid_coefficients(spec: LossSpec, n_tasks: int) -> tuple[np.ndarray, np.ndarray]:
    """Per-task (alpha, beta) with loss = mean_n sum_t[-alpha y ln p - beta (1-y) ln(1-p)]."""
    cw = np.ones(n_tasks) if spec.class_weights is None else np.asarray(spec.class_weights)
    if cw.shape != (n_tasks,):
        raise ValueError(f"expected {n_tasks} class weights, got {cw.shape[0]}")
    if not spec.clinical:
        return cw / n_tasks, np.full(n_tasks, 1.0 / n_tasks)
    hw = np.asarray(spec.hospital_weights)
    if hw.shape != (n_tasks,):
        raise ValueError(f"expected {n_tasks} hospital weights, got {hw.shape[0]}")
    a, b = spec.mix
    return a * cw / n_tasks + b * hw, a / n_tasks + b * hw


def sigmoid_objective(logits, y, alpha, beta) -> tuple[float, np.ndarray, np.ndarray]:
    """Loss, d loss / d logits and probabilities for sigmoid outputs."""
    p = expit(logits)
    pc = _clamp(p)
    n = logits.shape[0]
    loss = float((-(alpha * y * np.log(pc)) - beta * (1 - y) * np.log1p(-pc)).sum() / n)
    grad = (-alpha * y * (1 - p) + beta * (1 - y) * p) / n
    return loss, grad, p


def softmax_objective(logits, labels, class_weights) -> tuple[float, np.ndarray, np.ndarray]:
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=1, keepdims=True)
    n = logits.shape[0]
    w = np.asarray(class_weights, dtype=np.float64)[labels]
    pl = _clamp(p[np.arange(n), labels])
    loss = float(np.mean(-w * np.log(pl)))
    grad = p.copy()
    grad[np.arange(n), labels] -= 1.0
    grad *= (w / n)[:, None]
    return loss, grad, p
