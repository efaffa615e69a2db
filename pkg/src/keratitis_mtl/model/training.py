"""Mini-batch training with trunk freezing and early stopping, and prediction."""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from ..core.imaging import AugmentConfig, augment, normalize_zscore, prepare_image
from ..core.types import DatasetManifest, PredictionRecord, ValidationError
from ..splitter import FoldAssignment
from .losses import LossSpec
from .network import (
    ModelConfig,
    Network,
    dropout_mask,
    forward,
    init_network,
    loss_and_grad,
    loss_value,
    targets_for,
)
from .optim import AdamState, adam_step

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 200
    batch_size: int = 16
    learning_rate: float = 1e-3
    weight_decay: float = 1e-8
    freeze_epochs: int = 10
    early_stop_patience: int = 20
    seed: int = 0


@dataclass(frozen=True)
class EpochLog:
    epoch: int
    train_loss: float
    val_loss: float
    frozen: bool


@dataclass
class TrainResult:
    network: Network  # best validation-loss parameters
    final_network: Network
    log: list[EpochLog]
    best_epoch: int  # 0 means the initialisation was never beaten
    initial_val_loss: float
    stopped_early: bool = False
    initial_network: Network | None = None


def prepare_inputs(manifest: DatasetManifest, config: ModelConfig) -> np.ndarray:
    """Stack payloads into a model input array (images resized, not normalised)."""
    mode = manifest.payload_mode
    if mode != config.payload_mode:
        raise ValidationError(f"payload mode {mode!r} does not match {config.trunk!r} trunk")
    if mode == "features":
        return manifest.stack_payloads()
    return np.stack([prepare_image(c.payload, config.image_size) for c in manifest.cases])


def _finish_images(x: np.ndarray, config: ModelConfig) -> np.ndarray:
    return normalize_zscore(x) if config.payload_mode == "image" else x


def _batches(n: int, batch_size: int, rng: np.random.Generator, min_size: int):
    order = rng.permutation(n)
    cuts = list(range(0, n, batch_size))
    batches = [order[c:c + batch_size] for c in cuts]
    if len(batches) > 1 and len(batches[-1]) < min_size:
        tail = batches.pop()
        batches[-1] = np.concatenate([batches[-1], tail])
    return batches


def train(manifest: DatasetManifest, assignment: FoldAssignment, round_index: int,
          model_config: ModelConfig, train_config: TrainConfig, loss_spec: LossSpec,
          augment_config: AugmentConfig = AugmentConfig(), callback=None) -> TrainResult:
    """Train on the round's train role, select on its validation loss.

    ``callback(epoch, network)`` is called after every epoch with the
    current (not best) parameters.
    """
    train_set = assignment.role_manifest(manifest, round_index, "train")
    val_set = assignment.role_manifest(manifest, round_index, "validation")
    if len(train_set) == 0 or len(val_set) == 0:
        raise ValidationError(f"round {round_index}: empty train or validation split")
    return fit(train_set, val_set, model_config, train_config, loss_spec,
               augment_config=augment_config, callback=callback)


def fit(train_set: DatasetManifest, val_set: DatasetManifest, model_config: ModelConfig,
        train_config: TrainConfig, loss_spec: LossSpec,
        augment_config: AugmentConfig = AugmentConfig(), callback=None) -> TrainResult:
    cfg, tc = model_config, train_config
    s_init, s_shuffle, s_drop, s_aug = np.random.SeedSequence(tc.seed).spawn(4)
    rng_shuffle = np.random.default_rng(s_shuffle)
    rng_drop = np.random.default_rng(s_drop)
    rng_aug = np.random.default_rng(s_aug)

    x_train = prepare_inputs(train_set, cfg)
    y_train = targets_for(cfg, train_set)
    x_val = _finish_images(prepare_inputs(val_set, cfg), cfg)
    y_val = targets_for(cfg, val_set)
    image_mode = cfg.payload_mode == "image"

    net = init_network(cfg, int(s_init.generate_state(1)[0]))
    state = AdamState()
    initial = net.copy()
    best = net.copy()
    best_val = initial_val = loss_value(net, x_val, y_val, loss_spec)
    best_epoch, wait, stopped = 0, 0, False
    history: list[EpochLog] = []
    trunk = set(net.trunk_keys())
    min_batch = 2 if cfg.use_batchnorm else 1

    for epoch in range(1, tc.epochs + 1):
        frozen = epoch <= tc.freeze_epochs
        losses, sizes = [], []
        for idx in _batches(len(x_train), tc.batch_size, rng_shuffle, min_batch):
            xb = x_train[idx]
            if image_mode:
                xb = np.stack([augment(img, rng_aug, augment_config) for img in xb])
                xb = normalize_zscore(xb)
            mask = None
            if cfg.dropout_p > 0:
                mask = dropout_mask(rng_drop, (len(idx), cfg.feature_width), cfg.dropout_p)
            loss, grads, buffers = loss_and_grad(net, xb, y_train[idx], loss_spec,
                                                 mask=mask, frozen_trunk=frozen)
            params, state = adam_step(net.params, grads, state, tc.learning_rate,
                                      tc.weight_decay, skip=trunk if frozen else ())
            net = Network(cfg, params, buffers)
            losses.append(loss)
            sizes.append(len(idx))
        train_loss = float(np.average(losses, weights=sizes))
        val_loss = loss_value(net, x_val, y_val, loss_spec)
        history.append(EpochLog(epoch, train_loss, val_loss, frozen))
        if callback is not None:
            callback(epoch, net)
        if val_loss < best_val:
            best_val, best, best_epoch, wait = val_loss, net.copy(), epoch, 0
        else:
            wait += 1
            if wait >= max(tc.early_stop_patience, 1):
                stopped = True
                log.debug("early stop at epoch %d (best %d)", epoch, best_epoch)
                break
    return TrainResult(best, net, history, best_epoch, initial_val, stopped, initial)


def predict(net: Network, manifest: DatasetManifest, *, fold: int = 0,
            roles: dict[str, str] | None = None, role_filter=None,
            batch_size: int = 256) -> list[PredictionRecord]:
    """Inference-mode predictions, one record per case.

    ``roles`` maps case_id to split role (default: every case is 'test');
    ``role_filter`` keeps only the listed roles.
    """
    cfg = net.config
    cases = manifest.cases
    if roles is not None and role_filter is not None:
        cases = [c for c in cases if roles[c.case_id] in role_filter]
    if not cases:
        return []
    sub = DatasetManifest(cases, manifest.metadata)
    x = _finish_images(prepare_inputs(sub, cfg), cfg)
    out = np.concatenate([forward(net, x[i:i + batch_size])
                          for i in range(0, len(x), batch_size)])
    records = []
    for case, row in zip(cases, out):
        role = roles[case.case_id] if roles is not None else "test"
        kw = {}
        if cfg.variant in ("Mv1", "Mv2"):
            kw = dict(score_bacteria=float(row[0]), score_fungi=float(row[1]),
                      score_amoeba=float(row[2]))
        elif cfg.variant == "ST":
            kw = {f"score_{cfg.task}": float(row[0])}
        elif cfg.variant == "Sex":
            kw = dict(score_sex=float(row[0]))
        else:
            kw = dict(probs_age=tuple(float(v) for v in row))
        records.append(PredictionRecord(case.case_id, fold, role, **kw))
    return records


def merge_predictions(*record_lists: list[PredictionRecord]) -> list[PredictionRecord]:
    """Combine records from several heads keyed by (case_id, fold, split_role)."""
    merged: dict[tuple, dict] = {}
    order = []
    fields = ("score_bacteria", "score_fungi", "score_amoeba", "score_sex", "probs_age")
    for records in record_lists:
        for r in records:
            key = (r.case_id, r.fold, r.split_role)
            if key not in merged:
                merged[key] = {}
                order.append(key)
            for f in fields:
                v = getattr(r, f)
                if v is not None:
                    if f in merged[key] and merged[key][f] != v:
                        raise ValueError(f"conflicting {f} for {key}")
                    merged[key][f] = v
    return [PredictionRecord(*key, **merged[key]) for key in order]
