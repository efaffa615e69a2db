"""End-to-end stages: synth -> split -> train -> predict -> eval -> stats -> report.

Every stage reads its inputs from the work directory and writes its outputs
there, so stages can be run separately and re-run idempotently.
"""

from __future__ import annotations

import csv
import dataclasses
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import yaml

from .core.imaging import AugmentConfig, mirror_expand
from .core.io import load_manifest, read_predictions, write_manifest, write_predictions
from .core.types import (
    JOINT_DISPLAY_NAMES,
    N_AGE_BINS,
    TASKS,
    DatasetManifest,
    PredictionRecord,
    ValidationError,
)
from .evaluation import (
    METRIC_NAMES,
    aggregate_folds,
    joint_confusion,
    metrics_bundle,
    roc_curve,
    youden_threshold,
)
from .model import (
    LossSpec,
    ModelConfig,
    TrainConfig,
    age_class_weights,
    class_weights,
    hospital_weights,
    load_checkpoint,
    merge_predictions,
    predict,
    save_checkpoint,
    sex_class_weight,
    train,
    write_train_log,
)
from .model.losses import DEFAULT_PRICES
from .report import render_markdown
from .splitter import SplitConfig, assign_folds, read_assignment, verify_no_leakage, write_assignment
from .stats import (
    SubgroupTable,
    subgroup_analysis,
    table_v_grid,
    write_stats_csv,
)
from .synth import Confound, SynthConfig, generate

log = logging.getLogger(__name__)

MANIFEST_FILE = "manifest.csv"
FOLDS_FILE = "folds.csv"
PREDICTIONS_FILE = "predictions.csv"
EVAL_FILE = "eval.json"
THRESHOLDS_FILE = "thresholds.csv"
ROC_FILE = "roc.csv"
STATS_FILE = "stats.csv"
STATS_JSON = "stats.json"
REPORT_JSON = "report.json"
REPORT_MD = "report.md"


class StageDependencyError(ValidationError):
    """An upstream artifact needed by a stage is missing."""


@dataclass
class RunConfig:
    workdir: Path = Path("run")
    manifest: str | None = None  # external manifest; otherwise synthetic data
    seed: int = 0
    synth: SynthConfig | None = field(default_factory=SynthConfig)
    split: SplitConfig = field(default_factory=SplitConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=lambda: TrainConfig(epochs=50))
    augment: AugmentConfig = field(default_factory=AugmentConfig)
    clinical_loss: bool = True
    class_weighting: bool = True
    prices: tuple[float, float, float] = DEFAULT_PRICES
    flasks: tuple[float, float, float] = (1, 1, 1)
    months: tuple[float, float, float] = (1.0, 1.0, 1.0)
    adaptive_threshold: bool = False
    attributes: tuple[str, ...] = ("sex", "age_bin")
    rounds: tuple[int, ...] | None = None
    t_test_flavor: str = "welch"
    mirror: bool = False

    def __post_init__(self):
        self.workdir = Path(self.workdir)
        if (self.manifest is None) == (self.synth is None):
            raise ValidationError("exactly one data source is required: 'manifest' or 'synth'")
        for a in self.attributes:
            if a not in ("sex", "age_bin"):
                raise ValidationError(f"unknown attribute {a!r}")
        if self.rounds is not None:
            self.rounds = tuple(int(r) for r in self.rounds)
            bad = [r for r in self.rounds if not 0 <= r < self.split.k]
            if bad:
                raise ValidationError(f"rounds {bad} outside 0..{self.split.k - 1}")

    @property
    def round_list(self) -> tuple[int, ...]:
        return self.rounds if self.rounds is not None else tuple(range(self.split.k))

    def path(self, name: str) -> Path:
        return self.workdir / name

    def summary(self) -> dict:
        """Configuration echo for reports (no filesystem paths)."""
        out = {}
        for f in dataclasses.fields(self):
            if f.name in ("workdir", "manifest"):
                continue
            v = getattr(self, f.name)
            out[f.name] = dataclasses.asdict(v) if dataclasses.is_dataclass(v) else v
        out["data_source"] = "manifest" if self.manifest else "synthetic"
        return _jsonable(out)


_SECTIONS = {"synth": SynthConfig, "split": SplitConfig, "model": ModelConfig,
             "train": TrainConfig, "augment": AugmentConfig}


def _build(cls, raw: dict):
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = set(raw) - names
    if unknown:
        raise ValidationError(f"unknown {cls.__name__} keys: {sorted(unknown)}")
    kw = {}
    for k, v in raw.items():
        if k == "confounds":
            v = tuple(Confound(**c) if isinstance(c, dict) else Confound(*c) for c in v)
        elif isinstance(v, list):
            v = tuple(tuple(x) if isinstance(x, list) else x for x in v)
        kw[k] = v
    return cls(**kw)


def config_from_dict(raw: dict, seed: int | None = None) -> RunConfig:
    """Build a RunConfig.

    The file's top-level ``seed`` fills any section seed not given; an
    explicit ``seed`` argument (the command-line flag) overrides them all.
    """
    raw = dict(raw or {})
    force = seed is not None
    seed = int(raw.pop("seed", 0) if seed is None else seed)
    raw.pop("seed", None)
    sections = {}
    for name, cls in _SECTIONS.items():
        if name not in raw:
            continue
        value = raw.pop(name)
        if value is None:
            sections[name] = None
            continue
        value = dict(value)
        if name == "model" and value.get("variant") == "ST":
            # ST always trains one network per infection; the task is a placeholder.
            value.setdefault("task", TASKS[0])
        if "seed" in {f.name for f in dataclasses.fields(cls)}:
            if force:
                value["seed"] = seed
            else:
                value.setdefault("seed", seed)
        sections[name] = _build(cls, value)
    if "manifest" in raw and "synth" not in sections and raw["manifest"] is not None:
        sections["synth"] = None
    sections.setdefault("synth", SynthConfig(seed=seed) if raw.get("manifest") is None else None)
    sections.setdefault("split", SplitConfig(seed=seed))
    sections.setdefault("train", TrainConfig(epochs=50, seed=seed))
    for k in ("prices", "flasks", "months", "attributes", "rounds"):
        if isinstance(raw.get(k), list):
            raw[k] = tuple(raw[k])
    names = {f.name for f in dataclasses.fields(RunConfig)}
    unknown = set(raw) - names
    if unknown:
        raise ValidationError(f"unknown config keys: {sorted(unknown)}")
    return RunConfig(seed=seed, **raw, **sections)


def load_config(path: str | Path | None, seed: int | None = None, **overrides) -> RunConfig:
    """Read a YAML or JSON run configuration (JSON is valid YAML)."""
    raw = {}
    if path is not None:
        with open(path) as fh:
            raw = yaml.safe_load(fh) or {}
        if not isinstance(raw, dict):
            raise ValidationError(f"{path}: configuration must be a mapping")
    for k, v in overrides.items():
        if v is None:
            continue
        if k in _SECTIONS:
            raw.setdefault(k, {}).update(v)
        else:
            raw[k] = v
    return config_from_dict(raw, seed)


# ---------------------------------------------------------------------- helpers

def _require(cfg: RunConfig, *names: str) -> None:
    for name in names:
        if not cfg.path(name).exists():
            raise StageDependencyError(f"missing upstream artifact {cfg.path(name)}; run the earlier stage first")


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _jsonable(obj.tolist())
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        x = float(obj)
        return None if math.isnan(x) else (str(x) if math.isinf(x) else x)
    if isinstance(obj, Path):
        return str(obj)
    return obj


def _dump_json(obj, path: Path) -> None:
    path.write_text(json.dumps(_jsonable(obj), indent=2, allow_nan=False) + "\n")


def _fmt(x: float) -> str:
    return format(float(x), ".17g")


def network_names(config: ModelConfig) -> list[str]:
    if config.variant == "ST":
        return [f"ST_{t}" for t in TASKS]
    return [config.variant]


def _model_for(cfg: RunConfig, name: str) -> ModelConfig:
    if name.startswith("ST_"):
        return dataclasses.replace(cfg.model, variant="ST", task=name[3:])
    return cfg.model


def loss_spec_for(cfg: RunConfig, model: ModelConfig, train_set: DatasetManifest) -> LossSpec:
    """Class weights from the training role; hospital weights when clinical."""
    hw = hospital_weights(cfg.prices, cfg.flasks, cfg.months) if cfg.clinical_loss else None
    if model.variant == "Sex":
        return LossSpec(sex_class_weight(train_set) if cfg.class_weighting else None)
    if model.variant == "Age":
        return LossSpec(age_class_weights(train_set) if cfg.class_weighting else None)
    cw = class_weights(train_set) if cfg.class_weighting else None
    if model.variant == "ST":
        t = TASKS.index(model.task)
        return LossSpec(None if cw is None else cw[[t]], (1.0,) if hw is not None else None)
    return LossSpec(cw, hw)


def round_seed(seed: int, round_index: int) -> int:
    return int(np.random.SeedSequence([seed, round_index]).generate_state(1)[0])


def _round_dir(cfg: RunConfig, r: int) -> Path:
    return cfg.workdir / f"round_{r:02d}"


# ------------------------------------------------------------------- stages

def stage_synth(cfg: RunConfig) -> Path:
    """Materialise the dataset manifest in the work directory."""
    cfg.workdir.mkdir(parents=True, exist_ok=True)
    if cfg.synth is not None:
        manifest = generate(cfg.synth)
    else:
        src = Path(cfg.manifest)
        if not src.exists():
            raise StageDependencyError(f"external manifest {src} does not exist")
        manifest = load_manifest(src)
    if cfg.mirror:
        manifest = mirror_expand(manifest)
    out = cfg.path(MANIFEST_FILE)
    write_manifest(manifest, out)
    log.info("wrote %d cases to %s", len(manifest), out)
    return out


def stage_split(cfg: RunConfig) -> Path:
    _require(cfg, MANIFEST_FILE)
    manifest = load_manifest(cfg.path(MANIFEST_FILE), load_payloads=False)
    assignment = assign_folds(manifest, cfg.split)
    problems = verify_no_leakage(manifest, assignment)
    if problems:
        raise ValidationError("split leakage: " + "; ".join(problems[:5]))
    out = cfg.path(FOLDS_FILE)
    write_assignment(assignment, out)
    return out


def stage_train(cfg: RunConfig) -> list[Path]:
    _require(cfg, MANIFEST_FILE, FOLDS_FILE)
    manifest = load_manifest(cfg.path(MANIFEST_FILE))
    assignment = read_assignment(cfg.path(FOLDS_FILE), cfg.split.k)
    written = []
    for r in cfg.round_list:
        rdir = _round_dir(cfg, r)
        rdir.mkdir(parents=True, exist_ok=True)
        train_set = assignment.role_manifest(manifest, r, "train")
        for name in network_names(cfg.model):
            model = _model_for(cfg, name)
            spec = loss_spec_for(cfg, model, train_set)
            tc = dataclasses.replace(cfg.train, seed=round_seed(cfg.train.seed, r))
            result = train(manifest, assignment, r, model, tc, spec, cfg.augment)
            save_checkpoint(result.network, rdir / f"{name}.npz")
            write_train_log(result.log, rdir / f"{name}_log.csv")
            written.append(rdir / f"{name}.npz")
            log.info("round %d %s: best epoch %d of %d", r, name, result.best_epoch, len(result.log))
    return written


def stage_predict(cfg: RunConfig) -> Path:
    _require(cfg, MANIFEST_FILE, FOLDS_FILE)
    for r in cfg.round_list:
        for name in network_names(cfg.model):
            rel = f"{_round_dir(cfg, r).name}/{name}.npz"
            _require(cfg, rel)
    manifest = load_manifest(cfg.path(MANIFEST_FILE))
    assignment = read_assignment(cfg.path(FOLDS_FILE), cfg.split.k)
    records: list[PredictionRecord] = []
    for r in cfg.round_list:
        roles = assignment.case_roles(manifest, r)
        parts = []
        for name in network_names(cfg.model):
            net = load_checkpoint(_round_dir(cfg, r) / f"{name}.npz")
            parts.append(predict(net, manifest, fold=r, roles=roles,
                                 role_filter=("validation", "test")))
        records.extend(merge_predictions(*parts))
    out = cfg.path(PREDICTIONS_FILE)
    write_predictions(records, out)
    return out


def _records_by(records, fold, role):
    return [r for r in records if r.fold == fold and r.split_role == role]


def _head_columns(records: list[PredictionRecord]) -> dict[str, list]:
    """Which outputs the prediction file carries."""
    present = {}
    for t in TASKS:
        if all(getattr(r, f"score_{t}") is not None for r in records):
            present[t] = "binary"
    if all(r.score_sex is not None for r in records):
        present["sex"] = "binary"
    if all(r.probs_age is not None for r in records):
        present["age"] = "multiclass"
    return present


def _target(case, head: str) -> int:
    if head in TASKS:
        return getattr(case, head)
    return case.sex if head == "sex" else case.age_bin


def _scores(records, head: str) -> np.ndarray:
    if head == "age":
        return np.array([r.probs_age for r in records], dtype=np.float64).reshape(-1, N_AGE_BINS)
    return np.array([getattr(r, f"score_{head}") for r in records], dtype=np.float64)


def stage_eval(cfg: RunConfig) -> Path:
    _require(cfg, MANIFEST_FILE, PREDICTIONS_FILE)
    manifest = load_manifest(cfg.path(MANIFEST_FILE), load_payloads=False)
    cases = manifest.by_id()
    records = read_predictions(cfg.path(PREDICTIONS_FILE))
    folds = sorted({r.fold for r in records})
    heads = _head_columns(records)
    if not heads:
        raise ValidationError("prediction file carries no complete output column")

    thresholds: dict[int, dict[str, float]] = {}
    youden_j: dict[int, dict[str, float]] = {}
    per_fold: dict[int, dict[str, dict]] = {}
    bundles: dict[str, list] = {h: [] for h in heads}
    matrices: dict[str, list] = {h: [] for h in heads}
    joint_mats = []
    pooled: dict[str, tuple[list, list]] = {h: ([], []) for h in heads if heads[h] == "binary"}
    for fold in folds:
        test = _records_by(records, fold, "test")
        val = _records_by(records, fold, "validation")
        if not test:
            raise ValidationError(f"fold {fold} has no test predictions")
        thresholds[fold], youden_j[fold], per_fold[fold] = {}, {}, {}
        preds_by_head = {}
        for head, kind in heads.items():
            y = np.array([_target(cases[r.case_id], head) for r in test])
            s = _scores(test, head)
            if kind == "binary":
                t, j = 0.5, math.nan
                if cfg.adaptive_threshold:
                    if not val:
                        raise ValidationError(f"fold {fold}: adaptive thresholds need validation predictions")
                    yv = np.array([_target(cases[r.case_id], head) for r in val])
                    t, j = youden_threshold(roc_curve(_scores(val, head), yv))
                thresholds[fold][head], youden_j[fold][head] = t, j
                p = (s >= t).astype(int)
                pooled[head][0].extend(s.tolist())
                pooled[head][1].extend(y.tolist())
            else:
                p = s.argmax(axis=1)
            preds_by_head[head] = (p, y)
            b = metrics_bundle(p, y, s, kind)
            bundles[head].append(b)
            per_fold[fold][head] = b.as_dict()
            k = N_AGE_BINS if kind == "multiclass" else 2
            cm = np.zeros((k, k), dtype=np.int64)
            np.add.at(cm, (y, p), 1)
            matrices[head].append(cm)
        if all(t in preds_by_head for t in TASKS):
            P = np.stack([preds_by_head[t][0] for t in TASKS], axis=1)
            Y = np.stack([preds_by_head[t][1] for t in TASKS], axis=1)
            joint_mats.append(joint_confusion(P, Y))

    aggregate = {}
    mean_cf = {}
    for head in heads:
        mean_cf[head] = np.sum(matrices[head], axis=0) / len(folds)
        if len(folds) >= 2:
            agg = aggregate_folds(bundles[head])
            aggregate[head] = {m: dataclasses.asdict(s) for m, s in agg.metrics.items()}
    result = {
        "folds": folds,
        "heads": heads,
        "threshold_mode": "youden" if cfg.adaptive_threshold else "fixed",
        "thresholds": thresholds,
        "youden_j": youden_j,
        "per_fold": per_fold,
        "aggregate": aggregate if aggregate else None,
        "confusion_mean": mean_cf,
    }
    if joint_mats:
        result["joint_confusion_mean"] = {
            "labels": list(JOINT_DISPLAY_NAMES),
            "matrix": np.sum(joint_mats, axis=0) / len(folds),
        }
    _dump_json(result, cfg.path(EVAL_FILE))

    with open(cfg.path(THRESHOLDS_FILE), "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("fold", "task", "threshold", "youden_j"))
        for fold in folds:
            for head, t in thresholds[fold].items():
                j = youden_j[fold][head]
                w.writerow((fold, head, _fmt(t), "" if math.isnan(j) else _fmt(j)))
    with open(cfg.path(ROC_FILE), "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("task", "threshold", "tpr", "fpr"))
        for head, (s, y) in pooled.items():
            if 0 < sum(y) < len(y):
                c = roc_curve(s, y)
                for t, tp, fp in c.points():
                    w.writerow((head, _fmt(t), _fmt(tp), _fmt(fp)))
    return cfg.path(EVAL_FILE)


def read_thresholds(path: Path) -> dict[int, tuple[float, float, float]]:
    out: dict[int, dict[str, float]] = {}
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            out.setdefault(int(row["fold"]), {})[row["task"]] = float(row["threshold"])
    return {f: tuple(d.get(t, 0.5) for t in TASKS) for f, d in out.items()}


def stage_stats(cfg: RunConfig) -> Path:
    _require(cfg, MANIFEST_FILE, FOLDS_FILE, PREDICTIONS_FILE, THRESHOLDS_FILE)
    manifest = load_manifest(cfg.path(MANIFEST_FILE), load_payloads=False)
    assignment = read_assignment(cfg.path(FOLDS_FILE), cfg.split.k)
    records = read_predictions(cfg.path(PREDICTIONS_FILE))
    if not all(t in _head_columns(records) for t in TASKS):
        raise ValidationError("subgroup statistics need predictions for all three infections")
    thresholds = read_thresholds(cfg.path(THRESHOLDS_FILE))
    tables = [subgroup_analysis(records, manifest, assignment, thresholds, a, cfg.t_test_flavor)
              for a in cfg.attributes]
    write_stats_csv(tables, cfg.path(STATS_FILE))
    _dump_json(stats_summary(tables), cfg.path(STATS_JSON))
    return cfg.path(STATS_FILE)


def stats_summary(tables: list[SubgroupTable]) -> dict:
    cells = []
    for tab in tables:
        for c in tab.cells:
            r = c.result
            cells.append({
                "attribute": c.attribute, "task": c.task, "metric": c.metric,
                "statistic": None if r is None else r.statistic,
                "df": None if r is None else list(r.df),
                "p_raw": None if r is None else r.p_raw,
                "p_corrected": None if r is None else r.p_corrected,
                "excluded_folds": c.excluded_folds,
                "note": c.note,
                "group_means": {str(lv): (float(np.mean(v)) if v else None) for lv, v in c.values.items()},
            })
    return {"table_v": table_v_grid(tables), "cells": cells}


def stage_report(cfg: RunConfig) -> Path:
    _require(cfg, EVAL_FILE)
    evaluation = json.loads(cfg.path(EVAL_FILE).read_text())
    stats = json.loads(cfg.path(STATS_JSON).read_text()) if cfg.path(STATS_JSON).exists() else None
    report = {
        "config": cfg.summary(),
        "folds": evaluation["folds"],
        "threshold_mode": evaluation["threshold_mode"],
        "thresholds": evaluation["thresholds"],
        "metrics": evaluation["aggregate"],
        "per_fold": evaluation["per_fold"],
        "table_iii": {h: {"rows": ["Negative", "Positive"], "columns": ["Negative", "Positive"],
                          "matrix": m}
                      for h, m in sorted(evaluation["confusion_mean"].items()) if h != "age"},
        "table_iv": evaluation.get("joint_confusion_mean"),
        "table_v": stats["table_v"] if stats else None,
        "statistics": stats["cells"] if stats else None,
    }
    if "age" in evaluation["confusion_mean"]:
        report["age_confusion"] = evaluation["confusion_mean"]["age"]
    _dump_json(report, cfg.path(REPORT_JSON))
    cfg.path(REPORT_MD).write_text(render_markdown(report))
    return cfg.path(REPORT_JSON)


STAGES = {
    "synth": stage_synth,
    "split": stage_split,
    "train": stage_train,
    "predict": stage_predict,
    "eval": stage_eval,
    "stats": stage_stats,
    "report": stage_report,
}


def run_all(cfg: RunConfig) -> Path:
    stage_synth(cfg)
    stage_split(cfg)
    stage_train(cfg)
    stage_predict(cfg)
    stage_eval(cfg)
    records = read_predictions(cfg.path(PREDICTIONS_FILE))
    if all(t in _head_columns(records) for t in TASKS) and cfg.attributes:
        stage_stats(cfg)
    return stage_report(cfg)


__all__ = [
    "RunConfig", "StageDependencyError", "STAGES", "config_from_dict", "load_config",
    "loss_spec_for", "network_names", "run_all", "stats_summary", "read_thresholds",
    "METRIC_NAMES",
] + [f"stage_{s}" for s in STAGES]
