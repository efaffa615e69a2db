"""Parameter checkpoints (.npz with a JSON header) and training logs (CSV)."""

from __future__ import annotations

import csv
import dataclasses
import json
from pathlib import Path

import numpy as np

from .network import ModelConfig, Network
from .training import EpochLog

CHECKPOINT_VERSION = 1


def save_checkpoint(net: Network, path: str | Path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    header = {
        "version": CHECKPOINT_VERSION,
        "config": dataclasses.asdict(net.config),
        "params": {k: list(v.shape) for k, v in net.params.items()},
        "buffers": {k: list(v.shape) for k, v in net.buffers.items()},
    }
    arrays = {f"param/{k}": v for k, v in net.params.items()}
    arrays.update({f"buffer/{k}": v for k, v in net.buffers.items()})
    with path.open("wb") as fh:
        np.savez(fh, __header__=np.array(json.dumps(header, sort_keys=True)), **arrays)


def load_checkpoint(path: str | Path) -> Network:
    with np.load(Path(path), allow_pickle=False) as data:
        header = json.loads(str(data["__header__"]))
        if header.get("version") != CHECKPOINT_VERSION:
            raise ValueError(f"{path}: unsupported checkpoint version {header.get('version')!r}")
        config = ModelConfig(**header["config"])
        params = {k: data[f"param/{k}"].copy() for k in header["params"]}
        buffers = {k: data[f"buffer/{k}"].copy() for k in header["buffers"]}
    for k, shape in header["params"].items():
        if list(params[k].shape) != shape:
            raise ValueError(f"{path}: parameter {k} has shape {params[k].shape}, expected {shape}")
    return Network(config, params, buffers)


def write_train_log(history: list[EpochLog], path: str | Path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("epoch", "train_loss", "val_loss", "frozen"))
        for e in history:
            w.writerow((e.epoch, format(e.train_loss, ".17g"), format(e.val_loss, ".17g"),
                        "true" if e.frozen else "false"))


def read_train_log(path: str | Path) -> list[EpochLog]:
    with Path(path).open(newline="") as fh:
        rows = list(csv.DictReader(fh))
    return [EpochLog(int(r["epoch"]), float(r["train_loss"]), float(r["val_loss"]),
                     r["frozen"] == "true") for r in rows]
