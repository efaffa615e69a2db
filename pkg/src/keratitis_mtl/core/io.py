"""Manifest, payload and prediction file formats.

Manifest: CSV with header
``case_id,group_id,payload_ref,bacteria,fungi,amoeba,sex,age_bin,mirrored``.
An ``age`` column (years) may replace ``age_bin``; it is binned on load.
``payload_ref`` is relative to the manifest's directory. For mirrored image
rows it names the un-mirrored source image and the flip is applied on load.
Optional metadata lives in a ``<stem>.meta.json`` sidecar.
"""

from __future__ import annotations

import csv
import json
import logging
import math
import os
from pathlib import Path

import numpy as np

from .types import (
    N_AGE_BINS,
    Case,
    DatasetManifest,
    PredictionRecord,
    ValidationError,
    age_to_bin,
)

log = logging.getLogger(__name__)

MANIFEST_HEADER = ("case_id", "group_id", "payload_ref", "bacteria", "fungi",
                   "amoeba", "sex", "age_bin", "mirrored")
PREDICTION_HEADER = ("case_id", "fold", "split_role", "score_bacteria", "score_fungi",
                     "score_amoeba", "score_sex") + tuple(f"probs_age_{i}" for i in range(N_AGE_BINS))

IMAGE_SUFFIXES = {".png", ".jpg", ".jpeg", ".bmp", ".tif", ".tiff"}
VECTOR_SUFFIXES = {".txt", ".vec", ".csv"}


class FormatError(ValueError):
    """A file does not parse as the expected format."""


def _fmt(x: float) -> str:
    return format(float(x), ".17g")


def _parse_bool(text: str) -> bool:
    t = text.strip().lower()
    if t in ("1", "true", "yes"):
        return True
    if t in ("0", "false", "no", ""):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _parse_int(text: str) -> int:
    value = float(text)
    if value != int(value):
        raise ValueError(f"not an integer: {text!r}")
    return int(value)


# --------------------------------------------------------------------- payloads

def read_payload(path: str | Path) -> np.ndarray:
    """Read an image (H, W, 3) in [0, 1] or a 1-D feature vector."""
    path = Path(path)
    suffix = path.suffix.lower()
    if suffix == ".npy":
        return np.load(path, allow_pickle=False).astype(np.float64)
    if suffix in VECTOR_SUFFIXES:
        values = [float(line) for line in path.read_text().split()]
        return np.asarray(values, dtype=np.float64)
    if suffix in IMAGE_SUFFIXES:
        from PIL import Image

        with Image.open(path) as img:
            arr = np.asarray(img.convert("RGB"), dtype=np.float64)
        return arr / 255.0
    raise FormatError(f"{path}: unsupported payload type {suffix!r}")


def write_payload(payload: np.ndarray, path: str | Path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    if payload.ndim == 1 and path.suffix.lower() in VECTOR_SUFFIXES:
        path.write_text("".join(_fmt(v) + "\n" for v in payload))
    elif path.suffix.lower() == ".npy":
        np.save(path, np.asarray(payload, dtype=np.float64), allow_pickle=False)
    else:
        raise FormatError(f"{path}: cannot write payload of shape {payload.shape}")


# --------------------------------------------------------------------- manifest

def _meta_path(path: Path) -> Path:
    return path.with_name(path.stem + ".meta.json")


def load_manifest(path: str | Path, load_payloads: bool = True) -> DatasetManifest:
    """Parse and validate a manifest file.

    Raises FormatError (with the 1-based data row number) on parse failure
    and ValidationError naming the case and field on invariant violations.
    """
    path = Path(path)
    base = path.parent
    with path.open(newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = tuple(h.strip() for h in next(reader))
        except StopIteration:
            raise FormatError(f"{path}: empty manifest") from None
        alt_header = MANIFEST_HEADER[:7] + ("age",) + MANIFEST_HEADER[8:]
        if header not in (MANIFEST_HEADER, alt_header):
            raise FormatError(f"{path}: header {','.join(header)!r} does not match "
                              f"{','.join(MANIFEST_HEADER)!r}")
        raw_age = header[7] == "age"
        cases = []
        for row_no, row in enumerate(reader, start=1):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != len(MANIFEST_HEADER):
                raise FormatError(f"{path}: row {row_no}: expected {len(MANIFEST_HEADER)} "
                                  f"fields, got {len(row)}")
            fields = dict(zip(header, (c.strip() for c in row)))
            try:
                age_bin = (age_to_bin(float(fields["age"])) if raw_age
                           else _parse_int(fields["age_bin"]))
                case = Case(
                    case_id=fields["case_id"],
                    group_id=fields["group_id"],
                    payload=None,
                    bacteria=_parse_int(fields["bacteria"]),
                    fungi=_parse_int(fields["fungi"]),
                    amoeba=_parse_int(fields["amoeba"]),
                    sex=_parse_int(fields["sex"]),
                    age_bin=age_bin,
                    mirrored=_parse_bool(fields["mirrored"]),
                    payload_ref=fields["payload_ref"],
                )
            except ValidationError as exc:
                raise ValidationError(f"case {fields['case_id']!r}: {exc}") from None
            except ValueError as exc:
                raise FormatError(f"{path}: row {row_no}: {exc}") from None
            cases.append(case)

    if load_payloads:
        loaded = []
        for case in cases:
            if not case.payload_ref:
                raise ValidationError(f"case {case.case_id!r}: payload_ref: empty")
            ref = base / case.payload_ref
            if not ref.exists():
                raise ValidationError(f"case {case.case_id!r}: payload_ref: "
                                      f"{case.payload_ref!r} not found")
            payload = read_payload(ref)
            if case.mirrored and payload.ndim == 3:
                payload = payload[:, ::-1, :].copy()
            loaded.append(case.with_payload(payload))
        cases = loaded

    metadata = {}
    if _meta_path(path).exists():
        metadata = json.loads(_meta_path(path).read_text())
    manifest = DatasetManifest(cases, metadata)
    manifest.validate()
    return manifest


def write_manifest(manifest: DatasetManifest, path: str | Path,
                   payload_dir: str | Path | None = None) -> None:
    """Write a manifest; in-memory payloads without a file are saved under
    ``payload_dir`` (default ``<manifest dir>/payloads``)."""
    manifest.validate()
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload_dir = Path(payload_dir) if payload_dir else path.parent / "payloads"
    rows = []
    for case in manifest.cases:
        ref = case.payload_ref
        if not ref:
            if case.payload is None:
                raise ValidationError(f"case {case.case_id!r}: payload_ref: no payload to write")
            payload = case.payload
            if payload.ndim == 3:
                target = payload_dir / f"{case.case_id}.npy"
                if case.mirrored:
                    payload = payload[:, ::-1, :]
            else:
                target = payload_dir / f"{case.case_id}.txt"
            write_payload(payload, target)
            ref = Path(os.path.relpath(target, path.parent)).as_posix()
        rows.append((case.case_id, case.group_id, ref, case.bacteria, case.fungi,
                     case.amoeba, case.sex, case.age_bin, "true" if case.mirrored else "false"))
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(MANIFEST_HEADER)
        writer.writerows(rows)
    if manifest.metadata:
        _meta_path(path).write_text(json.dumps(manifest.metadata, indent=2, sort_keys=True) + "\n")


# ------------------------------------------------------------------ predictions

def write_predictions(records: list[PredictionRecord], path: str | Path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(PREDICTION_HEADER)
        for rec in records:
            rec.validate()
            probs = rec.probs_age if rec.probs_age is not None else (None,) * N_AGE_BINS
            writer.writerow(
                [rec.case_id, rec.fold, rec.split_role]
                + ["" if v is None else _fmt(v)
                   for v in (rec.score_bacteria, rec.score_fungi, rec.score_amoeba,
                             rec.score_sex, *probs)]
            )


def read_predictions(path: str | Path) -> list[PredictionRecord]:
    path = Path(path)
    records = []
    with path.open(newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = tuple(h.strip() for h in next(reader))
        except StopIteration:
            raise FormatError(f"{path}: missing header") from None
        if header != PREDICTION_HEADER:
            raise FormatError(f"{path}: header does not match {','.join(PREDICTION_HEADER)!r}")
        for row_no, row in enumerate(reader, start=1):
            if not row:
                continue
            if len(row) != len(PREDICTION_HEADER):
                raise FormatError(f"{path}: row {row_no}: expected {len(PREDICTION_HEADER)} "
                                  f"fields, got {len(row)}")
            try:
                opt = [None if not c.strip() else float(c) for c in row[3:]]
                probs = opt[4:]
                if any(p is None for p in probs) and not all(p is None for p in probs):
                    raise ValueError("probs_age partially filled")
                rec = PredictionRecord(
                    case_id=row[0],
                    fold=_parse_int(row[1]),
                    split_role=row[2],
                    score_bacteria=opt[0],
                    score_fungi=opt[1],
                    score_amoeba=opt[2],
                    score_sex=opt[3],
                    probs_age=None if probs[0] is None else tuple(probs),
                )
            except ValueError as exc:
                if isinstance(exc, ValidationError):
                    raise
                raise FormatError(f"{path}: row {row_no}: {exc}") from None
            if any(v is not None and not math.isfinite(v) for v in opt):
                raise FormatError(f"{path}: row {row_no}: non-finite score")
            rec.validate()
            records.append(rec)
    return records
