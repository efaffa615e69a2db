"""Domain records: cases, label vectors, manifests and prediction rows."""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Any

import numpy as np

TASKS = ("bacteria", "fungi", "amoeba")
SPLIT_ROLES = ("train", "validation", "test")
N_AGE_BINS = 4

# Joint state names indexed by joint_index = bacteria + 2*fungi + 4*amoeba.
JOINT_NAMES = ("H", "B", "F", "BF", "A", "BA", "FA", "BFA")
# Row/column order of the published 8-state joint confusion matrix.
JOINT_DISPLAY_ORDER = (0, 1, 2, 4, 3, 6, 5, 7)
JOINT_DISPLAY_NAMES = tuple(JOINT_NAMES[i] for i in JOINT_DISPLAY_ORDER)


class ValidationError(ValueError):
    """A record violates a domain invariant."""


def age_to_bin(age: float) -> int:
    """Map an age in years to its bin: 0-17, 18-39, 40-64, 65+."""
    if not math.isfinite(age) or age < 0:
        raise ValidationError(f"invalid age {age!r}")
    if age < 18:
        return 0
    if age < 40:
        return 1
    if age < 65:
        return 2
    return 3


def joint_index(bacteria: int, fungi: int, amoeba: int) -> int:
    return int(bacteria) + 2 * int(fungi) + 4 * int(amoeba)


def joint_index_array(labels: np.ndarray) -> np.ndarray:
    """Vectorised joint index for an (N, 3) 0/1 label matrix."""
    labels = np.asarray(labels, dtype=int)
    return labels[:, 0] + 2 * labels[:, 1] + 4 * labels[:, 2]


@dataclass(frozen=True)
class LabelVector:
    bacteria: int
    fungi: int
    amoeba: int

    def __post_init__(self):
        for name in TASKS:
            if getattr(self, name) not in (0, 1):
                raise ValidationError(f"{name} must be 0 or 1")

    @property
    def joint_index(self) -> int:
        return joint_index(self.bacteria, self.fungi, self.amoeba)

    @property
    def name(self) -> str:
        return JOINT_NAMES[self.joint_index]

    @classmethod
    def from_joint_index(cls, index: int) -> "LabelVector":
        if not 0 <= index < 8:
            raise ValidationError(f"joint index {index} out of range")
        return cls(index & 1, (index >> 1) & 1, (index >> 2) & 1)

    def as_array(self) -> np.ndarray:
        return np.array([self.bacteria, self.fungi, self.amoeba], dtype=int)


@dataclass(frozen=True, eq=False)
class Case:
    """One eye-exam record.

    ``payload`` is either an image (H, W, 3) with values in [0, 1] or a 1-D
    feature vector. ``payload_ref`` is the file it was read from, if any.
    """

    case_id: str
    group_id: str
    payload: np.ndarray | None
    bacteria: int
    fungi: int
    amoeba: int
    sex: int
    age_bin: int
    mirrored: bool = False
    payload_ref: str = ""

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, Case):
            return NotImplemented
        same_payload = (
            (self.payload is None and other.payload is None)
            or (
                self.payload is not None
                and other.payload is not None
                and self.payload.shape == other.payload.shape
                and np.array_equal(self.payload, other.payload)
            )
        )
        return same_payload and all(
            getattr(self, f) == getattr(other, f)
            for f in ("case_id", "group_id", "bacteria", "fungi", "amoeba",
                      "sex", "age_bin", "mirrored", "payload_ref")
        )

    __hash__ = None  # type: ignore[assignment]

    @property
    def labels(self) -> LabelVector:
        return LabelVector(self.bacteria, self.fungi, self.amoeba)

    @property
    def is_image(self) -> bool:
        return self.payload is not None and self.payload.ndim == 3

    def validate(self) -> None:
        def fail(field_name: str, msg: str):
            raise ValidationError(f"case {self.case_id!r}: {field_name}: {msg}")

        if not self.case_id:
            fail("case_id", "empty")
        if not self.group_id:
            fail("group_id", "empty")
        for name in TASKS:
            if getattr(self, name) not in (0, 1):
                fail(name, f"must be 0 or 1, got {getattr(self, name)!r}")
        if self.bacteria == self.fungi == self.amoeba == 0:
            fail("labels", "no infection (bacteria=fungi=amoeba=0)")
        if self.sex not in (0, 1):
            fail("sex", f"must be 0 or 1, got {self.sex!r}")
        if self.age_bin not in range(N_AGE_BINS):
            fail("age_bin", f"must be in 0..3, got {self.age_bin!r}")
        if self.payload is not None:
            p = self.payload
            if p.ndim == 3:
                if p.shape[2] != 3:
                    fail("payload", f"image must have 3 channels, got shape {p.shape}")
                if p.size and (p.min() < 0 or p.max() > 1):
                    fail("payload", "image values outside [0, 1]")
            elif p.ndim != 1:
                fail("payload", f"expected image or vector, got shape {p.shape}")
            if not np.all(np.isfinite(p)):
                fail("payload", "non-finite values")

    def with_payload(self, payload: np.ndarray) -> "Case":
        return replace(self, payload=payload)


@dataclass
class DatasetManifest:
    cases: list[Case]
    metadata: dict[str, Any] = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.cases)

    def __iter__(self):
        return iter(self.cases)

    def validate(self) -> None:
        seen: set[str] = set()
        for case in self.cases:
            case.validate()
            if case.case_id in seen:
                raise ValidationError(f"case {case.case_id!r}: case_id: duplicate")
            seen.add(case.case_id)

    @property
    def payload_mode(self) -> str | None:
        """'image', 'features', or None when payloads are not loaded."""
        modes = {("image" if c.is_image else "features") for c in self.cases
                 if c.payload is not None}
        if len(modes) > 1:
            raise ValidationError("manifest mixes image and feature payloads")
        return modes.pop() if modes else None

    def labels(self) -> np.ndarray:
        return np.array([[c.bacteria, c.fungi, c.amoeba] for c in self.cases],
                        dtype=int).reshape(-1, 3)

    def groups(self) -> dict[str, list[Case]]:
        out: dict[str, list[Case]] = {}
        for case in self.cases:
            out.setdefault(case.group_id, []).append(case)
        return out

    def by_id(self) -> dict[str, Case]:
        return {c.case_id: c for c in self.cases}

    def subset(self, case_ids) -> "DatasetManifest":
        keep = set(case_ids)
        return DatasetManifest([c for c in self.cases if c.case_id in keep],
                               dict(self.metadata))

    def stack_payloads(self) -> np.ndarray:
        if any(c.payload is None for c in self.cases):
            raise ValidationError("payloads not loaded")
        return np.stack([c.payload for c in self.cases]).astype(np.float64)


@dataclass(frozen=True)
class PredictionRecord:
    case_id: str
    fold: int
    split_role: str
    score_bacteria: float | None = None
    score_fungi: float | None = None
    score_amoeba: float | None = None
    score_sex: float | None = None
    probs_age: tuple[float, float, float, float] | None = None

    def validate(self) -> None:
        if self.split_role not in SPLIT_ROLES:
            raise ValidationError(
                f"record {self.case_id!r}: split_role {self.split_role!r} not in {SPLIT_ROLES}")
        for name in ("score_bacteria", "score_fungi", "score_amoeba", "score_sex"):
            v = getattr(self, name)
            if v is not None and not (0.0 <= v <= 1.0):
                raise ValidationError(f"record {self.case_id!r}: {name}={v!r} outside [0, 1]")
        if self.probs_age is not None:
            p = np.asarray(self.probs_age, dtype=float)
            if p.shape != (N_AGE_BINS,) or np.any(p < 0) or abs(p.sum() - 1.0) > 1e-9:
                raise ValidationError(
                    f"record {self.case_id!r}: probs_age must be a length-4 simplex")

    @property
    def infection_scores(self) -> np.ndarray:
        """Scores as a length-3 array; NaN where a head was not evaluated."""
        return np.array([np.nan if v is None else v
                         for v in (self.score_bacteria, self.score_fungi, self.score_amoeba)])
