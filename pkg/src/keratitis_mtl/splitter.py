"""Grouped, multilabel-stratified k-fold assignment with train/validation/test roles.

Groups (an original exam plus its mirrored twin) are the unit of assignment.
Groups are stratified on the 8-state joint label index: within each joint
state the groups are shuffled with a seeded generator and dealt round-robin
to the folds, continuing the dealing position across states so that fold
sizes also stay within one of each other. Round ``r`` uses fold ``r`` as the
test set, fold ``(r + 1) % k`` as validation and the rest for training.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .core.types import DatasetManifest, ValidationError


@dataclass(frozen=True)
class SplitConfig:
    k: int = 10
    train_fraction: float = 0.8
    val_fraction: float = 0.1
    test_fraction: float = 0.1
    seed: int = 0

    def __post_init__(self):
        if self.k < 2:
            raise ValueError("k must be at least 2")
        total = self.train_fraction + self.val_fraction + self.test_fraction
        if abs(total - 1.0) > 1e-9:
            raise ValueError(f"split fractions sum to {total}, expected 1")


@dataclass(frozen=True)
class RoundSplit:
    test: frozenset[str]
    validation: frozenset[str]
    train: frozenset[str]

    def role_of(self, group_id: str) -> str | None:
        for role in ("test", "validation", "train"):
            if group_id in getattr(self, role):
                return role
        return None


@dataclass(frozen=True)
class FoldAssignment:
    k: int
    rounds: tuple[RoundSplit, ...]
    fold_of: dict[str, int] | None = None

    @classmethod
    def from_folds(cls, fold_of: dict[str, int], k: int) -> "FoldAssignment":
        rounds = []
        for r in range(k):
            v = (r + 1) % k
            test = frozenset(g for g, f in fold_of.items() if f == r)
            val = frozenset(g for g, f in fold_of.items() if f == v)
            train = frozenset(g for g, f in fold_of.items() if f not in (r, v))
            rounds.append(RoundSplit(test, val, train))
        return cls(k, tuple(rounds), dict(fold_of))

    def case_roles(self, manifest: DatasetManifest, round_index: int) -> dict[str, str]:
        """Role of every case in one round (mirrored twins inherit via group)."""
        split = self.rounds[round_index]
        roles = {}
        for case in manifest.cases:
            role = split.role_of(case.group_id)
            if role is None:
                raise ValidationError(f"group {case.group_id!r} has no role in round {round_index}")
            roles[case.case_id] = role
        return roles

    def role_manifest(self, manifest: DatasetManifest, round_index: int,
                      role: str) -> DatasetManifest:
        groups = getattr(self.rounds[round_index], role)
        return DatasetManifest([c for c in manifest.cases if c.group_id in groups],
                               dict(manifest.metadata))


def group_labels(manifest: DatasetManifest) -> dict[str, int]:
    """Joint label index of each group, taken from its non-mirrored cases."""
    out: dict[str, int] = {}
    for case in manifest.cases:
        j = case.labels.joint_index
        prev = out.get(case.group_id)
        if prev is not None and prev != j:
            raise ValidationError(f"group {case.group_id!r} has inconsistent labels")
        if not case.mirrored or prev is None:
            out[case.group_id] = j
    return out


def assign_folds(manifest: DatasetManifest, config: SplitConfig = SplitConfig()) -> FoldAssignment:
    labels = group_labels(manifest)
    sources = {c.group_id for c in manifest.cases if not c.mirrored}
    orphans = set(labels) - sources
    if orphans:
        raise ValidationError(f"groups with only mirrored cases: {sorted(orphans)[:5]}")
    k = config.k
    if len(labels) < k:
        raise ValidationError(f"{len(labels)} groups is fewer than k={k}")

    rng = np.random.default_rng(config.seed)
    by_state: dict[int, list[str]] = {}
    for g in sorted(labels):
        by_state.setdefault(labels[g], []).append(g)

    fold_of: dict[str, int] = {}
    position = 0
    for state in sorted(by_state):
        groups = by_state[state]
        order = rng.permutation(len(groups))
        for i in order:
            fold_of[groups[i]] = position % k
            position += 1
    return FoldAssignment.from_folds(fold_of, k)


def verify_no_leakage(manifest: DatasetManifest, assignment: FoldAssignment) -> list[str]:
    """Return human-readable violations; empty when the assignment is clean."""
    violations = []
    all_groups = {c.group_id for c in manifest.cases}
    test_count = {g: 0 for g in all_groups}

    for r, split in enumerate(assignment.rounds):
        roles = {"test": split.test, "validation": split.validation, "train": split.train}
        seen: dict[str, list[str]] = {}
        for role, groups in roles.items():
            for g in groups:
                seen.setdefault(g, []).append(role)
        for g, rs in sorted(seen.items()):
            if len(rs) > 1:
                violations.append(f"round {r}: group {g!r} spans roles {sorted(rs)}")
        for g in sorted(all_groups - set(seen)):
            violations.append(f"round {r}: group {g!r} missing from partition")
        for g in sorted(set(seen) - all_groups):
            violations.append(f"round {r}: unknown group {g!r}")
        for g in split.test:
            if g in test_count:
                test_count[g] += 1

    for g, n in sorted(test_count.items()):
        if n != 1:
            violations.append(f"group {g!r} is a test group in {n} rounds, expected 1")

    sources = {}
    for c in manifest.cases:
        if not c.mirrored:
            sources.setdefault(c.group_id, set()).add(c.labels.joint_index)
    for c in manifest.cases:
        if c.mirrored and c.labels.joint_index not in sources.get(c.group_id, set()):
            violations.append(f"mirrored case {c.case_id!r} has no matching source in "
                              f"group {c.group_id!r}")
    return violations


def write_assignment(assignment: FoldAssignment, path: str | Path) -> None:
    if assignment.fold_of is None:
        raise ValueError("assignment has no per-group fold mapping to export")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("group_id", "fold"))
        for g in sorted(assignment.fold_of):
            w.writerow((g, assignment.fold_of[g]))


def read_assignment(path: str | Path, k: int | None = None) -> FoldAssignment:
    with Path(path).open(newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or tuple(h.strip() for h in header) != ("group_id", "fold"):
            raise ValueError(f"{path}: expected header 'group_id,fold'")
        fold_of = {row[0]: int(row[1]) for row in reader if row}
    k = k if k is not None else max(fold_of.values()) + 1
    return FoldAssignment.from_folds(fold_of, k)
