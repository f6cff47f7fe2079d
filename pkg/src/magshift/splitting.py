"""Patient-disjoint stratified splitting and leave-one-magnification-out folds."""

from __future__ import annotations

import csv
import enum
from dataclasses import dataclass, field

import numpy as np

from .dataset import MAGNIFICATIONS, DatasetTable, Magnification
from .errors import FoldConstructionError, InfeasibleSplitError

__all__ = [
    "Split",
    "SplitAssignment",
    "LomoFold",
    "AuditReport",
    "DEFAULT_FRACTIONS",
    "stratified_group_split",
    "build_lomo_folds",
    "audit_leakage",
    "write_manifest",
]

DEFAULT_FRACTIONS = (0.64, 0.16, 0.20)


class Split(str, enum.Enum):
    TRAIN = "TRAIN"
    VAL = "VAL"
    TEST = "TEST"


SPLITS = (Split.TRAIN, Split.VAL, Split.TEST)


@dataclass(frozen=True)
class SplitAssignment:
    assignment: dict[int, Split]
    patient_assignment: dict[int, Split]
    target_fractions: tuple[float, float, float] = DEFAULT_FRACTIONS

    def ids(self, split: Split) -> tuple[int, ...]:
        return tuple(sorted(s for s, k in self.assignment.items() if k == split))

    def sample_fractions(self) -> dict[Split, float]:
        n = len(self.assignment)
        counts = {k: 0 for k in SPLITS}
        for k in self.assignment.values():
            counts[k] += 1
        return {k: counts[k] / n for k in SPLITS}

    def patient_fractions(self) -> dict[Split, float]:
        n = len(self.patient_assignment)
        counts = {k: 0 for k in SPLITS}
        for k in self.patient_assignment.values():
            counts[k] += 1
        return {k: counts[k] / n for k in SPLITS}


def stratified_group_split(ds: DatasetTable, fractions=DEFAULT_FRACTIONS, seed: int = 0) -> SplitAssignment:
    """Assign whole patients to TRAIN/VAL/TEST, matching per-stratum sample fractions.

    Patients are placed largest first (ties by ascending id); each goes to the
    split giving the smallest total absolute deviation between the achieved
    per-(label, magnification) sample fractions and the targets. Equal-cost
    choices are broken by a generator seeded with ``seed``.
    """
    fr = np.asarray(fractions, dtype=np.float64)
    if fr.shape != (3,) or (fr <= 0).any() or abs(fr.sum() - 1.0) > 1e-9:
        raise ValueError(f"fractions must be three positive numbers summing to 1, got {fractions}")
    patients = list(ds.index_by_patient)
    if len(patients) < len(SPLITS):
        raise InfeasibleSplitError(f"{len(patients)} patients cannot fill {len(SPLITS)} splits")

    strata = list(ds.index_by_stratum)
    col = {s: j for j, s in enumerate(strata)}
    totals = np.array([len(ds.index_by_stratum[s]) for s in strata], dtype=np.float64)
    share = {}
    for pid, sids in ds.index_by_patient.items():
        v = np.zeros(len(strata))
        for y, m in zip(ds.labels_for(sids).tolist(), ds.magnifications_for(sids).tolist()):
            v[col[(y, m)]] += 1
        share[pid] = v / totals

    rng = np.random.default_rng(seed)
    achieved = np.zeros((3, len(strata)))
    owner: dict[int, int] = {}
    for pid in sorted(patients, key=lambda p: (-len(ds.index_by_patient[p]), p)):
        before = np.abs(achieved - fr[:, None]).sum(axis=1)
        after = np.abs(achieved + share[pid] - fr[:, None]).sum(axis=1)
        delta = after - before
        best = np.flatnonzero(delta <= delta.min() + 1e-12)
        k = int(best[0] if len(best) == 1 else rng.choice(best))
        achieved[k] += share[pid]
        owner[pid] = k

    _repair_empty(owner, share, achieved, fr)

    patient_assignment = {pid: SPLITS[owner[pid]] for pid in sorted(owner)}
    assignment = {}
    for pid, sids in ds.index_by_patient.items():
        for sid in sids:
            assignment[sid] = patient_assignment[pid]
    return SplitAssignment(dict(sorted(assignment.items())), patient_assignment, tuple(float(f) for f in fr))


def _repair_empty(owner, share, achieved, fr):
    # move the cheapest patient into any split the greedy pass left empty
    for k in range(3):
        if k in owner.values():
            continue
        best = None
        for pid in sorted(owner):
            src = owner[pid]
            if list(owner.values()).count(src) < 2:
                continue
            trial = achieved.copy()
            trial[src] -= share[pid]
            trial[k] += share[pid]
            cost = np.abs(trial - fr[:, None]).sum()
            if best is None or cost < best[0] - 1e-12:
                best = (cost, pid, src)
        if best is None:
            raise InfeasibleSplitError("cannot make every split non-empty")
        _, pid, src = best
        achieved[src] -= share[pid]
        achieved[k] += share[pid]
        owner[pid] = k


@dataclass(frozen=True)
class LomoFold:
    held_out: Magnification
    train_ids: tuple[int, ...]
    val_ids: tuple[int, ...]
    test_ids: tuple[int, ...]
    domain_encoding: dict[int, int]
    pos_weight: float

    @property
    def name(self) -> str:
        return str(self.held_out)

    def domain_labels(self, magnifications) -> np.ndarray:
        return np.array([self.domain_encoding[int(m)] for m in magnifications], dtype=np.int64)


def build_lomo_folds(ds: DatasetTable, split: SplitAssignment) -> list[LomoFold]:
    """One fold per magnification: filter each canonical split by magnification."""
    mags = dict(zip(ds.sample_id.tolist(), ds.magnification.tolist()))
    labels = dict(zip(ds.sample_id.tolist(), ds.label.tolist()))
    by_split = {k: split.ids(k) for k in SPLITS}
    folds = []
    for m in MAGNIFICATIONS:
        train = tuple(s for s in by_split[Split.TRAIN] if mags[s] != m)
        val = tuple(s for s in by_split[Split.VAL] if mags[s] != m)
        test = tuple(s for s in by_split[Split.TEST] if mags[s] == m)
        if not train or not test:
            raise FoldConstructionError(f"fold {m}: empty {'train' if not train else 'test'} set")
        n_pos = sum(labels[s] for s in train)
        n_neg = len(train) - n_pos
        if n_pos == 0 or n_neg == 0:
            raise FoldConstructionError(f"fold {m}: training split lacks one class")
        encoding = {int(d): i for i, d in enumerate(d for d in MAGNIFICATIONS if d != m)}
        folds.append(LomoFold(m, train, val, test, encoding, n_neg / n_pos))
    return folds


@dataclass
class AuditReport:
    held_out: Magnification
    patient_overlap: list[tuple[int, tuple[str, ...]]] = field(default_factory=list)
    magnification_violations: list[tuple[int, str, int]] = field(default_factory=list)
    class_counts: dict[str, dict[int, int]] = field(default_factory=dict)

    @property
    def passed(self) -> bool:
        return not self.patient_overlap and not self.magnification_violations


def audit_leakage(fold: LomoFold, ds: DatasetTable) -> AuditReport:
    report = AuditReport(fold.held_out)
    roles = {"train": fold.train_ids, "val": fold.val_ids, "test": fold.test_ids}
    seen: dict[int, set[str]] = {}
    for role, ids in roles.items():
        ids = list(ids)
        pids = ds.patients_for(ids).tolist()
        mags = ds.magnifications_for(ids).tolist()
        labs = ds.labels_for(ids).tolist()
        for pid in pids:
            seen.setdefault(pid, set()).add(role)
        for sid, m in zip(ids, mags):
            bad = (m == fold.held_out) if role != "test" else (m != fold.held_out)
            if bad:
                report.magnification_violations.append((sid, role, m))
        report.class_counts[role] = {0: labs.count(0), 1: labs.count(1)}
    order = list(roles)
    for pid in sorted(seen):
        if len(seen[pid]) > 1:
            report.patient_overlap.append((pid, tuple(r for r in order if r in seen[pid])))
    return report


def write_manifest(path, split: SplitAssignment, folds: list[LomoFold]) -> None:
    """Rows of (sample_id, split, fold, role); fold ``canonical`` lists the base split."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["sample_id", "split", "fold", "role"])
        for sid, k in split.assignment.items():
            w.writerow([sid, k.value, "canonical", k.value.lower()])
        for fold in folds:
            for role, ids in (("train", fold.train_ids), ("val", fold.val_ids), ("test", fold.test_ids)):
                for sid in ids:
                    w.writerow([sid, split.assignment[sid].value, fold.name, role])
