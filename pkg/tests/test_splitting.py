import csv
from dataclasses import replace

import numpy as np
import pytest

from magshift.dataset import MAGNIFICATIONS, DatasetTable, Magnification, SynthConfig, generate_synthetic
from magshift.errors import FoldConstructionError, InfeasibleSplitError
from magshift.splitting import (
    DEFAULT_FRACTIONS,
    SPLITS,
    Split,
    SplitAssignment,
    audit_leakage,
    build_lomo_folds,
    stratified_group_split,
    write_manifest,
)


@pytest.fixture(scope="module")
def ds():
    return generate_synthetic(SynthConfig())


@pytest.fixture(scope="module")
def split(ds):
    return stratified_group_split(ds, seed=0)


@pytest.fixture(scope="module")
def folds(ds, split):
    return build_lomo_folds(ds, split)


def test_patient_disjoint(ds, split):
    for sid, k in split.assignment.items():
        pid = int(ds.patients_for([sid])[0])
        assert split.patient_assignment[pid] == k
    members = {k: {p for p, s in split.patient_assignment.items() if s == k} for k in SPLITS}
    for a in SPLITS:
        assert members[a]
        for b in SPLITS:
            if a != b:
                assert not members[a] & members[b]


def test_sample_fractions_near_targets(split):
    got = split.sample_fractions()
    for k, target in zip(SPLITS, DEFAULT_FRACTIONS):
        assert abs(got[k] - target) <= 0.05
    assert sum(split.patient_fractions().values()) == pytest.approx(1.0)


def test_deterministic(ds, split):
    again = stratified_group_split(ds, seed=0)
    assert again.assignment == split.assignment


def test_three_equal_patients_forced():
    sid = np.arange(12)
    pid = np.repeat([1, 2, 3], 4)
    label = np.tile([0, 1], 6)
    mag = np.tile([40, 40, 100, 100], 3)
    ds = DatasetTable(sid, pid, label, mag, np.zeros((12, 1)))
    s = stratified_group_split(ds, fractions=(1 / 3, 1 / 3, 1 / 3))
    assert sorted(s.patient_assignment.values()) == sorted(SPLITS)


def test_too_few_patients():
    ds = DatasetTable([0, 1], [1, 2], [0, 1], [40, 40], np.zeros((2, 1)))
    with pytest.raises(InfeasibleSplitError):
        stratified_group_split(ds)


def test_bad_fractions(ds):
    with pytest.raises(ValueError):
        stratified_group_split(ds, fractions=(0.5, 0.5, 0.5))


def test_fold_filters(ds, folds):
    assert [f.held_out for f in folds] == list(MAGNIFICATIONS)
    for f in folds:
        assert not (set(ds.magnifications_for(f.train_ids).tolist()) | set(ds.magnifications_for(f.val_ids).tolist())) & {int(f.held_out)}
        assert set(ds.magnifications_for(f.test_ids).tolist()) == {int(f.held_out)}
        assert sorted(f.domain_encoding.values()) == [0, 1, 2]
        assert list(f.domain_encoding) == sorted(f.domain_encoding)
    assert {int(f.held_out) for f in folds} == {int(m) for m in MAGNIFICATIONS}


def test_pos_weight_is_exact_train_ratio(ds, folds):
    for f in folds:
        y = ds.labels_for(f.train_ids)
        assert f.pos_weight > 0
        assert f.pos_weight == (y == 0).sum() / (y == 1).sum()


def test_pos_weight_with_breakhis_counts():
    table = {40: (625, 1370), 100: (644, 1437), 200: (623, 1390), 400: (588, 1232)}
    label, mag = [], []
    for m, (nb, nm) in table.items():
        label += [0] * nb + [1] * nm
        mag += [m] * (nb + nm)
    n = len(label)
    # one extra benign/malignant pair of test patients per magnification
    for m in table:
        label += [0, 1]
        mag += [m, m]
    sid = np.arange(len(label))
    pid = np.r_[np.zeros(n, int), np.arange(1, 9)]
    ds = DatasetTable(sid, pid, label, mag, np.zeros((sid.size, 1)))
    assign = {int(s): (Split.TRAIN if s < n else Split.TEST) for s in sid}
    split = SplitAssignment(assign, {0: Split.TRAIN, **{p: Split.TEST for p in range(1, 9)}})
    folds = {int(f.held_out): f for f in build_lomo_folds(ds, split)}
    assert folds[40].pos_weight == (2480 - 625) / (5429 - 1370)
    assert folds[400].pos_weight == (2480 - 588) / (5429 - 1232)
    assert 2480 / 5429 == pytest.approx(0.4568, abs=5e-5)


def test_empty_test_fold_rejected(ds, split):
    everything = replace(split, assignment={s: Split.TRAIN for s in split.assignment})
    with pytest.raises(FoldConstructionError):
        build_lomo_folds(ds, everything)


def test_audit_passes(ds, folds):
    for f in folds:
        report = audit_leakage(f, ds)
        assert report.passed
        assert report.patient_overlap == [] and report.magnification_violations == []
        total = sum(sum(c.values()) for c in report.class_counts.values())
        assert total == len(f.train_ids) + len(f.val_ids) + len(f.test_ids)


def test_audit_catches_injected_fault(ds, folds):
    f = folds[0]
    moved = f.test_ids[0]
    bad = replace(f, train_ids=f.train_ids + (moved,), test_ids=f.test_ids[1:])
    report = audit_leakage(bad, ds)
    assert not report.passed
    assert report.magnification_violations == [(moved, "train", int(f.held_out))]
    assert len(report.patient_overlap) == 1


def test_manifest(tmp_path, split, folds):
    path = tmp_path / "manifest.csv"
    write_manifest(path, split, folds)
    rows = list(csv.DictReader(open(path, encoding="utf-8")))
    canonical = [r for r in rows if r["fold"] == "canonical"]
    assert len(canonical) == len(split.assignment)
    test_rows = [r for r in rows if r["role"] == "test" and r["fold"] == "200X"]
    held = next(f for f in folds if f.held_out == Magnification.M200)
    assert len(test_rows) == len(held.test_ids)
