import numpy as np
import pytest
from scipy import stats

from magshift.dataset import (
    MAGNIFICATIONS,
    DatasetTable,
    SynthConfig,
    export_dataset,
    generate_synthetic,
    ingest_feature_table,
    stratum_counts,
    write_feature_table,
)
from magshift.errors import ConfigError, IntegrityError, ParseError, SchemaError


@pytest.fixture(scope="module")
def default_ds():
    return generate_synthetic(SynthConfig(n_patients=82, patches_per_patient_per_mag=6,
                                          malignant_patient_fraction=0.66, seed=7))


def test_default_counts(default_ds):
    ds = default_ds
    assert len(ds) == 82 * 4 * 6 == 1968
    by_mag = {m: 0 for m in MAGNIFICATIONS}
    for m in ds.magnification.tolist():
        by_mag[m] += 1
    assert all(c == 82 * 6 for c in by_mag.values())
    counts = stratum_counts(ds)
    assert sum(counts.values()) == len(ds)
    for m in MAGNIFICATIONS:
        assert counts[(0, int(m))] + counts[(1, int(m))] == 82 * 6


def test_malignant_patient_count_and_label_coherence(default_ds):
    ds = default_ds
    labels = {}
    for pid, y in zip(ds.patient_id.tolist(), ds.label.tolist()):
        assert labels.setdefault(pid, y) == y
    assert sum(labels.values()) == round(82 * 0.66)


def test_every_patient_has_all_magnifications(default_ds):
    for pid, sids in default_ds.index_by_patient.items():
        assert set(default_ds.magnifications_for(sids).tolist()) == {int(m) for m in MAGNIFICATIONS}


def test_all_eight_strata_present(default_ds):
    assert len(default_ds.index_by_stratum) == 8
    assert all(len(v) >= 1 for v in default_ds.index_by_stratum.values())


def test_indices_consistent(default_ds):
    ds = default_ds
    all_ids = sorted(s for ids in ds.index_by_patient.values() for s in ids)
    assert all_ids == sorted(ds.sample_id.tolist())
    for (y, m), ids in ds.index_by_stratum.items():
        assert set(ds.labels_for(ids).tolist()) == {y}
        assert set(ds.magnifications_for(ids).tolist()) == {m}


def test_generation_is_deterministic():
    cfg = SynthConfig(n_patients=10, patches_per_patient_per_mag=2, seed=3)
    a, b = generate_synthetic(cfg), generate_synthetic(cfg)
    assert a == b
    assert np.array_equal(a.values, b.values)
    assert not np.array_equal(a.values, generate_synthetic(SynthConfig(n_patients=10, patches_per_patient_per_mag=2, seed=4)).values)


def test_zero_patient_effect_makes_patients_exchangeable():
    cfg = SynthConfig(n_patients=40, patches_per_patient_per_mag=60, patient_effect_strength=0.0, seed=11)
    ds = generate_synthetic(cfg)
    ids = ds.index_by_stratum[(1, 100)]
    pids = ds.patients_for(ids)
    first, second = np.unique(pids)[:2]
    a = ds.values_for([s for s, p in zip(ids, pids) if p == first])
    b = ds.values_for([s for s, p in zip(ids, pids) if p == second])
    # pixel means of two patients are samples from the same distribution
    res = stats.ttest_ind(a.mean(axis=1), b.mean(axis=1))
    assert res.pvalue > 0.01


def test_patient_effect_is_visible_when_strong():
    cfg = SynthConfig(n_patients=4, patches_per_patient_per_mag=200, patient_effect_strength=3.0, seed=2)
    ds = generate_synthetic(cfg)
    ids = ds.index_by_stratum[(1, 40)]
    pids = ds.patients_for(ids)
    p0, p1 = np.unique(pids)[:2]
    a = ds.values_for([s for s, p in zip(ids, pids) if p == p0])[:, 0]
    b = ds.values_for([s for s, p in zip(ids, pids) if p == p1])[:, 0]
    assert stats.ttest_ind(a, b).pvalue < 1e-6


@pytest.mark.parametrize("field,value", [
    ("n_patients", 0),
    ("patches_per_patient_per_mag", 0),
    ("malignant_patient_fraction", 1.0),
    ("patch_side", 3),
    ("style_strength", -1.0),
])
def test_invalid_config_names_field(field, value):
    with pytest.raises(ConfigError, match=field):
        generate_synthetic(SynthConfig(**{field: value}))


def test_breakhis_shaped_counts():
    # benign / malignant per magnification as in the public dataset description
    table = {40: (625, 1370), 100: (644, 1437), 200: (623, 1390), 400: (588, 1232)}
    sid, label, mag = [], [], []
    for m, (nb, nm) in table.items():
        label += [0] * nb + [1] * nm
        mag += [m] * (nb + nm)
    sid = np.arange(len(label))
    ds = DatasetTable(sid, sid, label, mag, np.zeros((len(sid), 1)))
    counts = stratum_counts(ds)
    assert counts[(0, 40)] == 625 and counts[(1, 40)] == 1370
    assert sum(counts.values()) == 7909
    assert sum(v for (y, _), v in counts.items() if y == 0) == 2480
    assert sum(v for (y, _), v in counts.items() if y == 1) == 5429


def test_empty_dataset_counts():
    ds = DatasetTable([], [], [], [], np.zeros((0, 3)))
    assert stratum_counts(ds) == {}
    assert len(ds) == 0


# ---- feature tables ----


def _write(path, rows, header="sample_id,patient_id,label,magnification,f0,f1"):
    path.write_text(header + "\n" + "\n".join(rows) + "\n", encoding="utf-8")


def test_ingest_well_formed(tmp_path):
    rng = np.random.default_rng(0)
    vals = rng.normal(size=(10, 8))
    path = tmp_path / "t.csv"
    write_feature_table(path, range(10), [i // 2 for i in range(10)], [i % 2 for i in range(10)],
                        [40, 100, 200, 400, 40, 100, 200, 400, 40, 100], vals)
    ds = ingest_feature_table(path)
    assert len(ds) == 10 and ds.n_features == 8
    assert np.array_equal(ds.values, vals)


def test_round_trip(tmp_path):
    ds = generate_synthetic(SynthConfig(n_patients=5, patches_per_patient_per_mag=2, seed=1))
    path = tmp_path / "rt.csv"
    export_dataset(ds, path)
    assert ingest_feature_table(path) == ds


def test_bad_magnification_names_row(tmp_path):
    path = tmp_path / "bad.csv"
    _write(path, ["1,1,0,40,0.1,0.2", "2,1,0,250,0.1,0.2"])
    with pytest.raises(ParseError) as info:
        ingest_feature_table(path)
    assert info.value.row == 3
    assert "250" in str(info.value)


def test_duplicate_sample_id(tmp_path):
    path = tmp_path / "dup.csv"
    _write(path, ["1,1,0,40,0.1,0.2", "1,2,1,100,0.3,0.4"])
    with pytest.raises(IntegrityError, match="1"):
        ingest_feature_table(path)


def test_missing_column(tmp_path):
    path = tmp_path / "miss.csv"
    _write(path, ["1,1,0,0.1"], header="sample_id,patient_id,label,f0")
    with pytest.raises(SchemaError, match="magnification"):
        ingest_feature_table(path)


def test_bad_label_and_short_row(tmp_path):
    path = tmp_path / "lab.csv"
    _write(path, ["1,1,2,40,0.1,0.2"])
    with pytest.raises(ParseError):
        ingest_feature_table(path)
    _write(path, ["1,1,0,40,0.1"])
    with pytest.raises(ParseError):
        ingest_feature_table(path)


def test_access_log_records_reads():
    from magshift.dataset import AccessLog
    ds = generate_synthetic(SynthConfig(n_patients=3, patches_per_patient_per_mag=1, seed=0))
    log = AccessLog()
    view = ds.with_access_log(log)
    log.stage = "train"
    view.values_for([0, 2])
    view.labels_for([5])  # labels are not feature reads
    assert log.read_ids("train") == {0, 2}
    assert log.read_ids() == {0, 2}
