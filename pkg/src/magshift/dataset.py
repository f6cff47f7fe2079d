"""Sample data model, synthetic magnification-shift generator and CSV feature tables."""

from __future__ import annotations

import csv
import enum
from collections import Counter
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import ConfigError, IntegrityError, ParseError, SchemaError

__all__ = [
    "Magnification",
    "MAGNIFICATIONS",
    "SYNTH",
    "Sample",
    "DatasetTable",
    "AccessLog",
    "SynthConfig",
    "FeatureSchema",
    "generate_synthetic",
    "ingest_feature_table",
    "write_feature_table",
    "export_dataset",
    "stratum_counts",
    "parse_magnification",
    "magnification_name",
]


class Magnification(enum.IntEnum):
    M40 = 40
    M100 = 100
    M200 = 200
    M400 = 400

    def __str__(self):
        return f"{self.value}X"


MAGNIFICATIONS: tuple[Magnification, ...] = tuple(Magnification)

# Magnification code carried by GAN-generated samples; never a real domain.
SYNTH = 0


def magnification_name(code: int) -> str:
    return "SYNTH" if code == SYNTH else str(Magnification(code))


def parse_magnification(text: str) -> Magnification:
    t = str(text).strip().upper()
    if t.endswith("X"):
        t = t[:-1]
    try:
        return Magnification(int(t))
    except ValueError:
        raise ValueError(f"magnification {text!r} is not one of 40, 100, 200, 400") from None


@dataclass(frozen=True)
class Sample:
    sample_id: int
    patient_id: int
    label: int
    magnification: int
    values: np.ndarray = field(repr=False, compare=False)


class AccessLog:
    """Records which sample ids had their feature values read, tagged by stage."""

    def __init__(self):
        self.stage = "default"
        self.reads: dict[str, set[int]] = {}

    def record(self, ids: Iterable[int]) -> None:
        self.reads.setdefault(self.stage, set()).update(int(i) for i in ids)

    def read_ids(self, stage: str | None = None) -> set[int]:
        if stage is not None:
            return set(self.reads.get(stage, ()))
        out: set[int] = set()
        for ids in self.reads.values():
            out |= ids
        return out


class DatasetTable:
    """Immutable columnar table of samples with patient and stratum indices.

    Feature values are only reachable through :meth:`values_for` (or the
    ``samples``/``values`` views), which report to an attached
    :class:`AccessLog` so tests can prove a stage never touched held-out ids.
    """

    def __init__(self, sample_id, patient_id, label, magnification, values, access_log=None):
        sample_id = np.asarray(sample_id, dtype=np.int64)
        n = sample_id.shape[0]
        values = np.asarray(values, dtype=np.float64)
        if values.ndim != 2:
            values = values.reshape(n, -1)
        cols = {
            "patient_id": np.asarray(patient_id, dtype=np.int64),
            "label": np.asarray(label, dtype=np.int64),
            "magnification": np.asarray(magnification, dtype=np.int64),
        }
        for name, col in cols.items():
            if col.shape != (n,):
                raise IntegrityError(f"{name} has {col.shape[0]} entries, expected {n}")
        if values.shape[0] != n:
            raise IntegrityError(f"values has {values.shape[0]} rows, expected {n}")
        if n and not np.isin(cols["label"], (0, 1)).all():
            raise IntegrityError("labels must be 0 or 1")
        if len(np.unique(sample_id)) != n:
            dup = [k for k, c in Counter(sample_id.tolist()).items() if c > 1]
            raise IntegrityError(f"duplicate sample_id {dup[0]}")
        self._sample_id = sample_id
        self._patient_id = cols["patient_id"]
        self._label = cols["label"]
        self._magnification = cols["magnification"]
        self._values = values
        for arr in (self._sample_id, self._patient_id, self._label, self._magnification, self._values):
            arr.setflags(write=False)
        self._pos = {int(s): i for i, s in enumerate(sample_id.tolist())}
        self.access_log: AccessLog | None = access_log

        by_patient: dict[int, list[int]] = {}
        by_stratum: dict[tuple[int, int], list[int]] = {}
        for sid, pid, y, m in zip(sample_id.tolist(), self._patient_id.tolist(),
                                  self._label.tolist(), self._magnification.tolist()):
            by_patient.setdefault(pid, []).append(sid)
            by_stratum.setdefault((y, m), []).append(sid)
        self.index_by_patient = {k: tuple(v) for k, v in sorted(by_patient.items())}
        self.index_by_stratum = {k: tuple(v) for k, v in sorted(by_stratum.items())}

    # metadata is free to read; only feature values are audited
    sample_id = property(lambda self: self._sample_id)
    patient_id = property(lambda self: self._patient_id)
    label = property(lambda self: self._label)
    magnification = property(lambda self: self._magnification)

    def __len__(self):
        return self._sample_id.shape[0]

    @property
    def n_features(self) -> int:
        return self._values.shape[1]

    @property
    def values(self) -> np.ndarray:
        if self.access_log is not None:
            self.access_log.record(self._sample_id.tolist())
        return self._values

    @property
    def samples(self) -> list[Sample]:
        vals = self.values
        return [
            Sample(int(s), int(p), int(y), int(m), vals[i])
            for i, (s, p, y, m) in enumerate(zip(self._sample_id, self._patient_id,
                                                 self._label, self._magnification))
        ]

    def positions(self, ids: Sequence[int]) -> np.ndarray:
        try:
            return np.fromiter((self._pos[int(i)] for i in ids), dtype=np.intp)
        except KeyError as exc:
            raise KeyError(f"unknown sample_id {exc.args[0]}") from None

    def values_for(self, ids: Sequence[int]) -> np.ndarray:
        pos = self.positions(ids)
        if self.access_log is not None:
            self.access_log.record(ids)
        return self._values[pos]

    def labels_for(self, ids: Sequence[int]) -> np.ndarray:
        return self._label[self.positions(ids)]

    def magnifications_for(self, ids: Sequence[int]) -> np.ndarray:
        return self._magnification[self.positions(ids)]

    def patients_for(self, ids: Sequence[int]) -> np.ndarray:
        return self._patient_id[self.positions(ids)]

    def with_access_log(self, log: AccessLog) -> "DatasetTable":
        """Shallow copy sharing all arrays, reporting value reads to ``log``."""
        clone = object.__new__(DatasetTable)
        clone.__dict__.update(self.__dict__)
        clone.access_log = log
        return clone

    def subset(self, ids: Sequence[int]) -> "DatasetTable":
        pos = self.positions(ids)
        if self.access_log is not None:
            self.access_log.record(ids)
        return DatasetTable(self._sample_id[pos], self._patient_id[pos], self._label[pos],
                            self._magnification[pos], self._values[pos])

    def __eq__(self, other):
        if not isinstance(other, DatasetTable):
            return NotImplemented
        return (
            np.array_equal(self._sample_id, other._sample_id)
            and np.array_equal(self._patient_id, other._patient_id)
            and np.array_equal(self._label, other._label)
            and np.array_equal(self._magnification, other._magnification)
            and self._values.shape == other._values.shape
            and np.array_equal(self._values, other._values)
        )

    __hash__ = None

    def __repr__(self):
        return f"DatasetTable(n={len(self)}, P_in={self.n_features}, patients={len(self.index_by_patient)})"


def stratum_counts(ds: DatasetTable) -> dict[tuple[int, int], int]:
    """Number of samples per (label, magnification) stratum."""
    return {k: len(v) for k, v in ds.index_by_stratum.items()}


@dataclass(frozen=True)
class SynthConfig:
    n_patients: int = 82
    patches_per_patient_per_mag: int = 6
    malignant_patient_fraction: float = 0.66
    patch_side: int = 8
    style_strength: float = 0.7
    class_signal_strength: float = 0.35
    patient_effect_strength: float = 0.3
    seed: int = 7

    def errors(self) -> list[ConfigError]:
        out = []
        if self.n_patients < 1:
            out.append(ConfigError("n_patients", "must be >= 1"))
        if self.patches_per_patient_per_mag < 1:
            out.append(ConfigError("patches_per_patient_per_mag", "must be >= 1"))
        if not 0.0 < self.malignant_patient_fraction < 1.0:
            out.append(ConfigError("malignant_patient_fraction", "must lie in (0, 1)"))
        if self.patch_side < 4:
            out.append(ConfigError("patch_side", "must be >= 4"))
        for name in ("style_strength", "class_signal_strength", "patient_effect_strength"):
            if not getattr(self, name) >= 0:
                out.append(ConfigError(name, "must be non-negative"))
        if not 0 <= self.seed < 2**64:
            out.append(ConfigError("seed", "must be a 64-bit unsigned integer"))
        return out

    def validate(self) -> None:
        errs = self.errors()
        if errs:
            raise errs[0]


def _unit_rms(a: np.ndarray) -> np.ndarray:
    return a / np.sqrt(np.mean(a**2))


def _class_patterns(side: int) -> tuple[np.ndarray, np.ndarray]:
    """Benign: one broad central blob. Malignant: four tight off-centre clusters."""
    r, c = np.mgrid[0:side, 0:side].astype(np.float64)
    mid = (side - 1) / 2.0

    def blob(cr, cc, width):
        return np.exp(-((r - cr) ** 2 + (c - cc) ** 2) / (2.0 * width**2))

    benign = blob(mid, mid, side / 4.0)
    q1, q3 = (side - 1) / 4.0, 3.0 * (side - 1) / 4.0
    malignant = sum(blob(a, b, side / 10.0) for a in (q1, q3) for b in (q1, q3))
    return _unit_rms(benign - benign.mean()).ravel(), _unit_rms(malignant - malignant.mean()).ravel()


def _magnification_textures(side: int, class_patterns: tuple[np.ndarray, ...]) -> dict[int, np.ndarray]:
    """One oriented grating per magnification, rising in frequency.

    Each grating is made orthogonal to the class patterns so that the class
    signal survives any change of magnification style.
    """
    r, c = np.mgrid[0:side, 0:side].astype(np.float64)
    basis, _ = np.linalg.qr(np.column_stack([np.ones(side * side), *class_patterns]))
    out = {}
    for k, mag in enumerate(MAGNIFICATIONS):
        freq = 0.5 + 0.75 * k
        angle = np.pi * k / 4.0
        phase = np.pi * k / 3.0
        wave = np.cos(2.0 * np.pi * freq * (r * np.cos(angle) + c * np.sin(angle)) / side + phase).ravel()
        wave = wave - basis @ (basis.T @ wave)
        out[int(mag)] = _unit_rms(wave)
    return out


def generate_synthetic(cfg: SynthConfig) -> DatasetTable:
    """Procedural patient-structured dataset with a magnification-dependent style.

    value = class pattern * class_signal_strength
          + magnification grating * style_strength
          + per-patient offset * patient_effect_strength
          + N(0, 1) noise
    """
    cfg.validate()
    rng = np.random.default_rng(cfg.seed)
    side = cfg.patch_side
    n_pix = side * side
    benign, malignant = _class_patterns(side)
    textures = _magnification_textures(side, (benign, malignant))

    n_mal = int(round(cfg.n_patients * cfg.malignant_patient_fraction))
    patients = np.arange(1, cfg.n_patients + 1)
    malignant_ids = set(rng.permutation(patients)[:n_mal].tolist())
    offsets = rng.standard_normal((cfg.n_patients, n_pix))

    k = cfg.patches_per_patient_per_mag
    n_total = cfg.n_patients * len(MAGNIFICATIONS) * k
    pid = np.repeat(patients, len(MAGNIFICATIONS) * k)
    mag = np.tile(np.repeat([int(m) for m in MAGNIFICATIONS], k), cfg.n_patients)
    label = np.array([1 if p in malignant_ids else 0 for p in pid.tolist()], dtype=np.int64)

    mean = (
        cfg.class_signal_strength * np.where(label[:, None] == 1, malignant, benign)
        + cfg.style_strength * np.stack([textures[m] for m in mag.tolist()])
        + cfg.patient_effect_strength * offsets[pid - 1]
    )
    values = mean + rng.standard_normal((n_total, n_pix))
    return DatasetTable(np.arange(n_total), pid, label, mag, values)


@dataclass(frozen=True)
class FeatureSchema:
    sample_id: str = "sample_id"
    patient_id: str = "patient_id"
    label: str = "label"
    magnification: str = "magnification"
    features: tuple[str, ...] | None = None  # None: every remaining column, in file order

    def id_columns(self) -> tuple[str, ...]:
        return tuple(getattr(self, f.name) for f in fields(self) if f.name != "features")


def ingest_feature_table(path, schema: FeatureSchema = FeatureSchema(),
                         allow_synthetic: bool = False) -> DatasetTable:
    """Read a comma-separated UTF-8 feature table with a header row."""
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise SchemaError(f"{path}: empty file, no header row") from None
        missing = [c for c in schema.id_columns() if c not in header]
        features = list(schema.features) if schema.features is not None else [
            h for h in header if h not in schema.id_columns()
        ]
        missing += [c for c in features if c not in header]
        if missing:
            raise SchemaError(f"{path}: missing column(s) {', '.join(missing)}")
        if not features:
            raise SchemaError(f"{path}: no feature columns")
        col = {h: i for i, h in enumerate(header)}
        fidx = [col[c] for c in features]
        sid, pid, lab, mag, vals = [], [], [], [], []
        seen: dict[int, int] = {}
        for rowno, row in enumerate(reader, start=2):
            if not row or all(not cell.strip() for cell in row):
                continue
            if len(row) != len(header):
                raise ParseError(rowno, f"expected {len(header)} fields, got {len(row)}")
            try:
                s = int(row[col[schema.sample_id]])
                p = int(row[col[schema.patient_id]])
                y = int(row[col[schema.label]])
            except ValueError as exc:
                raise ParseError(rowno, str(exc)) from None
            if y not in (0, 1):
                raise ParseError(rowno, f"label {y} is not 0 or 1")
            raw_mag = row[col[schema.magnification]]
            if allow_synthetic and raw_mag.strip().upper() == "SYNTH":
                m = SYNTH
            else:
                try:
                    m = int(parse_magnification(raw_mag))
                except ValueError as exc:
                    raise ParseError(rowno, str(exc)) from None
            try:
                v = [float(row[i]) for i in fidx]
            except ValueError as exc:
                raise ParseError(rowno, str(exc)) from None
            if s in seen:
                raise IntegrityError(f"duplicate sample_id {s} on rows {seen[s]} and {rowno}")
            seen[s] = rowno
            sid.append(s), pid.append(p), lab.append(y), mag.append(m), vals.append(v)
    values = np.array(vals, dtype=np.float64).reshape(len(sid), len(features))
    return DatasetTable(sid, pid, lab, mag, values)


def write_feature_table(path, sample_id, patient_id, label, magnification, values) -> None:
    """Write rows in the ingestion schema; floats use shortest round-trip repr."""
    values = np.asarray(values, dtype=np.float64)
    p = values.shape[1] if values.ndim == 2 else 0
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["sample_id", "patient_id", "label", "magnification"] + [f"f{j}" for j in range(p)])
        for s, pi, y, m, row in zip(sample_id, patient_id, label, magnification, values):
            mag = "SYNTH" if int(m) == SYNTH else str(int(m))
            w.writerow([int(s), int(pi), int(y), mag] + [repr(float(x)) for x in row])


def export_dataset(ds: DatasetTable, path) -> None:
    write_feature_table(path, ds.sample_id, ds.patient_id, ds.label, ds.magnification, ds.values)
