"""End-to-end experiment runner: split, train, evaluate, signatures.

Artifact tree under the output directory::

    manifest.json                run manifest (config hash, seeds, versions, stages)
    config.json                  resolved configuration
    split/manifest.csv           sample_id, split, fold, role
    split/audit.json             per-fold leakage audit and class counts
    <method>/<fold>/model.ckpt   encoder + heads, binary checkpoint
    <method>/<fold>/history.csv  per-epoch losses
    <method>/<fold>/predictions.csv, metrics.csv, roc.csv
    <method>/summary.csv         per-fold and mean scalar metrics
    <method>/calibration.csv     pooled test-set reliability bins
    gan/<fold>/...               GAN checkpoints and the synthetic rows used
    signature/<method>.csv       (fold, dimension, coefficient)
    signature/selection.csv      chosen (alpha, gamma), support size, AUCs
    signature/stability.json     frequencies and Jaccard matrices per method
    audit/access.json            which stages read which splits
    FAILED                       present only when a stage failed

Every file is written with exact float ``repr`` and sorted keys and carries
no timestamps, so an identical config reproduces identical bytes.
"""

from __future__ import annotations

import csv
import json
import os
import platform
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import __version__
from .augment import mix_augmented, train_gan
from .autodiff import save_checkpoint
from .config import ExperimentConfig
from .dataset import AccessLog, DatasetTable, FeatureSchema, generate_synthetic, ingest_feature_table
from .errors import IntegrityError, MagshiftError
from .evaluation import (
    ScoredSet,
    aggregate_report,
    auc,
    calibration_curve,
    evaluate,
    pool,
    report_records,
    write_calibration,
    write_records,
    write_roc,
)
from .signature import (
    alpha_max,
    default_grid,
    fit_standardizer,
    select_regularization,
    stability_report,
    write_signature,
    write_stability,
)
from .splitting import (
    SPLITS,
    Split,
    SplitAssignment,
    audit_leakage,
    build_lomo_folds,
    stratified_group_split,
    write_manifest,
)
from .training import (
    domain_probe_accuracy,
    embed,
    load_model,
    predict_proba,
    train_baseline,
    train_grl,
    write_history,
)

__all__ = ["STAGES", "RunResult", "run_experiment", "load_dataset", "load_split"]

STAGES = ("split", "train", "eval", "signature")
SIGNATURE_METHODS = ("baseline", "grl")


@dataclass
class RunResult:
    status: int  # 0 success, 2 runtime failure
    out_dir: Path
    failed_stage: str | None = None
    message: str = ""


class StageError(MagshiftError):
    def __init__(self, stage, message):
        self.stage = stage
        super().__init__(f"stage {stage}: {message}")


def load_dataset(cfg: ExperimentConfig) -> DatasetTable:
    if cfg.data_source == "table":
        return ingest_feature_table(cfg.data_path, FeatureSchema())
    return generate_synthetic(cfg.synth)


def load_split(path, ds: DatasetTable, fractions) -> SplitAssignment:
    """Rebuild the canonical split from a written split manifest."""
    assignment = {}
    with open(path, newline="", encoding="utf-8") as fh:
        for row in csv.DictReader(fh):
            if row["fold"] == "canonical":
                assignment[int(row["sample_id"])] = Split(row["split"])
    if set(assignment) != set(ds.sample_id.tolist()):
        raise IntegrityError(f"{path} does not cover the dataset's sample ids")
    patients = {}
    for sid, pid in zip(ds.sample_id.tolist(), ds.patient_id.tolist()):
        patients[pid] = assignment[sid]
    return SplitAssignment(assignment, patients, tuple(fractions))


def _fold_dir(out: Path, method: str, fold_name: str) -> Path:
    return out / method / fold_name


def _write_json(path: Path, doc) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _versions() -> dict[str, str]:
    import numba
    import scipy
    import sklearn

    return {
        "magshift": __version__,
        "python": platform.python_version(),
        "numpy": np.__version__,
        "scipy": scipy.__version__,
        "scikit-learn": sklearn.__version__,
        "numba": numba.__version__,
    }


# ---- jobs: run in worker processes, write only under their own directory ----


def _audited(ds: DatasetTable, stage: str) -> tuple[DatasetTable, AccessLog]:
    log = AccessLog()
    log.stage = stage
    return ds.with_access_log(log), log


def _train_job(cfg: ExperimentConfig, ds: DatasetTable, fold, method: str, out: Path):
    ds, log = _audited(ds, "train")
    try:
        fold_dir = _fold_dir(out, method, fold.name)
        fold_dir.mkdir(parents=True, exist_ok=True)
        enc = cfg.encoder_config(method, ds.n_features)
        extra = None
        if method == "gan":
            gan_dir = out / "gan" / fold.name
            gan_dir.mkdir(parents=True, exist_ok=True)
            pairs = []
            for label in (0, 1):
                pair = train_gan(fold, ds, label, cfg.gan)
                save_checkpoint(gan_dir / f"class{label}.ckpt", {**pair.generator, **pair.discriminator})
                pairs.append(pair)
            aug = mix_augmented(fold, ds, pairs[0], pairs[1], cfg.gan)
            aug.export(gan_dir / "synthetic.csv")
            extra = aug.synthetic_training_set()
        fit = train_grl if method == "grl" else train_baseline
        model = fit(fold, ds, enc, extra)
        model.save(fold_dir / "model.ckpt")
        write_history(fold_dir / "history.csv", model)
        return None, log.reads
    except Exception as exc:  # reported by the parent; exceptions may not pickle
        return f"{type(exc).__name__}: {exc}", log.reads


def _eval_job(cfg: ExperimentConfig, ds: DatasetTable, fold, method: str, out: Path):
    ds, log = _audited(ds, "eval")
    try:
        fold_dir = _fold_dir(out, method, fold.name)
        model = load_model(fold_dir / "model.ckpt", method)
        ids = list(fold.test_ids)
        y = ds.labels_for(ids)
        prob = predict_proba(model, ds.values_for(ids))
        scored = ScoredSet(y, prob, fold.name, method)
        report = evaluate(scored, cfg.threshold, cfg.calibration_bins)
        records = report_records(report, method, fold.name)
        records.append((method, fold.name, "domain_probe_accuracy", domain_probe_accuracy(model, fold, ds)))
        write_records(fold_dir / "metrics.csv", records)
        write_roc(fold_dir / "roc.csv", report.roc_points)
        with open(fold_dir / "predictions.csv", "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["sample_id", "y_true", "y_prob"])
            for sid, t, p in zip(ids, y.tolist(), prob.tolist()):
                w.writerow([sid, t, repr(float(p))])
        return None, (report, scored, records), log.reads
    except Exception as exc:
        return f"{type(exc).__name__}: {exc}", None, log.reads


def _signature_job(cfg: ExperimentConfig, ds: DatasetTable, fold, method: str, out: Path):
    ds, log = _audited(ds, "signature")
    try:
        model = load_model(_fold_dir(out, method, fold.name) / "model.ckpt", method)
        parts = {}
        for role, ids in (("train", fold.train_ids), ("val", fold.val_ids), ("test", fold.test_ids)):
            parts[role] = (embed(model, ds.values_for(ids)), ds.labels_for(ids))
        st = fit_standardizer(parts["train"][0])
        D = {role: (st.transform(Z), y) for role, (Z, y) in parts.items()}
        grid = default_grid(alpha_max(*D["train"]), cfg.n_alpha, cfg.gammas)
        sel = select_regularization(D["train"], D["val"], grid)
        test_auc = float("nan")
        y_te = D["test"][1]
        if 0 < y_te.sum() < y_te.size:
            test_auc = auc(ScoredSet(y_te, sel.model.predict_proba(D["test"][0])))
        row = {
            "fold": fold.name,
            "alpha": sel.alpha,
            "gamma": sel.gamma,
            "support_size": len(sel.model.support),
            "val_auc": sel.val_auc,
            "test_auc": test_auc,
            "converged": sel.model.converged,
        }
        coefs = [(fold.name, j, sel.model.beta[j]) for j in sel.model.support]
        return None, (row, sel.model.support, coefs, model.embedding_dim), log.reads
    except Exception as exc:
        return f"{type(exc).__name__}: {exc}", None, log.reads


# ---- orchestration ----


class _Runner:
    def __init__(self, cfg: ExperimentConfig):
        self.cfg = cfg
        self.out = Path(cfg.output_dir)
        self.log = AccessLog()
        self.ds = load_dataset(cfg).with_access_log(self.log)
        self.split: SplitAssignment | None = None
        self.folds = None

    # job scheduling: a bounded pool, or inline when one worker suffices
    def _map(self, fn, tasks):
        jobs = self.cfg.jobs or os.cpu_count() or 1
        jobs = min(jobs, len(tasks))
        if jobs <= 1:
            return [fn(*t) for t in tasks]
        with ProcessPoolExecutor(max_workers=jobs) as pool_:
            futures = [pool_.submit(fn, *t) for t in tasks]
            return [f.result() for f in futures]

    def _merge_reads(self, reads: dict[str, set[int]]) -> None:
        for stage, ids in reads.items():
            self.log.reads.setdefault(stage, set()).update(ids)

    def _require_folds(self, stage: str) -> None:
        if self.folds is not None:
            return
        path = self.out / "split" / "manifest.csv"
        if not path.exists():
            raise StageError(stage, f"missing {path}; run the split stage first")
        self.split = load_split(path, self.ds, self.cfg.split_fractions)
        self.folds = build_lomo_folds(self.ds, self.split)

    def _check_access(self, stage: str) -> None:
        """Fail if any pre-evaluation stage read feature values of test-split samples."""
        self._require_folds(stage)
        test = set(self.split.ids(Split.TEST))
        early = self.log.read_ids("split") | self.log.read_ids("train")
        leaked = sorted(early & test)
        (self.out / "audit").mkdir(parents=True, exist_ok=True)
        by_split = {k: set(self.split.ids(k)) for k in SPLITS}
        doc = {
            st: {k.value: len(ids & by_split[k]) for k in SPLITS}
            for st, ids in sorted(self.log.reads.items())
        }
        doc["test_reads_before_eval"] = len(leaked)
        _write_json(self.out / "audit" / "access.json", doc)
        if leaked:
            raise IntegrityError(f"{len(leaked)} test-split samples were read before evaluation")

    def stage_split(self) -> None:
        self.log.stage = "split"
        cfg = self.cfg
        split = stratified_group_split(self.ds, cfg.split_fractions, cfg.split_seed)
        folds = build_lomo_folds(self.ds, split)
        d = self.out / "split"
        d.mkdir(parents=True, exist_ok=True)
        write_manifest(d / "manifest.csv", split, folds)
        audit = {}
        for f in folds:
            rep = audit_leakage(f, self.ds)
            audit[f.name] = {
                "passed": rep.passed,
                "patient_overlap": [int(pid) for pid, _ in rep.patient_overlap],
                "magnification_violations": [int(sid) for sid, _, _ in rep.magnification_violations],
                "class_counts": {role: {str(k): int(n) for k, n in c.items()} for role, c in rep.class_counts.items()},
                "pos_weight": f.pos_weight,
            }
            if not rep.passed:
                raise IntegrityError(f"fold {f.name} failed the leakage audit")
        audit["sample_fractions"] = {k.value: v for k, v in split.sample_fractions().items()}
        _write_json(d / "audit.json", audit)
        self.split, self.folds = split, folds

    def stage_train(self) -> list[str]:
        self._require_folds("train")
        self.log.stage = "train"
        tasks = [(self.cfg, self.ds, f, m, self.out) for m in self.cfg.methods for f in self.folds]
        failures = []
        for (_, _, f, m, _), (err, reads) in zip(tasks, self._map(_train_job, tasks)):
            self._merge_reads(reads)
            if err:
                failures.append(f"{m}/{f.name}: {err}")
        self._check_access("train")
        return failures

    def stage_eval(self) -> list[str]:
        self._require_folds("eval")
        self._check_access("eval")
        self.log.stage = "eval"
        tasks = [(self.cfg, self.ds, f, m, self.out) for m in self.cfg.methods for f in self.folds]
        results: dict[str, list] = {m: [] for m in self.cfg.methods}
        failures = []
        for (_, _, f, m, _), (err, res, reads) in zip(tasks, self._map(_eval_job, tasks)):
            self._merge_reads(reads)
            if err:
                failures.append(f"{m}/{f.name}: {err}")
            else:
                results[m].append(res)
        for m, res in results.items():
            if len(res) != len(self.folds):
                continue
            reports = [r for r, _, _ in res]
            mean = aggregate_report(reports)
            records = [rec for _, _, recs in res for rec in recs]
            probe = [v for (_, _, k, v) in records if k == "domain_probe_accuracy"]
            records += report_records(mean, m, "mean")
            records.append((m, "mean", "domain_probe_accuracy", float(np.mean(probe))))
            write_records(self.out / m / "summary.csv", records)
            pooled = pool([s for _, s, _ in res], m)
            write_calibration(self.out / m / "calibration.csv", calibration_curve(pooled, self.cfg.calibration_bins))
        return failures

    def stage_signature(self) -> list[str]:
        self._require_folds("signature")
        self.log.stage = "signature"
        methods = [m for m in SIGNATURE_METHODS if m in self.cfg.methods]
        if not methods:
            return []
        tasks = [(self.cfg, self.ds, f, m, self.out) for m in methods for f in self.folds]
        per_method: dict[str, list] = {m: [] for m in methods}
        failures = []
        for (_, _, f, m, _), (err, res, reads) in zip(tasks, self._map(_signature_job, tasks)):
            self._merge_reads(reads)
            if err:
                failures.append(f"{m}/{f.name}: {err}")
            else:
                per_method[m].append(res)
        d = self.out / "signature"
        d.mkdir(parents=True, exist_ok=True)
        reports = {}
        rows = []
        for m, res in per_method.items():
            if len(res) != len(self.folds):
                continue
            write_signature(d / f"{m}.csv", [c for _, _, coefs, _ in res for c in coefs])
            reports[m] = stability_report([s for _, s, _, _ in res], res[0][3])
            rows += [{"method": m, **row} for row, _, _, _ in res]
        if reports:
            write_stability(d / "stability.json", reports, [f.name for f in self.folds])
        with open(d / "selection.csv", "w", newline="", encoding="utf-8") as fh:
            cols = ["method", "fold", "alpha", "gamma", "support_size", "val_auc", "test_auc", "converged"]
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(cols)
            for row in rows:
                w.writerow([repr(row[c]) if isinstance(row[c], float) else row[c] for c in cols])
        return failures

    def write_manifest(self, completed: list[str]) -> None:
        path = self.out / "manifest.json"
        done = set(completed)
        if path.exists():
            try:
                old = json.loads(path.read_text(encoding="utf-8"))
                if old.get("config_sha256") == self.cfg.digest():
                    done |= set(old.get("stages_completed", []))
            except (OSError, ValueError):
                pass
        cfg = self.cfg
        doc = {
            "config_sha256": cfg.digest(),
            "methods": list(cfg.methods),
            "seeds": {
                "experiment": cfg.seed,
                "data": cfg.synth.seed if cfg.data_source == "synthetic" else None,
                "split": cfg.split_seed,
                "encoder": {m: cfg.encoder_config(m, 1).seed for m in cfg.methods},
                "gan": cfg.gan.seed,
            },
            "stages_completed": [s for s in STAGES if s in done],
            "versions": _versions(),
            "folds": [f.name for f in self.folds] if self.folds else [],
        }
        _write_json(path, doc)


def run_experiment(cfg: ExperimentConfig, stages=STAGES) -> RunResult:
    """Run the requested stages in order; a failing stage leaves a ``FAILED`` marker.

    Fold x method jobs that fail do not stop the others, so e.g. a GAN
    failure leaves baseline and GRL artifacts intact; the stage is still
    reported as failed.
    """
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    marker = out / "FAILED"
    if marker.exists():
        marker.unlink()
    stage = "setup"
    completed: list[str] = []
    runner = None
    try:
        runner = _Runner(cfg)
        _write_json(out / "config.json", cfg.to_dict())
        for stage in STAGES:
            if stage not in stages:
                continue
            failures = getattr(runner, f"stage_{stage}")() or []
            if failures:
                raise StageError(stage, "; ".join(failures))
            completed.append(stage)
        runner.write_manifest(completed)
        return RunResult(0, out)
    except Exception as exc:
        msg = str(exc) if isinstance(exc, StageError) else f"stage {stage}: {type(exc).__name__}: {exc}"
        marker.write_text(msg + "\n", encoding="utf-8")
        if runner is not None:
            try:
                runner.write_manifest(completed)
            except Exception:  # the marker is what matters here
                pass
        return RunResult(2, out, stage, msg)

