"""Encoder/head training for the supervised baseline and the gradient-reversal variant."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .dataset import SYNTH, DatasetTable, Sample
from .errors import ConfigError, NumericError, ShapeError, TrainingError
from .splitting import LomoFold

__all__ = [
    "EncoderConfig",
    "TrainingSet",
    "TrainedModel",
    "train_baseline",
    "train_grl",
    "embed",
    "predict_proba",
    "domain_probe_accuracy",
    "load_model",
    "write_history",
]


@dataclass(frozen=True)
class EncoderConfig:
    input_dim: int
    hidden_widths: tuple[int, ...] = (64, 32)
    embedding_dim: int = 32
    seed: int = 0
    lr: float = 0.002
    weight_decay: float = 1e-2
    batch_size: int = 64
    max_epochs: int = 600
    lam: float = 1.0
    patience: int = 20
    warmup_epochs: int = 0
    # the domain head is a small linear model chasing a moving target; a larger
    # step keeps it near its best response so the reversed gradient is informative
    domain_lr_scale: float = 10.0

    def errors(self) -> list[ConfigError]:
        out = []
        if self.input_dim < 1:
            out.append(ConfigError("input_dim", "must be >= 1"))
        if any(w < 1 for w in self.hidden_widths):
            out.append(ConfigError("hidden_widths", "every width must be >= 1"))
        if self.embedding_dim < 1:
            out.append(ConfigError("embedding_dim", "must be >= 1"))
        if self.max_epochs < 1:
            out.append(ConfigError("max_epochs", "must be >= 1"))
        if self.batch_size < 1:
            out.append(ConfigError("batch_size", "must be >= 1"))
        if not self.lam >= 0:
            out.append(ConfigError("lambda", "must be >= 0"))
        if not self.lr > 0:
            out.append(ConfigError("lr", "must be > 0"))
        if not self.weight_decay >= 0:
            out.append(ConfigError("weight_decay", "must be >= 0"))
        if self.patience < 1:
            out.append(ConfigError("patience", "must be >= 1"))
        if self.warmup_epochs < 0:
            out.append(ConfigError("warmup_epochs", "must be >= 0"))
        if not self.domain_lr_scale > 0:
            out.append(ConfigError("domain_lr_scale", "must be > 0"))
        return out

    def validate(self) -> None:
        errs = self.errors()
        if errs:
            raise errs[0]

    def lam_at(self, epoch: int) -> float:
        """GRL strength for a 1-based epoch, with optional linear warm-up from 0."""
        if self.warmup_epochs <= 0:
            return self.lam
        return self.lam * min(1.0, (epoch - 1) / self.warmup_epochs)


@dataclass(frozen=True)
class TrainingSet:
    """Feature rows with labels and magnification codes (``SYNTH`` for generated rows)."""

    values: np.ndarray
    labels: np.ndarray
    magnifications: np.ndarray

    def __len__(self):
        return self.values.shape[0]

    @classmethod
    def from_ids(cls, ds: DatasetTable, ids: Sequence[int]) -> "TrainingSet":
        ids = list(ids)
        return cls(ds.values_for(ids), ds.labels_for(ids), ds.magnifications_for(ids))

    def concat(self, other: "TrainingSet | None") -> "TrainingSet":
        if other is None or len(other) == 0:
            return self
        return TrainingSet(
            np.vstack([self.values, other.values]),
            np.concatenate([self.labels, other.labels]),
            np.concatenate([self.magnifications, other.magnifications]),
        )


@dataclass
class TrainedModel:
    params: dict[str, np.ndarray]
    variant: str
    history: list[tuple[int, float, float]] = field(default_factory=list)
    selected_epoch: int = 0
    domain_encoding: dict[int, int] = field(default_factory=dict)

    @property
    def n_layers(self) -> int:
        return sum(1 for k in self.params if k.startswith("enc.") and k.endswith(".W"))

    @property
    def input_dim(self) -> int:
        return self.params["enc.0.W"].shape[0]

    @property
    def embedding_dim(self) -> int:
        return self.params[f"enc.{self.n_layers - 1}.W"].shape[1]

    def save(self, path) -> None:
        ad.save_checkpoint(path, self.params)


def load_model(path, variant: str = "") -> TrainedModel:
    return TrainedModel(ad.load_checkpoint(path), variant)


def _init_params(cfg: EncoderConfig, rng: np.random.Generator) -> dict[str, ad.Tensor]:
    params = {}
    widths = [cfg.input_dim, *cfg.hidden_widths, cfg.embedding_dim]
    for i, (a, b) in enumerate(zip(widths[:-1], widths[1:])):
        params[f"enc.{i}.W"] = ad.parameter(rng.normal(0.0, np.sqrt(2.0 / a), (a, b)), f"enc.{i}.W")
        params[f"enc.{i}.b"] = ad.parameter(np.zeros(b), f"enc.{i}.b")
    p = cfg.embedding_dim
    params["path.W"] = ad.parameter(rng.normal(0.0, np.sqrt(1.0 / p), (p, 1)), "path.W")
    params["path.b"] = ad.parameter(np.zeros(1), "path.b")
    return params


def _init_domain_head(cfg: EncoderConfig, k: int, rng: np.random.Generator) -> dict[str, ad.Tensor]:
    p = cfg.embedding_dim
    return {
        "dom.W": ad.parameter(rng.normal(0.0, np.sqrt(1.0 / p), (p, k)), "dom.W"),
        "dom.b": ad.parameter(np.zeros(k), "dom.b"),
    }


def _encode(params, x: ad.Tensor) -> ad.Tensor:
    """Stack of affine + ReLU layers; the embedding is the last ReLU output."""
    n = sum(1 for k in params if k.startswith("enc.") and k.endswith(".W"))
    h = x
    for i in range(n):
        h = ad.relu(ad.linear(h, params[f"enc.{i}.W"], params[f"enc.{i}.b"]))
    return h


def _path_logit(params, z: ad.Tensor) -> ad.Tensor:
    s = ad.linear(z, params["path.W"], params["path.b"])
    return ad.reshape(s, (s.shape[0],))


def _as_matrix(samples, input_dim: int) -> np.ndarray:
    if isinstance(samples, DatasetTable):
        X = samples.values
    elif isinstance(samples, np.ndarray):
        X = samples
    else:
        samples = list(samples)
        if samples and isinstance(samples[0], Sample):
            X = np.array([s.values for s in samples], dtype=np.float64)
        else:
            X = np.asarray(samples, dtype=np.float64)
    X = np.asarray(X, dtype=np.float64)
    if X.size == 0:
        return np.zeros((0, input_dim))
    if X.ndim != 2 or X.shape[1] != input_dim:
        raise ShapeError(f"expected rows of length {input_dim}, got array of shape {X.shape}")
    return X


def embed(model: TrainedModel, samples) -> np.ndarray:
    """Embeddings ``f_theta(x)`` as an [n x p] matrix; no graph is recorded."""
    X = _as_matrix(samples, model.input_dim)
    if X.shape[0] == 0:
        return np.zeros((0, model.embedding_dim))
    frozen = {k: ad.constant(v) for k, v in model.params.items()}
    return _encode(frozen, ad.constant(X)).data


def predict_proba(model: TrainedModel, samples) -> np.ndarray:
    """Pathology probabilities ``sigmoid(g_phi(f_theta(x)))``."""
    Z = embed(model, samples)
    s = Z @ model.params["path.W"][:, 0] + model.params["path.b"][0]
    return ad._sigmoid(s)


def _val_loss(params, X, y, pos_weight) -> float:
    if X.shape[0] == 0:
        return float("nan")
    frozen = {k: ad.constant(v.data) for k, v in params.items()}
    return ad.weighted_bce(_path_logit(frozen, _encode(frozen, ad.constant(X))), y, pos_weight).item()


def _fit(fold: LomoFold, ds: DatasetTable, cfg: EncoderConfig, extra: TrainingSet | None,
         adversarial: bool) -> TrainedModel:
    cfg.validate()
    if len(fold.train_ids) == 0:
        raise TrainingError(f"fold {fold.name}: empty training set")
    if ds.n_features != cfg.input_dim:
        raise ShapeError(f"dataset has {ds.n_features} features, encoder expects {cfg.input_dim}")
    train = TrainingSet.from_ids(ds, fold.train_ids).concat(extra)
    val = TrainingSet.from_ids(ds, fold.val_ids)
    X, y = train.values, train.labels.astype(np.float64)
    real = train.magnifications != SYNTH
    d = np.zeros(len(train), dtype=np.int64)
    d[real] = fold.domain_labels(train.magnifications[real])

    init_ss, shuffle_ss, domain_ss = np.random.SeedSequence(cfg.seed).spawn(3)
    params = _init_params(cfg, np.random.default_rng(init_ss))
    if adversarial:
        params.update(_init_domain_head(cfg, len(fold.domain_encoding), np.random.default_rng(domain_ss)))
    shuffle = np.random.default_rng(shuffle_ss)
    shared = [v for k, v in params.items() if not k.startswith("dom.")]
    head = [v for k, v in params.items() if k.startswith("dom.")]

    # validation selection without a val split falls back to the training loss
    use_val = len(val) > 0
    best_loss, best_epoch, best_params = np.inf, 0, None
    history: list[tuple[int, float, float]] = []
    stale = 0
    n = len(train)
    for epoch in range(1, cfg.max_epochs + 1):
        lam = cfg.lam_at(epoch)
        order = shuffle.permutation(n)
        total = 0.0
        for start in range(0, n, cfg.batch_size):
            idx = order[start : start + cfg.batch_size]
            z = _encode(params, ad.constant(X[idx]))
            loss = ad.weighted_bce(_path_logit(params, z), y[idx], fold.pos_weight)
            batch_loss = loss.item()
            if adversarial:
                rows = np.flatnonzero(real[idx])
                if rows.size:
                    zr = ad.grad_reverse(ad.take_rows(z, rows), lam)
                    dom = ad.linear(zr, params["dom.W"], params["dom.b"])
                    loss = loss + ad.multiclass_ce(dom, d[idx][rows])
                else:
                    for k in ("dom.W", "dom.b"):
                        params[k].grad = np.zeros_like(params[k].data)
            loss.backward()
            ad.sgd_step(shared, cfg.lr, cfg.weight_decay)
            if head:
                ad.sgd_step(head, cfg.lr * cfg.domain_lr_scale, cfg.weight_decay)
            total += batch_loss * idx.size
        train_loss = total / n
        val_loss = _val_loss(params, val.values, val.labels.astype(np.float64), fold.pos_weight)
        if not (np.isfinite(train_loss) and (np.isfinite(val_loss) or not use_val)):
            raise NumericError(epoch)
        history.append((epoch, train_loss, val_loss))
        crit = val_loss if use_val else train_loss
        if crit < best_loss:
            best_loss, best_epoch = crit, epoch
            best_params = {k: v.data.copy() for k, v in params.items()}
            stale = 0
        else:
            stale += 1
            if stale >= cfg.patience:
                break

    return TrainedModel(
        params=best_params,
        variant="grl" if adversarial else "baseline",
        history=history,
        selected_epoch=best_epoch,
        domain_encoding=dict(fold.domain_encoding),
    )


def train_baseline(fold: LomoFold, ds: DatasetTable, cfg: EncoderConfig,
                   extra: TrainingSet | None = None) -> TrainedModel:
    """Weighted-BCE training on the fold's training split, selected on validation loss.

    ``extra`` appends rows (e.g. GAN samples) to the training split only.
    """
    return _fit(fold, ds, cfg, extra, adversarial=False)


def train_grl(fold: LomoFold, ds: DatasetTable, cfg: EncoderConfig,
              extra: TrainingSet | None = None) -> TrainedModel:
    """Joint pathology + reversed-gradient magnification training.

    The domain head sees ``grad_reverse(z, lam)``, so a single SGD step lowers
    the domain loss for the head while pushing the encoder to raise it. Rows
    tagged ``SYNTH`` are left out of the domain loss. Model selection uses the
    pathology validation loss only.
    """
    return _fit(fold, ds, cfg, extra, adversarial=True)


def domain_probe_accuracy(model: TrainedModel, fold: LomoFold, ds: DatasetTable) -> float:
    """Accuracy of a fresh multinomial logistic probe predicting magnification from frozen embeddings.

    The probe is fit on training-split embeddings and scored on the validation split.
    """
    from sklearn.linear_model import LogisticRegression

    Ztr = embed(model, ds.values_for(fold.train_ids))
    Zva = embed(model, ds.values_for(fold.val_ids))
    mu, sd = Ztr.mean(axis=0), Ztr.std(axis=0)
    sd = np.where(sd > 0, sd, 1.0)
    dtr = fold.domain_labels(ds.magnifications_for(fold.train_ids))
    dva = fold.domain_labels(ds.magnifications_for(fold.val_ids))
    probe = LogisticRegression(max_iter=5000)
    probe.fit((Ztr - mu) / sd, dtr)
    return float(np.mean(probe.predict((Zva - mu) / sd) == dva))


def write_history(path, model: TrainedModel) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["epoch", "train_loss", "val_loss"])
        for epoch, tr, va in model.history:
            w.writerow([epoch, repr(float(tr)), repr(float(va))])
