"""Class-specific GAN augmentation trained on a fold's training partition only."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .dataset import SYNTH, DatasetTable, export_dataset
from .errors import ConfigError, NumericError, PolicyError, TrainingError
from .splitting import LomoFold
from .training import TrainingSet

__all__ = [
    "GanConfig",
    "GanPair",
    "AugmentedSet",
    "fit_gan",
    "train_gan",
    "generate",
    "synthetic_counts",
    "mix_augmented",
    "gan_losses",
]


@dataclass(frozen=True)
class GanConfig:
    latent_dim: int = 8
    gen_hidden: tuple[int, ...] = (64,)
    disc_hidden: tuple[int, ...] = (64,)
    steps: int = 1500
    batch_size: int = 32
    lr: float = 0.02
    seed: int = 0
    synth_fraction_cap: float = 0.5
    saturating: bool = False

    def errors(self) -> list[ConfigError]:
        out = []
        if self.latent_dim < 1:
            out.append(ConfigError("latent_dim", "must be >= 1"))
        if any(w < 1 for w in (*self.gen_hidden, *self.disc_hidden)):
            out.append(ConfigError("gen_hidden/disc_hidden", "every width must be >= 1"))
        if self.steps < 1:
            out.append(ConfigError("steps", "must be >= 1"))
        if self.batch_size < 1:
            out.append(ConfigError("batch_size", "must be >= 1"))
        if not self.lr > 0:
            out.append(ConfigError("lr", "must be > 0"))
        if not 0.0 <= self.synth_fraction_cap <= 0.5:
            out.append(ConfigError("synth_fraction_cap", "must lie in [0, 0.5]"))
        return out

    def validate(self) -> None:
        errs = self.errors()
        if errs:
            raise errs[0]


@dataclass
class GanPair:
    generator: dict[str, np.ndarray]
    discriminator: dict[str, np.ndarray]
    class_label: int
    fold: str
    # generator works in standardized units; these map back to feature space
    mean: np.ndarray = field(repr=False, default=None)
    scale: np.ndarray = field(repr=False, default=None)
    history: list[tuple[float, float]] = field(default_factory=list, repr=False)

    @property
    def latent_dim(self) -> int:
        return self.generator["gen.0.W"].shape[0]

    @property
    def output_dim(self) -> int:
        n = sum(1 for k in self.generator if k.endswith(".W"))
        return self.generator[f"gen.{n - 1}.W"].shape[1]

    def discriminate(self, X) -> np.ndarray:
        """D(x) in (0, 1) for rows in feature space."""
        Xs = (np.asarray(X, dtype=np.float64) - self.mean) / self.scale
        frozen = {k: ad.constant(v) for k, v in self.discriminator.items()}
        return ad._sigmoid(_mlp(frozen, "disc", ad.constant(Xs)).data[:, 0])


def _init_mlp(prefix: str, widths, rng) -> dict[str, ad.Tensor]:
    out = {}
    for i, (a, b) in enumerate(zip(widths[:-1], widths[1:])):
        out[f"{prefix}.{i}.W"] = ad.parameter(rng.normal(0.0, np.sqrt(2.0 / a), (a, b)), f"{prefix}.{i}.W")
        out[f"{prefix}.{i}.b"] = ad.parameter(np.zeros(b), f"{prefix}.{i}.b")
    return out


def _mlp(params, prefix: str, x: ad.Tensor) -> ad.Tensor:
    n = sum(1 for k in params if k.startswith(prefix + ".") and k.endswith(".W"))
    h = x
    for i in range(n):
        h = ad.linear(h, params[f"{prefix}.{i}.W"], params[f"{prefix}.{i}.b"])
        if i < n - 1:
            h = ad.relu(h)
    return h


def gan_losses(gen, disc, real: np.ndarray, z: np.ndarray, saturating: bool = False):
    """Discriminator and generator losses on one batch, as graph tensors."""
    fake = _mlp(gen, "gen", ad.constant(z))
    d_loss = ad.discriminator_loss(_mlp(disc, "disc", ad.constant(real)),
                                   _mlp(disc, "disc", ad.constant(fake.data)))
    g_loss = ad.generator_loss(_mlp(disc, "disc", fake), saturating)
    return d_loss, g_loss


def fit_gan(real: np.ndarray, cfg: GanConfig, class_label: int = -1, fold: str = "") -> GanPair:
    """Alternate one discriminator step and one generator step per iteration.

    ``real`` rows are standardized internally; the returned pair maps
    generated rows back to the original feature scale.
    """
    cfg.validate()
    real = np.asarray(real, dtype=np.float64)
    n, p = real.shape
    if n < cfg.batch_size:
        raise TrainingError(f"need at least {cfg.batch_size} real samples, got {n}")
    mean = real.mean(axis=0)
    scale = real.std(axis=0)
    scale = np.where(scale > 0, scale, 1.0)
    Xs = (real - mean) / scale

    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, class_label + 1]))
    gen = _init_mlp("gen", [cfg.latent_dim, *cfg.gen_hidden, p], rng)
    disc = _init_mlp("disc", [p, *cfg.disc_hidden, 1], rng)
    history = []
    order = rng.permutation(n)
    cursor = 0
    for step in range(1, cfg.steps + 1):
        if cursor + cfg.batch_size > n:
            order, cursor = rng.permutation(n), 0
        batch = Xs[order[cursor : cursor + cfg.batch_size]]
        cursor += cfg.batch_size

        fake = _mlp(gen, "gen", ad.constant(rng.standard_normal((cfg.batch_size, cfg.latent_dim))))
        d_loss = ad.discriminator_loss(_mlp(disc, "disc", ad.constant(batch)),
                                       _mlp(disc, "disc", ad.constant(fake.data)))
        d_loss.backward()
        ad.sgd_step(disc.values(), cfg.lr)

        fake = _mlp(gen, "gen", ad.constant(rng.standard_normal((cfg.batch_size, cfg.latent_dim))))
        g_loss = ad.generator_loss(_mlp(disc, "disc", fake), cfg.saturating)
        g_loss.backward()
        ad.sgd_step(gen.values(), cfg.lr)
        ad.zero_grad(disc.values())

        if not (math.isfinite(d_loss.item()) and math.isfinite(g_loss.item())):
            raise NumericError(step, "non-finite GAN loss")
        history.append((d_loss.item(), g_loss.item()))

    return GanPair(
        generator={k: v.data.copy() for k, v in gen.items()},
        discriminator={k: v.data.copy() for k, v in disc.items()},
        class_label=class_label,
        fold=fold,
        mean=mean,
        scale=scale,
        history=history,
    )


def train_gan(fold: LomoFold, ds: DatasetTable, class_label: int, cfg: GanConfig) -> GanPair:
    """Fit a GAN to the fold's training samples of one class; nothing else is read."""
    ids = [s for s, y in zip(fold.train_ids, ds.labels_for(fold.train_ids).tolist()) if y == class_label]
    if len(ids) < cfg.batch_size:
        raise TrainingError(f"fold {fold.name}: {len(ids)} class-{class_label} samples < batch size {cfg.batch_size}")
    return fit_gan(ds.values_for(ids), cfg, class_label, fold.name)


def generate(gan: GanPair, n: int, seed: int = 0, id_start: int = -1) -> DatasetTable:
    """``n`` generated samples with negative ids and the ``SYNTH`` magnification tag."""
    if n < 0:
        raise ValueError("n must be >= 0")
    rng = np.random.default_rng(seed)
    if n:
        z = rng.standard_normal((n, gan.latent_dim))
        frozen = {k: ad.constant(v) for k, v in gan.generator.items()}
        values = _mlp(frozen, "gen", ad.constant(z)).data * gan.scale + gan.mean
    else:
        values = np.zeros((0, gan.output_dim))
    ids = np.arange(id_start, id_start - n, -1)
    return DatasetTable(ids, np.full(n, -(gan.class_label + 1)), np.full(n, gan.class_label),
                        np.full(n, SYNTH), values)


def synthetic_counts(n_benign: int, n_malignant: int, cap: float,
                     request: tuple[int, int] | None = None) -> tuple[int, int]:
    """Synthetic (benign, malignant) counts for a training split.

    By default the minority class is topped up toward the majority count, but
    never past the largest total ``s`` with ``s / (real + s) <= cap``. An
    explicit ``request`` is honoured only if it respects the cap.
    """
    if not 0.0 <= cap <= 0.5:
        raise PolicyError(f"synthetic fraction cap {cap} outside [0, 0.5]")
    real = n_benign + n_malignant
    if request is not None:
        nb, nm = (int(x) for x in request)
        if nb < 0 or nm < 0:
            raise PolicyError("requested synthetic counts must be non-negative")
        if nb + nm and (nb + nm) / (real + nb + nm) > cap:
            raise PolicyError(f"requested {nb + nm} synthetic samples exceed cap {cap} over {real} real")
        return nb, nm
    limit = math.floor(cap * real / (1.0 - cap)) if cap < 1.0 else 0
    while limit > 0 and limit / (real + limit) > cap:
        limit -= 1
    deficit = abs(n_benign - n_malignant)
    top_up = min(limit, deficit)
    return (top_up, 0) if n_benign < n_malignant else (0, top_up)


@dataclass
class AugmentedSet:
    real_ids: tuple[int, ...]
    synthetic: DatasetTable
    n_real: int

    @property
    def n_synthetic(self) -> int:
        return len(self.synthetic)

    @property
    def synthetic_fraction(self) -> float:
        total = self.n_real + self.n_synthetic
        return self.n_synthetic / total if total else 0.0

    def synthetic_training_set(self) -> TrainingSet:
        s = self.synthetic
        return TrainingSet(s.values, s.label, s.magnification)

    def export(self, path) -> None:
        export_dataset(self.synthetic, path)


def mix_augmented(fold: LomoFold, ds: DatasetTable, benign_gan: GanPair, malignant_gan: GanPair,
                  cfg: GanConfig, request: tuple[int, int] | None = None) -> AugmentedSet:
    """Real training split plus class-balancing synthetic samples, real-dominant by construction."""
    for gan, label in ((benign_gan, 0), (malignant_gan, 1)):
        if gan.class_label != label:
            raise PolicyError(f"GAN for class {gan.class_label} passed where class {label} was expected")
        if gan.fold and gan.fold != fold.name:
            raise PolicyError(f"GAN trained on fold {gan.fold} used for fold {fold.name}")
    labels = ds.labels_for(fold.train_ids)
    n_mal = int(labels.sum())
    n_ben = len(labels) - n_mal
    nb, nm = synthetic_counts(n_ben, n_mal, cfg.synth_fraction_cap, request)
    ben = generate(benign_gan, nb, seed=cfg.seed * 2 + 1, id_start=-1)
    mal = generate(malignant_gan, nm, seed=cfg.seed * 2 + 2, id_start=-1 - nb)
    synthetic = DatasetTable(
        np.concatenate([ben.sample_id, mal.sample_id]),
        np.concatenate([ben.patient_id, mal.patient_id]),
        np.concatenate([ben.label, mal.label]),
        np.concatenate([ben.magnification, mal.magnification]),
        np.vstack([ben.values, mal.values]),
    )
    out = AugmentedSet(tuple(fold.train_ids), synthetic, len(fold.train_ids))
    if out.synthetic_fraction > cfg.synth_fraction_cap:
        raise PolicyError("synthetic fraction exceeds cap")
    return out
