"""Experiment configuration: an INI file with one section per stage.

Example::

    [experiment]
    seed = 7
    output_dir = runs/default
    methods = baseline, grl
    jobs = 0

    [data]
    source = synthetic        ; or "table" together with path = features.csv
    style_strength = 0.7

    [split]
    fractions = 0.64, 0.16, 0.20

    [encoder]                 ; shared by every variant
    max_epochs = 600

    [encoder.grl]             ; overrides for one variant
    lam = 1.0

    [gan]
    steps = 1500

    [signature]
    n_alpha = 9
    gammas = 0, 1e-4, 1e-2

    [evaluation]
    threshold = 0.5
    calibration_bins = 10

Unset seeds inherit ``experiment.seed``. Every key is optional.
"""

from __future__ import annotations

import configparser
import dataclasses
import hashlib
import json
import os
from dataclasses import dataclass, field
from pathlib import Path

from .augment import GanConfig
from .dataset import SynthConfig
from .errors import ConfigError, MagshiftError
from .training import EncoderConfig

__all__ = [
    "ExperimentConfig",
    "InvalidConfigError",
    "METHODS",
    "load_config",
    "parse_config",
    "validate_config",
]

METHODS = ("baseline", "gan", "grl")
OUT_ENV = "MAGSHIFT_OUT"


class InvalidConfigError(MagshiftError):
    """Carries every problem found in a config, not just the first."""

    def __init__(self, errors: list[ConfigError]):
        self.errors = list(errors)
        super().__init__("; ".join(str(e) for e in self.errors))


@dataclass(frozen=True)
class ExperimentConfig:
    seed: int = 7
    output_dir: str = "runs/default"
    methods: tuple[str, ...] = ("baseline", "grl")
    jobs: int = 0  # 0: one worker per available CPU
    data_source: str = "synthetic"
    data_path: str | None = None
    synth: SynthConfig = field(default_factory=SynthConfig)
    split_fractions: tuple[float, float, float] = (0.64, 0.16, 0.20)
    split_seed: int = 7
    # EncoderConfig keyword overrides per variant; input_dim is filled in from the data
    encoder: dict[str, dict] = field(default_factory=dict)
    gan: GanConfig = field(default_factory=GanConfig)
    n_alpha: int = 9
    gammas: tuple[float, ...] = (0.0, 1e-4, 1e-2)
    threshold: float = 0.5
    calibration_bins: int = 10

    def encoder_config(self, variant: str, input_dim: int) -> EncoderConfig:
        return EncoderConfig(input_dim=input_dim, **self.encoder.get(variant, {}))

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d.pop("output_dir")  # where results go does not change them
        d.pop("jobs")
        return d

    def digest(self) -> str:
        """SHA-256 of the canonical JSON form of every result-affecting field."""
        blob = json.dumps(self.to_dict(), sort_keys=True, default=list).encode("utf-8")
        return hashlib.sha256(blob).hexdigest()


_SYNTH_FIELDS = {f.name for f in dataclasses.fields(SynthConfig)}
_ENCODER_FIELDS = {f.name for f in dataclasses.fields(EncoderConfig)} - {"input_dim"}
_GAN_FIELDS = {f.name for f in dataclasses.fields(GanConfig)}
_KNOWN_SECTIONS = {"experiment", "data", "split", "encoder", "gan", "signature", "evaluation"}


def _floats(text: str) -> tuple[float, ...]:
    return tuple(float(x) for x in text.replace(",", " ").split())


def _ints(text: str) -> tuple[int, ...]:
    return tuple(int(x) for x in text.replace(",", " ").split())


def _convert(section: str, key: str, raw: str, template):
    """Parse ``raw`` into the type of ``template`` (the field's default)."""
    if isinstance(template, bool):
        low = raw.strip().lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"expected a boolean, got {raw!r}")
    if isinstance(template, int):
        return int(raw)
    if isinstance(template, float):
        return float(raw)
    if isinstance(template, tuple):
        return _ints(raw)
    return raw.strip()


def _read_section(cp, section, defaults_obj, allowed, errors, rename=None, skip=()):
    out = {}
    rename = rename or {}
    for key, raw in cp.items(section):
        if key in skip:
            continue
        name = rename.get(key, key)
        if name not in allowed:
            errors.append(ConfigError(f"{section}.{key}", "unknown key"))
            continue
        try:
            out[name] = _convert(section, key, raw, getattr(defaults_obj, name))
        except ValueError as exc:
            errors.append(ConfigError(f"{section}.{key}", str(exc)))
    return out


def parse_config(text: str, overrides: dict | None = None) -> tuple[ExperimentConfig | None, list[ConfigError]]:
    """Parse INI text; returns ``(config or None, all errors found)``.

    ``overrides`` may set ``seed``, ``output_dir`` or ``jobs`` (command-line
    flags), applied before validation.
    """
    errors: list[ConfigError] = []
    cp = configparser.ConfigParser(inline_comment_prefixes=(";", "#"), default_section="__none__")
    try:
        cp.read_string(text)
    except configparser.Error as exc:
        return None, [ConfigError("file", str(exc).splitlines()[0])]
    for sec in cp.sections():
        base = sec.split(".", 1)[0]
        if base not in _KNOWN_SECTIONS or (sec != base and base != "encoder"):
            errors.append(ConfigError(sec, "unknown section"))
    overrides = {k: v for k, v in (overrides or {}).items() if v is not None}
    get = lambda s, k: cp.get(s, k) if cp.has_section(s) and cp.has_option(s, k) else None  # noqa: E731

    def number(sec, key, kind, default):
        raw = get(sec, key)
        if raw is None:
            return default
        try:
            return kind(raw)
        except ValueError:
            errors.append(ConfigError(f"{sec}.{key}", f"not a valid {kind.__name__}: {raw!r}"))
            return default

    seed = overrides.get("seed", number("experiment", "seed", int, 7))
    output_dir = overrides.get("output_dir") or os.environ.get(OUT_ENV) or get("experiment", "output_dir") or "runs/default"
    jobs = overrides.get("jobs", number("experiment", "jobs", int, 0))
    raw_methods = get("experiment", "methods")
    methods = tuple(m.strip() for m in raw_methods.split(",") if m.strip()) if raw_methods is not None else ("baseline", "grl")
    if cp.has_section("experiment"):
        for key in cp.options("experiment"):
            if key not in ("seed", "output_dir", "methods", "jobs"):
                errors.append(ConfigError(f"experiment.{key}", "unknown key"))

    source = (get("data", "source") or "synthetic").strip()
    path = get("data", "path")
    synth_kw = {}
    if cp.has_section("data"):
        synth_kw = _read_section(cp, "data", SynthConfig(), set(_SYNTH_FIELDS), errors, skip=("source", "path"))
    synth_kw.setdefault("seed", seed)

    fractions = (0.64, 0.16, 0.20)
    if get("split", "fractions") is not None:
        try:
            fractions = _floats(get("split", "fractions"))
        except ValueError:
            errors.append(ConfigError("split.fractions", "expected three numbers"))
    split_seed = number("split", "seed", int, seed)
    if cp.has_section("split"):
        for key in cp.options("split"):
            if key not in ("fractions", "seed"):
                errors.append(ConfigError(f"split.{key}", "unknown key"))

    template = EncoderConfig(input_dim=1)
    shared = _read_section(cp, "encoder", template, _ENCODER_FIELDS, errors, {"lambda": "lam"}) if cp.has_section("encoder") else {}
    shared.setdefault("seed", seed)
    encoder = {}
    for variant in METHODS:
        sec = f"encoder.{variant}"
        own = _read_section(cp, sec, template, _ENCODER_FIELDS, errors, {"lambda": "lam"}) if cp.has_section(sec) else {}
        encoder[variant] = {**shared, **own}

    gan_kw = _read_section(cp, "gan", GanConfig(), _GAN_FIELDS, errors) if cp.has_section("gan") else {}
    gan_kw.setdefault("seed", seed)

    n_alpha = number("signature", "n_alpha", int, 9)
    gammas = (0.0, 1e-4, 1e-2)
    if get("signature", "gammas") is not None:
        try:
            gammas = _floats(get("signature", "gammas"))
        except ValueError:
            errors.append(ConfigError("signature.gammas", "expected a list of numbers"))
    if cp.has_section("signature"):
        for key in cp.options("signature"):
            if key not in ("n_alpha", "gammas"):
                errors.append(ConfigError(f"signature.{key}", "unknown key"))
    threshold = number("evaluation", "threshold", float, 0.5)
    bins = number("evaluation", "calibration_bins", int, 10)
    if cp.has_section("evaluation"):
        for key in cp.options("evaluation"):
            if key not in ("threshold", "calibration_bins"):
                errors.append(ConfigError(f"evaluation.{key}", "unknown key"))

    # range checks, all collected
    if not methods:
        errors.append(ConfigError("experiment.methods", "must name at least one method"))
    for m in methods:
        if m not in METHODS:
            errors.append(ConfigError("experiment.methods", f"unknown method {m!r}; choose from {', '.join(METHODS)}"))
    if len(set(methods)) != len(methods):
        errors.append(ConfigError("experiment.methods", "duplicate method"))
    if not 0 <= seed < 2**32:
        errors.append(ConfigError("experiment.seed", "must lie in [0, 2**32)"))
    if jobs < 0:
        errors.append(ConfigError("experiment.jobs", "must be >= 0"))
    if source not in ("synthetic", "table"):
        errors.append(ConfigError("data.source", "must be 'synthetic' or 'table'"))
    elif source == "table" and not path:
        errors.append(ConfigError("data.path", "required when data.source = table"))
    elif source == "table" and not Path(path).is_file():
        errors.append(ConfigError("data.path", f"no such file: {path}"))
    synth = None
    try:
        synth = SynthConfig(**synth_kw)
        errors += [ConfigError(f"data.{e.field}", str(e).split(": ", 1)[1]) for e in synth.errors()]
    except TypeError as exc:
        errors.append(ConfigError("data", str(exc)))
    if len(fractions) != 3:
        errors.append(ConfigError("split.fractions", "expected three numbers (train, val, test)"))
    elif any(f <= 0 for f in fractions) or abs(sum(fractions) - 1.0) > 1e-9:
        errors.append(ConfigError("split.fractions", f"must be positive and sum to 1, got sum {sum(fractions):g}"))
    for variant in METHODS:
        if variant in methods:
            try:
                errs = EncoderConfig(input_dim=1, **encoder[variant]).errors()
            except TypeError as exc:
                errs = [ConfigError("encoder", str(exc))]
            errors += [ConfigError(f"encoder.{variant}.{e.field}", str(e).split(": ", 1)[1]) for e in errs]
    gan = None
    try:
        gan = GanConfig(**gan_kw)
        errors += [ConfigError(f"gan.{e.field}", str(e).split(": ", 1)[1]) for e in gan.errors()]
    except TypeError as exc:
        errors.append(ConfigError("gan", str(exc)))
    if n_alpha < 1:
        errors.append(ConfigError("signature.n_alpha", "must be >= 1"))
    if not gammas or any(g < 0 for g in gammas):
        errors.append(ConfigError("signature.gammas", "must be a non-empty list of non-negative numbers"))
    if not 0.0 <= threshold <= 1.0:
        errors.append(ConfigError("evaluation.threshold", "must lie in [0, 1]"))
    if bins < 1:
        errors.append(ConfigError("evaluation.calibration_bins", "must be >= 1"))
    out_err = _check_writable(output_dir)
    if out_err:
        errors.append(ConfigError("experiment.output_dir", out_err))

    if errors:
        return None, errors
    return ExperimentConfig(
        seed=seed,
        output_dir=output_dir,
        methods=methods,
        jobs=jobs,
        data_source=source,
        data_path=path,
        synth=synth,
        split_fractions=tuple(fractions),
        split_seed=split_seed,
        encoder=encoder,
        gan=gan,
        n_alpha=n_alpha,
        gammas=tuple(gammas),
        threshold=threshold,
        calibration_bins=bins,
    ), []


def _check_writable(path: str) -> str | None:
    p = Path(path)
    while not p.exists():
        if p.parent == p:
            return "no existing ancestor directory"
        p = p.parent
    if not p.is_dir():
        return f"{p} is not a directory"
    if not os.access(p, os.W_OK):
        return f"{p} is not writable"
    return None


def validate_config(path, overrides: dict | None = None) -> list[ConfigError]:
    """Every structural and range problem in the file; an empty list means valid.

    An unreadable file raises ``OSError``.
    """
    text = Path(path).read_text(encoding="utf-8")
    return parse_config(text, overrides)[1]


def load_config(path, overrides: dict | None = None) -> ExperimentConfig:
    text = Path(path).read_text(encoding="utf-8")
    cfg, errors = parse_config(text, overrides)
    if errors:
        raise InvalidConfigError(errors)
    return cfg
