"""Experiment configuration files: flat ``key = value`` lines.

Blank lines and ``#`` comments are ignored. Every key must appear in
``SCHEMA``; unknown keys, malformed values and duplicates raise
``ConfigError`` naming the key. Lists are comma-separated.
"""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

from .evaluation import DIM_GRID, LAMBDA_GRID, LDP_SCALES
from .federation import TrainConfig

KINDS = ("single", "ablation_suite", "ldp_sweep", "lambda_sweep", "dim_sweep", "group_eval",
         "plug_and_play", "convex_harness")
PROVIDERS = ("hashed_ngram", "random", "precomputed")


class ConfigError(ValueError):
    def __init__(self, key, message):
        super().__init__(f"config key {key!r}: {message}" if key else message)
        self.key = key


def _bool(text):
    low = text.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"expected true/false, got {text!r}")


def _opt_str(text):
    text = text.strip()
    return None if text.lower() in ("", "none", "null") else text


def _opt_int(text):
    text = text.strip()
    return None if text.lower() in ("", "none", "null") else int(text)


def _floats(text):
    return tuple(float(v) for v in text.split(",") if v.strip())


def _ints(text):
    return tuple(int(v) for v in text.split(",") if v.strip())


def _fmt(value):
    if value is None:
        return "none"
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ",".join(repr(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


@dataclass
class ExperimentConfig:
    kind: str = "single"
    out: str = "runs/latest"
    # data: a TSV of interactions, or a synthetic corpus when ``interactions`` is none
    interactions: str | None = None
    item_texts: str | None = None
    min_interactions: int = 2
    synthetic_n: int = 1000
    synthetic_m: int = 500
    synthetic_avg: float = 4.0
    synthetic_latent_dim: int = 8
    synthetic_noise: float = 0.3
    synthetic_text_vocab: int = 400
    synthetic_seed: int | None = None  # defaults to ``seed``
    # item representation provider
    provider: str = "hashed_ngram"
    provider_path: str | None = None
    provider_normalize: bool = True
    # paired-seed suites (ablation_suite, group_eval, plug_and_play); empty means just ``seed``
    seeds: tuple = ()
    # sweeps
    ldp_scales: tuple = LDP_SCALES
    lambda_values: tuple = LAMBDA_GRID
    dim_values: tuple = DIM_GRID
    # convex harness
    harness_n: int = 10
    harness_p: int = 20
    harness_mu: float = 0.5
    harness_L: float = 2.0
    harness_local_epochs: int = 5
    harness_sigma: float = 0.1
    harness_lam_l1: float = 0.1
    harness_T: int = 2000
    harness_replicates: int = 64
    harness_burn_in: int = 200
    harness_drift_seeds: int = 10
    train: TrainConfig = field(default_factory=TrainConfig)

    def run_seeds(self):
        return tuple(self.seeds) if self.seeds else (self.train.seed,)

    def data_seed(self, seed=None):
        if self.synthetic_seed is not None:
            return self.synthetic_seed
        return self.train.seed if seed is None else seed

    def items(self):
        """Every key with its resolved value, in schema order."""
        out = []
        for f in dataclasses.fields(self):
            if f.name == "train":
                out.extend((t.name, getattr(self.train, t.name)) for t in dataclasses.fields(TrainConfig))
            else:
                out.append((f.name, getattr(self, f.name)))
        return out

    def dumps(self):
        return "".join(f"{k} = {_fmt(v)}\n" for k, v in self.items())


_PARSERS = {"seeds": _ints, "ldp_scales": _floats, "lambda_values": _floats, "dim_values": _ints,
            "synthetic_seed": _opt_int}


def _parser_for(name, default):
    if name in _PARSERS:
        return _PARSERS[name]
    if isinstance(default, bool):
        return _bool
    if isinstance(default, int):
        return int
    if isinstance(default, float):
        return float
    if default is None:
        return _opt_str
    return str


def _schema():
    schema = {}
    for f in dataclasses.fields(ExperimentConfig):
        if f.name == "train":
            continue
        schema[f.name] = _parser_for(f.name, f.default)
    for f in dataclasses.fields(TrainConfig):
        schema[f.name] = _parser_for(f.name, f.default)
    return schema


SCHEMA = _schema()
_TRAIN_KEYS = {f.name for f in dataclasses.fields(TrainConfig)}


def parse_config(text, source="<config>"):
    values = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split(" #", 1)[0].strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ConfigError(None, f"{source}:{lineno}: expected key = value, got {raw.strip()!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        if key not in SCHEMA:
            raise ConfigError(key, f"{source}:{lineno}: unknown key")
        if key in values:
            raise ConfigError(key, f"{source}:{lineno}: given twice")
        try:
            values[key] = SCHEMA[key](value)
        except ValueError as exc:
            raise ConfigError(key, f"{source}:{lineno}: {exc}") from None
    return build_config(values)


def build_config(values):
    """ExperimentConfig from already-typed values; validates ranges."""
    unknown = set(values) - set(SCHEMA)
    if unknown:
        key = sorted(unknown)[0]
        raise ConfigError(key, "unknown key")
    train_kw = {k: v for k, v in values.items() if k in _TRAIN_KEYS}
    top_kw = {k: v for k, v in values.items() if k not in _TRAIN_KEYS}
    try:
        train = TrainConfig(**train_kw)
    except ValueError as exc:
        raise ConfigError(_guess_key(str(exc), train_kw), str(exc)) from None
    cfg = ExperimentConfig(train=train, **top_kw)
    if cfg.kind not in KINDS:
        raise ConfigError("kind", f"must be one of {', '.join(KINDS)}; got {cfg.kind!r}")
    if cfg.provider not in PROVIDERS:
        raise ConfigError("provider", f"must be one of {', '.join(PROVIDERS)}; got {cfg.provider!r}")
    if cfg.provider == "precomputed" and not cfg.provider_path:
        raise ConfigError("provider_path", "required when provider = precomputed")
    if cfg.item_texts and not cfg.interactions:
        raise ConfigError("item_texts", "only meaningful together with interactions")
    if cfg.min_interactions < 2:
        raise ConfigError("min_interactions", "must be >= 2 for leave-one-out evaluation")
    if cfg.synthetic_avg < 2:
        raise ConfigError("synthetic_avg", "must be >= 2")
    for key in ("synthetic_n", "synthetic_m", "harness_T", "harness_replicates", "harness_drift_seeds"):
        if getattr(cfg, key) < 1:
            raise ConfigError(key, "must be >= 1")
    return cfg


def _guess_key(message, keys):
    for k in sorted(keys, key=len, reverse=True):
        if k in message:
            return k
    return None


def load_config(path, overrides=None):
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(None, f"cannot read {path}: {exc.strerror}") from None
    cfg = parse_config(text, str(path))
    cfg = _resolve_paths(cfg, path.parent)
    if overrides:
        cfg = override(cfg, **overrides)
    return cfg


_PATH_KEYS = ("interactions", "item_texts", "provider_path")


def bundled(name):
    """Path of a data file shipped inside the package."""
    return str(resources.files("fedutr") / "data" / name)


def _resolve_paths(cfg, base):
    """Input paths are relative to the config file; ``toy`` names the bundled corpus."""
    changes = {}
    if cfg.interactions == "toy":
        changes["interactions"] = bundled("toy_interactions.tsv")
        if cfg.item_texts in (None, "toy"):
            changes["item_texts"] = bundled("toy_items.tsv")
    for key in _PATH_KEYS:
        value = changes.get(key, getattr(cfg, key))
        if value and not Path(value).is_absolute():
            changes[key] = str((base / value).resolve())
    return dataclasses.replace(cfg, **changes) if changes else cfg


def override(cfg, **changes):
    values = dict(cfg.items())
    values.update({k: v for k, v in changes.items() if v is not None})
    return build_config(values)
