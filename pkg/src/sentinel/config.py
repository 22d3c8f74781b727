"""Sectioned INI run configuration with aggregated validation."""

from __future__ import annotations

import configparser
import os
from dataclasses import dataclass, field
from datetime import date
from pathlib import Path

from .daygraph import AGGREGATORS, TrainConfig
from .embed import API_KEY_ENV, EmbeddingProviderSpec
from .errors import ConfigError
from .ingest import DEFAULT_ANON_KEY, DEFAULT_START
from .pipeline import ForestConfig

DATE_ORDERS = ("iso", "dmy", "mdy")
SPLIT_KINDS = ("stratified", "temporal")
PROVIDER_KINDS = ("local-hash", "remote")

# section -> allowed keys
KNOWN_KEYS = {
    "paths": {"groups_dir", "events", "out_dir", "cache"},
    "provider": {"kind", "dim", "model", "endpoint", "batch_limit", "max_inflight", "hash_seed", "api_key"},
    "data": {"start", "date_order", "range", "anon_key"},
    "graph": {"hidden", "embed", "learning_rate", "epochs", "pos_weight", "aggregator"},
    "forest": {"n_trees", "max_depth", "min_leaf", "class_weight", "n_jobs"},
    "split": {"kind", "ratio"},
    "run": {"seed", "n_seeds", "keywords", "top_n", "top_k", "drift_terms"},
}


@dataclass(frozen=True)
class RunConfig:
    groups_dir: Path
    events: Path
    out_dir: Path
    cache: Path | None = None
    provider: EmbeddingProviderSpec = EmbeddingProviderSpec()
    max_inflight: int = 4
    api_key: str | None = field(default=None, repr=False)
    start: date = DEFAULT_START
    date_order: str = "iso"
    day_range: tuple[date, date] | None = None
    anon_key: bytes = field(default=DEFAULT_ANON_KEY, repr=False)
    graph: TrainConfig = TrainConfig()
    forest: ForestConfig = ForestConfig()
    split_kind: str = "stratified"
    ratio: float = 0.7
    seed: int = 0
    n_seeds: int = 5
    keywords: tuple[str, ...] | None = None
    top_n: int = 50
    top_k: int = 10
    drift_terms: int = 20

    @property
    def seeds(self) -> list[int]:
        return [self.seed + i for i in range(self.n_seeds)]

    @property
    def cache_path(self) -> Path:
        return self.cache or self.out_dir / "embeddings.bin"

    def hyperparameters(self) -> dict:
        """Resolved settings for the run report; secrets and paths are left out."""
        g = self.graph
        f = self.forest
        return {
            "provider": {"kind": self.provider.kind, "dim": self.provider.dim,
                         "model": self.provider.model_name if self.provider.kind == "remote" else None,
                         "batch_limit": self.provider.batch_limit, "hash_seed": self.provider.seed,
                         "max_inflight": self.max_inflight},
            "data": {"start": self.start.isoformat(), "date_order": self.date_order,
                     "range": None if self.day_range is None else [d.isoformat() for d in self.day_range]},
            "graph": {"hidden": g.hidden_dim, "embed": g.embed_dim, "learning_rate": g.learning_rate,
                      "epochs": g.epochs, "pos_weight": g.pos_weight, "aggregator": g.aggregator,
                      "beta1": g.beta1, "beta2": g.beta2, "adam_eps": g.adam_eps},
            "forest": {"n_trees": f.n_trees, "max_depth": f.max_depth, "min_leaf": f.min_leaf,
                       "max_features": "ceil(sqrt(d))", "class_weight": f.class_weight},
            "split": {"kind": self.split_kind, "ratio": self.ratio},
            "run": {"seeds": self.seeds, "keywords": None if self.keywords is None else list(self.keywords),
                    "top_n": self.top_n, "top_k": self.top_k, "drift_terms": self.drift_terms},
        }


class _Fields:
    """Pulls typed values out of a parser, collecting every problem."""

    def __init__(self, parser: configparser.ConfigParser):
        self.p = parser
        self.errors: list[str] = []

    def raw(self, section: str, key: str) -> str | None:
        if self.p.has_option(section, key):
            v = self.p.get(section, key).strip()
            return v or None
        return None

    def get(self, section, key, conv, default, check=None, msg=None):
        text = self.raw(section, key)
        if text is None:
            return default
        try:
            value = conv(text)
        except ValueError:
            self.errors.append(f"[{section}] {key}: cannot parse {text!r} as {getattr(conv, '__name__', 'value')}")
            return default
        if check is not None and not check(value):
            self.errors.append(msg or f"[{section}] {key}: invalid value {text!r}")
            return default
        return value

    def choice(self, section, key, options, default):
        return self.get(section, key, str, default, lambda v: v in options,
                        f"{key} must be one of {', '.join(options)}")


def _opt_int(text: str) -> int | None:
    return None if text.lower() == "none" else int(text)


def _opt_float(text: str) -> float | None:
    return None if text.lower() in ("none", "auto") else float(text)


def _opt_str(text: str) -> str | None:
    return None if text.lower() == "none" else text


def parse_range(text: str) -> tuple[date, date]:
    a, sep, b = text.partition(":")
    if not sep:
        raise ValueError(text)
    lo, hi = date.fromisoformat(a.strip()), date.fromisoformat(b.strip())
    if hi < lo:
        raise ValueError(text)
    return lo, hi


def validate_config(text: str, base_dir: Path | str = ".") -> RunConfig:
    """Parse and validate a config document; raises ConfigError listing every problem.

    Relative paths resolve against ``base_dir``. Input paths must exist.
    """
    parser = configparser.ConfigParser(interpolation=None)
    try:
        parser.read_string(text)
    except configparser.Error as exc:
        raise ConfigError([f"malformed config: {exc}"]) from None
    base = Path(base_dir)
    f = _Fields(parser)

    for section in parser.sections():
        if section not in KNOWN_KEYS:
            f.errors.append(f"unknown section [{section}]")
            continue
        for key in parser.options(section):
            if key not in KNOWN_KEYS[section]:
                f.errors.append(f"[{section}] unknown key {key!r}")

    def path(key: str, required: bool, must_exist: bool, is_dir: bool = False) -> Path | None:
        text = f.raw("paths", key)
        if text is None:
            if required:
                f.errors.append(f"[paths] {key} is required")
            return None
        p = Path(text)
        p = p if p.is_absolute() else base / p
        if must_exist:
            ok = p.is_dir() if is_dir else p.is_file()
            if not ok:
                f.errors.append(f"[paths] {key}: {'directory' if is_dir else 'file'} not found: {p}")
        return p

    groups_dir = path("groups_dir", True, True, is_dir=True)
    events = path("events", True, True)
    out_dir = path("out_dir", True, False)
    cache = path("cache", False, False)

    kind = f.choice("provider", "kind", PROVIDER_KINDS, "local-hash")
    default_dim = 1536 if kind == "remote" else 32
    spec = EmbeddingProviderSpec(
        kind=kind,
        model_name=f.get("provider", "model", str, EmbeddingProviderSpec.model_name),
        dim=f.get("provider", "dim", int, default_dim, lambda v: v >= 1, "dim must be >= 1"),
        batch_limit=f.get("provider", "batch_limit", int, 50, lambda v: v >= 1, "batch_limit must be >= 1"),
        seed=f.get("provider", "hash_seed", int, 0, lambda v: 0 <= v < 2**64, "hash_seed must be in [0, 2^64)"),
        endpoint=f.get("provider", "endpoint", str, EmbeddingProviderSpec.endpoint),
    )
    max_inflight = f.get("provider", "max_inflight", int, 4, lambda v: v >= 1, "max_inflight must be >= 1")
    api_key = os.environ.get(API_KEY_ENV) or f.raw("provider", "api_key")

    start = f.get("data", "start", date.fromisoformat, DEFAULT_START)
    date_order = f.choice("data", "date_order", DATE_ORDERS, "iso")
    day_range = f.get("data", "range", parse_range, None)
    anon = f.raw("data", "anon_key")

    hidden = f.get("graph", "hidden", int, 64, lambda v: v >= 1, "hidden must be >= 1")
    embed = f.get("graph", "embed", int, 32, lambda v: v >= 1, "embed must be >= 1")
    lr = f.get("graph", "learning_rate", float, 1e-2, lambda v: v > 0, "learning_rate must be > 0")
    epochs = f.get("graph", "epochs", int, 300, lambda v: v >= 1, "epochs must be >= 1")
    pos_weight = f.get("graph", "pos_weight", _opt_float, None, lambda v: v is None or v > 0, "pos_weight must be > 0")
    aggregator = f.choice("graph", "aggregator", AGGREGATORS, "typed")

    n_trees = f.get("forest", "n_trees", int, 251, lambda v: v >= 1 and v % 2 == 1, "n_trees must be a positive odd integer")
    max_depth = f.get("forest", "max_depth", _opt_int, None, lambda v: v is None or v >= 1, "max_depth must be >= 1")
    min_leaf = f.get("forest", "min_leaf", int, 1, lambda v: v >= 1, "min_leaf must be >= 1")
    class_weight = f.get("forest", "class_weight", _opt_str, None, lambda v: v in (None, "balanced"),
                         "class_weight must be none or balanced")
    n_jobs = f.get("forest", "n_jobs", int, 1, lambda v: v >= 1, "n_jobs must be >= 1")

    split_kind = f.choice("split", "kind", SPLIT_KINDS, "stratified")
    ratio = f.get("split", "ratio", float, 0.7, lambda v: 0 < v < 1, "ratio must be in (0, 1)")

    seed = f.get("run", "seed", int, 0, lambda v: v >= 0, "seed must be >= 0")
    n_seeds = f.get("run", "n_seeds", int, 5, lambda v: v >= 1, "n_seeds must be >= 1")
    keywords = f.get("run", "keywords", lambda s: tuple(k.strip().lower() for k in s.split(",") if k.strip()), None)
    top_n = f.get("run", "top_n", int, 50, lambda v: v >= 1, "top_n must be >= 1")
    top_k = f.get("run", "top_k", int, 10, lambda v: v >= 1, "top_k must be >= 1")
    drift_terms = f.get("run", "drift_terms", int, 20, lambda v: v >= 1, "drift_terms must be >= 1")

    if f.errors:
        raise ConfigError(f.errors)
    return RunConfig(
        groups_dir=groups_dir, events=events, out_dir=out_dir, cache=cache,
        provider=spec, max_inflight=max_inflight, api_key=api_key,
        start=start, date_order=date_order, day_range=day_range,
        anon_key=anon.encode("utf-8") if anon else DEFAULT_ANON_KEY,
        graph=TrainConfig(hidden, embed, lr, epochs, pos_weight, seed, aggregator),
        forest=ForestConfig(n_trees, max_depth, min_leaf, class_weight, n_jobs),
        split_kind=split_kind, ratio=ratio, seed=seed, n_seeds=n_seeds, keywords=keywords,
        top_n=top_n, top_k=top_k, drift_terms=drift_terms,
    )


def load_config(path: Path | str) -> RunConfig:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError([f"cannot read config {path}: {exc.strerror}"]) from None
    return validate_config(text, path.parent)
