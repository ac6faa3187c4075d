"""Run configuration: one JSON document, every key checked against a schema.

Sections: ``data``, ``model`` (with nested ``encoder`` and ``stats``),
``train``, ``eval``, ``synth``, ``sweep``, ``paths``; plus top-level ``name``,
``seed`` and ``threads``. Missing keys take defaults; unknown keys are errors.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Any

from . import data as D
from .lossfx import STATS_FEATURES, EncoderConfig, StatsConfig
from .meta import MetaLearner, TrainConfig
from .recommender import RecommenderConfig


class ConfigError(ValueError):
    pass


@dataclass
class DataSection:
    k: int = 5
    min_item_ratings: int = 50
    max_length: int = 30
    min_length: int = 5
    n_support: int = 25
    n_query: int = 3
    split: tuple[float, float, float] = (0.7, 0.1, 0.2)


@dataclass
class ModelSection:
    architecture: str = "recurrent"
    embed_dim: int = 64
    hidden_dim: int = 64
    n_layers: int = 1
    encoder: dict = field(default_factory=lambda: {"embed_dim": 16, "hidden_dim": 32, "activation": "softplus"})
    stats: dict = field(default_factory=lambda: {"hidden_dim": 32, "features": list(STATS_FEATURES)})


@dataclass
class EvalSection:
    warmup: int = 2
    case_users_per_type: int = 5
    case_length_range: tuple[int, int] = (10, 20)
    case_checkpoints: dict = field(default_factory=dict)


@dataclass
class SynthSection:
    profiles: list = field(default_factory=lambda: ["generous", "fair", "grumpy"])
    weights: list = field(default_factory=lambda: [0.7, 0.2, 0.1])
    n_users: int = 1000
    n_items: int = 200
    length_range: tuple[int, int] = (5, 10)


@dataclass
class SweepSection:
    protocol: str = "inner_steps"
    grid: list = field(default_factory=lambda: [0, 1, 2, 3, 4, 5])
    modes: list = field(default_factory=lambda: ["maml", "melo"])
    seeds: list = field(default_factory=lambda: [0, 1, 2])


@dataclass
class PathsSection:
    dataset: str = ""
    prepared: str = ""
    checkpoint: str = ""
    out: str = ""


@dataclass
class RunConfig:
    name: str = "run"
    seed: int = 0
    threads: int = 1
    data: DataSection = field(default_factory=DataSection)
    model: ModelSection = field(default_factory=ModelSection)
    train: dict = field(default_factory=dict)
    eval: EvalSection = field(default_factory=EvalSection)
    synth: SynthSection = field(default_factory=SynthSection)
    sweep: SweepSection = field(default_factory=SweepSection)
    paths: PathsSection = field(default_factory=PathsSection)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["train"] = _train_dict(self.train)
        return json.loads(json.dumps(d))  # tuples -> lists

    def train_config(self) -> TrainConfig:
        return TrainConfig(**{**self.train, "seed": self.seed})

    def learner(self, item_vocab: int) -> MetaLearner:
        m = self.model
        rec = RecommenderConfig(m.architecture, item_vocab, m.embed_dim, m.hidden_dim, m.n_layers, self.data.max_length)
        enc = EncoderConfig(k=self.data.k, **m.encoder)
        st = StatsConfig(k=self.data.k, **{**m.stats, "features": tuple(m.stats.get("features", STATS_FEATURES))})
        return MetaLearner(rec, self.train_config(), enc, st, self.data.k)

    def profiles(self) -> list[D.RatingProfile]:
        out = []
        lr = tuple(self.synth.length_range)
        for p in self.synth.profiles:
            if isinstance(p, str):
                if p not in D.USER_TYPES:
                    raise ConfigError(f"synth.profiles: unknown profile {p!r}")
                base = D.USER_TYPES[p]
                out.append(D.RatingProfile(base.name, base.proportions, lr))
            elif isinstance(p, dict):
                extra = set(p) - {"name", "proportions", "length_range"}
                if extra:
                    raise ConfigError(f"synth.profiles: unknown keys {sorted(extra)}")
                out.append(D.RatingProfile(p.get("name", "custom"), tuple(p["proportions"]), tuple(p.get("length_range", lr))))
            else:
                raise ConfigError("synth.profiles entries must be names or objects")
        return out


def _train_dict(overrides: dict) -> dict:
    d = asdict(TrainConfig())
    d.pop("seed")
    d.update(overrides)
    return d


_TRAIN_KEYS = {f.name for f in fields(TrainConfig)} - {"seed"}


def _section(cls, raw: Any, where: str):
    if raw is None:
        return cls()
    if not isinstance(raw, dict):
        raise ConfigError(f"{where}: expected an object")
    known = {f.name for f in fields(cls)}
    unknown = set(raw) - known
    if unknown:
        raise ConfigError(f"{where}: unknown keys {sorted(unknown)}")
    return cls(**raw)


def from_dict(raw: dict) -> RunConfig:
    if not isinstance(raw, dict):
        raise ConfigError("config must be a JSON object")
    top = {f.name for f in fields(RunConfig)}
    unknown = set(raw) - top
    if unknown:
        raise ConfigError(f"unknown top-level keys {sorted(unknown)}")
    train = raw.get("train") or {}
    bad = set(train) - _TRAIN_KEYS
    if bad:
        raise ConfigError(f"train: unknown keys {sorted(bad)}")
    model = _section(ModelSection, raw.get("model"), "model")
    enc_keys = {"embed_dim", "hidden_dim", "activation"}
    stats_keys = {"hidden_dim", "features"}
    if set(model.encoder) - enc_keys:
        raise ConfigError(f"model.encoder: unknown keys {sorted(set(model.encoder) - enc_keys)}")
    if set(model.stats) - stats_keys:
        raise ConfigError(f"model.stats: unknown keys {sorted(set(model.stats) - stats_keys)}")
    model.encoder = {**ModelSection().encoder, **model.encoder}
    model.stats = {**ModelSection().stats, **model.stats}
    cfg = RunConfig(
        name=str(raw.get("name", "run")),
        seed=int(raw.get("seed", 0)),
        threads=int(raw.get("threads", 1)),
        data=_section(DataSection, raw.get("data"), "data"),
        model=model,
        train=dict(train),
        eval=_section(EvalSection, raw.get("eval"), "eval"),
        synth=_section(SynthSection, raw.get("synth"), "synth"),
        sweep=_section(SweepSection, raw.get("sweep"), "sweep"),
        paths=_section(PathsSection, raw.get("paths"), "paths"),
    )
    validate(cfg)
    return cfg


def validate(cfg: RunConfig) -> None:
    """Construct every typed config once so bad values fail before any work."""
    if cfg.threads < 1:
        raise ConfigError("threads must be >= 1")
    try:
        cfg.learner(item_vocab=2)
        for p in cfg.profiles():
            p.validate()
    except (TypeError, ValueError) as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(str(exc)) from exc
    if cfg.sweep.protocol not in ("length", "inner_steps"):
        raise ConfigError(f"sweep.protocol must be 'length' or 'inner_steps', got {cfg.sweep.protocol!r}")


def load(path: str | Path) -> RunConfig:
    path = Path(path)
    try:
        raw = json.loads(path.read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from None
    cfg = from_dict(raw)
    base = path.resolve().parent
    for f in fields(PathsSection):
        value = getattr(cfg.paths, f.name)
        if value and not Path(value).is_absolute():
            setattr(cfg.paths, f.name, str(base / value))
    cfg.eval.case_checkpoints = {
        k: (v if Path(v).is_absolute() else str(base / v)) for k, v in cfg.eval.case_checkpoints.items()
    }
    return cfg
