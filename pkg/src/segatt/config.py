"""Experiment configuration: one JSON document per run.

Top-level keys::

    seed             required; every random stream derives from it
    output_dir       experiment directory (default "runs/<name>")
    name             experiment id used in report names
    silence_variant  none | no_split | split
    corpus           CorpusSpec fields except seed
    model            ModelConfig fields (vocab_size/input_dim derived if absent)
    train            TrainConfig fields except seed
    search           SearchConfig fields

Unknown keys anywhere are rejected.
"""
from __future__ import annotations

import copy
import hashlib
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

from segatt.data import CorpusSpec
from segatt.model import SILENCE_VARIANTS, ModelConfig
from segatt.search import SearchConfig
from segatt.train import TrainConfig

TOP_KEYS = {"seed", "output_dir", "name", "silence_variant", "corpus", "model", "train", "search"}


class ConfigError(ValueError):
    pass


def substream_seed(seed: int, name: str) -> int:
    """Independent 63-bit seed for the named random stream."""
    digest = hashlib.sha256(f"{seed}/{name}".encode()).digest()
    return int.from_bytes(digest[:8], "little") >> 1


@dataclass
class ExperimentConfig:
    seed: int
    name: str = "experiment"
    output_dir: str = ""
    silence_variant: str = "none"
    corpus: dict = field(default_factory=dict)
    model: dict = field(default_factory=dict)
    train: dict = field(default_factory=dict)
    search: dict = field(default_factory=dict)

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        if not isinstance(d, dict):
            raise ConfigError("experiment config must be a JSON object")
        unknown = set(d) - TOP_KEYS
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        if "seed" not in d:
            raise ConfigError("config lacks the required 'seed' key")
        if not isinstance(d["seed"], int) or isinstance(d["seed"], bool) or d["seed"] < 0:
            raise ConfigError(f"seed must be a nonnegative integer, got {d['seed']!r}")
        for sec in ("corpus", "model", "train", "search"):
            if not isinstance(d.get(sec, {}), dict):
                raise ConfigError(f"section {sec!r} must be an object")
            if "seed" in d.get(sec, {}):
                raise ConfigError(f"'seed' is set once at top level, not in section {sec!r}")
        cfg = cls(**copy.deepcopy(d))
        if cfg.silence_variant not in SILENCE_VARIANTS:
            raise ConfigError(f"silence_variant must be one of {SILENCE_VARIANTS}")
        if not cfg.output_dir:
            cfg.output_dir = str(Path("runs") / cfg.name)
        try:
            cfg.corpus_spec()
            cfg.model_config()
            cfg.train_config()
            cfg.search_config()
        except (TypeError, ValueError) as e:
            raise ConfigError(str(e)) from e
        return cfg

    @classmethod
    def load(cls, path: str | Path) -> "ExperimentConfig":
        try:
            data = json.loads(Path(path).read_text())
        except json.JSONDecodeError as e:
            raise ConfigError(f"{path}: {e}") from e
        return cls.from_dict(data)

    def to_dict(self) -> dict:
        return asdict(self)

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()

    # resolved component configs

    def corpus_spec(self) -> CorpusSpec:
        return CorpusSpec.from_dict({**self.corpus, "seed": substream_seed(self.seed, "corpus")})

    def model_config(self) -> ModelConfig:
        spec = CorpusSpec.from_dict(self.corpus)
        d = dict(self.model)
        derived = {"vocab_size": spec.vocab_size(self.silence_variant), "input_dim": spec.input_dim}
        for k, v in derived.items():
            if k in d and d[k] != v:
                raise ConfigError(f"model.{k}={d[k]} disagrees with the corpus ({v})")
            d[k] = v
        d.setdefault("silence_variant", self.silence_variant)
        if d["silence_variant"] != self.silence_variant:
            raise ConfigError("model.silence_variant disagrees with silence_variant")
        cfg = ModelConfig.from_dict(d)
        if cfg.downsampling != spec.downsampling:
            raise ConfigError(f"pool factors give downsampling {cfg.downsampling}, corpus uses {spec.downsampling}")
        return cfg

    def init_seed(self) -> int:
        return substream_seed(self.seed, "init")

    def train_config(self) -> TrainConfig:
        return TrainConfig.from_dict({**self.train, "seed": substream_seed(self.seed, "shuffle")})

    def search_config(self) -> SearchConfig:
        return SearchConfig.from_dict(self.search)
