"""`key = value` run configuration covering model, Soft-DTW and corpus settings."""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable

from .data import SyntheticCorpusSpec
from .model import ModelConfig

# shared names (vocab_size, feature_dim, seed) set both sections
_MODEL_KEYS = {f.name: f for f in dataclasses.fields(ModelConfig)}
_CORPUS_KEYS = {f.name: f for f in dataclasses.fields(SyntheticCorpusSpec)}
_RUN_KEYS = {"steps": int, "holdout": float, "log_every": int, "threads": int}


class ConfigError(ValueError):
    pass


def _coerce(key: str, raw: str, typ):
    typ = {"int": int, "float": float, "str": str, "bool": bool}.get(typ, typ) if isinstance(typ, str) else typ
    try:
        if typ is int:
            return int(raw)
        if typ is float:
            return float(raw)
        if typ is bool:
            if raw.lower() in ("1", "true", "yes"):
                return True
            if raw.lower() in ("0", "false", "no"):
                return False
            raise ValueError(raw)
        return raw
    except ValueError:
        raise ConfigError(f"bad value for {key!r}: {raw!r}") from None


def known_keys() -> list[str]:
    return sorted(set(_MODEL_KEYS) | set(_CORPUS_KEYS) | set(_RUN_KEYS))


@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    corpus: SyntheticCorpusSpec = field(default_factory=SyntheticCorpusSpec)
    steps: int = 2000
    holdout: float = 0.1
    log_every: int = 10
    threads: int = 1

    @classmethod
    def from_pairs(cls, pairs: Iterable[tuple[str, str]]) -> "RunConfig":
        model, corpus, run = {}, {}, {}
        for key, raw in pairs:
            key = key.strip().replace("-", "_")
            if key not in _MODEL_KEYS and key not in _CORPUS_KEYS and key not in _RUN_KEYS:
                raise ConfigError(f"unknown config key {key!r}")
            if key in _MODEL_KEYS:
                model[key] = _coerce(key, raw, _MODEL_KEYS[key].type)
            if key in _CORPUS_KEYS:
                corpus[key] = _coerce(key, raw, _CORPUS_KEYS[key].type)
            if key in _RUN_KEYS:
                run[key] = _coerce(key, raw, _RUN_KEYS[key])
        try:
            return cls(ModelConfig(**model), SyntheticCorpusSpec(**corpus), **run)
        except ValueError as exc:
            raise ConfigError(str(exc)) from None

    def format(self) -> str:
        values = {**dataclasses.asdict(self.corpus), **dataclasses.asdict(self.model),
                  "steps": self.steps, "holdout": self.holdout, "log_every": self.log_every, "threads": self.threads}
        return "\n".join(f"{k} = {values[k]}" for k in sorted(values))


def parse_config_text(text: str) -> list[tuple[str, str]]:
    pairs = []
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {line!r}")
        key, value = line.split("=", 1)
        pairs.append((key.strip(), value.strip()))
    return pairs


def load_run_config(path=None, overrides: Iterable[tuple[str, str]] = ()) -> RunConfig:
    pairs = []
    if path is not None:
        pairs.extend(parse_config_text(Path(path).read_text()))
    pairs.extend(overrides)
    return RunConfig.from_pairs(pairs)
