"""Run configuration files: YAML documents mirroring the library dataclasses.

Three optional sections -- ``data``, ``train``, ``eval`` -- with every field
optional and defaulted. Unknown keys at any level are a hard error so typos
never silently fall back to defaults.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import yaml

from .data import ConfigError, SyntheticConfig
from .trainer import TrainConfig

PROTOCOL_ALIASES = {"general": "general", "cc": "clothes_change", "clothes_change": "clothes_change"}


@dataclass(frozen=True)
class EvalOptions:
    protocol: str = "general"
    max_rank: int = 20

    def validate(self) -> None:
        if self.protocol not in PROTOCOL_ALIASES:
            raise ConfigError(f"protocol must be one of {sorted(PROTOCOL_ALIASES)}, got {self.protocol!r}")
        if self.max_rank < 1:
            raise ConfigError(f"max_rank must be >= 1, got {self.max_rank}")

    @property
    def resolved_protocol(self) -> str:
        return PROTOCOL_ALIASES[self.protocol]

    @classmethod
    def from_dict(cls, d: dict) -> "EvalOptions":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown eval config key(s): {sorted(unknown)}")
        return cls(**d)


@dataclass
class RunConfig:
    data: SyntheticConfig = field(default_factory=SyntheticConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    eval: EvalOptions = field(default_factory=EvalOptions)

    def validate(self) -> None:
        self.data.validate()
        self.train.validate()
        self.eval.validate()

    def to_dict(self) -> dict:
        return {
            "data": self.data.to_dict(),
            "train": self.train.to_dict(),
            "eval": dataclasses.asdict(self.eval),
        }

    def with_seed(self, seed: int) -> "RunConfig":
        return RunConfig(
            data=dataclasses.replace(self.data, seed=seed),
            train=dataclasses.replace(self.train, seed=seed),
            eval=self.eval,
        )


def load_run_config(path: str | Path | None) -> RunConfig:
    """Parse a YAML run config; None or an empty file yields all defaults."""
    if path is None:
        return RunConfig()
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    doc = yaml.safe_load(path.read_text())
    if doc is None:
        return RunConfig()
    if not isinstance(doc, dict):
        raise ConfigError(f"config root must be a mapping, got {type(doc).__name__}")
    unknown = set(doc) - {"data", "train", "eval"}
    if unknown:
        raise ConfigError(f"unknown config section(s): {sorted(unknown)}")
    try:
        return RunConfig(
            data=SyntheticConfig.from_dict(doc.get("data", {}) or {}),
            train=TrainConfig.from_dict(doc.get("train", {}) or {}),
            eval=EvalOptions.from_dict(doc.get("eval", {}) or {}),
        )
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc


def config_hash(config: RunConfig) -> str:
    """Short content hash of a resolved config, used to name run directories."""
    blob = json.dumps(config.to_dict(), sort_keys=True).encode()
    return hashlib.sha256(blob).hexdigest()[:8]


def dump_config(config: RunConfig) -> str:
    return yaml.safe_dump(config.to_dict(), sort_keys=False)
