"""Declarative run configuration: defaults, JSON file, CLI overrides.

A run config has four sections (gen, model, train, gate) plus a top-level
seed that feeds the section seeds unless they are set explicitly. Precedence
is CLI flag > config file > defaults; unknown keys are rejected by name. The
resolved config is echoed into every artifact together with git-style content
hashes of the input files.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, fields

from .backbone import ModelConfig
from .synthdata import GenConfig
from .training import TrainConfig

MECHANISMS = ("none", "threshold", "learned")
COST_MODES = ("cumulative", "marginal")


class ConfigError(ValueError):
    pass


@dataclass
class GateConfig:
    mechanism: str = "none"
    tau_var: float = 1.0
    tau_gate: float = 1.0
    lam: float = 10.0
    cost_mode: str = "cumulative"

    def validate(self) -> "GateConfig":
        if self.mechanism not in MECHANISMS:
            raise ConfigError(f"gate.mechanism must be one of {MECHANISMS}, "
                              f"got {self.mechanism!r}")
        if self.cost_mode not in COST_MODES:
            raise ConfigError(f"gate.cost_mode must be one of {COST_MODES}, "
                              f"got {self.cost_mode!r}")
        if self.tau_gate <= 0:
            raise ConfigError(f"gate.tau_gate must be positive, got {self.tau_gate}")
        if self.lam < 0:
            raise ConfigError(f"gate.lam must be non-negative, got {self.lam}")
        return self


_SECTIONS = {"gen": GenConfig, "model": ModelConfig, "train": TrainConfig,
             "gate": GateConfig}


class RunConfig:
    def __init__(self):
        self.seed = 0
        self.gen = GenConfig()
        self.model = ModelConfig()
        self.train = TrainConfig()
        self.gate = GateConfig()
        self.explicit: set[str] = set()

    def apply(self, values: dict):
        """Merge one source of settings; later calls win. Keys are either
        top-level ('seed') or nested under a section name."""
        if not isinstance(values, dict):
            raise ConfigError(f"config must be a JSON object, got {type(values).__name__}")
        if "seed" in values:
            seed = values["seed"]
            if not isinstance(seed, int) or isinstance(seed, bool):
                raise ConfigError(f"seed must be an integer, got {seed!r}")
            self.seed = seed
            self.gen.seed = seed
            self.train.seed = seed
            self.explicit.add("seed")
        for section, payload in values.items():
            if section == "seed":
                continue
            if section not in _SECTIONS:
                raise ConfigError(f"unknown config key: {section}")
            if not isinstance(payload, dict):
                raise ConfigError(f"config section {section!r} must be an object")
            target = getattr(self, section)
            known = {f.name: f.type for f in fields(target)}
            for key, value in payload.items():
                if key not in known:
                    raise ConfigError(f"unknown config key: {section}.{key}")
                current = getattr(target, key)
                if isinstance(current, tuple) and isinstance(value, list):
                    value = tuple(value)
                setattr(target, key, value)
                self.explicit.add(f"{section}.{key}")
        return self

    def validate(self) -> "RunConfig":
        try:
            self.gen.validate()
            self.model.validate()
            self.train.validate()
            self.gate.validate()
        except ValueError as e:
            raise ConfigError(str(e)) from e
        return self

    def resolved(self) -> dict:
        return {"seed": self.seed,
                "gen": asdict(self.gen),
                "model": asdict(self.model),
                "train": asdict(self.train),
                "gate": asdict(self.gate)}

    def was_set(self, dotted: str) -> bool:
        return dotted in self.explicit


def load_config(path=None, overrides: dict | None = None) -> RunConfig:
    """Defaults, then the JSON file, then explicit overrides."""
    rc = RunConfig()
    if path is not None:
        try:
            with open(path) as fh:
                data = json.load(fh)
        except OSError as e:
            raise ConfigError(f"cannot read config file {path}: {e}") from e
        except json.JSONDecodeError as e:
            raise ConfigError(f"config file {path} is not valid JSON: {e}") from e
        rc.apply(data)
    if overrides:
        rc.apply(overrides)
    return rc.validate()


def content_hash(data: bytes) -> str:
    """Git blob hash: sha1 over 'blob <len>\\0' + content."""
    h = hashlib.sha1()
    h.update(b"blob %d\x00" % len(data))
    h.update(data)
    return h.hexdigest()


def file_hash(path) -> str:
    with open(path, "rb") as fh:
        return content_hash(fh.read())
