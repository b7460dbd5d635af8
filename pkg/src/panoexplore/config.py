"""Run configuration: one JSON document with explicit defaults.

Every section is a flat dataclass. Unknown keys, wrong types and invalid
values raise :class:`ConfigError` before any work starts.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

from .harness import POLICY_KINDS
from .nets import PROFILES
from .trainer import TrainConfig


class ConfigError(ValueError):
    pass


@dataclass
class DataConfig:
    manifest: str | None = None
    train_split: str = "train"
    eval_split: str = "test"
    limit: int | None = None  # use only the first N entries of a split


@dataclass
class SynthConfig:
    count: int = 2600
    test_every: int = 10


@dataclass
class EvalConfig:
    checkpoint: str | None = None
    policies: list[str] = field(default_factory=lambda: ["learned", "random", "gt-oracle"])
    glimpses: int = 8
    seeds: int = 5
    batch_size: int = 100
    reference: bool = False


@dataclass
class ExploreConfig:
    checkpoint: str | None = None
    image: str | None = None
    glimpses: int = 5


@dataclass
class RunConfig:
    profile: str = "full"
    seed: int = 0
    out: str | None = None
    data: DataConfig = field(default_factory=DataConfig)
    synth: SynthConfig = field(default_factory=SynthConfig)
    train: dict = field(default_factory=dict)  # TrainConfig fields minus profile/seed
    eval: EvalConfig = field(default_factory=EvalConfig)
    explore: ExploreConfig = field(default_factory=ExploreConfig)
    resume: str | None = None
    init: str | None = None  # exploration checkpoint to start a classification run from

    def train_config(self) -> TrainConfig:
        try:
            return TrainConfig(**{**self.train, "profile": self.profile, "seed": self.seed})
        except (TypeError, ValueError) as e:
            raise ConfigError(f"train: {e}") from None

    def to_json(self) -> str:
        d = asdict(self)
        d["train"] = {k: v for k, v in asdict(self.train_config()).items() if k not in ("profile", "seed")}
        return json.dumps(d, indent=2, sort_keys=True) + "\n"

    def validate(self) -> RunConfig:
        if self.profile not in PROFILES:
            raise ConfigError(f"profile must be one of {sorted(PROFILES)}, got {self.profile!r}")
        if not isinstance(self.seed, int) or self.seed < 0:
            raise ConfigError("seed must be a non-negative integer")
        self.train_config()
        for p in self.eval.policies:
            if p not in POLICY_KINDS:
                raise ConfigError(f"unknown policy {p!r}; expected one of {POLICY_KINDS}")
        if not self.eval.policies:
            raise ConfigError("eval.policies is empty")
        for name, value in [
            ("eval.glimpses", self.eval.glimpses),
            ("eval.seeds", self.eval.seeds),
            ("eval.batch_size", self.eval.batch_size),
            ("explore.glimpses", self.explore.glimpses),
            ("synth.count", self.synth.count),
            ("synth.test_every", self.synth.test_every),
        ]:
            if not isinstance(value, int) or isinstance(value, bool) or value < 1:
                raise ConfigError(f"{name} must be a positive integer")
        if self.data.limit is not None and (not isinstance(self.data.limit, int) or self.data.limit < 1):
            raise ConfigError("data.limit must be a positive integer or null")
        return self


_SECTIONS = {"data": DataConfig, "synth": SynthConfig, "eval": EvalConfig, "explore": ExploreConfig}
_TRAIN_KEYS = {f.name for f in dataclasses.fields(TrainConfig)} - {"profile", "seed"}


def _section(cls, raw, where):
    if not isinstance(raw, dict):
        raise ConfigError(f"{where} must be an object")
    known = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(raw) - known)
    if unknown:
        raise ConfigError(f"unknown key(s) in {where}: {', '.join(unknown)}")
    return cls(**raw)


def from_dict(raw: dict) -> RunConfig:
    if not isinstance(raw, dict):
        raise ConfigError("config must be a JSON object")
    top = {f.name for f in dataclasses.fields(RunConfig)}
    unknown = sorted(set(raw) - top)
    if unknown:
        raise ConfigError(f"unknown key(s): {', '.join(unknown)}")
    kwargs = {k: v for k, v in raw.items() if k not in _SECTIONS and k != "train"}
    for name, cls in _SECTIONS.items():
        if name in raw:
            kwargs[name] = _section(cls, raw[name], name)
    train = raw.get("train", {})
    if not isinstance(train, dict):
        raise ConfigError("train must be an object")
    bad = sorted(set(train) - _TRAIN_KEYS)
    if bad:
        raise ConfigError(f"unknown key(s) in train: {', '.join(bad)}")
    kwargs["train"] = dict(train)
    return RunConfig(**kwargs).validate()


def load_config(path) -> RunConfig:
    try:
        raw = json.loads(Path(path).read_text())
    except OSError as e:
        raise ConfigError(f"cannot read config {path}: {e.strerror}") from None
    except json.JSONDecodeError as e:
        raise ConfigError(f"{path}:{e.lineno}: invalid JSON: {e.msg}") from None
    return from_dict(raw)
