"""Experiment configuration shared by every CLI command.

A config file is JSON with optional sections; every key is checked::

    {
      "seed": 0,
      "sim":   {"L": 20, "horizon": 30, ...},               # SimConfig fields
      "data":  {"n_trajectories": 500, "base_seed": 0,
                "split": [0.8, 0.1, 0.1], "split_seed": 0},
      "model": {"preset": "desk", "lr": 1e-4, ...},         # Hyperparams fields
      "eval":  {"warmup": 5, "horizon": 20, "rollouts": 100, "seed": 0,
                "topology_eps": 1e-6, "min_crossings": 1},
      "bench": {"steps": 100, "repeats": 10, "sim_steps": 5, "sim_repeats": 3}
    }

A run manifest written by the CLI is also accepted; its ``config`` entry is used.
Dotted overrides such as ``model.lr=3e-4`` apply on top of the file.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

from .errors import ConfigError
from .rssm import Hyperparams
from .simulator import SimConfig

@dataclass(frozen=True)
class DataConfig:
    n_trajectories: int = 500
    base_seed: int = 0
    split: tuple = (0.8, 0.1, 0.1)
    split_seed: int = 0

    def __post_init__(self):
        if self.n_trajectories < 1:
            raise ConfigError("data.n_trajectories must be at least 1")
        if len(self.split) != 3 or abs(sum(self.split) - 1.0) > 1e-9 or min(self.split) < 0:
            raise ConfigError("data.split must be three non-negative fractions summing to 1")
        object.__setattr__(self, "split", tuple(float(x) for x in self.split))


@dataclass(frozen=True)
class EvalConfig:
    warmup: int = 5
    horizon: int = 20
    rollouts: int = 100
    seed: int = 0
    topology_eps: float = 1e-6
    min_crossings: int = 1

    def __post_init__(self):
        if self.warmup < 1 or self.horizon < 1 or self.rollouts < 1:
            raise ConfigError("eval.warmup, eval.horizon and eval.rollouts must be at least 1")
        if not self.topology_eps > 0:
            raise ConfigError("eval.topology_eps must be positive")


@dataclass(frozen=True)
class BenchConfig:
    steps: int = 100
    repeats: int = 10
    sim_steps: int = 5
    sim_repeats: int = 3

    def __post_init__(self):
        if min(self.steps, self.repeats, self.sim_steps, self.sim_repeats) < 1:
            raise ConfigError("bench counts must be at least 1")


@dataclass(frozen=True)
class ExperimentConfig:
    seed: int = 0
    sim: SimConfig = field(default_factory=SimConfig)
    data: DataConfig = field(default_factory=DataConfig)
    model: Hyperparams = field(default_factory=lambda: Hyperparams.preset("desk"))
    preset: str = "desk"
    eval: EvalConfig = field(default_factory=EvalConfig)
    bench: BenchConfig = field(default_factory=BenchConfig)

    def to_dict(self) -> dict:
        model = asdict(self.model)
        model["preset"] = self.preset
        return {
            "seed": self.seed,
            "sim": self.sim.to_dict(),
            "data": {**asdict(self.data), "split": list(self.data.split)},
            "model": model,
            "eval": asdict(self.eval),
            "bench": asdict(self.bench),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        if not isinstance(d, dict):
            raise ConfigError("config must be a JSON object")
        if "config" in d and "command" in d:
            d = d["config"]
        unknown = set(d) - {"seed", "sim", "data", "model", "eval", "bench"}
        if unknown:
            raise ConfigError(f"unknown config sections: {sorted(unknown)}")
        model = dict(d.get("model", {}))
        preset = model.pop("preset", "desk")
        base = Hyperparams.preset(preset)
        unknown = set(model) - {f.name for f in fields(Hyperparams)}
        if unknown:
            raise ConfigError(f"unknown model keys: {sorted(unknown)}")
        try:
            return cls(
                seed=int(d.get("seed", 0)),
                sim=SimConfig.from_dict(d.get("sim", {})),
                data=_section(DataConfig, d.get("data", {}), "data"),
                model=replace(base, **model),
                preset=preset,
                eval=_section(EvalConfig, d.get("eval", {}), "eval"),
                bench=_section(BenchConfig, d.get("bench", {}), "bench"),
            )
        except TypeError as exc:
            raise ConfigError(str(exc)) from None


def _section(kind, values: dict, name: str):
    if not isinstance(values, dict):
        raise ConfigError(f"section {name!r} must be an object")
    unknown = set(values) - {f.name for f in fields(kind)}
    if unknown:
        raise ConfigError(f"unknown {name} keys: {sorted(unknown)}")
    return kind(**values)


def _parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def apply_overrides(d: dict, overrides) -> dict:
    """Apply ``section.key=value`` strings (values parsed as JSON when possible)."""
    out = json.loads(json.dumps(d))
    for item in overrides or ():
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not of the form key=value")
        key, value = item.split("=", 1)
        parts = key.strip().split(".")
        node = out
        for p in parts[:-1]:
            node = node.setdefault(p, {})
            if not isinstance(node, dict):
                raise ConfigError(f"override {key!r} descends into a non-section")
        node[parts[-1]] = _parse_value(value)
    return out


def load_config(path=None, overrides=()) -> ExperimentConfig:
    d = {}
    if path is not None:
        try:
            d = json.loads(Path(path).read_text(encoding="utf-8"))
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from None
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config {path} is not valid JSON: {exc}") from None
        if isinstance(d, dict) and "config" in d and "command" in d:
            d = d["config"]
    return ExperimentConfig.from_dict(apply_overrides(d, overrides))
