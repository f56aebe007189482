"""Experiment specifications and their config-file form (YAML; JSON also parses)."""
from __future__ import annotations

import copy
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Any

import yaml

from ..netgen import ChannelParams
from ..tgt import TgtConfig
from ..train import TrainConfig

METHODS = ("max_power", "wmmse", "tgt", "tgt_multinode")
SWEEPS = ("none", "network_size", "fading_scale", "field_half_width", "model_width", "noise_power")


class ConfigError(ValueError):
    pass


@dataclass
class ExperimentSpec:
    name: str
    methods: list[str] = field(default_factory=lambda: ["max_power", "wmmse", "tgt"])
    sweep: str = "none"
    sweep_values: list[float] = field(default_factory=list)
    n: int = 50
    channel: dict[str, Any] = field(default_factory=dict)
    eval_topologies: int = 50
    eval_fades: int = 50
    train_sizes: list[int] = field(default_factory=lambda: [50])
    train_topologies: int = 500
    train_fades: int = 50
    seeds: dict[str, int] = field(default_factory=lambda: {"data": 0, "eval": 1000, "train": 0})
    out_dir: str = "runs"
    checkpoints: dict[str, str] = field(default_factory=dict)
    train: dict[str, Any] = field(default_factory=dict)
    model: dict[str, Any] = field(default_factory=dict)
    options: dict[str, Any] = field(default_factory=dict)

    def __post_init__(self):
        unknown = [m for m in self.methods if m not in METHODS]
        if unknown:
            raise ConfigError(f"unknown methods {unknown}; known: {list(METHODS)}")
        if self.sweep not in SWEEPS:
            raise ConfigError(f"unknown sweep {self.sweep!r}; known: {list(SWEEPS)}")
        if self.sweep != "none" and not self.sweep_values:
            raise ConfigError(f"sweep {self.sweep!r} declared without sweep_values")
        for key in ("data", "eval", "train"):
            self.seeds.setdefault(key, 0)
        if self.seeds["data"] == self.seeds["eval"]:
            raise ConfigError("training and evaluation seeds must differ")

    def channel_params(self, **overrides) -> ChannelParams:
        values = {**self.channel, **overrides}
        return ChannelParams(**values)

    def tgt_config(self, **overrides) -> TgtConfig:
        return TgtConfig(**{**self.model, **overrides})

    def train_config(self, **overrides) -> TrainConfig:
        values = {"seed": self.seeds["train"], **self.train, **overrides}
        return TrainConfig(**values)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "ExperimentSpec":
        if "spec" in data and "name" not in data:
            data = data["spec"]  # a run manifest
        known = {f.name for f in fields(cls)}
        extra = set(data) - known
        if extra:
            raise ConfigError(f"unknown config keys {sorted(extra)}")
        if "name" not in data:
            raise ConfigError("config needs an experiment name")
        return cls(**copy.deepcopy(data))


TABLE2_SIZES = [20, 30, 40, 50]
TABLE3_SCALES = [0.5, 1.0, 1.5, 2.0, 2.5, 3.0, 3.5, 4.0]
# n / r for r in {0.25, 1/3, 0.5, 1, 2, 3, 4} at n = 50
TABLE4_HALF_WIDTHS = [200.0, 150.0, 100.0, 50.0, 25.0, 50.0 / 3.0, 12.5]
TABLE4_LABELS = ["200", "150", "100", "50", "25", "17", "12"]
TABLE1_SIGMA2 = [1e-6, 1e-5, 1e-4, 1e-3, 1e-2, 1e-1, 1.0]
FIG3_SIZES = [20, 30, 40, 50, 60, 70, 80, 90, 100]
FIG4_WIDTHS = [4, 8, 16, 32, 64, 104]


def default_spec(name: str) -> ExperimentSpec:
    """Paper-protocol defaults for each named experiment."""
    if name == "table1":
        return ExperimentSpec(
            name, methods=["wmmse"], sweep="noise_power", sweep_values=list(TABLE1_SIGMA2), options={"instances": 100}
        )
    if name == "table2":
        return ExperimentSpec(
            name,
            methods=["max_power", "wmmse", "tgt", "tgt_multinode"],
            sweep="network_size",
            sweep_values=list(TABLE2_SIZES),
            train_sizes=list(TABLE2_SIZES),
        )
    if name == "table3":
        return ExperimentSpec(name, sweep="fading_scale", sweep_values=list(TABLE3_SCALES))
    if name == "table4":
        return ExperimentSpec(
            name, sweep="field_half_width", sweep_values=list(TABLE4_HALF_WIDTHS), options={"labels": TABLE4_LABELS}
        )
    if name == "fig2":
        return ExperimentSpec(name, methods=["wmmse", "tgt"], options={"fades": 32000, "bins": 60})
    if name == "fig3":
        return ExperimentSpec(
            name,
            methods=["wmmse", "tgt"],
            sweep="network_size",
            sweep_values=list(FIG3_SIZES),
            eval_topologies=100,
            eval_fades=10,
        )
    if name in ("fig4", "fig5"):
        return ExperimentSpec(
            name,
            methods=["wmmse", "tgt"],
            sweep="model_width",
            sweep_values=list(FIG4_WIDTHS),
            n=30,
            train_sizes=[30],
            options={"head_dim": 2, "generalization_sizes": list(FIG3_SIZES), "timing_sizes": [64, 128]},
        )
    return ExperimentSpec(name)


def merge(base: ExperimentSpec, overrides: dict) -> ExperimentSpec:
    data = base.to_dict()
    for key, value in overrides.items():
        if isinstance(value, dict) and isinstance(data.get(key), dict):
            data[key] = {**data[key], **value}
        else:
            data[key] = value
    return ExperimentSpec.from_dict(data)


def load_config(path) -> dict:
    text = Path(path).read_text()
    data = yaml.safe_load(text) or {}
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: top level must be a mapping")
    if "spec" in data and "name" not in data:
        data = data["spec"]
    return data


def resolve_spec(name: str, config_path=None, seed: int | None = None, out_dir=None) -> ExperimentSpec:
    spec = default_spec(name)
    if config_path is not None:
        spec = merge(spec, {k: v for k, v in load_config(config_path).items() if k != "name"})
    if seed is not None:
        spec = merge(spec, {"seeds": {"data": seed, "eval": seed + 1000, "train": seed}})
    if out_dir is not None:
        spec = merge(spec, {"out_dir": str(out_dir)})
    return spec
