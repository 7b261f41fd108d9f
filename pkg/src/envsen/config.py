"""Experiment configuration: a single JSON document with explicit seeds."""
from __future__ import annotations

import copy
import json
from dataclasses import asdict, dataclass, field, fields, is_dataclass, replace
from pathlib import Path
from typing import Any

from .channel import ALOHA, BANDWIDTH_LIMITED, LORA
from .belief import NEIGHBOR_PROPAGATION, PERSISTENCE
from .policy import ANALYTIC_KINDS, NEEDS_CURVE

LEARNED_KINDS = ("iql", "pg")


class ConfigError(ValueError):
    pass


@dataclass
class FireConfig:
    base_seed: int = 1
    spread_rate: float = 0.3
    wind_gain: float = 1.0
    wind_speed: tuple[float, float] = (0.0, 10.0)
    direction_drift_deg: float = 10.0
    speed_drift: float = 0.5
    neighbor_radius: float | None = None
    scenario_file: str | None = None  # JSON list of scenarios to replay instead of generating


@dataclass
class BeliefConfig:
    kind: str = PERSISTENCE
    threshold: float = 0.5


@dataclass
class ChannelConfig:
    kind: str = BANDWIDTH_LIMITED
    num_channels: int = 4
    capacity: float = 2
    epsilon: float = 0.001
    A: float = 20.0
    path_loss_exponent: float = 2.7
    reference_loss_db: float = 40.0
    tx_power_dbm: float = 14.0
    sensitivity_dbm: float = -123.0
    capture_margin_db: float = 6.0
    noise_std_db: float = 2.0
    airtime: float = 0.05
    window: float = 1.0


@dataclass
class PolicyConfig:
    kind: str = "heuristic"
    p: float = 0.3
    lag: int | None = None
    reward: str = "envsen"  # learned kinds: "envsen" or "tracking"
    use_feedback: bool = False
    hyperparameters: dict = field(default_factory=dict)
    checkpoint: str | None = None

    @property
    def learned(self) -> bool:
        return self.kind in LEARNED_KINDS

    @property
    def name(self) -> str:
        if self.kind == "random_p":
            return f"random_{round(self.p * 100):d}"
        if self.learned:
            prefix = "envsen_" if self.reward == "envsen" else ""
            suffix = "_fb" if self.use_feedback else ""
            return f"{prefix}{self.kind}{suffix}"
        return self.kind


@dataclass
class ExperimentConfig:
    num_sensors: int = 200
    area: float = 2000.0
    layout_seed: int = 0
    scenario_count: int = 200
    eval_episodes: int = 30
    horizon: int = 60
    w: float = 0.2
    energy_cost: float = 1.0
    training_episodes: int = 300
    master_seed: int = 0
    fire: FireConfig = field(default_factory=FireConfig)
    belief: BeliefConfig = field(default_factory=BeliefConfig)
    channel: ChannelConfig = field(default_factory=ChannelConfig)
    policy: PolicyConfig = field(default_factory=PolicyConfig)

    def validate(self) -> "ExperimentConfig":
        if self.num_sensors < 1:
            raise ConfigError("num_sensors must be >= 1")
        if self.horizon < 1:
            raise ConfigError("horizon must be >= 1")
        if self.w < 0:
            raise ConfigError("w must be >= 0")
        if self.scenario_count < 1:
            raise ConfigError("scenario_count must be >= 1")
        if not 1 <= self.eval_episodes <= self.scenario_count:
            raise ConfigError("eval_episodes must lie in [1, scenario_count]")
        if self.channel.kind not in (BANDWIDTH_LIMITED, ALOHA, LORA):
            raise ConfigError(f"unknown channel kind {self.channel.kind!r}")
        if self.belief.kind not in (PERSISTENCE, NEIGHBOR_PROPAGATION):
            raise ConfigError(f"unknown belief kind {self.belief.kind!r}")
        pol = self.policy
        if pol.kind not in ANALYTIC_KINDS + LEARNED_KINDS:
            raise ConfigError(f"unknown policy kind {pol.kind!r}")
        if pol.kind in NEEDS_CURVE and self.channel.kind == LORA:
            raise ConfigError(f"policy {pol.kind!r} needs an analytic channel curve; channel is lora")
        if pol.reward not in ("envsen", "tracking"):
            raise ConfigError(f"unknown reward {pol.reward!r}")
        for name in ("master_seed", "layout_seed"):
            if not isinstance(getattr(self, name), int):
                raise ConfigError(f"{name} must be an explicit integer")
        return self

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=2)

    def with_policy(self, **kw) -> "ExperimentConfig":
        return replace(self, policy=replace(self.policy, **kw))


def parse_policy_name(name: str) -> dict:
    """Map a policy name such as ``random_30`` or ``envsen_pg_fb`` to PolicyConfig fields."""
    if name in ANALYTIC_KINDS:
        return {"kind": name}
    if name.startswith("random_"):
        try:
            pct = float(name[len("random_"):])
        except ValueError:
            raise ConfigError(f"unknown policy {name!r}") from None
        if not 0 <= pct <= 100:
            raise ConfigError(f"random policy percentage out of range in {name!r}")
        return {"kind": "random_p", "p": pct / 100.0}
    rest, reward = name, "tracking"
    if rest.startswith("envsen_"):
        rest, reward = rest[len("envsen_"):], "envsen"
    use_feedback = rest.endswith("_fb")
    if use_feedback:
        rest = rest[: -len("_fb")]
    if rest not in LEARNED_KINDS:
        raise ConfigError(f"unknown policy {name!r}")
    return {"kind": rest, "reward": reward, "use_feedback": use_feedback}


def _build(cls, data: dict, where: str):
    if not isinstance(data, dict):
        raise ConfigError(f"{where or 'config'} must be a JSON object")
    known = {f.name: f for f in fields(cls)}
    kwargs = {}
    for key, value in data.items():
        if key not in known:
            raise ConfigError(f"unknown config key {where + key!r}")
        default = known[key].default_factory() if callable(known[key].default_factory) else known[key].default
        if is_dataclass(default):
            kwargs[key] = _build(type(default), value, f"{where}{key}.")
        elif isinstance(default, tuple) and isinstance(value, list):
            kwargs[key] = tuple(value)
        else:
            kwargs[key] = value
    return cls(**kwargs)


def from_dict(data: dict) -> ExperimentConfig:
    return _build(ExperimentConfig, copy.deepcopy(data), "").validate()


def load_config(path: str | Path | None, overrides: list[str] | None = None) -> ExperimentConfig:
    data: dict[str, Any] = {}
    if path is not None:
        p = Path(path)
        if not p.is_file():
            raise ConfigError(f"config file not found: {p}")
        try:
            data = json.loads(p.read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{p}: invalid JSON ({exc})") from None
    for item in overrides or []:
        apply_override(data, item)
    return from_dict(data)


def apply_override(data: dict, item: str) -> None:
    """Set a dotted ``key=value`` into a nested dict; values are parsed as JSON when possible."""
    if "=" not in item:
        raise ConfigError(f"override must be key=value, got {item!r}")
    key, raw = item.split("=", 1)
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    node = data
    parts = key.strip().split(".")
    for part in parts[:-1]:
        node = node.setdefault(part, {})
        if not isinstance(node, dict):
            raise ConfigError(f"override {key!r} descends into a non-object")
    node[parts[-1]] = value
