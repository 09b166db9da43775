"""Experiment configuration: a single JSON document, one section per module.

Unknown keys are rejected, missing optional keys take the dataclass
defaults, and every error names the offending field path.
"""
from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path

from .channel import ChannelParams
from .data import DataParams
from .errors import ConfigError
from .model import ModelSpec, Placeholder
from .protocol import AggregationPolicy, Depth, ModuleOverride, Strategy, TrainingParams
from .topology import NodeDefaults, TopologyConfig

DEFAULT_CONFIG = Path(__file__).with_name("configs") / "default.json"
REQUIRED = ("rounds", "seeds", "policy")


@dataclass(frozen=True)
class PolicyConfig:
    strategies: tuple = (Strategy.STAR, Strategy.HIER, Strategy.HIER_D2D)
    e_local: int = 1
    e_agg: int | None = 2
    module_overrides: dict = field(default_factory=dict)

    def for_strategy(self, strategy: Strategy) -> AggregationPolicy:
        return AggregationPolicy(self.e_local, self.e_agg, Strategy(strategy), dict(self.module_overrides))

    def validate(self, path="policy"):
        if not self.strategies:
            raise ConfigError("at least one strategy is required", f"{path}.strategies")
        self.for_strategy(self.strategies[0]).validate(path)


@dataclass(frozen=True)
class ExperimentConfig:
    rounds: int
    seeds: tuple
    policy: PolicyConfig
    topology: TopologyConfig = field(default_factory=TopologyConfig)
    channel: ChannelParams = field(default_factory=ChannelParams)
    model: ModelSpec = field(default_factory=ModelSpec)
    data: DataParams = field(default_factory=DataParams)
    learning_rate: float = 0.1
    batch_size: int = 2
    output_dir: str = "runs/default"

    @property
    def training(self) -> TrainingParams:
        return TrainingParams(self.learning_rate, self.batch_size)

    def validate(self):
        if self.rounds < 0:
            raise ConfigError("must be >= 0", "rounds")
        if not self.seeds:
            raise ConfigError("at least one seed is required", "seeds")
        self.topology.validate("topology")
        self.channel.validate("channel")
        self.model.validate("model")
        self.data.validate("data")
        self.policy.validate("policy")
        self.training.validate("")
        if not self.output_dir:
            raise ConfigError("must be non-empty", "output_dir")
        if self.topology.num_clusters < self.model.num_tasks:
            raise ConfigError("fewer clusters than tasks", "model.num_tasks")
        return self

    def with_(self, **changes) -> "ExperimentConfig":
        return dataclasses.replace(self, **changes)


# ---------------------------------------------------------------------------
# parsing

def _type_error(path, expected, value):
    return ConfigError(f"expected {expected}, got {json.dumps(value)}", path)


def _scalar(value, default, path):
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise _type_error(path, "a boolean", value)
        return value
    if isinstance(default, int):
        if isinstance(value, bool) or not isinstance(value, int):
            raise _type_error(path, "an integer", value)
        return value
    if isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise _type_error(path, "a number", value)
        return float(value)
    if isinstance(default, str):
        if not isinstance(value, str):
            raise _type_error(path, "a string", value)
        return value
    raise ConfigError("unsupported field", path)


def _section(cls, raw, path, special=None):
    special = special or {}
    if not isinstance(raw, dict):
        raise _type_error(path, "an object", raw)
    known = {f.name: f for f in dataclasses.fields(cls)}
    for key in raw:
        if key not in known:
            raise ConfigError(f"unknown key (valid: {', '.join(known)})", f"{path}.{key}".lstrip("."))
    kwargs = {}
    for name, value in raw.items():
        sub = f"{path}.{name}".lstrip(".")
        if name in special:
            kwargs[name] = special[name](value, sub)
            continue
        f = known[name]
        if f.default is not dataclasses.MISSING:
            kwargs[name] = _scalar(value, f.default, sub)
        else:
            raise ConfigError("unsupported field", sub)
    try:
        return cls(**kwargs)
    except TypeError as exc:
        raise ConfigError(str(exc), path or None) from None


def _bandwidths(value, path):
    if not isinstance(value, dict):
        raise _type_error(path, "an object", value)
    out = dict(ChannelParams().bandwidth_hz)
    for k, v in value.items():
        out[k] = _scalar(v, 1.0, f"{path}.{k}")
    return out


def _placeholders(value, path):
    if not isinstance(value, list):
        raise _type_error(path, "a list", value)
    out = []
    for i, item in enumerate(value):
        sub = f"{path}[{i}]"
        if not isinstance(item, dict) or "kind" not in item or "wire_bytes" not in item:
            raise ConfigError("expected {\"kind\", \"wire_bytes\"[, \"trainable\"]}", sub)
        out.append(_section(Placeholder, item, sub, {
            "kind": lambda v, p: _scalar(v, "", p),
            "wire_bytes": lambda v, p: _scalar(v, 0, p),
        }))
    return tuple(out)


def _strategies(value, path):
    if isinstance(value, str):
        value = [s.strip() for s in value.split(",") if s.strip()]
    if not isinstance(value, list):
        raise _type_error(path, "a list of strategy names", value)
    out = []
    for i, name in enumerate(value):
        try:
            s = Strategy(name)
        except ValueError:
            valid = ", ".join(s.value for s in Strategy)
            raise ConfigError(f"unknown strategy {name!r} (valid: {valid})", f"{path}[{i}]") from None
        if s in out:
            raise ConfigError(f"duplicate strategy {name!r}", f"{path}[{i}]")
        out.append(s)
    return tuple(out)


def _e_agg(value, path):
    if value is None or value == "inf":
        return None
    if isinstance(value, bool) or not isinstance(value, int):
        raise _type_error(path, "an integer >= 1 or \"inf\"", value)
    if value < 1:
        raise ConfigError("must be >= 1 (or \"inf\" for edge-only)", path)
    return value


def _overrides(value, path):
    if not isinstance(value, dict):
        raise _type_error(path, "an object", value)
    out = {}
    for key, item in value.items():
        sub = f"{path}.{key}"

        def depth(v, p):
            try:
                return Depth(v)
            except ValueError:
                raise ConfigError("expected \"edge\" or \"cloud\"", p) from None

        out[key] = _section(ModuleOverride, item, sub, {"depth": depth})
    return out


def _seeds(value, path):
    if isinstance(value, int) and not isinstance(value, bool):
        value = [value]
    if not isinstance(value, list) or not value:
        raise _type_error(path, "a non-empty list of integers", value)
    return tuple(_scalar(v, 0, f"{path}[{i}]") for i, v in enumerate(value))


def config_from_dict(raw) -> ExperimentConfig:
    if not isinstance(raw, dict):
        raise _type_error("<root>", "an object", raw)
    missing = [k for k in REQUIRED if k not in raw]
    if missing:
        raise ConfigError(f"missing required fields: {', '.join(missing)}")
    policy_raw = raw.get("policy")
    if isinstance(policy_raw, dict) and "strategies" not in policy_raw:
        raise ConfigError("missing required field", "policy.strategies")
    special = {
        "seeds": _seeds,
        "rounds": lambda v, p: _scalar(v, 0, p),
        "policy": lambda v, p: _section(PolicyConfig, v, p, {
            "strategies": _strategies, "e_agg": _e_agg, "module_overrides": _overrides,
        }),
        "topology": lambda v, p: _section(TopologyConfig, v, p, {
            "node_defaults": lambda v2, p2: _section(NodeDefaults, v2, p2),
        }),
        "channel": lambda v, p: _section(ChannelParams, v, p, {"bandwidth_hz": _bandwidths}),
        "model": lambda v, p: _section(ModelSpec, v, p, {"placeholders": _placeholders}),
        "data": lambda v, p: _section(DataParams, v, p),
    }
    cfg = _section(ExperimentConfig, raw, "", special)
    return cfg.validate()


def parse_config(text: str) -> ExperimentConfig:
    if isinstance(text, bytes):
        text = text.decode("utf-8")
    if not text.strip():
        raise ConfigError(f"empty document; missing required fields: {', '.join(REQUIRED)}")
    try:
        raw = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"syntax error at line {exc.lineno}, column {exc.colno}: {exc.msg}") from None
    return config_from_dict(raw)


def load_config(path) -> ExperimentConfig:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    return parse_config(text)


def _plain(value):
    if dataclasses.is_dataclass(value):
        return {f.name: _plain(getattr(value, f.name)) for f in dataclasses.fields(value)}
    if isinstance(value, (Strategy, Depth)):
        return value.value
    if isinstance(value, dict):
        return {k: _plain(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_plain(v) for v in value]
    return value


def config_to_dict(cfg: ExperimentConfig) -> dict:
    """Fully resolved config with every defaulted field explicit."""
    out = _plain(cfg)
    if cfg.policy.e_agg is None:
        out["policy"]["e_agg"] = "inf"
    return out


def dump_config(cfg: ExperimentConfig) -> str:
    return json.dumps(config_to_dict(cfg), indent=2, sort_keys=False) + "\n"
