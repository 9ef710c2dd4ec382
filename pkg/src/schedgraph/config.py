"""Versioned JSON run configuration.

One file drives every command: workload generation, disturbance windows,
model architecture, training, and the evaluation protocol.  Parsing is
strict: unknown keys are rejected with their full path, and the version
must match exactly so stale files fail loudly instead of silently
drifting.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field, replace

from .multiscale import GLOBAL
from .training import ModelConfig, TrainConfig
from .workload import (
    AnomalyLabel,
    ConfigError,
    DisturbanceSpec,
    GenConfig,
    ScheduleTrace,
    apply_disturbances,
    generate_trace,
)

CONFIG_VERSION = 1


@dataclass(frozen=True)
class EvalConfig:
    """Seeds and sweep grid for the comparison protocols."""

    seeds: tuple[int, ...] = (0, 1, 2, 3, 4)
    k_values: tuple[int, ...] = (1, 2, 3, 4, 5)
    threshold: float = 0.5

    def validate(self) -> None:
        if not self.seeds:
            raise ConfigError("eval.seeds must be non-empty")
        if not self.k_values or any(k < 1 for k in self.k_values):
            raise ConfigError("eval.k_values must be non-empty with entries >= 1")
        if not 0.0 <= self.threshold <= 1.0:
            raise ConfigError("eval.threshold must lie in [0, 1]")


def _default_generate() -> GenConfig:
    return GenConfig(n_tasks=500, n_nodes=4, horizon=600.0,
                     mean_interarrival=1.0, seed=0)


@dataclass(frozen=True)
class RunConfig:
    version: int = CONFIG_VERSION
    generate: GenConfig = field(default_factory=_default_generate)
    disturbances: tuple[DisturbanceSpec, ...] = ()
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)

    def validate(self) -> None:
        if self.version != CONFIG_VERSION:
            raise ConfigError(
                f"config version {self.version} unsupported "
                f"(expected {CONFIG_VERSION})")
        self.generate.validate()
        for spec in self.disturbances:
            spec.validate(self.generate.horizon)
        self.model.validate()
        self.train.validate()
        self.eval.validate()
        if self.model.n_resource_dims != self.generate.n_resource_dims:
            raise ConfigError(
                "model.n_resource_dims must match generate.n_resource_dims")


def default_config() -> RunConfig:
    return RunConfig()


def benchmark_config(seed: int = 0) -> RunConfig:
    """The standard synthetic benchmark: 500 tasks on 4 nodes with all
    three disturbance kinds, sized so a full run stays desk-scale."""
    return RunConfig(
        generate=replace(_default_generate(), seed=seed),
        disturbances=(
            DisturbanceSpec(kind=AnomalyLabel.TASK_DELAY, onset=60.0,
                            duration=80.0, magnitude=1.5, affected_fraction=0.7),
            DisturbanceSpec(kind=AnomalyLabel.RESOURCE_CHANGE, onset=200.0,
                            duration=80.0, magnitude=0.8, affected_fraction=0.7),
            DisturbanceSpec(kind=AnomalyLabel.STRUCTURAL_SHIFT, onset=340.0,
                            duration=80.0, magnitude=1.0, affected_fraction=0.7),
        ),
        model=ModelConfig(window_len=30.0, stride=15.0),
        train=TrainConfig(lr=3e-3, batch_size=16, epochs=40, dropout=0.1,
                          eval_every=10, seed=seed),
        eval=EvalConfig(),
    )


def build_trace(config: RunConfig, seed: int | None = None) -> ScheduleTrace:
    """Generate the configured workload and apply its disturbances."""
    gen = config.generate if seed is None else replace(config.generate, seed=seed)
    trace = generate_trace(gen)
    if config.disturbances:
        trace = apply_disturbances(trace, list(config.disturbances), seed=gen.seed)
    return trace


# ---------------------------------------------------------------------------
# strict JSON parsing
# ---------------------------------------------------------------------------

def _expect_dict(obj, path: str) -> dict:
    if not isinstance(obj, dict):
        raise ConfigError(f"{path or 'config'}: expected an object")
    return obj


def _check_keys(obj: dict, allowed, path: str) -> None:
    for key in obj:
        if key not in allowed:
            where = f"{path}.{key}" if path else key
            raise ConfigError(f"unknown config key '{where}'")


def _int(x, path):
    if isinstance(x, bool) or not isinstance(x, int):
        raise ConfigError(f"{path}: expected an integer")
    return x


def _float(x, path):
    if isinstance(x, bool) or not isinstance(x, (int, float)):
        raise ConfigError(f"{path}: expected a number")
    return float(x)


def _bool(x, path):
    if not isinstance(x, bool):
        raise ConfigError(f"{path}: expected true or false")
    return x


def _str(x, path):
    if not isinstance(x, str):
        raise ConfigError(f"{path}: expected a string")
    return x


def _optional(conv):
    return lambda x, path: None if x is None else conv(x, path)


def _number_tuple(x, path):
    if not isinstance(x, list):
        raise ConfigError(f"{path}: expected a list")
    return tuple(_float(v, f"{path}[{i}]") for i, v in enumerate(x))


def _int_tuple(x, path):
    if not isinstance(x, list):
        raise ConfigError(f"{path}: expected a list")
    return tuple(_int(v, f"{path}[{i}]") for i, v in enumerate(x))


def _scales(x, path):
    if not isinstance(x, list):
        raise ConfigError(f"{path}: expected a list")
    out = []
    for i, v in enumerate(x):
        if v == GLOBAL:
            out.append(GLOBAL)
        else:
            out.append(_int(v, f"{path}[{i}]"))
    return tuple(out)


def _label(x, path):
    name = _str(x, path)
    try:
        return AnomalyLabel(name)
    except ValueError as exc:
        raise ConfigError(f"{path}: unknown disturbance kind {name!r}") from exc


_GEN_FIELDS = {
    "n_tasks": _int, "n_nodes": _int, "horizon": _float,
    "mean_interarrival": _float, "seed": _int, "mean_duration": _float,
    "n_resource_dims": _int, "priority_levels": _int, "n_stages": _int,
    "failure_rate": _float,
}

_DISTURBANCE_FIELDS = {
    "kind": _label, "onset": _float, "duration": _float,
    "magnitude": _float, "affected_fraction": _float,
}

_MODEL_FIELDS = {
    "window_len": _float, "stride": _float, "d_task": _int, "d_res": _int,
    "d_time": _int, "hash_buckets": _int, "n_resource_dims": _int,
    "seq_k": _int, "coexist_eps": _optional(_float), "tau": _optional(_float),
    "mu": _number_tuple, "scales": _scales, "d_a": _optional(_int),
    "lambda1": _float, "lambda2": _float, "gamma1": _float, "gamma2": _float,
    "attention": _bool, "fusion": _bool, "multiscale": _bool,
}

_TRAIN_FIELDS = {
    "lr": _float, "batch_size": _int, "epochs": _int, "weight_decay": _float,
    "dropout": _float, "eval_every": _int, "val_fraction": _float, "seed": _int,
}

_EVAL_FIELDS = {"seeds": _int_tuple, "k_values": _int_tuple, "threshold": _float}


def _parse_section(obj, fields: dict, defaults, path: str):
    obj = _expect_dict(obj, path)
    _check_keys(obj, fields, path)
    kwargs = {k: conv(obj[k], f"{path}.{k}" if path else k)
              for k, conv in fields.items() if k in obj}
    return replace(defaults, **kwargs) if kwargs else defaults


def parse_config(obj) -> RunConfig:
    """Build a RunConfig from decoded JSON, rejecting unknown keys."""
    obj = _expect_dict(obj, "")
    _check_keys(obj, {"version", "generate", "disturbances", "model",
                      "train", "eval"}, "")
    version = _int(obj.get("version", CONFIG_VERSION), "version")

    base = default_config()
    generate = _parse_section(obj.get("generate", {}), _GEN_FIELDS,
                              base.generate, "generate")
    model = _parse_section(obj.get("model", {}), _MODEL_FIELDS,
                           base.model, "model")
    train = _parse_section(obj.get("train", {}), _TRAIN_FIELDS,
                           base.train, "train")
    eval_cfg = _parse_section(obj.get("eval", {}), _EVAL_FIELDS,
                              base.eval, "eval")

    raw_specs = obj.get("disturbances", [])
    if not isinstance(raw_specs, list):
        raise ConfigError("disturbances: expected a list")
    specs = []
    for i, raw in enumerate(raw_specs):
        path = f"disturbances[{i}]"
        raw = _expect_dict(raw, path)
        _check_keys(raw, _DISTURBANCE_FIELDS, path)
        missing = [k for k in _DISTURBANCE_FIELDS if k not in raw]
        if missing:
            raise ConfigError(f"{path}: missing keys {missing}")
        specs.append(DisturbanceSpec(**{
            k: conv(raw[k], f"{path}.{k}")
            for k, conv in _DISTURBANCE_FIELDS.items()
        }))

    config = RunConfig(version=version, generate=generate,
                       disturbances=tuple(specs), model=model, train=train,
                       eval=eval_cfg)
    config.validate()
    return config


def load_config(path) -> RunConfig:
    with open(path, "r", encoding="utf-8") as fh:
        try:
            obj = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
    return parse_config(obj)


def config_to_dict(config: RunConfig) -> dict:
    """Plain-JSON mirror of a RunConfig, round-trippable by parse_config."""
    def plain(value):
        if isinstance(value, AnomalyLabel):
            return value.value
        if isinstance(value, tuple):
            return [plain(v) for v in value]
        if dataclasses.is_dataclass(value):
            return {f.name: plain(getattr(value, f.name))
                    for f in dataclasses.fields(value)}
        return value

    return plain(config)


def config_json(config: RunConfig) -> str:
    return json.dumps(config_to_dict(config), indent=2, sort_keys=True) + "\n"
