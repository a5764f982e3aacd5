"""Run configuration: one YAML file, validated before anything runs.

Every section is optional and falls back to the library defaults. Unknown keys
anywhere are rejected with a :class:`ConfigError` naming the dotted key path.
"""
from __future__ import annotations

import copy
import hashlib
import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import yaml

from crowdode.dynamics import IntegratorConfig
from crowdode.errors import ConfigError
from crowdode.orca import OrcaParams
from crowdode.scene import Scene, make_square_room
from crowdode.sfm import SfmParams
from crowdode.training import TrainConfig

SOURCES = ("sfm", "orca")
SPAWN_MODES = ("uniform", "bimodal")
DATA_KEYS = ("seed", "scene", "sfm", "orca", "data")
TRAINING_KEYS = DATA_KEYS + ("model", "train")


@dataclass(frozen=True)
class SceneSection:
    side_length: float = 10.0
    exit_width: float = 1.0
    exit_wall: str = "right"

    def build(self) -> Scene:
        return make_square_room(self.side_length, self.exit_width, self.exit_wall)


@dataclass(frozen=True)
class DataSection:
    source: str = "sfm"
    n_agents: int = 5
    n_runs: int = 20
    t_max: float = 60.0
    # records are kept every ``record_interval`` seconds regardless of the simulator step
    record_interval: float = 0.01
    spawn_mode: str = "uniform"
    min_separation: float = 0.7


@dataclass(frozen=True)
class ModelSection:
    hidden: tuple = (64, 64)
    activation: str = "tanh"
    k_neighbors: int = 4
    mass: float = 1.0
    pos_scale: float = 10.0
    vel_scale: float = 1.0
    rel_scale: float = 10.0
    use_relative_velocity: bool = False
    init_seed: int | None = None


@dataclass(frozen=True)
class EvalSection:
    n_runs: int = 30
    n_agents: int = 20
    t_max: float = 60.0
    ice_resolution: float = 0.5
    spawn_mode: str = "bimodal"
    min_separation: float = 0.7
    record_interval: float = 0.1
    bins: int = 20
    ade_horizon: float = 2.0
    ade_runs: int = 10


@dataclass(frozen=True)
class RunConfig:
    seed: int = 0
    output_dir: str = "runs/default"
    scene: SceneSection = field(default_factory=SceneSection)
    sfm: SfmParams = field(default_factory=SfmParams)
    orca: OrcaParams = field(default_factory=OrcaParams)
    data: DataSection = field(default_factory=DataSection)
    model: ModelSection = field(default_factory=ModelSection)
    train: TrainConfig = field(default_factory=TrainConfig)
    eval: EvalSection = field(default_factory=EvalSection)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["model"]["hidden"] = list(self.model.hidden)
        return d

    def digest(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()

    def section_digest(self, *names: str) -> str:
        d = self.to_dict()
        blob = json.dumps({k: d[k] for k in names}, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()

    def data_digest(self) -> str:
        """Digest of everything that determines the generated dataset."""
        return self.section_digest(*DATA_KEYS)

    def training_digest(self) -> str:
        """Digest of everything that determines a trained checkpoint."""
        return self.section_digest(*TRAINING_KEYS)

    def with_seed(self, seed: int) -> "RunConfig":
        d = self.to_dict()
        d["seed"] = seed
        d["train"]["seed"] = seed
        return config_from_dict(d)


_SECTIONS = {
    "scene": SceneSection,
    "sfm": SfmParams,
    "orca": OrcaParams,
    "data": DataSection,
    "model": ModelSection,
    "eval": EvalSection,
}


def _build(cls, raw, where: str, nested=None):
    if raw is None:
        raw = {}
    if not isinstance(raw, dict):
        raise ConfigError("must be a mapping", key=where)
    known = {f.name for f in fields(cls)}
    for key in raw:
        if key not in known:
            raise ConfigError("unknown key", key=f"{where}.{key}")
    kwargs = dict(raw)
    for key, builder in (nested or {}).items():
        if key in kwargs:
            kwargs[key] = builder(kwargs[key], f"{where}.{key}")
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc), key=where) from exc


def _solver(raw, where):
    return _build(IntegratorConfig, raw, where)


def _check(cond: bool, key: str, message: str):
    if not cond:
        raise ConfigError(message, key=key)


def config_from_dict(raw: dict) -> RunConfig:
    """Validate a nested mapping and build a :class:`RunConfig`."""
    if raw is None:
        raw = {}
    if not isinstance(raw, dict):
        raise ConfigError("top level must be a mapping", key="<root>")
    raw = copy.deepcopy(raw)
    top = {f.name for f in fields(RunConfig)}
    for key in raw:
        if key not in top:
            raise ConfigError("unknown key", key=key)
    seed = raw.get("seed", 0)
    _check(isinstance(seed, int) and not isinstance(seed, bool) and seed >= 0, "seed",
           "must be a non-negative integer")
    kwargs = {"seed": seed, "output_dir": str(raw.get("output_dir", "runs/default"))}
    for name, cls in _SECTIONS.items():
        kwargs[name] = _build(cls, raw.get(name), name)
    train_raw = dict(raw.get("train") or {})
    train_raw.setdefault("seed", seed)
    kwargs["train"] = _build(TrainConfig, train_raw, "train", {"solver": _solver})
    if isinstance(kwargs["model"].hidden, list):
        kwargs["model"] = _replace(kwargs["model"], hidden=tuple(kwargs["model"].hidden))
    cfg = RunConfig(**kwargs)
    _validate(cfg)
    return cfg


def _replace(obj, **changes):
    d = {f.name: getattr(obj, f.name) for f in fields(obj)}
    d.update(changes)
    return type(obj)(**d)


def _positive_int(value) -> bool:
    return isinstance(value, int) and not isinstance(value, bool) and value >= 1


def _multiple_of(interval: float, step: float) -> bool:
    ratio = interval / step
    return ratio >= 1 - 1e-9 and abs(ratio - round(ratio)) < 1e-6


def _validate(cfg: RunConfig) -> None:
    try:
        cfg.scene.build()
    except (ValueError, KeyError) as exc:
        raise ConfigError(str(exc), key="scene") from exc
    d, m, e = cfg.data, cfg.model, cfg.eval
    _check(d.source in SOURCES, "data.source", f"must be one of {SOURCES}")
    _check(_positive_int(d.n_agents), "data.n_agents", "must be an integer >= 1")
    _check(_positive_int(d.n_runs), "data.n_runs", "must be an integer >= 1")
    _check(d.t_max > 0, "data.t_max", "must be positive")
    _check(d.spawn_mode in SPAWN_MODES, "data.spawn_mode", f"must be one of {SPAWN_MODES}")
    _check(d.min_separation >= 0, "data.min_separation", "must be non-negative")
    step = cfg.sfm.step if d.source == "sfm" else cfg.orca.step
    _check(d.record_interval > 0 and _multiple_of(d.record_interval, step),
           "data.record_interval", f"must be a positive multiple of the {d.source} step {step}")
    _check(len(m.hidden) >= 1 and all(_positive_int(h) for h in m.hidden), "model.hidden",
           "must be a non-empty list of positive integers")
    _check(m.activation in ("tanh", "softplus"), "model.activation", "must be tanh or softplus")
    _check(_positive_int(m.k_neighbors), "model.k_neighbors", "must be an integer >= 1")
    for key in ("mass", "pos_scale", "vel_scale", "rel_scale"):
        _check(getattr(m, key) > 0, f"model.{key}", "must be positive")
    _check(_positive_int(e.n_runs), "eval.n_runs", "must be an integer >= 1")
    _check(_positive_int(e.n_agents), "eval.n_agents", "must be an integer >= 1")
    _check(e.t_max > 0, "eval.t_max", "must be positive")
    _check(e.ice_resolution > 0, "eval.ice_resolution", "must be positive")
    _check(e.spawn_mode in SPAWN_MODES, "eval.spawn_mode", f"must be one of {SPAWN_MODES}")
    _check(_positive_int(e.bins), "eval.bins", "must be an integer >= 1")
    _check(e.record_interval > 0, "eval.record_interval", "must be positive")
    _check(e.ade_horizon > 0, "eval.ade_horizon", "must be positive")
    _check(_positive_int(e.ade_runs), "eval.ade_runs", "must be an integer >= 1")


def load_config(path) -> RunConfig:
    path = Path(path)
    text = path.read_text()
    try:
        raw = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        mark = getattr(exc, "problem_mark", None)
        where = f"{path}:{mark.line + 1}" if mark is not None else str(path)
        raise ConfigError(f"YAML parse error: {exc}", key=where) from exc
    return config_from_dict(raw)


def dump_config(cfg: RunConfig, path) -> None:
    Path(path).write_text(yaml.safe_dump(cfg.to_dict(), sort_keys=True))
