"""Run configuration: one JSON document covering scene, training, network, RL and eval settings."""
from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field

from .aodnet import AODConfig
from .data import SceneConfig
from .errors import ConfigError
from .evaluation import PROTOCOLS, EvalConfig
from .reinforce import RLConfig
from .trainer import TrainConfig

PROVENANCE_KEY = "_provenance"

# Fields whose defaults come from published settings; every other field is a local default.
PUBLISHED_FIELDS = frozenset({
    "train.images_per_batch", "train.fg_per_image", "train.bg_per_image",
    "train.aod.T", "train.aod.glimpse_embed_dim", "train.aod.stacked_rnn", "train.aod.eltwise_max",
    "train.aod.glimpse_dof",
    "train.rl.n_episodes", "train.rl.sigma", "train.rl.return_scale", "train.rl.reward_kind",
    "train.rl.baseline_kind", "train.rl.include_background", "train.rl.iou_thresh",
    "eval.iou_thresh", "eval.protocol",
})

_SECTIONS = {"scene": SceneConfig, "eval": EvalConfig}
_NESTED = {"rl": RLConfig, "aod": AODConfig}


@dataclass
class Paths:
    data: str | None = None
    out: str | None = None
    checkpoint: str | None = None


@dataclass
class RunConfig:
    seed: int = 0
    scene: SceneConfig = field(default_factory=SceneConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    paths: Paths = field(default_factory=Paths)

    def __post_init__(self):
        self.train.seed = self.seed
        self.validate()

    def validate(self):
        self.scene.validate("scene")
        self.train.validate("train")
        if self.eval.protocol not in PROTOCOLS:
            raise ConfigError("eval.protocol", f"must be one of {PROTOCOLS}")
        for name in ("iou_thresh", "nms_thresh"):
            if not 0 < getattr(self.eval, name) <= 1:
                raise ConfigError(f"eval.{name}", "must lie in (0, 1]")
        if self.eval.images_per_chunk < 1:
            raise ConfigError("eval.images_per_chunk", "must be >= 1")
        if self.train.aod.K != self.scene.K:
            raise ConfigError("train.aod.K", f"must equal scene.K ({self.scene.K})")
        if self.train.aod.in_channels != self.scene.channels:
            raise ConfigError("train.aod.in_channels", f"must equal scene.channels ({self.scene.channels})")

    def to_dict(self):
        return _plain(dataclasses.asdict(self))


def _plain(obj):
    if isinstance(obj, dict):
        return {k: _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    return obj


def _coerce(path, value, default):
    """Check ``value`` against the type of the field's default."""
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(path, f"expected true/false, got {value!r}")
        return value
    if isinstance(default, int) and not isinstance(default, bool):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(path, f"expected an integer, got {value!r}")
        return value
    if isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(path, f"expected a number, got {value!r}")
        return float(value)
    if isinstance(default, str):
        if not isinstance(value, str):
            raise ConfigError(path, f"expected a string, got {value!r}")
        return value
    if isinstance(default, tuple):
        if not isinstance(value, (list, tuple)) or len(value) != len(default):
            raise ConfigError(path, f"expected a list of {len(default)} values, got {value!r}")
        return tuple(_coerce(f"{path}[{i}]", v, d) for i, (v, d) in enumerate(zip(value, default)))
    return value  # None defaults (optional fields) accept anything JSON-shaped


def _build(cls, data, prefix, nested=None):
    if not isinstance(data, dict):
        raise ConfigError(prefix, "expected an object")
    defaults = cls()
    names = {f.name for f in dataclasses.fields(cls)}
    kwargs = {}
    for key, value in data.items():
        path = f"{prefix}.{key}"
        if key not in names:
            raise ConfigError(path, "unknown field")
        if nested and key in nested:
            kwargs[key] = _build(nested[key], value, path)
        elif key == "grad_clip" and value is None:
            kwargs[key] = None
        else:
            kwargs[key] = _coerce(path, value, getattr(defaults, key))
    try:
        return cls(**kwargs)
    except ConfigError as exc:
        if exc.path.startswith(prefix):
            raise
        raise ConfigError(f"{prefix}.{exc.path.split('.', 1)[-1]}", exc.message) from None


def from_dict(data):
    """Build and validate a :class:`RunConfig`; errors carry the offending field path."""
    if not isinstance(data, dict):
        raise ConfigError("<root>", "expected a JSON object")
    data = {k: v for k, v in data.items() if k != PROVENANCE_KEY}
    known = {f.name for f in dataclasses.fields(RunConfig)}
    for key in data:
        if key not in known:
            raise ConfigError(key, "unknown field")
    kwargs = {}
    if "seed" in data:
        kwargs["seed"] = _coerce("seed", data["seed"], 0)
    for name, cls in _SECTIONS.items():
        if name in data:
            kwargs[name] = _build(cls, data[name], name)
    if "train" in data:
        train = dict(data["train"]) if isinstance(data["train"], dict) else data["train"]
        if isinstance(train, dict) and "seed" in train and "seed" in kwargs and train["seed"] != kwargs["seed"]:
            raise ConfigError("train.seed", "conflicts with the top-level seed")
        if isinstance(train, dict) and "seed" in train and "seed" not in kwargs:
            kwargs["seed"] = _coerce("train.seed", train["seed"], 0)
        kwargs["train"] = _build(TrainConfig, train, "train", _NESTED)
    if "paths" in data:
        p = data["paths"]
        if not isinstance(p, dict):
            raise ConfigError("paths", "expected an object")
        for key, value in p.items():
            if key not in {"data", "out", "checkpoint"}:
                raise ConfigError(f"paths.{key}", "unknown field")
            if value is not None and not isinstance(value, str):
                raise ConfigError(f"paths.{key}", "expected a string or null")
        kwargs["paths"] = Paths(**p)
    return RunConfig(**kwargs)


def load(path):
    try:
        with open(path) as fh:
            data = json.load(fh)
    except FileNotFoundError:
        raise ConfigError("<file>", f"config file not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError("<file>", f"invalid JSON in {path}: {exc}") from None
    return from_dict(data)


def _leaf_paths(d, prefix=""):
    for key, value in d.items():
        path = f"{prefix}{key}"
        if isinstance(value, dict):
            yield from _leaf_paths(value, path + ".")
        else:
            yield path


def provenance(config: RunConfig):
    """Map each leaf field to ``published``, ``spec-default`` or ``user``."""
    fresh = RunConfig().to_dict()
    current = config.to_dict()
    out = {}
    for path in _leaf_paths(current):
        a, b = current, fresh
        for part in path.split("."):
            a, b = a[part], b[part]
        if a != b:
            out[path] = "user"
        elif path in PUBLISHED_FIELDS:
            out[path] = "published"
        else:
            out[path] = "spec-default"
    return out


def dumps(config: RunConfig, with_provenance=True):
    d = config.to_dict()
    if with_provenance:
        d[PROVENANCE_KEY] = provenance(config)
    return json.dumps(d, indent=2, sort_keys=True)
