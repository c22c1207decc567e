"""Declarative run configuration stored as one flat JSON document."""
from __future__ import annotations

import json
import types
import typing
from dataclasses import asdict, dataclass, field, fields

from .nsga2 import SearchConfig
from .space import PathSpec, SearchSpaceSpec, TrainHyper, stable_hash


class ConfigError(ValueError):
    """Malformed configuration; ``where`` names the field or line at fault."""

    def __init__(self, message: str, where: str = ""):
        super().__init__(f"{where}: {message}" if where else message)
        self.where = where


@dataclass
class RunConfig:
    """Every knob of an experiment. Defaults are the reference micro-config."""

    seed: int = 0
    # search space
    kernels: list = field(default_factory=lambda: [1, 3, 7])
    num_layers: int = 4
    max_paths: int = 2
    channels: int = 8
    expansion: int = 2
    image_size: int = 8
    num_classes: int = 4
    aggregation: str = "sum-then-1x1-projection"
    sbn_mode: str = "linear"
    path_init: str = "dirac"
    path_init_noise: float = 0.5
    # synthetic data
    n_train: int = 1000
    n_val: int = 2000
    noise: float = 1.0
    # optimisation (supernet and standalone)
    epochs: int = 10
    batch_size: int = 32
    lr: float = 0.025
    momentum: float = 0.9
    weight_decay: float = 3e-4
    bernoulli_p: float = 0.5
    # oracle
    bench_samples: int = 70
    bench_seeds: list = field(default_factory=lambda: [0, 1, 2])
    # ranking and calibration
    rank_samples: int = 70
    calibrate: bool = True
    calib_batches: int = 8
    ablation: bool = False
    ablation_seeds: list = field(default_factory=lambda: [0, 1, 2])
    # probes and statistics
    probe_every: int = 2
    probe_models: int = 20
    stats_block: int = 0
    # search
    search_backend: str = "bench"
    acc_min: float | None = None
    flops_max: int | None = None
    generations: int = 10
    pop_size: int = 20
    weights: list = field(default_factory=lambda: [1.0, 1.0])
    tournament_size: int = 2
    crossover_rate: float = 1.0
    mutation_rate: float = 0.05
    pick_count: int = 5
    max_evals: int | None = None
    random_baseline: bool = True

    def __post_init__(self):
        for f in fields(self):
            _check_type(f.name, getattr(self, f.name), _hints()[f.name])
        if self.search_backend not in ("bench", "supernet"):
            raise ConfigError("must be 'bench' or 'supernet'", "search_backend")
        try:
            self.space()
            self.hyper()
            if self.acc_min is not None and self.flops_max is not None:
                self.search()
        except (ValueError, TypeError) as exc:
            raise ConfigError(str(exc), "config") from None
        if self.n_train < 2 or self.n_val < 1:
            raise ConfigError("need n_train >= 2 and n_val >= 1", "n_train")
        if not self.bench_seeds or not self.ablation_seeds:
            raise ConfigError("seed lists must be non-empty", "bench_seeds")
        if self.calib_batches < 1:
            raise ConfigError("must be >= 1", "calib_batches")
        if self.probe_every < 1 or self.probe_models < 2:
            raise ConfigError("need probe_every >= 1 and probe_models >= 2", "probe_every")
        if not 0 <= self.stats_block < self.num_layers:
            raise ConfigError(f"must be in [0, {self.num_layers})", "stats_block")

    # ---- views ------------------------------------------------------------

    def space(self) -> SearchSpaceSpec:
        return SearchSpaceSpec(
            paths=tuple(PathSpec(kernel=k) for k in self.kernels), num_layers=self.num_layers,
            max_paths=self.max_paths, channels=self.channels, expansion=self.expansion,
            image_size=self.image_size, num_classes=self.num_classes,
            aggregation=self.aggregation, sbn_mode=self.sbn_mode, path_init=self.path_init,
            path_init_noise=self.path_init_noise)

    def hyper(self) -> TrainHyper:
        return TrainHyper(epochs=self.epochs, batch_size=self.batch_size, lr=self.lr,
                          momentum=self.momentum, weight_decay=self.weight_decay,
                          bernoulli_p=self.bernoulli_p)

    def search(self) -> SearchConfig:
        """Search settings; ``acc_min`` and ``flops_max`` have no defaults and must be set."""
        missing = [k for k in ("acc_min", "flops_max") if getattr(self, k) is None]
        if missing:
            raise ConfigError("required for search (no default)", missing[0])
        return SearchConfig(
            acc_min=self.acc_min, flops_max=self.flops_max, generations=self.generations,
            pop_size=self.pop_size, weights=tuple(self.weights),
            tournament_size=self.tournament_size, crossover_rate=self.crossover_rate,
            mutation_rate=self.mutation_rate, pick_count=self.pick_count,
            max_evals=self.max_evals, bernoulli_p=self.bernoulli_p)

    def data_desc(self) -> dict:
        return {"generator": "synthetic", "seed": self.seed, "n_train": self.n_train,
                "n_val": self.n_val, "noise": self.noise, "image_size": self.image_size,
                "num_classes": self.num_classes}

    # ---- persistence ------------------------------------------------------

    def to_dict(self) -> dict:
        return asdict(self)

    def config_hash(self) -> str:
        return stable_hash(self.to_dict())

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        if not isinstance(d, dict):
            raise ConfigError("top level must be a JSON object")
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise ConfigError(f"unknown key(s) {unknown}", unknown[0])
        return cls(**d)

    @classmethod
    def loads(cls, text: str) -> "RunConfig":
        try:
            d = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigError(exc.msg, f"line {exc.lineno} column {exc.colno}") from None
        return cls.from_dict(d)

    @classmethod
    def load(cls, path) -> "RunConfig":
        with open(path, encoding="utf-8") as fh:
            return cls.loads(fh.read())

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(self.dumps())

    def with_(self, **changes) -> "RunConfig":
        d = self.to_dict()
        d.update(changes)
        return RunConfig.from_dict(d)


def _hints():
    return typing.get_type_hints(RunConfig)


def _check_type(name, value, hint):
    origin = typing.get_origin(hint)
    if origin in (typing.Union, types.UnionType):
        opts = typing.get_args(hint)
        if value is None and type(None) in opts:
            return
        hint = next(o for o in opts if o is not type(None))
    if hint is bool:
        ok = isinstance(value, bool)
    elif hint is int:
        ok = isinstance(value, int) and not isinstance(value, bool)
    elif hint is float:
        ok = isinstance(value, (int, float)) and not isinstance(value, bool)
    elif hint is str:
        ok = isinstance(value, str)
    elif hint is list:
        ok = isinstance(value, list) and all(
            isinstance(v, (int, float)) and not isinstance(v, bool) for v in value)
    else:
        ok = True
    if not ok:
        raise ConfigError(f"expected {getattr(hint, '__name__', hint)}, got {value!r}", name)


def parse_override(name: str, text: str):
    """Convert a command-line string to the type of config field ``name``."""
    hint = _hints()[name]
    if typing.get_origin(hint) is not None:
        hint = next(o for o in typing.get_args(hint) if o is not type(None))
        if text.lower() in ("none", "null"):
            return None
    try:
        if hint is bool:
            if text.lower() in ("1", "true", "yes", "on"):
                return True
            if text.lower() in ("0", "false", "no", "off"):
                return False
            raise ValueError(text)
        if hint is int:
            return int(text)
        if hint is float:
            return float(text)
        if hint is list:
            return [json.loads(v) for v in text.split(",") if v.strip()]
        return text
    except ValueError:
        raise ConfigError(f"cannot parse {text!r}", name) from None


def field_names() -> list:
    return [f.name for f in fields(RunConfig)]
