"""Run configuration: one document covering every module config.

Documents are YAML or JSON mappings. Each section maps onto a frozen
dataclass; unknown keys anywhere are rejected with the dotted path of the
offending key. Lists become tuples so configs stay hashable.
"""
from __future__ import annotations

import dataclasses
import json
import re
from dataclasses import dataclass, field

import yaml

from .barrier import BarrierConfig
from .cvae import ModelConfig, ReconConfig
from .data.corridor import CorridorConfig
from .data.intersection import IntersectionConfig
from .errors import InvalidInputError
from .evaluation import PolicyConfig
from .safety_filter import FilterConfig
from .sequence import EncoderConfig
from .training import TrainConfig

GENERATORS = ("corridor", "intersection")


class _Loader(yaml.SafeLoader):
    """Safe loader that also reads ``1e-8`` style floats (YAML 1.1 needs a dot)."""


_Loader.add_implicit_resolver(
    "tag:yaml.org,2002:float",
    re.compile(r"^[-+]?(?:[0-9][0-9_]*)(?:\.[0-9_]*)?[eE][-+]?[0-9]+$"),
    list("-+0123456789"),
)


@dataclass(frozen=True)
class DataConfig:
    generator: str = "corridor"
    count: int = 10000  # corridor data
    episodes: int = 60  # intersection episodes
    test_fraction: float = 0.2
    corridor: CorridorConfig = field(default_factory=CorridorConfig)
    intersection: IntersectionConfig = field(default_factory=IntersectionConfig)

    def __post_init__(self):
        if self.generator not in GENERATORS:
            raise InvalidInputError(f"unknown generator {self.generator!r}; expected one of {GENERATORS}")
        if self.count < 1 or self.episodes < 1:
            raise InvalidInputError("count and episodes must be >= 1")
        if not 0 <= self.test_fraction < 1:
            raise InvalidInputError("test_fraction must lie in [0, 1)")


@dataclass(frozen=True)
class EvalConfig:
    horizon: int = 10
    dt: float = 0.1
    n_samples: int = 8
    seeds: tuple = (0, 1, 2)
    threshold: float = 1.0
    max_scenes: int = 200
    bins: int = 50
    gaps: tuple = (5.5, 7.0, 8.5, 10.0, 11.5)
    best_of_k: bool = False
    policy: PolicyConfig = field(default_factory=PolicyConfig)

    def __post_init__(self):
        if self.horizon < 0 or self.n_samples < 1 or self.bins < 1:
            raise InvalidInputError("horizon >= 0, n_samples >= 1 and bins >= 1 required")
        if len(self.seeds) < 1:
            raise InvalidInputError("at least one evaluation seed is required")


@dataclass(frozen=True)
class RunConfig:
    seed: int = 0
    out: str = "runs/default"
    data: DataConfig = field(default_factory=DataConfig)
    filter: FilterConfig = field(default_factory=FilterConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    recon: ReconConfig = field(default_factory=ReconConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)


# nested sections: (owner class, field name) -> dataclass
_NESTED = {
    (RunConfig, "data"): DataConfig,
    (RunConfig, "filter"): FilterConfig,
    (RunConfig, "model"): ModelConfig,
    (RunConfig, "recon"): ReconConfig,
    (RunConfig, "train"): TrainConfig,
    (RunConfig, "eval"): EvalConfig,
    (DataConfig, "corridor"): CorridorConfig,
    (DataConfig, "intersection"): IntersectionConfig,
    (FilterConfig, "barrier"): BarrierConfig,
    (ModelConfig, "encoder"): EncoderConfig,
    (EvalConfig, "policy"): PolicyConfig,
}


def _tuples(v):
    if isinstance(v, list):
        return tuple(_tuples(x) for x in v)
    return v


def build(cls, doc, path=""):
    """Instantiate ``cls`` from a mapping, rejecting unknown keys."""
    if doc is None:
        doc = {}
    if not isinstance(doc, dict):
        raise InvalidInputError(f"{path or 'config'}: expected a mapping, got {type(doc).__name__}")
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(doc) - names)
    if unknown:
        raise InvalidInputError(f"unknown keys {[f'{path}{k}' for k in unknown]}")
    kw = {}
    for key, value in doc.items():
        sub = _NESTED.get((cls, key))
        kw[key] = build(sub, value, f"{path}{key}.") if sub else _tuples(value)
    try:
        return cls(**kw)
    except TypeError as err:
        raise InvalidInputError(f"{path or 'config'}: {err}") from None


def to_dict(cfg):
    return json.loads(json.dumps(dataclasses.asdict(cfg)))


def loads(text) -> RunConfig:
    """Parse YAML (a superset of JSON) text into a :class:`RunConfig`."""
    try:
        doc = yaml.load(text, Loader=_Loader)
    except yaml.YAMLError as err:
        raise InvalidInputError(f"config does not parse: {err}") from None
    return build(RunConfig, doc)


def load(path) -> RunConfig:
    with open(path, encoding="utf-8") as fh:
        return loads(fh.read())


def replace(cfg: RunConfig, **changes) -> RunConfig:
    return dataclasses.replace(cfg, **changes)


def dump(cfg: RunConfig, path):
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(to_dict(cfg), fh, indent=1, sort_keys=True)
