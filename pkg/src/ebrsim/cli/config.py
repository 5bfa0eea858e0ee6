"""Experiment configuration: one YAML file, validated section by section.

Every section maps onto the config type of the module it drives. The
fingerprint is a stable hash of the fully resolved config (defaults filled
in, output directory excluded), so two files that resolve to the same
experiment share a fingerprint.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Any

import yaml

from ..domain import InputDomainError
from ..evalharness import DEFAULT_NEGATIVES, SWEEP_NPROBES, VARIANTS, variant_config
from ..io import stable_hash
from ..sampling import NegativeSamplingPolicy
from ..serving import CascadeConfig
from ..twotower.network import TowerConfig
from ..worldgen import WorldConfig

EVAL_MODES = ("logged", "replay", "sweep", "samplers")
SCHEMES = ("trip", "search")


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class SamplingSection:
    scheme: str = "trip"
    weights: tuple[float, float, float] = (0.5, 0.3, 0.2)
    negatives_per_example: int = 9
    lookback: float = 30.0

    def __post_init__(self) -> None:
        if self.scheme not in SCHEMES:
            raise ConfigError(f"sampling.scheme must be one of {SCHEMES}, got {self.scheme!r}")
        if self.lookback <= 0:
            raise ConfigError("sampling.lookback must be positive")
        object.__setattr__(self, "weights", tuple(float(w) for w in self.weights))

    @property
    def policy(self) -> NegativeSamplingPolicy:
        return NegativeSamplingPolicy.normalized(self.weights, self.negatives_per_example)


@dataclass(frozen=True)
class TowerSection:
    """A named variant plus field overrides of the tower config."""

    variant: str = "v3"
    overrides: dict = field(default_factory=dict)

    def __post_init__(self) -> None:
        if self.variant not in VARIANTS:
            raise ConfigError(f"tower.variant must be one of {sorted(VARIANTS)}")
        known = {f.name for f in fields(TowerConfig)} - {"num_places", "seed"}
        bad = set(self.overrides) - known
        if bad:
            raise ConfigError(f"unknown tower fields: {sorted(bad)}")

    def resolve(self, num_places: int, seed: int) -> TowerConfig:
        kw = dict(self.overrides)
        if "hidden" in kw:
            kw["hidden"] = tuple(kw["hidden"])
        return variant_config(self.variant, num_places, seed, **kw)


@dataclass(frozen=True)
class IndexSection:
    k: int = 128
    iters: int = 25
    kmeans_seed: int = 1
    augmented: bool = False

    def __post_init__(self) -> None:
        if self.k < 1 or self.iters < 1:
            raise ConfigError("index.k and index.iters must be positive")


@dataclass(frozen=True)
class EvalSection:
    mode: str = "replay"
    num_negatives: int = DEFAULT_NEGATIVES
    replay_queries: int = 300
    min_eligible: int = 200
    threshold: int = 10
    truth_k: int = 100
    nprobes_list: tuple[int, ...] = SWEEP_NPROBES
    sweep_queries: int = 300
    seeds: tuple[int, ...] = (1, 2, 3, 4, 5)

    def __post_init__(self) -> None:
        if self.mode not in EVAL_MODES:
            raise ConfigError(f"eval.mode must be one of {EVAL_MODES}, got {self.mode!r}")
        object.__setattr__(self, "nprobes_list", tuple(int(p) for p in self.nprobes_list))
        object.__setattr__(self, "seeds", tuple(int(s) for s in self.seeds))
        if not self.nprobes_list or min(self.nprobes_list) < 1:
            raise ConfigError("eval.nprobes_list needs positive entries")
        if not self.seeds:
            raise ConfigError("eval.seeds must not be empty")
        for name in ("num_negatives", "replay_queries", "threshold", "truth_k", "sweep_queries"):
            if getattr(self, name) < 1:
                raise ConfigError(f"eval.{name} must be positive")


_SECTIONS = {"sampling": SamplingSection, "tower": TowerSection, "index": IndexSection,
             "eval": EvalSection}


@dataclass(frozen=True)
class ExperimentConfig:
    world: WorldConfig = field(default_factory=WorldConfig)
    sampling: SamplingSection = field(default_factory=SamplingSection)
    tower: TowerSection = field(default_factory=TowerSection)
    index: IndexSection = field(default_factory=IndexSection)
    cascade: CascadeConfig = field(default_factory=CascadeConfig)
    eval: EvalSection = field(default_factory=EvalSection)
    seed: int = 7
    out: str | None = None

    def __post_init__(self) -> None:
        if self.world.seed != self.seed:
            object.__setattr__(self, "world", replace(self.world, seed=self.seed))
        # Resolving surfaces tower and policy errors at load time.
        self.tower_config
        self.sampling.policy
        k = self.index.k
        if max(self.eval.nprobes_list) > k or self.cascade.nprobes > k:
            raise ConfigError(f"nprobes values must not exceed index.k = {k}")
        if self.index.k > self.world.num_listings:
            raise ConfigError("index.k exceeds the number of listings")

    @property
    def tower_config(self) -> TowerConfig:
        return self.tower.resolve(self.world.num_places, self.seed)

    def to_dict(self) -> dict[str, Any]:
        """Fully resolved config; the same shape the loader accepts."""
        world = self.world.to_dict()
        world.pop("seed")
        return {
            "seed": self.seed,
            "world": _plain(world),
            "sampling": _plain(asdict(self.sampling)),
            "tower": {"variant": self.tower.variant, "overrides": _plain(self.tower.overrides)},
            "index": asdict(self.index),
            "cascade": self.cascade.to_dict(),
            "eval": _plain(asdict(self.eval)),
        }

    @property
    def fingerprint(self) -> str:
        return stable_hash(self.to_dict())

    def with_(self, **kw) -> ExperimentConfig:
        return replace(self, **kw)

    @classmethod
    def from_dict(cls, d: dict[str, Any] | None, out: str | None = None) -> ExperimentConfig:
        d = dict(d or {})
        unknown = set(d) - {"seed", "world", "cascade", "out", *_SECTIONS}
        if unknown:
            raise ConfigError(f"unknown config sections: {sorted(unknown)}")
        kw: dict[str, Any] = {}
        try:
            if "seed" in d:
                kw["seed"] = int(d["seed"])
            world = dict(d.get("world") or {})
            if "seed" in world:
                raise ConfigError("set the seed at the top level, not under world")
            kw["world"] = WorldConfig.from_dict({**world, "seed": kw.get("seed", 7)})
            if "cascade" in d:
                kw["cascade"] = CascadeConfig.from_dict(dict(d["cascade"]))
            for name, section in _SECTIONS.items():
                if name in d:
                    kw[name] = _section(section, name, d[name])
            return cls(**kw, out=out if out is not None else d.get("out"))
        except TypeError as e:
            raise ConfigError(str(e)) from e
        except InputDomainError as e:
            raise ConfigError(str(e)) from e


def _section(cls, name: str, raw: Any):
    if not isinstance(raw, dict):
        raise ConfigError(f"section {name!r} must be a mapping")
    known = {f.name for f in fields(cls)}
    bad = set(raw) - known
    if bad:
        raise ConfigError(f"unknown fields in {name!r}: {sorted(bad)}")
    return cls(**raw)


def _plain(x: Any) -> Any:
    if isinstance(x, dict):
        return {k: _plain(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_plain(v) for v in x]
    return x


def load_config(path: str | Path | None = None, seed: int | None = None,
                out: str | None = None) -> ExperimentConfig:
    """Config from a YAML file (or defaults), with command-line overrides applied."""
    raw: dict[str, Any] = {}
    if path is not None:
        p = Path(path)
        if not p.is_file():
            raise ConfigError(f"config file not found: {p}")
        loaded = yaml.safe_load(p.read_text())
        if loaded is not None and not isinstance(loaded, dict):
            raise ConfigError(f"{p}: top level must be a mapping")
        raw = loaded or {}
    if seed is not None:
        raw = {**raw, "seed": seed}
    return ExperimentConfig.from_dict(raw, out=out)


def dump_config(config: ExperimentConfig) -> str:
    return yaml.safe_dump(config.to_dict(), sort_keys=False)
