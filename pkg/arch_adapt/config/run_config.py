"""
YAML run configuration.

Sections map onto the typed settings of each module; anything left out falls
back to the module defaults. CLI flags override the file, and the file
overrides the environment-driven defaults in ``settings``.
"""
import logging
from dataclasses import dataclass, field, replace
from pathlib import Path

import yaml

from arch_adapt.config import settings
from arch_adapt.src.ees import EESConfig
from arch_adapt.src.errors import ConfigViolation
from arch_adapt.src.manifest import config_digest
from arch_adapt.src.fitness import FitnessParams, ResourceKind, parse_quantity
from arch_adapt.src.oracle import (
    CommandOracle,
    ReplayOracle,
    SyntheticAccuracyOracle,
    SyntheticDevice,
    SyntheticEnergyOracle,
)
from arch_adapt.src.sampler import SamplerConfig
from arch_adapt.src.space import SearchSpace

logger = logging.getLogger(__name__)

SECTIONS = (
    "space", "round_channels", "seed", "threads", "oracle", "energy_oracle", "sampler",
    "energy_sampler", "device", "fitness", "search", "sweep",
)
ORACLE_KINDS = ("synthetic", "replay", "command")
ENERGY_SAMPLER_DEFAULTS = {"initial_random": 48, "explore_count": 16, "exploit_count": 0}
DEFAULT_SWEEP = {
    ResourceKind.LATENCY: ("4 ms", "6 ms", "10 ms", "15 ms", "20 ms", "30 ms"),
    ResourceKind.ENERGY: ("15 mJ", "30 mJ", "50 mJ", "75 mJ", "100 mJ", "150 mJ"),
}


@dataclass(frozen=True)
class RunConfig:
    space: str = "chamnet-mobile"
    round_channels: bool = False
    seed: int = 0
    threads: int | None = None
    oracle: dict = field(default_factory=lambda: {"kind": "synthetic"})
    energy_oracle: dict = field(default_factory=lambda: {"kind": "synthetic"})
    sampler: dict = field(default_factory=dict)
    energy_sampler: dict = field(default_factory=dict)
    device: dict = field(default_factory=dict)
    fitness: dict = field(default_factory=lambda: {"kind": "latency", "thres": "20 ms"})
    search: dict = field(default_factory=dict)
    sweep: tuple = ()

    def __post_init__(self):
        for name in ("oracle", "energy_oracle"):
            kind = getattr(self, name).get("kind", "synthetic")
            if kind not in ORACLE_KINDS:
                raise ConfigViolation(f"{name}.kind must be one of {', '.join(ORACLE_KINDS)}, got {kind!r}")
        if self.threads is not None and self.threads < 1:
            raise ConfigViolation("threads must be positive")
        # fail on bad sections at load time rather than mid-run
        self.sampler_config()
        self.energy_sampler_config()
        self.ees_config()
        self.fitness_params()
        self.device_model()
        self.sweep_thresholds()

    @property
    def worker_threads(self) -> int:
        return self.threads or settings.DEFAULT_THREADS

    def sampler_config(self) -> SamplerConfig:
        return SamplerConfig.from_mapping({"seed": self.seed, **self.sampler})

    def energy_sampler_config(self) -> SamplerConfig:
        return SamplerConfig.from_mapping({"seed": self.seed, **ENERGY_SAMPLER_DEFAULTS, **self.energy_sampler})

    def ees_config(self) -> EESConfig:
        return EESConfig.from_mapping({"seed": self.seed, **self.search})

    def fitness_params(self, overrides: dict | None = None) -> FitnessParams:
        return FitnessParams.from_mapping({**self.fitness, **(overrides or {})})

    def device_model(self) -> SyntheticDevice:
        unknown = set(self.device) - {"profile", "channel_quantum", "overhead_us"}
        if unknown:
            raise ConfigViolation(f"unknown device settings: {sorted(unknown)}")
        try:
            return SyntheticDevice(**self.device)
        except ValueError as e:
            raise ConfigViolation(f"device: {e}")

    def sweep_thresholds(self, kind: ResourceKind | None = None) -> list[float]:
        kind = kind or self.fitness_params().resource_kind
        raw = self.sweep or DEFAULT_SWEEP[kind]
        return sorted(parse_quantity(value, kind) for value in raw)

    def accuracy_oracle(self, space: SearchSpace):
        return _build_oracle(dict(self.oracle), space, self.seed, energy=False, device=None)

    def energy_oracle_for(self, space: SearchSpace):
        return _build_oracle(dict(self.energy_oracle), space, self.seed, energy=True, device=self.device_model())

    def override(self, **changes) -> "RunConfig":
        return replace(self, **{k: v for k, v in changes.items() if v is not None})

    def to_mapping(self) -> dict:
        return {
            "space": self.space,
            "round_channels": self.round_channels,
            "seed": self.seed,
            "threads": self.threads,
            "oracle": self.oracle,
            "energy_oracle": self.energy_oracle,
            "sampler": self.sampler,
            "energy_sampler": self.energy_sampler,
            "device": self.device,
            "fitness": self.fitness,
            "search": self.search,
            "sweep": list(self.sweep),
        }

    @property
    def digest(self) -> str:
        return config_digest(self.to_mapping())


def _build_oracle(options: dict, space: SearchSpace, seed: int, energy: bool, device: SyntheticDevice | None):
    kind = options.pop("kind", "synthetic")
    try:
        if kind == "replay":
            return ReplayOracle(options.pop("path"), space, **options)
        if kind == "command":
            return CommandOracle(options.pop("command"), **options)
        options.setdefault("seed", seed)
        if energy:
            return SyntheticEnergyOracle(space, device, **options)
        return SyntheticAccuracyOracle(space, **options)
    except KeyError as e:
        raise ConfigViolation(f"{kind} oracle needs '{e.args[0]}'")
    except TypeError as e:
        raise ConfigViolation(f"{kind} oracle: {e}")


def from_mapping(data: dict | None) -> RunConfig:
    data = dict(data or {})
    unknown = set(data) - set(SECTIONS)
    if unknown:
        raise ConfigViolation(f"unknown configuration sections: {sorted(unknown)}")
    for name in ("oracle", "energy_oracle", "sampler", "energy_sampler", "device", "fitness", "search"):
        if name in data and not isinstance(data[name], dict):
            raise ConfigViolation(f"section '{name}' must be a mapping")
    if "sweep" in data:
        data["sweep"] = tuple(data["sweep"] or ())
    return RunConfig(**data)


def load_run_config(path=None) -> RunConfig:
    """Read a YAML run configuration; no path gives the defaults."""
    if path is None:
        return RunConfig()
    path = Path(path)
    try:
        with open(path, encoding="utf-8") as fh:
            data = yaml.safe_load(fh)
    except yaml.YAMLError as e:
        raise ConfigViolation(f"{path}: invalid YAML: {e}")
    except OSError as e:
        raise ConfigViolation(f"{path}: {e.strerror}")
    if data is not None and not isinstance(data, dict):
        raise ConfigViolation(f"{path}: top level must be a mapping")
    config = from_mapping(data)
    logger.debug(f"Loaded run configuration from {path} (digest {config.digest[:12]})")
    return config
