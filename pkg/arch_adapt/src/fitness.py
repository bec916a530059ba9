"""
Constrained-search objective: predicted accuracy minus a resource penalty.
"""
import logging
import re
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass
from enum import Enum
from typing import Protocol, Sequence

import numpy as np

from arch_adapt.src.errors import ConfigViolation
from arch_adapt.src.space import Gene

logger = logging.getLogger(__name__)

QUANTITY_PATTERN = re.compile(r"^\s*([0-9]*\.?[0-9]+(?:[eE][-+]?\d+)?)\s*(/)?\s*(ms|mJ)\s*$")


class PenaltyMode(str, Enum):
    RAMP = "ramp"
    STEP = "step"


class ResourceKind(str, Enum):
    LATENCY = "latency"
    ENERGY = "energy"

    @property
    def unit(self) -> str:
        return "ms" if self == ResourceKind.LATENCY else "mJ"


def parse_quantity(raw, kind: ResourceKind, inverse: bool = False) -> float:
    """
    Parse "20 ms" / "30 mJ" (or "10/ms" / "10/mJ" when ``inverse``).

    Raises:
        ConfigViolation: The unit is missing or does not match the constraint kind
    """
    what = f"1/{kind.unit}" if inverse else kind.unit
    if isinstance(raw, (int, float)) and not isinstance(raw, bool):
        raise ConfigViolation(f"{raw!r} needs a unit ({what})")
    match = QUANTITY_PATTERN.match(str(raw))
    if not match:
        raise ConfigViolation(f"cannot parse {raw!r} as a quantity in {what}")
    value, slash, unit = match.groups()
    if bool(slash) != inverse or unit != kind.unit:
        raise ConfigViolation(f"{raw!r} has the wrong unit for a {kind.value} constraint (expected {what})")
    return float(value)


@dataclass(frozen=True)
class FitnessParams:
    thres: float
    alpha: float = 10.0
    w: float = 2.0
    penalty_mode: PenaltyMode = PenaltyMode.RAMP
    resource_kind: ResourceKind = ResourceKind.LATENCY

    def __post_init__(self):
        object.__setattr__(self, "penalty_mode", PenaltyMode(self.penalty_mode))
        object.__setattr__(self, "resource_kind", ResourceKind(self.resource_kind))
        if self.alpha <= 0 or self.w <= 0 or self.thres <= 0:
            raise ConfigViolation("alpha, w and thres must all be positive")

    @classmethod
    def from_mapping(cls, data: dict) -> "FitnessParams":
        data = dict(data or {})
        unknown = set(data) - {"kind", "thres", "alpha", "w", "penalty"}
        if unknown:
            raise ConfigViolation(f"unknown fitness settings: {sorted(unknown)}")
        try:
            kind = ResourceKind(data.get("kind", "latency"))
            mode = PenaltyMode(data.get("penalty", "ramp"))
        except ValueError as e:
            raise ConfigViolation(str(e))
        if "thres" not in data:
            raise ConfigViolation("fitness.thres is required")
        return cls(
            thres=parse_quantity(data["thres"], kind),
            alpha=parse_quantity(data.get("alpha", f"10/{kind.unit}"), kind, inverse=True),
            w=float(data.get("w", 2.0)),
            penalty_mode=mode,
            resource_kind=kind,
        )

    def with_thres(self, thres: float) -> "FitnessParams":
        return FitnessParams(thres, self.alpha, self.w, self.penalty_mode, self.resource_kind)

    def to_mapping(self) -> dict:
        unit = self.resource_kind.unit
        return {
            "kind": self.resource_kind.value,
            "thres": f"{self.thres:g} {unit}",
            "alpha": f"{self.alpha:g}/{unit}",
            "w": self.w,
            "penalty": self.penalty_mode.value,
        }


@dataclass(frozen=True)
class FitnessResult:
    fitness: float
    accuracy: float
    resource: float
    feasible: bool

    def to_dict(self) -> dict:
        return asdict(self)


class AccuracyModel(Protocol):
    def predict_many(self, genes: Sequence[Gene]) -> np.ndarray:
        ...


class ResourceModel(Protocol):
    def predict_many(self, genes: Sequence[Gene]) -> np.ndarray:
        ...


def penalty(resource: float, params: FitnessParams) -> float:
    if params.penalty_mode == PenaltyMode.STEP:
        return params.alpha ** params.w if resource > params.thres else 0.0
    return (params.alpha * max(resource - params.thres, 0.0)) ** params.w


def score(accuracy: float, resource: float, params: FitnessParams) -> FitnessResult:
    feasible = bool(resource <= params.thres)
    fitness = accuracy if feasible else accuracy - penalty(resource, params)
    return FitnessResult(float(fitness), float(accuracy), float(resource), feasible)


def evaluate(gene: Gene, acc_model: AccuracyModel, res_predictor: ResourceModel,
             params: FitnessParams) -> FitnessResult:
    return evaluate_many([gene], acc_model, res_predictor, params)[0]


def evaluate_many(genes: Sequence[Gene], acc_model: AccuracyModel, res_predictor: ResourceModel,
                  params: FitnessParams, threads: int = 1) -> list[FitnessResult]:
    """Score a batch; resource predictions are split across threads when threads > 1."""
    genes = list(genes)
    if not genes:
        return []
    accuracies = acc_model.predict_many(genes)
    if threads > 1 and len(genes) > 1:
        chunks = [genes[i::threads] for i in range(threads) if genes[i::threads]]
        with ThreadPoolExecutor(max_workers=len(chunks)) as pool:
            parts = list(pool.map(res_predictor.predict_many, chunks))
        resources = np.empty(len(genes))
        for offset, part in enumerate(parts):
            resources[offset::len(chunks)] = part
    else:
        resources = res_predictor.predict_many(genes)
    return [score(a, r, params) for a, r in zip(accuracies, resources)]
