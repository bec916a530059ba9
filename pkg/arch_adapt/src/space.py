"""
Gene-encoded adaptation spaces.

A search space is an ordered list of stages, each with expansion factor (t),
output channels (c), repeat count (n) and a fixed stride (s). Searchable values
carry a [lower, upper] range; a gene holds one integer per searchable value in
schema order (resolution first when it is searchable, then each stage's t, c, n).
"""
import hashlib
import itertools
import json
import logging
import math
import re
from dataclasses import dataclass
from enum import Enum
from functools import cached_property
from pathlib import Path

import numpy as np
import yaml

from arch_adapt.config.settings import SPACES_DIR
from arch_adapt.src.errors import ConfigViolation, DimensionMismatch, InvalidGene

logger = logging.getLogger(__name__)

BUILTIN_SPACES = ("chamnet-mobile", "chamnet-res")
CHANNEL_ROUNDING = 8
RANGE_PATTERN = re.compile(r"^\s*(\d+)\s*\[\s*(\d+)\s*,\s*(\d+)\s*\]\s*$")
NOT_APPLICABLE = (None, "-")


class OpKind(str, Enum):
    CONV2D = "conv2d"
    INVERTED_BOTTLENECK = "inverted_bottleneck"
    RESIDUAL_BOTTLENECK = "residual_bottleneck"
    AVGPOOL = "avgpool"
    FC = "fc"


class HyperparamKind(str, Enum):
    EXPANSION_FACTOR = "expansion_factor"
    CHANNELS = "channels"
    REPEATS = "repeats"
    RESOLUTION = "resolution"
    STRIDE_FIXED = "stride_fixed"


LEGAL_KINDS = {
    OpKind.CONV2D: {HyperparamKind.CHANNELS, HyperparamKind.REPEATS},
    OpKind.INVERTED_BOTTLENECK: {
        HyperparamKind.EXPANSION_FACTOR, HyperparamKind.CHANNELS, HyperparamKind.REPEATS,
    },
    OpKind.RESIDUAL_BOTTLENECK: {
        HyperparamKind.EXPANSION_FACTOR, HyperparamKind.CHANNELS, HyperparamKind.REPEATS,
    },
    OpKind.AVGPOOL: {HyperparamKind.REPEATS},
    OpKind.FC: {HyperparamKind.CHANNELS},
}

# schema column -> hyperparameter kind
COLUMNS = (
    ("t", HyperparamKind.EXPANSION_FACTOR),
    ("c", HyperparamKind.CHANNELS),
    ("n", HyperparamKind.REPEATS),
)


@dataclass(frozen=True)
class HyperparamDef:
    name: str
    lower: int
    upper: int
    kind: HyperparamKind
    default: int | None = None
    step: int = 1

    def __post_init__(self):
        if self.default is None:
            object.__setattr__(self, "default", self.lower)
        if self.lower <= 0 or self.upper <= 0:
            raise ConfigViolation(f"{self.name}: bounds must be positive, got [{self.lower}, {self.upper}]")
        if self.lower > self.upper:
            raise ConfigViolation(f"{self.name}: lower bound {self.lower} exceeds upper bound {self.upper}")
        if self.step <= 0:
            raise ConfigViolation(f"{self.name}: step must be positive")
        if self.kind == HyperparamKind.STRIDE_FIXED and self.lower != self.upper:
            raise ConfigViolation(f"{self.name}: strides are not searchable")
        if not self.contains(self.default):
            raise ConfigViolation(
                f"{self.name}: default {self.default} is off the grid [{self.lower}, {self.upper}] step {self.step}"
            )

    @property
    def searchable(self) -> bool:
        return self.lower < self.upper

    @property
    def levels(self) -> int:
        return (self.upper - self.lower) // self.step + 1

    def values(self) -> range:
        return range(self.lower, self.upper + 1, self.step)

    def contains(self, value: int) -> bool:
        return self.lower <= value <= self.upper and (value - self.lower) % self.step == 0

    def level_value(self, level: int) -> int:
        return self.lower + level * self.step


@dataclass(frozen=True)
class StageDef:
    op_kind: OpKind
    hyperparams: tuple[HyperparamDef, ...] = ()
    stride: int = 1
    kernel_size: int = 1

    def __post_init__(self):
        legal = LEGAL_KINDS[self.op_kind]
        for hp in self.hyperparams:
            if hp.kind not in legal:
                raise ConfigViolation(f"{hp.name}: {hp.kind.value} is not legal for {self.op_kind.value}")
            single_shot = self.op_kind in (OpKind.AVGPOOL, OpKind.FC)
            if single_shot and hp.kind == HyperparamKind.REPEATS and (hp.lower, hp.upper) != (1, 1):
                raise ConfigViolation(f"{hp.name}: {self.op_kind.value} cannot repeat")
        if self.stride <= 0 or self.kernel_size <= 0:
            raise ConfigViolation(f"{self.op_kind.value}: stride and kernel must be positive")

    def param(self, kind: HyperparamKind) -> HyperparamDef | None:
        for hp in self.hyperparams:
            if hp.kind == kind:
                return hp
        return None


@dataclass(frozen=True)
class Gene:
    values: tuple[int, ...]

    def __post_init__(self):
        object.__setattr__(self, "values", tuple(int(v) for v in self.values))

    def __len__(self):
        return len(self.values)

    def __iter__(self):
        return iter(self.values)

    def __getitem__(self, index):
        return self.values[index]

    def __str__(self):
        return ",".join(str(v) for v in self.values)

    @classmethod
    def parse(cls, text: str) -> "Gene":
        text = text.strip()
        if not text:
            return cls(())
        return cls(tuple(int(part) for part in text.split(",")))

    def replace(self, index: int, value: int) -> "Gene":
        values = list(self.values)
        values[index] = value
        return Gene(tuple(values))


@dataclass(frozen=True, order=True)
class OperatorKey:
    op_kind: OpKind
    input_h: int
    input_w: int
    in_channels: int
    out_channels: int
    stride: int
    kernel_size: int
    expansion: int = 1

    def __post_init__(self):
        object.__setattr__(self, "op_kind", OpKind(self.op_kind))
        dims = (self.input_h, self.input_w, self.in_channels, self.out_channels,
                self.stride, self.kernel_size, self.expansion)
        if any(int(d) <= 0 for d in dims):
            raise ValueError(f"operator dimensions must be positive: {dims}")

    @property
    def output_hw(self) -> tuple[int, int]:
        if self.op_kind in (OpKind.AVGPOOL, OpKind.FC):
            return 1, 1
        return math.ceil(self.input_h / self.stride), math.ceil(self.input_w / self.stride)

    def fields(self) -> tuple:
        return (self.op_kind.value, self.input_h, self.input_w, self.in_channels,
                self.out_channels, self.stride, self.kernel_size, self.expansion)

    def __str__(self):
        return ",".join(str(f) for f in self.fields())


@dataclass(frozen=True)
class Architecture:
    """Decoded network: concrete operators in execution order."""

    resolution: int
    operators: tuple[OperatorKey, ...] = ()
    stage_index: tuple[int, ...] = ()

    def __add__(self, other: "Architecture") -> "Architecture":
        return Architecture(
            self.resolution,
            self.operators + other.operators,
            self.stage_index + other.stage_index,
        )

    def __len__(self):
        return len(self.operators)

    def __iter__(self):
        return iter(self.operators)

    def count(self, op_kind: OpKind) -> int:
        return sum(1 for op in self.operators if op.op_kind == op_kind)


@dataclass(frozen=True)
class SearchSpace:
    name: str
    stages: tuple[StageDef, ...]
    resolution: HyperparamDef
    input_channels: int = 3

    def __post_init__(self):
        if not self.stages:
            raise ConfigViolation(f"space '{self.name}' has no stages")
        last = self.stages[-1]
        head = last.param(HyperparamKind.CHANNELS)
        if last.op_kind != OpKind.FC or head is None or head.searchable:
            raise ConfigViolation(f"space '{self.name}' must end in an fc stage with a fixed output count")

    @cached_property
    def searchable(self) -> tuple[tuple[int | None, HyperparamDef], ...]:
        """(stage index or None for resolution, definition) per gene position."""
        slots = []
        if self.resolution.searchable:
            slots.append((None, self.resolution))
        for index, stage in enumerate(self.stages):
            for hp in stage.hyperparams:
                if hp.searchable:
                    slots.append((index, hp))
        return tuple(slots)

    @property
    def dims(self) -> int:
        return len(self.searchable)

    @property
    def names(self) -> list[str]:
        return [hp.name for _, hp in self.searchable]

    @cached_property
    def lower_bounds(self) -> np.ndarray:
        return np.array([hp.lower for _, hp in self.searchable], dtype=float)

    @cached_property
    def upper_bounds(self) -> np.ndarray:
        return np.array([hp.upper for _, hp in self.searchable], dtype=float)

    @property
    def size(self) -> int:
        """Number of distinct genes."""
        return math.prod(hp.levels for _, hp in self.searchable)

    def default_gene(self) -> Gene:
        return Gene(tuple(hp.default for _, hp in self.searchable))

    def lower_gene(self) -> Gene:
        return Gene(tuple(hp.lower for _, hp in self.searchable))

    def index_of(self, name: str) -> int:
        return self.names.index(name)

    def positions(self, kind: HyperparamKind) -> list[int]:
        return [i for i, (_, hp) in enumerate(self.searchable) if hp.kind == kind]

    def gene_from_unit(self, point) -> Gene:
        """Map a point of [0, 1)^dims onto the integer grid."""
        values = []
        for u, (_, hp) in zip(point, self.searchable):
            level = min(int(math.floor(u * hp.levels)), hp.levels - 1)
            values.append(hp.level_value(max(level, 0)))
        return Gene(tuple(values))

    def enumerate_genes(self):
        return (Gene(values) for values in itertools.product(*(hp.values() for _, hp in self.searchable)))

    def resolve(self, gene: Gene) -> tuple[int, list[dict]]:
        """Resolution and per-stage {kind: value} with fixed values filled in."""
        values = iter(gene.values)
        resolution = next(values) if self.resolution.searchable else self.resolution.default
        per_stage = []
        for stage in self.stages:
            settings = {}
            for hp in stage.hyperparams:
                settings[hp.kind] = next(values) if hp.searchable else hp.default
            per_stage.append(settings)
        return resolution, per_stage

    def normalize(self, genes) -> np.ndarray:
        """Affine map of each gene dimension onto [0, 1] using its schema bounds."""
        matrix = np.array([g.values if isinstance(g, Gene) else tuple(g) for g in genes], dtype=float)
        if matrix.size == 0:
            return matrix.reshape(len(matrix), self.dims)
        if matrix.shape[1] != self.dims:
            raise DimensionMismatch(f"genes have {matrix.shape[1]} values, space '{self.name}' has {self.dims}")
        return (matrix - self.lower_bounds) / (self.upper_bounds - self.lower_bounds)

    def to_mapping(self) -> dict:
        def hp_entry(hp):
            if hp is None:
                return None
            return [hp.default, hp.lower, hp.upper, hp.step]

        return {
            "name": self.name,
            "input_channels": self.input_channels,
            "resolution": hp_entry(self.resolution),
            "stages": [
                {
                    "op": stage.op_kind.value,
                    "s": stage.stride,
                    "kernel": stage.kernel_size,
                    **{column: hp_entry(stage.param(kind)) for column, kind in COLUMNS},
                }
                for stage in self.stages
            ],
        }

    @cached_property
    def digest(self) -> str:
        canonical = json.dumps(self.to_mapping(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canonical.encode("utf-8")).hexdigest()


def _parse_value(raw, name, kind, step=1):
    if raw in NOT_APPLICABLE:
        return None
    if isinstance(raw, bool):
        raise ConfigViolation(f"{name}: expected an integer or 'default [lower, upper]', got {raw!r}")
    if isinstance(raw, int):
        return HyperparamDef(name, raw, raw, kind, raw)
    if isinstance(raw, str):
        text = raw.strip()
        if text.isdigit():
            value = int(text)
            return HyperparamDef(name, value, value, kind, value)
        match = RANGE_PATTERN.match(text)
        if match:
            default, lower, upper = (int(g) for g in match.groups())
            return HyperparamDef(name, lower, upper, kind, default, step)
    raise ConfigViolation(f"{name}: expected an integer or 'default [lower, upper]', got {raw!r}")


def _parse_stride(raw, name) -> int:
    if raw in NOT_APPLICABLE:
        return 1
    stride = _parse_value(raw, name, HyperparamKind.STRIDE_FIXED)
    return stride.default


def parse_space(data: dict, round_channels: bool = False) -> SearchSpace:
    """Build a SearchSpace from a parsed schema mapping."""
    if not isinstance(data, dict) or "stages" not in data:
        raise ConfigViolation("space schema must be a mapping with a 'stages' list")
    name = str(data.get("name", "custom"))
    resolution = _parse_value(
        data.get("resolution", 224), "resolution", HyperparamKind.RESOLUTION,
        int(data.get("resolution_step", 1)),
    )
    channel_step = CHANNEL_ROUNDING if round_channels else int(data.get("channel_step", 1))

    stages = []
    for index, row in enumerate(data["stages"]):
        try:
            op_kind = OpKind(row["op"])
        except (KeyError, ValueError, TypeError):
            raise ConfigViolation(f"stage {index}: unknown or missing op {row.get('op') if isinstance(row, dict) else row!r}")
        unknown = set(row) - {"op", "t", "c", "n", "s", "kernel"}
        if unknown:
            raise ConfigViolation(f"stage {index}: unknown columns {sorted(unknown)}")
        hyperparams = []
        for column, kind in COLUMNS:
            step = channel_step if kind == HyperparamKind.CHANNELS else 1
            hp = _parse_value(row.get(column), f"stage{index}.{column}", kind, step)
            if hp is not None:
                hyperparams.append(hp)
        default_kernel = 3 if op_kind in (OpKind.INVERTED_BOTTLENECK, OpKind.RESIDUAL_BOTTLENECK) else 1
        stages.append(StageDef(
            op_kind=op_kind,
            hyperparams=tuple(hyperparams),
            stride=_parse_stride(row.get("s"), f"stage{index}.s"),
            kernel_size=int(row.get("kernel", default_kernel)),
        ))

    return SearchSpace(
        name=name,
        stages=tuple(stages),
        resolution=resolution,
        input_channels=int(data.get("input_channels", 3)),
    )


def load_space(name_or_path, round_channels: bool = False) -> SearchSpace:
    """Load a built-in space by name or a schema file by path."""
    if str(name_or_path) in BUILTIN_SPACES:
        path = SPACES_DIR / f"{name_or_path}.yaml"
    else:
        path = Path(name_or_path)
        if not path.is_file():
            raise ConfigViolation(
                f"unknown space '{name_or_path}' (built-in: {', '.join(BUILTIN_SPACES)})"
            )
    with open(path, encoding="utf-8") as fh:
        data = yaml.safe_load(fh)
    space = parse_space(data, round_channels=round_channels)
    logger.debug(f"Loaded space '{space.name}' from {path} ({space.dims} searchable values)")
    return space


def validate(space: SearchSpace, gene: Gene) -> bool:
    """True when the gene has one value per searchable hyperparameter, each on its grid."""
    if len(gene) != space.dims:
        return False
    return all(hp.contains(v) for v, (_, hp) in zip(gene.values, space.searchable))


def _block(stage: StageDef, h: int, w: int, ch: int, c: int, t: int, stride: int):
    """Operator for one block of a stage and its output channel count."""
    kind = stage.op_kind
    if kind == OpKind.CONV2D:
        return OperatorKey(kind, h, w, ch, c, stride, stage.kernel_size, 1), c
    if kind == OpKind.INVERTED_BOTTLENECK:
        return OperatorKey(kind, h, w, ch, c, stride, stage.kernel_size, t), c
    if kind == OpKind.RESIDUAL_BOTTLENECK:
        return OperatorKey(kind, h, w, ch, c * t, stride, stage.kernel_size, t), c * t
    if kind == OpKind.AVGPOOL:
        return OperatorKey(kind, h, w, ch, ch, 1, max(h, w), 1), ch
    # fc flattens whatever spatial extent reaches it
    return OperatorKey(kind, 1, 1, ch * h * w, c, 1, 1, 1), c


def decode(space: SearchSpace, gene: Gene) -> Architecture:
    """
    Expand a gene into its operators in execution order.

    Args:
        space: Space the gene belongs to
        gene: Gene to decode

    Returns:
        Architecture: Operators plus the stage index of each

    Raises:
        InvalidGene: The gene is not valid for the space
    """
    if not validate(space, gene):
        raise InvalidGene(f"gene {gene} is not valid for space '{space.name}'")
    resolution, per_stage = space.resolve(gene)
    h = w = resolution
    ch = space.input_channels
    operators, stage_index = [], []
    for index, (stage, settings) in enumerate(zip(space.stages, per_stage)):
        t = settings.get(HyperparamKind.EXPANSION_FACTOR, 1)
        n = settings.get(HyperparamKind.REPEATS, 1)
        c = settings.get(HyperparamKind.CHANNELS, ch)
        for repeat in range(n):
            # first repeat carries the stage stride
            stride = stage.stride if repeat == 0 else 1
            key, ch = _block(stage, h, w, ch, c, t, stride)
            h, w = key.output_hw
            operators.append(key)
            stage_index.append(index)
    return Architecture(resolution, tuple(operators), tuple(stage_index))


def operator_macs(key: OperatorKey) -> int:
    """Multiply-accumulate count of one operator."""
    h, w = key.input_h, key.input_w
    ho, wo = key.output_hw
    k2 = key.kernel_size ** 2
    cin, cout = key.in_channels, key.out_channels
    if key.op_kind == OpKind.CONV2D:
        return ho * wo * cin * cout * k2
    if key.op_kind == OpKind.INVERTED_BOTTLENECK:
        hidden = cin * key.expansion
        expand = h * w * cin * hidden if key.expansion != 1 else 0
        depthwise = ho * wo * hidden * k2
        project = ho * wo * hidden * cout
        return expand + depthwise + project
    if key.op_kind == OpKind.RESIDUAL_BOTTLENECK:
        width = cout // key.expansion
        reduce = h * w * cin * width
        spatial = ho * wo * width * width * k2
        expand = ho * wo * width * cout
        shortcut = ho * wo * cin * cout if (key.stride != 1 or cin != cout) else 0
        return reduce + spatial + expand + shortcut
    if key.op_kind == OpKind.AVGPOOL:
        return h * w * cin
    return cin * cout


def stage_flops(space: SearchSpace, gene: Gene) -> list[int]:
    """Multiply-accumulates of each stage, in stage order."""
    arch = decode(space, gene)
    totals = [0] * len(space.stages)
    for key, index in zip(arch.operators, arch.stage_index):
        totals[index] += operator_macs(key)
    return totals


def flops(space: SearchSpace, gene: Gene) -> int:
    """Multiply-accumulate count of the decoded network."""
    return sum(operator_macs(key) for key in decode(space, gene).operators)


def reachable_operators(space: SearchSpace) -> list[OperatorKey]:
    """
    Every distinct operator any gene of the space can decode to.

    Propagates the set of reachable (height, width, channels) stage inputs
    instead of enumerating genes; a stage's repeats never change its output
    shape, so only the largest repeat count matters.
    """
    keys = set()
    states = {(r, r, space.input_channels) for r in space.resolution.values()}
    for stage in space.stages:
        expansion = stage.param(HyperparamKind.EXPANSION_FACTOR)
        channels = stage.param(HyperparamKind.CHANNELS)
        repeats = stage.param(HyperparamKind.REPEATS)
        t_values = list(expansion.values()) if expansion else [1]
        max_repeats = repeats.upper if repeats else 1
        next_states = set()
        for h, w, ch in states:
            c_values = list(channels.values()) if channels else [ch]
            for t in t_values:
                for c in c_values:
                    first, out = _block(stage, h, w, ch, c, t, stage.stride)
                    keys.add(first)
                    oh, ow = first.output_hw
                    if max_repeats > 1:
                        keys.add(_block(stage, oh, ow, out, c, t, 1)[0])
                    next_states.add((oh, ow, out))
        states = next_states
    return sorted(keys)
