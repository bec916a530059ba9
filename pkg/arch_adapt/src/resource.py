"""
Resource predictors for the target platform.

Latency comes from an operator lookup table: a network's latency is the sum of
its operators' measured latencies, kept in integer microseconds so the sum is
exact, and reported in milliseconds. Energy comes from a GP built with
exploration-only sampling. Power traces recorded during repeated inference
runs are reduced to per-inference energy here as well.
"""
import bisect
import csv
import logging
import math
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from types import MappingProxyType
from typing import Iterable, Mapping, Sequence

import numpy as np

from arch_adapt.src import gp, sampler
from arch_adapt.src.errors import (
    ConfigViolation,
    DataError,
    EmptyTrace,
    MalformedRecord,
    MissingOperator,
)
from arch_adapt.src.space import Architecture, Gene, OperatorKey, SearchSpace, decode

logger = logging.getLogger(__name__)

LUT_FORMAT = "#lut v1"
LUT_COLUMNS = ("op_kind", "input_h", "input_w", "in_channels", "out_channels",
               "stride", "kernel_size", "expansion", "latency_us")
TRACE_FORMAT = "#trace v1"
TRACE_FIELDS = ("voltage", "interval", "baseline", "runs")


@dataclass(frozen=True)
class LatencyLUT:
    platform: str
    records: Mapping[OperatorKey, int] = field(default_factory=dict)

    def __post_init__(self):
        object.__setattr__(self, "records", MappingProxyType(dict(self.records)))

    @property
    def record_count(self) -> int:
        return len(self.records)

    def __contains__(self, key: OperatorKey) -> bool:
        return key in self.records

    def __getitem__(self, key: OperatorKey) -> int:
        return self.records[key]


def lut_build(records: Iterable[tuple[OperatorKey, float]], platform: str = "unknown") -> LatencyLUT:
    """
    Ingest (key, latency_us) records; duplicate keys are averaged.

    Raises:
        MalformedRecord: A record has a non-positive or non-finite latency
    """
    totals: dict[OperatorKey, list] = {}
    duplicates = 0
    for index, (key, latency) in enumerate(records, start=1):
        latency = float(latency)
        if not math.isfinite(latency) or latency <= 0:
            raise MalformedRecord(index, f"latency must be positive, got {latency}")
        entry = totals.get(key)
        if entry is None:
            totals[key] = [latency, 1]
        else:
            entry[0] += latency
            entry[1] += 1
            duplicates += 1
    stored = {}
    for key, (total, count) in totals.items():
        mean = max(1, int(round(total / count)))
        stored[key] = mean
    if duplicates:
        logger.info(f"Merged {duplicates} duplicate record(s) by mean")
    logger.info(f"Built LUT for platform '{platform}' with {len(stored)} record(s)")
    return LatencyLUT(platform, stored)


def _parse_key(row: Sequence[str]) -> OperatorKey:
    op_kind, *dims = row
    return OperatorKey(op_kind, *(int(d) for d in dims))


def _read_lut_platform(path: Path) -> str:
    with open(path, encoding="utf-8", newline="") as fh:
        header = fh.readline().rstrip("\r\n")
    prefix = f"{LUT_FORMAT} platform="
    platform = header[len(prefix):] if header.startswith(prefix) else ""
    if not platform.strip():
        raise MalformedRecord(1, f"expected header '{LUT_FORMAT} platform=<id>'", path)
    return platform


def iter_lut_records(path) -> tuple[str, Iterable[tuple[OperatorKey, float]]]:
    """
    Platform id and a lazy record stream for a LUT file.

    The header is checked right away; the file is reopened only when the
    records are consumed, so an unconsumed stream holds no handle.
    """
    path = Path(path)
    platform = _read_lut_platform(path)

    def records():
        with open(path, encoding="utf-8", newline="") as fh:
            fh.readline()
            reader = csv.reader(fh)
            for row in reader:
                lineno = reader.line_num + 1
                if not row:
                    continue
                if tuple(row) == LUT_COLUMNS:
                    continue
                if len(row) != len(LUT_COLUMNS):
                    raise MalformedRecord(lineno, f"expected {len(LUT_COLUMNS)} fields, got {len(row)}", path)
                try:
                    key = _parse_key(row[:-1])
                    latency = float(row[-1])
                except ValueError as e:
                    raise MalformedRecord(lineno, str(e), path)
                if not math.isfinite(latency) or latency <= 0:
                    raise MalformedRecord(lineno, f"latency must be positive, got {row[-1]}", path)
                yield key, latency

    return platform, records()


def read_lut(path) -> LatencyLUT:
    platform, records = iter_lut_records(path)
    return lut_build(records, platform)


def write_lut(lut: LatencyLUT, path) -> Path:
    """Records are written in sorted key order so equal LUTs give identical files."""
    path = Path(path)
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write(f"{LUT_FORMAT} platform={lut.platform}\n")
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(LUT_COLUMNS)
        for key in sorted(lut.records):
            writer.writerow((*key.fields(), lut.records[key]))
    return path


def _missing(lut: LatencyLUT, arch: Architecture) -> list[OperatorKey]:
    return list(dict.fromkeys(key for key in arch.operators if key not in lut.records))


def predict_latency_us(lut: LatencyLUT, arch: Architecture) -> int:
    missing = _missing(lut, arch)
    if missing:
        raise MissingOperator(missing)
    return sum(lut.records[key] for key in arch.operators)


def predict_latency(lut: LatencyLUT, arch: Architecture) -> float:
    """Network latency in ms as the sum of operator latencies."""
    return predict_latency_us(lut, arch) / 1000.0


class LatencyModel:
    """
    LUT bound to a search space.

    With ``interpolate=True`` a missing operator is estimated bilinearly from
    the records that share every field except (in_channels, out_channels) and
    bracket the missing channel pair; operators outside the measured grid
    still raise MissingOperator.
    """

    def __init__(self, lut: LatencyLUT, space: SearchSpace, interpolate: bool = False):
        self.lut = lut
        self.space = space
        self.interpolate = interpolate
        self._grid = self._index(lut) if interpolate else None

    @staticmethod
    def _index(lut: LatencyLUT):
        grid = defaultdict(dict)
        for key, latency in lut.records.items():
            group = (key.op_kind, key.input_h, key.input_w, key.stride, key.kernel_size, key.expansion)
            grid[group][(key.in_channels, key.out_channels)] = latency
        axes = {}
        for group, cells in grid.items():
            axes[group] = (sorted({c for c, _ in cells}), sorted({c for _, c in cells}))
        return MappingProxyType(dict(grid)), MappingProxyType(axes)

    def _interpolated_us(self, key: OperatorKey) -> float | None:
        grid, axes = self._grid
        group = (key.op_kind, key.input_h, key.input_w, key.stride, key.kernel_size, key.expansion)
        cells = grid.get(group)
        if cells is None:
            return None

        def bracket(values, x):
            i = bisect.bisect_left(values, x)
            if i < len(values) and values[i] == x:
                return x, x
            if i == 0 or i == len(values):
                return None
            return values[i - 1], values[i]

        cin_axis, cout_axis = axes[group]
        cin = bracket(cin_axis, key.in_channels)
        cout = bracket(cout_axis, key.out_channels)
        if cin is None or cout is None:
            return None
        corners = {}
        for a in set(cin):
            for b in set(cout):
                if (a, b) not in cells:
                    return None
                corners[(a, b)] = cells[(a, b)]

        def lerp(lo, hi, x, f_lo, f_hi):
            return f_lo if hi == lo else f_lo + (f_hi - f_lo) * (x - lo) / (hi - lo)

        (a0, a1), (b0, b1) = cin, cout
        low = lerp(a0, a1, key.in_channels, corners[(a0, b0)], corners[(a1, b0)])
        high = lerp(a0, a1, key.in_channels, corners[(a0, b1)], corners[(a1, b1)])
        return lerp(b0, b1, key.out_channels, low, high)

    def operator_us(self, arch: Architecture) -> list[int]:
        latencies, missing = [], []
        for key in arch.operators:
            latency = self.lut.records.get(key)
            if latency is None and self.interpolate:
                estimate = self._interpolated_us(key)
                latency = None if estimate is None else max(1, int(round(estimate)))
            if latency is None:
                missing.append(key)
            latencies.append(latency)
        if missing:
            raise MissingOperator(dict.fromkeys(missing))
        return latencies

    def predict_us(self, gene: Gene) -> int:
        return sum(self.operator_us(decode(self.space, gene)))

    def stage_us(self, gene: Gene) -> list[int]:
        """Latency of each stage in microseconds, in stage order."""
        arch = decode(self.space, gene)
        totals = [0] * len(self.space.stages)
        for latency, index in zip(self.operator_us(arch), arch.stage_index):
            totals[index] += latency
        return totals

    def predict(self, gene: Gene) -> float:
        return self.predict_us(gene) / 1000.0

    def predict_many(self, genes: Sequence[Gene]) -> np.ndarray:
        return np.array([self.predict(g) for g in genes], dtype=float)


class EnergyModel:
    """GP energy predictor in mJ; reported means never go below zero."""

    def __init__(self, space: SearchSpace, model: gp.GPModel, platform: str = "unknown"):
        self.space = space
        self.model = model
        self.platform = platform

    def predict(self, gene: Gene) -> gp.Prediction:
        raw = gp.predict(self.model, self.space.normalize([gene])[0])
        return gp.Prediction(max(raw.mean, 0.0), raw.variance)

    def predict_many(self, genes: Sequence[Gene]) -> np.ndarray:
        if not genes:
            return np.empty(0)
        means = gp.predict_many(self.model, self.space.normalize(genes))[0]
        return np.clip(means, 0.0, None)

    def save(self, path, **metadata):
        return gp.save_model(self.model, path, {
            "kind": "energy", "platform": self.platform,
            "space": self.space.name, "space_digest": self.space.digest, **metadata,
        })

    @classmethod
    def load(cls, path, space: SearchSpace):
        model, metadata = gp.load_model(path)
        sampler.check_metadata(path, metadata, space, "energy")
        return cls(space, model, metadata.get("platform", "unknown"))


def build_energy_predictor(space: SearchSpace, oracle: sampler.EvalOracle, cfg: sampler.SamplerConfig,
                           platform: str = "unknown", **kwargs) -> tuple[EnergyModel, list]:
    """
    Energy GP built with exploration samples only.

    Exploitation ranks by predicted value per FLOP, which has no meaning for
    an energy target, so the config must set exploit_count to 0.
    """
    if cfg.exploit_count != 0:
        raise ConfigViolation(f"energy predictors use exploration only; exploit_count is {cfg.exploit_count}")
    model, observations = sampler.build_predictor(space, oracle, cfg, **kwargs)
    return EnergyModel(space, model, platform), observations


@dataclass(frozen=True)
class PowerTrace:
    voltage: float
    sample_interval: float
    samples: np.ndarray
    baseline_current: float = 0.0
    run_count: int = 1

    def __post_init__(self):
        samples = np.array(self.samples, dtype=float).ravel()
        if samples.size == 0:
            raise EmptyTrace("power trace has no samples")
        if self.sample_interval <= 0:
            raise DataError(f"sample interval must be positive, got {self.sample_interval}")
        if self.run_count < 1:
            raise DataError(f"run count must be at least 1, got {self.run_count}")
        samples.flags.writeable = False
        object.__setattr__(self, "samples", samples)


def trace_to_energy(trace: PowerTrace) -> float:
    """Per-inference energy in mJ, with current below baseline counted as zero."""
    excess = np.clip(trace.samples - trace.baseline_current, 0.0, None)
    joules = trace.voltage * float(np.sum(excess)) * trace.sample_interval / trace.run_count
    return joules * 1e3


def read_trace(path) -> PowerTrace:
    """
    Parse a power-trace file: a header line

        #trace v1 voltage=4.2 interval=0.0002 baseline=0.35 runs=1000

    followed by one current sample (amperes) per line.
    """
    path = Path(path)
    with open(path, encoding="utf-8") as fh:
        header = fh.readline().strip()
        if not header.startswith(TRACE_FORMAT):
            raise MalformedRecord(1, f"expected header starting with '{TRACE_FORMAT}'", path)
        values = {}
        for item in header[len(TRACE_FORMAT):].split():
            name, _, raw = item.partition("=")
            values[name] = raw
        missing = [f for f in TRACE_FIELDS if f not in values]
        if missing:
            raise MalformedRecord(1, f"header is missing {', '.join(missing)}", path)
        try:
            voltage = float(values["voltage"])
            interval = float(values["interval"])
            baseline = float(values["baseline"])
            runs = int(values["runs"])
        except ValueError as e:
            raise MalformedRecord(1, str(e), path)

        samples = []
        for lineno, line in enumerate(fh, start=2):
            line = line.strip()
            if not line:
                continue
            try:
                samples.append(float(line))
            except ValueError:
                raise MalformedRecord(lineno, f"not a current sample: {line!r}", path)
    if not samples:
        raise EmptyTrace(f"{path} has no samples")
    return PowerTrace(voltage, interval, samples, baseline, runs)


def write_trace(trace: PowerTrace, path) -> Path:
    path = Path(path)
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(
            f"{TRACE_FORMAT} voltage={trace.voltage!r} interval={trace.sample_interval!r} "
            f"baseline={trace.baseline_current!r} runs={trace.run_count}\n"
        )
        for sample in trace.samples:
            fh.write(f"{float(sample)!r}\n")
    return path
