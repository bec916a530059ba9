"""
Evaluation oracles.

The synthetic oracles are desk-scale stand-ins for training runs and device
measurements: an accuracy landscape with diminishing returns in per-stage
FLOPs, and an operator-additive device model whose network latency is exactly
the sum of its operator latencies. Their numbers are synthetic and are never
ImageNet or hardware predictions.

Real measurements enter through ReplayOracle (an observation log) or
CommandOracle (an external program that trains or measures one gene).
"""
import dataclasses
import logging
import math
import shlex
import shutil
import subprocess
from dataclasses import dataclass
from enum import Enum
from typing import Iterator, Sequence

import numpy as np
from tqdm import tqdm

from arch_adapt.config import settings
from arch_adapt.src.errors import ConfigViolation, OracleFailure
from arch_adapt.src.resource import PowerTrace
from arch_adapt.src.sampler import read_observations
from arch_adapt.src.space import (
    Architecture,
    Gene,
    OperatorKey,
    OpKind,
    SearchSpace,
    decode,
    operator_macs,
    reachable_operators,
    stage_flops,
)

logger = logging.getLogger(__name__)


class SyntheticAccuracyOracle:
    """
    saturation * sigmoid(sum_s w_s * log(flops_s / ref_s) + resolution term)

    ``ref_s`` are the stage FLOPs of the mid-range gene, so that gene scores
    saturation / 2. The resolution term is scaled by the total stage weight,
    which makes an all-zero weight vector a flat landscape.
    """

    def __init__(self, space: SearchSpace, seed: int = 0, saturation: float = 0.9,
                 stage_weights: Sequence[float] | None = None, noise_sd: float = 0.0,
                 resolution_weight: float = 0.5, total_weight: float = 3.0):
        if not 0 < saturation <= 1:
            raise ConfigViolation("saturation must lie in (0, 1]")
        if noise_sd < 0:
            raise ConfigViolation("noise_sd must be non-negative")
        if stage_weights is None:
            stage_weights = [total_weight / len(space.stages)] * len(space.stages)
        if len(stage_weights) != len(space.stages):
            raise ConfigViolation(f"expected {len(space.stages)} stage weights, got {len(stage_weights)}")
        if any(w < 0 for w in stage_weights):
            raise ConfigViolation("stage weights must be non-negative")
        self.space = space
        self.seed = seed
        self.saturation = saturation
        self.stage_weights = np.array(stage_weights, dtype=float)
        self.noise_sd = noise_sd
        self.resolution_weight = resolution_weight
        reference = space.gene_from_unit([0.5] * space.dims)
        self.reference_flops = np.array(stage_flops(space, reference), dtype=float)
        self.reference_resolution = space.resolve(reference)[0]

    def evaluate(self, gene: Gene) -> float:
        return synth_accuracy(self, gene)


def synth_accuracy(oracle: SyntheticAccuracyOracle, gene: Gene) -> float:
    per_stage = np.array(stage_flops(oracle.space, gene), dtype=float)
    resolution = oracle.space.resolve(gene)[0]
    z = float(np.dot(oracle.stage_weights, np.log(per_stage / oracle.reference_flops)))
    z += oracle.resolution_weight * float(np.sum(oracle.stage_weights)) * math.log(
        resolution / oracle.reference_resolution
    )
    value = oracle.saturation / (1.0 + math.exp(-z))
    if oracle.noise_sd > 0:
        rng = np.random.default_rng([oracle.seed, *gene.values])
        value += rng.normal(0.0, oracle.noise_sd)
    return float(min(max(value, 0.0), 1.0))


class DeviceProfile(str, Enum):
    CPU_LIKE = "cpu_like"
    DSP_LIKE = "dsp_like"


# MACs per microsecond
CPU_RATES = {
    OpKind.CONV2D: 15000.0,
    OpKind.INVERTED_BOTTLENECK: 12000.0,
    OpKind.RESIDUAL_BOTTLENECK: 15000.0,
    OpKind.AVGPOOL: 2000.0,
    OpKind.FC: 8000.0,
}
DSP_RATES = {kind: rate * 4 for kind, rate in CPU_RATES.items()}


@dataclass(frozen=True)
class SyntheticDevice:
    """
    Operator-additive latency model.

    cpu_like: launch overhead + MACs / throughput, slowed down for inputs larger
    than ``spatial_reference`` pixels, + 1 us per output channel.
    dsp_like: the same with in/out channels rounded up to ``channel_quantum``
    and no spatial slowdown, giving a latency staircase over channel counts.
    """

    profile: DeviceProfile = DeviceProfile.CPU_LIKE
    base_rates: dict | None = None
    channel_quantum: int = 1
    overhead_us: int = 20
    spatial_reference: int = 28 * 28
    spatial_slowdown: float = 0.25

    def __post_init__(self):
        object.__setattr__(self, "profile", DeviceProfile(self.profile))
        if self.base_rates is None:
            rates = DSP_RATES if self.profile == DeviceProfile.DSP_LIKE else CPU_RATES
            object.__setattr__(self, "base_rates", dict(rates))
        if self.profile == DeviceProfile.DSP_LIKE and self.channel_quantum == 1:
            object.__setattr__(self, "channel_quantum", 32)
        if self.channel_quantum < 1 or self.overhead_us < 0:
            raise ConfigViolation("channel_quantum must be positive and overhead_us non-negative")
        if any(rate <= 0 for rate in self.base_rates.values()):
            raise ConfigViolation("device throughputs must be positive")

    @property
    def platform(self) -> str:
        return f"synthetic-{self.profile.value}"


def _quantize(channels: int, quantum: int) -> int:
    return quantum * math.ceil(channels / quantum)


def synth_op_latency(device: SyntheticDevice, key: OperatorKey) -> int:
    """Latency of one operator in whole microseconds (always >= 1)."""
    slowdown = 1.0
    if device.profile == DeviceProfile.DSP_LIKE:
        key = dataclasses.replace(
            key,
            in_channels=_quantize(key.in_channels, device.channel_quantum),
            out_channels=_quantize(key.out_channels, device.channel_quantum),
        )
    else:
        pixels = key.input_h * key.input_w
        if pixels > device.spatial_reference:
            slowdown += device.spatial_slowdown * math.log2(pixels / device.spatial_reference)
    compute = round(operator_macs(key) / device.base_rates[key.op_kind] * slowdown)
    return max(1, device.overhead_us + compute + key.out_channels)


def network_latency_us(device: SyntheticDevice, arch: Architecture) -> int:
    return sum(synth_op_latency(device, key) for key in arch.operators)


def network_latency(device: SyntheticDevice, arch: Architecture) -> float:
    """Whole-network latency in ms."""
    return network_latency_us(device, arch) / 1000.0


def generate_lut(device: SyntheticDevice, space: SearchSpace,
                 progress: bool | None = None) -> Iterator[tuple[OperatorKey, int]]:
    """One (key, latency_us) record per operator reachable from the space, in key order."""
    keys = reachable_operators(space)
    logger.info(f"Generating {len(keys)} operator records for {device.platform} on '{space.name}'")
    for key in tqdm(keys, desc="Benchmarking operators", unit="op",
                    disable=None if progress is None else not progress):
        yield key, synth_op_latency(device, key)


# watts drawn while an operator of each kind runs
OP_POWER_W = {
    OpKind.CONV2D: 2.0,
    OpKind.INVERTED_BOTTLENECK: 1.6,
    OpKind.RESIDUAL_BOTTLENECK: 2.2,
    OpKind.AVGPOOL: 0.8,
    OpKind.FC: 1.2,
}


class SyntheticEnergyOracle:
    """Per-inference energy in mJ: operator latency times operator power plus a per-MAC term."""

    def __init__(self, space: SearchSpace, device: SyntheticDevice | None = None, seed: int = 0,
                 noise_sd: float = 0.0, picojoules_per_mac: float = 50.0):
        if noise_sd < 0 or picojoules_per_mac < 0:
            raise ConfigViolation("noise_sd and picojoules_per_mac must be non-negative")
        self.space = space
        self.device = device or SyntheticDevice()
        self.seed = seed
        self.noise_sd = noise_sd
        self.picojoules_per_mac = picojoules_per_mac

    def energy_mj(self, arch: Architecture) -> float:
        total = 0.0
        for key in arch.operators:
            # us * W = uJ
            total += synth_op_latency(self.device, key) * OP_POWER_W[key.op_kind] * 1e-3
            total += operator_macs(key) * self.picojoules_per_mac * 1e-9
        return total

    def evaluate(self, gene: Gene) -> float:
        value = self.energy_mj(decode(self.space, gene))
        if self.noise_sd > 0:
            rng = np.random.default_rng([self.seed, *gene.values])
            value *= 1.0 + rng.normal(0.0, self.noise_sd)
        return max(value, 0.0)


def synth_power_trace(energy_mj: float, voltage: float = 4.2, sample_interval: float = 200e-6,
                      baseline_current: float = 0.35, run_count: int = 1000, run_seconds: float = 0.02,
                      idle_seconds: float = 0.1, noise_sd: float = 0.0, seed: int = 0) -> PowerTrace:
    """
    Power trace whose active window carries exactly ``energy_mj`` per run above
    the baseline, framed by idle windows sitting at the baseline current.
    """
    if energy_mj < 0 or run_count < 1 or run_seconds <= 0:
        raise ConfigViolation("energy must be non-negative, run_count positive and run_seconds positive")
    active = max(1, math.ceil(run_count * run_seconds / sample_interval))
    idle = int(round(idle_seconds / sample_interval))
    excess = energy_mj * 1e-3 * run_count / (voltage * active * sample_interval)
    rng = np.random.default_rng(seed)
    active_samples = baseline_current + excess + rng.normal(0.0, noise_sd, active)
    samples = np.concatenate([
        np.full(idle, baseline_current), active_samples, np.full(idle, baseline_current),
    ])
    return PowerTrace(voltage, sample_interval, samples, baseline_current, run_count)


class ReplayOracle:
    """Looks genes up in a recorded observation log; later records win."""

    def __init__(self, path, space: SearchSpace | None = None):
        self.logger = logging.getLogger(__name__)
        self.path = path
        self.values = {obs.gene: obs.value for obs in read_observations(path, space)}
        self.logger.info(f"Loaded {len(self.values)} recorded measurement(s) from {path}")

    def evaluate(self, gene: Gene) -> float:
        try:
            return self.values[gene]
        except KeyError:
            self.logger.error(f"Gene {gene} has no recorded measurement in {self.path}")
            raise OracleFailure(gene, f"no measurement recorded in {self.path}")


class CommandOracle:
    """
    Runs an external program once per gene.

    The gene is appended to the command as one comma-separated argument; the
    program prints the measured value as the last line of its stdout.
    """

    def __init__(self, command: str | Sequence[str], timeout: float | None = None):
        self.logger = logging.getLogger(__name__)
        self.argv = shlex.split(command) if isinstance(command, str) else list(command)
        if not self.argv:
            raise ConfigViolation("oracle command is empty")
        self.timeout = settings.COMMAND_TIMEOUT if timeout is None else timeout
        self.executable = shutil.which(self.argv[0])
        if not self.executable:
            raise ConfigViolation(f"oracle command '{self.argv[0]}' is not installed or not in PATH")

    def evaluate(self, gene: Gene) -> float:
        cmd = [self.executable, *self.argv[1:], str(gene)]
        self.logger.debug(f"Running oracle command: {' '.join(cmd)}")
        try:
            result = subprocess.run(cmd, capture_output=True, text=True, check=True, timeout=self.timeout)
        except subprocess.CalledProcessError as e:
            stderr = (e.stderr or "").strip().splitlines()
            detail = f": {stderr[-1]}" if stderr else ""
            error_msg = f"command exited with status {e.returncode}{detail}"
            self.logger.error(f"Oracle command failed for gene {gene}: {error_msg}")
            raise OracleFailure(gene, error_msg)
        except subprocess.TimeoutExpired:
            self.logger.error(f"Oracle command timed out after {self.timeout:g} s for gene {gene}")
            raise OracleFailure(gene, f"command timed out after {self.timeout:g} s")
        lines = result.stdout.strip().splitlines()
        try:
            value = float(lines[-1])
        except (IndexError, ValueError):
            self.logger.error(f"Oracle command printed no value for gene {gene}: {result.stdout[-200:]!r}")
            raise OracleFailure(gene, f"could not parse a number from command output {result.stdout[-200:]!r}")
        if not math.isfinite(value):
            self.logger.error(f"Oracle command returned {value} for gene {gene}")
            raise OracleFailure(gene, f"command returned non-finite value {value}")
        return value
