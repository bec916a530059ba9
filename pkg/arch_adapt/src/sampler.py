"""
Predictor construction by iterative sample selection.

A quasi-Monte-Carlo pool of architectures is drawn from the space, a random
subset is evaluated, and the GP is refit after each round of new evaluations.
Each round adds the pool members with the largest predictive uncertainty
(exploration) and the largest predicted-value-to-FLOPs ratio (exploitation),
until the leave-one-out MSE drops below the threshold or the evaluation
budget is spent.
"""
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from datetime import datetime
from enum import Enum
from pathlib import Path
from typing import Callable, Protocol, Sequence

import numpy as np
from scipy.stats import qmc
from tqdm import tqdm

from arch_adapt.config import settings
from arch_adapt.src import gp
from arch_adapt.src.errors import (
    ConfigViolation,
    InsufficientCandidates,
    MalformedRecord,
    OracleFailure,
    PoolExhausted,
    SpaceMismatch,
)
from arch_adapt.src.space import Gene, SearchSpace, flops, validate

logger = logging.getLogger(__name__)

LOG_HEADER = "# arch-adapt observations v1"
LOG_COLUMNS = "source\tvalue\ttimestamp\tgene"
# extra Sobol draws allowed per requested gene before giving up on rounding collisions
MAX_DRAW_FACTOR = 64


class Source(str, Enum):
    INITIAL = "initial"
    EXPLORE = "explore"
    EXPLOIT = "exploit"


@dataclass(frozen=True)
class SamplerConfig:
    pool_size: int = 2048
    explore_count: int = 8
    exploit_count: int = 8
    mse_threshold: float = 1e-4
    max_total_samples: int = 240
    initial_random: int = 48
    seed: int = 0
    gamma: float | None = None
    noise_var: float | None = None
    center: bool = False

    def __post_init__(self):
        self.validate()

    def validate(self):
        if self.explore_count < 0 or self.exploit_count < 0:
            raise ConfigViolation("explore_count and exploit_count must be non-negative")
        if self.explore_count + self.exploit_count < 1:
            raise ConfigViolation("explore_count + exploit_count must be at least 1")
        if self.mse_threshold <= 0:
            raise ConfigViolation("mse_threshold must be positive")
        if self.initial_random < 1 or self.max_total_samples < 1:
            raise ConfigViolation("initial_random and max_total_samples must be positive")
        if self.pool_size < self.initial_random + self.explore_count + self.exploit_count:
            raise ConfigViolation(
                f"pool_size {self.pool_size} is smaller than initial_random + explore_count + exploit_count"
            )
        if (self.gamma is None) != (self.noise_var is None):
            raise ConfigViolation("gamma and noise_var must be given together or both left to tuning")
        if self.gamma is not None and (self.gamma <= 0 or self.noise_var < 0):
            raise ConfigViolation("gamma must be positive and noise_var non-negative")

    @classmethod
    def from_mapping(cls, data: dict | None) -> "SamplerConfig":
        data = dict(data or {})
        unknown = set(data) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigViolation(f"unknown sampler settings: {sorted(unknown)}")
        return cls(**data)


@dataclass(frozen=True)
class Observation:
    gene: Gene
    value: float
    source: Source
    timestamp: str = "-"

    def __post_init__(self):
        object.__setattr__(self, "source", Source(self.source))
        if not math.isfinite(self.value):
            raise ValueError(f"observation value for {self.gene} is not finite: {self.value}")


class EvalOracle(Protocol):
    def evaluate(self, gene: Gene) -> float:
        ...


class MemoizedOracle:
    """
    Caches oracle results so no gene is evaluated twice within a run.
    Batches run on a thread pool; results keep batch order regardless of
    completion order.
    """

    def __init__(self, oracle: EvalOracle, known: dict | None = None, threads: int = 1):
        self.logger = logging.getLogger(__name__)
        self.oracle = oracle
        self.cache = dict(known or {})
        self.threads = max(1, threads)
        self.evaluations = 0

    def _call(self, gene: Gene) -> float:
        try:
            value = float(self.oracle.evaluate(gene))
        except OracleFailure:
            raise
        except Exception as e:
            self.logger.error(f"Oracle raised {type(e).__name__} for gene {gene}: {e}")
            raise OracleFailure(gene, str(e)) from e
        if not math.isfinite(value):
            self.logger.error(f"Oracle returned {value} for gene {gene}")
            raise OracleFailure(gene, f"non-finite value {value}")
        return value

    def evaluate_many(self, genes: Sequence[Gene]) -> list[tuple[float, bool]]:
        """(value, newly_evaluated) per gene."""
        pending = [g for g in dict.fromkeys(genes) if g not in self.cache]
        if pending:
            if self.threads > 1 and len(pending) > 1:
                with ThreadPoolExecutor(max_workers=self.threads) as pool:
                    values = list(pool.map(self._call, pending))
            else:
                values = [self._call(g) for g in pending]
            self.cache.update(zip(pending, values))
            self.evaluations += len(pending)
        fresh = set(pending)
        return [(self.cache[g], g in fresh) for g in genes]


class ObservationLog:
    """Append-only tab-separated record of evaluations."""

    def __init__(self, path, space: SearchSpace, record_timestamps: bool | None = None):
        self.path = Path(path)
        self.space = space
        self.record_timestamps = settings.RECORD_TIMESTAMPS if record_timestamps is None else record_timestamps
        if not self.path.exists() or self.path.stat().st_size == 0:
            with open(self.path, "w", encoding="utf-8") as fh:
                fh.write(f"{LOG_HEADER}\n# space: {space.name} {space.digest}\n{LOG_COLUMNS}\n")

    def timestamp(self) -> str:
        if not self.record_timestamps:
            return "-"
        return datetime.now(settings.TIMEZONE).isoformat()

    def append(self, observations: Sequence[Observation]):
        with open(self.path, "a", encoding="utf-8") as fh:
            for obs in observations:
                fh.write(f"{obs.source.value}\t{obs.value!r}\t{obs.timestamp}\t{obs.gene}\n")


def read_observations(path, space: SearchSpace | None = None) -> list[Observation]:
    """Parse an observation log; MalformedRecord names the offending line."""
    path = Path(path)
    observations = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.rstrip("\n")
            if lineno == 1:
                if line != LOG_HEADER:
                    raise MalformedRecord(lineno, f"expected header {LOG_HEADER!r}", path)
                continue
            if line.startswith("# space:"):
                parts = line.split()
                if space is not None and len(parts) >= 4 and parts[3] != space.digest:
                    raise SpaceMismatch(f"{path} was recorded for space '{parts[2]}' with a different schema")
                continue
            if not line.strip() or line.startswith("#") or line == LOG_COLUMNS:
                continue
            fields = line.split("\t")
            if len(fields) != 4:
                raise MalformedRecord(lineno, f"expected 4 tab-separated fields, got {len(fields)}", path)
            try:
                gene = Gene.parse(fields[3])
                obs = Observation(gene, float(fields[1]), Source(fields[0]), fields[2])
            except ValueError as e:
                raise MalformedRecord(lineno, str(e), path)
            if space is not None and not validate(space, gene):
                raise MalformedRecord(lineno, f"gene {gene} is not valid for space '{space.name}'", path)
            observations.append(obs)
    return observations


def qmc_pool(space: SearchSpace, k: int, seed: int) -> list[Gene]:
    """k distinct genes from a scrambled Sobol sequence mapped onto the gene grid."""
    if k < 1:
        raise ValueError("pool size must be at least 1")
    if space.size < k:
        raise PoolExhausted(f"space '{space.name}' has only {space.size} distinct genes, {k} requested")
    if space.dims == 0:
        return [Gene(())]

    sampler = qmc.Sobol(d=space.dims, scramble=True, seed=seed)
    genes: dict[Gene, None] = {}
    batch = 2 ** max(0, math.ceil(math.log2(k)))
    while len(genes) < k:
        if sampler.num_generated >= MAX_DRAW_FACTOR * k + batch:
            raise PoolExhausted(
                f"could not draw {k} distinct genes from space '{space.name}' "
                f"after {sampler.num_generated} sequence points"
            )
        # keep the running total a power of two to preserve Sobol balance
        points = sampler.random(batch if sampler.num_generated == 0 else sampler.num_generated)
        for point in points:
            gene = space.gene_from_unit(point)
            if gene not in genes:
                genes[gene] = None
                if len(genes) == k:
                    break
    return list(genes)


def select_samples(model: gp.GPModel, candidates: Sequence[Gene], p: int, q: int,
                   flops_fn: Callable[[Gene], float], space: SearchSpace) -> tuple[list[Gene], list[Gene]]:
    """
    Exploration: top-p predictive standard deviation.
    Exploitation: top-q predicted value / FLOPs among the rest.
    Ties resolve toward the earlier candidate.
    """
    if not candidates:
        raise InsufficientCandidates("no candidates to select from")
    if p + q > len(candidates):
        raise InsufficientCandidates(f"{p + q} samples requested from {len(candidates)} candidates")
    means, variances = gp.predict_many(model, space.normalize(candidates))
    order = np.arange(len(candidates))
    stds = np.sqrt(variances)
    explore_idx = [int(i) for i in np.lexsort((order, -stds))[:p]]
    chosen = set(explore_idx)
    ratios = means / np.array([float(flops_fn(g)) for g in candidates])
    exploit_idx = [int(i) for i in np.lexsort((order, -ratios)) if int(i) not in chosen][:q]
    return [candidates[i] for i in explore_idx], [candidates[i] for i in exploit_idx]


def _fit(space: SearchSpace, observations: Sequence[Observation], cfg: SamplerConfig):
    X = space.normalize([o.gene for o in observations])
    y = [o.value for o in observations]
    if cfg.gamma is not None:
        gamma, noise_var = cfg.gamma, cfg.noise_var
    elif len(observations) >= 4:
        gamma, noise_var = gp.tune_hyperparams(X, y, cfg.center)
    else:
        gamma, noise_var = 1.0, gp.NOISE_GRID[0]
    model = gp.fit(X, y, gamma, noise_var, cfg.center)
    mse = gp.loo_mse(X, y, gamma, noise_var, cfg.center) if len(observations) >= 2 else math.inf
    return model, mse


def build_predictor(space: SearchSpace, oracle: EvalOracle, cfg: SamplerConfig, *,
                    log: ObservationLog | None = None,
                    prior: Sequence[Observation] = (),
                    threads: int = 1,
                    progress: bool | None = None) -> tuple[gp.GPModel, list[Observation]]:
    """
    Build a GP predictor with iterative exploration/exploitation sampling.

    Args:
        space: Search space the pool is drawn from
        oracle: Evaluation oracle (training run, measurement, simulator)
        cfg: Sampler settings
        log: Observation log that receives every new evaluation
        prior: Observations from an earlier run; their genes are never re-evaluated
        threads: Concurrent oracle evaluations per round
        progress: Show a progress bar (None = only on a terminal)

    Returns:
        tuple: Final GP model and the full observation list in evaluation order
    """
    cfg.validate()
    memo = MemoizedOracle(oracle, {o.gene: o.value for o in prior}, threads)
    pool = qmc_pool(space, cfg.pool_size, cfg.seed)
    rng = np.random.default_rng(cfg.seed)
    flops_cache: dict[Gene, int] = {}

    def gene_flops(gene: Gene) -> int:
        if gene not in flops_cache:
            flops_cache[gene] = flops(space, gene)
        return flops_cache[gene]

    observations: list[Observation] = []
    evaluated: set[Gene] = set()

    def run(genes: Sequence[Gene], source: Source):
        results = memo.evaluate_many(genes)
        batch = [Observation(g, v, source, log.timestamp() if log else "-") for g, (v, _) in zip(genes, results)]
        observations.extend(batch)
        evaluated.update(genes)
        if log is not None:
            log.append([obs for obs, (_, fresh) in zip(batch, results) if fresh])
        bar.update(len(batch))

    initial = min(cfg.initial_random, cfg.max_total_samples)
    bar = tqdm(total=cfg.max_total_samples, desc=f"Sampling {space.name}", unit="eval",
               disable=None if progress is None else not progress)
    try:
        run([pool[i] for i in rng.choice(len(pool), size=initial, replace=False)], Source.INITIAL)
        iteration = 0
        while True:
            model, mse = _fit(space, observations, cfg)
            logger.info(
                f"Iteration {iteration}: {len(observations)} observations, "
                f"gamma={model.gamma:g}, noise_var={model.noise_var:g}, LOO MSE {mse:.3e}"
            )
            if mse < cfg.mse_threshold:
                logger.info(f"LOO MSE below threshold {cfg.mse_threshold:g}; stopping")
                break
            remaining = cfg.max_total_samples - len(observations)
            candidates = [g for g in pool if g not in evaluated]
            if remaining <= 0 or not candidates:
                break
            n_explore = min(cfg.explore_count, remaining, len(candidates))
            n_exploit = min(cfg.exploit_count, remaining - n_explore, len(candidates) - n_explore)
            explore, exploit = select_samples(model, candidates, n_explore, n_exploit, gene_flops, space)
            run(explore, Source.EXPLORE)
            run(exploit, Source.EXPLOIT)
            iteration += 1
    finally:
        bar.close()

    logger.info(f"Predictor built from {len(observations)} observations ({memo.evaluations} new evaluations)")
    return model, observations


class AccuracyPredictor:
    """GP model bound to the space whose genes it was trained on."""

    def __init__(self, space: SearchSpace, model: gp.GPModel):
        self.space = space
        self.model = model

    def predict(self, gene: Gene) -> gp.Prediction:
        return gp.predict(self.model, self.space.normalize([gene])[0])

    def predict_many(self, genes: Sequence[Gene]) -> np.ndarray:
        if not genes:
            return np.empty(0)
        return gp.predict_many(self.model, self.space.normalize(genes))[0]

    def save(self, path, kind: str = "accuracy", **metadata):
        return gp.save_model(self.model, path, {
            "kind": kind, "space": self.space.name, "space_digest": self.space.digest, **metadata,
        })

    @classmethod
    def load(cls, path, space: SearchSpace, kind: str = "accuracy"):
        model, metadata = gp.load_model(path)
        check_metadata(path, metadata, space, kind)
        return cls(space, model)


def check_metadata(path, metadata: dict, space: SearchSpace, kind: str):
    if metadata.get("kind", kind) != kind:
        raise SpaceMismatch(f"{path} holds a {metadata.get('kind')} model, expected {kind}")
    if metadata.get("space_digest") not in (None, space.digest):
        raise SpaceMismatch(
            f"{path} was built for space '{metadata.get('space')}' with a different schema than '{space.name}'"
        )
