"""
Efficient evolutionary search.

An adaptive genetic algorithm over genes: every generation keeps its top
``survivors`` as elites and fills the rest of the population with children of
tournament-selected survivor pairs. Crossover and mutation probabilities adapt
per pair: pairs at or above the generation's average fitness get probabilities
scaled down toward the lower bound, weaker pairs use the upper bound.
"""
import logging
import warnings
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from tqdm import tqdm

from arch_adapt.src.errors import ConfigViolation, InvalidGene, SpaceMismatch, InfeasibleSpaceWarning
from arch_adapt.src.fitness import AccuracyModel, FitnessParams, FitnessResult, ResourceModel, evaluate_many
from arch_adapt.src.sampler import qmc_pool
from arch_adapt.src.space import Gene, SearchSpace, validate

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class EESConfig:
    population: int = 96
    survivors: int = 12
    iterations: int = 100
    crossover_prob_bounds: tuple[float, float] = (0.5, 0.9)
    mutation_prob_bounds: tuple[float, float] = (0.01, 0.1)
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "crossover_prob_bounds", tuple(float(p) for p in self.crossover_prob_bounds))
        object.__setattr__(self, "mutation_prob_bounds", tuple(float(p) for p in self.mutation_prob_bounds))
        self.validate()

    def validate(self):
        if self.population < 1:
            raise ConfigViolation("population must be positive")
        if not 1 <= self.survivors <= self.population:
            raise ConfigViolation(f"survivors must lie in [1, population], got {self.survivors}")
        if self.iterations < 1:
            raise ConfigViolation("iterations must be positive")
        for name in ("crossover_prob_bounds", "mutation_prob_bounds"):
            bounds = getattr(self, name)
            if len(bounds) != 2 or not 0.0 <= bounds[0] <= bounds[1] <= 1.0:
                raise ConfigViolation(f"{name} must be (low, high) with 0 <= low <= high <= 1, got {bounds}")

    @classmethod
    def from_mapping(cls, data: dict | None) -> "EESConfig":
        data = dict(data or {})
        unknown = set(data) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigViolation(f"unknown search settings: {sorted(unknown)}")
        return cls(**data)


@dataclass(frozen=True)
class GenerationStats:
    generation: int
    best_fitness: float
    mean_fitness: float
    best_accuracy: float
    best_resource: float
    feasible_fraction: float


@dataclass(frozen=True)
class SearchResult:
    best_gene: Gene
    best_fitness: FitnessResult
    history: tuple[GenerationStats, ...] = field(default_factory=tuple)
    evaluations: int = 0


def mutate(space: SearchSpace, gene: Gene, prob: float, rng: np.random.Generator) -> Gene:
    """
    Resample each coordinate with probability ``prob`` uniformly over its grid.

    Args:
        space: Space whose grids the new values are drawn from
        gene: Parent gene
        prob: Per-coordinate mutation probability
        rng: Random generator owned by the caller

    Returns:
        Gene: Mutated copy; always valid for the space
    """
    if len(gene) != space.dims:
        raise SpaceMismatch(f"gene has {len(gene)} values, space '{space.name}' has {space.dims}")
    flips = rng.random(len(gene)) < prob
    values = list(gene.values)
    for i in np.flatnonzero(flips):
        hp = space.searchable[i][1]
        values[i] = hp.level_value(int(rng.integers(hp.levels)))
    return Gene(tuple(values))


def crossover(a: Gene, b: Gene, rng: np.random.Generator) -> tuple[Gene, Gene]:
    """Uniform crossover: every position swaps between the parents with probability 0.5."""
    if len(a) != len(b):
        raise SpaceMismatch(f"cannot cross genes of lengths {len(a)} and {len(b)}")
    swap = rng.random(len(a)) < 0.5
    first = tuple(y if s else x for x, y, s in zip(a, b, swap))
    second = tuple(x if s else y for x, y, s in zip(a, b, swap))
    return Gene(first), Gene(second)


def adaptive_probability(value: float, f_max: float, f_avg: float, bounds: tuple[float, float]) -> float:
    low, high = bounds
    if value < f_avg or f_max <= f_avg:
        return high
    return low + (high - low) * (f_max - value) / (f_max - f_avg)


def _tournament(ranked: Sequence[int], fitness: np.ndarray, rng: np.random.Generator) -> int:
    i, j = rng.integers(len(ranked), size=2)
    a, b = ranked[i], ranked[j]
    return a if fitness[a] >= fitness[b] else b


def search(space: SearchSpace, acc_model: AccuracyModel, res_predictor: ResourceModel,
           params: FitnessParams, cfg: EESConfig, *,
           seed_genes: Sequence[Gene] = (),
           threads: int = 1,
           progress: bool | None = None) -> SearchResult:
    """
    Maximize fitness over the space.

    Args:
        space: Search space
        acc_model: Accuracy predictor (predict_many over genes)
        res_predictor: Latency or energy predictor (predict_many over genes)
        params: Fitness parameters
        cfg: GA settings
        seed_genes: Genes placed at the front of the initial population
        threads: Concurrent fitness evaluations within a generation
        progress: Show a progress bar (None = only on a terminal)

    Returns:
        SearchResult: Best gene, its fitness, per-generation history and the
        number of distinct genes evaluated. A feasible gene is preferred over
        any infeasible one when both were seen.
    """
    cfg.validate()
    rng = np.random.default_rng(cfg.seed)
    for gene in seed_genes:
        if not validate(space, gene):
            raise InvalidGene(f"seed gene {gene} is not valid for space '{space.name}'")
    initial = list(dict.fromkeys(seed_genes))
    pool_size = min(cfg.population, space.size)
    seeded = set(initial)
    initial += [g for g in qmc_pool(space, pool_size, cfg.seed) if g not in seeded]
    population = initial[:cfg.population]

    cache: dict[Gene, FitnessResult] = {}

    def assess(genes: Sequence[Gene]) -> np.ndarray:
        pending = list(dict.fromkeys(g for g in genes if g not in cache))
        if pending:
            cache.update(zip(pending, evaluate_many(pending, acc_model, res_predictor, params, threads)))
        return np.array([cache[g].fitness for g in genes])

    history = []
    for generation in tqdm(range(cfg.iterations), desc="Evolving", unit="gen",
                           disable=None if progress is None else not progress):
        fitness = assess(population)
        ranked = sorted(range(len(population)), key=lambda i: (-fitness[i], i))
        top = cache[population[ranked[0]]]
        history.append(GenerationStats(
            generation=generation,
            best_fitness=top.fitness,
            mean_fitness=float(np.mean(fitness)),
            best_accuracy=top.accuracy,
            best_resource=top.resource,
            feasible_fraction=sum(cache[g].feasible for g in population) / len(population),
        ))
        logger.debug(
            f"Generation {generation}: best {top.fitness:.6f} (acc {top.accuracy:.4f}, "
            f"resource {top.resource:.3f}), mean {history[-1].mean_fitness:.4f}"
        )
        if generation == cfg.iterations - 1:
            break

        survivors = ranked[:cfg.survivors]
        # adaptation assumes non-negative fitness
        shifted = fitness - fitness.min()
        f_max, f_avg = float(shifted.max()), float(shifted.mean())

        children = [population[i] for i in survivors]
        while len(children) < cfg.population:
            a = _tournament(survivors, shifted, rng)
            b = _tournament(survivors, shifted, rng)
            better = max(shifted[a], shifted[b])
            pc = adaptive_probability(better, f_max, f_avg, cfg.crossover_prob_bounds)
            pm = adaptive_probability(better, f_max, f_avg, cfg.mutation_prob_bounds)
            if rng.random() < pc:
                first, second = crossover(population[a], population[b], rng)
            else:
                first, second = population[a], population[b]
            children.append(mutate(space, first, pm, rng))
            if len(children) < cfg.population:
                children.append(mutate(space, second, pm, rng))
        population = children

    best_gene = max(cache, key=lambda g: (cache[g].feasible, cache[g].fitness))
    best = cache[best_gene]
    if not best.feasible:
        logger.warning(
            f"No evaluated architecture meets the {params.resource_kind.value} budget "
            f"{params.thres:g} {params.resource_kind.unit}; returning the least-penalized one"
        )
        warnings.warn(
            f"no feasible architecture found under {params.thres:g} {params.resource_kind.unit}",
            InfeasibleSpaceWarning,
        )
    logger.info(
        f"Search finished: best fitness {best.fitness:.6f}, accuracy {best.accuracy:.4f}, "
        f"{params.resource_kind.value} {best.resource:.3f} {params.resource_kind.unit} "
        f"({len(cache)} distinct genes evaluated)"
    )
    return SearchResult(best_gene, best, tuple(history), len(cache))
