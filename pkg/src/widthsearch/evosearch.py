"""NSGA-II style width search under a hard FLOPs budget."""

from __future__ import annotations

import csv
import hashlib
import io
import math
from dataclasses import dataclass, field, replace
from typing import Callable, Sequence

import numpy as np

from .rng import derive_rng
from .widthspace import FlopsTable, NetworkWidth, WidthSpace, WidthSpaceError, repair_groups

Genome = tuple[int, ...]
Evaluator = Callable[[Genome], float]


@dataclass
class Individual:
    genome: Genome
    flops: float
    violation: float
    accuracy: float | None = None

    @property
    def feasible(self) -> bool:
        return self.violation <= 0.0

    @classmethod
    def from_genome(cls, genome: Sequence[int], table: FlopsTable, budget: float) -> Individual:
        genome = tuple(int(g) for g in genome)
        flops = table.flops_of_groups(genome)
        return cls(genome, flops, max(0.0, flops - budget))


@dataclass
class Population:
    individuals: list[Individual]
    generation: int = 0

    def __len__(self) -> int:
        return len(self.individuals)

    def __iter__(self):
        return iter(self.individuals)

    def __getitem__(self, i: int) -> Individual:
        return self.individuals[i]


@dataclass(frozen=True)
class EvoConfig:
    population_size: int = 40
    generations: int = 50
    parents_kept: int = 10
    crossover_prob: float = 0.9
    eta: float = 20.0
    mutation_prob: float | None = None  # None means 1 / L
    tournament_size: int = 2
    seed: int = 0

    def __post_init__(self) -> None:
        if self.population_size < 1 or self.generations < 1:
            raise ValueError("population_size and generations must be positive")
        if not 1 <= self.parents_kept <= self.population_size:
            raise ValueError("parents_kept must lie in [1, population_size]")
        if not 0 < self.crossover_prob <= 1:
            raise ValueError("crossover_prob must lie in (0, 1]")
        if self.mutation_prob is not None and not 0 < self.mutation_prob <= 1:
            raise ValueError("mutation_prob must lie in (0, 1]")
        if self.eta <= 0 or self.tournament_size < 1:
            raise ValueError("eta and tournament_size must be positive")


def constrained_dominates(a: Individual, b: Individual) -> bool:
    """Feasible beats infeasible, smaller violation beats larger, else Pareto on (max acc, min flops)."""
    if a.feasible != b.feasible:
        return a.feasible
    if not a.feasible:
        return a.violation < b.violation
    return (
        a.accuracy >= b.accuracy
        and a.flops <= b.flops
        and (a.accuracy > b.accuracy or a.flops < b.flops)
    )


def nondominated_sort(pop: Sequence[Individual]) -> list[list[int]]:
    """Fast non-dominated sorting; returns fronts of indices, best first."""
    pop = list(pop)
    if any(ind.accuracy is None for ind in pop):
        raise ValueError("every individual needs a fitness before sorting")
    n = len(pop)
    dominated_by = [[] for _ in range(n)]
    counts = [0] * n
    for i in range(n):
        for j in range(i + 1, n):
            if constrained_dominates(pop[i], pop[j]):
                dominated_by[i].append(j)
                counts[j] += 1
            elif constrained_dominates(pop[j], pop[i]):
                dominated_by[j].append(i)
                counts[i] += 1
    fronts = []
    current = [i for i in range(n) if counts[i] == 0]
    while current:
        fronts.append(current)
        nxt = []
        for i in current:
            for j in dominated_by[i]:
                counts[j] -= 1
                if counts[j] == 0:
                    nxt.append(j)
        current = sorted(nxt)
    return fronts


def crowding_distance(front: Sequence[Individual]) -> list[float]:
    n = len(front)
    if n == 0:
        raise ValueError("empty front")
    dist = [0.0] * n
    if n <= 2:
        return [math.inf] * n
    for values in ([ind.accuracy for ind in front], [ind.flops for ind in front]):
        order = sorted(range(n), key=lambda i: values[i])
        lo, hi = values[order[0]], values[order[-1]]
        dist[order[0]] = dist[order[-1]] = math.inf
        if hi == lo:
            continue
        for k in range(1, n - 1):
            dist[order[k]] += (values[order[k + 1]] - values[order[k - 1]]) / (hi - lo)
    return dist


def rank_and_crowding(pop: Sequence[Individual]) -> tuple[list[int], list[float]]:
    ranks = [0] * len(pop)
    crowd = [0.0] * len(pop)
    for r, front in enumerate(nondominated_sort(pop)):
        d = crowding_distance([pop[i] for i in front])
        for i, v in zip(front, d):
            ranks[i] = r
            crowd[i] = v
    return ranks, crowd


def tournament_select(
    pop: Sequence[Individual],
    config: EvoConfig,
    rng: np.random.Generator,
    ranks: Sequence[int] | None = None,
    crowding: Sequence[float] | None = None,
) -> list[int]:
    """Indices of ``parents_kept`` distinct winners of repeated tournaments.

    A tournament prefers lower front rank, then larger crowding distance,
    then the earlier index.
    """
    if len(pop) < config.parents_kept:
        raise ValueError(f"population of {len(pop)} is smaller than parents_kept={config.parents_kept}")
    if ranks is None or crowding is None:
        ranks, crowding = rank_and_crowding(pop)
    pool = list(range(len(pop)))
    winners = []
    while len(winners) < config.parents_kept:
        size = min(config.tournament_size, len(pool))
        picks = rng.choice(len(pool), size=size, replace=False)
        best = min((pool[k] for k in picks), key=lambda i: (ranks[i], -crowding[i], i))
        winners.append(best)
        pool.remove(best)
    return winners


def two_point_crossover(a: Sequence[int], b: Sequence[int], rng: np.random.Generator) -> tuple[Genome, Genome, bool]:
    """Swap the segment between two cut points ``1 <= p < q <= L``.

    The third value is False when the genomes are too short to cut.
    """
    if len(a) != len(b):
        raise ValueError("genomes must have equal length")
    L = len(a)
    if L < 2:
        return tuple(a), tuple(b), False
    p, q = sorted(rng.choice(np.arange(1, L + 1), size=2, replace=False))
    return crossover_at(a, b, int(p), int(q)), crossover_at(b, a, int(p), int(q)), True


def crossover_at(a: Sequence[int], b: Sequence[int], p: int, q: int) -> Genome:
    # positions p..q-1 (0-based) come from the other parent
    return tuple(a[:p]) + tuple(b[p:q]) + tuple(a[q:])


def polynomial_mutation(genome: Sequence[int], eta: float, prob: float, K: int, rng: np.random.Generator) -> Genome:
    """Deb's polynomial mutation on the relaxation ``[1, K]``, rounded back to groups."""
    out = list(genome)
    if K <= 1:
        return tuple(out)
    lo, hi = 1.0, float(K)
    span = hi - lo
    power = 1.0 / (eta + 1.0)
    for i, x in enumerate(genome):
        if rng.random() >= prob:
            continue
        d1 = (x - lo) / span
        d2 = (hi - x) / span
        u = rng.random()
        if u < 0.5:
            val = 2.0 * u + (1.0 - 2.0 * u) * (1.0 - d1) ** (eta + 1.0)
            dq = val**power - 1.0
        else:
            val = 2.0 * (1.0 - u) + 2.0 * (u - 0.5) * (1.0 - d2) ** (eta + 1.0)
            dq = 1.0 - val**power
        y = min(max(x + dq * span, lo), hi)
        out[i] = int(min(max(round(y), 1), K))
    return tuple(out)


@dataclass
class SearchLog:
    rows: list[tuple[int, Genome, float, float, bool]] = field(default_factory=list)

    def to_csv(self, header_comment: str | None = None) -> str:
        buf = io.StringIO()
        if header_comment:
            buf.write(f"# {header_comment}\n")
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["generation", "genome", "estimated_accuracy", "flops", "feasible"])
        for gen, genome, acc, flops, feasible in self.rows:
            writer.writerow([gen, ";".join(map(str, genome)), repr(acc), repr(flops), int(feasible)])
        return buf.getvalue()

    def digest(self) -> str:
        return hashlib.sha256(self.to_csv().encode()).hexdigest()

    def best_by_generation(self) -> list[float]:
        best: dict[int, float] = {}
        for gen, _, acc, _, feasible in self.rows:
            if feasible:
                best[gen] = max(acc, best.get(gen, -math.inf))
        return [best[g] for g in sorted(best)]


class CachedEvaluator:
    """Memoizes an evaluator by genome; every genome is evaluated at most once."""

    def __init__(self, fn: Evaluator):
        self.fn = fn
        self.cache: dict[Genome, float] = {}
        self.calls = 0

    def __contains__(self, genome: Genome) -> bool:
        return genome in self.cache

    def __call__(self, genome: Genome) -> float:
        if genome not in self.cache:
            self.calls += 1
            self.cache[genome] = float(self.fn(genome))
        return self.cache[genome]


def supernet_evaluator(weights, valset, principle="BC") -> Evaluator:
    from .supernet import evaluate_width

    space = weights.space
    return lambda genome: evaluate_width(weights, space.from_groups(genome), valset, principle)


def _best_of(pop: Sequence[Individual]) -> Individual | None:
    feasible = [ind for ind in pop if ind.feasible]
    if not feasible:
        return None
    return min(feasible, key=lambda ind: (-ind.accuracy, ind.flops, ind.genome))


def evolve(
    evaluator: Evaluator,
    space: WidthSpace,
    table: FlopsTable,
    F_b: float,
    init_pop: Population,
    config: EvoConfig = EvoConfig(),
) -> tuple[Individual, SearchLog]:
    """Evolve widths; the best is the top feasible accuracy of the final generation.

    Each generation keeps ``parents_kept`` tournament winners (always
    including the current best) and fills the rest of the population with
    two-point crossover plus polynomial mutation children, repaired to the
    budget.
    """
    if not len(init_pop):
        raise ValueError("initial population is empty")
    cached = evaluator if isinstance(evaluator, CachedEvaluator) else CachedEvaluator(evaluator)
    history = SearchLog()
    rng = derive_rng(config.seed, "evolve")
    K, L = space.group_count, space.num_layers
    mut_prob = config.mutation_prob or 1.0 / L

    def make(genome: Genome, generation: int) -> Individual:
        ind = Individual.from_genome(genome, table, F_b)
        if genome not in cached:
            ind.accuracy = cached(genome)
            history.rows.append((generation, genome, ind.accuracy, ind.flops, ind.feasible))
        else:
            ind.accuracy = cached(genome)
        return ind

    pop = [make(ind.genome, 0) for ind in init_pop]
    if _best_of(pop) is None:
        raise WidthSpaceError("initial population has no feasible width")
    size = config.population_size
    for generation in range(1, config.generations):
        ranks, crowd = rank_and_crowding(pop)
        kept = min(config.parents_kept, len(pop))
        winners = tournament_select(pop, replace(config, parents_kept=kept), rng, ranks, crowd)
        best = _best_of(pop)
        if all(pop[i].genome != best.genome for i in winners):
            winners[-1] = pop.index(best)
        parents = [pop[i] for i in winners]
        genomes = {p.genome for p in parents}
        children: list[Genome] = []
        attempts = 0
        while len(parents) + len(children) < size:
            a, b = (parents[i].genome for i in rng.choice(len(parents), size=2, replace=len(parents) < 2))
            if rng.random() < config.crossover_prob:
                c1, c2, _ = two_point_crossover(a, b, rng)
            else:
                c1, c2 = a, b
            for child in (c1, c2):
                child = polynomial_mutation(child, config.eta, mut_prob, K, rng)
                if table.flops_of_groups(child) > F_b:
                    child = repair_groups(child, table, F_b)
                attempts += 1
                # Redraw duplicates for a while to keep the population diverse.
                if child in genomes and attempts < 20 * size:
                    continue
                if len(parents) + len(children) < size:
                    children.append(child)
                    genomes.add(child)
        pop = parents + [make(g, generation) for g in children]
    best = _best_of(pop)
    if best is None:
        raise WidthSpaceError("no feasible width in the final generation")
    return best, history


def greedy_search(evaluator: Evaluator, space: WidthSpace, table: FlopsTable, F_b: float) -> Individual:
    """From full width, take the best-scoring one-group decrement until within budget."""
    if table.min_flops() > F_b:
        raise WidthSpaceError(f"budget {F_b} is below the minimum-width FLOPs {table.min_flops()}")
    cached = evaluator if isinstance(evaluator, CachedEvaluator) else CachedEvaluator(evaluator)
    genome = tuple([space.group_count] * space.num_layers)
    while table.flops_of_groups(genome) > F_b:
        candidates = []
        for i, g in enumerate(genome):
            if g > 1:
                cand = genome[:i] + (g - 1,) + genome[i + 1 :]
                candidates.append((-cached(cand), i, cand))
        genome = min(candidates)[2]
    ind = Individual.from_genome(genome, table, F_b)
    ind.accuracy = cached(genome)
    return ind
