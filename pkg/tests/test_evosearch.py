import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from widthsearch import oracle
from widthsearch.evosearch import (
    CachedEvaluator,
    EvoConfig,
    Individual,
    Population,
    constrained_dominates,
    crossover_at,
    crowding_distance,
    evolve,
    greedy_search,
    nondominated_sort,
    polynomial_mutation,
    tournament_select,
    two_point_crossover,
)
from widthsearch.priorsampler import random_population
from widthsearch.widthspace import LayerSpec, WidthSpaceError, build_flops_table, new_space


def ind(acc, flops, violation=0.0, genome=(1,)):
    return Individual(genome, flops, violation, acc)


def test_sort_example():
    pop = [ind(0.9, 100), ind(0.8, 50), ind(0.7, 120)]
    assert nondominated_sort(pop) == [[0, 1], [2]]


def test_infeasible_lands_last_and_single():
    pop = [ind(0.9, 100), ind(0.99, 10, violation=5.0), ind(0.8, 50)]
    assert nondominated_sort(pop)[-1] == [1]
    assert nondominated_sort([ind(0.5, 1)]) == [[0]]
    assert constrained_dominates(ind(0.1, 999, 1.0), ind(0.9, 1, 2.0))


def test_sort_requires_fitness():
    with pytest.raises(ValueError):
        nondominated_sort([Individual((1,), 1.0, 0.0)])


@pytest.mark.parametrize("trial", range(5))
def test_sort_matches_brute_force(trial):
    rng = np.random.default_rng(trial)
    pts = [(float(rng.integers(0, 10)) / 10, float(rng.integers(0, 10)), float(max(0, rng.integers(-6, 3)))) for _ in range(60)]
    pop = [ind(a, f, v) for a, f, v in pts]
    fronts = [sorted(f) for f in nondominated_sort(pop)]
    assert fronts == oracle.brute_pareto(pts)


@settings(max_examples=50)
@given(st.lists(st.tuples(st.floats(0, 1), st.integers(0, 20), st.sampled_from([0.0, 0.0, 1.0, 2.0])), min_size=1, max_size=30))
def test_sort_property_brute_force(pts):
    pop = [ind(a, f, v) for a, f, v in pts]
    assert [sorted(f) for f in nondominated_sort(pop)] == oracle.brute_pareto(pts)


def test_crowding_distance_cases():
    assert crowding_distance([ind(0.9, 10), ind(0.8, 5)]) == [math.inf, math.inf]
    line = [ind(0.1, 1), ind(0.2, 2), ind(0.3, 3)]
    assert crowding_distance(line)[1] == pytest.approx(2.0)
    dup = [ind(0.1, 1), ind(0.2, 2), ind(0.2, 2), ind(0.3, 3)]
    d = crowding_distance(dup)
    assert sorted(d)[0] < 2.0
    with pytest.raises(ValueError):
        crowding_distance([])


def test_tournament_cases():
    config = EvoConfig(population_size=4, parents_kept=2)
    same = [ind(0.5, 5, genome=(i,)) for i in range(4)]
    a = tournament_select(same, config, np.random.default_rng(1))
    b = tournament_select(same, config, np.random.default_rng(1))
    assert a == b and len(set(a)) == 2
    full = EvoConfig(population_size=4, parents_kept=4)
    assert sorted(tournament_select(same, full, np.random.default_rng(0))) == [0, 1, 2, 3]
    with pytest.raises(ValueError):
        tournament_select(same[:1], config, np.random.default_rng(0))
    # dominating vs dominated: the winner of a 2-pool is always the dominating one
    pair = [ind(0.4, 9), ind(0.9, 1)]
    one = EvoConfig(population_size=2, parents_kept=1)
    assert all(tournament_select(pair, one, np.random.default_rng(s)) == [1] for s in range(20))


def test_crossover_reference_and_properties():
    a, b = (1, 1, 1, 1, 1), (3, 3, 3, 3, 3)
    assert crossover_at(a, b, 2, 4) == (1, 1, 3, 3, 1)
    assert crossover_at(b, a, 2, 4) == (3, 3, 1, 1, 3)
    rng = np.random.default_rng(0)
    c1, c2, ok = two_point_crossover(a, a, rng)
    assert ok and c1 == c2 == a
    x, y = (1, 2, 3, 4, 2), (4, 3, 2, 1, 1)
    for _ in range(50):
        c1, c2, _ = two_point_crossover(x, y, rng)
        for i in range(5):
            assert sorted((c1[i], c2[i])) == sorted((x[i], y[i]))
    assert two_point_crossover((2,), (3,), rng) == ((2,), (3,), False)
    with pytest.raises(ValueError):
        two_point_crossover((1, 2), (1,), rng)


def test_mutation_cases():
    rng = np.random.default_rng(0)
    assert polynomial_mutation((1, 2, 3), 20.0, 0.0, 4, rng) == (1, 2, 3)
    assert polynomial_mutation((1, 1), 20.0, 1.0, 1, rng) == (1, 1)
    K = 9
    moves = np.array([polynomial_mutation((5,), 20.0, 1.0, K, rng)[0] - 5 for _ in range(100_000)])
    assert abs(moves.mean()) <= 0.02
    assert np.abs(moves).max() <= K - 1
    assert moves.min() >= -4 and moves.max() <= 4
    assert np.any(moves != 0)


def small_problem(K=3, L=3):
    space = new_space([LayerSpec(12)] * L, K, 4, 2)
    table = build_flops_table(space)
    return space, table


def monotone(genome):
    return sum(genome) / 100 + 0.001 * genome[0]


def test_evolve_single_generation_returns_best_of_init():
    space, table = small_problem()
    pop = random_population(space, table, table.full_flops(), 6, seed=1)
    best, log = evolve(monotone, space, table, table.full_flops(), pop, EvoConfig(population_size=6, generations=1, parents_kept=2))
    assert best.accuracy == max(monotone(i.genome) for i in pop)
    assert len(log.rows) == 6 and {r[0] for r in log.rows} == {0}


def test_evolve_full_budget_reaches_full_width():
    space, table = small_problem()
    pop = random_population(space, table, table.full_flops(), 10, seed=0)
    best, _ = evolve(monotone, space, table, table.full_flops(), pop, EvoConfig(population_size=10, generations=20, parents_kept=4))
    assert best.genome == tuple(space.groups_of(oracle.exhaustive_best_width(space, monotone, table, table.full_flops())))


def test_evolve_elitism_and_feasibility():
    space, table = small_problem(K=4, L=4)
    budget = 0.5 * table.full_flops()
    pop = random_population(space, table, budget, 12, seed=2)
    _, log = evolve(monotone, space, table, budget, pop, EvoConfig(population_size=12, generations=8, parents_kept=3, seed=2))
    curve = log.best_by_generation()
    seen = [max(r[2] for r in log.rows if r[0] <= g and r[4]) for g in range(8)]
    assert seen == sorted(seen)
    assert all(r[3] <= budget for r in log.rows)
    assert curve[0] == seen[0]


def test_evolve_deterministic_and_seed_sensitive():
    space, table = small_problem(K=4, L=4)
    budget = 0.5 * table.full_flops()
    noisy = lambda g: float(np.sin(np.dot(g, [1.3, 2.1, 0.7, 1.9])))
    pop = random_population(space, table, budget, 10, seed=0)
    cfg = EvoConfig(population_size=10, generations=6, parents_kept=3, seed=4)
    a = evolve(noisy, space, table, budget, pop, cfg)[1]
    b = evolve(noisy, space, table, budget, pop, cfg)[1]
    assert a.digest() == b.digest()
    assert a.to_csv().splitlines()[0] == "generation,genome,estimated_accuracy,flops,feasible"


def test_evolve_errors():
    space, table = small_problem()
    with pytest.raises(ValueError):
        evolve(monotone, space, table, table.full_flops(), Population([]), EvoConfig())
    infeasible = Population([Individual.from_genome((3, 3, 3), table, table.min_flops())])
    with pytest.raises(WidthSpaceError):
        evolve(monotone, space, table, table.min_flops(), infeasible, EvoConfig(population_size=1, parents_kept=1))


def test_cached_evaluator_counts_once():
    calls = []
    ev = CachedEvaluator(lambda g: calls.append(g) or 0.5)
    ev((1, 2))
    ev((1, 2))
    assert calls == [(1, 2)] and (1, 2) in ev


def test_greedy_search():
    space, table = small_problem()
    assert greedy_search(monotone, space, table, table.full_flops()).genome == (3, 3, 3)
    budget = 0.5 * table.full_flops()
    best = greedy_search(monotone, space, table, budget)
    assert best.flops <= budget
    with pytest.raises(WidthSpaceError):
        greedy_search(monotone, space, table, table.min_flops() - 1)


@pytest.mark.parametrize("bad", [dict(population_size=0), dict(parents_kept=50), dict(crossover_prob=0.0), dict(mutation_prob=2.0), dict(eta=0.0)])
def test_config_validation(bad):
    with pytest.raises(ValueError):
        EvoConfig(**bad)
