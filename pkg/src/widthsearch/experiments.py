"""Desk-scale experiment protocols shared by the CLI and the acceptance suite."""

from __future__ import annotations

import itertools
import logging
from dataclasses import dataclass, field, replace

import numpy as np

from . import oracle
from .evosearch import EvoConfig, Individual, SearchLog, evolve, supernet_evaluator
from .priorsampler import (
    PipsConfig,
    SamplingDistribution,
    initial_population,
    optimize_distribution,
    potential_errors,
    random_population,
)
from .supernet import (
    Dataset,
    LossLedger,
    Principle,
    Strategy,
    SupernetWeights,
    TrainConfig,
    evaluate_width,
    init_supernet,
    retrain_from_scratch,
    synth_dataset,
    train_supernet,
)
from .widthspace import FlopsTable, LayerSpec, WidthSpace, build_flops_table, uniform_scale_width

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class DatasetParams:
    num_classes: int = 10
    input_dim: int = 16
    n_per_class: int = 600
    cluster_spread: float = 0.2
    clusters_per_class: int = 4

    def build(self, seed: int) -> Dataset:
        return synth_dataset(
            self.num_classes, self.input_dim, self.n_per_class, self.cluster_spread, seed, self.clusters_per_class
        )


@dataclass(frozen=True)
class DeskSetup:
    layers: tuple[int, ...] = (16, 32, 32, 16)
    group_count: int = 4
    data: DatasetParams = DatasetParams()
    train: TrainConfig = TrainConfig(epochs=60, batch_size=32, learning_rate=0.3, ledger_size=256)
    retrain: TrainConfig = TrainConfig(epochs=40, batch_size=32, learning_rate=0.3)
    pips: PipsConfig = PipsConfig()
    evo: EvoConfig = EvoConfig()
    budget_fraction: float = 0.5

    def space(self) -> WidthSpace:
        return WidthSpace(
            tuple(LayerSpec(l) for l in self.layers), self.group_count, self.data.input_dim, self.data.num_classes
        )


@dataclass
class TrainedSupernet:
    space: WidthSpace
    table: FlopsTable
    dataset: Dataset
    weights: SupernetWeights
    ledger: LossLedger
    budget: float
    seed: int


def train_for_setup(
    setup: DeskSetup,
    seed: int,
    principle: str = "BC",
    strategy: str = "complementary",
    dataset: Dataset | None = None,
) -> TrainedSupernet:
    space = setup.space()
    table = build_flops_table(space)
    data = dataset if dataset is not None else setup.data.build(seed)
    weights, ledger, _ = train_supernet(
        init_supernet(space, seed), data, replace(setup.train, seed=seed), strategy, principle
    )
    return TrainedSupernet(space, table, data, weights, ledger, setup.budget_fraction * table.full_flops(), seed)


def prior_distribution(trained: TrainedSupernet, config: PipsConfig) -> SamplingDistribution:
    errors = potential_errors(trained.ledger, trained.space)
    return optimize_distribution(errors, trained.table, trained.budget, replace(config, seed=trained.seed)).distribution


def search(
    trained: TrainedSupernet, setup: DeskSetup, init: str = "prior", principle: str = "BC"
) -> tuple[Individual, SearchLog]:
    space, table, budget = trained.space, trained.table, trained.budget
    size = setup.evo.population_size
    if init == "prior":
        pop = initial_population(prior_distribution(trained, setup.pips), space, table, budget, size, seed=trained.seed)
    else:
        pop = random_population(space, table, budget, size, seed=trained.seed)
    evaluator = supernet_evaluator(trained.weights, trained.dataset.subset("val"), principle)
    return evolve(evaluator, space, table, budget, pop, replace(setup.evo, seed=trained.seed))


@dataclass
class EndToEndResult:
    seed: int
    searched: tuple[int, ...]
    uniform: tuple[int, ...]
    searched_flops: float
    uniform_flops: float
    searched_accuracy: float
    uniform_accuracy: float
    estimated_accuracy: float


def end_to_end_trial(setup: DeskSetup, seed: int, trained: TrainedSupernet | None = None) -> EndToEndResult:
    """Search a width under the budget and retrain it against the uniformly scaled baseline."""
    trained = trained or train_for_setup(setup, seed)
    best, _ = search(trained, setup)
    space, table = trained.space, trained.table
    searched = space.from_groups(best.genome)
    uniform = uniform_scale_width(space, trained.budget, table)
    cfg = replace(setup.retrain, seed=seed)
    _, acc_searched = retrain_from_scratch(space, searched, trained.dataset, cfg)
    _, acc_uniform = retrain_from_scratch(space, uniform, trained.dataset, cfg)
    return EndToEndResult(
        seed,
        searched.channels,
        uniform.channels,
        table.flops_of(searched),
        table.flops_of(uniform),
        acc_searched,
        acc_uniform,
        best.accuracy,
    )


def population_quality(trained: TrainedSupernet, setup: DeskSetup) -> dict:
    """Supernet accuracies of a prior-sampled and a random feasible initial population."""
    space, table, budget = trained.space, trained.table, trained.budget
    size = setup.evo.population_size
    val = trained.dataset.subset("val")
    prior = initial_population(prior_distribution(trained, setup.pips), space, table, budget, size, seed=trained.seed)
    rand = random_population(space, table, budget, size, seed=trained.seed)
    score = lambda pop: [evaluate_width(trained.weights, space.from_groups(i.genome), val) for i in pop]
    prior_acc, random_acc = score(prior), score(rand)
    return {
        "prior": prior_acc,
        "random": random_acc,
        "prior_best": max(prior_acc),
        "random_best": max(random_acc),
    }


def all_genomes(space: WidthSpace):
    return list(itertools.product(range(1, space.group_count + 1), repeat=space.num_layers))


def ground_truth_accuracies(
    space: WidthSpace, dataset: Dataset, config: TrainConfig, seeds=(0,), limit: int = 10**5
) -> dict[tuple[int, ...], float]:
    """Mean test accuracy of every width trained from scratch."""
    genomes = all_genomes(space)
    if len(genomes) > limit:
        raise ValueError(f"space of {len(genomes)} widths exceeds the exhaustive limit {limit}")
    truth = {}
    for g in genomes:
        width = space.from_groups(g)
        accs = [retrain_from_scratch(space, width, dataset, replace(config, seed=s))[1] for s in seeds]
        truth[g] = float(np.mean(accs))
    return truth


def supernet_scores(weights: SupernetWeights, valset: Dataset, principle: str) -> dict[tuple[int, ...], float]:
    space = weights.space
    return {g: evaluate_width(weights, space.from_groups(g), valset, principle) for g in all_genomes(space)}


def rank_fidelity(
    setup: DeskSetup, seed: int, dataset: Dataset, truth: dict[tuple[int, ...], float]
) -> dict[str, float]:
    """Kendall tau between supernet estimates and retrained accuracy, per principle."""
    genomes = sorted(truth)
    gt = [truth[g] for g in genomes]
    out = {}
    for principle, strategy in (("BC", "complementary"), ("UA", "plain")):
        trained = train_for_setup(setup, seed, principle, strategy, dataset=dataset)
        est = supernet_scores(trained.weights, dataset.subset("val"), principle)
        out[principle] = oracle.kendall_tau([est[g] for g in genomes], gt)
    return out


def group_size_ablation(setup: DeskSetup, seed: int, group_counts=(2, 4, 8)) -> dict[int, EndToEndResult]:
    """Re-run search and retraining with different numbers of width groups."""
    return {K: end_to_end_trial(replace(setup, group_count=K), seed) for K in group_counts}
