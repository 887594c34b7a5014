"""Prior initial population sampling.

Layer-wise categorical distributions over width options are fitted to the
training-loss ledger: minimize the expected per-layer potential error while
keeping the expected FLOPs (a bilinear form in adjacent layers'
distributions) under budget.
"""

from __future__ import annotations

import csv
import json
import logging
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .rng import derive_rng
from .supernet import LossLedger
from .widthspace import FlopsTable, NetworkWidth, WidthSpace, WidthSpaceError, repair_groups

log = logging.getLogger(__name__)


class InfeasibleBudget(WidthSpaceError):
    pass


class SolverNotConverged(RuntimeError):
    def __init__(self, message: str, best: SamplingDistribution | None):
        super().__init__(message)
        self.best = best


@dataclass
class PotentialErrorMatrix:
    errors: np.ndarray  # (L, K)
    visit_counts: np.ndarray  # (L, K)


def potential_errors(ledger: LossLedger, space: WidthSpace) -> PotentialErrorMatrix:
    """Mean ledger loss of the widths using each (layer, option); unvisited cells get the max."""
    entries = ledger.entries
    if not entries:
        raise ValueError("loss ledger is empty")
    L, K = space.num_layers, space.group_count
    sums = np.zeros((L, K))
    counts = np.zeros((L, K), dtype=np.int64)
    for width, loss in entries:
        for layer, g in enumerate(space.groups_of(width)):
            sums[layer, g - 1] += loss
            counts[layer, g - 1] += 1
    visited = counts > 0
    errors = np.zeros((L, K))
    errors[visited] = sums[visited] / counts[visited]
    errors[~visited] = errors[visited].max()
    return PotentialErrorMatrix(errors, counts)


@dataclass
class SamplingDistribution:
    probs: np.ndarray  # (L, K), rows on the simplex

    def __post_init__(self) -> None:
        self.probs = np.asarray(self.probs, dtype=np.float64)
        if self.probs.ndim != 2:
            raise ValueError("probabilities must be an (L, K) array")
        if (self.probs < 0).any() or not np.allclose(self.probs.sum(axis=1), 1.0, atol=1e-9, rtol=0):
            raise ValueError("every layer's probabilities must be nonnegative and sum to 1")

    @classmethod
    def uniform(cls, space: WidthSpace) -> SamplingDistribution:
        K = space.group_count
        return cls(np.full((space.num_layers, K), 1.0 / K))

    @classmethod
    def point_mass(cls, space: WidthSpace, groups) -> SamplingDistribution:
        p = np.zeros((space.num_layers, space.group_count))
        p[np.arange(space.num_layers), np.asarray(groups) - 1] = 1.0
        return cls(p)

    def to_json(self) -> str:
        return json.dumps({"layers": self.probs.tolist()})

    @classmethod
    def from_json(cls, text: str) -> SamplingDistribution:
        return cls(np.array(json.loads(text)["layers"], dtype=np.float64))


def _expected_flops(probs: np.ndarray, table: FlopsTable) -> float:
    dists = [np.ones(1), *probs, np.ones(1)]
    return float(sum(dists[b] @ table.entries[b] @ dists[b + 1] for b in range(table.num_boundaries)))


def _expected_flops_grad(probs: np.ndarray, table: FlopsTable) -> np.ndarray:
    dists = [np.ones(1), *probs, np.ones(1)]
    grad = np.empty_like(probs)
    for layer in range(len(probs)):
        # layer's distribution is the output of boundary `layer` and the input of `layer + 1`
        grad[layer] = table.entries[layer].T @ dists[layer] + table.entries[layer + 1] @ dists[layer + 2]
    return grad


def expected_flops(dist: SamplingDistribution, table: FlopsTable) -> float:
    return _expected_flops(dist.probs, table)


def project_simplex(v) -> np.ndarray:
    """Euclidean projection onto the probability simplex (sort and threshold)."""
    v = np.asarray(v, dtype=np.float64)
    if v.ndim != 1 or v.size == 0:
        raise ValueError("expected a nonempty vector")
    u = np.sort(v)[::-1]
    css = np.cumsum(u) - 1.0
    ind = np.arange(1, v.size + 1)
    rho = np.count_nonzero(u - css / ind > 0)
    theta = css[rho - 1] / rho
    w = np.maximum(v - theta, 0.0)
    # Absorb the last bits of rounding so the sum is 1 to machine precision.
    w[np.argmax(w)] += 1.0 - w.sum()
    return w


def _project_rows(p: np.ndarray) -> np.ndarray:
    return np.stack([project_simplex(row) for row in p])


@dataclass(frozen=True)
class PipsConfig:
    max_iterations: int = 20000
    step_size: float = 1.0
    penalty_weight: float = 10.0
    penalty_growth: float = 10.0
    max_penalty: float = 1e12
    tolerance: float = 1e-10
    restarts: int = 4
    seed: int = 0

    def __post_init__(self) -> None:
        if self.max_iterations < 1 or self.restarts < 0:
            raise ValueError("max_iterations must be positive and restarts nonnegative")
        if not (self.step_size > 0 and self.penalty_weight > 0 and self.tolerance > 0):
            raise ValueError("step size, penalty weight and tolerance must be positive")
        if not self.penalty_growth > 1:
            raise ValueError("penalty growth factor must exceed 1")


@dataclass
class SolverResult:
    distribution: SamplingDistribution
    objective: float
    constraint_residual: float  # max(0, expected_flops - budget)
    iterations: int
    log: list[tuple[int, float, float, float]] = field(default_factory=list)

    def write_log(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(["iter", "objective", "constraint_residual", "step_size"])
            for it, obj, res, step in self.log:
                writer.writerow([it, repr(obj), repr(res), repr(step)])


def _restore_feasibility(p: np.ndarray, p_min: np.ndarray, table: FlopsTable, budget: float) -> np.ndarray:
    """Smallest move toward the all-minimum distribution that meets the budget (bisection)."""
    if _expected_flops(p, table) <= budget:
        return p
    lo, hi = 0.0, 1.0
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        if _expected_flops((1 - mid) * p + mid * p_min, table) <= budget:
            hi = mid
        else:
            lo = mid
        if hi - lo < 1e-15:
            break
    return (1 - hi) * p + hi * p_min


def _solve_from(
    start: np.ndarray,
    E: np.ndarray,
    table: FlopsTable,
    budget: float,
    config: PipsConfig,
    budget_iters: int,
    record: list | None,
) -> tuple[np.ndarray, int, bool]:
    """Penalty method: projected gradient with backtracking, growing the penalty weight.

    FLOPs are measured in units of the budget, so the penalty is unitless.
    """
    p = start.copy()
    scale = 1.0 / budget
    mu = config.penalty_weight
    iters = 0

    def value(q):
        viol = max(0.0, _expected_flops(q, table) * scale - 1.0)
        return float((q * E).sum() + mu * viol * viol)

    def grad(q):
        viol = max(0.0, _expected_flops(q, table) * scale - 1.0)
        return E + 2.0 * mu * viol * scale * _expected_flops_grad(q, table)

    while True:
        step = config.step_size
        f = value(p)
        while iters < budget_iters:
            iters += 1
            g = grad(p)
            while True:
                cand = _project_rows(p - step * g)
                fc = value(cand)
                # Armijo condition for projected gradient
                if fc <= f + 1e-4 * float((g * (cand - p)).sum()) or step < 1e-14:
                    break
                step *= 0.5
            moved = float(np.abs(cand - p).max())
            p, f = cand, fc
            if record is not None:
                viol = max(0.0, _expected_flops(p, table) - budget)
                record.append((len(record), float((p * E).sum()), viol, step))
            if moved < config.tolerance:
                break
            step = min(step * 2.0, config.step_size)
        residual = _expected_flops(p, table) - budget
        if residual <= 1e-6 * budget or mu >= config.max_penalty or iters >= budget_iters:
            return p, iters, residual <= 1e-6 * budget
        mu *= config.penalty_growth


def optimize_distribution(
    E: PotentialErrorMatrix | np.ndarray,
    table: FlopsTable,
    F_b: float,
    config: PipsConfig = PipsConfig(),
) -> SolverResult:
    """Minimize ``sum P * E`` over per-layer simplexes with expected FLOPs <= ``F_b``.

    Starts from the uniform distribution, then from ``config.restarts`` random
    simplex points, and keeps the best feasible end point. A final bisection
    toward the minimum-width distribution removes any residual violation
    left by the finite penalty weight.
    """
    errors = E.errors if isinstance(E, PotentialErrorMatrix) else np.asarray(E, dtype=np.float64)
    space = table.space
    L, K = space.num_layers, space.group_count
    if errors.shape != (L, K):
        raise ValueError(f"potential errors must be {(L, K)}, got {errors.shape}")
    p_min = np.zeros((L, K))
    p_min[:, 0] = 1.0
    floor = _expected_flops(p_min, table)
    if F_b < floor:
        raise InfeasibleBudget(f"budget {F_b} is below the minimum expected FLOPs {floor}")

    rng = derive_rng(config.seed, "pips")
    starts = [np.full((L, K), 1.0 / K)] + [rng.dirichlet(np.ones(K), size=L) for _ in range(config.restarts)]
    best = None
    total_iters = 0
    log_rows: list = []
    for k, start in enumerate(starts):
        remaining = config.max_iterations - total_iters
        if remaining <= 0:
            break
        p, iters, converged = _solve_from(start, errors, table, F_b, config, remaining, log_rows if k == 0 else None)
        total_iters += iters
        if not converged and _expected_flops(p, table) > F_b * (1 + 1e-3):
            continue
        p = _restore_feasibility(p, p_min, table, F_b)
        obj = float((p * errors).sum())
        if best is None or obj < best[1] - 1e-12:
            best = (p, obj)
    if best is None:
        raise SolverNotConverged(
            f"no start reached feasibility within {config.max_iterations} iterations", None
        )
    p = best[0]
    # Renormalize exactly after the convex combination.
    p = np.clip(p, 0.0, None)
    p /= p.sum(axis=1, keepdims=True)
    p = _restore_feasibility(p, p_min, table, F_b)
    dist = SamplingDistribution(p)
    residual = max(0.0, _expected_flops(p, table) - F_b)
    return SolverResult(dist, float((p * errors).sum()), residual, total_iters, log_rows)


def sample_width(dist: SamplingDistribution, space: WidthSpace, seed) -> NetworkWidth:
    rng = np.random.default_rng(seed)
    return space.from_groups(_sample_groups(dist, rng))


def _sample_groups(dist: SamplingDistribution, rng: np.random.Generator) -> tuple[int, ...]:
    u = rng.random(dist.probs.shape[0])
    cdf = np.cumsum(dist.probs, axis=1)
    idx = [min(int(np.searchsorted(row, x, side="right")), len(row) - 1) for row, x in zip(cdf, u)]
    return tuple(i + 1 for i in idx)


def initial_population(
    dist: SamplingDistribution,
    space: WidthSpace,
    table: FlopsTable,
    F_b: float,
    P_size: int,
    rejection_limit: int = 20,
    seed: int = 0,
):
    """Sample ``P_size`` distinct widths with ``flops <= F_b``.

    Infeasible draws are resampled up to ``rejection_limit`` times, then
    repaired. Duplicates are redrawn; since an optimized distribution is
    often (near) a point mass, each duplicate also moves the sampling
    distribution a little toward uniform, reaching it after
    ``10 * P_size`` duplicates. If distinct widths still run out the
    population is allowed to repeat, with a warning.
    """
    from .evosearch import Individual, Population

    if P_size < 1:
        raise ValueError("population size must be >= 1")
    if table.min_flops() > F_b:
        raise InfeasibleBudget(f"budget {F_b} is below the minimum-width FLOPs {table.min_flops()}")
    rng = derive_rng(seed, "initial-population")
    uniform = np.full_like(dist.probs, 1.0 / dist.probs.shape[1])
    seen: set[tuple[int, ...]] = set()
    genomes: list[tuple[int, ...]] = []
    rejections = duplicates = 0
    relaxed = False
    while len(genomes) < P_size:
        alpha = min(1.0, duplicates / (10 * P_size))
        current = dist if alpha == 0 else SamplingDistribution((1 - alpha) * dist.probs + alpha * uniform)
        for _ in range(rejection_limit + 1):
            g = _sample_groups(current, rng)
            if table.flops_of_groups(g) <= F_b:
                break
            rejections += 1
        else:
            g = repair_groups(g, table, F_b)
        if g in seen and not relaxed:
            duplicates += 1
            if duplicates < 50 * P_size:
                continue
            relaxed = True
            warnings.warn("not enough distinct feasible widths; population contains duplicates", RuntimeWarning)
        seen.add(g)
        genomes.append(g)
    log.debug("initial population: %d rejections", rejections)
    return Population([Individual.from_genome(g, table, F_b) for g in genomes], generation=0)


def random_population(space: WidthSpace, table: FlopsTable, F_b: float, P_size: int, rejection_limit: int = 20, seed: int = 0):
    """Baseline: the same procedure with a uniform distribution."""
    return initial_population(SamplingDistribution.uniform(space), space, table, F_b, P_size, rejection_limit, seed)
