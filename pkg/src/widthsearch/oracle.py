"""Brute-force reference implementations used to audit the fast paths."""

from __future__ import annotations

import itertools
from typing import Callable, Sequence

import numpy as np

from .widthspace import FlopsTable, NetworkWidth, WidthSpace, WidthSpaceError

EXHAUSTIVE_LIMIT = 10**6


def enumerate_cardinalities(l: int, principle: str) -> list[int]:
    """Per-channel usage counts over all widths ``c in [1, l]``, by direct marking."""
    if l < 1:
        raise ValueError("l must be >= 1")
    counts = [0] * l
    for c in range(1, l + 1):
        used = list(range(c))
        if principle == "BC":
            used += list(range(l - c, l))
        elif principle != "UA":
            raise ValueError(f"unknown principle {principle!r}")
        for ch in used:
            counts[ch] += 1
    return counts


def exhaustive_best_width(
    space: WidthSpace,
    evaluator: Callable[[tuple[int, ...]], float],
    table: FlopsTable,
    F_b: float,
    limit: int = EXHAUSTIVE_LIMIT,
) -> NetworkWidth:
    """Feasible argmax of ``evaluator`` over every group vector; ties go to the smaller genome."""
    size = space.group_count ** space.num_layers
    if size > limit:
        raise WidthSpaceError(f"space of {size} widths exceeds the exhaustive limit {limit}")
    best, best_score = None, -np.inf
    for genome in itertools.product(range(1, space.group_count + 1), repeat=space.num_layers):
        if table.flops_of_groups(genome) > F_b:
            continue
        score = evaluator(genome)
        if score > best_score:
            best, best_score = genome, score
    if best is None:
        raise WidthSpaceError("no width satisfies the budget")
    return space.from_groups(best)


def _dominates(p, q) -> bool:
    acc_p, flops_p, viol_p = p
    acc_q, flops_q, viol_q = q
    if (viol_p <= 0) != (viol_q <= 0):
        return viol_p <= 0
    if viol_p > 0:
        return viol_p < viol_q
    return acc_p >= acc_q and flops_p <= flops_q and (acc_p, -flops_p) != (acc_q, -flops_q)


def brute_pareto(points: Sequence[Sequence[float]]) -> list[list[int]]:
    """Peel fronts by checking every pair; points are ``(accuracy, flops[, violation])``."""
    if not points:
        raise ValueError("no points")
    pts = [(float(p[0]), float(p[1]), float(p[2]) if len(p) > 2 else 0.0) for p in points]
    remaining = set(range(len(pts)))
    fronts = []
    while remaining:
        front = sorted(i for i in remaining if not any(_dominates(pts[j], pts[i]) for j in remaining if j != i))
        fronts.append(front)
        remaining -= set(front)
    return fronts


def finite_diff_grad(weights, width, batch, side, eps: float = 1e-5, entries=None):
    """Central differences of the path loss.

    ``entries`` is a list of ``(param_index, flat_index)`` pairs in
    ``params()`` order; without it every entry is probed and full-shape
    arrays are returned.
    """
    from .supernet import forward_path

    if eps <= 0:
        raise ValueError("eps must be positive")
    probe = weights.copy()
    params = probe.params()

    def loss() -> float:
        return forward_path(probe, width, side, batch)[1]

    def diff(k: int, flat: int) -> float:
        arr = params[k].reshape(-1)
        old = arr[flat]
        arr[flat] = old + eps
        up = loss()
        arr[flat] = old - eps
        down = loss()
        arr[flat] = old
        return (up - down) / (2 * eps)

    if entries is not None:
        return np.array([diff(k, f) for k, f in entries])
    out = []
    for k, p in enumerate(params):
        g = np.zeros(p.size)
        for f in range(p.size):
            g[f] = diff(k, f)
        out.append(g.reshape(p.shape))
    return out


def kendall_tau(x: Sequence[float], y: Sequence[float]) -> float:
    """Tau-b by explicit pair counting."""
    n = len(x)
    if n != len(y) or n < 2:
        raise ValueError("need two equal-length rankings of length >= 2")
    concordant = discordant = ties_x = ties_y = 0
    for i in range(n):
        for j in range(i + 1, n):
            dx = np.sign(x[i] - x[j])
            dy = np.sign(y[i] - y[j])
            if dx == 0 and dy == 0:
                continue
            if dx == 0:
                ties_x += 1
            elif dy == 0:
                ties_y += 1
            elif dx == dy:
                concordant += 1
            else:
                discordant += 1
    denom = np.sqrt((concordant + discordant + ties_x) * (concordant + discordant + ties_y))
    if denom == 0:
        raise ValueError("tau is undefined when a ranking is entirely tied")
    return float((concordant - discordant) / denom)


def grid_search_distribution(errors: np.ndarray, table: FlopsTable, F_b: float, resolution: float = 0.01):
    """Best feasible point of the two-option (K=2) prior objective on a regular grid.

    Returns ``(objective, probs)``; probs[l] = (p, 1 - p).
    """
    errors = np.asarray(errors, dtype=np.float64)
    L, K = errors.shape
    if K != 2:
        raise ValueError("grid oracle covers K=2 only")
    steps = int(round(1 / resolution))
    grid = np.linspace(0.0, 1.0, steps + 1)
    best = (np.inf, None)
    for ps in itertools.product(grid, repeat=L):
        probs = np.array([[p, 1 - p] for p in ps])
        dists = [np.ones(1), *probs, np.ones(1)]
        flops = sum(dists[b] @ table.entries[b] @ dists[b + 1] for b in range(L + 1))
        if flops > F_b:
            continue
        obj = float((probs * errors).sum())
        if obj < best[0]:
            best = (obj, probs)
    return best
