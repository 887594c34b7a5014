"""Grouped width search space, channel index sets and the FLOPs lookup table."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np


class WidthSpaceError(ValueError):
    """Raised for invalid spaces, widths or infeasible budgets."""


@dataclass(frozen=True)
class LayerSpec:
    max_channels: int
    cost_multiplier: float = 1.0

    def __post_init__(self) -> None:
        if int(self.max_channels) != self.max_channels or self.max_channels < 1:
            raise WidthSpaceError(f"max_channels must be a positive integer, got {self.max_channels}")
        if not self.cost_multiplier > 0:
            raise WidthSpaceError(f"cost_multiplier must be positive, got {self.cost_multiplier}")


@dataclass(frozen=True)
class WidthSpace:
    """Every layer ``i`` may take widths ``(l_i / K) * [1..K]``."""

    layers: tuple[LayerSpec, ...]
    group_count: int
    input_dim: int
    output_dim: int

    def __post_init__(self) -> None:
        object.__setattr__(self, "layers", tuple(self.layers))
        if len(self.layers) < 1:
            raise WidthSpaceError("a width space needs at least one layer")
        if self.group_count < 1:
            raise WidthSpaceError(f"group count must be >= 1, got {self.group_count}")
        if self.input_dim < 1 or self.output_dim < 1:
            raise WidthSpaceError("input_dim and output_dim must be positive")
        for i, layer in enumerate(self.layers):
            if layer.max_channels % self.group_count:
                raise WidthSpaceError(
                    f"layer {i}: max_channels={layer.max_channels} is not divisible by K={self.group_count}"
                )

    @property
    def num_layers(self) -> int:
        return len(self.layers)

    @property
    def max_channels(self) -> tuple[int, ...]:
        return tuple(layer.max_channels for layer in self.layers)

    def group_width(self, layer: int) -> int:
        return self.layers[layer].max_channels // self.group_count

    def options(self, layer: int) -> list[int]:
        step = self.group_width(layer)
        return [step * g for g in range(1, self.group_count + 1)]

    def full_width(self) -> NetworkWidth:
        return NetworkWidth(self.max_channels)

    def min_width(self) -> NetworkWidth:
        return self.from_groups([1] * self.num_layers)

    def from_groups(self, groups: Sequence[int]) -> NetworkWidth:
        if len(groups) != self.num_layers:
            raise WidthSpaceError(f"expected {self.num_layers} group indices, got {len(groups)}")
        for i, g in enumerate(groups):
            if not 1 <= g <= self.group_count:
                raise WidthSpaceError(f"layer {i}: group index {g} outside [1, {self.group_count}]")
        return NetworkWidth(tuple(int(g) * self.group_width(i) for i, g in enumerate(groups)))

    def groups_of(self, width: NetworkWidth) -> tuple[int, ...]:
        self.validate(width)
        return tuple(c // self.group_width(i) for i, c in enumerate(width.channels))

    def validate(self, width: NetworkWidth) -> None:
        if len(width.channels) != self.num_layers:
            raise WidthSpaceError(f"width has {len(width.channels)} layers, space has {self.num_layers}")
        for i, c in enumerate(width.channels):
            step = self.group_width(i)
            if c < step or c > self.layers[i].max_channels or c % step:
                raise WidthSpaceError(f"layer {i}: {c} channels is not one of {self.options(i)}")

    def to_dict(self) -> dict:
        return {
            "layers": [
                {"max_channels": layer.max_channels, "cost_multiplier": layer.cost_multiplier}
                for layer in self.layers
            ],
            "group_count": self.group_count,
            "input_dim": self.input_dim,
            "output_dim": self.output_dim,
        }

    @classmethod
    def from_dict(cls, data: dict) -> WidthSpace:
        layers = [
            LayerSpec(int(d["max_channels"]), float(d.get("cost_multiplier", 1.0))) for d in data["layers"]
        ]
        return cls(tuple(layers), int(data["group_count"]), int(data["input_dim"]), int(data["output_dim"]))

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> WidthSpace:
        return cls.from_dict(json.loads(text))


@dataclass(frozen=True)
class NetworkWidth:
    channels: tuple[int, ...]

    def __post_init__(self) -> None:
        object.__setattr__(self, "channels", tuple(int(c) for c in self.channels))
        if any(c < 1 for c in self.channels):
            raise WidthSpaceError(f"channel counts must be positive: {self.channels}")

    def __len__(self) -> int:
        return len(self.channels)

    def __iter__(self):
        return iter(self.channels)

    def to_json(self) -> str:
        return json.dumps(list(self.channels))

    @classmethod
    def from_json(cls, text: str) -> NetworkWidth:
        data = json.loads(text)
        if not isinstance(data, list) or not all(isinstance(c, int) for c in data):
            raise WidthSpaceError("a width must be a JSON array of integers")
        return cls(tuple(data))


def new_space(layer_specs: Iterable[LayerSpec], K: int, input_dim: int, output_dim: int) -> WidthSpace:
    return WidthSpace(tuple(layer_specs), K, input_dim, output_dim)


def space_size(space: WidthSpace) -> int:
    return space.group_count ** space.num_layers


def log10_space_size(space: WidthSpace) -> float:
    return space.num_layers * math.log10(space.group_count)


def uniform_sample(space: WidthSpace, rng_seed: int | np.random.Generator) -> NetworkWidth:
    rng = np.random.default_rng(rng_seed)
    groups = rng.integers(1, space.group_count + 1, size=space.num_layers)
    return space.from_groups(groups.tolist())


def complement(space: WidthSpace, width: NetworkWidth) -> tuple[NetworkWidth, tuple[bool, ...]]:
    """Per-layer group index ``K - g``; full-width layers clamp to group 1.

    Returns the complementary width and a per-layer flag marking clamped layers.
    """
    groups = space.groups_of(width)
    K = space.group_count
    flags = tuple(g == K for g in groups)
    comp = [1 if clamped else K - g for g, clamped in zip(groups, flags)]
    return space.from_groups(comp), flags


@dataclass(frozen=True)
class IndexSet:
    """A multiset of 1-based channel positions stored as inclusive ranges."""

    ranges: tuple[tuple[int, int], ...]

    def __post_init__(self) -> None:
        object.__setattr__(self, "ranges", tuple(sorted((int(a), int(b)) for a, b in self.ranges)))
        for a, b in self.ranges:
            if a < 1 or b < a:
                raise WidthSpaceError(f"bad index range [{a}:{b}]")

    def __len__(self) -> int:
        return sum(b - a + 1 for a, b in self.ranges)

    def positions(self) -> list[int]:
        return sorted(p for a, b in self.ranges for p in range(a, b + 1))

    def counts(self, length: int) -> np.ndarray:
        out = np.zeros(length, dtype=np.int64)
        for a, b in self.ranges:
            if b > length:
                raise WidthSpaceError(f"range [{a}:{b}] exceeds {length} channels")
            out[a - 1 : b] += 1
        return out

    def merge(self, other: IndexSet) -> IndexSet:
        return IndexSet(self.ranges + other.ranges)

    def as_slice(self) -> slice:
        """0-based slice for a single contiguous range."""
        if len(self.ranges) != 1:
            raise WidthSpaceError("only a single contiguous range converts to a slice")
        a, b = self.ranges[0]
        return slice(a - 1, b)


def _check_width(l: int, c: int) -> None:
    if l < 1 or not 1 <= c <= l:
        raise WidthSpaceError(f"width {c} outside [1, {l}]")


def ua_index_set(l: int, c: int) -> IndexSet:
    _check_width(l, c)
    return IndexSet(((1, c),))


def bc_index_sets(l: int, c: int) -> tuple[IndexSet, IndexSet]:
    # The right path counts from the right edge: [(l - c + 1) : l].
    _check_width(l, c)
    return IndexSet(((1, c),)), IndexSet(((l - c + 1, l),))


def cardinality_ua(l: int, c: int) -> int:
    _check_width(l, c)
    return l - c + 1


def cardinality_bc(l: int, c: int) -> int:
    _check_width(l, c)
    return l + 1


class FlopsTable:
    """Per-boundary MAC tables ``F[b][i, j] = c_in[i] * c_out[j] * multiplier``.

    Boundary ``b`` feeds layer ``b`` (0-based) from its predecessor; boundary
    ``L`` is the output head. The input and output dims are single-option
    endpoints, so ``F[0]`` has one row and ``F[L]`` one column.
    """

    def __init__(self, space: WidthSpace):
        self.space = space
        L = space.num_layers
        self.in_options: list[np.ndarray] = []
        self.out_options: list[np.ndarray] = []
        self.multipliers: list[float] = []
        self.entries: list[np.ndarray] = []
        for b in range(L + 1):
            cin = np.array([space.input_dim] if b == 0 else space.options(b - 1), dtype=np.float64)
            cout = np.array([space.output_dim] if b == L else space.options(b), dtype=np.float64)
            mult = space.layers[b].cost_multiplier if b < L else 1.0
            self.in_options.append(cin)
            self.out_options.append(cout)
            self.multipliers.append(mult)
            self.entries.append(np.outer(cin, cout) * mult)

    @property
    def num_boundaries(self) -> int:
        return len(self.entries)

    def flops_of_groups(self, groups: Sequence[int]) -> float:
        L = self.space.num_layers
        idx = [0] + [int(g) - 1 for g in groups] + [0]
        return float(sum(self.entries[b][idx[b], idx[b + 1]] for b in range(L + 1)))

    def flops_of(self, width: NetworkWidth) -> float:
        return self.flops_of_groups(self.space.groups_of(width))

    def full_flops(self) -> float:
        return self.flops_of_groups([self.space.group_count] * self.space.num_layers)

    def min_flops(self) -> float:
        return self.flops_of_groups([1] * self.space.num_layers)


def build_flops_table(space: WidthSpace) -> FlopsTable:
    return FlopsTable(space)


def flops_of(width: NetworkWidth, table: FlopsTable) -> float:
    return table.flops_of(width)


def uniform_scale_width(space: WidthSpace, flops_budget: float, table: FlopsTable) -> NetworkWidth:
    """Largest common group index whose width fits the budget."""
    for g in range(space.group_count, 0, -1):
        groups = [g] * space.num_layers
        if table.flops_of_groups(groups) <= flops_budget:
            return space.from_groups(groups)
    raise WidthSpaceError(
        f"budget {flops_budget} is below the minimum-width FLOPs {table.min_flops()}"
    )


def repair_groups(groups: Sequence[int], table: FlopsTable, budget: float) -> tuple[int, ...]:
    """Decrement the layer with the largest marginal FLOPs until within budget.

    Ties go to the lowest layer index.
    """
    g = list(int(x) for x in groups)
    current = table.flops_of_groups(g)
    while current > budget:
        best_layer, best_saving, best_flops = -1, -1.0, current
        for i in range(len(g)):
            if g[i] <= 1:
                continue
            g[i] -= 1
            trial = table.flops_of_groups(g)
            g[i] += 1
            if current - trial > best_saving:
                best_layer, best_saving, best_flops = i, current - trial, trial
        if best_layer < 0:
            raise WidthSpaceError(f"budget {budget} is below the minimum-width FLOPs {current}")
        g[best_layer] -= 1
        current = best_flops
    return tuple(g)
