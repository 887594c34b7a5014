"""Shared-weight dense supernet with left/right (bilateral) channel paths."""

from __future__ import annotations

import csv
import enum
import io
import json
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .rng import derive_rng
from .widthspace import LayerSpec, NetworkWidth, WidthSpace, complement, uniform_sample


class PathSide(enum.Enum):
    LEFT = "left"
    RIGHT = "right"


class Principle(str, enum.Enum):
    """UA evaluates a width through its leftmost channels only; BC averages both edges."""

    UA = "UA"
    BC = "BC"


class Strategy(str, enum.Enum):
    PLAIN = "plain"
    COMPLEMENTARY = "complementary"


class TrainingDivergence(FloatingPointError):
    pass


SPLITS = ("train", "val", "test")


@dataclass
class Dataset:
    features: np.ndarray
    labels: np.ndarray
    num_classes: int
    split: np.ndarray | None = None  # per-row index into SPLITS

    def __post_init__(self) -> None:
        self.features = np.asarray(self.features, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.features.ndim != 2 or len(self.features) != len(self.labels):
            raise ValueError("features must be (N, d) and match the label count")
        if len(self.labels) < 1:
            raise ValueError("dataset is empty")
        if self.labels.min() < 0 or self.labels.max() >= self.num_classes:
            raise ValueError(f"labels must lie in [0, {self.num_classes})")
        if self.split is not None:
            self.split = np.asarray(self.split, dtype=np.int64)

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def input_dim(self) -> int:
        return self.features.shape[1]

    def subset(self, name: str) -> Dataset:
        if self.split is None:
            raise ValueError("dataset carries no split tags")
        mask = self.split == SPLITS.index(name)
        return Dataset(self.features[mask], self.labels[mask], self.num_classes)

    def take(self, idx: np.ndarray) -> Dataset:
        return Dataset(self.features[idx], self.labels[idx], self.num_classes)

    def to_csv(self, path: str | Path) -> None:
        tagged = self.split is not None
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow([f"x{i}" for i in range(self.input_dim)] + ["label"] + (["split"] if tagged else []))
            for k, (row, label) in enumerate(zip(self.features, self.labels)):
                extra = [SPLITS[self.split[k]]] if tagged else []
                writer.writerow([repr(float(v)) for v in row] + [int(label)] + extra)

    @classmethod
    def from_csv(cls, path: str | Path, num_classes: int | None = None) -> Dataset:
        """Feature columns, then ``label``, then an optional ``split`` column."""
        with open(path, newline="") as fh:
            rows = list(csv.reader(fh))
        if len(rows) < 2:
            raise ValueError(f"{path}: no data rows")
        tagged = rows[0][-1] == "split"
        split = None
        if tagged:
            try:
                split = np.array([SPLITS.index(r[-1]) for r in rows[1:]])
            except ValueError:
                raise ValueError(f"{path}: split must be one of {SPLITS}") from None
            rows = [r[:-1] for r in rows]
        body = np.array(rows[1:], dtype=np.float64)
        labels = body[:, -1].astype(np.int64)
        k = int(labels.max()) + 1 if num_classes is None else num_classes
        return cls(body[:, :-1], labels, k, split)

    def with_splits(self, seed: int) -> Dataset:
        """Copy with a stratified 70/15/15 train/val/test assignment."""
        rng = derive_rng(seed, "split")
        split = np.full(len(self), 2, dtype=np.int64)
        for k in range(self.num_classes):
            idx = rng.permutation(np.flatnonzero(self.labels == k))
            n_train, n_val = round(0.70 * len(idx)), round(0.15 * len(idx))
            split[idx[:n_train]] = 0
            split[idx[n_train : n_train + n_val]] = 1
        return Dataset(self.features, self.labels, self.num_classes, split)


def synth_dataset(
    num_classes: int,
    input_dim: int,
    n_per_class: int,
    cluster_spread: float,
    seed: int,
    clusters_per_class: int = 1,
) -> Dataset:
    """Gaussian clusters around random unit-norm means, split 70/15/15 per class.

    With ``clusters_per_class > 1`` each class is a mixture of that many
    clusters (points assigned round-robin), which makes the decision
    boundary nonlinear so that hidden width matters.
    """
    if min(num_classes, input_dim, n_per_class, clusters_per_class) < 1 or cluster_spread < 0:
        raise ValueError("dataset parameters must be positive")
    rng = derive_rng(seed, "synth")
    means = rng.standard_normal((num_classes, clusters_per_class, input_dim))
    means /= np.linalg.norm(means, axis=2, keepdims=True)
    n_train = round(0.70 * n_per_class)
    n_val = round(0.15 * n_per_class)
    xs, ys, tags = [], [], []
    for k in range(num_classes):
        centre = means[k, np.arange(n_per_class) % clusters_per_class]
        xs.append(centre + cluster_spread * rng.standard_normal((n_per_class, input_dim)))
        ys.append(np.full(n_per_class, k))
        t = np.full(n_per_class, 2)
        t[:n_train] = 0
        t[n_train : n_train + n_val] = 1
        tags.append(t)
    order = rng.permutation(num_classes * n_per_class)
    return Dataset(
        np.concatenate(xs)[order], np.concatenate(ys)[order], num_classes, np.concatenate(tags)[order]
    )


@dataclass
class SupernetWeights:
    """Maximal-width parameters.

    ``weights[i]`` is ``(l_i, fan_in_max)`` for hidden layer ``i``; the last
    entry is the ``(output_dim, l_L)`` head. Biases follow the same layout.
    """

    space: WidthSpace
    weights: list[np.ndarray]
    biases: list[np.ndarray]

    def params(self) -> list[np.ndarray]:
        out = []
        for w, b in zip(self.weights, self.biases):
            out.extend((w, b))
        return out

    def copy(self) -> SupernetWeights:
        return SupernetWeights(self.space, [w.copy() for w in self.weights], [b.copy() for b in self.biases])

    def is_finite(self) -> bool:
        return all(np.isfinite(p).all() for p in self.params())


def _fan_ins(space: WidthSpace) -> list[int]:
    return [space.input_dim, *space.max_channels]


def init_supernet(space: WidthSpace, seed: int) -> SupernetWeights:
    """Uniform in ``+-sqrt(3 / fan_in)`` (unit variance scaled by fan-in); zero biases."""
    rng = derive_rng(seed, "init")
    rows = [*space.max_channels, space.output_dim]
    weights, biases = [], []
    for n_out, fan_in in zip(rows, _fan_ins(space)):
        bound = math.sqrt(3.0) / math.sqrt(fan_in)
        weights.append(rng.uniform(-bound, bound, size=(n_out, fan_in)))
        biases.append(np.zeros(n_out))
    return SupernetWeights(space, weights, biases)


def path_slices(space: WidthSpace, width: NetworkWidth, side: PathSide) -> list[slice]:
    space.validate(width)
    if side is PathSide.LEFT:
        return [slice(0, c) for c in width.channels]
    return [slice(l - c, l) for l, c in zip(space.max_channels, width.channels)]


def _blocks(space: WidthSpace, slices: list[slice]) -> list[tuple[slice, slice]]:
    """(row slice, column slice) of each weight matrix touched by a path."""
    cols = [slice(0, space.input_dim), *slices]
    rows = [*slices, slice(0, space.output_dim)]
    return list(zip(rows, cols))


def _log_softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=1, keepdims=True))


def _check_batch(weights: SupernetWeights, batch: Dataset) -> None:
    space = weights.space
    if batch.input_dim != space.input_dim:
        raise ValueError(f"batch has {batch.input_dim} features, space expects {space.input_dim}")
    if batch.num_classes != space.output_dim:
        raise ValueError(f"batch has {batch.num_classes} classes, space expects {space.output_dim}")


def _forward(weights: SupernetWeights, blocks, x: np.ndarray):
    acts = [x]
    h = x
    last = len(blocks) - 1
    for i, (r, c) in enumerate(blocks):
        z = h @ weights.weights[i][r, c].T + weights.biases[i][r]
        h = z if i == last else np.maximum(z, 0.0)
        acts.append(h)
    return acts


def forward_path(
    weights: SupernetWeights, width: NetworkWidth, side: PathSide, batch: Dataset
) -> tuple[np.ndarray, float]:
    _check_batch(weights, batch)
    blocks = _blocks(weights.space, path_slices(weights.space, width, side))
    logits = _forward(weights, blocks, batch.features)[-1]
    logp = _log_softmax(logits)
    loss = float(-logp[np.arange(len(batch)), batch.labels].mean())
    return logits, loss


def _path_backward(weights: SupernetWeights, blocks, batch: Dataset):
    """Loss and per-block (dW, db) of one path's mean cross-entropy."""
    acts = _forward(weights, blocks, batch.features)
    n = len(batch)
    logp = _log_softmax(acts[-1])
    loss = float(-logp[np.arange(n), batch.labels].mean())
    delta = np.exp(logp)
    delta[np.arange(n), batch.labels] -= 1.0
    delta /= n
    grads = [None] * len(blocks)
    for i in range(len(blocks) - 1, -1, -1):
        r, c = blocks[i]
        grads[i] = (delta.T @ acts[i], delta.sum(axis=0))
        if i:
            delta = (delta @ weights.weights[i][r, c]) * (acts[i] > 0)
    return loss, grads


def analytic_gradient(
    weights: SupernetWeights, width: NetworkWidth, batch: Dataset, side: PathSide
) -> list[np.ndarray]:
    """Full-shape gradients in ``params()`` order; zero outside the path."""
    _check_batch(weights, batch)
    blocks = _blocks(weights.space, path_slices(weights.space, width, side))
    _, grads = _path_backward(weights, blocks, batch)
    out = []
    for (r, c), (dw, db), w, b in zip(blocks, grads, weights.weights, weights.biases):
        gw, gb = np.zeros_like(w), np.zeros_like(b)
        gw[r, c] = dw
        gb[r] = db
        out.extend((gw, gb))
    return out


def _sides(principle: Principle) -> tuple[PathSide, ...]:
    return (PathSide.LEFT,) if Principle(principle) is Principle.UA else (PathSide.LEFT, PathSide.RIGHT)


def bilateral_loss(weights: SupernetWeights, width: NetworkWidth, batch: Dataset) -> float:
    left = forward_path(weights, width, PathSide.LEFT, batch)[1]
    right = forward_path(weights, width, PathSide.RIGHT, batch)[1]
    return 0.5 * (left + right)


@dataclass
class UpdateCounters:
    """Gradient updates received per hidden channel.

    ``audited`` accumulates only updates from samples whose complement needed
    no clamping, so fairness can be checked exactly.
    """

    counts: list[np.ndarray]
    audited: list[np.ndarray]
    samples: int = 0
    clamped_samples: int = 0

    @classmethod
    def zeros(cls, space: WidthSpace) -> UpdateCounters:
        return cls(
            [np.zeros(l, dtype=np.int64) for l in space.max_channels],
            [np.zeros(l, dtype=np.int64) for l in space.max_channels],
        )

    def reset(self) -> None:
        for a in (*self.counts, *self.audited):
            a[:] = 0
        self.samples = self.clamped_samples = 0

    def spread(self, audited: bool = True) -> list[int]:
        src = self.audited if audited else self.counts
        return [int(a.max() - a.min()) for a in src]

    def to_dict(self) -> dict:
        return {
            "counts": [a.tolist() for a in self.counts],
            "audited_counts": [a.tolist() for a in self.audited],
            "samples": self.samples,
            "clamped_samples": self.clamped_samples,
            "audited_spread": self.spread(True),
            "raw_spread": self.spread(False),
        }


def train_step(
    weights: SupernetWeights,
    width: NetworkWidth,
    batch: Dataset,
    lr: float,
    weight_decay: float,
    counters: UpdateCounters | None = None,
    principle: Principle = Principle.BC,
) -> float:
    """One SGD step on the path-averaged loss; returns the pre-step loss.

    Only entries on at least one active path move, weight decay included.
    """
    _check_batch(weights, batch)
    space = weights.space
    sides = _sides(principle)
    scale = 1.0 / len(sides)
    gw = [np.zeros_like(w) for w in weights.weights]
    gb = [np.zeros_like(b) for b in weights.biases]
    mw = [np.zeros(w.shape, dtype=bool) for w in weights.weights]
    mb = [np.zeros(b.shape, dtype=bool) for b in weights.biases]
    loss = 0.0
    for side in sides:
        slices = path_slices(space, width, side)
        blocks = _blocks(space, slices)
        side_loss, grads = _path_backward(weights, blocks, batch)
        loss += scale * side_loss
        for i, ((r, c), (dw, db)) in enumerate(zip(blocks, grads)):
            gw[i][r, c] += scale * dw
            gb[i][r] += scale * db
            mw[i][r, c] = True
            mb[i][r] = True
        if counters is not None:
            for i, s in enumerate(slices):
                counters.counts[i][s] += 1
    if not math.isfinite(loss):
        raise TrainingDivergence(f"non-finite loss {loss} at width {width.channels}")
    for i in range(len(gw)):
        w, b = weights.weights[i], weights.biases[i]
        w -= lr * (gw[i] + weight_decay * w * mw[i])
        b -= lr * (gb[i] + weight_decay * b * mb[i])
    return loss


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 20
    batch_size: int = 64
    learning_rate: float = 0.1
    schedule: str = "cosine"
    lr_min: float = 0.0
    weight_decay: float = 1e-4
    seed: int = 0
    ledger_size: int = 100

    def __post_init__(self) -> None:
        if self.epochs < 1 or self.batch_size < 1 or self.ledger_size < 1:
            raise ValueError("epochs, batch_size and ledger_size must be positive")
        if not self.learning_rate > 0 or self.weight_decay < 0 or self.lr_min < 0:
            raise ValueError("learning rate must be positive and weight decay nonnegative")
        if self.schedule not in ("cosine", "constant"):
            raise ValueError(f"unknown schedule {self.schedule!r}")

    def lr_at(self, step: int, total: int) -> float:
        if self.schedule == "constant" or total <= 1:
            return self.learning_rate
        t = step / (total - 1)
        return self.lr_min + 0.5 * (self.learning_rate - self.lr_min) * (1 + math.cos(math.pi * t))


class LossLedger:
    """The ``m`` smallest-loss widths seen in training; a revisit keeps the smaller loss."""

    def __init__(self, capacity: int):
        if capacity < 1:
            raise ValueError("ledger capacity must be >= 1")
        self.capacity = capacity
        self._best: dict[tuple[int, ...], float] = {}

    def record(self, width: NetworkWidth, loss: float) -> None:
        key = width.channels
        prev = self._best.get(key)
        if prev is None or loss < prev:
            self._best[key] = float(loss)
        # Anything evicted here already has m strictly better widths ahead of it.
        if len(self._best) > 2 * self.capacity:
            self._best = dict(self._sorted()[: self.capacity])

    def _sorted(self) -> list[tuple[tuple[int, ...], float]]:
        return sorted(self._best.items(), key=lambda kv: (kv[1], kv[0]))

    @property
    def entries(self) -> list[tuple[NetworkWidth, float]]:
        return [(NetworkWidth(k), v) for k, v in self._sorted()[: self.capacity]]

    def __len__(self) -> int:
        return min(len(self._best), self.capacity)

    def to_dict(self) -> dict:
        return {
            "capacity": self.capacity,
            "entries": [{"width": list(w.channels), "loss": loss} for w, loss in self.entries],
        }

    @classmethod
    def from_dict(cls, data: dict) -> LossLedger:
        ledger = cls(int(data["capacity"]))
        for e in data["entries"]:
            ledger.record(NetworkWidth(tuple(e["width"])), float(e["loss"]))
        return ledger

    @classmethod
    def from_entries(cls, entries: Sequence[tuple[NetworkWidth, float]], capacity: int | None = None) -> LossLedger:
        ledger = cls(capacity or max(1, len(entries)))
        for w, loss in entries:
            ledger.record(w, loss)
        return ledger


def _train_loop(
    weights: SupernetWeights,
    train: Dataset,
    config: TrainConfig,
    next_width: Callable[[np.random.Generator], NetworkWidth],
    principle: Principle,
    strategy: Strategy,
    ledger: LossLedger | None,
    counters: UpdateCounters,
) -> None:
    space = weights.space
    n = len(train)
    per_epoch = math.ceil(n / config.batch_size)
    total = config.epochs * per_epoch
    shuffle_rng = derive_rng(config.seed, "train", "shuffle")
    width_rng = derive_rng(config.seed, "train", "widths")
    step = 0
    for _ in range(config.epochs):
        order = shuffle_rng.permutation(n)
        for start in range(0, n, config.batch_size):
            batch = train.take(order[start : start + config.batch_size])
            lr = config.lr_at(step, total)
            width = next_width(width_rng)
            pair = [(width, False)]
            if strategy is Strategy.COMPLEMENTARY:
                comp, flags = complement(space, width)
                pair.append((comp, any(flags)))
            clamped = any(flag for _, flag in pair)
            before = [a.copy() for a in counters.counts]
            for w, _ in pair:
                loss = train_step(weights, w, batch, lr, config.weight_decay, counters, principle)
                if ledger is not None:
                    ledger.record(w, loss)
            counters.samples += 1
            if clamped:
                counters.clamped_samples += 1
            else:
                for a, now, old in zip(counters.audited, counters.counts, before):
                    a += now - old
            step += 1
    if not weights.is_finite():
        raise TrainingDivergence("weights became non-finite")


def train_supernet(
    weights: SupernetWeights,
    dataset: Dataset,
    config: TrainConfig,
    strategy: Strategy | str = Strategy.COMPLEMENTARY,
    principle: Principle | str = Principle.BC,
) -> tuple[SupernetWeights, LossLedger, UpdateCounters]:
    """Train on uniformly sampled widths (plus complements if requested).

    ``dataset`` may carry split tags, in which case only the train split is used.
    The input weights are not modified.
    """
    weights = weights.copy()
    space = weights.space
    train = dataset.subset("train") if dataset.split is not None else dataset
    ledger = LossLedger(config.ledger_size)
    counters = UpdateCounters.zeros(space)
    _train_loop(
        weights,
        train,
        config,
        lambda rng: uniform_sample(space, rng),
        Principle(principle),
        Strategy(strategy),
        ledger,
        counters,
    )
    return weights, ledger, counters


def accuracy_of(weights: SupernetWeights, width: NetworkWidth, side: PathSide, data: Dataset) -> float:
    logits, _ = forward_path(weights, width, side, data)
    return float((logits.argmax(axis=1) == data.labels).mean())


def evaluate_width(
    weights: SupernetWeights, width: NetworkWidth, valset: Dataset, principle: Principle | str = Principle.BC
) -> float:
    """Mean argmax accuracy over the principle's paths."""
    if len(valset) == 0:
        raise ValueError("empty validation set")
    sides = _sides(Principle(principle))
    return sum(accuracy_of(weights, width, s, valset) for s in sides) / len(sides)


def standalone_space(space: WidthSpace, width: NetworkWidth) -> WidthSpace:
    space.validate(width)
    layers = tuple(LayerSpec(c, layer.cost_multiplier) for c, layer in zip(width.channels, space.layers))
    return WidthSpace(layers, 1, space.input_dim, space.output_dim)


def retrain_from_scratch(
    space: WidthSpace, width: NetworkWidth, dataset: Dataset, config: TrainConfig
) -> tuple[SupernetWeights, float]:
    """Fresh network of exactly ``width``, trained on the train split; returns test accuracy."""
    sub = standalone_space(space, width)
    weights = init_supernet(sub, config.seed)
    full = sub.full_width()
    counters = UpdateCounters.zeros(sub)
    _train_loop(
        weights,
        dataset.subset("train"),
        config,
        lambda rng: full,
        Principle.UA,
        Strategy.PLAIN,
        None,
        counters,
    )
    return weights, accuracy_of(weights, full, PathSide.LEFT, dataset.subset("test"))


# Weight file: b"BCNW", u32 version, u32 header length, JSON header, float32 LE data.
MAGIC = b"BCNW"
FORMAT_VERSION = 1


def dump_weights(weights: SupernetWeights, meta: dict | None = None) -> bytes:
    header = {"space": weights.space.to_dict(), "meta": meta or {}}
    blob = json.dumps(header, sort_keys=True).encode()
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<II", FORMAT_VERSION, len(blob)))
    buf.write(blob)
    for p in weights.params():
        buf.write(np.ascontiguousarray(p, dtype="<f4").tobytes())
    return buf.getvalue()


def load_weights_bytes(data: bytes) -> tuple[SupernetWeights, dict]:
    if data[:4] != MAGIC:
        raise ValueError("not a weights file (bad magic)")
    version, n = struct.unpack_from("<II", data, 4)
    if version != FORMAT_VERSION:
        raise ValueError(f"unsupported weights format version {version}")
    header = json.loads(data[12 : 12 + n])
    space = WidthSpace.from_dict(header["space"])
    template = init_supernet(space, 0)
    offset = 12 + n
    arrays = []
    for p in template.params():
        count = p.size
        chunk = np.frombuffer(data, dtype="<f4", count=count, offset=offset)
        arrays.append(chunk.reshape(p.shape).astype(np.float64))
        offset += 4 * count
    if offset != len(data):
        raise ValueError("weights file has trailing or missing bytes")
    return SupernetWeights(space, arrays[0::2], arrays[1::2]), header["meta"]


def save_weights(path: str | Path, weights: SupernetWeights, meta: dict | None = None) -> None:
    Path(path).write_bytes(dump_weights(weights, meta))


def load_weights(path: str | Path) -> tuple[SupernetWeights, dict]:
    return load_weights_bytes(Path(path).read_bytes())
