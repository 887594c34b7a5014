"""Command-line entry point: train, search, retrain, analyze, plot.

Every artifact is written with sorted keys and fixed float formatting and
carries the config hash and seed, so identical invocations reproduce
identical files.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import io
import json
import logging
import sys
from dataclasses import asdict, dataclass, fields, replace
from pathlib import Path
from typing import Any, Sequence

import numpy as np

from . import oracle
from .evosearch import EvoConfig, evolve, supernet_evaluator
from .experiments import DatasetParams, ground_truth_accuracies, supernet_scores
from .priorsampler import (
    PipsConfig,
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
    TrainConfig,
    evaluate_width,
    init_supernet,
    load_weights,
    retrain_from_scratch,
    save_weights,
    train_supernet,
)
from .widthspace import (
    LayerSpec,
    NetworkWidth,
    WidthSpace,
    build_flops_table,
    cardinality_bc,
    cardinality_ua,
    space_size,
    uniform_scale_width,
)

log = logging.getLogger(__name__)

EXHAUSTIVE_LIMIT = 10**5


class CliError(Exception):
    pass


def _sub(cls, data: dict | None):
    data = dict(data or {})
    known = {f.name for f in fields(cls)}
    unknown = sorted(set(data) - known)
    if unknown:
        raise CliError(f"unknown {cls.__name__} keys: {unknown}")
    return cls(**data)


@dataclass(frozen=True)
class AnalyzeOptions:
    rank_fidelity: bool = True
    retrain_seeds: tuple[int, ...] = (0,)
    exhaustive_limit: int = EXHAUSTIVE_LIMIT
    histogram_bins: int = 10

    def __post_init__(self) -> None:
        object.__setattr__(self, "retrain_seeds", tuple(int(s) for s in self.retrain_seeds))
        if not self.retrain_seeds or self.exhaustive_limit < 1 or self.histogram_bins < 1:
            raise ValueError("analyze options need retrain seeds, a positive limit and positive bin count")


@dataclass(frozen=True)
class RunConfig:
    layers: tuple[LayerSpec, ...]
    group_count: int
    dataset: DatasetParams | None = None
    dataset_csv: str | None = None
    train: TrainConfig = TrainConfig()
    retrain: TrainConfig = TrainConfig()
    pips: PipsConfig = PipsConfig()
    evo: EvoConfig = EvoConfig()
    budget_fraction: float | None = 0.5
    flops_budget: float | None = None
    principle: str = "BC"
    strategy: str = "complementary"
    init_population: str = "prior"
    seed: int = 0
    out_dir: str = "out"
    analyze: AnalyzeOptions = AnalyzeOptions()

    def __post_init__(self) -> None:
        if (self.dataset is None) == (self.dataset_csv is None):
            raise ValueError("give exactly one of dataset and dataset_csv")
        if (self.budget_fraction is None) == (self.flops_budget is None):
            raise ValueError("give exactly one of budget_fraction and flops_budget")
        if self.budget_fraction is not None and not 0 < self.budget_fraction <= 1:
            raise ValueError("budget_fraction must lie in (0, 1]")
        if self.flops_budget is not None and self.flops_budget <= 0:
            raise ValueError("flops_budget must be positive")
        Principle(self.principle)
        Strategy(self.strategy)
        if self.init_population not in ("prior", "random"):
            raise ValueError("init_population must be 'prior' or 'random'")
        if self.seed < 0:
            raise ValueError("seed must be nonnegative")

    @classmethod
    def from_dict(cls, data: dict, seed: int | None = None, out_dir: str | None = None) -> RunConfig:
        data = dict(data)
        if seed is not None:
            data["seed"] = seed
        if out_dir is not None:
            data["out_dir"] = out_dir
        space = data.pop("space", None)
        if not isinstance(space, dict) or "layers" not in space or "group_count" not in space:
            raise CliError("config needs space.layers and space.group_count")
        layers = tuple(
            LayerSpec(int(l)) if isinstance(l, (int, float)) else _sub(LayerSpec, l) for l in space["layers"]
        )
        known = {f.name for f in fields(cls)} - {"layers", "group_count"}
        unknown = sorted(set(data) - known)
        if unknown:
            raise CliError(f"unknown config keys: {unknown}")
        kwargs: dict[str, Any] = {k: v for k, v in data.items() if k not in ("dataset", "train", "retrain", "pips", "evo", "analyze")}
        if "dataset" in data and "dataset_csv" not in data:
            kwargs["dataset"] = _sub(DatasetParams, data["dataset"])
        elif "dataset_csv" not in data:
            kwargs["dataset"] = DatasetParams()
        for key, sub in (("train", TrainConfig), ("retrain", TrainConfig), ("pips", PipsConfig), ("evo", EvoConfig), ("analyze", AnalyzeOptions)):
            if key in data:
                kwargs[key] = _sub(sub, data[key])
        if "flops_budget" in data and "budget_fraction" not in data:
            kwargs["budget_fraction"] = None
        return cls(layers=layers, group_count=int(space["group_count"]), **kwargs)

    def canonical(self) -> dict:
        out = asdict(self)
        out.pop("out_dir")
        return out

    @property
    def config_hash(self) -> str:
        text = json.dumps(self.canonical(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(text.encode()).hexdigest()[:16]

    def provenance(self) -> dict:
        return {"config_hash": self.config_hash, "seed": self.seed}


# --- shared plumbing -------------------------------------------------------------


def load_config(path: str, seed: int | None, out_dir: str | None) -> RunConfig:
    try:
        with open(path) as fh:
            data = json.load(fh)
    except OSError as exc:
        raise CliError(f"cannot read config {path}: {exc.strerror}") from None
    except json.JSONDecodeError as exc:
        raise CliError(f"config {path} is not valid JSON: {exc.msg} at line {exc.lineno}") from None
    if not isinstance(data, dict):
        raise CliError("config must be a JSON object")
    return RunConfig.from_dict(data, seed, out_dir)


def load_dataset(cfg: RunConfig) -> Dataset:
    if cfg.dataset_csv is not None:
        data = Dataset.from_csv(cfg.dataset_csv)
        return data if data.split is not None else data.with_splits(cfg.seed)
    return cfg.dataset.build(cfg.seed)


def build_space(cfg: RunConfig, data: Dataset) -> WidthSpace:
    return WidthSpace(cfg.layers, cfg.group_count, data.input_dim, data.num_classes)


def resolve_budget(cfg: RunConfig, table) -> float:
    if cfg.flops_budget is not None:
        return float(cfg.flops_budget)
    return cfg.budget_fraction * table.full_flops()


def _json_text(payload: dict) -> str:
    return json.dumps(payload, sort_keys=True, indent=2) + "\n"


def write_json(path: Path, payload: dict, cfg: RunConfig) -> Path:
    path.write_text(_json_text({**payload, "provenance": cfg.provenance()}))
    return path


def read_json(path: Path, what: str) -> dict:
    if not path.exists():
        raise CliError(f"missing {what}: {path}")
    try:
        return json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise CliError(f"{path} is not valid JSON: {exc.msg}") from None


def _comment(cfg: RunConfig) -> str:
    return f"config_hash={cfg.config_hash} seed={cfg.seed}"


def _out(cfg: RunConfig) -> Path:
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _load_trained(cfg: RunConfig, out: Path):
    weights_path = out / "weights.bcnw"
    if not weights_path.exists():
        raise CliError(f"missing supernet weights: {weights_path} (run train first)")
    weights, _ = load_weights(weights_path)
    ledger = LossLedger.from_dict(read_json(out / "ledger.json", "loss ledger")["ledger"])
    return weights, ledger


# --- commands --------------------------------------------------------------------


def cmd_train(cfg: RunConfig) -> list[Path]:
    out = _out(cfg)
    data = load_dataset(cfg)
    space = build_space(cfg, data)
    weights, ledger, counters = train_supernet(
        init_supernet(space, cfg.seed), data, replace(cfg.train, seed=cfg.seed), cfg.strategy, cfg.principle
    )
    save_weights(out / "weights.bcnw", weights, {"principle": cfg.principle, "strategy": cfg.strategy, **cfg.provenance()})
    report = counters.to_dict()
    report["principle"] = cfg.principle
    report["strategy"] = cfg.strategy
    # channel-usage profile implied by the assignment rule, for comparison with the counts
    report["cardinality_profile"] = [
        oracle.enumerate_cardinalities(l, cfg.principle) for l in space.max_channels
    ]
    return [
        out / "weights.bcnw",
        write_json(out / "ledger.json", {"ledger": ledger.to_dict()}, cfg),
        write_json(out / "counters.json", report, cfg),
    ]


def cmd_search(cfg: RunConfig) -> list[Path]:
    out = _out(cfg)
    weights, ledger = _load_trained(cfg, out)
    data = load_dataset(cfg)
    space = build_space(cfg, data)
    if weights.space != space:
        raise CliError("weights were trained for a different space than the config describes")
    table = build_flops_table(space)
    budget = resolve_budget(cfg, table)
    size = cfg.evo.population_size
    written = []
    if cfg.init_population == "prior":
        result = optimize_distribution(potential_errors(ledger, space), table, budget, replace(cfg.pips, seed=cfg.seed))
        written.append(
            write_json(
                out / "prior.json",
                {
                    "probabilities": result.distribution.probs.tolist(),
                    "objective": result.objective,
                    "constraint_residual": result.constraint_residual,
                    "iterations": result.iterations,
                },
                cfg,
            )
        )
        pop = initial_population(result.distribution, space, table, budget, size, seed=cfg.seed)
    else:
        pop = random_population(space, table, budget, size, seed=cfg.seed)
    written.append(
        write_json(
            out / "initial_population.json",
            {"init": cfg.init_population, "budget": budget, "genomes": [list(i.genome) for i in pop]},
            cfg,
        )
    )
    evaluator = supernet_evaluator(weights, data.subset("val"), cfg.principle)
    best, history = evolve(evaluator, space, table, budget, pop, replace(cfg.evo, seed=cfg.seed))
    (out / "search_log.csv").write_text(history.to_csv(_comment(cfg)))
    written.append(out / "search_log.csv")
    width = space.from_groups(best.genome)
    uniform = uniform_scale_width(space, budget, table)
    written.append(
        write_json(
            out / "best_width.json",
            {
                "channels": list(width.channels),
                "groups": list(best.genome),
                "estimated_accuracy": best.accuracy,
                "flops": best.flops,
                "budget": budget,
                "full_flops": table.full_flops(),
                "max_channels": list(space.max_channels),
                "uniform_channels": list(uniform.channels),
                "search_log_sha256": history.digest(),
            },
            cfg,
        )
    )
    return written


def _read_width(spec: str | None, cfg: RunConfig, space: WidthSpace, out: Path) -> tuple[str, NetworkWidth]:
    table = build_flops_table(space)
    if spec in (None, "best"):
        data = read_json(out / "best_width.json", "best width")
        return "best", NetworkWidth(tuple(data["channels"]))
    if spec == "full":
        return "full", space.full_width()
    if spec == "uniform":
        return "uniform", uniform_scale_width(space, resolve_budget(cfg, table), table)
    path = Path(spec)
    data = read_json(path, "width file")
    channels = data["channels"] if isinstance(data, dict) else data
    if not isinstance(channels, list) or not all(isinstance(c, int) for c in channels):
        raise CliError(f"{path}: expected a channel list")
    return path.stem, NetworkWidth(tuple(channels))


def cmd_retrain(cfg: RunConfig, width_spec: str | None) -> list[Path]:
    out = _out(cfg)
    data = load_dataset(cfg)
    space = build_space(cfg, data)
    name, width = _read_width(width_spec, cfg, space, out)
    space.validate(width)
    table = build_flops_table(space)
    weights, acc = retrain_from_scratch(space, width, data, replace(cfg.retrain, seed=cfg.seed))
    params = int(sum(p.size for p in weights.params()))
    return [
        write_json(
            out / f"retrain_{name}.json",
            {
                "width": list(width.channels),
                "test_accuracy": acc,
                "flops": table.flops_of(width),
                "flops_ratio": table.flops_of(width) / table.full_flops(),
                "params": params,
            },
            cfg,
        )
    ]


def _histogram_csv(prior: list[float], rand: list[float], bins: int, cfg: RunConfig) -> str:
    lo, hi = min(prior + rand), max(prior + rand)
    if hi == lo:
        hi = lo + 1e-9
    edges = np.linspace(lo, hi, bins + 1)
    buf = io.StringIO()
    buf.write(f"# {_comment(cfg)}\n")
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["series", "bin_low", "bin_high", "count"])
    for name, values in (("prior", prior), ("random", rand)):
        counts, _ = np.histogram(values, bins=edges)
        for k, c in enumerate(counts):
            writer.writerow([name, repr(float(edges[k])), repr(float(edges[k + 1])), int(c)])
    writer.writerow([])
    writer.writerow(["series", "index", "accuracy"])
    for name, values in (("prior", prior), ("random", rand)):
        for k, v in enumerate(values):
            writer.writerow([name, k, repr(float(v))])
    return buf.getvalue()


def cmd_analyze(cfg: RunConfig) -> list[Path]:
    out = _out(cfg)
    data = load_dataset(cfg)
    space = build_space(cfg, data)
    written = []

    tables = {}
    for l in sorted(set(space.max_channels)):
        tables[str(l)] = [
            {"c": c, "ua": cardinality_ua(l, c), "bc": cardinality_bc(l, c)} for c in range(1, l + 1)
        ]
    written.append(write_json(out / "cardinality.json", {"tables": tables}, cfg))

    counters_path = out / "counters.json"
    if counters_path.exists():
        counters = read_json(counters_path, "counter report")
        audit = {
            "principle": counters["principle"],
            "strategy": counters["strategy"],
            "raw_spread": counters["raw_spread"],
            "audited_spread": counters["audited_spread"],
            "fair": all(s == 0 for s in counters["audited_spread"]),
        }
        written.append(write_json(out / "fairness.json", audit, cfg))

    if cfg.analyze.rank_fidelity:
        size = space_size(space)
        if size > cfg.analyze.exhaustive_limit:
            raise CliError(
                f"rank fidelity needs exhaustive evaluation; space has {size} widths, limit is {cfg.analyze.exhaustive_limit}"
            )
        truth = ground_truth_accuracies(space, data, cfg.retrain, cfg.analyze.retrain_seeds, cfg.analyze.exhaustive_limit)
        genomes = sorted(truth)
        gt = [truth[g] for g in genomes]
        taus, estimates = {}, {}
        for principle, strategy in (("BC", "complementary"), ("UA", "plain")):
            weights, _, _ = train_supernet(
                init_supernet(space, cfg.seed), data, replace(cfg.train, seed=cfg.seed), strategy, principle
            )
            est = supernet_scores(weights, data.subset("val"), principle)
            taus[principle] = oracle.kendall_tau([est[g] for g in genomes], gt)
            estimates[principle] = [est[g] for g in genomes]
        written.append(
            write_json(
                out / "rank_fidelity.json",
                {
                    "kendall_tau": taus,
                    "genomes": [list(g) for g in genomes],
                    "ground_truth": gt,
                    "estimates": estimates,
                    "retrain_seeds": list(cfg.analyze.retrain_seeds),
                },
                cfg,
            )
        )

    if (out / "weights.bcnw").exists():
        weights, ledger = _load_trained(cfg, out)
        table = build_flops_table(space)
        budget = resolve_budget(cfg, table)
        size = cfg.evo.population_size
        dist = optimize_distribution(potential_errors(ledger, space), table, budget, replace(cfg.pips, seed=cfg.seed)).distribution
        val = data.subset("val")
        score = lambda pop: [evaluate_width(weights, space.from_groups(i.genome), val, cfg.principle) for i in pop]
        prior = score(initial_population(dist, space, table, budget, size, seed=cfg.seed))
        rand = score(random_population(space, table, budget, size, seed=cfg.seed))
        (out / "population_histogram.csv").write_text(_histogram_csv(prior, rand, cfg.analyze.histogram_bins, cfg))
        written.append(out / "population_histogram.csv")
    return written


def _read_histogram(path: Path) -> dict[str, list[float]]:
    if not path.exists():
        raise CliError(f"missing histogram report: {path}")
    series: dict[str, list[float]] = {}
    rows = [r for r in csv.reader(path.read_text().splitlines()) if r and not r[0].startswith("#")]
    try:
        start = rows.index(["series", "index", "accuracy"]) + 1
        for name, _, acc in rows[start:]:
            series.setdefault(name, []).append(float(acc))
    except ValueError:
        raise CliError(f"{path}: malformed histogram report") from None
    if not series or any(len(v) == 0 for v in series.values()):
        raise CliError(f"{path}: empty series")
    return series


def _save_svg(fig, path: Path, cfg: RunConfig) -> None:
    import matplotlib.pyplot as plt

    fig.savefig(path, format="svg", metadata={"Date": None, "Description": _comment(cfg)})
    plt.close(fig)


def _matplotlib():
    import matplotlib

    matplotlib.use("Agg")
    matplotlib.rcParams["svg.hashsalt"] = "widthsearch"
    matplotlib.rcParams["svg.fonttype"] = "none"
    import matplotlib.pyplot as plt

    return plt


def cmd_plot(cfg: RunConfig) -> list[Path]:
    out = _out(cfg)
    written = []
    hist_path = out / "population_histogram.csv"
    width_path = out / "best_width.json"
    if not hist_path.exists() and not width_path.exists():
        raise CliError(f"nothing to plot in {out}: need population_histogram.csv or best_width.json")
    plt = _matplotlib()
    if hist_path.exists():
        series = _read_histogram(hist_path)
        values = [v for s in series.values() for v in s]
        edges = np.linspace(min(values), max(values) if max(values) > min(values) else min(values) + 1e-9, cfg.analyze.histogram_bins + 1)
        fig, ax = plt.subplots(figsize=(5, 3.5))
        for name in sorted(series):
            ax.hist(series[name], bins=edges, alpha=0.6, label=name)
        ax.set_xlabel("supernet accuracy")
        ax.set_ylabel("widths")
        ax.legend()
        fig.tight_layout()
        _save_svg(fig, out / "population_histogram.svg", cfg)
        written.append(out / "population_histogram.svg")
    if width_path.exists():
        best = read_json(width_path, "best width")
        try:
            ratios = [c / m for c, m in zip(best["channels"], best["max_channels"], strict=True)]
        except (KeyError, TypeError, ValueError, ZeroDivisionError):
            raise CliError(f"{width_path}: malformed width report") from None
        if not ratios:
            raise CliError(f"{width_path}: empty width")
        fig, ax = plt.subplots(figsize=(5, 3.5))
        ax.bar(range(1, len(ratios) + 1), ratios)
        ax.set_ylim(0, 1.05)
        ax.set_xlabel("layer")
        ax.set_ylabel("retained width ratio")
        fig.tight_layout()
        _save_svg(fig, out / "width_ratio.svg", cfg)
        written.append(out / "width_ratio.svg")
    return written


# --- entry point -----------------------------------------------------------------


class _Parser(argparse.ArgumentParser):
    def error(self, message: str) -> None:  # single-line JSON instead of usage text
        print(json.dumps({"error": "usage", "message": message}), file=sys.stderr)
        raise SystemExit(2)


def build_arg_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="widthsearch", description="Network width search with a bilaterally coupled supernet.")
    parser.add_argument("command", choices=["train", "search", "retrain", "analyze", "plot"])
    parser.add_argument("--config", required=True, help="Path to the JSON run config.")
    parser.add_argument("--out", help="Output directory (overrides out_dir in the config).")
    parser.add_argument("--seed", type=int, help="Master seed (overrides the config).")
    parser.add_argument("--width", help="Width for retrain: a JSON file, or best, full or uniform.")
    parser.add_argument("-v", "--verbose", action="store_true", help="Log progress to stderr.")
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    args = build_arg_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args.config, args.seed, args.out)
        if args.command == "train":
            written = cmd_train(cfg)
        elif args.command == "search":
            written = cmd_search(cfg)
        elif args.command == "retrain":
            written = cmd_retrain(cfg, args.width)
        elif args.command == "analyze":
            written = cmd_analyze(cfg)
        else:
            written = cmd_plot(cfg)
    except (CliError, ValueError, OSError, RuntimeError, FloatingPointError, KeyError, TypeError) as exc:
        print(json.dumps({"error": type(exc).__name__, "message": str(exc)}), file=sys.stderr)
        return 1
    for path in written:
        print(path)
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
