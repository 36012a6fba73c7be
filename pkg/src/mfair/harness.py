"""End-to-end experiment runs: ingest, recommend, measure, re-rank, measure again, report.

The table "baseline" column is produced by a separate run with ``eps=0``
(geographic-only re-ranking); :func:`compare_runs` lines two runs up.
"""

from __future__ import annotations

import csv
import json
import logging
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any

from . import dataset as ds
from .metrics import FAMILIES, BiasReport, evaluate, format_cell
from .mitigation import MitigationConfig, mitigate_two_phase, phase_sequence
from .recommenders import ALGORITHMS, RecommendationList, recommend, write_lists
from .testkit import SynthSpec, synth_dataset

logger = logging.getLogger(__name__)

TARGET_ALIASES = {"item": "item_based", "rating": "rating_based", "item_based": "item_based",
                  "rating_based": "rating_based"}
REPORT_FORMATS = ("json", "csv", "plotdata")


class StageError(RuntimeError):
    """A pipeline stage failed; ``stage`` names it."""

    def __init__(self, stage: str, cause: BaseException | str):
        self.stage = stage
        self.cause = cause
        super().__init__(f"stage '{stage}' failed: {cause}")


class ConfigError(ValueError):
    pass


@dataclass
class ExperimentConfig:
    dataset: str | None = None
    format: str = "generic_tsv"
    continents: str | None = None
    algorithm: str = "mostpop"
    target_mode: str = "item_based"
    n: int = 150
    k: int = 20
    eps: float = 1.0
    seed: int = 0
    phases: str = "both"
    out: str | None = None
    train_fraction: float = 0.8
    min_ratings: int | None = None
    synth: SynthSpec | None = None
    params: dict = field(default_factory=dict)
    recompute: str = "full"
    aggregation: str = "per_user"

    def __post_init__(self):
        self.target_mode = TARGET_ALIASES.get(self.target_mode, self.target_mode)
        if self.target_mode not in ("item_based", "rating_based"):
            raise ConfigError(f"unknown target mode {self.target_mode!r}")
        if self.algorithm not in ALGORITHMS:
            raise ConfigError(f"unknown algorithm {self.algorithm!r}; choose from {ALGORITHMS}")
        if not 1 <= self.k < self.n:
            raise ConfigError(f"need 1 <= k < n, got k={self.k}, n={self.n}")
        if self.dataset is None and self.synth is None:
            raise ConfigError("either a dataset path or a synthetic spec is required")
        if self.dataset is not None:
            if not Path(self.dataset).is_file():
                raise ConfigError(f"dataset file not found: {self.dataset}")
            if self.continents is None or not Path(self.continents).is_file():
                raise ConfigError(f"continent map not found: {self.continents}")

    def mitigation(self) -> MitigationConfig:
        return MitigationConfig(k=self.k, n=self.n, eps=self.eps, target_mode=self.target_mode,
                                phases=self.phases, recompute=self.recompute, aggregation=self.aggregation)

    def to_dict(self) -> dict:
        d = asdict(self)
        if self.synth is not None:
            d["synth"] = asdict(self.synth)
            d["synth"]["continent_weights"] = dict(self.synth.continent_weights)
            d["synth"]["rating_scale"] = list(self.synth.rating_scale)
        return d

    def signature(self) -> dict:
        """Fields that must agree for two runs to be comparable: data, split and k."""
        d = self.to_dict()
        keys = ("dataset", "format", "continents", "synth", "min_ratings", "train_fraction", "seed", "k")
        return {key: d[key] for key in keys}


@dataclass
class RunReport:
    config: dict
    vanilla: BiasReport
    mitigated: dict[str, BiasReport]
    swaps: dict[str, int]
    penalty_applications: dict[str, int]
    counts: dict[str, int] = field(default_factory=dict)
    timings: dict[str, float] = field(default_factory=dict)

    @property
    def algorithm(self) -> str:
        return self.config.get("algorithm", "")

    @property
    def swaps_applied(self) -> int:
        return sum(self.swaps.values())

    @property
    def final(self) -> BiasReport:
        """Report after the last phase (the vanilla report when no phase ran)."""
        if not self.mitigated:
            return self.vanilla
        order = [p for p in phase_sequence(self.config.get("phases", "both")) if p in self.mitigated]
        return self.mitigated[order[-1]] if order else self.mitigated[list(self.mitigated)[-1]]

    def to_dict(self) -> dict:
        # timings are left out so repeated runs serialise identically
        return {
            "config": self.config,
            "counts": self.counts,
            "vanilla": self.vanilla.to_dict(),
            "mitigated": {p: r.to_dict() for p, r in self.mitigated.items()},
            "swaps": self.swaps,
            "penalty_applications": self.penalty_applications,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "RunReport":
        return cls(
            config=d["config"],
            vanilla=BiasReport.from_dict(d["vanilla"]),
            mitigated={p: BiasReport.from_dict(r) for p, r in d["mitigated"].items()},
            swaps={p: int(v) for p, v in d["swaps"].items()},
            penalty_applications={p: int(v) for p, v in d["penalty_applications"].items()},
            counts=d.get("counts", {}),
        )


def load_report(path) -> RunReport:
    with open(path, encoding="utf-8") as fh:
        return RunReport.from_dict(json.load(fh))


class _Stages:
    def __init__(self):
        self.timings: dict[str, float] = {}

    def run(self, name, fn, *args, **kwargs):
        start = time.perf_counter()
        try:
            out = fn(*args, **kwargs)
        except StageError:
            raise
        except Exception as exc:
            raise StageError(name, exc) from exc
        self.timings[name] = self.timings.get(name, 0.0) + time.perf_counter() - start
        return out


def prepare_data(config: ExperimentConfig):
    """Ingest stage: returns ``(train, test, catalog, targets)``."""
    if config.dataset is not None:
        data = ds.parse_interactions(config.dataset, config.format)
        continents = ds.load_continent_map(config.continents)
    else:
        data, continents = synth_dataset(config.synth)
    if config.min_ratings:
        data = ds.filter_min_activity(data, config.min_ratings)
    train, test = ds.split_train_test(data, config.train_fraction, config.seed)
    catalog = ds.build_catalog(train, continents)
    targets = ds.build_targets(train, catalog, config.target_mode)
    return train, test, catalog, targets


def run_pipeline(train, test, catalog, targets, config: ExperimentConfig, stages: _Stages | None = None,
                 lists: list[RecommendationList] | None = None):
    """Recommend (unless ``lists`` is given), measure, mitigate, measure.

    Returns ``(report, vanilla_lists, mitigated_lists)``.
    """
    stages = stages or _Stages()
    if lists is None:
        lists = stages.run("recommend", recommend, config.algorithm, train, catalog, config.n, config.seed,
                           **config.params)
    vanilla = stages.run("evaluate", evaluate, lists, catalog, targets, test, config.k, config.aggregation)
    result = stages.run("mitigate", mitigate_two_phase, lists, catalog, targets, config.mitigation())
    mitigated, swaps, penalties = {}, {}, {}
    for phase in result.phases:
        mitigated[phase.bias_type] = stages.run("evaluate", evaluate, phase.lists, catalog, targets, test,
                                                config.k, config.aggregation)
        swaps[phase.bias_type] = len(phase.applied)
        penalties[phase.bias_type] = phase.penalty_applications
    counts = {"train": len(train) if train is not None else 0, "test": len(test) if test is not None else 0, "catalog": len(catalog),
              "users": len(lists)}
    report = RunReport(config.to_dict(), vanilla, mitigated, swaps, penalties, counts, stages.timings)
    return report, lists, result.lists


def run_experiment(config: ExperimentConfig) -> RunReport:
    """Run the whole pipeline; writes reports and lists when ``config.out`` is set."""
    stages = _Stages()
    train, test, catalog, targets = stages.run("ingest", prepare_data, config)
    report, vanilla, mitigated = run_pipeline(train, test, catalog, targets, config, stages)
    if config.out:
        out = Path(config.out)
        stages.run("report", _write_run, report, out, vanilla, mitigated)
    return report


def _write_run(report: RunReport, out: Path, vanilla, mitigated) -> None:
    out.mkdir(parents=True, exist_ok=True)
    for fmt in REPORT_FORMATS:
        emit_report(report, fmt, out)
    write_lists(vanilla, out / "lists_vanilla.tsv")
    write_lists(mitigated, out / "lists_mitigated.tsv")
    with open(out / "timings.json", "w", encoding="utf-8") as fh:
        json.dump(report.timings, fh, indent=2, sort_keys=True)


def _csv_rows(report: RunReport):
    final = report.final.rows()
    for (metric, group, v), (_, _, m) in zip(report.vanilla.rows(), final):
        yield metric, group, v, m


def emit_report(report: RunReport, fmt: str, out_dir) -> Path:
    """Write ``report.json``, ``report.csv`` or ``plotdata.csv`` into ``out_dir``.

    CSV bias cells are percentages with 2 decimals, NDCG cells raw with 3.
    Plot data is long-form with raw fractions, one row per stage.
    """
    out_dir = Path(out_dir)
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
        if fmt == "json":
            path = out_dir / "report.json"
            with open(path, "w", encoding="utf-8") as fh:
                json.dump(report.to_dict(), fh, indent=2, sort_keys=True)
                fh.write("\n")
        elif fmt == "csv":
            path = out_dir / "report.csv"
            with open(path, "w", newline="", encoding="utf-8") as fh:
                w = csv.writer(fh, lineterminator="\n")
                w.writerow(["algorithm", "metric", "group", "vanilla", "mitigated"])
                for metric, group, v, m in _csv_rows(report):
                    w.writerow([report.algorithm, metric, group, format_cell(metric, v), format_cell(metric, m)])
        elif fmt == "plotdata":
            path = out_dir / "plotdata.csv"
            stages = [("vanilla", report.vanilla)] + list(report.mitigated.items())
            with open(path, "w", newline="", encoding="utf-8") as fh:
                w = csv.writer(fh, lineterminator="\n")
                w.writerow(["algorithm", "target_mode", "metric", "group", "stage", "value"])
                for stage, rep in stages:
                    for metric, group, value in rep.rows():
                        w.writerow([report.algorithm, rep.target_mode, metric, group, stage, repr(value)])
        else:
            raise ConfigError(f"unknown report format {fmt!r}; choose from {REPORT_FORMATS}")
    except OSError as exc:
        raise StageError("report", exc) from exc
    return path


def read_report_csv(path) -> dict[tuple[str, str], tuple[float, float]]:
    """``(metric, group) -> (vanilla, mitigated)`` as fractions (bias) or raw (NDCG)."""
    out = {}
    with open(path, newline="", encoding="utf-8") as fh:
        for row in csv.DictReader(fh):
            scale = 1.0 if row["metric"] == "NDCG" else 0.01
            out[row["metric"], row["group"]] = (float(row["vanilla"]) * scale, float(row["mitigated"]) * scale)
    return out


@dataclass(frozen=True)
class ComparisonRow:
    metric: str
    a: float
    b: float
    delta: float
    improved: bool


def compare_runs(a: RunReport, b: RunReport) -> list[ComparisonRow]:
    """Final-stage Total BS per family and NDCG, ``delta = b - a``.

    ``improved`` follows the tables' bold convention: improvement or no
    change (lower bias, higher NDCG).
    """
    sig_a, sig_b = _signature(a.config), _signature(b.config)
    if sig_a != sig_b:
        diff = sorted(key for key in sig_a if sig_a[key] != sig_b.get(key))
        raise ConfigError(f"runs are not comparable; differing settings: {', '.join(diff)}")
    fa, fb = a.final, b.final
    rows = []
    for fam in FAMILIES:
        va, vb = fa.totals[fam], fb.totals[fam]
        rows.append(ComparisonRow(f"{fam} Total BS", va, vb, vb - va, vb - va <= 0))
    if fa.ndcg is not None and fb.ndcg is not None:
        rows.append(ComparisonRow("NDCG", fa.ndcg, fb.ndcg, fb.ndcg - fa.ndcg, fb.ndcg - fa.ndcg >= 0))
    return rows


def _signature(config: dict[str, Any]) -> dict:
    keys = ("dataset", "format", "continents", "synth", "min_ratings", "train_fraction", "seed", "k")
    return {key: config.get(key) for key in keys}


def write_comparison(rows: list[ComparisonRow], path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["metric", "a", "b", "delta", "improved"])
        for r in rows:
            cell = (lambda v: f"{v:.3f}") if r.metric == "NDCG" else (lambda v: format_cell("", v))
            w.writerow([r.metric, cell(r.a), cell(r.b), cell(r.delta), int(r.improved)])
