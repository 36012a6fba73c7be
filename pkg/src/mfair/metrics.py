"""Visibility and exposure bias for continents and popularity groups, plus NDCG.

Bias values are ``actual share - target share``: positive means the group is
over-represented in the top-k.  Continent shares are computed per user and
averaged over users (``aggregation="per_user"``); ``"pooled"`` divides the
summed counts instead.  Popularity shares normalise each group's mass by the
group's catalog size before normalising across groups.

The per-user row helpers are shared with the re-ranker so both compute the
same floating point values.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from typing import Iterable, Literal, Mapping, Sequence

import numpy as np

from .dataset import CONTINENTS, GROUPS, InteractionSet, ItemCatalog, TargetDistribution
from .recommenders import RecommendationList

Aggregation = Literal["per_user", "pooled"]


class MetricError(ValueError):
    pass


@dataclass(frozen=True)
class BiasValue:
    group: str
    value: float


def discount(position: int) -> float:
    """Exposure weight of a 1-indexed position."""
    return 1.0 / math.log2(1 + position)


def position_weights(k: int, exposure: bool) -> np.ndarray:
    if exposure:
        return 1.0 / np.log2(np.arange(2, k + 2))
    return np.ones(k)


def check_lengths(lists: Sequence[RecommendationList], k: int) -> None:
    if k < 1:
        raise MetricError("k must be >= 1")
    if not lists:
        raise MetricError("no recommendation lists")
    short = min(len(r) for r in lists)
    if short < k:
        raise MetricError(f"k={k} exceeds the shortest list ({short} entries)")


def continent_keys(target: Mapping[str, float]) -> tuple[str, ...]:
    return tuple(c for c in CONTINENTS if c in target) + tuple(sorted(set(target) - set(CONTINENTS)))


def group_keys(target: Mapping[str, float]) -> tuple[str, ...]:
    return tuple(g for g in GROUPS if g in target)


def continent_row(items: Sequence, catalog: ItemCatalog, col: Mapping[str, int], weights: np.ndarray) -> np.ndarray:
    """Continent mass of one user's top-k; a multi-continent item counts fully for each."""
    row = np.zeros(len(col))
    for item, w in zip(items, weights):
        for c in catalog[item].continents:
            try:
                row[col[c]] += w
            except KeyError:
                raise MetricError(f"continent {c} of item {item!r} has no target") from None
    return row


def group_row(items: Sequence, catalog: ItemCatalog, col: Mapping[str, int], weights: np.ndarray) -> np.ndarray:
    row = np.zeros(len(col))
    for item, w in zip(items, weights):
        g = catalog[item].group
        if g in col:
            row[col[g]] += w
        else:
            raise MetricError(f"group {g} of item {item!r} has no target")
    return row


def continent_rows(lists, catalog, keys, k, exposure=False) -> np.ndarray:
    col = {c: n for n, c in enumerate(keys)}
    w = position_weights(k, exposure)
    return np.array([continent_row(r.top(k), catalog, col, w) for r in lists]).reshape(len(lists), len(keys))


def group_rows(lists, catalog, keys, k, exposure=False) -> np.ndarray:
    col = {g: n for n, g in enumerate(keys)}
    w = position_weights(k, exposure)
    return np.array([group_row(r.top(k), catalog, col, w) for r in lists]).reshape(len(lists), len(keys))


def continent_shares(rows: np.ndarray, aggregation: Aggregation = "per_user") -> np.ndarray:
    """Aggregate per-user continent mass rows into one distribution."""
    if aggregation == "per_user":
        per_user = rows / rows.sum(axis=1, keepdims=True)
        return per_user.sum(axis=0) / rows.shape[0]
    if aggregation == "pooled":
        return rows.sum(axis=0) / rows.sum()
    raise MetricError(f"unknown aggregation {aggregation!r}")


def group_sizes(catalog: ItemCatalog, keys: Sequence[str], target: Mapping[str, float]) -> np.ndarray:
    sizes = catalog.group_sizes
    out = np.array([sizes.get(g, 0) for g in keys], dtype=float)
    for g, s in zip(keys, out):
        if s == 0 and target[g] > 0:
            raise MetricError(f"popularity group {g} is empty in the catalog")
    return out


def group_shares(rows: np.ndarray, sizes: np.ndarray) -> np.ndarray:
    """``V_g / sum V`` with ``V_g = mass_g / |group g|``; empty groups contribute 0."""
    mass = rows.sum(axis=0)
    v = np.divide(mass, sizes, out=np.zeros_like(mass), where=sizes > 0)
    return v / v.sum()


def _continent_target(target) -> dict[str, float]:
    return target.continent if isinstance(target, TargetDistribution) else dict(target)


def _group_target(target) -> dict[str, float]:
    return target.popgroup if isinstance(target, TargetDistribution) else dict(target)


def actual_continent(lists, catalog, target, k, exposure=False, aggregation: Aggregation = "per_user") -> dict:
    target = _continent_target(target)
    check_lengths(lists, k)
    keys = continent_keys(target)
    shares = continent_shares(continent_rows(lists, catalog, keys, k, exposure), aggregation)
    return dict(zip(keys, shares.tolist()))


def actual_popgroup(lists, catalog, target, k, exposure=False) -> dict:
    target = _group_target(target)
    check_lengths(lists, k)
    keys = group_keys(target)
    shares = group_shares(group_rows(lists, catalog, keys, k, exposure), group_sizes(catalog, keys, target))
    return dict(zip(keys, shares.tolist()))


def _bias(actual: Mapping[str, float], target: Mapping[str, float]) -> list[BiasValue]:
    return [BiasValue(g, actual[g] - target[g]) for g in actual]


def visibility_bias_continent(lists, catalog, target, k, aggregation: Aggregation = "per_user") -> list[BiasValue]:
    target = _continent_target(target)
    return _bias(actual_continent(lists, catalog, target, k, False, aggregation), target)


def exposure_bias_continent(lists, catalog, target, k, aggregation: Aggregation = "per_user") -> list[BiasValue]:
    target = _continent_target(target)
    return _bias(actual_continent(lists, catalog, target, k, True, aggregation), target)


def visibility_bias_popgroup(lists, catalog, target, k) -> list[BiasValue]:
    target = _group_target(target)
    return _bias(actual_popgroup(lists, catalog, target, k, False), target)


def exposure_bias_popgroup(lists, catalog, target, k) -> list[BiasValue]:
    target = _group_target(target)
    return _bias(actual_popgroup(lists, catalog, target, k, True), target)


def total_bs(values: Iterable[BiasValue]) -> float:
    return math.fsum(abs(v.value) for v in values)


def ndcg(lists: Sequence[RecommendationList], test: InteractionSet, k: int) -> float:
    """Binary-relevance NDCG@k averaged over users with test items.

    A user with test items but no list scores 0.
    """
    if k < 1:
        raise MetricError("k must be >= 1")
    relevant = test.profiles()
    if not relevant:
        raise MetricError("no user has test items")
    by_user = {r.user: r for r in lists}
    w = position_weights(k, True)
    total = 0.0
    for user in sorted(relevant, key=str):
        rel = relevant[user]
        rec = by_user.get(user)
        if rec is None:
            continue
        dcg = sum(w[p] for p, item in enumerate(rec.top(k)) if item in rel)
        idcg = w[: min(k, len(rel))].sum()
        total += dcg / idcg
    return total / len(relevant)


FAMILIES = ("continent_vb", "continent_eb", "pop_vb", "pop_eb")


@dataclass
class BiasReport:
    continent_vb: list[BiasValue]
    continent_eb: list[BiasValue]
    pop_vb: list[BiasValue]
    pop_eb: list[BiasValue]
    ndcg: float | None
    k: int
    target_mode: str = "item_based"
    totals: dict[str, float] = field(init=False)

    def __post_init__(self):
        self.totals = {f: total_bs(getattr(self, f)) for f in FAMILIES}

    def family(self, name: str) -> dict[str, float]:
        return {b.group: b.value for b in getattr(self, name)}

    def to_dict(self) -> dict:
        out = {"k": self.k, "target_mode": self.target_mode, "ndcg": self.ndcg}
        for f in FAMILIES:
            out[f] = self.family(f)
        out["total_bs"] = dict(self.totals)
        return out

    @classmethod
    def from_dict(cls, d: Mapping) -> "BiasReport":
        fams = {f: [BiasValue(g, float(v)) for g, v in d[f].items()] for f in FAMILIES}
        return cls(**fams, ndcg=d.get("ndcg"), k=int(d["k"]), target_mode=d.get("target_mode", "item_based"))

    def rows(self) -> list[tuple[str, str, float]]:
        """(metric, group, fraction) rows in table order; NDCG last."""
        suffix = "I" if self.target_mode == "item_based" else "R"
        label = {"continent_vb": f"continent_VB_{suffix}", "continent_eb": f"continent_EB_{suffix}",
                 "pop_vb": f"popularity_VB_{suffix}", "pop_eb": f"popularity_EB_{suffix}"}
        out = []
        for f in FAMILIES:
            out += [(label[f], b.group, b.value) for b in getattr(self, f)]
            out.append((label[f], "Total BS", self.totals[f]))
        if self.ndcg is not None:
            out.append(("NDCG", "all", self.ndcg))
        return out

    def write_json(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_dict(), fh, indent=2, sort_keys=True)

    def write_csv(self, path) -> None:
        """``metric,group,value``; bias in percent (2 dp), NDCG raw (3 dp)."""
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(["metric", "group", "value"])
            for metric, group, value in self.rows():
                w.writerow([metric, group, format_cell(metric, value)])


def format_cell(metric: str, value: float) -> str:
    if metric == "NDCG":
        return f"{value:.3f}"
    cell = f"{100.0 * value:.2f}"
    return "0.00" if cell == "-0.00" else cell


def evaluate(lists, catalog: ItemCatalog, targets: TargetDistribution, test: InteractionSet | None, k: int,
             aggregation: Aggregation = "per_user") -> BiasReport:
    """All four bias families plus NDCG (when ``test`` is given) at cut-off k."""
    return BiasReport(
        continent_vb=visibility_bias_continent(lists, catalog, targets, k, aggregation),
        continent_eb=exposure_bias_continent(lists, catalog, targets, k, aggregation),
        pop_vb=visibility_bias_popgroup(lists, catalog, targets, k),
        pop_eb=exposure_bias_popgroup(lists, catalog, targets, k),
        ndcg=None if test is None or len(test) == 0 else ndcg(lists, test, k),
        k=k,
        target_mode=targets.mode,
    )
