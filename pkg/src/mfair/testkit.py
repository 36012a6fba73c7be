"""Synthetic data, the eight-book toy scenario and an exhaustive re-ranking oracle."""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field
from typing import Hashable, Mapping, Sequence

import numpy as np

from .dataset import (
    CONTINENTS,
    GROUPS,
    CatalogEntry,
    InteractionSet,
    ItemCatalog,
    TargetDistribution,
    build_catalog,
    build_targets,
)
from .recommenders import RecommendationList, ScoredItem


class FixtureError(ValueError):
    pass


@dataclass(frozen=True)
class SynthSpec:
    n_users: int = 200
    n_items: int = 300
    continent_weights: Mapping[str, float] = field(
        default_factory=lambda: {"NA": 0.6, "EU": 0.25, "AS": 0.1, "OC": 0.05})
    popularity_skew: float = 1.0
    seed: int = 0
    ratings_per_user: int = 30
    rating_scale: tuple[int, int] = (1, 5)
    multi_continent_rate: float = 0.0

    def __post_init__(self):
        total = math.fsum(self.continent_weights.values())
        if abs(total - 1.0) > 1e-9 or any(w < 0 for w in self.continent_weights.values()):
            raise FixtureError("continent weights must be non-negative and sum to 1")
        if set(self.continent_weights) - set(CONTINENTS):
            raise FixtureError("unknown continent code in weights")
        if self.n_items < 10:
            raise FixtureError("n_items must be >= 10 so every popularity group is populated")
        if self.n_users < 1 or not 1 <= self.ratings_per_user <= self.n_items:
            raise FixtureError("need n_users >= 1 and 1 <= ratings_per_user <= n_items")
        if self.popularity_skew < 0:
            raise FixtureError("popularity_skew must be >= 0")


def synth_dataset(spec: SynthSpec) -> tuple[InteractionSet, dict[int, frozenset[str]]]:
    """Ratings with power-law item popularity and a small latent taste structure.

    Item ``i`` (0-based) is drawn with probability proportional to
    ``(i + 1) ** -popularity_skew``; each user rates ``ratings_per_user``
    distinct items.  Ratings come from a rank-2 model plus noise, rounded
    and clipped to the scale.
    """
    rng = np.random.default_rng(spec.seed)
    codes = list(spec.continent_weights)
    probs = np.array([spec.continent_weights[c] for c in codes])
    picks = rng.choice(len(codes), size=spec.n_items, p=probs)
    continents = {}
    for i, p in enumerate(picks):
        chosen = {codes[p]}
        if spec.multi_continent_rate > 0 and rng.random() < spec.multi_continent_rate:
            chosen.add(codes[rng.choice(len(codes), p=probs)])
        continents[i] = frozenset(chosen)

    weight = (np.arange(1, spec.n_items + 1, dtype=float)) ** -spec.popularity_skew
    weight /= weight.sum()
    lo, hi = spec.rating_scale
    pu = rng.normal(0, 1, (spec.n_users, 2))
    qi = rng.normal(0, 1, (spec.n_items, 2))
    records = []
    for u in range(spec.n_users):
        items = rng.choice(spec.n_items, size=spec.ratings_per_user, replace=False, p=weight)
        raw = (lo + hi) / 2 + 0.8 * (qi[items] @ pu[u]) + rng.normal(0, 0.5, len(items))
        for i, r in zip(items.tolist(), np.clip(np.rint(raw), lo, hi).tolist()):
            records.append((u, i, float(r)))
    return InteractionSet.from_records(records), continents


TOY_CONTINENTS = {
    "I1": "NA", "I2": "NA", "I6": "NA",
    "I3": "EU", "I7": "EU",
    "I4": "AF", "I5": "SA", "I8": "AS",
}
TOY_COUNTS = {"I1": 10, "I2": 12, "I6": 9, "I3": 4, "I7": 4, "I4": 2, "I5": 2, "I8": 3}
TOY_SCORES = (("I2", 0.95), ("I6", 0.90), ("I3", 0.85), ("I1", 0.80), ("I7", 0.62), ("I5", 0.60))
TOY_USER = "u4"
TOY_K = 4


@dataclass(frozen=True)
class ToyFixture:
    ratings: InteractionSet
    catalog: ItemCatalog
    targets: TargetDistribution
    vanilla: RecommendationList
    r2: tuple[str, ...]
    r3: tuple[str, ...]
    k: int = TOY_K

    @property
    def lists(self) -> list[RecommendationList]:
        return [self.vanilla.copy()]


def _toy_ratings() -> InteractionSet:
    others = [f"u{n}" for n in range(1, 14) if n != 4]
    records = []
    for item, count in TOY_COUNTS.items():
        raters = [TOY_USER] if item in ("I4", "I8") else []
        raters += others[: count - len(raters)]
        records += [(u, item, 4.0 if TOY_CONTINENTS[item] == "NA" else 3.0) for u in raters]
    return InteractionSet.from_records(records, split="train")


def toy_fixture() -> ToyFixture:
    """Eight books: NA x3, EU x2, AF/SA/AS x1; I3, I4, I5, I7, I8 in group 2.

    The vanilla top-4 of user ``u4`` holds three NA books and one EU book
    with I1 the weakest of them; I7 (EU) and I5 (SA, group 2) follow with
    nearly equal scores.  ``r2`` is the top-4 with I1 replaced by the fifth
    item, ``r3`` with I1 replaced by the sixth.  Targets are item-based.
    """
    ratings = _toy_ratings()
    continents = {i: frozenset({c}) for i, c in TOY_CONTINENTS.items()}
    catalog = build_catalog(ratings, continents, fractions=(3 / 8, 5 / 8))
    targets = build_targets(ratings, catalog, "item_based", allow_empty_groups=True)
    vanilla = RecommendationList(TOY_USER, [ScoredItem(i, s) for i, s in TOY_SCORES])
    return ToyFixture(
        ratings=ratings,
        catalog=catalog,
        targets=targets,
        vanilla=vanilla,
        r2=("I2", "I6", "I3", "I7"),
        r3=("I2", "I6", "I3", "I5"),
    )


def continent_deviation(items: Sequence, catalog: ItemCatalog, target: Mapping[str, float]) -> float:
    """Sum over target continents of |share - target| for one top-k set."""
    counts = {c: 0 for c in target}
    for item in items:
        for c in catalog[item].continents:
            counts[c] += 1
    total = sum(counts.values())
    return math.fsum(abs(counts[c] / total - target[c]) for c in target)


@dataclass(frozen=True)
class OracleResult:
    best_set: frozenset
    min_deviation: float
    min_loss: float
    vanilla_deviation: float


MAX_ORACLE_N = 12
MAX_ORACLE_K = 5


def brute_force_rerank(rec: RecommendationList, catalog: ItemCatalog, target, k: int,
                       tie_tol: float = 1e-12) -> OracleResult:
    """Exhaustively pick the top-k set with least continent deviation.

    Among sets within ``tie_tol`` of the least deviation the one with the
    highest total score wins; ``min_loss`` is the score given up relative to
    the vanilla top-k.
    """
    target = target.continent if isinstance(target, TargetDistribution) else dict(target)
    n = len(rec)
    if n > MAX_ORACLE_N or k > MAX_ORACLE_K:
        raise FixtureError(f"instance too large for enumeration (n={n}, k={k})")
    if k > n:
        raise FixtureError("k exceeds list length")
    scores = {e.item: e.score for e in rec.entries}
    items = sorted(scores, key=str)
    evaluated = []
    for combo in itertools.combinations(items, k):
        evaluated.append((continent_deviation(combo, catalog, target), math.fsum(scores[i] for i in combo), combo))
    best_dev = min(d for d, _, _ in evaluated)
    ties = [t for t in evaluated if t[0] <= best_dev + tie_tol]
    _, best_rel, best = max(ties, key=lambda t: (t[1], tuple(str(i) for i in t[2])))
    vanilla = rec.top(k)
    vanilla_rel = math.fsum(scores[i] for i in vanilla)
    return OracleResult(frozenset(best), best_dev, vanilla_rel - best_rel,
                        continent_deviation(vanilla, catalog, target))


def catalog_from(continents: Mapping[Hashable, frozenset[str]], groups: Mapping[Hashable, str],
                 popularity: Mapping[Hashable, int] | None = None) -> ItemCatalog:
    popularity = popularity or {}
    return ItemCatalog({i: CatalogEntry(i, frozenset(continents[i]), int(popularity.get(i, 0)), groups[i])
                        for i in continents})


def random_tiny_instance(rng: np.random.Generator, max_n: int = 12, max_k: int = 4, max_continents: int = 4):
    """A single-user list with random continents, groups, scores and targets.

    Returns ``(catalog, targets, rec, k)``.  Items are single-continent; the
    continent target is a Dirichlet(1) draw over the continents in use.
    """
    n_cont = int(rng.integers(2, max_continents + 1))
    codes = sorted(rng.choice(CONTINENTS, size=n_cont, replace=False).tolist())
    n = int(rng.integers(max(4, n_cont), max_n + 1))
    k = int(rng.integers(1, min(max_k, n - 1) + 1))
    items = [f"i{j}" for j in range(n)]
    cont = {i: frozenset({codes[int(rng.integers(n_cont))]}) for i in items}
    groups = {i: GROUPS[j % 3] if j < 3 else GROUPS[int(rng.integers(3))] for j, i in enumerate(items)}
    popularity = {i: int(rng.integers(1, 50)) for i in items}
    catalog = catalog_from(cont, groups, popularity)
    present = [c for c in codes if any(c in cont[i] for i in items)]
    tc = rng.dirichlet(np.ones(len(present)))
    tg = rng.dirichlet(np.ones(3))
    targets = TargetDistribution(dict(zip(present, tc.tolist())), dict(zip(GROUPS, tg.tolist())))
    scores = np.sort(rng.random(n))[::-1]
    order = rng.permutation(items).tolist()
    rec = RecommendationList("u", [ScoredItem(i, float(s)) for i, s in zip(order, scores)])
    return catalog, targets, rec, k


def penalty_fixture(seed: int, n_users: int = 12, k: int = 5, n: int = 15):
    """Multi-user lists where promotable items span popularity groups.

    European items make up about 30% of every popularity group.  Each
    user's candidate pool holds all group-1 items plus random others, and
    scores favour popular and North American items, so the top-k is mostly
    popular NA titles while the promotable European items beyond it come
    from all three groups.  Returns ``(catalog, targets, lists, k, n)``.
    """
    rng = np.random.default_rng(seed)
    n_items = 80
    items = list(range(n_items))
    counts = np.sort(rng.zipf(1.6, size=n_items).clip(1, 500))[::-1]
    pop = dict(zip(items, counts.tolist()))
    records = [(f"r{j}", i, 3.0) for i in items for j in range(pop[i])]
    train = InteractionSet.from_records(records, split="train")
    placeholder = {i: frozenset({"NA"}) for i in items}
    groups = {e.item: e.group for e in build_catalog(train, placeholder)}
    eu = set()
    for g in GROUPS:
        members = [i for i in items if groups[i] == g]
        eu |= set(rng.choice(members, size=max(1, round(0.3 * len(members))), replace=False).tolist())
    continents = {i: frozenset({"EU" if i in eu else "NA"}) for i in items}
    catalog = build_catalog(train, continents)
    targets = build_targets(train, catalog, "item_based")

    group_bonus = {"g1": 0.6, "g2": 0.3, "g3": 0.0}
    popular = catalog.group_members("g1")
    rest = [i for i in items if i not in set(popular)]
    lists = []
    for u in range(n_users):
        pool = popular + rng.choice(rest, size=n - len(popular), replace=False).tolist()
        scored = []
        for i in pool:
            e = catalog[i]
            s = group_bonus[e.group] + (0.25 if "NA" in e.continents else 0.0) + rng.normal(0, 0.15)
            scored.append((i, float(s)))
        scored.sort(key=lambda t: (-t[1], t[0]))
        lists.append(RecommendationList(u, [ScoredItem(i, s) for i, s in scored]))
    return catalog, targets, lists, k, n


def random_list_set(rng: np.random.Generator, max_users: int = 8, max_items: int = 30, max_k: int = 6):
    """Random lists over a random catalog, with targets and a test split.

    Items may carry several continents.  Returns
    ``(lists, catalog, targets, test, k)``; every group is non-empty.
    """
    n_items = int(rng.integers(6, max_items + 1))
    n_cont = int(rng.integers(1, len(CONTINENTS) + 1))
    codes = sorted(rng.choice(CONTINENTS, size=n_cont, replace=False).tolist())
    cont = {}
    for i in range(n_items):
        size = 1 if rng.random() < 0.8 else int(rng.integers(1, n_cont + 1))
        cont[i] = frozenset(rng.choice(codes, size=size, replace=False).tolist())
    groups = {i: GROUPS[i % 3] if i < 3 else GROUPS[int(rng.integers(3))] for i in range(n_items)}
    catalog = catalog_from(cont, groups, {i: int(rng.integers(1, 100)) for i in range(n_items)})
    present = sorted({c for s in cont.values() for c in s})
    targets = TargetDistribution(dict(zip(present, rng.dirichlet(np.ones(len(present))).tolist())),
                                 dict(zip(GROUPS, rng.dirichlet(np.ones(3)).tolist())))
    n_users = int(rng.integers(1, max_users + 1))
    length = int(rng.integers(1, n_items + 1))
    k = int(rng.integers(1, min(max_k, length) + 1))
    lists, test = [], []
    for u in range(n_users):
        items = rng.choice(n_items, size=length, replace=False).tolist()
        scores = np.sort(rng.random(length))[::-1].tolist()
        lists.append(RecommendationList(u, [ScoredItem(i, s) for i, s in zip(items, scores)]))
        for i in rng.choice(n_items, size=int(rng.integers(0, 4)), replace=False).tolist():
            test.append((u, i, 1.0))
    if not test:
        test.append((0, lists[0].entries[0].item, 1.0))
    return lists, catalog, targets, InteractionSet.from_records(test, split="test"), k
