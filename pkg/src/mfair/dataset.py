"""Rating data ingestion, item catalog construction and target distributions.

Interactions live in a small pandas frame (``user``, ``item``, ``rating``).
Item ids are kept as ints when every token in a column is a canonical
integer and as strings otherwise, so ISBNs with leading zeros survive.
"""

from __future__ import annotations

import csv
import logging
import math
import re
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Hashable, Iterator, Literal, Mapping

import numpy as np
import pandas as pd

logger = logging.getLogger(__name__)

CONTINENTS: tuple[str, ...] = ("AF", "AS", "EU", "NA", "OC", "SA")
GROUPS: tuple[str, ...] = ("g1", "g2", "g3")

Format = Literal["movielens_dat", "bookcrossing_csv", "generic_tsv"]
TargetMode = Literal["item_based", "rating_based"]

RATING_SCALES: dict[str, tuple[float, float]] = {
    "movielens_dat": (1.0, 5.0),
    "bookcrossing_csv": (1.0, 10.0),
}

_CANONICAL_INT = re.compile(r"^(0|-?[1-9][0-9]*)$")


class DatasetError(ValueError):
    """Raised for unreadable, malformed or degenerate rating data."""


@dataclass(frozen=True)
class Interaction:
    user: Hashable
    item: Hashable
    rating: float


@dataclass(frozen=True)
class InteractionSet:
    """A bag of (user, item, rating) triplets tagged with its split."""

    frame: pd.DataFrame
    split: Literal["train", "test", "all"] = "all"
    malformed: int = 0

    def __post_init__(self):
        missing = {"user", "item", "rating"} - set(self.frame.columns)
        if missing:
            raise DatasetError(f"interaction frame lacks columns {sorted(missing)}")

    @classmethod
    def from_records(cls, records, split="all") -> "InteractionSet":
        frame = pd.DataFrame(list(records), columns=["user", "item", "rating"])
        frame["rating"] = frame["rating"].astype(float)
        return cls(frame, split=split)

    def __len__(self) -> int:
        return len(self.frame)

    def __iter__(self) -> Iterator[Interaction]:
        for u, i, r in self.frame[["user", "item", "rating"]].itertuples(index=False):
            yield Interaction(u, i, float(r))

    @property
    def users(self) -> np.ndarray:
        return np.sort(self.frame["user"].unique())

    @property
    def items(self) -> np.ndarray:
        return np.sort(self.frame["item"].unique())

    def profiles(self) -> dict[Hashable, set]:
        """Items rated by each user."""
        return {u: set(g) for u, g in self.frame.groupby("user", sort=True)["item"]}

    def item_counts(self) -> dict[Hashable, int]:
        return self.frame["item"].value_counts().to_dict()

    def with_split(self, split) -> "InteractionSet":
        return InteractionSet(self.frame, split=split, malformed=self.malformed)


def _coerce_ids(tokens: list[str]) -> list:
    if tokens and all(_CANONICAL_INT.match(t) for t in tokens):
        return [int(t) for t in tokens]
    return tokens


def _read_movielens(fh, scale):
    for line in fh:
        line = line.strip()
        if not line:
            continue
        parts = line.split("::")
        if len(parts) < 3:
            yield None
            continue
        yield parts[0], parts[1], parts[2]


def _read_generic(fh, scale):
    for line in fh:
        line = line.rstrip("\r\n")
        if not line.strip() or line.startswith("#"):
            continue
        parts = line.split("\t")
        if len(parts) < 3:
            yield None
            continue
        yield parts[0], parts[1], parts[2]


def _read_bookcrossing(fh, scale):
    reader = csv.reader(fh, delimiter=";", quotechar='"')
    for row in reader:
        if not row:
            continue
        if row[0] == "User-ID":
            continue
        if len(row) != 3:
            yield None
            continue
        yield row[0], row[1], row[2]


_READERS = {
    "movielens_dat": (_read_movielens, "latin-1"),
    "bookcrossing_csv": (_read_bookcrossing, "latin-1"),
    "generic_tsv": (_read_generic, "utf-8"),
}


def parse_interactions(path, format: Format, scale: tuple[float, float] | None = None) -> InteractionSet:
    """Parse a rating file into an :class:`InteractionSet`.

    Malformed records are skipped and counted in ``InteractionSet.malformed``.
    Book-Crossing rows with rating 0 are implicit feedback and are dropped
    without being counted as malformed.
    """
    if format not in _READERS:
        raise DatasetError(f"unknown format {format!r}")
    reader, encoding = _READERS[format]
    scale = scale or RATING_SCALES.get(format)
    path = Path(path)
    users, items, ratings = [], [], []
    malformed = implicit = 0
    try:
        with open(path, encoding=encoding, newline="") as fh:
            for rec in reader(fh, scale):
                if rec is None:
                    malformed += 1
                    continue
                u, i, r = (s.strip() for s in rec)
                try:
                    value = float(r)
                except ValueError:
                    malformed += 1
                    continue
                if not u or not i or not math.isfinite(value):
                    malformed += 1
                    continue
                if format == "bookcrossing_csv" and value == 0:
                    implicit += 1
                    continue
                if scale is not None and not scale[0] <= value <= scale[1]:
                    malformed += 1
                    continue
                users.append(u)
                items.append(i)
                ratings.append(value)
    except OSError as exc:
        raise DatasetError(f"cannot read {path}: {exc}") from exc
    if not ratings:
        raise DatasetError(f"{path}: no valid rating records")
    if malformed:
        logger.warning("%s: skipped %d malformed records", path, malformed)
    if implicit:
        logger.info("%s: dropped %d implicit (rating 0) records", path, implicit)

    if format == "bookcrossing_csv":
        user_ids, item_ids = _coerce_ids(users), items
    else:
        user_ids, item_ids = _coerce_ids(users), _coerce_ids(items)
    frame = pd.DataFrame({"user": user_ids, "item": item_ids, "rating": np.asarray(ratings)})
    before = len(frame)
    frame = frame.drop_duplicates(["user", "item"], keep="last").reset_index(drop=True)
    if len(frame) != before:
        logger.warning("%s: %d duplicate (user, item) records collapsed", path, before - len(frame))
        malformed += before - len(frame)
    return InteractionSet(frame, split="all", malformed=malformed)


def write_interactions(data: InteractionSet, path) -> None:
    """Write interactions in the generic TSV format."""
    with open(path, "w", encoding="utf-8") as fh:
        for u, i, r in data.frame[["user", "item", "rating"]].itertuples(index=False):
            fh.write(f"{u}\t{i}\t{r:g}\n")


def filter_min_activity(data: InteractionSet, min_ratings: int, iterative: bool = False) -> InteractionSet:
    """Drop users and items with fewer than ``min_ratings`` ratings.

    The default is one simultaneous pass over the input counts.  With
    ``iterative=True`` the pass repeats until a fixed point (a k-core).
    """
    if min_ratings < 1:
        raise DatasetError("min_ratings must be >= 1")
    frame = data.frame
    while True:
        ucount = frame.groupby("user")["item"].transform("size")
        icount = frame.groupby("item")["user"].transform("size")
        keep = (ucount >= min_ratings) & (icount >= min_ratings)
        done = bool(keep.all())
        frame = frame[keep]
        if done or not iterative:
            break
    if frame.empty:
        raise DatasetError(f"no interactions survive min_ratings={min_ratings}")
    frame = frame.reset_index(drop=True)
    logger.info(
        "min-activity filter (%d): %d ratings, %d users, %d items",
        min_ratings, len(frame), frame["user"].nunique(), frame["item"].nunique(),
    )
    return InteractionSet(frame, split=data.split, malformed=data.malformed)


def split_train_test(data: InteractionSet, train_fraction: float = 0.8, seed: int = 0):
    """Random per-user split.

    Each user with ``n`` ratings keeps ``round(train_fraction * n)`` of them
    (at least one) in train.  Rows are ordered by (user, item) before the
    shuffle so the result does not depend on input order.
    """
    if not 0 < train_fraction < 1:
        raise DatasetError("train_fraction must lie in (0, 1)")
    frame = data.frame.sort_values(["user", "item"], kind="mergesort").reset_index(drop=True)
    rng = np.random.default_rng(seed)
    keys = rng.random(len(frame))
    order = np.lexsort((keys, frame["user"].to_numpy()))
    frame = frame.iloc[order].reset_index(drop=True)
    rank = frame.groupby("user", sort=False).cumcount().to_numpy()
    size = frame.groupby("user", sort=False)["item"].transform("size").to_numpy()
    n_train = np.maximum(1, np.floor(train_fraction * size + 0.5)).astype(int)
    in_train = rank < n_train
    train = frame[in_train].sort_values(["user", "item"], kind="mergesort").reset_index(drop=True)
    test = frame[~in_train].sort_values(["user", "item"], kind="mergesort").reset_index(drop=True)
    return InteractionSet(train, split="train"), InteractionSet(test, split="test")


def load_continent_map(path) -> dict[Hashable, frozenset[str]]:
    """Read an ``item_id<TAB>CODE[,CODE...]`` sidecar."""
    raw: dict[str, frozenset[str]] = {}
    path = Path(path)
    try:
        lines = path.read_text(encoding="utf-8").splitlines()
    except OSError as exc:
        raise DatasetError(f"cannot read {path}: {exc}") from exc
    for lineno, line in enumerate(lines, 1):
        if not line.strip() or line.startswith("#"):
            continue
        parts = line.split("\t")
        if len(parts) != 2:
            raise DatasetError(f"{path}:{lineno}: expected item<TAB>codes")
        item = parts[0].strip()
        codes = frozenset(c.strip().upper() for c in parts[1].split(",") if c.strip())
        unknown = codes - set(CONTINENTS)
        if unknown or not codes:
            raise DatasetError(f"{path}:{lineno}: unknown continent code(s) {sorted(unknown) or parts[1]!r}")
        if item in raw and raw[item] != codes:
            raise DatasetError(f"{path}:{lineno}: conflicting continents for item {item}")
        raw[item] = codes
    keys = _coerce_ids(list(raw))
    return dict(zip(keys, raw.values()))


def write_continent_map(continents: Mapping[Hashable, frozenset[str]], path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for item, codes in continents.items():
            fh.write(f"{item}\t{','.join(sorted(codes))}\n")


@dataclass(frozen=True)
class CatalogEntry:
    item: Hashable
    continents: frozenset[str]
    popularity: int
    group: str


@dataclass
class ItemCatalog:
    """Items eligible for recommendation, with continents and popularity groups."""

    entries: dict[Hashable, CatalogEntry]
    dropped: tuple = ()
    continents: tuple[str, ...] = field(init=False)

    def __post_init__(self):
        present = set()
        for e in self.entries.values():
            if not e.continents:
                raise DatasetError(f"item {e.item} has no continent")
            if e.group not in GROUPS:
                raise DatasetError(f"item {e.item} has unknown group {e.group!r}")
            present |= e.continents
        self.continents = tuple(c for c in CONTINENTS if c in present)

    def __len__(self) -> int:
        return len(self.entries)

    def __contains__(self, item) -> bool:
        return item in self.entries

    def __iter__(self):
        return iter(self.entries.values())

    def __getitem__(self, item) -> CatalogEntry:
        try:
            return self.entries[item]
        except KeyError:
            raise KeyError(f"item {item!r} not in catalog") from None

    def group_members(self, group: str) -> list:
        return [e.item for e in self.entries.values() if e.group == group]

    @property
    def group_sizes(self) -> dict[str, int]:
        sizes = Counter(e.group for e in self.entries.values())
        return {g: sizes.get(g, 0) for g in GROUPS}


def build_catalog(
    train: InteractionSet,
    continents: Mapping[Hashable, frozenset[str]],
    fractions: tuple[float, float] = (0.10, 0.10),
) -> ItemCatalog:
    """Build the item catalog from training counts and a continent map.

    Items are ranked by (popularity desc, item id asc); the first
    ``ceil(fractions[0] * m)`` go to g1, the next ``ceil(fractions[1] * m)``
    to g2 and the rest to g3.  Training items without continent data are
    dropped.
    """
    if len(train) == 0:
        raise DatasetError("empty training set")
    by_str = {str(k): v for k, v in continents.items()}
    counts = train.item_counts()
    kept, dropped = [], []
    for item, count in counts.items():
        codes = continents.get(item)
        if codes is None:
            codes = by_str.get(str(item))
        if codes:
            kept.append((item, int(count), frozenset(codes)))
        else:
            dropped.append(item)
    if not kept:
        raise DatasetError("catalog is empty after dropping items without continent data")
    if dropped:
        logger.info("catalog: dropped %d items without continent data", len(dropped))
    kept.sort(key=lambda t: (-t[1], t[0]))
    m = len(kept)
    n1 = min(m, math.ceil(fractions[0] * m))
    n2 = min(m - n1, math.ceil(fractions[1] * m))
    entries = {}
    for rank, (item, count, codes) in enumerate(kept):
        group = "g1" if rank < n1 else "g2" if rank < n1 + n2 else "g3"
        entries[item] = CatalogEntry(item, codes, count, group)
    return ItemCatalog(entries, dropped=tuple(sorted(dropped, key=str)))


def write_catalog(catalog: ItemCatalog, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("item\tcontinents\tpopularity\tgroup\n")
        for e in catalog:
            fh.write(f"{e.item}\t{','.join(sorted(e.continents))}\t{e.popularity}\t{e.group}\n")


def read_catalog(path) -> ItemCatalog:
    rows = []
    with open(path, encoding="utf-8") as fh:
        header = fh.readline().rstrip("\n").split("\t")
        if header != ["item", "continents", "popularity", "group"]:
            raise DatasetError(f"{path}: not a catalog file")
        for line in fh:
            if line.strip():
                rows.append(line.rstrip("\n").split("\t"))
    items = _coerce_ids([r[0] for r in rows])
    entries = {
        item: CatalogEntry(item, frozenset(r[1].split(",")), int(r[2]), r[3])
        for item, r in zip(items, rows)
    }
    return ItemCatalog(entries)


@dataclass(frozen=True)
class TargetDistribution:
    continent: dict[str, float]
    popgroup: dict[str, float]
    mode: TargetMode = "item_based"

    def to_dict(self) -> dict:
        return {"mode": self.mode, "continent": dict(self.continent), "popgroup": dict(self.popgroup)}

    @classmethod
    def from_dict(cls, d: Mapping) -> "TargetDistribution":
        return cls(dict(d["continent"]), dict(d["popgroup"]), d.get("mode", "item_based"))


def _normalize(values: dict[str, float]) -> dict[str, float]:
    total = math.fsum(values.values())
    if total <= 0:
        raise DatasetError("cannot normalise an all-zero distribution")
    return {k: v / total for k, v in values.items()}


def target_popularity(catalog: ItemCatalog, allow_empty: bool = False) -> dict[str, float]:
    """Average popularity per group, normalised to sum to one.

    An empty group is an error unless ``allow_empty``; it then gets 0.
    """
    sums = {g: 0 for g in GROUPS}
    sizes = catalog.group_sizes
    for e in catalog:
        sums[e.group] += e.popularity
    averages = {}
    for g in GROUPS:
        if sizes[g] == 0:
            if not allow_empty:
                raise DatasetError(f"popularity group {g} is empty")
            averages[g] = 0.0
        else:
            averages[g] = sums[g] / sizes[g]
    return _normalize(averages)


def target_continent(train: InteractionSet, catalog: ItemCatalog, mode: TargetMode = "item_based") -> dict[str, float]:
    """Continent target shares, item-based or rating-based.

    A multi-continent item adds one unit to every continent it belongs to.
    """
    if len(catalog) == 0:
        raise DatasetError("empty catalog")
    counts = {c: 0 for c in catalog.continents}
    if mode == "item_based":
        for e in catalog:
            for c in e.continents:
                counts[c] += 1
    elif mode == "rating_based":
        per_item = train.item_counts()
        for e in catalog:
            n = per_item.get(e.item, 0)
            for c in e.continents:
                counts[c] += n
    else:
        raise DatasetError(f"unknown target mode {mode!r}")
    return _normalize(counts)


def build_targets(train: InteractionSet, catalog: ItemCatalog, mode: TargetMode = "item_based",
                  allow_empty_groups: bool = False) -> TargetDistribution:
    return TargetDistribution(
        continent=target_continent(train, catalog, mode),
        popgroup=target_popularity(catalog, allow_empty=allow_empty_groups),
        mode=mode,
    )
