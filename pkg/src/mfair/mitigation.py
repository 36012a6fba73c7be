"""MFAIR: greedy top-k / beyond-top-k swaps that pull continent shares toward
their targets, with a popularity penalty that reorders candidate swaps.

Internally a *delta* is ``target - actual`` (positive = under-represented),
the negation of the bias values reported by :mod:`mfair.metrics`.

One phase:

1. compute continent and popularity deltas for the bias type;
2. per user, split the top-n into demotable items (top-k, no
   under-represented continent) and promotable items (beyond top-k, at
   least one under-represented continent), then pair the best promotable
   with the worst demotable until one side runs out;
3. shift each pair's loss by ``eps * mean |loss|`` when the two items sit in
   popularity groups with opposite delta signs;
4. apply swaps in ascending loss order while some continent is still
   under-represented, skipping swaps whose promoted item no longer is.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from typing import Hashable, Literal, NamedTuple, Sequence

import numpy as np

from .dataset import ItemCatalog, TargetDistribution
from .metrics import (
    MetricError,
    check_lengths,
    continent_keys,
    continent_row,
    continent_rows,
    continent_shares,
    group_keys,
    group_row,
    group_rows,
    group_shares,
    group_sizes,
    position_weights,
)
from .recommenders import RecommendationList, ScoredItem

logger = logging.getLogger(__name__)

BiasType = Literal["visibility", "exposure"]

_PHASES = {
    "visibility_only": ("visibility",),
    "visibility": ("visibility",),
    "exposure_only": ("exposure",),
    "exposure": ("exposure",),
    "both": ("visibility", "exposure"),
}


class MitigationError(ValueError):
    pass


@dataclass(frozen=True)
class GroupDeltas:
    continent: dict[str, float]
    popgroup: dict[str, float]
    bias_type: BiasType


class Slot(NamedTuple):
    position: int
    item: Hashable
    score: float


@dataclass(frozen=True)
class SwapCandidate:
    user: Hashable
    down_item: Hashable
    pos_down: int
    up_item: Hashable
    pos_up: int
    raw_loss: float
    adj_loss: float


@dataclass(frozen=True)
class MitigationConfig:
    """Re-ranking settings.

    ``strict_guard`` additionally skips a swap whose demoted item has become
    under-represented by the time the swap is reached.  ``recompute``
    selects how deltas are refreshed after a swap: ``"full"`` rebuilds every
    user's mass row, ``"incremental"`` rebuilds only the swapped user's row;
    both feed the same reduction and give identical results.
    """

    k: int = 20
    n: int = 150
    eps: float = 1.0
    target_mode: str = "item_based"
    phases: str = "both"
    strict_guard: bool = False
    aggregation: str = "per_user"
    recompute: Literal["full", "incremental"] = "full"
    tol: float = 1e-12

    def __post_init__(self):
        if not 1 <= self.k < self.n:
            raise MitigationError(f"need 1 <= k < n, got k={self.k}, n={self.n}")
        if not 0.0 <= self.eps <= 1.0:
            raise MitigationError(f"eps must lie in [0, 1], got {self.eps}")
        if self.phases not in _PHASES:
            raise MitigationError(f"unknown phases {self.phases!r}")
        if self.recompute not in ("full", "incremental"):
            raise MitigationError(f"unknown recompute mode {self.recompute!r}")


def _delta_dict(keys, values) -> dict[str, float]:
    return dict(zip(keys, values.tolist()))


class _State:
    """Mass rows for all users plus the current deltas."""

    def __init__(self, lists, catalog, targets: TargetDistribution, bias_type, k, aggregation):
        self.lists, self.catalog, self.k, self.aggregation = lists, catalog, k, aggregation
        self.exposure = bias_type == "exposure"
        self.ckeys = continent_keys(targets.continent)
        self.gkeys = group_keys(targets.popgroup)
        self.ccol = {c: n for n, c in enumerate(self.ckeys)}
        self.gcol = {g: n for n, g in enumerate(self.gkeys)}
        self.tc = np.array([targets.continent[c] for c in self.ckeys])
        self.tg = np.array([targets.popgroup[g] for g in self.gkeys])
        self.sizes = group_sizes(catalog, self.gkeys, targets.popgroup)
        self.w = position_weights(k, self.exposure)
        self.rebuild()

    def rebuild(self):
        self.crows = continent_rows(self.lists, self.catalog, self.ckeys, self.k, self.exposure)
        self.grows = group_rows(self.lists, self.catalog, self.gkeys, self.k, self.exposure)
        self.refresh()

    def update_user(self, u: int):
        top = self.lists[u].top(self.k)
        self.crows[u] = continent_row(top, self.catalog, self.ccol, self.w)
        self.grows[u] = group_row(top, self.catalog, self.gcol, self.w)
        self.refresh()

    def refresh(self):
        self.cdelta = self.tc - continent_shares(self.crows, self.aggregation)
        self.gdelta = self.tg - group_shares(self.grows, self.sizes)

    def under(self, item, tol) -> bool:
        return any(self.cdelta[self.ccol[c]] > tol for c in self.catalog[item].continents)

    def deltas(self, bias_type) -> GroupDeltas:
        return GroupDeltas(_delta_dict(self.ckeys, self.cdelta), _delta_dict(self.gkeys, self.gdelta), bias_type)


def compute_deltas(lists, catalog: ItemCatalog, targets: TargetDistribution, bias_type: BiasType, k: int,
                   aggregation: str = "per_user") -> GroupDeltas:
    """Target minus actual share for every continent and popularity group."""
    if not lists:
        raise MitigationError("no recommendation lists")
    check_lengths(lists, k)
    return _State(lists, catalog, targets, bias_type, k, aggregation).deltas(bias_type)


def is_under_represented(item, catalog: ItemCatalog, deltas: GroupDeltas, tol: float = 0.0) -> bool:
    """True iff some continent of ``item`` has a delta above ``tol``."""
    entry = catalog[item]
    return any(deltas.continent.get(c, 0.0) > tol for c in entry.continents)


def collect_candidates(rec: RecommendationList, catalog: ItemCatalog, deltas: GroupDeltas, k: int,
                       n: int | None = None, tol: float = 0.0) -> tuple[list[Slot], list[Slot]]:
    """Demotable top-k slots and promotable slots in positions k+1..n, in list order."""
    down, up = [], []
    entries = rec.entries if n is None else rec.entries[:n]
    for pos, (item, score) in enumerate(entries, 1):
        under = is_under_represented(item, catalog, deltas, tol)
        if pos <= k and not under:
            down.append(Slot(pos, item, score))
        elif pos > k and under:
            up.append(Slot(pos, item, score))
    return down, up


def propose_swaps(user, down: Sequence[Slot], up: Sequence[Slot]) -> list[SwapCandidate]:
    """Pair the best promotable slot with the worst demotable one, repeatedly.

    Both sides are ordered by (score desc, position asc) first, which is list
    order for a score-sorted list.
    """
    down = sorted(down, key=lambda s: (-s.score, s.position))
    up = sorted(up, key=lambda s: (-s.score, s.position))
    swaps = []
    for u_slot, d_slot in zip(up, reversed(down)):
        loss = d_slot.score - u_slot.score
        swaps.append(SwapCandidate(user, d_slot.item, d_slot.position, u_slot.item, u_slot.position, loss, loss))
    return swaps


def add_penalty(swaps: Sequence[SwapCandidate], pop_deltas: dict[str, float], catalog: ItemCatalog,
                eps: float) -> tuple[list[SwapCandidate], int]:
    """Shift losses by ``eps * mean |raw loss|`` according to popularity groups.

    Promoting from an under-represented group while demoting from an
    over-represented one lowers the loss; the opposite raises it.  Returns the
    adjusted swaps and how many were adjusted.  With ``eps == 0`` popularity
    deltas are never read.
    """
    if not 0.0 <= eps <= 1.0:
        raise MitigationError(f"eps must lie in [0, 1], got {eps}")
    swaps = [replace(s, adj_loss=s.raw_loss) for s in swaps]
    if not swaps or eps == 0.0:
        return swaps, 0
    average = float(np.mean([abs(s.raw_loss) for s in swaps]))
    step = average * eps
    out, applied = [], 0
    for s in swaps:
        up = pop_deltas[catalog[s.up_item].group]
        down = pop_deltas[catalog[s.down_item].group]
        if up > 0 and down < 0:
            s = replace(s, adj_loss=s.raw_loss - step)
            applied += 1
        elif up < 0 and down > 0:
            s = replace(s, adj_loss=s.raw_loss + step)
            applied += 1
        out.append(s)
    return out, applied


def swap_items(entries: list[ScoredItem], pos_a: int, pos_b: int) -> None:
    """Exchange the entries at two 1-indexed positions in place."""
    entries[pos_a - 1], entries[pos_b - 1] = entries[pos_b - 1], entries[pos_a - 1]


@dataclass
class PhaseResult:
    lists: list[RecommendationList]
    bias_type: BiasType
    candidates: int = 0
    applied: list[SwapCandidate] = field(default_factory=list)
    discarded: int = 0
    penalty_applications: int = 0
    initial_deltas: GroupDeltas | None = None
    final_deltas: GroupDeltas | None = None


def _user_order(users) -> dict:
    try:
        ordered = sorted(set(users))
    except TypeError:
        ordered = sorted(set(users), key=str)
    return {u: n for n, u in enumerate(ordered)}


def mfair_phase(lists: Sequence[RecommendationList], catalog: ItemCatalog, targets: TargetDistribution,
                bias_type: BiasType, config: MitigationConfig) -> PhaseResult:
    """One MFAIR pass for ``bias_type``; the input lists are not modified."""
    if bias_type not in ("visibility", "exposure"):
        raise MitigationError(f"unknown bias type {bias_type!r}")
    if not lists:
        raise MitigationError("no recommendation lists")
    k, tol = config.k, config.tol
    try:
        check_lengths(lists, k)
    except MetricError as exc:
        raise MitigationError(str(exc)) from exc
    lists = [r.copy() for r in lists]
    user_index = {r.user: n for n, r in enumerate(lists)}
    if len(user_index) != len(lists):
        raise MitigationError("duplicate user lists")

    state = _State(lists, catalog, targets, bias_type, k, config.aggregation)
    result = PhaseResult(lists, bias_type, initial_deltas=state.deltas(bias_type))

    swaps: list[SwapCandidate] = []
    deltas = result.initial_deltas
    for rec in lists:
        down, up = collect_candidates(rec, catalog, deltas, k, config.n, tol)
        swaps += propose_swaps(rec.user, down, up)
    result.candidates = len(swaps)

    swaps, result.penalty_applications = add_penalty(swaps, deltas.popgroup, catalog, config.eps)
    order = _user_order(user_index)
    swaps.sort(key=lambda s: (s.adj_loss, order[s.user], s.pos_down))

    for swap in swaps:
        if not (state.cdelta > tol).any():
            break
        u = user_index[swap.user]
        entries = lists[u].entries
        if entries[swap.pos_down - 1].item != swap.down_item or entries[swap.pos_up - 1].item != swap.up_item:
            result.discarded += 1
            continue
        if not state.under(swap.up_item, tol) or (config.strict_guard and state.under(swap.down_item, tol)):
            result.discarded += 1
            continue
        swap_items(entries, swap.pos_down, swap.pos_up)
        if config.recompute == "full":
            state.rebuild()
        else:
            state.update_user(u)
        result.applied.append(swap)

    result.final_deltas = state.deltas(bias_type)
    logger.info("%s phase: %d candidate swaps, %d applied, %d discarded, %d penalised",
                bias_type, result.candidates, len(result.applied), result.discarded,
                result.penalty_applications)
    return result


@dataclass
class MitigationResult:
    lists: list[RecommendationList]
    phases: list[PhaseResult]

    @property
    def swaps_applied(self) -> int:
        return sum(len(p.applied) for p in self.phases)


def phase_sequence(phases: str) -> tuple[str, ...]:
    try:
        return _PHASES[phases]
    except KeyError:
        raise MitigationError(f"unknown phases {phases!r}") from None


def mitigate_two_phase(lists: Sequence[RecommendationList], catalog: ItemCatalog, targets: TargetDistribution,
                       config: MitigationConfig = MitigationConfig()) -> MitigationResult:
    """Visibility phase, then exposure phase on its output (per ``config.phases``)."""
    results = []
    current = list(lists)
    for bias_type in phase_sequence(config.phases):
        res = mfair_phase(current, catalog, targets, bias_type, config)
        results.append(res)
        current = res.lists
    return MitigationResult(current, results)
