import csv
import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mfair.dataset import CatalogEntry, InteractionSet, ItemCatalog, TargetDistribution
from mfair.metrics import (
    FAMILIES,
    BiasReport,
    BiasValue,
    MetricError,
    discount,
    evaluate,
    exposure_bias_continent,
    exposure_bias_popgroup,
    ndcg,
    total_bs,
    visibility_bias_continent,
    visibility_bias_popgroup,
)
from mfair.recommenders import RecommendationList, ScoredItem
from mfair.testkit import random_list_set, toy_fixture

W2 = 1 / math.log2(3)


def _lists(*users):
    return [RecommendationList(u, [ScoredItem(i, 1.0 - 0.01 * p) for p, i in enumerate(items)])
            for u, items in enumerate(users)]


def _catalog(spec):
    return ItemCatalog({i: CatalogEntry(i, frozenset(c), 1, g) for i, (c, g) in spec.items()})


def _values(bias):
    return {b.group: b.value for b in bias}


# a, b NA; c EU; d EU+NA
HAND = _catalog({"a": ({"NA"}, "g1"), "b": ({"NA"}, "g1"), "c": ({"EU"}, "g2"), "d": ({"EU", "NA"}, "g3")})
HAND_TARGET = TargetDistribution({"EU": 0.3, "NA": 0.7}, {"g1": 0.5, "g2": 0.3, "g3": 0.2})


def test_discount_closed_form():
    assert discount(1) == 1.0
    assert discount(3) == 0.5


def test_all_na_top_k():
    cat = _catalog({i: ({"NA"}, "g1") for i in "abc"} | {"x": ({"EU"}, "g2"), "y": ({"AS"}, "g3")})
    target = TargetDistribution({"NA": 0.7, "EU": 0.2, "AS": 0.1}, {"g1": 0.6, "g2": 0.3, "g3": 0.1})
    lists = _lists(["a", "b", "x"], ["c", "a", "y"])
    vb = _values(visibility_bias_continent(lists, cat, target, 2))
    assert vb == pytest.approx({"NA": 0.3, "EU": -0.2, "AS": -0.1})
    pb = _values(visibility_bias_popgroup(lists, cat, target, 2))
    assert pb == pytest.approx({"g1": 0.4, "g2": -0.3, "g3": -0.1})
    eb = _values(exposure_bias_popgroup(lists, cat, target, 2))
    assert eb["g1"] == pytest.approx(1 - 0.6)


def test_fair_lists_have_zero_bias():
    cat = _catalog({"a": ({"NA"}, "g1"), "b": ({"EU"}, "g2"), "c": ({"NA"}, "g3"), "d": ({"EU"}, "g3")})
    lists = _lists(["a", "b"], ["d", "c"])
    target = TargetDistribution({"EU": 0.5, "NA": 0.5}, {"g1": 0.25, "g2": 0.25, "g3": 0.5})
    assert all(v.value == pytest.approx(0.0) for v in visibility_bias_continent(lists, cat, target, 2))


def test_three_user_continent_hand_fixture():
    lists = _lists(["a", "b"], ["a", "c"], ["c", "d"])
    # per-user NA shares 1, 1/2, 1/3 (d counts for both EU and NA)
    na = (1 + 1 / 2 + 1 / 3) / 3
    vb = _values(visibility_bias_continent(lists, HAND, HAND_TARGET, 2))
    assert vb["NA"] == pytest.approx(na - 0.7, abs=1e-12)
    assert vb["EU"] == pytest.approx((1 - na) - 0.3, abs=1e-12)
    # exposure: weights 1 and 1/log2(3)
    u2 = 1 / (1 + W2)
    u3 = W2 / (1 + 2 * W2)
    eb = _values(exposure_bias_continent(lists, HAND, HAND_TARGET, 2))
    assert eb["NA"] == pytest.approx((1 + u2 + u3) / 3 - 0.7, abs=1e-12)


def test_two_user_popgroup_exposure_hand_fixture():
    # group sizes: g1 2, g2 1, g3 1
    lists = _lists(["a", "c"], ["d", "b"])
    e = {"g1": (1 + W2) / 2, "g2": W2 / 1, "g3": 1 / 1}
    total = sum(e.values())
    eb = _values(exposure_bias_popgroup(lists, HAND, HAND_TARGET, 2))
    for g in e:
        assert eb[g] == pytest.approx(e[g] / total - HAND_TARGET.popgroup[g], abs=1e-12)
    v = {"g1": 2 / 2, "g2": 1 / 1, "g3": 1 / 1}
    vb = _values(visibility_bias_popgroup(lists, HAND, HAND_TARGET, 2))
    for g in v:
        assert vb[g] == pytest.approx(v[g] / 3 - HAND_TARGET.popgroup[g], abs=1e-12)


def test_pooled_aggregation_differs_from_per_user():
    lists = _lists(["a", "b"], ["a", "c"], ["c", "d"])
    pooled = _values(visibility_bias_continent(lists, HAND, HAND_TARGET, 2, aggregation="pooled"))
    # pooled counts: NA 1+1+1+0+0+1 = 4 of 7 units
    assert pooled["NA"] == pytest.approx(4 / 7 - 0.7)
    with pytest.raises(MetricError):
        visibility_bias_continent(lists, HAND, HAND_TARGET, 2, aggregation="median")


def test_exposure_rises_when_item_moves_up():
    lists = _lists(["a", "b", "c"])
    before = _values(exposure_bias_continent(lists, HAND, HAND_TARGET, 3))
    after = _values(exposure_bias_continent(_lists(["c", "a", "b"]), HAND, HAND_TARGET, 3))
    assert after["EU"] > before["EU"]


def test_errors():
    lists = _lists(["a", "b"])
    with pytest.raises(MetricError):
        visibility_bias_continent(lists, HAND, HAND_TARGET, 3)
    with pytest.raises(MetricError):
        visibility_bias_continent([], HAND, HAND_TARGET, 1)
    no_g3 = _catalog({"a": ({"NA"}, "g1"), "b": ({"EU"}, "g2")})
    with pytest.raises(MetricError):
        visibility_bias_popgroup(lists, no_g3, HAND_TARGET, 2)


def test_total_bs():
    assert total_bs([BiasValue("x", 0.0)] * 3) == 0.0
    vals = [BiasValue("a", 0.3), BiasValue("b", -0.2), BiasValue("c", -0.1)]
    assert total_bs(vals) == pytest.approx(0.6)
    flipped = [BiasValue(v.group, -v.value) for v in vals]
    assert total_bs(flipped) == total_bs(vals)


# -- NDCG ------------------------------------------------------------------

def test_ndcg_examples():
    test = InteractionSet.from_records([(0, "a", 1.0), (1, "c", 1.0), (1, "d", 4.0)])
    perfect = _lists(["a", "b"], ["c", "d"])
    assert ndcg(perfect, test, 2) == pytest.approx(1.0)
    assert ndcg(_lists(["b", "x"], ["a", "b"]), test, 2) == 0.0
    one = InteractionSet.from_records([(0, "a", 1.0)])
    assert ndcg(_lists(["b", "a"]), one, 2) == pytest.approx(0.6309, abs=1e-4)
    assert ndcg(_lists(["b", "a"]), one, 2) == pytest.approx(1 / math.log2(3))


def test_ndcg_missing_user_scores_zero():
    test = InteractionSet.from_records([(0, "a", 1.0), (5, "a", 1.0)])
    assert ndcg(_lists(["a"]), test, 1) == pytest.approx(0.5)
    with pytest.raises(MetricError):
        ndcg(_lists(["a"]), InteractionSet.from_records([]), 1)


# -- invariants ------------------------------------------------------------

def _check_invariants(lists, catalog, targets, test, k):
    report = evaluate(lists, catalog, targets, test, k)
    for fam in FAMILIES:
        vals = report.family(fam)
        assert abs(math.fsum(vals.values())) <= 1e-9
        target = targets.continent if fam.startswith("continent") else targets.popgroup
        for g, v in vals.items():
            assert -target[g] - 1e-12 <= v <= 1 - target[g] + 1e-12
    assert 0.0 <= report.ndcg <= 1.0
    return report


@settings(max_examples=150, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_metric_invariants(seed):
    lists, catalog, targets, test, k = random_list_set(np.random.default_rng(seed))
    _check_invariants(lists, catalog, targets, test, k)
    k1 = evaluate(lists, catalog, targets, test, 1)
    assert k1.family("continent_vb") == k1.family("continent_eb")
    assert k1.family("pop_vb") == k1.family("pop_eb")


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_metrics_permutation_invariant_across_users(seed):
    rng = np.random.default_rng(seed)
    lists, catalog, targets, test, k = random_list_set(rng)
    a = evaluate(lists, catalog, targets, test, k)
    b = evaluate([lists[i] for i in rng.permutation(len(lists))], catalog, targets, test, k)
    for fam in FAMILIES:
        assert b.family(fam) == pytest.approx(a.family(fam), abs=1e-12)
    assert b.ndcg == pytest.approx(a.ndcg, abs=1e-12)


def test_toy_fixture_popularity_and_continent_signs():
    toy = toy_fixture()
    report = evaluate(toy.lists, toy.catalog, toy.targets, None, toy.k)
    assert report.family("pop_vb")["g1"] > 0
    assert report.family("continent_vb")["NA"] > 0
    assert report.family("continent_vb")["SA"] < 0


# -- serialisation ---------------------------------------------------------

def test_report_json_and_csv(tmp_path):
    lists, catalog, targets, test, k = random_list_set(np.random.default_rng(3))
    report = evaluate(lists, catalog, targets, test, k)
    report.write_json(tmp_path / "r.json")
    back = BiasReport.from_dict(json.loads((tmp_path / "r.json").read_text()))
    assert back.to_dict() == report.to_dict()
    report.write_csv(tmp_path / "r.csv")
    with open(tmp_path / "r.csv", newline="") as fh:
        rows = list(csv.DictReader(fh))
    assert rows[0].keys() == {"metric", "group", "value"}
    for row in rows:
        decimals = len(row["value"].split(".")[1])
        assert decimals == (3 if row["metric"] == "NDCG" else 2)
    total = [r for r in rows if r["metric"] == "continent_VB_I" and r["group"] == "Total BS"][0]
    assert float(total["value"]) == pytest.approx(100 * report.totals["continent_vb"], abs=0.005)


def test_zero_bias_csv_cells(tmp_path):
    cat = _catalog({"a": ({"NA"}, "g1"), "b": ({"EU"}, "g2"), "c": ({"NA"}, "g3"), "d": ({"EU"}, "g3")})
    target = TargetDistribution({"EU": 0.5, "NA": 0.5}, {"g1": 0.25, "g2": 0.25, "g3": 0.5})
    report = evaluate(_lists(["a", "b"], ["d", "c"]), cat, target, None, 2)
    report.write_csv(tmp_path / "z.csv")
    with open(tmp_path / "z.csv", newline="") as fh:
        rows = [r for r in csv.DictReader(fh) if r["metric"].startswith("continent_VB")]
    assert {r["value"] for r in rows} == {"0.00"}
