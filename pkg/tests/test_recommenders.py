import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
import scipy.sparse as sp
from scipy import stats

from mfair.dataset import InteractionSet, build_catalog
from mfair.recommenders import (
    BPR,
    BiasedMF,
    KNNRecommender,
    RecommendationList,
    RecommenderError,
    ScoredItem,
    bpr_pair_gradient,
    bpr_pair_loss,
    centered_cosine,
    knn,
    most_popular,
    random_guess,
    read_lists,
    recommend,
    write_lists,
)
from mfair.testkit import SynthSpec, synth_dataset

FOUR_USERS = {
    "a": {1: 5, 2: 3, 3: 4},
    "b": {1: 4, 2: 2, 4: 5},
    "c": {2: 5, 3: 1, 4: 2},
    "d": {1: 1, 3: 5, 4: 4},
}


def _records(table):
    return InteractionSet.from_records([(u, i, float(r)) for u, row in table.items() for i, r in row.items()])


def _transpose(table):
    out = {}
    for u, row in table.items():
        for i, r in row.items():
            out.setdefault(i, {})[u] = r
    return out


def _oracle_knn(table, k):
    """Plain-loop neighbourhood prediction over rows of ``table``."""

    def centred(v):
        m = sum(v.values()) / len(v)
        return {key: x - m for key, x in v.items()}

    def cos(x, y):
        x, y = centred(x), centred(y)
        nx = math.sqrt(sum(v * v for v in x.values()))
        ny = math.sqrt(sum(v * v for v in y.values()))
        if nx < 1e-12 or ny < 1e-12:
            return 0.0
        return sum(x[key] * y.get(key, 0.0) for key in x) / (nx * ny)

    cols = sorted({c for row in table.values() for c in row})
    preds = {}
    for a in table:
        sims = sorted(((cos(table[a], table[b]), b) for b in table if b != a), key=lambda t: (-t[0], str(t[1])))
        neigh = [(s, b) for s, b in sims if s > 0][:k]
        for c in cols:
            num = sum(s * table[b][c] for s, b in neigh if c in table[b])
            den = sum(s for s, b in neigh if c in table[b])
            preds[a, c] = num / den if den else None
    return preds


def _catalog_for(data, continent="NA"):
    return build_catalog(data, {i: frozenset({continent}) for i in data.items.tolist()})


def _check_list(rec: RecommendationList, seen, n):
    scores = [e.score for e in rec.entries]
    items = rec.items
    assert len(rec) <= n
    assert all(math.isfinite(s) for s in scores)
    assert all(a >= b for a, b in zip(scores, scores[1:]))
    assert len(set(items)) == len(items)
    assert not set(items) & seen
    for (i1, s1), (i2, s2) in zip(rec.entries, rec.entries[1:]):
        if s1 == s2:
            assert i1 < i2


# -- similarity and KNN ----------------------------------------------------

def test_identical_and_orthogonal_vectors():
    X = sp.csr_matrix(np.array([[1.0, 3.0, 0, 0], [1.0, 3.0, 0, 0], [0, 0, 2.0, 4.0]]))
    S = centered_cosine(X)
    assert S[0, 1] == pytest.approx(1.0)
    assert S[0, 2] == pytest.approx(0.0)


def test_user_knn_matches_hand_oracle():
    model = KNNRecommender("user", k_neighbors=2).fit(_records(FOUR_USERS))
    oracle = _oracle_knn(FOUR_USERS, 2)
    for (u, i), want in oracle.items():
        if i in FOUR_USERS[u]:
            continue
        got = model.predict(u, i)
        if want is None:
            assert math.isnan(got)
        else:
            assert got == pytest.approx(want, rel=1e-12)
    # frozen from the oracle: b's neighbours are a (0.6547) and d (0.0175)
    assert model.predict("b", 3) == pytest.approx(4.025994289373052, rel=1e-12)
    assert math.isnan(model.predict("c", 1))


def test_user_knn_single_neighbour():
    model = KNNRecommender("user", k_neighbors=1).fit(_records(FOUR_USERS))
    assert model.predict("b", 3) == pytest.approx(4.0)


def test_item_knn_matches_hand_oracle():
    model = KNNRecommender("item", k_neighbors=2).fit(_records(FOUR_USERS))
    oracle = _oracle_knn(_transpose(FOUR_USERS), 2)
    for (i, u), want in oracle.items():
        if i in FOUR_USERS[u]:
            continue
        got = model.predict(u, i)
        if want is None:
            assert math.isnan(got)
        else:
            assert got == pytest.approx(want, rel=1e-12)


def test_knn_omits_items_without_evidence_unless_backfilled():
    data = _records(FOUR_USERS)
    lists = {r.user: r for r in knn(data, "user", 2, n=10)}
    assert lists["c"].items == []
    filled = {r.user: r for r in knn(data, "user", 2, n=10, backfill=True)}
    assert filled["c"].items == [1]


def test_knn_rejects_bad_arguments():
    with pytest.raises(RecommenderError):
        KNNRecommender("both")
    with pytest.raises(RecommenderError):
        KNNRecommender("user", 0)


# -- popularity and random -------------------------------------------------

def test_most_popular_orders_by_count_and_skips_seen():
    recs = [(u, 1, 3.0) for u in range(5)] + [(u, 2, 3.0) for u in range(3)] + [(9, 3, 1.0), (8, 4, 1.0)]
    data = InteractionSet.from_records(recs)
    lists = {r.user: r for r in most_popular(data, _catalog_for(data), n=10)}
    assert lists[9].items[0] == 1
    assert lists[9].items == [1, 2, 4]
    # users 0 and 1 have identical profiles
    assert lists[0].items == lists[1].items == [3, 4]
    # disjoint profiles differ only in the excluded items
    assert [i for i in lists[9].items if i != 4] == [i for i in lists[8].items if i != 3]


def test_random_guess_determinism_and_length():
    data, cont = synth_dataset(SynthSpec(n_users=20, n_items=40, seed=2, ratings_per_user=10))
    cat = build_catalog(data, cont)
    a = random_guess(data, cat, n=15, seed=7)
    b = random_guess(data, cat, n=15, seed=7)
    assert [r.entries for r in a] == [r.entries for r in b]
    short = random_guess(data, cat, n=1000, seed=7)
    profiles = data.profiles()
    for rec in short:
        assert len(rec) == len(cat) - len(profiles[rec.user] & set(cat.entries))
        assert all(0.0 < e.score < 1.0 for e in rec.entries)


def test_random_guess_tracks_item_continents():
    spec = SynthSpec(n_users=300, n_items=500, seed=4, ratings_per_user=5,
                     continent_weights={"NA": 0.6, "EU": 0.3, "AS": 0.1})
    data, cont = synth_dataset(spec)
    cat = build_catalog(data, cont)
    lists = random_guess(data, cat, n=20, seed=1)
    codes = sorted(cat.continents)
    observed = np.array([sum(c in cat[i].continents for r in lists for i in r.top(20)) for c in codes])
    share = np.array([sum(c in e.continents for e in cat) for c in codes]) / len(cat)
    _, p = stats.chisquare(observed, share * observed.sum())
    assert p > 0.001


# -- biased MF -------------------------------------------------------------

def _low_rank(n_users, n_items, rank, seed, density=0.6):
    rng = np.random.default_rng(seed)
    P, Q = rng.normal(0, 1, (n_users, rank)), rng.normal(0, 1, (n_items, rank))
    M = 3 + 0.7 * P @ Q.T
    return InteractionSet.from_records(
        [(u, i, float(M[u, i])) for u in range(n_users) for i in range(n_items) if rng.random() < density])


def test_mf_without_learning_keeps_initial_parameters():
    data = _low_rank(10, 12, 2, 0)
    model = BiasedMF(factors=3, lr=0.0, epochs=5, seed=9).fit(data)
    rng = np.random.default_rng(9)
    P0 = rng.normal(0, 0.1, (10, 3))
    Q0 = rng.normal(0, 0.1, (12, 3))
    assert np.array_equal(model.P, P0) and np.array_equal(model.Q, Q0)
    assert not model.bu.any() and not model.bi.any()
    assert model.predict(0, 1) == pytest.approx(model.mu + P0[0] @ Q0[1])


def test_mf_rmse_non_increasing_on_low_rank():
    model = BiasedMF(factors=5, epochs=40, seed=1).fit(_low_rank(50, 50, 2, 0))
    h = np.array(model.rmse_history)
    assert len(h) == 40
    assert np.all(np.diff(h) <= 1e-12)


def test_mf_fits_rank_one():
    rng = np.random.default_rng(3)
    a, b = rng.uniform(0.5, 1.5, 40), rng.uniform(0.5, 1.5, 40)
    data = InteractionSet.from_records([(u, i, float(a[u] * b[i])) for u in range(40) for i in range(40)])
    model = BiasedMF(factors=1, lr=0.02, reg=0.0, epochs=200, seed=0).fit(data)
    assert model.rmse_history[-1] < 0.05


def test_mf_divergence_is_reported():
    with pytest.raises(RecommenderError, match="diverged"):
        BiasedMF(factors=3, lr=50.0, reg=0.0, epochs=20).fit(_low_rank(20, 20, 2, 1))


def test_mf_deterministic():
    data = _low_rank(15, 15, 2, 5)
    a = BiasedMF(epochs=3, seed=4).fit(data).recommend(5)
    b = BiasedMF(epochs=3, seed=4).fit(data).recommend(5)
    assert [r.entries for r in a] == [r.entries for r in b]


# -- BPR -------------------------------------------------------------------

def _fd_gradient(params, reg, h=1e-6):
    names = ("p_u", "q_i", "q_j", "b_i", "b_j")
    out = {}
    for name in names:
        base = np.atleast_1d(np.array(params[name], dtype=float))
        g = np.empty_like(base)
        for k in range(base.size):
            hi, lo = base.copy(), base.copy()
            hi[k] += h
            lo[k] -= h
            ph = dict(params, **{name: hi if base.size > 1 or name.startswith(("p", "q")) else hi[0]})
            pl = dict(params, **{name: lo if base.size > 1 or name.startswith(("p", "q")) else lo[0]})
            g[k] = (bpr_pair_loss(reg=reg, **ph) - bpr_pair_loss(reg=reg, **pl)) / (2 * h)
        out[name] = g
    return out


def _rel_err(a, b):
    a, b = np.atleast_1d(a), np.atleast_1d(b)
    return float(np.max(np.abs(a - b) / np.maximum(1e-8, np.maximum(np.abs(a), np.abs(b)))))


def test_bpr_gradient_matches_finite_differences():
    rng = np.random.default_rng(0)
    for _ in range(20):
        f = int(rng.integers(1, 8))
        params = {"p_u": rng.normal(0, 1, f), "q_i": rng.normal(0, 1, f), "q_j": rng.normal(0, 1, f),
                  "b_i": float(rng.normal()), "b_j": float(rng.normal())}
        reg = float(rng.uniform(0, 0.1))
        analytic = bpr_pair_gradient(reg=reg, **params)
        numeric = _fd_gradient(params, reg)
        for name in numeric:
            assert _rel_err(analytic[name], numeric[name]) < 1e-4


def test_bpr_loss_stable_for_large_margins():
    p = np.array([30.0])
    assert bpr_pair_loss(p, np.array([30.0]), np.array([-30.0]), 0.0, 0.0, 0.0) == pytest.approx(0.0, abs=1e-12)
    assert bpr_pair_loss(p, np.array([-30.0]), np.array([30.0]), 0.0, 0.0, 0.0) == pytest.approx(1800.0)


def test_bpr_zero_epochs_scores_from_initialisation():
    data = _low_rank(8, 10, 1, 2, density=0.5)
    model = BPR(factors=4, epochs=0, seed=5).fit(data)
    rng = np.random.default_rng(5)
    P0, Q0 = rng.normal(0, 0.1, (8, 4)), rng.normal(0, 0.1, (10, 4))
    assert np.array_equal(model.score_block(np.arange(8)), P0 @ Q0.T)


def _preference_data(seed):
    # two taste clusters, each user rates mostly from its own half of the catalog
    rng = np.random.default_rng(seed)
    recs = []
    for u in range(80):
        own = np.arange(0, 40) if u % 2 == 0 else np.arange(40, 80)
        for i in rng.choice(own, 15, replace=False):
            recs.append((u, int(i), 1.0))
    return InteractionSet.from_records(recs)


def test_bpr_auc_above_chance():
    from mfair.dataset import split_train_test

    train, test = split_train_test(_preference_data(0), 0.8, seed=0)
    model = BPR(factors=8, lr=0.05, reg=0.01, epochs=40, seed=0).fit(train)
    assert model.auc(test, seed=1) > 0.7


# -- list invariants and IO ------------------------------------------------

@pytest.mark.parametrize("algorithm", ["mostpop", "random", "userknn", "itemknn", "biasedmf", "bpr"])
def test_list_invariants(algorithm):
    data, cont = synth_dataset(SynthSpec(n_users=40, n_items=60, seed=3, ratings_per_user=12))
    cat = build_catalog(data, cont)
    lists = recommend(algorithm, data, cat, n=25, seed=1, epochs=3)
    profiles = data.profiles()
    assert len(lists) == 40
    for rec in lists:
        _check_list(rec, profiles[rec.user], 25)
    again = recommend(algorithm, data, cat, n=25, seed=1, epochs=3)
    assert [r.entries for r in lists] == [r.entries for r in again]


def test_candidates_restricted_to_catalog():
    data, cont = synth_dataset(SynthSpec(n_users=20, n_items=30, seed=1, ratings_per_user=8))
    cont = {i: c for i, c in cont.items() if i % 4}
    cat = build_catalog(data, cont)
    for rec in most_popular(data, cat, n=30):
        assert all(i in cat for i in rec.items)


def test_unknown_algorithm():
    data = _records(FOUR_USERS)
    with pytest.raises(RecommenderError):
        recommend("svdpp", data, _catalog_for(data))


@settings(max_examples=30, deadline=None)
@given(st.lists(st.tuples(st.sampled_from(["u1", "u2", "u07"]), st.integers(0, 30),
                          st.floats(-5, 5, allow_nan=False)), min_size=1, max_size=40))
def test_list_file_round_trip(tmp_path_factory, rows):
    grouped = {}
    for u, i, s in rows:
        grouped.setdefault(u, {})[f"i{i}"] = s
    lists = [RecommendationList(u, [ScoredItem(i, s) for i, s in sorted(d.items(), key=lambda t: -t[1])])
             for u, d in grouped.items()]
    path = tmp_path_factory.mktemp("lists") / "lists.tsv"
    write_lists(lists, path)
    back = read_lists(path)
    assert [(r.user, r.entries) for r in back] == [(r.user, r.entries) for r in lists]


def test_read_lists_rejects_gaps(tmp_path):
    p = tmp_path / "bad.tsv"
    p.write_text("1\t1\t5\t0.9\n1\t3\t6\t0.5\n")
    with pytest.raises(RecommenderError):
        read_lists(p)
