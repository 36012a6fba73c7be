"""Bias-unaware top-n recommenders: MostPop, RandomGuess, user/item KNN,
biased MF and BPR.

All generators return one :class:`RecommendationList` per training user,
ordered by score (descending) with ties broken by item id, never containing
an item from the user's training profile.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Hashable, Iterable, Literal, NamedTuple

import numpy as np
import scipy.sparse as sp
from numba import njit

from .dataset import InteractionSet, ItemCatalog

logger = logging.getLogger(__name__)

BLOCK = 256


class RecommenderError(RuntimeError):
    pass


class ScoredItem(NamedTuple):
    item: Hashable
    score: float


@dataclass
class RecommendationList:
    """Ranked list for one user; position ``p`` is ``entries[p - 1]``."""

    user: Hashable
    entries: list[ScoredItem] = field(default_factory=list)

    def __len__(self):
        return len(self.entries)

    @property
    def items(self) -> list:
        return [e.item for e in self.entries]

    def top(self, k: int) -> list:
        return [e.item for e in self.entries[:k]]

    def position(self, item) -> int:
        for pos, e in enumerate(self.entries, 1):
            if e.item == item:
                return pos
        raise KeyError(item)

    def copy(self) -> "RecommendationList":
        return RecommendationList(self.user, list(self.entries))


class _Index:
    """Dense integer indices for users and items of a training set."""

    def __init__(self, train: InteractionSet, catalog: ItemCatalog | None = None):
        frame = train.frame
        self.users = np.sort(frame["user"].unique())
        items = set(frame["item"].unique())
        if catalog is not None:
            items |= set(catalog.entries)
        self.items = np.array(sorted(items), dtype=object if _mixed(items) else None)
        self.user_pos = {u: n for n, u in enumerate(self.users.tolist())}
        self.item_pos = {i: n for n, i in enumerate(self.items.tolist())}
        rows = frame["user"].map(self.user_pos).to_numpy()
        cols = frame["item"].map(self.item_pos).to_numpy()
        self.rows, self.cols = rows, cols
        self.ratings = frame["rating"].to_numpy(dtype=float)
        shape = (len(self.users), len(self.items))
        self.R = sp.csr_matrix((self.ratings, (rows, cols)), shape=shape)
        self.R.sort_indices()
        self.seen = sp.csr_matrix((np.ones_like(self.ratings), (rows, cols)), shape=shape)
        self.seen.sort_indices()
        if catalog is None:
            self.candidates = np.ones(len(self.items), dtype=bool)
        else:
            self.candidates = np.array([i in catalog for i in self.items.tolist()])


def _mixed(values) -> bool:
    return len({type(v) for v in values}) > 1


def _top_n(row: np.ndarray, n: int) -> np.ndarray:
    """Indices of the n best finite scores; ties by index (== item id) asc."""
    idx = np.flatnonzero(np.isfinite(row))
    if len(idx) > n:
        vals = row[idx]
        thr = vals[np.argpartition(-vals, n - 1)[n - 1]]
        idx = idx[vals >= thr]
    vals = row[idx]
    return idx[np.lexsort((idx, -vals))][:n]


def rank_lists(index: _Index, score_block, n: int, backfill: np.ndarray | None = None) -> list[RecommendationList]:
    """Turn a block scorer into ranked lists for every user.

    ``score_block(rows)`` returns a (len(rows), n_items) array; NaN marks an
    item without scoring evidence.  Seen and non-catalog items are masked.
    """
    if n < 1:
        raise RecommenderError("n must be >= 1")
    items = index.items.tolist()
    users = index.users.tolist()
    out = []
    n_users = len(index.users)
    for start in range(0, n_users, BLOCK):
        rows = np.arange(start, min(start + BLOCK, n_users))
        scores = np.array(score_block(rows), dtype=float)
        scores[:, ~index.candidates] = np.nan
        seen = index.seen[rows]
        scores[seen.nonzero()] = np.nan
        for r, row in zip(rows, scores):
            top = _top_n(row, n)
            entries = [ScoredItem(items[c], float(row[c])) for c in top]
            if backfill is not None and len(entries) < n:
                entries += _backfill(row, top, backfill, n - len(entries), items, index.seen[r].indices,
                                     index.candidates)
            out.append(RecommendationList(users[r], entries))
    return out


def _backfill(row, taken, popularity, count, items, seen_cols, candidates):
    mask = candidates.copy()
    mask[taken] = False
    mask[seen_cols] = False
    pool = np.flatnonzero(mask)
    pool = pool[np.lexsort((pool, -popularity[pool]))][:count]
    lo = min((row[t] for t in taken), default=0.0)
    return [ScoredItem(items[c], float(lo - 1.0 - rank)) for rank, c in enumerate(pool)]


def write_lists(lists: Iterable[RecommendationList], path) -> None:
    """Serialise lists as ``user<TAB>rank<TAB>item<TAB>score``."""
    with open(path, "w", encoding="utf-8") as fh:
        for rec in lists:
            for rank, (item, score) in enumerate(rec.entries, 1):
                fh.write(f"{rec.user}\t{rank}\t{item}\t{score!r}\n")


def read_lists(path) -> list[RecommendationList]:
    from .dataset import _coerce_ids

    rows = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            parts = line.rstrip("\n").split("\t")
            if len(parts) != 4:
                raise RecommenderError(f"{path}:{lineno}: expected user, rank, item, score")
            rows.append(parts)
    users = _coerce_ids([r[0] for r in rows])
    items = _coerce_ids([r[2] for r in rows])
    grouped: dict = {}
    for u, i, r in zip(users, items, rows):
        grouped.setdefault(u, []).append((int(r[1]), ScoredItem(i, float(r[3]))))
    out = []
    for u, entries in grouped.items():
        entries.sort(key=lambda t: t[0])
        ranks = [t[0] for t in entries]
        if ranks != list(range(1, len(ranks) + 1)):
            raise RecommenderError(f"{path}: ranks for user {u} are not 1..n")
        out.append(RecommendationList(u, [t[1] for t in entries]))
    return out


def most_popular(train: InteractionSet, catalog: ItemCatalog, n: int = 150) -> list[RecommendationList]:
    """Score every catalog item by its training popularity."""
    index = _Index(train, catalog)
    pop = np.array([catalog[i].popularity if i in catalog else 0 for i in index.items.tolist()], dtype=float)
    return rank_lists(index, lambda rows: np.broadcast_to(pop, (len(rows), len(pop))), n)


def random_guess(train: InteractionSet, catalog: ItemCatalog, n: int = 150, seed: int = 0) -> list[RecommendationList]:
    """Uniform random scores per (user, item), drawn row by row from one seeded stream."""
    index = _Index(train, catalog)
    rng = np.random.default_rng(seed)
    n_items = len(index.items)

    def score(rows):
        s = rng.random((len(rows), n_items))
        # open interval (0, 1)
        s[s == 0.0] = np.nextafter(0.0, 1.0)
        return s

    return rank_lists(index, score, n)


def _center_rows(X: sp.csr_matrix) -> sp.csr_matrix:
    X = X.tocsr(copy=True)
    counts = np.diff(X.indptr)
    sums = np.asarray(X.sum(axis=1)).ravel()
    means = np.divide(sums, counts, out=np.zeros_like(sums), where=counts > 0)
    X.data -= np.repeat(means, counts)
    return X


def _unit_centered(X: sp.csr_matrix) -> sp.csr_matrix:
    Xc = _center_rows(X)
    norms = np.sqrt(np.asarray(Xc.multiply(Xc).sum(axis=1)).ravel())
    inv = np.divide(1.0, norms, out=np.zeros_like(norms), where=norms > 1e-12)
    return (sp.diags(inv) @ Xc).tocsr()


def centered_cosine(X: sp.csr_matrix, rows=None) -> np.ndarray:
    """Cosine similarity between mean-centred rows of ``X``.

    Each row is centred on the mean of its observed entries; rows whose
    centred vector is zero get similarity 0 with everything.
    """
    Xn = _unit_centered(X)
    left = Xn if rows is None else Xn[rows]
    return (left @ Xn.T).toarray()


class KNNRecommender:
    """Neighbourhood CF on mean-centred cosine similarity.

    Each user (``mode="user"``) or item (``mode="item"``) keeps its
    ``k_neighbors`` most similar positive-similarity neighbours.  A
    prediction is the similarity-weighted average of the neighbours'
    ratings that exist; pairs without any such rating get no score.
    """

    def __init__(self, mode: Literal["user", "item"] = "user", k_neighbors: int = 50):
        if mode not in ("user", "item"):
            raise RecommenderError(f"unknown knn mode {mode!r}")
        if k_neighbors < 1:
            raise RecommenderError("k_neighbors must be >= 1")
        self.mode = mode
        self.k_neighbors = k_neighbors

    def fit(self, train: InteractionSet, catalog: ItemCatalog | None = None) -> "KNNRecommender":
        self.index = idx = _Index(train, catalog)
        X = idx.R if self.mode == "user" else idx.R.T.tocsr()
        m = X.shape[0]
        Xn = _unit_centered(X)
        XnT = Xn.T.tocsc()
        rows, cols, vals = [], [], []
        for start in range(0, m, BLOCK):
            block = np.arange(start, min(start + BLOCK, m))
            S = (Xn[block] @ XnT).toarray()
            S[np.arange(len(block)), block] = -np.inf
            for r, srow in zip(block, S):
                cand = np.flatnonzero(srow > 0)
                if len(cand) > self.k_neighbors:
                    cand = cand[np.lexsort((cand, -srow[cand]))][: self.k_neighbors]
                rows.extend([r] * len(cand))
                cols.extend(cand.tolist())
                vals.extend(srow[cand].tolist())
        self.W = sp.csr_matrix((vals, (rows, cols)), shape=(m, m))
        return self

    def score_block(self, rows: np.ndarray) -> np.ndarray:
        idx = self.index
        if self.mode == "user":
            W = self.W[rows]
            num = (W @ idx.R).toarray()
            den = (abs(W) @ idx.seen).toarray()
        else:
            R, B = idx.R[rows], idx.seen[rows]
            num = (R @ self.W.T).toarray()
            den = (B @ abs(self.W).T).toarray()
        with np.errstate(invalid="ignore", divide="ignore"):
            return np.where(den > 0, num / den, np.nan)

    def predict(self, user, item) -> float:
        r = self.index.user_pos[user]
        return float(self.score_block(np.array([r]))[0, self.index.item_pos[item]])

    def recommend(self, n: int = 150, backfill: bool = False) -> list[RecommendationList]:
        pop = np.asarray(self.index.seen.sum(axis=0)).ravel() if backfill else None
        return rank_lists(self.index, self.score_block, n, backfill=pop)


def knn(train: InteractionSet, mode: Literal["user", "item"] = "user", k_neighbors: int = 50, n: int = 150,
        catalog: ItemCatalog | None = None, backfill: bool = False) -> list[RecommendationList]:
    return KNNRecommender(mode, k_neighbors).fit(train, catalog).recommend(n, backfill=backfill)


@njit(cache=True)
def _mf_epoch(users, items, ratings, order, mu, bu, bi, P, Q, lr, reg):
    f = P.shape[1]
    for t in order:
        u = users[t]
        i = items[t]
        pred = mu + bu[u] + bi[i]
        for k in range(f):
            pred += P[u, k] * Q[i, k]
        e = ratings[t] - pred
        bu[u] += lr * (e - reg * bu[u])
        bi[i] += lr * (e - reg * bi[i])
        for k in range(f):
            pu = P[u, k]
            qi = Q[i, k]
            P[u, k] += lr * (e * qi - reg * pu)
            Q[i, k] += lr * (e * pu - reg * qi)


class BiasedMF:
    """Rating prediction ``mu + b_u + b_i + p_u . q_i`` trained by squared-error SGD."""

    def __init__(self, factors=10, lr=0.01, reg=0.01, epochs=30, seed=0, init_std=0.1):
        if factors < 1:
            raise RecommenderError("factors must be >= 1")
        if epochs < 0:
            raise RecommenderError("epochs must be >= 0")
        self.factors, self.lr, self.reg, self.epochs = factors, lr, reg, epochs
        self.seed, self.init_std = seed, init_std

    def fit(self, train: InteractionSet, catalog: ItemCatalog | None = None) -> "BiasedMF":
        self.index = idx = _Index(train, catalog)
        rng = np.random.default_rng(self.seed)
        n_users, n_items = len(idx.users), len(idx.items)
        self.mu = float(idx.ratings.mean())
        self.bu = np.zeros(n_users)
        self.bi = np.zeros(n_items)
        self.P = rng.normal(0.0, self.init_std, (n_users, self.factors))
        self.Q = rng.normal(0.0, self.init_std, (n_items, self.factors))
        users = idx.rows.astype(np.int64)
        items = idx.cols.astype(np.int64)
        self.rmse_history = []
        for epoch in range(self.epochs):
            order = rng.permutation(len(users))
            _mf_epoch(users, items, idx.ratings, order, self.mu, self.bu, self.bi, self.P, self.Q,
                      float(self.lr), float(self.reg))
            rmse = self.training_rmse()
            if not math.isfinite(rmse):
                raise RecommenderError(f"biased MF diverged at epoch {epoch + 1} (rmse={rmse})")
            self.rmse_history.append(rmse)
            logger.debug("biasedmf epoch %d rmse %.5f", epoch + 1, rmse)
        return self

    def _predict_idx(self, u, i):
        return self.mu + self.bu[u] + self.bi[i] + np.einsum("ij,ij->i", self.P[u], self.Q[i])

    def training_rmse(self) -> float:
        idx = self.index
        err = idx.ratings - self._predict_idx(idx.rows, idx.cols)
        return float(np.sqrt(np.mean(err * err)))

    def predict(self, user, item) -> float:
        u, i = self.index.user_pos[user], self.index.item_pos[item]
        return float(self.mu + self.bu[u] + self.bi[i] + self.P[u] @ self.Q[i])

    def score_block(self, rows):
        return self.mu + self.bu[rows, None] + self.bi[None, :] + self.P[rows] @ self.Q.T

    def recommend(self, n: int = 150) -> list[RecommendationList]:
        return rank_lists(self.index, self.score_block, n)


def biased_mf(train: InteractionSet, factors=10, lr=0.01, reg=0.01, epochs=30, seed=0, n=150,
              catalog: ItemCatalog | None = None) -> list[RecommendationList]:
    return BiasedMF(factors, lr, reg, epochs, seed).fit(train, catalog).recommend(n)


def bpr_pair_loss(p_u, q_i, q_j, b_i, b_j, reg) -> float:
    """Regularised negative log-likelihood of preferring i over j for u."""
    x = b_i - b_j + p_u @ (q_i - q_j)
    penalty = p_u @ p_u + q_i @ q_i + q_j @ q_j + b_i * b_i + b_j * b_j
    return float(np.logaddexp(0.0, -x) + 0.5 * reg * penalty)


@njit(cache=True)
def _bpr_grad(p_u, q_i, q_j, b_i, b_j, reg, g_pu, g_qi, g_qj):
    f = p_u.shape[0]
    x = b_i - b_j
    for k in range(f):
        x += p_u[k] * (q_i[k] - q_j[k])
    # d/dx of log(1 + exp(-x)) is -sigmoid(-x)
    if x >= 0:
        z = math.exp(-x)
        s = z / (1.0 + z)
    else:
        s = 1.0 / (1.0 + math.exp(x))
    for k in range(f):
        g_pu[k] = -s * (q_i[k] - q_j[k]) + reg * p_u[k]
        g_qi[k] = -s * p_u[k] + reg * q_i[k]
        g_qj[k] = s * p_u[k] + reg * q_j[k]
    return -s + reg * b_i, s + reg * b_j


def bpr_pair_gradient(p_u, q_i, q_j, b_i, b_j, reg):
    """Analytic gradient of :func:`bpr_pair_loss` (the one used in training)."""
    g = [np.empty_like(p_u, dtype=float) for _ in range(3)]
    gb_i, gb_j = _bpr_grad(np.asarray(p_u, float), np.asarray(q_i, float), np.asarray(q_j, float),
                           float(b_i), float(b_j), float(reg), *g)
    return {"p_u": g[0], "q_i": g[1], "q_j": g[2], "b_i": gb_i, "b_j": gb_j}


@njit(cache=True)
def _bpr_epoch(us, iis, js, P, Q, b, lr, reg):
    f = P.shape[1]
    g_pu = np.empty(f)
    g_qi = np.empty(f)
    g_qj = np.empty(f)
    for t in range(us.shape[0]):
        u, i, j = us[t], iis[t], js[t]
        gb_i, gb_j = _bpr_grad(P[u], Q[i], Q[j], b[i], b[j], reg, g_pu, g_qi, g_qj)
        for k in range(f):
            P[u, k] -= lr * g_pu[k]
            Q[i, k] -= lr * g_qi[k]
            Q[j, k] -= lr * g_qj[k]
        b[i] -= lr * gb_i
        b[j] -= lr * gb_j


def _sample_negatives(rng, users, n_items, seen_keys):
    """Uniform negatives per user, rejecting items in ``seen_keys`` (sorted u*n_items+i)."""
    neg = rng.integers(0, n_items, size=len(users))
    bad = np.arange(len(users))
    for _ in range(1000):
        keys = users[bad] * n_items + neg[bad]
        pos = np.searchsorted(seen_keys, keys)
        pos[pos == len(seen_keys)] = 0
        hit = seen_keys[pos] == keys
        bad = bad[hit]
        if len(bad) == 0:
            return neg
        neg[bad] = rng.integers(0, n_items, size=len(bad))
    raise RecommenderError("negative sampling failed: users with (almost) every item seen")


class BPR:
    """Bayesian personalised ranking, ``x_ui = b_i + p_u . q_i``, SGD over sampled triples.

    Each epoch draws as many (user, positive, negative) triples as there are
    training interactions.
    """

    def __init__(self, factors=10, lr=0.01, reg=0.01, epochs=30, seed=0, init_std=0.1):
        if factors < 1:
            raise RecommenderError("factors must be >= 1")
        if epochs < 0:
            raise RecommenderError("epochs must be >= 0")
        self.factors, self.lr, self.reg, self.epochs = factors, lr, reg, epochs
        self.seed, self.init_std = seed, init_std

    def fit(self, train: InteractionSet, catalog: ItemCatalog | None = None) -> "BPR":
        self.index = idx = _Index(train, catalog)
        rng = np.random.default_rng(self.seed)
        n_users, n_items = len(idx.users), len(idx.items)
        self.P = rng.normal(0.0, self.init_std, (n_users, self.factors))
        self.Q = rng.normal(0.0, self.init_std, (n_items, self.factors))
        self.b = np.zeros(n_items)
        users = idx.rows.astype(np.int64)
        items = idx.cols.astype(np.int64)
        seen_keys = np.unique(users * n_items + items)
        for epoch in range(self.epochs):
            pick = rng.integers(0, len(users), size=len(users))
            us, iis = users[pick], items[pick]
            js = _sample_negatives(rng, us, n_items, seen_keys)
            _bpr_epoch(us, iis, js, self.P, self.Q, self.b, float(self.lr), float(self.reg))
            if not (np.isfinite(self.P).all() and np.isfinite(self.Q).all()):
                raise RecommenderError(f"BPR diverged at epoch {epoch + 1}")
        return self

    def predict(self, user, item) -> float:
        u, i = self.index.user_pos[user], self.index.item_pos[item]
        return float(self.b[i] + self.P[u] @ self.Q[i])

    def score_block(self, rows):
        return self.b[None, :] + self.P[rows] @ self.Q.T

    def recommend(self, n: int = 150) -> list[RecommendationList]:
        return rank_lists(self.index, self.score_block, n)

    def auc(self, held_out: InteractionSet, n_samples: int | None = None, seed: int = 0) -> float:
        """Fraction of held-out (positive, random unseen negative) pairs ranked correctly."""
        idx = self.index
        frame = held_out.frame
        mask = frame["user"].isin(idx.user_pos) & frame["item"].isin(idx.item_pos)
        frame = frame[mask]
        if frame.empty:
            raise RecommenderError("no held-out pairs overlap the trained model")
        rng = np.random.default_rng(seed)
        us = frame["user"].map(idx.user_pos).to_numpy().astype(np.int64)
        ps = frame["item"].map(idx.item_pos).to_numpy().astype(np.int64)
        if n_samples is not None and n_samples < len(us):
            pick = rng.choice(len(us), size=n_samples, replace=False)
            us, ps = us[pick], ps[pick]
        n_items = len(idx.items)
        known = np.unique(np.concatenate([idx.rows * n_items + idx.cols, us * n_items + ps]))
        ns = _sample_negatives(rng, us, n_items, known)
        xp = self.b[ps] + np.einsum("ij,ij->i", self.P[us], self.Q[ps])
        xn = self.b[ns] + np.einsum("ij,ij->i", self.P[us], self.Q[ns])
        return float(np.mean((xp > xn) + 0.5 * (xp == xn)))


def bpr(train: InteractionSet, factors=10, lr=0.01, reg=0.01, epochs=30, seed=0, n=150,
        catalog: ItemCatalog | None = None) -> list[RecommendationList]:
    return BPR(factors, lr, reg, epochs, seed).fit(train, catalog).recommend(n)


ALGORITHMS = ("mostpop", "random", "userknn", "itemknn", "biasedmf", "bpr")


def recommend(algorithm: str, train: InteractionSet, catalog: ItemCatalog, n: int = 150, seed: int = 0,
              **params) -> list[RecommendationList]:
    """Dispatch by algorithm name; candidates are restricted to ``catalog``."""
    if algorithm == "mostpop":
        return most_popular(train, catalog, n)
    if algorithm == "random":
        return random_guess(train, catalog, n, seed)
    if algorithm in ("userknn", "itemknn"):
        return knn(train, algorithm[:-3], params.get("k_neighbors", 50), n, catalog=catalog,
                   backfill=params.get("backfill", False))
    if algorithm == "biasedmf":
        return biased_mf(train, params.get("factors", 10), params.get("lr", 0.01), params.get("reg", 0.01),
                         params.get("epochs", 30), seed, n, catalog=catalog)
    if algorithm == "bpr":
        return bpr(train, params.get("factors", 10), params.get("lr", 0.01), params.get("reg", 0.01),
                   params.get("epochs", 30), seed, n, catalog=catalog)
    raise RecommenderError(f"unknown algorithm {algorithm!r}; choose from {ALGORITHMS}")
