"""Sample-selection strategies for choosing which pool points to label.

Every selector returns indices into the full pool, drawn only from points
not yet labeled.  Stochastic selectors take a seed or a
``numpy.random.Generator`` and are reproducible under a fixed seed.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
from scipy.spatial.distance import cdist

from .ensemble import deep_ensemble_probs, top_two
from .exceptions import BudgetError, ConfigurationError

UNCERTAINTY_RULES = ("confidence", "entropy", "margin", "avg_kld")
# Direction in which each score marks the most informative points.
RULE_DIRECTION = {
    "confidence": "lowest",
    "entropy": "highest",
    "margin": "lowest",
    "avg_kld": "highest",
}
ACQUISITIONS = ("uniform",) + UNCERTAINTY_RULES + ("kcg", "clue", "badge")


@dataclass
class SelectionState:
    """Labeled batches so far and the budget they are drawn against.

    ``per_round`` is ``floor(budget / n_rounds)``.
    """

    pool_size: int
    budget: int
    n_rounds: int
    batches: list = field(default_factory=list)

    def __post_init__(self):
        if self.pool_size < 0 or self.budget < 0 or self.n_rounds <= 0:
            raise ConfigurationError("pool_size/budget must be >= 0 and n_rounds > 0")
        if self.budget > self.pool_size:
            raise BudgetError(f"budget {self.budget} exceeds pool size {self.pool_size}")

    @property
    def per_round(self) -> int:
        return self.budget // self.n_rounds

    @property
    def selected(self) -> np.ndarray:
        if not self.batches:
            return np.zeros(0, dtype=np.int64)
        return np.concatenate(self.batches).astype(np.int64)

    @property
    def n_selected(self) -> int:
        return sum(len(b) for b in self.batches)

    def selected_mask(self) -> np.ndarray:
        mask = np.zeros(self.pool_size, dtype=bool)
        mask[self.selected] = True
        return mask

    def remaining(self) -> np.ndarray:
        return np.flatnonzero(~self.selected_mask())

    def add(self, batch) -> None:
        batch = np.asarray(batch, dtype=np.int64)
        if len(np.unique(batch)) != len(batch):
            raise BudgetError("batch contains repeated indices")
        if batch.size and (batch.min() < 0 or batch.max() >= self.pool_size):
            raise BudgetError("batch index outside the pool")
        if self.selected_mask()[batch].any():
            raise BudgetError("batch overlaps an earlier batch")
        if self.n_selected + len(batch) > self.budget:
            raise BudgetError(
                f"labeling {len(batch)} more points exceeds budget {self.budget}")
        self.batches.append(batch)


def _rng(seed) -> np.random.Generator:
    return np.random.default_rng(seed)


def _pool_and_m(state: Optional[SelectionState], pool, m, n: int):
    if pool is None:
        pool = state.remaining() if state is not None else np.arange(n)
    pool = np.asarray(pool, dtype=np.int64)
    if m is None:
        if state is None:
            raise ConfigurationError("need either a SelectionState or an explicit m")
        m = state.per_round
    m = int(m)
    if m < 0 or m > pool.shape[0]:
        raise BudgetError(f"cannot select {m} points from a pool of {pool.shape[0]}")
    return pool, m


def _as_member_list(member_probs) -> list:
    if isinstance(member_probs, np.ndarray) and member_probs.ndim == 2:
        return [member_probs]
    return [np.asarray(p, dtype=np.float64) for p in member_probs]


def _entropy(probs: np.ndarray) -> np.ndarray:
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(probs > 0, probs * np.log(probs), 0.0)
    return -terms.sum(axis=1)


def uncertainty_score(member_probs, rule: str) -> np.ndarray:
    """Per-point uncertainty score of a single model or an ensemble.

    Scores are computed on the members' mean probabilities, so a single
    matrix gives the plain single-model score.  ``avg_kld`` is the mean KL
    divergence of each member from that mean; it is all zeros for N = 1.
    """
    if rule not in UNCERTAINTY_RULES:
        raise ConfigurationError(f"unknown uncertainty rule {rule!r}")
    members = _as_member_list(member_probs)
    mean = deep_ensemble_probs(members)
    if rule == "confidence":
        return mean.max(axis=1)
    if rule == "margin":
        return top_two(mean)[2]
    if rule == "entropy":
        return _entropy(mean)
    kld = np.zeros(mean.shape[0])
    for p in members:
        with np.errstate(divide="ignore", invalid="ignore"):
            terms = np.where(p > 0, p * (np.log(p) - np.log(mean)), 0.0)
        kld += terms.sum(axis=1)
    return kld / len(members)


def select_top_m(scores, direction: str, state: Optional[SelectionState] = None,
                 rng=None, *, m: Optional[int] = None, pool=None) -> np.ndarray:
    """The ``m`` pool points with the lowest or highest scores.

    Ties are broken by a seeded shuffle of the pool before a stable sort.
    """
    scores = np.asarray(scores, dtype=np.float64)
    pool, m = _pool_and_m(state, pool, m, scores.shape[0])
    if direction not in ("lowest", "highest"):
        raise ConfigurationError(f"direction must be 'lowest' or 'highest', got {direction!r}")
    shuffled = _rng(rng).permutation(pool)
    key = scores[shuffled] if direction == "lowest" else -scores[shuffled]
    return shuffled[np.argsort(key, kind="stable")[:m]]


def select_uniform(state: Optional[SelectionState] = None, rng=None, *,
                   m: Optional[int] = None, pool=None, n: Optional[int] = None) -> np.ndarray:
    if state is None and pool is None and n is None:
        raise ConfigurationError("need a SelectionState, a pool or n")
    pool, m = _pool_and_m(state, pool, m, n or 0)
    return _rng(rng).choice(pool, size=m, replace=False)


def k_center_greedy(embeddings, centers, m: int, pool=None, rng=None) -> np.ndarray:
    """Greedy k-center selection over Euclidean distances.

    Each pick is the pool point farthest from its nearest current center.
    With no initial centers the first pick is a seeded-random pool point.
    """
    E = np.asarray(embeddings, dtype=np.float64)
    n = E.shape[0]
    centers = np.asarray(list(centers) if centers is not None else [], dtype=np.int64)
    if pool is None:
        mask = np.ones(n, dtype=bool)
        mask[centers] = False
        pool = np.flatnonzero(mask)
    pool, m = _pool_and_m(None, pool, m, n)
    if m == 0:
        return np.zeros(0, dtype=np.int64)
    P = E[pool]
    picks = []
    if centers.size:
        min_d = np.full(pool.shape[0], np.inf)
        for start in range(0, centers.size, 1024):
            d = cdist(P, E[centers[start:start + 1024]]).min(axis=1)
            np.minimum(min_d, d, out=min_d)
    else:
        first = int(_rng(rng).integers(pool.shape[0]))
        picks.append(first)
        min_d = np.sqrt(((P - P[first]) ** 2).sum(axis=1))
        min_d[first] = -1.0
    while len(picks) < m:
        j = int(np.argmax(min_d))
        picks.append(j)
        d = np.sqrt(((P - P[j]) ** 2).sum(axis=1))
        np.minimum(min_d, d, out=min_d)
        min_d[picks] = -1.0
    return pool[np.asarray(picks, dtype=np.int64)]


def _sq_dists(X: np.ndarray, c: np.ndarray) -> np.ndarray:
    return ((X - c) ** 2).sum(axis=1)


def weighted_kmeans(X, k: int, weights=None, rng=None, max_iter: int = 100,
                    tol: float = 1e-6):
    """Weighted Lloyd's k-means with weighted k-means++ seeding.

    Stops after ``max_iter`` iterations or once the relative centroid shift
    drops below ``tol``.  Empty clusters are reseeded to the point farthest
    from its assigned centroid.

    Returns
    -------
    centroids : ndarray of shape (k, d)
    labels : ndarray of shape (n,)
    """
    X = np.asarray(X, dtype=np.float64)
    n = X.shape[0]
    if not 1 <= k <= n:
        raise ConfigurationError(f"k must lie in [1, {n}], got {k}")
    rng = _rng(rng)
    w = np.ones(n) if weights is None else np.asarray(weights, dtype=np.float64)
    if w.sum() <= 0:
        w = np.ones(n)

    first = rng.choice(n, p=w / w.sum())
    centroids = [X[first]]
    d2 = _sq_dists(X, X[first])
    for _ in range(1, k):
        p = w * d2
        if p.sum() <= 0:
            p = (d2 > 0).astype(np.float64)
            if p.sum() == 0:
                p = np.ones(n)
        idx = rng.choice(n, p=p / p.sum())
        centroids.append(X[idx])
        d2 = np.minimum(d2, _sq_dists(X, X[idx]))
    C = np.array(centroids)

    labels = np.zeros(n, dtype=np.int64)
    for _ in range(max_iter):
        D = cdist(X, C, "sqeuclidean")
        labels = D.argmin(axis=1)
        new_C = C.copy()
        for j in range(k):
            members = labels == j
            wj = w[members].sum()
            if wj > 0:
                new_C[j] = (w[members, None] * X[members]).sum(axis=0) / wj
            elif members.any():
                new_C[j] = X[members].mean(axis=0)
            else:
                far = int(np.argmax(D[np.arange(n), labels]))
                new_C[j] = X[far]
                labels[far] = j
        shift = np.linalg.norm(new_C - C) / max(np.linalg.norm(C), 1e-12)
        C = new_C
        if shift < tol:
            break
    labels = cdist(X, C, "sqeuclidean").argmin(axis=1)
    return C, labels


def tempered_entropy(probs, temperature: float = 1.0) -> np.ndarray:
    """Entropy of ``probs ** (1 / T)`` renormalized per row."""
    if temperature <= 0:
        raise ConfigurationError("temperature must be positive")
    p = np.asarray(probs, dtype=np.float64)
    with np.errstate(divide="ignore"):
        logits = np.log(p) / temperature
    logits -= logits.max(axis=1, keepdims=True)
    q = np.exp(logits)
    q /= q.sum(axis=1, keepdims=True)
    return _entropy(q)


def clue_select(embeddings, probs, state: Optional[SelectionState] = None, rng=None,
                temperature: float = 1.0, *, m: Optional[int] = None,
                pool=None) -> np.ndarray:
    """Clustering of uncertainty-weighted embeddings.

    Runs weighted k-means with ``m`` clusters over the pool embeddings,
    weighted by the tempered predictive entropy, and returns the pool point
    nearest to each centroid (next-nearest when already taken).
    """
    E = np.asarray(embeddings, dtype=np.float64)
    probs = deep_ensemble_probs(_as_member_list(probs))
    pool, m = _pool_and_m(state, pool, m, E.shape[0])
    rng = _rng(rng)
    if m == 0:
        return np.zeros(0, dtype=np.int64)
    if m == pool.shape[0]:
        return pool.copy()
    P = E[pool]
    if np.all(np.ptp(P, axis=0) == 0):
        return rng.choice(pool, size=m, replace=False)
    weights = tempered_entropy(probs[pool], temperature)
    C, _ = weighted_kmeans(P, m, weights, rng)
    D = cdist(C, P, "sqeuclidean")
    taken = np.zeros(pool.shape[0], dtype=bool)
    picks = []
    for j in range(m):
        order = np.argsort(D[j], kind="stable")
        nearest = order[~taken[order]][0]
        taken[nearest] = True
        picks.append(nearest)
    return pool[np.asarray(picks, dtype=np.int64)]


def badge_select(grad_embeddings, state: Optional[SelectionState] = None, rng=None, *,
                 m: Optional[int] = None, pool=None) -> np.ndarray:
    """k-means++ seeding over gradient embeddings.

    The first pick is uniform over the pool; each later pick is drawn with
    probability proportional to the squared distance to the nearest point
    picked so far.  When every remaining distance is zero the pick falls
    back to uniform over the unpicked points.
    """
    G = np.asarray(grad_embeddings, dtype=np.float64)
    pool, m = _pool_and_m(state, pool, m, G.shape[0])
    rng = _rng(rng)
    if m == 0:
        return np.zeros(0, dtype=np.int64)
    P = G[pool]
    picked = np.zeros(pool.shape[0], dtype=bool)
    first = int(rng.integers(pool.shape[0]))
    picks = [first]
    picked[first] = True
    d2 = _sq_dists(P, P[first])
    while len(picks) < m:
        weights = np.where(picked, 0.0, d2)
        total = weights.sum()
        if total <= 0:
            free = np.flatnonzero(~picked)
            j = int(rng.choice(free))
        else:
            j = int(rng.choice(pool.shape[0], p=weights / total))
        picks.append(j)
        picked[j] = True
        d2 = np.minimum(d2, _sq_dists(P, P[j]))
    return pool[np.asarray(picks, dtype=np.int64)]


def concat_members(arrays: Sequence[np.ndarray]) -> np.ndarray:
    """Concatenate per-member features column-wise in member order."""
    return np.concatenate([np.asarray(a, dtype=np.float64) for a in arrays], axis=1)
