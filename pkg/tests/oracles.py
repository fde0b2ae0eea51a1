"""Independent reference implementations used as test oracles.

These are deliberately naive (explicit loops, no shared code with the
package) so that agreement with the package is meaningful.
"""

from __future__ import annotations

import math

import numpy as np


# --- selective prediction metrics -------------------------------------------

def sweep_points(scores, correct, selected=None):
    """(tau, coverage, accuracy, coverage_star) for every candidate threshold.

    Candidate thresholds are -inf, every distinct unselected score and +inf,
    in ascending order.  Accept-if-score >= tau.
    """
    n = len(scores)
    if selected is None:
        selected = [False] * n
    unl = [i for i in range(n) if not selected[i]]
    taus = [-math.inf] + sorted({float(scores[i]) for i in unl}) + [math.inf]
    out = []
    for tau in taus:
        acc_idx = [i for i in unl if scores[i] >= tau]
        n_acc = len(acc_idx)
        n_corr = sum(1 for i in acc_idx if correct[i])
        cov = n_acc / len(unl)
        acc = 1.0 if n_acc == 0 else n_corr / n_acc
        out.append((tau, cov, acc, n_acc / n))
    return out


def auacc_oracle(scores, correct, selected=None) -> float:
    pts = sweep_points(scores, correct, selected)
    area = 0.0
    for (_, c0, a0, _), (_, c1, a1, _) in zip(pts, pts[1:]):
        area += (c0 - c1) * (a0 + a1) / 2.0
    return area


def acc_at_cov_oracle(scores, correct, selected, t_c) -> float:
    return max(a for _, c, a, _ in sweep_points(scores, correct, selected) if c >= t_c - 1e-12)


def cov_at_acc_oracle(scores, correct, selected, t_a) -> float:
    return max(c for _, c, a, _ in sweep_points(scores, correct, selected) if a >= t_a - 1e-12)


def cov_star_oracle(scores, correct, selected, t_a) -> float:
    return max(cs for _, _, a, cs in sweep_points(scores, correct, selected) if a >= t_a - 1e-12)


def auroc_oracle(scores, correct) -> float:
    pos = [s for s, c in zip(scores, correct) if c]
    neg = [s for s, c in zip(scores, correct) if not c]
    total = 0.0
    for p in pos:
        for q in neg:
            total += 1.0 if p > q else 0.5 if p == q else 0.0
    return total / (len(pos) * len(neg))


# --- neural network ----------------------------------------------------------

def finite_difference_grads(loss_fn, params, eps: float = 1e-6):
    """Central differences of ``loss_fn()`` with respect to every entry of ``params``."""
    grads = []
    for p in params:
        g = np.zeros_like(p)
        it = np.nditer(p, flags=["multi_index"])
        for _ in it:
            idx = it.multi_index
            old = p[idx]
            p[idx] = old + eps
            up = loss_fn()
            p[idx] = old - eps
            down = loss_fn()
            p[idx] = old
            g[idx] = (up - down) / (2 * eps)
        grads.append(g)
    return grads


def relative_error(a_list, b_list) -> float:
    a = np.concatenate([x.ravel() for x in a_list])
    b = np.concatenate([x.ravel() for x in b_list])
    return float(np.linalg.norm(a - b) / max(np.linalg.norm(a) + np.linalg.norm(b), 1e-12))


# --- selection ---------------------------------------------------------------

def kcg_step_violations(E, centers, picks, pool) -> int:
    """Number of greedy steps whose pick is not a farthest-from-centers point."""
    E = np.asarray(E, dtype=float)
    current = list(centers)
    remaining = [int(i) for i in pool]
    bad = 0
    for step, j in enumerate(picks):
        if not current:
            current.append(int(j))
            remaining.remove(int(j))
            continue
        best = -1.0
        dist_j = None
        for i in remaining:
            d = min(math.dist(E[i], E[c]) for c in current)
            best = max(best, d)
            if i == j:
                dist_j = d
        if dist_j is None or dist_j < best - 1e-12:
            bad += 1
        current.append(int(j))
        remaining.remove(int(j))
    return bad


# --- local outlier factor ----------------------------------------------------

def lof_oracle(X, k):
    """Local outlier factor straight from its definition (O(n^2 log n))."""
    X = np.asarray(X, dtype=float)
    n = X.shape[0]
    D = [[math.dist(X[i], X[j]) for j in range(n)] for i in range(n)]
    nbrs = []
    kdist = []
    for i in range(n):
        others = sorted((D[i][j], j) for j in range(n) if j != i)
        nb = [j for _, j in others[:k]]
        nbrs.append(nb)
        kdist.append(others[k - 1][0])
    lrd = []
    for i in range(n):
        reach = [max(D[i][o], kdist[o]) for o in nbrs[i]]
        lrd.append(1.0 / max(sum(reach) / k, 1e-12))
    return np.array([sum(lrd[o] for o in nbrs[i]) / k / lrd[i] for i in range(n)])
