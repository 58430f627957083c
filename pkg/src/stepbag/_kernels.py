"""Compiled tree growing, prediction, OOB and importance kernels.

Trees live in padded per-ensemble arrays of shape (n_trees, max_nodes):
``feature`` (-1 marks a leaf), ``threshold``, ``left``, ``right``, ``value``
and ``count`` (bootstrap-weighted sample count of the node). Node 0 is the
root; children are numbered in creation order, depth first, left first.
"""

import numpy as np
from numba import njit, prange

from .seeding import TAG_BOOT, TAG_NODE, mix64, perm_stream_seed, rand_below, tree_seed

LEAF = -1


def max_nodes_for(n):
    return 2 * n + 1


@njit(cache=True)
def grow_tree(X, y, counts, order, priority, mtry, min_leaf, max_depth, node_seed,
              feature, threshold, left, right, value, ncount):
    """Grow one CART regression tree in place; return its node count.

    ``counts[i]`` is the multiplicity of sample ``i`` (0 = not in the tree's
    sample). ``order[f]`` lists all rows sorted by feature ``f``.
    ``priority`` lists the features in tie-break order (earlier wins).
    """
    n, p = X.shape
    rank = np.empty(p, dtype=np.int64)
    for a in range(p):
        rank[priority[a]] = a
    state = np.empty(1, dtype=np.uint64)
    state[0] = mix64(np.uint64(node_seed) ^ TAG_NODE)

    node_of = np.full(n, -1, dtype=np.int64)
    for i in range(n):
        if counts[i] > 0:
            node_of[i] = 0
    pool = np.arange(p)
    cand = np.empty(max(p, 1), dtype=np.int64)
    buf = np.empty(n, dtype=np.int64)
    stack_node = np.empty(feature.shape[0], dtype=np.int64)
    stack_depth = np.empty(feature.shape[0], dtype=np.int64)
    stack_node[0] = 0
    stack_depth[0] = 0
    top = 1
    n_nodes = 1

    while top > 0:
        top -= 1
        k = stack_node[top]
        depth = stack_depth[top]

        cnt = 0
        s = 0.0
        ymin = np.inf
        ymax = -np.inf
        for i in range(n):
            if node_of[i] == k:
                c = counts[i]
                cnt += c
                s += c * y[i]
                if y[i] < ymin:
                    ymin = y[i]
                if y[i] > ymax:
                    ymax = y[i]
        mean = s / cnt
        feature[k] = LEAF
        threshold[k] = 0.0
        left[k] = -1
        right[k] = -1
        value[k] = mean
        ncount[k] = cnt
        if cnt < 2 * min_leaf or ymin == ymax or (max_depth >= 0 and depth >= max_depth) or p == 0:
            continue

        sse = 0.0
        for i in range(n):
            if node_of[i] == k:
                d = y[i] - mean
                sse += counts[i] * d * d
        tol = 1e-12 * sse

        if mtry >= p:
            for a in range(p):
                cand[a] = priority[a]
            m = p
        else:
            for a in range(mtry):
                r = a + rand_below(state, p - a)
                tmp = pool[a]
                pool[a] = pool[r]
                pool[r] = tmp
            for a in range(mtry):
                cand[a] = rank[pool[a]]
            cand[:mtry].sort()
            for a in range(mtry):
                cand[a] = priority[cand[a]]
            m = mtry

        best_gain = -1.0
        best_f = -1
        best_thr = 0.0
        for a in range(m):
            f = cand[a]
            nb = 0
            ordf = order[f]
            for q in range(n):
                i = ordf[q]
                if node_of[i] == k:
                    buf[nb] = i
                    nb += 1
            lc = 0
            ls = 0.0
            for q in range(nb - 1):
                i = buf[q]
                lc += counts[i]
                ls += counts[i] * (y[i] - mean)
                x0 = X[i, f]
                x1 = X[buf[q + 1], f]
                if x1 <= x0:
                    continue
                rc = cnt - lc
                if lc < min_leaf or rc < min_leaf:
                    continue
                gain = ls * ls * cnt / (lc * rc)
                if gain > best_gain + tol:
                    best_gain = gain
                    best_f = f
                    thr = 0.5 * x0 + 0.5 * x1
                    if thr <= x0:
                        thr = x1
                    best_thr = thr
        if best_f < 0:
            continue

        lk = n_nodes
        rk = n_nodes + 1
        n_nodes += 2
        feature[k] = best_f
        threshold[k] = best_thr
        left[k] = lk
        right[k] = rk
        for i in range(n):
            if node_of[i] == k:
                if X[i, best_f] < best_thr:
                    node_of[i] = lk
                else:
                    node_of[i] = rk
        stack_node[top] = rk
        stack_depth[top] = depth + 1
        top += 1
        stack_node[top] = lk
        stack_depth[top] = depth + 1
        top += 1
    return n_nodes


@njit(cache=True)
def bootstrap_counts(tseed, n, out):
    state = np.empty(1, dtype=np.uint64)
    state[0] = mix64(np.uint64(tseed) ^ TAG_BOOT)
    out[:] = 0
    for _ in range(n):
        out[rand_below(state, n)] += 1


@njit(cache=True, parallel=True)
def fit_forest(X, y, order, priority, n_trees, ensemble_seed, mtry, min_leaf, max_depth, bootstrap):
    n = X.shape[0]
    mn = 2 * n + 1
    feature = np.empty((n_trees, mn), dtype=np.int64)
    threshold = np.zeros((n_trees, mn))
    left = np.empty((n_trees, mn), dtype=np.int64)
    right = np.empty((n_trees, mn), dtype=np.int64)
    value = np.zeros((n_trees, mn))
    ncount = np.zeros((n_trees, mn), dtype=np.int64)
    n_nodes = np.zeros(n_trees, dtype=np.int64)
    inbag = np.zeros((n_trees, n), dtype=np.int64)
    for t in prange(n_trees):
        ts = tree_seed(ensemble_seed, t)
        if bootstrap:
            bootstrap_counts(ts, n, inbag[t])
        else:
            inbag[t, :] = 1
        feature[t, :] = LEAF
        left[t, :] = -1
        right[t, :] = -1
        n_nodes[t] = grow_tree(X, y, inbag[t], order, priority, mtry, min_leaf, max_depth, ts,
                               feature[t], threshold[t], left[t], right[t], value[t], ncount[t])
    return feature, threshold, left, right, value, ncount, n_nodes, inbag


@njit(cache=True, inline="always")
def route(feature, threshold, left, right, value, x):
    k = 0
    while feature[k] >= 0:
        if x[feature[k]] < threshold[k]:
            k = left[k]
        else:
            k = right[k]
    return value[k]


@njit(cache=True, inline="always")
def route_override(feature, threshold, left, right, value, x, j, xj):
    k = 0
    while feature[k] >= 0:
        f = feature[k]
        v = xj if f == j else x[f]
        if v < threshold[k]:
            k = left[k]
        else:
            k = right[k]
    return value[k]


@njit(cache=True, parallel=True)
def predict_matrix(feature, threshold, left, right, value, X):
    """Per-tree predictions, shape (n_trees, n_rows)."""
    T = feature.shape[0]
    m = X.shape[0]
    out = np.empty((T, m))
    for t in prange(T):
        for i in range(m):
            out[t, i] = route(feature[t], threshold[t], left[t], right[t], value[t], X[i])
    return out


@njit(cache=True)
def mean_over_trees(P):
    # fixed-order summation over trees
    T, m = P.shape
    out = np.zeros(m)
    for t in range(T):
        for i in range(m):
            out[i] += P[t, i]
    return out / T


@njit(cache=True)
def oob_average(P, inbag):
    """OOB ensemble prediction per sample; NaN where no tree holds it out."""
    T, n = P.shape
    s = np.zeros(n)
    c = np.zeros(n, dtype=np.int64)
    for t in range(T):
        for i in range(n):
            if inbag[t, i] == 0:
                s[i] += P[t, i]
                c[i] += 1
    out = np.empty(n)
    for i in range(n):
        out[i] = s[i] / c[i] if c[i] > 0 else np.nan
    return out


@njit(cache=True, parallel=True)
def importance_deltas(feature, threshold, left, right, value, inbag, X, y, seed, n_repeats):
    """Per-tree OOB MSE increase after permuting each feature.

    Returns ``(deltas, contributed)``; trees with fewer than two OOB samples
    get ``contributed[t] = False`` and a zero row.
    """
    T, n = inbag.shape
    p = X.shape[1]
    deltas = np.zeros((T, p))
    contributed = np.zeros(T, dtype=np.bool_)
    for t in prange(T):
        oob = np.empty(n, dtype=np.int64)
        m = 0
        for i in range(n):
            if inbag[t, i] == 0:
                oob[m] = i
                m += 1
        if m < 2:
            continue
        contributed[t] = True
        base = 0.0
        for q in range(m):
            i = oob[q]
            r = route(feature[t], threshold[t], left[t], right[t], value[t], X[i]) - y[i]
            base += r * r
        base /= m
        used = np.zeros(p, dtype=np.bool_)
        for k in range(feature.shape[1]):
            if feature[t, k] >= 0:
                used[feature[t, k]] = True
        pbase = tree_seed(seed, t)
        perm = np.empty(m, dtype=np.int64)
        state = np.empty(1, dtype=np.uint64)
        for j in range(p):
            if not used[j]:
                continue
            acc = 0.0
            for rep in range(n_repeats):
                state[0] = perm_stream_seed(pbase, j, rep)
                for q in range(m):
                    perm[q] = oob[q]
                for q in range(m - 1, 0, -1):
                    r = rand_below(state, q + 1)
                    tmp = perm[q]
                    perm[q] = perm[r]
                    perm[r] = tmp
                err = 0.0
                for q in range(m):
                    i = oob[q]
                    d = route_override(feature[t], threshold[t], left[t], right[t], value[t],
                                       X[i], j, X[perm[q], j]) - y[i]
                    err += d * d
                acc += err / m - base
            deltas[t, j] = acc / n_repeats
    return deltas, contributed
