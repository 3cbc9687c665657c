"""Compiled kernels for the random forest (Gini trees on bootstrap weights).

Trees grow breadth-first.  Each level makes one pass per feature over the
forest-wide presorted order, accumulating class weights for every open node
at once, so no per-node sorting is needed.
"""

from __future__ import annotations

import numba
import numpy as np


@numba.njit(cache=True)
def _grow(X, y, n_classes, order, max_features, seed, feat, thr, left, right, value):
    np.random.seed(seed)
    n, nf = X.shape
    w = np.zeros(n)
    for _ in range(n):
        w[np.random.randint(0, n)] += 1.0
    node_of = np.full(n, -1, np.int64)
    for i in range(n):
        if w[i] > 0:
            node_of[i] = 0
    cap = feat.size
    for k in range(cap):
        feat[k] = -1
        left[k] = -1
        right[k] = -1
        value[k] = 0
    local = np.full(cap, -1, np.int64)
    # per-tree sorted order, compacted to rows still in open nodes
    m = 0
    act = np.empty((nf, n), np.int64)
    for f in range(nf):
        q = 0
        for j in range(n):
            i = order[f, j]
            if node_of[i] >= 0:
                act[f, q] = i
                q += 1
        m = q
    level = np.zeros(1, np.int64)
    perm = np.empty(nf, np.int64)
    n_nodes = 1
    while level.size > 0:
        nl = level.size
        for li in range(nl):
            local[level[li]] = li
        tot = np.zeros((nl, n_classes))
        cnt = np.zeros(nl, np.int64)
        for j in range(m):
            i = act[0, j]
            k = node_of[i]
            tot[local[k], y[i]] += w[i]
            cnt[local[k]] += 1
        wt = np.zeros(nl)
        st = np.zeros(nl)
        splittable = np.zeros(nl, np.bool_)
        for li in range(nl):
            nz = 0
            for c in range(n_classes):
                wt[li] += tot[li, c]
                st[li] += tot[li, c] * tot[li, c]
                if tot[li, c] > 0:
                    nz += 1
            splittable[li] = cnt[li] >= 2 and nz > 1
        best = np.full((nl, nf), -np.inf)
        best_thr = np.zeros((nl, nf))
        lc = np.zeros((nl, n_classes))
        wl = np.zeros(nl)
        sl = np.zeros(nl)
        sr = np.zeros(nl)
        prev = np.zeros(nl)
        for f in range(nf):
            lc[:, :] = 0.0
            wl[:] = 0.0
            sl[:] = 0.0
            for li in range(nl):
                sr[li] = st[li]
            for j in range(m):
                i = act[f, j]
                k = node_of[i]
                li = local[k]
                if not splittable[li]:
                    continue
                x = X[i, f]
                if wl[li] > 0 and x > prev[li]:
                    wr = wt[li] - wl[li]
                    score = sl[li] / wl[li] + sr[li] / wr
                    if score > best[li, f]:
                        best[li, f] = score
                        t = 0.5 * (prev[li] + x)
                        if t >= x:
                            t = prev[li]
                        best_thr[li, f] = t
                c = y[i]
                wi = w[i]
                r_old = tot[li, c] - lc[li, c]
                sl[li] += 2.0 * lc[li, c] * wi + wi * wi
                sr[li] += -2.0 * r_old * wi + wi * wi
                lc[li, c] += wi
                wl[li] += wi
                prev[li] = x
        nxt = np.empty(2 * nl, np.int64)
        n_next = 0
        for li in range(nl):
            k = level[li]
            vbest = 0
            for c in range(1, n_classes):
                if tot[li, c] > tot[li, vbest]:
                    vbest = c
            value[k] = vbest
            if not splittable[li]:
                continue
            for t in range(nf):
                perm[t] = t
            for t in range(nf - 1, 0, -1):
                r = np.random.randint(0, t + 1)
                perm[t], perm[r] = perm[r], perm[t]
            bf = -1
            bs = -np.inf
            for t in range(nf):
                f = perm[t]
                if best[li, f] > bs:
                    bs = best[li, f]
                    bf = f
                if t + 1 >= max_features and bf >= 0:
                    break
            if bf < 0:
                continue
            feat[k] = bf
            thr[k] = best_thr[li, bf]
            left[k] = n_nodes
            right[k] = n_nodes + 1
            nxt[n_next] = n_nodes
            nxt[n_next + 1] = n_nodes + 1
            n_next += 2
            n_nodes += 2
        for j in range(m):
            i = act[0, j]
            k = node_of[i]
            if feat[k] >= 0:
                node_of[i] = left[k] if X[i, feat[k]] <= thr[k] else right[k]
            else:
                node_of[i] = -1
        for f in range(nf):
            q = 0
            for j in range(m):
                i = act[f, j]
                if node_of[i] >= 0:
                    act[f, q] = i
                    q += 1
        m = q
        for li in range(nl):
            local[level[li]] = -1
        level = nxt[:n_next].copy()
    return n_nodes


@numba.njit(cache=True)
def build_forest(X, y, n_classes, max_features, seeds):
    n, nf = X.shape
    order = np.empty((nf, n), np.int64)
    for f in range(nf):
        order[f] = np.argsort(X[:, f], kind="mergesort")
    cap = 2 * n + 1
    nt = seeds.size
    feat = np.zeros((nt, cap), np.int64)
    thr = np.zeros((nt, cap))
    left = np.zeros((nt, cap), np.int64)
    right = np.zeros((nt, cap), np.int64)
    value = np.zeros((nt, cap), np.int64)
    sizes = np.empty(nt, np.int64)
    for t in range(nt):
        sizes[t] = _grow(X, y, n_classes, order, max_features, seeds[t],
                         feat[t], thr[t], left[t], right[t], value[t])
    return feat, thr, left, right, value, sizes


@numba.njit(cache=True)
def forest_votes(X, feat, thr, left, right, value, offsets, n_classes):
    n = X.shape[0]
    nt = offsets.size - 1
    votes = np.zeros((n, n_classes), np.int64)
    for i in range(n):
        for t in range(nt):
            k = offsets[t]
            while feat[k] >= 0:
                if X[i, feat[k]] <= thr[k]:
                    k = offsets[t] + left[k]
                else:
                    k = offsets[t] + right[k]
            votes[i, value[k]] += 1
    return votes
