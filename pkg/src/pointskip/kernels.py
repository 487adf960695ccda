"""Hot geometric kernels: farthest point sampling and radius neighbour search.

Every kernel exists twice: a loop form compiled with numba and a vectorised
pure-numpy form.  Both return bit-identical results.  Set the environment
variable ``POINTSKIP_NO_NUMBA=1`` before import to route the public entry
points through the numpy path (numba is then never imported).
"""
import os

import numpy as np

_flag = os.environ.get("POINTSKIP_NO_NUMBA", "").strip().lower()
USE_NUMBA = _flag in ("", "0", "false", "no")

if USE_NUMBA:
    try:
        from numba import njit
    except ImportError:  # pragma: no cover
        USE_NUMBA = False


# ---------------------------------------------------------------------------
# farthest point sampling
#
# Ties in the max-min distance go to the lexicographically smallest (x, y, z),
# then to the smallest index, so the chosen coordinates do not depend on the
# input order.


def _fps_loop(points, n_samples, start):
    n = points.shape[0]
    out = np.empty(n_samples, dtype=np.int64)
    mind = np.full(n, np.inf)
    cur = start
    for s in range(n_samples):
        out[s] = cur
        mind[cur] = -1.0
        cx = points[cur, 0]
        cy = points[cur, 1]
        cz = points[cur, 2]
        best = -1
        bestd = -1.0
        for i in range(n):
            d = mind[i]
            if d < 0.0:
                continue
            dx = points[i, 0] - cx
            dy = points[i, 1] - cy
            dz = points[i, 2] - cz
            dd = dx * dx + dy * dy + dz * dz
            if dd < d:
                d = dd
                mind[i] = dd
            if d > bestd or (d == bestd and _lex_less(points, i, best)):
                bestd = d
                best = i
        cur = best
    return out


def fps_numpy(points, n_samples, start):
    n = points.shape[0]
    out = np.empty(n_samples, dtype=np.int64)
    mind = np.full(n, np.inf)
    cur = start
    for s in range(n_samples):
        out[s] = cur
        mind[cur] = -1.0
        diff = points - points[cur]
        dd = diff[:, 0] * diff[:, 0] + diff[:, 1] * diff[:, 1] + diff[:, 2] * diff[:, 2]
        live = mind >= 0.0
        np.minimum(mind, dd, out=mind, where=live)
        tied = np.flatnonzero(mind == mind.max())
        if len(tied) > 1:
            p = points[tied]
            tied = tied[np.lexsort((p[:, 2], p[:, 1], p[:, 0]))]
        cur = int(tied[0])
    return out


# ---------------------------------------------------------------------------
# ball query
#
# Neighbours are ordered by (squared distance, x, y, z); the first k are kept.
# Under-full groups are padded with the nearest neighbour.


def _lex_less(points, a, b):
    for c in range(3):
        if points[a, c] < points[b, c]:
            return True
        if points[a, c] > points[b, c]:
            return False
    return False


def _ball_query_loop(points, centers, radius, k):
    n = points.shape[0]
    m = centers.shape[0]
    r2 = radius * radius
    idx = np.empty((m, k), dtype=np.int64)
    counts = np.empty(m, dtype=np.int64)
    cand = np.empty(n, dtype=np.int64)
    cd = np.empty(n)
    for j in range(m):
        cx = centers[j, 0]
        cy = centers[j, 1]
        cz = centers[j, 2]
        c = 0
        for i in range(n):
            dx = points[i, 0] - cx
            dy = points[i, 1] - cy
            dz = points[i, 2] - cz
            dd = dx * dx + dy * dy + dz * dz
            if dd <= r2:
                cand[c] = i
                cd[c] = dd
                c += 1
        if c == 0:
            counts[j] = 0
            idx[j, :] = -1
            continue
        order = np.argsort(cd[:c], kind="mergesort")
        sel = cand[:c][order]
        sd = cd[:c][order]
        # lexicographic order inside runs of equal distance
        s = 0
        while s < c:
            e = s + 1
            while e < c and sd[e] == sd[s]:
                e += 1
            for a in range(s + 1, e):
                v = sel[a]
                b = a - 1
                while b >= s and _lex_less(points, v, sel[b]):
                    sel[b + 1] = sel[b]
                    b -= 1
                sel[b + 1] = v
            s = e
        kept = min(c, k)
        counts[j] = kept
        for t in range(kept):
            idx[j, t] = sel[t]
        for t in range(kept, k):
            idx[j, t] = sel[0]
    return idx, counts


def _rank_candidates(points, cand, dd):
    keys = points[cand]
    order = np.lexsort((keys[:, 2], keys[:, 1], keys[:, 0], dd))
    return cand[order]


def ball_query_numpy(points, centers, radius, k):
    m = centers.shape[0]
    r2 = radius * radius
    idx = np.empty((m, k), dtype=np.int64)
    counts = np.empty(m, dtype=np.int64)
    for j in range(m):
        diff = points - centers[j]
        dd = diff[:, 0] * diff[:, 0] + diff[:, 1] * diff[:, 1] + diff[:, 2] * diff[:, 2]
        cand = np.flatnonzero(dd <= r2)
        sel = _rank_candidates(points, cand, dd[cand])
        kept = min(len(sel), k)
        counts[j] = kept
        if kept == 0:
            idx[j] = -1
            continue
        idx[j, :kept] = sel[:kept]
        idx[j, kept:] = sel[0]
    return idx, counts


def ball_query_grid(points, centers, radius, k):
    """Uniform-grid accelerated ball query; set-identical to the full scan.

    Points are bucketed into cubic cells slightly larger than ``radius`` so a
    query only inspects the 27 cells around its center.
    """
    m = centers.shape[0]
    r2 = radius * radius
    cell = radius * (1.0 + 1e-9)
    lo = np.minimum(points.min(axis=0), centers.min(axis=0))
    pc = np.floor((points - lo) / cell).astype(np.int64)
    dims = pc.max(axis=0) + 3
    keys = ((pc[:, 0] + 1) * dims[1] + (pc[:, 1] + 1)) * dims[2] + (pc[:, 2] + 1)
    order = np.argsort(keys, kind="stable")
    skeys = keys[order]
    cc = np.floor((centers - lo) / cell).astype(np.int64)
    offs = np.array([(a, b, c) for a in (-1, 0, 1) for b in (-1, 0, 1) for c in (-1, 0, 1)])
    idx = np.empty((m, k), dtype=np.int64)
    counts = np.empty(m, dtype=np.int64)
    for j in range(m):
        nb = cc[j] + 1 + offs
        ok = np.all((nb >= 0) & (nb < dims), axis=1)
        nb = nb[ok]
        nkeys = (nb[:, 0] * dims[1] + nb[:, 1]) * dims[2] + nb[:, 2]
        starts = np.searchsorted(skeys, nkeys, side="left")
        stops = np.searchsorted(skeys, nkeys, side="right")
        cand = np.concatenate([order[a:b] for a, b in zip(starts, stops)])
        diff = points[cand] - centers[j]
        dd = diff[:, 0] * diff[:, 0] + diff[:, 1] * diff[:, 1] + diff[:, 2] * diff[:, 2]
        hit = dd <= r2
        cand, dd = cand[hit], dd[hit]
        srt = np.argsort(cand)
        sel = _rank_candidates(points, cand[srt], dd[srt])
        kept = min(len(sel), k)
        counts[j] = kept
        if kept == 0:
            idx[j] = -1
            continue
        idx[j, :kept] = sel[:kept]
        idx[j, kept:] = sel[0]
    return idx, counts


if USE_NUMBA:
    _lex_less = njit(cache=True)(_lex_less)
    fps_numba = njit(cache=True)(_fps_loop)
    ball_query_numba = njit(cache=True)(_ball_query_loop)
    farthest_point_sample_kernel = fps_numba
    ball_query_kernel = ball_query_numba
else:
    fps_numba = None
    ball_query_numba = None
    farthest_point_sample_kernel = fps_numpy
    ball_query_kernel = ball_query_numpy
