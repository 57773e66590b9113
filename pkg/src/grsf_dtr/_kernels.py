"""Numba-compiled inner loops for tree growth.

The numpy implementations in forest.py are the reference; these kernels
compute the same tables and scores with loop code to avoid per-node numpy
call overhead. forest.py falls back to the numpy path when numba is
unavailable, and the test suite cross-checks the two.
"""
from __future__ import annotations

import numpy as np

try:
    from numba import njit

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover - exercised only without numba
    HAVE_NUMBA = False

    def njit(*args, **kwargs):
        def wrap(f):
            return f

        if args and callable(args[0]):
            return args[0]
        return wrap


@njit(cache=True)
def node_tables(rows, row_ptr, col, drop, delta, w):
    """Gather one node's decrement entries and pooled tables.

    Returns (support, drop_vec, death_vec, ent_row, ent_col, ent_drop,
    ent_death) where ent_col indexes into `support`.
    """
    n_node = rows.shape[0]
    nnz = 0
    for i in range(n_node):
        r = rows[i]
        nnz += row_ptr[r + 1] - row_ptr[r]
    ent_row = np.empty(nnz, np.int64)
    ent_gcol = np.empty(nnz, np.int64)
    ent_drop = np.empty(nnz, np.float64)
    ent_death = np.empty(nnz, np.float64)
    k = 0
    for i in range(n_node):
        r = rows[i]
        wi = w[r]
        di = delta[r]
        for e in range(row_ptr[r], row_ptr[r + 1]):
            ent_row[k] = i
            ent_gcol[k] = col[e]
            ent_drop[k] = wi * drop[e]
            ent_death[k] = di * wi * drop[e]
            k += 1
    support = np.unique(ent_gcol)
    m = support.shape[0]
    ent_col = np.searchsorted(support, ent_gcol)
    drop_vec = np.zeros(m, np.float64)
    death_vec = np.zeros(m, np.float64)
    for e in range(nnz):
        drop_vec[ent_col[e]] += ent_drop[e]
        death_vec[ent_col[e]] += ent_death[e]
    return support, drop_vec, death_vec, ent_row, ent_col, ent_drop, ent_death


@njit(cache=True)
def best_split(
    Xcand,
    row_w,
    row_ev,
    ent_row,
    ent_col,
    ent_drop,
    ent_death,
    drop_vec,
    death_vec,
    lo,
    min_events,
    max_cuts,
):
    """Best (feature, cut, score) over the candidate feature columns.

    Xcand is (n_node, n_candidates). Returns (-1, 0.0, -1.0) when no
    feasible split exists. Log-rank score follows the fractional-risk-set
    form; variance terms with total at-risk <= 1 are skipped.
    """
    n_node = row_w.shape[0]
    m = drop_vec.shape[0]
    nnz = ent_row.shape[0]
    w_total = 0.0
    ev_total = 0.0
    for i in range(n_node):
        w_total += row_w[i]
        ev_total += row_ev[i]

    # Death columns, their at-risk totals, and variance bases.
    m_d = 0
    for g in range(m):
        if death_vec[g] > 0.0:
            m_d += 1
    if m_d == 0:
        return -1, 0.0, -1.0
    dcols = np.empty(m_d, np.int64)
    dmap = np.full(m, -1, np.int64)
    j = 0
    for g in range(m):
        if death_vec[g] > 0.0:
            dcols[j] = g
            dmap[g] = j
            j += 1
    d_tot = np.empty(m_d, np.float64)
    y_tot = np.empty(m_d, np.float64)
    vbase = np.empty(m_d, np.float64)
    cum = 0.0
    j = 0
    for g in range(m):
        if dmap[g] >= 0:
            d_tot[j] = death_vec[g]
            y_tot[j] = w_total - cum
            if y_tot[j] > 1.0:
                vbase[j] = d_tot[j] * (y_tot[j] - d_tot[j]) / (y_tot[j] - 1.0)
            else:
                vbase[j] = 0.0
            j += 1
        cum += drop_vec[g]

    best_f = -1
    best_cut = 0.0
    best_score = -1.0
    for fi in range(Xcand.shape[1]):
        vals = Xcand[:, fi]
        order = np.argsort(vals, kind="mergesort")
        sv = vals[order]
        # Candidate cuts: all interior distinct values, thinned to max_cuts
        # evenly spaced ranks when there are more.
        n_distinct = 1
        for p in range(1, n_node):
            if sv[p] != sv[p - 1]:
                n_distinct += 1
        if n_distinct < 2:
            continue
        cuts = np.empty(min(n_distinct - 1, max_cuts), np.float64)
        if n_distinct - 1 <= max_cuts:
            q = 0
            for p in range(n_node - 1):
                if sv[p + 1] != sv[p]:
                    cuts[q] = sv[p]
                    q += 1
            n_cuts = q
        else:
            q = 0
            prev = np.nan
            for k in range(1, max_cuts + 1):
                pos = (k * n_node) // (max_cuts + 1)
                v = sv[pos]
                if v >= sv[n_node - 1]:
                    continue
                if q == 0 or v != prev:
                    cuts[q] = v
                    prev = v
                    q += 1
            n_cuts = q
        if n_cuts == 0:
            continue

        # Left counts per cut and bucket index per sorted position.
        left_counts = np.searchsorted(sv, cuts[:n_cuts], side="right")
        rank = np.empty(n_node, np.int64)
        for p in range(n_node):
            rank[order[p]] = p
        n_buckets = n_cuts + 1
        bucket_of_row = np.searchsorted(left_counts, rank, side="right")

        # Feasibility from row counts and event mass.
        ev_b = np.zeros(n_buckets, np.float64)
        w_b = np.zeros(n_buckets, np.float64)
        for i in range(n_node):
            ev_b[bucket_of_row[i]] += row_ev[i]
            w_b[bucket_of_row[i]] += row_w[i]
        any_feasible = False
        feasible = np.zeros(n_cuts, np.bool_)
        ev_l = 0.0
        for c in range(n_cuts):
            ev_l += ev_b[c]
            n_l = left_counts[c]
            n_r = n_node - n_l
            if n_l >= lo and n_r >= lo and ev_l >= min_events and (ev_total - ev_l) >= min_events:
                feasible[c] = True
                any_feasible = True
        if not any_feasible:
            continue

        dropb = np.zeros((n_buckets, m), np.float64)
        deathb = np.zeros((n_buckets, m_d), np.float64)
        for e in range(nnz):
            b = bucket_of_row[ent_row[e]]
            g = ent_col[e]
            dropb[b, g] += ent_drop[e]
            dj = dmap[g]
            if dj >= 0:
                deathb[b, dj] += ent_death[e]

        w_left = 0.0
        for c in range(n_cuts):
            w_left += w_b[c]
            if c > 0:
                for g in range(m):
                    dropb[c, g] += dropb[c - 1, g]
                for j2 in range(m_d):
                    deathb[c, j2] += deathb[c - 1, j2]
            if not feasible[c]:
                continue
            num = 0.0
            var = 0.0
            cum_l = 0.0
            for g in range(m):
                dj = dmap[g]
                if dj >= 0:
                    y_l = w_left - cum_l
                    frac = y_l / y_tot[dj] if y_tot[dj] > 0.0 else 0.0
                    num += deathb[c, dj] - frac * d_tot[dj]
                    var += vbase[dj] * frac * (1.0 - frac)
                cum_l += dropb[c, g]
            score = num * num / var if var > 0.0 else 0.0
            if score > best_score:
                best_score = score
                best_f = fi
                best_cut = cuts[c]
    return best_f, best_cut, best_score
