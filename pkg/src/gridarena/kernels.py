"""Hot loops: one layer of the oracle dynamic program, margin scoring of topology
chains and the protection-trip scan.

Each kernel has a numba implementation and a pure-numpy one. The numba path is used
when numba imports and ``GRIDARENA_NUMBA`` is not set to ``0``; both paths return
identical dynamic-program layers.
"""

from __future__ import annotations

import os

import numpy as np

try:
    import numba
except ImportError:  # pragma: no cover - exercised only without numba installed
    numba = None

USE_NUMBA = numba is not None and os.environ.get("GRIDARENA_NUMBA", "1").lower() not in (
    "0", "false", "no", "off")

NEG = -np.inf
BIG = 1 << 30


# -- numpy implementations ---------------------------------------------------

def _top2_np(V, C):
    N, A, _ = V.shape
    b1v = np.full((N, A), NEG)
    b2v = np.full((N, A), NEG)
    b1c = np.full((N, A), BIG, dtype=np.int64)
    b2c = np.full((N, A), BIG, dtype=np.int64)
    b1x = np.full((N, A), -1, dtype=np.int64)
    b2x = np.full((N, A), -1, dtype=np.int64)
    for x in range(A):
        v = V[:, :, x]
        c = C[:, :, x]
        valid = v != NEG
        better1 = valid & ((v > b1v) | ((v == b1v) & (c < b1c)))
        better2 = valid & ~better1 & ((v > b2v) | ((v == b2v) & (c < b2c)))
        b2v = np.where(better1, b1v, np.where(better2, v, b2v))
        b2c = np.where(better1, b1c, np.where(better2, c, b2c))
        b2x = np.where(better1, b1x, np.where(better2, x, b2x))
        b1v = np.where(better1, v, b1v)
        b1c = np.where(better1, c, b1c)
        b1x = np.where(better1, x, b1x)
    return b1v, b1c, b1x, b2v, b2c, b2x


def dp_layer_numpy(V, C, r, feas, nbr, nbr_asset, cooldown, relaxed, V_out, C_out, bp_out):
    N, A, _ = V.shape
    M = nbr.shape[1]
    b1v, b1c, b1x, b2v, b2c, b2x = _top2_np(V, C)
    tv = np.full((N, A, A), NEG)
    tc = np.full((N, A, A), BIG, dtype=np.int64)
    tb = np.zeros((N, A, A), dtype=np.int64)
    if relaxed:
        tv[:, 0, 0] = b1v[:, 0]
        tc[:, 0, 0] = b1c[:, 0]
        tb[:, 0, 0] = -(b1x[:, 0] + 1)
        for m in range(M):
            i = nbr[:, m]
            rows = np.flatnonzero(i >= 0)
            ii = i[rows]
            v = b1v[ii, 0]
            c = b1c[ii, 0] + 1
            cur_v, cur_c = tv[rows, 0, 0], tc[rows, 0, 0]
            upd = (v != NEG) & ((v > cur_v) | ((v == cur_v) & (c < cur_c)))
            r2 = rows[upd]
            tv[r2, 0, 0] = v[upd]
            tc[r2, 0, 0] = c[upd]
            tb[r2, 0, 0] = m * A + b1x[ii, 0][upd]
    else:
        tv[:, 0, :] = b1v
        tc[:, 0, :] = b1c
        tb[:, 0, :] = -(b1x + 1)
        for m in range(M):
            i = nbr[:, m]
            rows = np.flatnonzero(i >= 0)
            ii = i[rows]
            k = nbr_asset[rows, m]
            for a in range(A):
                if cooldown >= 3:
                    use2 = b1x[ii, a] == k
                    v = np.where(use2, b2v[ii, a], b1v[ii, a])
                    c = np.where(use2, b2c[ii, a], b1c[ii, a]) + 1
                    x = np.where(use2, b2x[ii, a], b1x[ii, a])
                else:
                    v, c, x = b1v[ii, a], b1c[ii, a] + 1, b1x[ii, a]
                ok = v != NEG
                if cooldown >= 2:
                    ok &= k != a
                cur_v = tv[rows, k, a]
                cur_c = tc[rows, k, a]
                upd = ok & ((v > cur_v) | ((v == cur_v) & (c < cur_c)))
                r2, k2 = rows[upd], k[upd]
                tv[r2, k2, a] = v[upd]
                tc[r2, k2, a] = c[upd]
                tb[r2, k2, a] = m * A + x[upd]
    valid = feas[:, None, None] & (tv != NEG)
    V_out[:] = np.where(valid, tv + r[:, None, None], NEG)
    C_out[:] = np.where(valid, tc, BIG)
    bp_out[:] = np.where(valid, tb, 0)


def line_scores_numpy(amps, imax, in_service):
    """Sum over lines of 1 - (1 - margin)^2; amps (n, T, L), in_service (n, L) -> (n, T)."""
    margin = np.maximum(0.0, 1.0 - amps / imax)
    contrib = 1.0 - (1.0 - margin) ** 2
    contrib = np.where(in_service[:, None, :], contrib, 0.0)
    # line-by-line accumulation matches the loop kernel bit for bit
    out = np.zeros(contrib.shape[:2])
    for l in range(contrib.shape[2]):
        out += contrib[:, :, l]
    return out


def first_trip_numpy(amps, imax, in_service, reaction_time, hard_factor):
    """First timestep >= 1 at which protections would open a line of a fixed topology.

    amps (n, T, L), in_service (n, L) -> (n,) int, T when nothing trips.
    """
    n, T, L = amps.shape
    out = np.full(n, T, dtype=np.int64)
    streak = np.zeros((n, L), dtype=np.int64)
    pending = np.ones(n, dtype=bool)
    for t in range(1, T):
        a = amps[:, t, :]
        over = in_service & (a >= imax)
        hard = in_service & (a >= hard_factor * imax)
        streak = np.where(over, streak + 1, 0)
        hit = pending & (hard.any(axis=1) | (streak > reaction_time).any(axis=1))
        out[hit] = t
        pending &= ~hit
        if not pending.any():
            break
    return out


# -- numba implementations ---------------------------------------------------

def _dp_layer_loops(V, C, r, feas, nbr, nbr_asset, cooldown, relaxed, V_out, C_out, bp_out):
    N, A, _ = V.shape
    M = nbr.shape[1]
    b1v = np.empty((N, A))
    b2v = np.empty((N, A))
    b1c = np.empty((N, A), dtype=np.int64)
    b2c = np.empty((N, A), dtype=np.int64)
    b1x = np.empty((N, A), dtype=np.int64)
    b2x = np.empty((N, A), dtype=np.int64)
    for i in range(N):
        for a in range(A):
            v1, c1, x1 = NEG, BIG, -1
            v2, c2, x2 = NEG, BIG, -1
            for x in range(A):
                v = V[i, a, x]
                if v == NEG:
                    continue
                c = C[i, a, x]
                if v > v1 or (v == v1 and c < c1):
                    v2, c2, x2 = v1, c1, x1
                    v1, c1, x1 = v, c, x
                elif v > v2 or (v == v2 and c < c2):
                    v2, c2, x2 = v, c, x
            b1v[i, a], b1c[i, a], b1x[i, a] = v1, c1, x1
            b2v[i, a], b2c[i, a], b2x[i, a] = v2, c2, x2
    tv = np.empty((A, A))
    tc = np.empty((A, A), dtype=np.int64)
    tb = np.empty((A, A), dtype=np.int64)
    for j in range(N):
        for s1 in range(A):
            for s2 in range(A):
                tv[s1, s2] = NEG
                tc[s1, s2] = BIG
                tb[s1, s2] = 0
        if feas[j]:
            if relaxed:
                tv[0, 0] = b1v[j, 0]
                tc[0, 0] = b1c[j, 0]
                tb[0, 0] = -(b1x[j, 0] + 1)
                for m in range(M):
                    i = nbr[j, m]
                    if i < 0:
                        continue
                    v = b1v[i, 0]
                    if v == NEG:
                        continue
                    c = b1c[i, 0] + 1
                    if v > tv[0, 0] or (v == tv[0, 0] and c < tc[0, 0]):
                        tv[0, 0] = v
                        tc[0, 0] = c
                        tb[0, 0] = m * A + b1x[i, 0]
            else:
                for a in range(A):
                    tv[0, a] = b1v[j, a]
                    tc[0, a] = b1c[j, a]
                    tb[0, a] = -(b1x[j, a] + 1)
                for m in range(M):
                    i = nbr[j, m]
                    if i < 0:
                        continue
                    k = nbr_asset[j, m]
                    for a in range(A):
                        if cooldown >= 2 and a == k:
                            continue
                        if cooldown >= 3 and b1x[i, a] == k:
                            v, c, x = b2v[i, a], b2c[i, a], b2x[i, a]
                        else:
                            v, c, x = b1v[i, a], b1c[i, a], b1x[i, a]
                        if v == NEG:
                            continue
                        c += 1
                        if v > tv[k, a] or (v == tv[k, a] and c < tc[k, a]):
                            tv[k, a] = v
                            tc[k, a] = c
                            tb[k, a] = m * A + x
        for s1 in range(A):
            for s2 in range(A):
                if feas[j] and tv[s1, s2] != NEG:
                    V_out[j, s1, s2] = tv[s1, s2] + r[j]
                    C_out[j, s1, s2] = tc[s1, s2]
                    bp_out[j, s1, s2] = tb[s1, s2]
                else:
                    V_out[j, s1, s2] = NEG
                    C_out[j, s1, s2] = BIG
                    bp_out[j, s1, s2] = 0


def _line_scores_loops(amps, imax, in_service):
    n, T, L = amps.shape
    out = np.zeros((n, T))
    for p in range(n):
        for t in range(T):
            s = 0.0
            for l in range(L):
                if in_service[p, l]:
                    m = 1.0 - amps[p, t, l] / imax[l]
                    if m < 0.0:
                        m = 0.0
                    s += 1.0 - (1.0 - m) * (1.0 - m)
            out[p, t] = s
    return out


def _first_trip_loops(amps, imax, in_service, reaction_time, hard_factor):
    n, T, L = amps.shape
    out = np.full(n, T, dtype=np.int64)
    streak = np.zeros(L, dtype=np.int64)
    for p in range(n):
        streak[:] = 0
        for t in range(1, T):
            hit = False
            for l in range(L):
                if not in_service[p, l]:
                    continue
                a = amps[p, t, l]
                if a >= hard_factor * imax[l]:
                    hit = True
                if a >= imax[l]:
                    streak[l] += 1
                    if streak[l] > reaction_time:
                        hit = True
                else:
                    streak[l] = 0
            if hit:
                out[p] = t
                break
    return out


if numba is not None:
    dp_layer_numba = numba.njit(cache=True)(_dp_layer_loops)
    line_scores_numba = numba.njit(cache=True)(_line_scores_loops)
    first_trip_numba = numba.njit(cache=True)(_first_trip_loops)
else:  # pragma: no cover
    dp_layer_numba = line_scores_numba = first_trip_numba = None

if USE_NUMBA:
    dp_layer = dp_layer_numba
    line_scores = line_scores_numba
    first_trip = first_trip_numba
else:
    dp_layer = dp_layer_numpy
    line_scores = line_scores_numpy
    first_trip = first_trip_numpy
