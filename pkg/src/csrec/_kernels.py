"""Compiled SGD step loops.

All updates use the pre-step values of every vector they touch.  L2 terms
are only applied by interaction steps, to the vectors that step touches.
"""

import math

import numpy as np
from numba import njit

SOC_NONE = 0
SOC_WEIGHTED_SUM = 1
SOC_PAIR = 2
SOC_PRODUCT = 3


@njit(cache=True, nogil=True, inline="always")
def _finite_col(A, c):
    for k in range(A.shape[0]):
        if not math.isfinite(A[k, c]):
            return False
    return True


@njit(cache=True, nogil=True)
def _sigmoid_neg(x):
    # sigmoid(-x) without overflow warnings
    if x >= 0:
        e = math.exp(-x)
        return e / (1.0 + e)
    return 1.0 / (1.0 + math.exp(x))


@njit(cache=True, nogil=True)
def bpr_update(P, Q, u, i, j, alpha, lp, lq):
    K = P.shape[0]
    x = 0.0
    for k in range(K):
        x += P[k, u] * (Q[k, i] - Q[k, j])
    g = -_sigmoid_neg(x)
    for k in range(K):
        pu = P[k, u]
        qi = Q[k, i]
        qj = Q[k, j]
        P[k, u] = pu - alpha * (g * (qi - qj) + 2.0 * lp * pu)
        Q[k, i] = qi - alpha * (g * pu + 2.0 * lq * qi)
        Q[k, j] = qj - alpha * (-g * pu + 2.0 * lq * qj)
    return _finite_col(P, u) and _finite_col(Q, i) and _finite_col(Q, j)


@njit(cache=True, nogil=True)
def pointwise_update(P, Q, u, i, y, alpha, lp, lq):
    K = P.shape[0]
    pred = 0.0
    for k in range(K):
        pred += P[k, u] * Q[k, i]
    e = y - pred
    for k in range(K):
        pu = P[k, u]
        qi = Q[k, i]
        P[k, u] = pu - alpha * (-2.0 * e * qi + 2.0 * lp * pu)
        Q[k, i] = qi - alpha * (-2.0 * e * pu + 2.0 * lq * qi)
    return _finite_col(P, u) and _finite_col(Q, i)


@njit(cache=True, nogil=True)
def pair_update(P, u, v, w2, alpha, ls):
    """Step on ``ls * sum_k w2_k (p_u - p_v)_k^2``."""
    for k in range(P.shape[0]):
        g = 2.0 * ls * w2[k] * (P[k, u] - P[k, v])
        P[k, u] -= alpha * g
        P[k, v] += alpha * g
    return _finite_col(P, u) and _finite_col(P, v)


@njit(cache=True, nogil=True)
def product_update(P, Q, u, v, i, alpha, ls, freeze_q):
    for k in range(P.shape[0]):
        d = P[k, u] - P[k, v]
        q = Q[k, i]
        g = 2.0 * ls * d * q * q
        P[k, u] -= alpha * g
        P[k, v] += alpha * g
        if not freeze_q:
            Q[k, i] = q - alpha * 2.0 * ls * d * d * q
    return _finite_col(P, u) and _finite_col(P, v) and _finite_col(Q, i)


@njit(cache=True, nogil=True)
def weighted_sum_update(P, u, friends, strengths, alpha, ls):
    """Step on ``ls * ||p_u - sum_f s_f p_f||^2`` for one user."""
    K = P.shape[0]
    r = P[:, u].copy()
    for f in range(len(friends)):
        for k in range(K):
            r[k] -= strengths[f] * P[k, friends[f]]
    for k in range(K):
        P[k, u] -= alpha * 2.0 * ls * r[k]
    for f in range(len(friends)):
        v = friends[f]
        for k in range(K):
            P[k, v] += alpha * 2.0 * ls * strengths[f] * r[k]
    ok = _finite_col(P, u)
    for f in range(len(friends)):
        ok = ok and _finite_col(P, friends[f])
    return ok


@njit(cache=True, nogil=True)
def run_schedule(P, Q, order, pairwise, iu, ii, ij, iy,
                 soc_mode, sa, sb, sc, w2, indptr, fidx, fstr,
                 alpha, lp, lq, ls, freeze_q):
    """Run steps in ``order``: ``t >= 0`` is interaction record ``t``,
    ``t < 0`` is social record ``-1 - t``.  Returns the position of the
    first step that produced a non-finite value, or -1."""
    for pos in range(len(order)):
        t = order[pos]
        if t >= 0:
            if pairwise:
                ok = bpr_update(P, Q, iu[t], ii[t], ij[t], alpha, lp, lq)
            else:
                ok = pointwise_update(P, Q, iu[t], ii[t], iy[t], alpha, lp, lq)
        else:
            s = -1 - t
            if soc_mode == SOC_PAIR:
                ok = pair_update(P, sa[s], sb[s], w2[s], alpha, ls)
            elif soc_mode == SOC_PRODUCT:
                ok = product_update(P, Q, sa[s], sb[s], sc[s], alpha, ls, freeze_q)
            elif soc_mode == SOC_WEIGHTED_SUM:
                u = sa[s]
                ok = weighted_sum_update(P, u, fidx[indptr[u]:indptr[u + 1]],
                                         fstr[indptr[u]:indptr[u + 1]], alpha, ls)
            else:
                ok = True
        if not ok:
            return pos
    return -1


@njit(cache=True, nogil=True)
def sbpr_update(P, Q, u, i, k_soc, j, coef, alpha, lp, lq):
    """Two-tier step: positive over social item (gap scaled by ``1/coef``),
    social item over negative. ``j < 0`` drops the second tier."""
    K = P.shape[0]
    xi = 0.0
    xk = 0.0
    xj = 0.0
    for k in range(K):
        xi += P[k, u] * Q[k, i]
        xk += P[k, u] * Q[k, k_soc]
        if j >= 0:
            xj += P[k, u] * Q[k, j]
    g1 = -_sigmoid_neg((xi - xk) / coef) / coef
    g2 = -_sigmoid_neg(xk - xj) if j >= 0 else 0.0
    for k in range(K):
        pu = P[k, u]
        qi = Q[k, i]
        qk = Q[k, k_soc]
        gp = g1 * (qi - qk) + 2.0 * lp * pu
        if j >= 0:
            qj = Q[k, j]
            gp += g2 * (qk - qj)
            Q[k, j] = qj - alpha * (-g2 * pu + 2.0 * lq * qj)
        P[k, u] = pu - alpha * gp
        Q[k, i] = qi - alpha * (g1 * pu + 2.0 * lq * qi)
        Q[k, k_soc] = qk - alpha * ((g2 - g1) * pu + 2.0 * lq * qk)
    ok = _finite_col(P, u) and _finite_col(Q, i) and _finite_col(Q, k_soc)
    if j >= 0:
        ok = ok and _finite_col(Q, j)
    return ok


@njit(cache=True, nogil=True)
def run_sbpr(P, Q, us, pos, soc, neg, coef, alpha, lp, lq):
    for t in range(len(us)):
        if soc[t] < 0:
            ok = bpr_update(P, Q, us[t], pos[t], neg[t], alpha, lp, lq)
        else:
            ok = sbpr_update(P, Q, us[t], pos[t], soc[t], neg[t], coef[t], alpha, lp, lq)
        if not ok:
            return t
    return -1


def empty_int():
    return np.zeros(0, dtype=np.int64)
