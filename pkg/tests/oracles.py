"""Independent reference implementations shared by the unit and acceptance tests."""

import itertools
import math

import numpy as np


def active_set_oracle(K, y, C, eps=1e-9):
    """Exact dual optimum by enumerating which multipliers sit at 0, at C, or strictly between."""
    n = len(y)
    Q = np.outer(y, y) * K
    best = -math.inf
    for states in itertools.product((0, 1, 2), repeat=n):
        st = np.array(states)
        free = np.flatnonzero(st == 1)
        alpha = np.where(st == 2, C, 0.0)
        if free.size:
            # Q_FF a_F + y_F b = 1 - Q_FB a_B,  y_F' a_F = -y_B' a_B
            m = free.size
            A = np.zeros((m + 1, m + 1))
            A[:m, :m] = Q[np.ix_(free, free)]
            A[:m, m] = y[free]
            A[m, :m] = y[free]
            rhs = np.concatenate([1 - Q[free] @ alpha, [-(y @ alpha)]])
            try:
                sol = np.linalg.solve(A, rhs)
            except np.linalg.LinAlgError:
                continue
            alpha[free] = sol[:m]
            if (alpha[free] <= eps).any() or (alpha[free] >= C - eps).any():
                continue
            b_lo = b_hi = sol[m]
        else:
            if abs(y @ alpha) > eps:
                continue
            b_lo, b_hi = -math.inf, math.inf
        g = K @ (alpha * y)
        # y_i (g_i + b) >= 1 at zero, <= 1 at C
        for i in range(n):
            if st[i] == 1:
                continue
            bound = 1 / y[i] - g[i]  # y in {-1, 1}
            if (st[i] == 0) == (y[i] > 0):
                b_lo = max(b_lo, bound)
            else:
                b_hi = min(b_hi, bound)
        if b_lo > b_hi + 1e-7:
            continue
        v = alpha * y
        best = max(best, float(alpha.sum() - 0.5 * v @ K @ v))
    return best


def kkt_violation(K, y, alpha, C):
    """max over feasible ascent directions of the first-order violation, recomputed from alpha alone."""
    y = np.asarray(y, dtype=np.float64)
    grad = y * (K @ (alpha * y)) - 1.0
    yg = -y * grad
    pos = y > 0
    up = np.where(pos, alpha < C, alpha > 0)
    low = np.where(pos, alpha > 0, alpha < C)
    if not up.any() or not low.any():
        return 0.0
    return max(0.0, float(yg[up].max() - yg[low].min()))


def hik_score(betas, cs, svs, coef, b, x):
    """f(x) by explicit loops over kernels, support vectors and dimensions."""
    f = b
    for beta, c, sv, xu in zip(betas, cs, svs, x):
        for a, z in zip(coef, sv):
            f += beta * a * sum(min(zd, xd) for zd, xd in zip(z, xu)) / c
    return f
