"""Independent reference computations used as test oracles.

Nothing here calls into the package's numerical code; each oracle is a
direct, slow transcription of the defining formula.
"""

from __future__ import annotations

import math
from fractions import Fraction

import numpy as np


def step_value(breakpoints, values, u):
    """Left-continuous step value by linear search."""
    j = 0
    while j < len(breakpoints) and breakpoints[j] < u:
        j += 1
    return values[j]


def midpoint_integral(breakpoints, values, alpha, lo, hi, cells_per_piece=4):
    """Integral of ``step - alpha`` over ``[lo, hi]`` (signed) on a grid containing every breakpoint.

    Inside each cell the integrand is constant, so the midpoint rule is exact
    up to rounding; cells are further subdivided to exercise the sampling.
    """
    sign = 1.0
    if hi < lo:
        lo, hi, sign = hi, lo, -1.0
    knots = [lo] + [b for b in breakpoints if lo < b < hi] + [hi]
    total = 0.0
    for a, b in zip(knots[:-1], knots[1:]):
        edges = np.linspace(a, b, cells_per_piece + 1)
        for c0, c1 in zip(edges[:-1], edges[1:]):
            mid = 0.5 * (c0 + c1)
            total += (step_value(breakpoints, values, mid) - alpha) * (c1 - c0)
    return sign * total


def pinball(z, alpha):
    """Check loss with the level used by the single-step antiderivative."""
    return (1.0 - alpha) * z if z >= 0 else -alpha * z


def conformal_order_statistic(residuals, alpha):
    """The ``ceil((1-alpha)(n+1))``-th smallest residual, in exact arithmetic for the index."""
    n = len(residuals)
    k = math.ceil((1 - Fraction(alpha).limit_denominator(10**9)) * (n + 1))
    if k > n:
        return math.inf
    return sorted(residuals)[k - 1]


def objective_1d(theta, phis, losses, phi_t, alpha, gamma=0.0):
    """Objective for scalar features from hinge sums, looping over samples."""
    n = len(losses)
    total = 0.0
    for phi, (b, v) in zip(phis, losses):
        u = phi * theta
        anchor = b[0] if len(b) else 0.0
        s = (v[0] - alpha) * (u - anchor)
        for j, bj in enumerate(b):
            s += (v[j + 1] - v[j]) * max(0.0, u - bj)
        total += s
    total += (1 - alpha) * phi_t * theta
    return total / (n + 1) + 0.5 * gamma * theta * theta


def brute_min_1d(phis, losses, phi_t, alpha):
    """Minimum of the unregularized 1-D objective over all kinks (and the set of minimizers).

    The objective is piecewise linear with kinks at ``b / phi``; if it is
    bounded below the minimum is attained at a kink.
    """
    kinks = sorted({bj / phi for phi, (b, _) in zip(phis, losses) if phi != 0 for bj in b})
    if not kinks:
        kinks = [0.0]
    vals = [objective_1d(t, phis, losses, phi_t, alpha) for t in kinks]
    best = min(vals)
    scale = 1e-9 * (1 + abs(best))
    return best, [t for t, v in zip(kinks, vals) if v <= best + scale]


def brute_marginal_crc(losses, alpha):
    """Largest ``u`` with ``(sum l_i(u) + 1)/(n+1) <= alpha`` in exact rational arithmetic.

    ``losses`` are ``(breakpoints, values)`` pairs with values exactly
    representable as fractions.
    """
    n = len(losses)
    a = Fraction(alpha).limit_denominator(10**9)

    def ok(u):
        s = sum(Fraction(step_value(b, v, u)).limit_denominator(10**9) for b, v in losses)
        return (s + 1) / (n + 1) <= a

    cands = sorted({bj for b, _ in losses for bj in b})
    if not cands:
        return math.inf if ok(0.0) else -math.inf
    far_left = cands[0] - 1.0
    if not ok(far_left):
        return -math.inf
    best = far_left
    for c in cands:
        if ok(c):
            best = c
        else:
            return best
    return math.inf if ok(cands[-1] + 1.0) else best


def kahan_dot(x, y):
    s = 0.0
    comp = 0.0
    for a, b in zip(x, y):
        term = a * b - comp
        t = s + term
        comp = (t - s) - term
        s = t
    return s


def best_split_1d(x, y, min_leaf=1):
    """Exhaustive variance-reduction split of one feature; returns the midpoint threshold."""
    order = np.argsort(x)
    xs, ys = np.asarray(x)[order], np.asarray(y)[order]
    best, thr = math.inf, None
    for i in range(min_leaf, len(xs) - min_leaf + 1):
        if xs[i - 1] == xs[i]:
            continue
        left, right = ys[:i], ys[i:]
        sse = ((left - left.mean()) ** 2).sum() + ((right - right.mean()) ** 2).sum()
        if sse < best:
            best, thr = sse, 0.5 * (xs[i - 1] + xs[i])
    return thr


def spearman_rank_difference(a, b):
    """``1 - 6 sum d^2 / (m (m^2 - 1))`` for tie-free inputs."""
    ra = np.argsort(np.argsort(a))
    rb = np.argsort(np.argsort(b))
    d2 = float(((ra - rb) ** 2).sum())
    m = len(a)
    return 1.0 - 6.0 * d2 / (m * (m * m - 1))


def walk_tree(tree_dict, x):
    """Leaf id reached by ``x`` in a serialized tree."""
    node = tree_dict
    while "leaf" not in node:
        node = node["left"] if x[node["feature"]] <= node["threshold"] else node["right"]
    return node["leaf"]


def epigraph_lp_min(F, losses, phi_t, alpha, box=1e4):
    """Minimum of the unregularized objective via a primal epigraph LP.

    Each antiderivative is the max of its affine pieces, so
    ``min sum_i z_i + (1-alpha) phi_t @ theta`` subject to ``z_i >= piece_ij(phi_i @ theta)``
    gives the optimum. ``theta`` is boxed to keep the LP bounded; callers
    should only use instances with finite optima well inside the box.
    """
    from scipy.optimize import linprog

    F = np.asarray(F, dtype=np.float64)
    n, d = F.shape
    rows, rhs = [], []
    for i, (b, v) in enumerate(losses):
        anchor = b[0] if len(b) else 0.0
        # piece j: slope v_j - alpha; value at anchor-relative form
        # I(u) = max_j [(v_j - alpha) u + c_j] with c_j fixed by continuity
        c = -(v[0] - alpha) * anchor
        pieces = [(v[0] - alpha, c)]
        for j, bj in enumerate(b):
            slope_prev, c_prev = pieces[-1]
            slope = v[j + 1] - alpha
            c_new = c_prev + (slope_prev - slope) * bj
            pieces.append((slope, c_new))
        for slope, c0 in pieces:
            # slope * (F_i theta) + c0 <= z_i
            row = np.zeros(d + n)
            row[:d] = slope * F[i]
            row[d + i] = -1.0
            rows.append(row)
            rhs.append(-c0)
    cost = np.r_[(1 - alpha) * np.asarray(phi_t, dtype=np.float64), np.ones(n)] / (n + 1)
    bounds = [(-box, box)] * d + [(None, None)] * n
    res = linprog(cost, A_ub=np.array(rows), b_ub=np.array(rhs), bounds=bounds, method="highs")
    assert res.status == 0, res.message
    return float(res.fun), res.x[:d]
