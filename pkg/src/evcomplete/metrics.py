"""Chamfer and Earth Mover's distances between event clouds (x, y, t only)."""
from __future__ import annotations

import numpy as np
from scipy.optimize import linear_sum_assignment

from .geometry import _xyz

EMD_EXACT_CAP = 512
_CHUNK = 2048


class EMDTooLarge(ValueError):
    pass


def _nearest(a: np.ndarray, b: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """For each row of ``a``: index of its nearest row in ``b`` and the squared distance."""
    idx = np.empty(len(a), dtype=np.int64)
    d2 = np.empty(len(a))
    bb = (b ** 2).sum(axis=1)
    for s in range(0, len(a), _CHUNK):
        blk = a[s:s + _CHUNK]
        # exact differences rather than the expanded form, so ties and zeros stay exact
        d = ((blk[:, None, :] - b[None, :, :]) ** 2).sum(axis=-1) if len(b) * len(blk) <= 4_000_000 \
            else (blk ** 2).sum(axis=1)[:, None] - 2 * blk @ b.T + bb[None, :]
        j = d.argmin(axis=1)
        idx[s:s + len(blk)] = j
        d2[s:s + len(blk)] = d[np.arange(len(blk)), j]
    return idx, d2


def _pair(x, e):
    x, e = _xyz(x), _xyz(e)
    if len(x) == 0 or len(e) == 0:
        raise ValueError("chamfer distance needs non-empty clouds")
    return x, e


def chamfer(x, e) -> float:
    x, e = _pair(x, e)
    _, dx = _nearest(x, e)
    _, de = _nearest(e, x)
    return float(dx.mean() + de.mean())


def chamfer_gradient(x, e) -> np.ndarray:
    """d chamfer / d x with the nearest-neighbour assignment held fixed."""
    x, e = _pair(x, e)
    jx, _ = _nearest(x, e)
    je, _ = _nearest(e, x)
    g = 2.0 * (x - e[jx]) / len(x)
    # second term: each e pulls on its nearest x
    np.add.at(g, je, 2.0 * (x[je] - e) / len(e))
    return g


def _same_size(x, e):
    x, e = _xyz(x), _xyz(e)
    if len(x) != len(e):
        raise ValueError(f"EMD needs equal sizes, got {len(x)} and {len(e)}")
    if len(x) == 0:
        raise ValueError("EMD needs non-empty clouds")
    return x, e


def cost_matrix(x: np.ndarray, e: np.ndarray) -> np.ndarray:
    return np.sqrt(((x[:, None, :] - e[None, :, :]) ** 2).sum(axis=-1))


def emd_exact(x, e, cap: int = EMD_EXACT_CAP) -> float:
    """Mean Euclidean cost of the optimal bijection."""
    x, e = _same_size(x, e)
    if len(x) > cap:
        raise EMDTooLarge(f"{len(x)} points exceeds the exact-solver cap of {cap}; use emd_approx")
    c = cost_matrix(x, e)
    rows, cols = linear_sum_assignment(c)
    return float(c[rows, cols].sum() / len(x))


def _auction_phase(benefit, price, eps):
    """One Jacobi auction round at fixed ``eps``; updates ``price`` in place."""
    n = benefit.shape[0]
    assign = np.full(n, -1)
    owner = np.full(n, -1)
    rows = np.arange(n)
    while True:
        free = rows[assign < 0]
        if len(free) == 0:
            return assign
        val = benefit[free] - price
        j = val.argmax(axis=1)
        best = val[np.arange(len(free)), j]
        if n > 1:
            val[np.arange(len(free)), j] = -np.inf
            second = val.max(axis=1)
        else:
            second = best
        bid = price[j] + best - second + eps
        # highest bid wins each contested object; lowest row index breaks ties
        order = np.lexsort((free, -bid, j))
        first = np.ones(len(order), dtype=bool)
        first[1:] = j[order][1:] != j[order][:-1]
        win = order[first]
        objs = j[win]
        prev = owner[objs]
        assign[prev[prev >= 0]] = -1
        owner[objs] = free[win]
        assign[free[win]] = objs
        price[objs] = bid[win]


def auction_assignment(cost: np.ndarray, epsilon: float, iters: int | None = None) -> np.ndarray:
    """Jacobi auction with epsilon scaling (minimisation form).

    Phase k bids with increment ``max(eps0 / 4**k, epsilon)`` and prices carry
    over between phases.  ``iters`` caps the number of phases (default: run
    until the increment reaches ``epsilon``).  The cheapest assignment seen
    over all phases is returned, so the cost is non-increasing in ``iters``.
    Once a phase at ``epsilon`` completes, the result is within
    ``n * epsilon`` of the optimal total cost.
    """
    n = cost.shape[0]
    benefit = -cost
    price = np.zeros(n)
    eps0 = max(float(np.ptp(cost)) / 4.0, epsilon)
    n_phases = 1
    while eps0 / 4 ** (n_phases - 1) > epsilon:
        n_phases += 1
    if iters is not None:
        if iters < 1:
            raise ValueError("iters must be >= 1")
        n_phases = iters
    best, best_cost = None, np.inf
    for k in range(n_phases):
        assign = _auction_phase(benefit, price, max(eps0 / 4 ** k, epsilon))
        c = cost[np.arange(n), assign].sum()
        if c < best_cost:
            best, best_cost = assign, c
    return best


def emd_approx(x, e, epsilon: float | None = None, iters: int | None = None) -> float:
    """Auction-based EMD estimate.

    Any bijection costs at least the optimum, so the estimate never falls
    below ``emd_exact``; once the final phase at ``epsilon`` has run it
    exceeds it by at most ``epsilon`` (mean form: N * epsilon total slack over
    N points).  The default epsilon is 1e-4 of the largest pairwise cost.
    """
    x, e = _same_size(x, e)
    c = cost_matrix(x, e)
    if epsilon is None:
        epsilon = max(float(c.max()), 1e-12) * 1e-4
    assign = auction_assignment(c, epsilon, iters)
    return float(c[np.arange(len(x)), assign].sum() / len(x))
