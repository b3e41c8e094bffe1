"""Brute-force apportionment oracle.

Among all non-negative integer vectors summing to ``procured``, pick the one
closest in squared distance to the exact quotas procured * w_i / sum(w).
Distances are compared as integers scaled by sum(w). Ties go to the
lexicographically largest vector in region order, which gives earlier region
ids the extra unit. All-zero consumption means equal weights.
"""

import itertools


def compositions(total, parts):
    if parts == 1:
        yield (total,)
        return
    for first in range(total, -1, -1):
        for rest in compositions(total - first, parts - 1):
            yield (first,) + rest


def oracle(weights, procured):
    if not weights:
        return ()
    if sum(weights) == 0:
        weights = [1] * len(weights)
    w_total = sum(weights)
    best, best_cost = None, None
    # compositions() yields in descending lexicographic order, so the first
    # minimum found is the lexicographically largest one
    for a in compositions(procured, len(weights)):
        cost = sum((w_total * ai - procured * wi) ** 2 for ai, wi in zip(a, weights))
        if best_cost is None or cost < best_cost:
            best, best_cost = a, cost
    return best


def all_instances(max_regions=4, max_procured=30, max_consumption=10):
    for n in range(1, max_regions + 1):
        for weights in itertools.product(range(max_consumption + 1), repeat=n):
            for p in range(max_procured + 1):
                yield weights, p


def exhaustive_check(allocate_fn, max_regions=4, max_procured=30, max_consumption=10):
    """Compare ``allocate_fn(weights, procured) -> tuple`` with the oracle on every instance.

    The enumeration is vectorized: for a fixed region count and procured
    total, every candidate vector is scored against every weight vector at
    once. Minimizing sum((T*a - p*w)^2) over a is the same as minimizing
    T*|a|^2 - 2*p*(a.w) because the remaining term does not depend on a.
    Values stay far below 2**53, so float64 arithmetic is exact.
    Returns (instances checked, list of mismatches).
    """
    import numpy as np

    checked, bad = 0, []
    for n in range(1, max_regions + 1):
        weights = np.array(list(itertools.product(range(max_consumption + 1), repeat=n)),
                           dtype=np.float64)
        eff = weights.copy()
        eff[eff.sum(axis=1) == 0] = 1.0
        totals = eff.sum(axis=1)
        for p in range(max_procured + 1):
            cands = np.array(list(compositions(p, n)), dtype=np.float64)
            sq = (cands ** 2).sum(axis=1)
            for lo in range(0, len(eff), 2048):
                w, t = eff[lo:lo + 2048], totals[lo:lo + 2048]
                score = t[None, :] * sq[:, None] - 2.0 * p * (cands @ w.T)
                best = cands[np.argmin(score, axis=0)].astype(int)
                for row, raw in zip(best, weights[lo:lo + 2048].astype(int)):
                    got = allocate_fn(tuple(raw), p)
                    checked += 1
                    if got != tuple(row) or sum(got) != p:
                        bad.append((tuple(raw), p, got, tuple(row)))
    return checked, bad
