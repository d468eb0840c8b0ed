"""Optimal one-to-one assignment of ground truths to prediction slots.

Implements the O(n^3) potential-based shortest-augmenting-path form of
the Hungarian algorithm (rows = ground truths, columns = queries). The
inner column scan is vectorized; matrices here are tiny (tens of rows),
so this is exact and fast without any external solver.
"""

from __future__ import annotations

import numpy as np


def hungarian_match(cost):
    """Minimum-cost injective assignment of M ground truths to Q queries.

    Args:
        cost: [Q, M] matrix, cost[q, m] of assigning ground truth m to
            query q. Requires M <= Q and finite entries.

    Returns:
        int array of length M; entry m is the query index assigned to
        ground truth m. The induced total cost is globally minimal.
    """
    cost = np.asarray(cost, dtype=np.float64)
    if cost.ndim != 2:
        raise ValueError(f"cost must be 2-D, got shape {cost.shape}")
    q_count, m_count = cost.shape
    if m_count > q_count:
        raise ValueError(f"more ground truths ({m_count}) than queries ({q_count})")
    if m_count == 0:
        return np.zeros(0, dtype=np.int64)
    if not np.all(np.isfinite(cost)):
        raise ValueError("cost matrix contains non-finite entries")

    c = cost.T  # [M, Q]: row i = ground truth, column j = query
    n, m = m_count, q_count
    u = np.zeros(n + 1)
    v = np.zeros(m + 1)
    p = np.zeros(m + 1, dtype=np.int64)  # p[j]: row matched to column j, 1-based
    way = np.zeros(m + 1, dtype=np.int64)

    for i in range(1, n + 1):
        p[0] = i
        j0 = 0
        minv = np.full(m + 1, np.inf)
        used = np.zeros(m + 1, dtype=bool)
        while True:
            used[j0] = True
            i0 = p[j0]
            cur = c[i0 - 1] - u[i0] - v[1:]
            free = ~used[1:]
            better = free & (cur < minv[1:])
            minv[1:][better] = cur[better]
            way[1:][better] = j0
            masked = np.where(free, minv[1:], np.inf)
            j1 = int(np.argmin(masked)) + 1
            delta = masked[j1 - 1]
            u[p[used]] += delta
            v[used] -= delta
            minv[1:][free] -= delta
            j0 = j1
            if p[j0] == 0:
                break
        while j0 != 0:
            j1 = way[j0]
            p[j0] = p[j1]
            j0 = j1

    assign = np.full(n, -1, dtype=np.int64)
    for j in range(1, m + 1):
        if p[j] > 0:
            assign[p[j] - 1] = j - 1
    return assign


def assignment_cost(cost, assign):
    """Total cost of an assignment, summed in ground-truth order."""
    cost = np.asarray(cost)
    total = 0.0
    for m_idx, q_idx in enumerate(assign):
        total += float(cost[q_idx, m_idx])
    return total
