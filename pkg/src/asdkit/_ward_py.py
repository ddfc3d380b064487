"""Pure-numpy Ward linkage kernel (fallback for the compiled extension).

Both kernels run the same algorithm: a full merge-cost matrix updated with the
Lance-Williams recurrence, scanning all active pairs per step. Arithmetic is
ordered identically to the compiled version so the two produce bit-identical
merge sequences.
"""

from __future__ import annotations

import numpy as np


def ward_linkage(x: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """Agglomerate rows of `x`; merge t joins cluster ids_a[t] < ids_b[t] into id n+t.

    Returns (ids_a, ids_b, costs, sizes) with costs the Ward merge cost
    (increase in within-cluster error sum of squares) and sizes the merged
    cluster size. Ties are broken by the smallest (id_a, id_b) pair.
    """
    x = np.ascontiguousarray(x, dtype=np.float64)
    n, d = x.shape
    if n < 2:
        raise ValueError("need at least two points")

    # initial cost between singletons: 0.5 * squared euclidean distance,
    # accumulated one dimension at a time (matches the compiled kernel)
    dist = np.zeros((n, n), dtype=np.float64)
    for k in range(d):
        diff = x[:, k, None] - x[None, :, k]
        dist += diff * diff
    dist *= 0.5
    np.fill_diagonal(dist, np.inf)

    cluster_id = np.arange(n, dtype=np.int64)
    size = np.ones(n, dtype=np.int64)
    active = np.ones(n, dtype=bool)
    ids_a = np.empty(n - 1, dtype=np.int64)
    ids_b = np.empty(n - 1, dtype=np.int64)
    costs = np.empty(n - 1, dtype=np.float64)
    sizes = np.empty(n - 1, dtype=np.int64)

    for t in range(n - 1):
        best = dist.min()
        cand_i, cand_j = np.nonzero(dist == best)
        candidates = []
        for i, j in zip(cand_i.tolist(), cand_j.tolist()):
            if i < j:
                a, b = int(cluster_id[i]), int(cluster_id[j])
                candidates.append(((a, b) if a < b else (b, a), i, j))
        (id_a, id_b), bi, bj = min(candidates)

        ids_a[t], ids_b[t], costs[t] = id_a, id_b, best
        sizes[t] = size[bi] + size[bj]

        si, sj = float(size[bi]), float(size[bj])
        sk = size.astype(np.float64)
        new_row = ((si + sk) * dist[bi] + (sj + sk) * dist[bj] - sk * dist[bi, bj]) / (si + sj + sk)
        new_row[~active] = np.inf
        new_row[bi] = np.inf
        new_row[bj] = np.inf

        active[bj] = False
        size[bi] += size[bj]
        cluster_id[bi] = n + t
        dist[bi, :] = new_row
        dist[:, bi] = new_row
        dist[bj, :] = np.inf
        dist[:, bj] = np.inf

    return ids_a, ids_b, costs, sizes
