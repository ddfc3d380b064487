# cython: boundscheck=False, wraparound=False, cdivision=True, language_level=3
"""Compiled Ward linkage kernel.

Mirrors asdkit._ward_py.ward_linkage exactly: same cost initialization order,
same Lance-Williams expression and the same (id_a, id_b) tie rule, so the two
backends produce bit-identical merge sequences.
"""

import numpy as np

cimport numpy as cnp

cnp.import_array()


def ward_linkage(x):
    x = np.ascontiguousarray(x, dtype=np.float64)
    cdef cnp.ndarray[cnp.float64_t, ndim=2] xv = x
    cdef Py_ssize_t n = xv.shape[0]
    cdef Py_ssize_t d = xv.shape[1]
    if n < 2:
        raise ValueError("need at least two points")

    cdef cnp.ndarray[cnp.float64_t, ndim=2] dist = np.empty((n, n), dtype=np.float64)
    cdef cnp.ndarray[cnp.int64_t, ndim=1] cluster_id = np.arange(n, dtype=np.int64)
    cdef cnp.ndarray[cnp.int64_t, ndim=1] size = np.ones(n, dtype=np.int64)
    cdef cnp.ndarray[cnp.uint8_t, ndim=1] active = np.ones(n, dtype=np.uint8)
    cdef cnp.ndarray[cnp.int64_t, ndim=1] ids_a = np.empty(n - 1, dtype=np.int64)
    cdef cnp.ndarray[cnp.int64_t, ndim=1] ids_b = np.empty(n - 1, dtype=np.int64)
    cdef cnp.ndarray[cnp.float64_t, ndim=1] costs = np.empty(n - 1, dtype=np.float64)
    cdef cnp.ndarray[cnp.int64_t, ndim=1] sizes = np.empty(n - 1, dtype=np.int64)

    cdef Py_ssize_t i, j, k, t, bi, bj
    cdef double acc, diff, best, v, si, sj, sk, dij
    cdef cnp.int64_t a, b, best_a, best_b

    for i in range(n):
        dist[i, i] = np.inf
        for j in range(i + 1, n):
            acc = 0.0
            for k in range(d):
                diff = xv[i, k] - xv[j, k]
                acc += diff * diff
            acc *= 0.5
            dist[i, j] = acc
            dist[j, i] = acc

    for t in range(n - 1):
        best = np.inf
        bi = -1
        bj = -1
        best_a = 0
        best_b = 0
        for i in range(n):
            if not active[i]:
                continue
            for j in range(i + 1, n):
                if not active[j]:
                    continue
                v = dist[i, j]
                a = cluster_id[i]
                b = cluster_id[j]
                if a > b:
                    a, b = b, a
                if v < best or (v == best and (a < best_a or (a == best_a and b < best_b))):
                    best = v
                    bi = i
                    bj = j
                    best_a = a
                    best_b = b

        ids_a[t] = best_a
        ids_b[t] = best_b
        costs[t] = best
        sizes[t] = size[bi] + size[bj]

        si = <double> size[bi]
        sj = <double> size[bj]
        dij = dist[bi, bj]
        for k in range(n):
            if not active[k] or k == bi or k == bj:
                continue
            sk = <double> size[k]
            v = ((si + sk) * dist[bi, k] + (sj + sk) * dist[bj, k] - sk * dij) / (si + sj + sk)
            dist[bi, k] = v
            dist[k, bi] = v

        active[bj] = 0
        size[bi] += size[bj]
        cluster_id[bi] = n + t

    return ids_a, ids_b, costs, sizes
