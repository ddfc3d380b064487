"""Independent reference implementations used to pin expected values.

These deliberately share no code path with the package: the clustering oracle
re-derives every merge cost from raw points each step, the AUC oracle counts
pairs, and the pAUC oracle integrates the ROC polyline in exact rational
arithmetic.
"""

from __future__ import annotations

from fractions import Fraction

import numpy as np
import torch


def naive_ward(x: np.ndarray) -> list[tuple[int, int, float, int, int]]:
    """O(n^3) agglomeration: recompute all pairwise ESS increases from points
    at every step; ties broken by the smallest (id_a, id_b) pair.

    Returns rows (id_a, id_b, cost, new_id, size).
    """
    x = np.asarray(x, dtype=np.float64)
    n = x.shape[0]
    ids: list[int] = list(range(n))
    members: dict[int, list[int]] = {i: [i] for i in range(n)}
    merges = []
    for t in range(n - 1):
        sums = np.stack([x[members[i]].sum(axis=0) for i in ids])
        sq = np.array([(x[members[i]] ** 2).sum() for i in ids])
        counts = np.array([len(members[i]) for i in ids], dtype=np.float64)
        ess = sq - (sums ** 2).sum(axis=1) / counts
        union_sq = ((sums[:, None, :] + sums[None, :, :]) ** 2).sum(axis=-1)
        union_counts = counts[:, None] + counts[None, :]
        union_ess = sq[:, None] + sq[None, :] - union_sq / union_counts
        cost = union_ess - ess[:, None] - ess[None, :]

        iu, ju = np.triu_indices(len(ids), k=1)
        vals = cost[iu, ju]
        best = vals.min()
        # ids is ascending, and triu enumerates (i, j) in lexicographic order,
        # so the first minimal entry already satisfies the tie rule
        c = int(np.nonzero(vals == best)[0][0])
        a, b = ids[iu[c]], ids[ju[c]]
        merges.append((a, b, float(best), n + t, len(members[a]) + len(members[b])))
        members[n + t] = members.pop(a) + members.pop(b)
        ids = [i for i in ids if i not in (a, b)] + [n + t]
    return merges


def pair_count_auc(normal_scores, anomaly_scores) -> float:
    """Mann-Whitney statistic by explicit pair counting (ties worth 0.5)."""
    normals = np.asarray(normal_scores, dtype=np.float64)
    anomalies = np.asarray(anomaly_scores, dtype=np.float64)
    wins = (anomalies[:, None] > normals[None, :]).sum()
    ties = (anomalies[:, None] == normals[None, :]).sum()
    return float((wins + 0.5 * ties) / (normals.size * anomalies.size))


def rational_pauc(normal_scores, anomaly_scores, p: Fraction) -> Fraction:
    """Exact partial AUC: rational ROC polyline, rational boundary interpolation."""
    normals = list(normal_scores)
    anomalies = list(anomaly_scores)
    n_n, n_a = len(normals), len(anomalies)
    thresholds = sorted(set(normals) | set(anomalies), reverse=True)
    points: list[tuple[Fraction, Fraction]] = [(Fraction(0), Fraction(0))]
    fp = tp = 0
    for t in thresholds:
        fp += sum(1 for s in normals if s == t)
        tp += sum(1 for s in anomalies if s == t)
        points.append((Fraction(fp, n_n), Fraction(tp, n_a)))

    area = Fraction(0)
    for (x0, y0), (x1, y1) in zip(points, points[1:]):
        if x0 >= p:
            break
        if x1 > p:
            y1 = y0 + (y1 - y0) * (p - x0) / (x1 - x0)
            x1 = p
        area += (x1 - x0) * (y0 + y1) / 2
    return area / p


def directional_derivative(loss_fn, params: list[torch.nn.Parameter],
                           direction: list[torch.Tensor], eps: float = 1e-4) -> float:
    """Central finite difference of loss_fn along a parameter-space direction."""
    with torch.no_grad():
        for prm, d in zip(params, direction):
            prm.add_(d, alpha=eps)
    plus = float(loss_fn().detach())
    with torch.no_grad():
        for prm, d in zip(params, direction):
            prm.add_(d, alpha=-2.0 * eps)
    minus = float(loss_fn().detach())
    with torch.no_grad():
        for prm, d in zip(params, direction):
            prm.add_(d, alpha=eps)
    return (plus - minus) / (2.0 * eps)


def autograd_directional(loss_fn, params: list[torch.nn.Parameter],
                         direction: list[torch.Tensor]) -> float:
    for prm in params:
        prm.grad = None
    loss = loss_fn()
    loss.backward()
    total = 0.0
    for prm, d in zip(params, direction):
        if prm.grad is not None:
            total += float((prm.grad * d).sum())
    return total


def random_direction(params: list[torch.nn.Parameter], rng: np.random.Generator) -> list[torch.Tensor]:
    direction = [torch.from_numpy(rng.standard_normal(tuple(p.shape))).to(p.dtype) for p in params]
    norm = np.sqrt(sum(float((d ** 2).sum()) for d in direction))
    return [d / norm for d in direction]
