"""Ward-linkage agglomerative clustering and pseudo-attribute assignment.

The agglomeration kernel exists twice: a compiled extension (asdkit._ward_fast,
built from Cython) and a pure-numpy fallback. The compiled one is picked at
import when available; `backend=` or ASDKIT_WARD_BACKEND overrides the choice.
`benchmarks/bench_ward.py` compares the two.
"""

from __future__ import annotations

import os
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from . import _ward_py
from .corpus import DatasetManifest
from .csvio import read_rows, write_rows

try:
    from . import _ward_fast
except ImportError:  # extension not built: pure-python install
    _ward_fast = None

HAVE_FAST_WARD = _ward_fast is not None

PSEUDO_LABEL_HEADER = ["path", "machine", "pseudo_attribute"]
DENDROGRAM_HEADER = ["step", "id_a", "id_b", "cost", "new_id", "size"]


@dataclass(frozen=True)
class Merge:
    id_a: int
    id_b: int
    cost: float
    new_id: int
    size: int


@dataclass(frozen=True)
class Dendrogram:
    """Full merge history; leaves are ids 0..n-1, merge t creates id n+t."""

    n_leaves: int
    merges: tuple[Merge, ...]

    def validate(self) -> None:
        if len(self.merges) != self.n_leaves - 1:
            raise ValueError("a dendrogram over n leaves must contain n-1 merges")
        consumed: set[int] = set()
        for m in self.merges:
            if m.id_a in consumed or m.id_b in consumed:
                raise ValueError(f"cluster id consumed twice in merge {m}")
            consumed.update((m.id_a, m.id_b))
            if m.cost < 0:
                raise ValueError("negative merge cost")


def ess(points: np.ndarray | Sequence[Sequence[float]]) -> float:
    """Within-cluster error sum of squares: sum of squared distances to the mean."""
    x = np.asarray(points, dtype=np.float64)
    if x.ndim == 1:
        x = x[:, None]
    if x.shape[0] == 0:
        raise ValueError("ess of an empty point set is undefined")
    centered = x - x.mean(axis=0)
    return float((centered ** 2).sum())


def ward_merge_cost(size_a: int, mean_a: np.ndarray, size_b: int, mean_b: np.ndarray) -> float:
    """Increase in ESS when merging two clusters, from sizes and means only."""
    if size_a < 1 or size_b < 1:
        raise ValueError("cluster sizes must be >= 1")
    diff = np.asarray(mean_a, dtype=np.float64) - np.asarray(mean_b, dtype=np.float64)
    return float(size_a * size_b / (size_a + size_b) * (diff ** 2).sum())


def _resolve_backend(backend: str) -> str:
    if backend == "auto":
        backend = os.environ.get("ASDKIT_WARD_BACKEND", "auto")
    if backend == "auto":
        return "fast" if HAVE_FAST_WARD else "python"
    if backend == "fast" and not HAVE_FAST_WARD:
        raise RuntimeError("compiled ward backend requested but asdkit._ward_fast is not built")
    if backend not in ("fast", "python"):
        raise ValueError(f"unknown ward backend {backend!r}")
    return backend


def agglomerate(embeddings: np.ndarray, backend: str = "auto") -> Dendrogram:
    """Bottom-up Ward clustering of rows; deterministic, ties by smallest id pair."""
    x = np.asarray(embeddings, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] < 2:
        raise ValueError("need a 2-D array with at least two rows")
    if not np.isfinite(x).all():
        raise ValueError("non-finite values in clustering input")
    kernel = _ward_fast if _resolve_backend(backend) == "fast" else _ward_py
    ids_a, ids_b, costs, sizes = kernel.ward_linkage(x)
    n = x.shape[0]
    merges = tuple(
        Merge(int(ids_a[t]), int(ids_b[t]), float(costs[t]), n + t, int(sizes[t]))
        for t in range(n - 1)
    )
    return Dendrogram(n_leaves=n, merges=merges)


def cut(dendrogram: Dendrogram, k: int) -> np.ndarray:
    """Labels after undoing the last k-1 merges; label ids follow row discovery order."""
    n = dendrogram.n_leaves
    if not 1 <= k <= n:
        raise ValueError(f"k={k} out of range [1, {n}]")
    parent = np.full(2 * n - 1, -1, dtype=np.int64)
    for merge in dendrogram.merges[: n - k]:
        parent[merge.id_a] = merge.new_id
        parent[merge.id_b] = merge.new_id

    def root(i: int) -> int:
        while parent[i] >= 0:
            i = parent[i]
        return i

    labels = np.empty(n, dtype=np.int64)
    label_of_root: dict[int, int] = {}
    for i in range(n):
        r = root(i)
        if r not in label_of_root:
            label_of_root[r] = len(label_of_root)
        labels[i] = label_of_root[r]
    return labels


@dataclass(frozen=True)
class FixedK:
    k: int

    def describe(self) -> str:
        return f"fixed:{self.k}"


@dataclass(frozen=True)
class SilhouetteRange:
    k_min: int = 2
    k_max: int = 8

    def describe(self) -> str:
        return f"silhouette:{self.k_min}:{self.k_max}"


Policy = FixedK | SilhouetteRange


def parse_policy(text: str) -> Policy:
    parts = text.split(":")
    if parts[0] == "fixed" and len(parts) == 2:
        return FixedK(int(parts[1]))
    if parts[0] == "silhouette" and len(parts) == 3:
        return SilhouetteRange(int(parts[1]), int(parts[2]))
    raise ValueError(f"unknown cluster policy {text!r} (use fixed:<k> or silhouette:<min>:<max>)")


def silhouette_score(x: np.ndarray, labels: np.ndarray) -> float:
    """Mean silhouette coefficient, Euclidean; singletons and 0/0 score as 0."""
    x = np.asarray(x, dtype=np.float64)
    n = x.shape[0]
    sq = ((x[:, None, :] - x[None, :, :]) ** 2).sum(-1)
    dist = np.sqrt(np.maximum(sq, 0.0))
    uniq = np.unique(labels)
    scores = np.zeros(n)
    for i in range(n):
        own = labels == labels[i]
        n_own = own.sum()
        if n_own <= 1:
            continue
        a = dist[i, own].sum() / (n_own - 1)
        b = np.inf
        for lab in uniq:
            if lab == labels[i]:
                continue
            others = labels == lab
            b = min(b, dist[i, others].mean())
        denom = max(a, b)
        scores[i] = 0.0 if denom == 0.0 else (b - a) / denom
    return float(scores.mean())


def select_k(dendrogram: Dendrogram, embeddings: np.ndarray, policy: Policy) -> int:
    """Cluster count for a dendrogram: pass-through or best mean silhouette (ties: smallest k)."""
    n = dendrogram.n_leaves
    if isinstance(policy, FixedK):
        if not 1 <= policy.k <= n:
            raise ValueError(f"fixed k={policy.k} out of range [1, {n}]")
        return policy.k
    if not 2 <= policy.k_min <= policy.k_max <= n:
        raise ValueError(f"silhouette range [{policy.k_min}, {policy.k_max}] invalid for n={n}")
    best_k = policy.k_min
    best_score = -np.inf
    for k in range(policy.k_min, policy.k_max + 1):
        score = silhouette_score(embeddings, cut(dendrogram, k))
        if score > best_score:
            best_score = score
            best_k = k
    return best_k


@dataclass(frozen=True)
class PseudoLabeling:
    machine_type: str
    labels: Mapping[str, int]  # clip path -> cluster label in [0, k)
    k: int
    policy: str
    dendrogram: Dendrogram | None = None

    def token_of(self, path: str) -> str:
        return f"pseudo{self.labels[path]}"


def l2_normalize_rows(x: np.ndarray) -> np.ndarray:
    norms = np.linalg.norm(x, axis=1, keepdims=True)
    if np.any(norms == 0):
        raise ValueError("cannot normalize a zero embedding")
    return x / norms


def assign_pseudo_attributes(manifest: DatasetManifest, embeddings: Mapping[str, np.ndarray],
                             policy: Policy, machines: Sequence[str] | None = None,
                             l2_normalize: bool = True, backend: str = "auto",
                             ) -> dict[str, PseudoLabeling]:
    """Cluster each unattributed machine's train clips (both domains pooled).

    `machines` may restrict the set but must not name attributed machines.
    Dendrograms and labelings are returned per machine; the silhouette search
    range is clamped to the machine's clip count.
    """
    if machines is None:
        machines = manifest.unattributed_machines
    result: dict[str, PseudoLabeling] = {}
    for machine in machines:
        if machine in manifest.attributed_machines:
            raise ValueError(f"machine {machine!r} has ground-truth attributes")
        if machine not in manifest.machines:
            raise ValueError(f"unknown machine {machine!r}")
        clips = manifest.train_clips(machine)
        missing = [c.path for c in clips if c.path not in embeddings]
        if missing:
            raise ValueError(f"missing embedding for clip {missing[0]}")
        x = np.stack([np.asarray(embeddings[c.path], dtype=np.float64) for c in clips])
        if l2_normalize:
            x = l2_normalize_rows(x)
        machine_policy = policy
        if isinstance(policy, SilhouetteRange):
            machine_policy = SilhouetteRange(policy.k_min, min(policy.k_max, x.shape[0]))
        dendrogram = agglomerate(x, backend=backend)
        k = select_k(dendrogram, x, machine_policy)
        labels = cut(dendrogram, k)
        result[machine] = PseudoLabeling(
            machine_type=machine,
            labels={c.path: int(lab) for c, lab in zip(clips, labels)},
            k=k,
            policy=machine_policy.describe(),
            dendrogram=dendrogram,
        )
    return result


def cluster_purity(labels: Sequence[int], truths: Sequence[str]) -> float:
    """Fraction of points whose cluster's majority latent attribute matches theirs."""
    if len(labels) != len(truths) or not labels:
        raise ValueError("labels and truths must be equal-length and non-empty")
    correct = 0
    for lab in set(labels):
        members = [t for l, t in zip(labels, truths) if l == lab]
        counts: dict[str, int] = {}
        for t in members:
            counts[t] = counts.get(t, 0) + 1
        correct += max(counts.values())
    return correct / len(labels)


def write_pseudo_labels_csv(path: Path | str, labelings: Mapping[str, PseudoLabeling],
                            stamp: str | None = None) -> None:
    rows = []
    for machine in sorted(labelings):
        labeling = labelings[machine]
        for clip_path in sorted(labeling.labels):
            rows.append([clip_path, machine, labeling.token_of(clip_path)])
    write_rows(path, PSEUDO_LABEL_HEADER, rows, stamp=stamp)


def read_pseudo_labels_csv(path: Path | str) -> dict[str, PseudoLabeling]:
    _, rows = read_rows(path, PSEUDO_LABEL_HEADER)
    by_machine: dict[str, dict[str, int]] = {}
    for clip_path, machine, token in rows:
        if not token.startswith("pseudo"):
            raise ValueError(f"bad pseudo attribute token {token!r}")
        by_machine.setdefault(machine, {})[clip_path] = int(token[len("pseudo"):])
    return {
        machine: PseudoLabeling(machine_type=machine, labels=labels,
                                k=max(labels.values()) + 1, policy="file")
        for machine, labels in by_machine.items()
    }


def write_dendrogram_csv(path: Path | str, dendrogram: Dendrogram,
                         stamp: str | None = None) -> None:
    rows = [[t, m.id_a, m.id_b, repr(m.cost), m.new_id, m.size]
            for t, m in enumerate(dendrogram.merges)]
    write_rows(path, DENDROGRAM_HEADER, rows, stamp=stamp)
