"""KNN anomaly scoring against a memory bank of normal training embeddings."""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .corpus import DatasetManifest
from .csvio import read_rows, write_rows
from .pseudolabel import l2_normalize_rows

EMBEDDING_IDS_HEADER = ["row", "path"]
SCORE_HEADER = ["path", "score"]


@dataclass(frozen=True)
class MachineBank:
    matrix: np.ndarray        # (n, D) rows L2-normalized
    paths: tuple[str, ...]
    domains: tuple[str, ...]


@dataclass(frozen=True)
class MemoryBank:
    machines: Mapping[str, MachineBank]


def build_memory_bank(manifest: DatasetManifest, embeddings: Mapping[str, np.ndarray]) -> MemoryBank:
    """Normalized train embeddings grouped by machine, both domains pooled."""
    banks: dict[str, MachineBank] = {}
    for machine in manifest.machines:
        clips = manifest.train_clips(machine)
        if not clips:
            raise ValueError(f"machine {machine!r} has no train clips")
        missing = [c.path for c in clips if c.path not in embeddings]
        if missing:
            raise ValueError(f"missing embedding for clip {missing[0]}")
        matrix = np.stack([np.asarray(embeddings[c.path], dtype=np.float64) for c in clips])
        matrix = l2_normalize_rows(matrix)
        banks[machine] = MachineBank(
            matrix=matrix,
            paths=tuple(c.path for c in clips),
            domains=tuple(c.domain for c in clips),
        )
    return MemoryBank(machines=banks)


def anomaly_score(test_embedding: np.ndarray, bank: MemoryBank, machine_type: str,
                  k: int = 1, per_domain_min: bool = False) -> float:
    """Mean cosine distance to the k nearest normal embeddings; in [0, 2].

    With per_domain_min, the score is the minimum over domains of the per-domain
    mean-of-k-nearest (k clamped to the domain size).
    """
    if machine_type not in bank.machines:
        raise ValueError(f"unknown machine {machine_type!r}")
    mbank = bank.machines[machine_type]
    n = mbank.matrix.shape[0]
    if not 1 <= k <= n:
        raise ValueError(f"k={k} out of range [1, {n}]")
    e = np.asarray(test_embedding, dtype=np.float64)
    norm = np.linalg.norm(e)
    if norm == 0:
        raise ValueError("cannot score a zero embedding")
    distances = 1.0 - mbank.matrix @ (e / norm)

    if not per_domain_min:
        return float(np.sort(distances)[:k].mean())

    scores = []
    domains = np.asarray(mbank.domains)
    for domain in sorted(set(mbank.domains)):
        d = np.sort(distances[domains == domain])
        scores.append(float(d[: min(k, len(d))].mean()))
    return min(scores)


def score_clips(manifest: DatasetManifest, embeddings: Mapping[str, np.ndarray],
                bank: MemoryBank, k: int = 1, per_domain_min: bool = False) -> dict[str, float]:
    """Anomaly scores for every test clip of the manifest."""
    scores: dict[str, float] = {}
    for clip in manifest.test_clips():
        if clip.path not in embeddings:
            raise ValueError(f"missing embedding for clip {clip.path}")
        scores[clip.path] = anomaly_score(embeddings[clip.path], bank, clip.machine_type,
                                          k=k, per_domain_min=per_domain_min)
    return scores


# ---------------------------------------------------------------------------
# Embedding store: flat binary (count, dim little-endian u32, float32 rows)
# plus a sidecar CSV of clip ids.
# ---------------------------------------------------------------------------

def save_embeddings(prefix: Path | str, embeddings: Mapping[str, np.ndarray],
                    stamp: str | None = None) -> tuple[Path, Path]:
    prefix = Path(prefix)
    paths = sorted(embeddings)
    matrix = np.stack([np.asarray(embeddings[p], dtype="<f4") for p in paths]) if paths else \
        np.zeros((0, 0), dtype="<f4")
    bin_path = prefix.with_suffix(".bin")
    csv_path = prefix.with_suffix(".csv")
    with bin_path.open("wb") as f:
        f.write(struct.pack("<2I", matrix.shape[0], matrix.shape[1] if matrix.size else 0))
        f.write(np.ascontiguousarray(matrix, dtype="<f4").tobytes())
    write_rows(csv_path, EMBEDDING_IDS_HEADER,
               [[i, p] for i, p in enumerate(paths)], stamp=stamp)
    return bin_path, csv_path


def load_embeddings(prefix: Path | str) -> dict[str, np.ndarray]:
    prefix = Path(prefix)
    with prefix.with_suffix(".bin").open("rb") as f:
        count, dim = struct.unpack("<2I", f.read(8))
        matrix = np.frombuffer(f.read(4 * count * dim), dtype="<f4").reshape(count, dim)
    _, rows = read_rows(prefix.with_suffix(".csv"), EMBEDDING_IDS_HEADER)
    if len(rows) != count:
        raise ValueError(f"{prefix}: sidecar lists {len(rows)} ids for {count} rows")
    return {path: matrix[int(row)].copy() for row, path in rows}


def write_scores_csv(path: Path | str, scores: Mapping[str, float],
                     stamp: str | None = None) -> None:
    write_rows(path, SCORE_HEADER, [[p, repr(scores[p])] for p in sorted(scores)], stamp=stamp)


def read_scores_csv(path: Path | str) -> tuple[str | None, dict[str, float]]:
    stamp, rows = read_rows(path, SCORE_HEADER)
    return stamp, {p: float(s) for p, s in rows}
