"""Evaluation: AUC, partial AUC, harmonic-mean aggregation and a 2-D projection export.

AUC and pAUC are computed by a threshold sweep over the ROC polyline (tie
groups become diagonal segments, which reproduces the pair-counting statistic
with ties worth 0.5). pAUC integrates the curve over false-positive rates in
[0, p] with linear interpolation at the boundary, normalized by p.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .corpus import DatasetManifest
from .csvio import write_rows

REPORT_HEADER = ["machine", "auc_source", "auc_target", "pauc"]
SUMMARY_HEADER = ["subset", "score"]
PROJECTION_HEADER = ["path", "label", "x", "y"]


def roc_points(normal_scores: Sequence[float], anomaly_scores: Sequence[float]
               ) -> tuple[np.ndarray, np.ndarray]:
    """ROC polyline from (0,0) to (1,1); one vertex per distinct threshold."""
    normals = np.asarray(normal_scores, dtype=np.float64)
    anomalies = np.asarray(anomaly_scores, dtype=np.float64)
    if normals.size == 0 or anomalies.size == 0:
        raise ValueError("need at least one normal and one anomaly score")
    scores = np.concatenate([normals, anomalies])
    is_anomaly = np.concatenate([np.zeros(normals.size), np.ones(anomalies.size)])
    order = np.argsort(-scores, kind="stable")
    scores, is_anomaly = scores[order], is_anomaly[order]
    # group equal scores so that ties advance tpr and fpr simultaneously
    boundary = np.nonzero(np.diff(scores))[0]
    last = np.append(boundary, scores.size - 1)
    tp = np.cumsum(is_anomaly)[last]
    fp = np.cumsum(1.0 - is_anomaly)[last]
    tpr = np.concatenate([[0.0], tp / anomalies.size])
    fpr = np.concatenate([[0.0], fp / normals.size])
    return fpr, tpr


def auc(normal_scores: Sequence[float], anomaly_scores: Sequence[float]) -> float:
    """Probability that an anomaly outscores a normal clip (ties count 0.5)."""
    fpr, tpr = roc_points(normal_scores, anomaly_scores)
    return float(np.sum(np.diff(fpr) * (tpr[1:] + tpr[:-1]) * 0.5))


def pauc(normal_scores: Sequence[float], anomaly_scores: Sequence[float], p: float) -> float:
    """Area under the ROC curve restricted to fpr in [0, p], normalized by p."""
    if not 0.0 < p <= 1.0:
        raise ValueError("p must lie in (0, 1]")
    fpr, tpr = roc_points(normal_scores, anomaly_scores)
    area = 0.0
    for i in range(1, fpr.size):
        x0, x1 = fpr[i - 1], fpr[i]
        y0, y1 = tpr[i - 1], tpr[i]
        if x0 >= p:
            break
        if x1 > p:
            y1 = y0 + (y1 - y0) * (p - x0) / (x1 - x0)
            x1 = p
        area += (x1 - x0) * (y1 + y0) * 0.5
    return float(area / p)


def harmonic_mean(values: Sequence[float]) -> float:
    vals = np.asarray(values, dtype=np.float64)
    if vals.size == 0:
        raise ValueError("harmonic mean of an empty collection is undefined")
    if np.any(vals <= 0):
        raise ValueError("harmonic mean requires strictly positive values")
    return float(vals.size / np.sum(1.0 / vals))


@dataclass(frozen=True)
class MachineResult:
    machine_type: str
    auc_source: float
    auc_target: float
    pauc: float

    def values(self) -> tuple[float, float, float]:
        return (self.auc_source, self.auc_target, self.pauc)


@dataclass(frozen=True)
class ScoreReport:
    results: Mapping[str, MachineResult]
    aggregates: Mapping[str, float]  # subset name -> harmonic-mean score in percent


def official_score(machine_results: Mapping[str, MachineResult], subset: Sequence[str]) -> float:
    """Harmonic mean of the pooled per-machine AUC/pAUC values, in percent."""
    pooled: list[float] = []
    for machine in subset:
        if machine not in machine_results:
            raise ValueError(f"no result for machine {machine!r}")
        pooled.extend(machine_results[machine].values())
    return 100.0 * harmonic_mean(pooled)


def evaluate_machines(manifest: DatasetManifest, scores: Mapping[str, float],
                      p: float = 0.1) -> dict[str, MachineResult]:
    """Per-machine AUCs: domain normals vs pooled anomalies; pAUC over both domains."""
    results: dict[str, MachineResult] = {}
    for machine in manifest.machines:
        test = manifest.test_clips(machine)
        missing = [c.path for c in test if c.path not in scores]
        if missing:
            raise ValueError(f"missing score for clip {missing[0]}")
        anomalies = [scores[c.path] for c in test if c.condition == "anomalous"]
        per_domain: dict[str, list[float]] = {}
        for c in test:
            if c.condition == "normal":
                per_domain.setdefault(c.domain, []).append(scores[c.path])
        for domain in ("source", "target"):
            if not per_domain.get(domain):
                raise ValueError(f"machine {machine!r} has no normal test clips in {domain}")
        normals_all = [s for vals in per_domain.values() for s in vals]
        results[machine] = MachineResult(
            machine_type=machine,
            auc_source=auc(per_domain["source"], anomalies),
            auc_target=auc(per_domain["target"], anomalies),
            pauc=pauc(normals_all, anomalies, p),
        )
    return results


def build_report(results: Mapping[str, MachineResult],
                 subsets: Mapping[str, Sequence[str]]) -> ScoreReport:
    aggregates = {name: official_score(results, machines)
                  for name, machines in subsets.items() if machines}
    return ScoreReport(results=dict(results), aggregates=aggregates)


def write_report_csv(path: Path | str, report: ScoreReport, stamp: str | None = None) -> None:
    """Per-machine block, then a summary block, in one file."""
    with Path(path).open("w", newline="", encoding="utf-8") as f:
        if stamp:
            f.write(f"# {stamp}\n")
        f.write(",".join(REPORT_HEADER) + "\n")
        for machine in sorted(report.results):
            r = report.results[machine]
            f.write(f"{machine},{r.auc_source:.6f},{r.auc_target:.6f},{r.pauc:.6f}\n")
        f.write(",".join(SUMMARY_HEADER) + "\n")
        for subset in sorted(report.aggregates):
            f.write(f"{subset},{report.aggregates[subset]:.6f}\n")


def compute_projection(embeddings: np.ndarray) -> np.ndarray:
    """Top-2 principal component coordinates with a fixed sign convention.

    Each component is flipped so its largest-magnitude loading is positive;
    rank-deficient inputs get zero-padded coordinates.
    """
    x = np.asarray(embeddings, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] < 2:
        raise ValueError("need at least two embeddings")
    centered = x - x.mean(axis=0)
    if np.allclose(centered, 0.0):
        raise ValueError("zero variance: all embeddings identical")
    _, _, vt = np.linalg.svd(centered, full_matrices=False)
    components = vt[:2]
    for i in range(components.shape[0]):
        j = np.argmax(np.abs(components[i]))
        if components[i, j] < 0:
            components[i] = -components[i]
    coords = centered @ components.T
    if coords.shape[1] < 2:
        coords = np.pad(coords, ((0, 0), (0, 2 - coords.shape[1])))
    return coords


def write_projection_csv(path: Path | str, ids: Sequence[str], labels: Sequence[str],
                         coords: np.ndarray, stamp: str | None = None) -> None:
    if not (len(ids) == len(labels) == coords.shape[0]):
        raise ValueError("ids, labels and coordinates must align")
    rows = [[i, lab, repr(float(xy[0])), repr(float(xy[1]))]
            for i, lab, xy in zip(ids, labels, coords)]
    write_rows(path, PROJECTION_HEADER, rows, stamp=stamp)
