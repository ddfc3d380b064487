"""Anomalous sound detection toolkit.

Pipeline: synthetic corpus -> log-mel patch features -> self-supervised
domain-adaptive pre-training -> Ward-linkage pseudo-attributes -> ArcFace
fine-tuning -> KNN anomaly scores -> AUC/pAUC report.
"""

__version__ = "0.1.0"
