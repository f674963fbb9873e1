"""Threshold sweeps and small helpers shared by the command line and the tests."""

from __future__ import annotations

import math

import numpy as np

from .engine import MergeLog
from .metrics import evaluate_segmentation
from .volume import build_region_graph


def candidate_thresholds(log: MergeLog) -> list[float]:
    """Thresholds that reach every distinct prefix of ``log``."""
    return [-math.inf] + sorted({e.delta for e in log.entries}) + [math.inf]


def threshold_sweep(log: MergeLog, sv: np.ndarray, gt: np.ndarray, thresholds=None) -> dict:
    """Metrics after truncating ``log`` at each threshold, plus the best of each metric.

    The log is walked once; each threshold's prefix ends at the first merge
    whose delta is not below it.
    """
    if thresholds is None:
        thresholds = candidate_thresholds(log)
    thresholds = [float(t) for t in thresholds]
    # prefix length per threshold
    lengths = []
    for tau in thresholds:
        n = 0
        for e in log.entries:
            if not e.delta < tau:
                break
            n += 1
        lengths.append(n)
    by_length = {}
    graph = build_region_graph(sv)
    done = 0
    for n in sorted(set(lengths)):
        for e in log.entries[done:n]:
            graph.merge(*e.sv_pair)
        done = n
        by_length[n] = evaluate_segmentation(graph.relabel(sv), gt)
    rows = [dict(threshold=tau, merges=n, **by_length[n]) for tau, n in zip(thresholds, lengths)]
    best_vi = min(rows, key=lambda r: (r["vi"], r["merges"]))
    best_rand = max(rows, key=lambda r: (r["rand_f1"], -r["merges"]))
    return {"rows": rows, "best_vi": best_vi, "best_rand_f1": best_rand}
