"""Evaluation helpers: edge ground truth, ROC AUC and F1."""

from __future__ import annotations

from typing import Mapping, Sequence

import numpy as np
from scipy.stats import rankdata

from flowvision.detect import DetectionVerdict
from flowvision.flowtable import FlowKey
from flowvision.graph import InteractionGraph
from flowvision.preprocess import SHORT

ATTACK = "attack"


def edge_truth(graph: InteractionGraph, verdicts: Sequence[DetectionVerdict], labels: Mapping[FlowKey, str]
               ) -> np.ndarray:
    """1 where most member flows of the verdict's edge are labeled attack."""
    out = np.zeros(len(verdicts), dtype=np.int8)
    for n, v in enumerate(verdicts):
        if v.kind == SHORT:
            keys = graph.short_edges[v.index].member_tuples
        else:
            keys = [graph.long_edges[v.index].key]
        bad = sum(labels.get(k) == ATTACK for k in keys)
        out[n] = 2 * bad > len(keys)
    return out


def roc_auc(scores, truth) -> float:
    """Probability that a random positive outranks a random negative (ties count half)."""
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(truth).astype(bool)
    npos, nneg = int(y.sum()), int((~y).sum())
    if npos == 0 or nneg == 0:
        return float("nan")
    # -inf sentinels rank below every finite score and tie with each other.
    ranks = rankdata(np.where(np.isneginf(s), -np.finfo(np.float64).max, s))
    return float((ranks[y].sum() - npos * (npos + 1) / 2) / (npos * nneg))


def f1_score(pred, truth) -> float:
    p = np.asarray(pred).astype(bool)
    y = np.asarray(truth).astype(bool)
    tp = int((p & y).sum())
    fp = int((p & ~y).sum())
    fn = int((~p & y).sum())
    if tp == 0:
        return 0.0
    return 2 * tp / (2 * tp + fp + fn)
