"""Top-1 accuracy, class-wise mAP and macro F1 for the evaluation probes.

AP and F1 are ratios of small integers, so they are accumulated as exact
fractions and rounded to float once; the results do not depend on summation order.
"""
from __future__ import annotations

import logging
from fractions import Fraction

import numpy as np

log = logging.getLogger(__name__)


def top1(predictions, labels) -> float:
    """Percent of rows whose argmax (lowest index on ties) equals the label.

    ``predictions`` may be (n, A) scores or (n,) predicted class indices.
    """
    predictions = np.asarray(predictions)
    labels = np.asarray(labels)
    if len(predictions) != len(labels):
        raise ValueError(f"top1: {len(predictions)} predictions vs {len(labels)} labels")
    if len(labels) == 0:
        raise ValueError("top1: empty input")
    pred = predictions.argmax(axis=1) if predictions.ndim == 2 else predictions
    return 100.0 * int(np.sum(pred == labels)) / len(labels)


def _columns(scores, targets):
    scores = np.asarray(scores, dtype=np.float64)
    targets = np.asarray(targets)
    if scores.ndim == 1:
        scores, targets = scores[:, None], targets[:, None]
    if scores.shape != targets.shape:
        raise ValueError(f"scores {scores.shape} vs targets {targets.shape}")
    if not np.isin(targets, (0, 1)).all():
        raise ValueError("targets must be binary")
    keep = targets.sum(axis=0) > 0
    if not keep.any():
        raise ValueError("no positive targets in any attribute")
    if not keep.all():
        log.warning("excluding attribute columns without positives: %s", np.flatnonzero(~keep).tolist())
    return scores, targets.astype(bool), keep


def _ap_exact(scores: np.ndarray, targets: np.ndarray) -> Fraction:
    order = np.argsort(-scores, kind="stable")
    ranks = np.flatnonzero(targets[order]) + 1
    return sum((Fraction(i, int(r)) for i, r in enumerate(ranks, start=1)), Fraction(0)) / len(ranks)


def average_precision(scores, targets) -> float:
    """Mean precision at each positive's rank; descending score, ties to the lower sample index."""
    scores = np.asarray(scores, dtype=np.float64)
    targets = np.asarray(targets).astype(bool)
    if not targets.any():
        raise ValueError("average_precision: no positives")
    return float(_ap_exact(scores, targets))


def cmap(scores, targets) -> float:
    """Class-wise mean average precision in percent over attributes with a positive."""
    scores, targets, keep = _columns(scores, targets)
    cols = np.flatnonzero(keep)
    total = sum((_ap_exact(scores[:, j], targets[:, j]) for j in cols), Fraction(0))
    return float(total * 100 / len(cols))


def f1_macro(scores, targets, threshold: float = 0.5) -> float:
    """Mean per-attribute F1 of ``scores >= threshold``; F1 is 0 when precision + recall is 0."""
    scores, targets, keep = _columns(scores, targets)
    cols = np.flatnonzero(keep)
    total = Fraction(0)
    for j in cols:
        pred = scores[:, j] >= threshold
        tp = int(np.sum(pred & targets[:, j]))
        fp = int(np.sum(pred & ~targets[:, j]))
        fn = int(np.sum(~pred & targets[:, j]))
        # 2PR/(P+R) reduces to 2tp/(2tp+fp+fn); with tp = 0 both P and R vanish
        if tp:
            total += Fraction(2 * tp, 2 * tp + fp + fn)
    return float(total / len(cols))
