"""Evaluation metrics: top-m recall for corruption records and pixel-level
precision-recall / average precision for relevance heatmaps."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


class DegenerateGroupError(ValueError):
    """No damaged pixels anywhere in the group; precision-recall is undefined."""


@dataclass
class RecallReport:
    """Recall at every cut-off m = 1..M plus the underlying hit/miss counts."""

    recall: np.ndarray  # (M,), recall[m-1] = recall at m
    n_plus: np.ndarray
    n_minus: np.ndarray


def top_m_indices(attribution: np.ndarray, m: int) -> np.ndarray:
    """Indices of the m largest attributions; ties broken by lower index."""
    order = np.argsort(-np.asarray(attribution, dtype=np.float64), kind="stable")
    return order[:m]


def recall_at_m(records, attributions, m: int) -> float:
    """Fraction of records whose corrupted feature is among the top-m scores."""
    if len(records) == 0:
        raise ValueError("no records to evaluate")
    if len(records) != len(attributions):
        raise ValueError("records and attributions must align")
    hits = 0
    for rec, attr in zip(records, attributions):
        if rec.c in top_m_indices(attr, m):
            hits += 1
    return hits / len(records)


def recall_report(records, attributions) -> RecallReport:
    M = np.asarray(attributions[0]).size
    n_plus = np.zeros(M, dtype=int)
    for rec, attr in zip(records, attributions):
        order = np.argsort(-np.asarray(attr, dtype=np.float64), kind="stable")
        rank = int(np.nonzero(order == rec.c)[0][0])  # 0-based rank of the true feature
        n_plus[rank:] += 1
    n_minus = len(records) - n_plus
    return RecallReport(n_plus / len(records), n_plus, n_minus)


@dataclass
class PrCurve:
    thresholds: np.ndarray  # (1000,)
    precision: np.ndarray
    recall: np.ndarray

    @property
    def ap(self) -> float:
        return average_precision(self)


N_THRESHOLDS = 1000


def pr_curve_pixels(relevance_maps, masks, n_thresholds: int = N_THRESHOLDS) -> PrCurve:
    """Pooled precision-recall over every pixel of an image group.

    Thresholds sit at the quantile positions of the pooled relevance values
    (so the sweep is rank-based and the curve is invariant under monotone
    rescaling of the maps); a pixel counts as predicted-damaged when its
    relevance is strictly above the threshold.  Thresholds at the pooled
    extremes are nudged inward so they stay strictly inside (min, max).
    """
    rel = np.concatenate([np.asarray(r, dtype=np.float64).ravel() for r in relevance_maps])
    msk = np.concatenate([np.asarray(g).ravel() > 0 for g in masks])
    if rel.shape != msk.shape:
        raise ValueError("relevance maps and masks are not aligned")
    n_pos = int(msk.sum())
    if n_pos == 0:
        raise DegenerateGroupError("group has no damaged pixels")

    lo, hi = float(rel.min()), float(rel.max())
    qs = np.arange(1, n_thresholds + 1) / (n_thresholds + 1)
    if lo == hi:
        # constant map: every pixel is predicted at any threshold below it
        thresholds = np.full(n_thresholds, np.nextafter(lo, -np.inf))
    else:
        thresholds = np.quantile(rel, qs, method="lower")
        thresholds = np.clip(thresholds, np.nextafter(lo, hi), np.nextafter(hi, lo))

    order = np.argsort(rel, kind="stable")
    rel_sorted = rel[order]
    pos_cum = np.cumsum(msk[order][::-1])[::-1]  # positives with relevance >= rel_sorted[i]
    n = rel.size
    # for each threshold, count pixels with relevance strictly above it
    first_above = np.searchsorted(rel_sorted, thresholds, side="right")
    predicted = n - first_above
    tp = np.where(first_above < n, pos_cum[np.minimum(first_above, n - 1)], 0)
    tp = np.where(predicted > 0, tp, 0)
    precision = np.where(predicted > 0, tp / np.maximum(predicted, 1), 1.0)
    recall = tp / n_pos
    return PrCurve(np.asarray(thresholds, dtype=np.float64), precision, recall)


def average_precision(curve: PrCurve) -> float:
    """Trapezoidal area under the precision-recall curve.

    Points are sorted by recall; the curve is anchored at recall 0 with the
    precision of its lowest-recall point, and the result lies in [0, 1].
    """
    if curve.recall.size < 2:
        raise ValueError("need at least 2 curve points")
    order = np.argsort(curve.recall, kind="stable")
    r = curve.recall[order]
    p = curve.precision[order]
    if r[0] > 0.0:
        r = np.concatenate([[0.0], r])
        p = np.concatenate([[p[0]], p])
    return float(np.trapezoid(p, r))
