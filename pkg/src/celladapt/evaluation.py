"""Detection scoring by gated one-to-one assignment, plus pseudo-label audits.

Detections are matched to ground-truth centroids one-to-one: among all
matchings whose pair distances are within the gate (10 px by default,
inclusive), the one maximizing pair count and then minimizing total distance
is chosen. F1 is computed from the resulting TP/FP/FN counts, micro-averaged
over patches by the callers that aggregate.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import linear_sum_assignment

from .heatmap import PointSet

# Any gated-out pairing must cost more than every achievable sum of valid
# distances, so the assignment maximizes in-gate cardinality first.
_GATED_OUT = 1.0e9


@dataclass(frozen=True)
class MatchResult:
    """One-to-one detection/ground-truth matching under a distance gate."""

    pairs: tuple[tuple[int, int, float], ...]  # (det_index, gt_index, distance)
    tp: int
    fp: int
    fn: int

    @property
    def total_distance(self) -> float:
        return float(sum(d for _, _, d in self.pairs))


def match_points(dets: PointSet, gt: PointSet, threshold: float = 10.0) -> MatchResult:
    """Gated minimum-distance assignment between detections and ground truth.

    Pairs farther apart than ``threshold`` (inclusive gate) are never matched.
    Deterministic: scipy's assignment on the padded cost matrix.
    """
    if threshold <= 0:
        raise ValueError(f"threshold must be positive, got {threshold}")
    d_arr = dets.to_array()
    g_arr = gt.to_array()
    n_det, n_gt = len(d_arr), len(g_arr)
    if n_det == 0 or n_gt == 0:
        return MatchResult(pairs=(), tp=0, fp=n_det, fn=n_gt)

    dist = np.hypot(
        d_arr[:, 0:1] - g_arr[None, :, 0], d_arr[:, 1:2] - g_arr[None, :, 1]
    )
    cost = np.where(dist <= threshold, dist, _GATED_OUT)
    rows, cols = linear_sum_assignment(cost)
    pairs = tuple(
        (int(i), int(j), float(dist[i, j]))
        for i, j in zip(rows, cols)
        if dist[i, j] <= threshold
    )
    tp = len(pairs)
    return MatchResult(pairs=pairs, tp=tp, fp=n_det - tp, fn=n_gt - tp)


def f1_score(m: MatchResult) -> tuple[float, float, float]:
    """(precision, recall, f1) from a match result.

    Vanishing denominators with tp = 0 give 0, except the fully empty scene
    (tp = fp = fn = 0) which scores a perfect 1.0: nothing to find, nothing
    found, nothing missed.
    """
    if m.tp == 0 and m.fp == 0 and m.fn == 0:
        return 1.0, 1.0, 1.0
    precision = m.tp / (m.tp + m.fp) if (m.tp + m.fp) else 0.0
    recall = m.tp / (m.tp + m.fn) if (m.tp + m.fn) else 0.0
    f1 = 2 * m.tp / (2 * m.tp + m.fp + m.fn) if (2 * m.tp + m.fp + m.fn) else 0.0
    return precision, recall, f1


@dataclass
class DetectionTally:
    """Accumulator for micro-averaged F1 over many patches."""

    tp: int = 0
    fp: int = 0
    fn: int = 0
    per_patch: list[tuple[str, int, int, int]] = field(default_factory=list)

    def add(self, patch_id: str, m: MatchResult) -> None:
        self.tp += m.tp
        self.fp += m.fp
        self.fn += m.fn
        self.per_patch.append((patch_id, m.tp, m.fp, m.fn))

    def scores(self) -> tuple[float, float, float]:
        return f1_score(MatchResult(pairs=(), tp=self.tp, fp=self.fp, fn=self.fn))


def pseudo_label_correct(pseudo: PointSet, gt: PointSet, threshold: float = 10.0) -> bool:
    """A pseudo label is correct iff its gated matching has no FP and no FN."""
    m = match_points(pseudo, gt, threshold)
    return m.fp == 0 and m.fn == 0


def accuracy_by_cell_count(
    candidates: list[tuple["PseudoCandidate", PointSet]],
    threshold: float = 10.0,
) -> dict[int, float]:
    """Bucket candidates by detected cell count; report correctness rate per bucket.

    Empty buckets are omitted. Each candidate is judged by
    :func:`pseudo_label_correct` against its ground truth.
    """
    totals: dict[int, int] = {}
    correct: dict[int, int] = {}
    for cand, gt in candidates:
        n = len(cand.detected_points)
        totals[n] = totals.get(n, 0) + 1
        if pseudo_label_correct(cand.detected_points, gt, threshold):
            correct[n] = correct.get(n, 0) + 1
    return {n: correct.get(n, 0) / totals[n] for n in sorted(totals)}
