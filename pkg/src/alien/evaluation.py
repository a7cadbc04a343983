"""Detection-to-truth matching and the reported metrics."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
from scipy.spatial import cKDTree

from .codec import Detection
from .errors import UndefinedMetricError
from .geometry import TargetTruth


@dataclass
class Matching:
    pairs: list[tuple[int, int, float]]
    unmatched_detections: list[int]
    unmatched_truth: list[int]
    match_radius: float


@dataclass
class EvalReport:
    tp: int
    fp: int
    fn: int
    true_detection_rate: float
    false_alarm_rate: float
    precision: float
    f1: float
    localization_rmse: Optional[float]
    localization_mse: Optional[float]
    hue_mae: Optional[float] = None
    orientation_mae: Optional[float] = None
    extras: dict = field(default_factory=dict)

    def rows(self) -> list[tuple[str, Optional[float]]]:
        return [
            ("tp", self.tp),
            ("fp", self.fp),
            ("fn", self.fn),
            ("true_detection_rate", self.true_detection_rate),
            ("false_alarm_rate", self.false_alarm_rate),
            ("precision", self.precision),
            ("f1", self.f1),
            ("localization_rmse", self.localization_rmse),
            ("localization_mse", self.localization_mse),
            ("hue_mae", self.hue_mae),
            ("orientation_mae", self.orientation_mae),
        ]


def f1(tp: int, fp: int, fn: int) -> float:
    if tp + fp + fn <= 0:
        raise UndefinedMetricError("F1 is undefined when every count is zero")
    return 2.0 * tp / (2.0 * tp + fp + fn)


def circular_difference(a: float, b: float, period: float = 360.0) -> float:
    d = abs(a - b) % period
    return min(d, period - d)


def match_detections(
    detections: Sequence[Detection], truth: Sequence[TargetTruth], match_radius: float = 8.0
) -> Matching:
    """Greedy one-to-one matching: repeatedly bind the closest pair within ``match_radius``.

    Equal distances are resolved by detection index, then truth index.
    """
    if match_radius <= 0:
        raise ValueError("match_radius must be positive")
    nd, nt = len(detections), len(truth)
    cand: list[tuple[float, int, int]] = []
    if nd and nt:
        dp = np.array([(d.x, d.y) for d in detections], dtype=np.float64)
        tp = np.array([(t.x, t.y) for t in truth], dtype=np.float64)
        near = cKDTree(tp).query_ball_point(dp, match_radius)
        for i, js in enumerate(near):
            for j in js:
                dist = math.hypot(dp[i, 0] - tp[j, 0], dp[i, 1] - tp[j, 1])
                if dist <= match_radius:
                    cand.append((dist, i, j))
    cand.sort()
    used_d, used_t = set(), set()
    pairs = []
    for dist, i, j in cand:
        if i in used_d or j in used_t:
            continue
        used_d.add(i)
        used_t.add(j)
        pairs.append((i, j, dist))
    return Matching(
        pairs,
        [i for i in range(nd) if i not in used_d],
        [j for j in range(nt) if j not in used_t],
        match_radius,
    )


def compute_metrics(
    matching: Matching,
    detections: Sequence[Detection],
    truth: Sequence[TargetTruth],
    fold_orientation: bool = False,
) -> EvalReport:
    """Counts, rates, F1, localisation error and circular attribute errors.

    The false-alarm rate is relative to the truth count; ``precision`` gives the
    detection-relative view. ``fold_orientation`` compares orientations mod 180.
    """
    tp = len(matching.pairs)
    fp = len(matching.unmatched_detections)
    fn = len(matching.unmatched_truth)
    n_truth = tp + fn
    tdr = tp / n_truth if n_truth else 0.0
    far = fp / n_truth if n_truth else 0.0
    prec = tp / (tp + fp) if tp + fp else 0.0
    score = f1(tp, fp, fn) if tp + fp + fn else 0.0
    if tp:
        sq = [dist * dist for _, _, dist in matching.pairs]
        mse = float(np.mean(sq))
        rmse = math.sqrt(mse)
    else:
        mse = rmse = None
    hue_mae = ori_mae = None
    attr_pairs = [(i, j) for i, j, _ in matching.pairs if truth[j].has_attributes]
    if attr_pairs:
        period = 180.0 if fold_orientation else 360.0
        hue_mae = float(np.mean([circular_difference(detections[i].hue, truth[j].hue) for i, j in attr_pairs]))
        ori_mae = float(
            np.mean(
                [
                    circular_difference(detections[i].orientation, truth[j].orientation, period)
                    for i, j in attr_pairs
                ]
            )
        )
    return EvalReport(tp, fp, fn, tdr, far, prec, score, rmse, mse, hue_mae, ori_mae)


def evaluate(
    detections: Sequence[Detection],
    truth: Sequence[TargetTruth],
    match_radius: float = 8.0,
    fold_orientation: bool = False,
) -> EvalReport:
    return compute_metrics(match_detections(detections, truth, match_radius), detections, truth, fold_orientation)


def threshold_sweep(
    detections: Sequence[Detection],
    truth: Sequence[TargetTruth],
    thresholds: Sequence[float],
    match_radius: float = 8.0,
) -> list[tuple[float, int, int, int]]:
    """(threshold, TP, FP, FN) per threshold, re-matching the surviving detections each time."""
    rows = []
    for th in thresholds:
        kept = [d for d in detections if d.confidence > th]
        m = match_detections(kept, truth, match_radius)
        rows.append((th, len(m.pairs), len(m.unmatched_detections), len(m.unmatched_truth)))
    return rows


def _fmt(v) -> str:
    if v is None:
        return "absent"
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return f"{v:.4f}"


def format_report(report: EvalReport) -> str:
    """Human key-value lines followed by a tab-delimited ``metric value`` block."""
    rows = report.rows()
    width = max(len(k) for k, _ in rows)
    human = [f"{k.ljust(width)} : {_fmt(v)}" for k, v in rows]
    machine = ["metric\tvalue"] + [f"{k}\t{_fmt(v)}" for k, v in rows]
    return "\n".join(human + ["", *machine]) + "\n"
