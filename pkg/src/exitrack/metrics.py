"""Tracking-quality and exit-prediction metrics.

Box metrics (success AUC, OP75, normalized precision) are computed over
frames whose ground truth is visible and that the tracker did not flag
as exit; a box cannot be scored against the absence sentinel. Exit
metrics treat visible frames as positives and absent frames as
negatives, so FPR is the fraction of truly-absent frames predicted
visible. Aggregation across sequences pools frames (frame-weighted).
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np
from scipy.stats import rankdata

from .geometry import iou, norm_center_distance

__all__ = [
    "MetricError",
    "MetricsReport",
    "Confusion",
    "success_auc",
    "op75",
    "p_norm",
    "exit_confusion",
    "auroc",
    "baseline_exit_from_template_score",
    "evaluate_sequence",
    "evaluate_sequences",
    "exit_metrics",
    "report_to_kv",
    "format_summary",
]

# threshold grids built as k/denominator so boundary values are exact
IOU_GRID = np.arange(21) / 20.0
DIST_GRID = np.arange(51) / 100.0
OP_THRESHOLD = 0.75


class MetricError(ValueError):
    """The metric is undefined for the given input."""


@dataclass(frozen=True)
class MetricsReport:
    auc: float
    op75: float
    p_norm: float
    fpr: float
    auroc: float
    n_frames: int
    n_exit_frames: int


class Confusion(NamedTuple):
    tp: int
    fp: int
    tn: int
    fn: int
    fpr: float


def success_auc(ious) -> float:
    """Mean fraction of frames with IoU strictly above each grid value, in %."""
    ious = np.asarray(ious, dtype=float)
    if ious.size == 0:
        raise MetricError("success_auc needs at least one frame")
    above = ious[:, None] > IOU_GRID[None, :]
    return float(above.mean() * 100.0)


def op75(ious) -> float:
    """Fraction of frames with IoU strictly above 0.75, in %."""
    ious = np.asarray(ious, dtype=float)
    if ious.size == 0:
        raise MetricError("op75 needs at least one frame")
    return float((ious > OP_THRESHOLD).mean() * 100.0)


def p_norm(distances) -> float:
    """Mean fraction of frames within each center-distance grid value, in %."""
    d = np.asarray(distances, dtype=float)
    if d.size == 0:
        raise MetricError("p_norm needs at least one frame")
    within = d[:, None] <= DIST_GRID[None, :]
    return float(within.mean() * 100.0)


def exit_confusion(pred_visible, gt_visible) -> Confusion:
    """Confusion counts with visible as positive and absent as negative.

    With no ground-truth absent frames, fpr is reported as 0.
    """
    pred = np.asarray(pred_visible, dtype=bool)
    gt = np.asarray(gt_visible, dtype=bool)
    if pred.shape != gt.shape:
        raise ValueError(f"length mismatch: {pred.shape} vs {gt.shape}")
    tp = int((pred & gt).sum())
    fp = int((pred & ~gt).sum())
    tn = int((~pred & ~gt).sum())
    fn = int((~pred & gt).sum())
    fpr = fp / (fp + tn) if (fp + tn) > 0 else 0.0
    return Confusion(tp, fp, tn, fn, fpr)


def auroc(scores, gt_visible) -> float:
    """Probability a random visible frame outscores a random absent one.

    Mann-Whitney statistic with ties counted one half; invariant under
    strictly increasing score transforms.
    """
    scores = np.asarray(scores, dtype=float)
    gt = np.asarray(gt_visible, dtype=bool)
    if scores.shape != gt.shape:
        raise ValueError(f"length mismatch: {scores.shape} vs {gt.shape}")
    n_pos = int(gt.sum())
    n_neg = int((~gt).sum())
    if n_pos == 0 or n_neg == 0:
        raise MetricError("auroc needs both visible and absent frames")
    ranks = rankdata(scores)
    u = ranks[gt].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def baseline_exit_from_template_score(update_scores) -> np.ndarray:
    """Visible flags from the template-update score, threshold 0.5 (strict)."""
    return np.asarray(update_scores, dtype=float) > 0.5


def _collect_bbox_errors(preds, seq):
    ious, dists = [], []
    for pred, ann in zip(preds, seq.annotations):
        if ann.visible and not pred.is_exit:
            ious.append(iou(pred, ann.bbox))
            dists.append(norm_center_distance(pred, ann.bbox))
    return ious, dists


def _build_report(ious, dists, scores, pred_visible, gt_visible) -> MetricsReport:
    ious = np.asarray(ious, dtype=float)
    dists = np.asarray(dists, dtype=float)
    conf = exit_confusion(pred_visible, gt_visible)
    n_exit = int((~np.asarray(gt_visible, dtype=bool)).sum())
    try:
        roc = auroc(scores, gt_visible)
    except MetricError:
        roc = math.nan
    return MetricsReport(
        auc=success_auc(ious) if ious.size else math.nan,
        op75=op75(ious) if ious.size else math.nan,
        p_norm=p_norm(dists) if dists.size else math.nan,
        fpr=conf.fpr,
        auroc=roc,
        n_frames=int(len(gt_visible)),
        n_exit_frames=n_exit,
    )


def evaluate_sequence(preds, trace, seq) -> MetricsReport:
    """Score one tracked sequence against its ground truth.

    preds: per-frame reported boxes (possibly EXIT sentinels);
    trace: OOD trace with smoothed_scores and decisions arrays.
    """
    return evaluate_sequences([(preds, trace, seq)])


def evaluate_sequences(items) -> MetricsReport:
    """Frame-weighted aggregate over (preds, trace, seq) triples."""
    all_ious, all_dists = [], []
    scores, pred_vis, gt_vis = [], [], []
    for preds, trace, seq in items:
        if len(preds) != len(seq) or len(trace.decisions) != len(seq):
            raise ValueError(f"{seq.id}: predictions not aligned with frames")
        ious, dists = _collect_bbox_errors(preds, seq)
        all_ious.extend(ious)
        all_dists.extend(dists)
        scores.append(np.asarray(trace.smoothed_scores, dtype=float))
        pred_vis.append(~np.asarray(trace.decisions, dtype=bool))
        gt_vis.append(seq.visibility)
    if not scores:
        raise MetricError("no sequences to evaluate")
    return _build_report(all_ious, all_dists, np.concatenate(scores),
                         np.concatenate(pred_vis), np.concatenate(gt_vis))


def exit_metrics(scores, pred_visible, gt_visible) -> tuple[float, float]:
    """(fpr, auroc) for an alternative exit-signal source; auroc may be nan."""
    conf = exit_confusion(pred_visible, gt_visible)
    try:
        roc = auroc(scores, gt_visible)
    except MetricError:
        roc = math.nan
    return conf.fpr, roc


def report_to_kv(report: MetricsReport, prefix: str = "") -> list[str]:
    """Flat key=value lines, deterministic ordering."""
    fields = [
        ("auc", report.auc), ("op75", report.op75), ("p_norm", report.p_norm),
        ("fpr", report.fpr), ("auroc", report.auroc),
        ("n_frames", report.n_frames), ("n_exit_frames", report.n_exit_frames),
    ]
    return [f"{prefix}{k}={v!r}" for k, v in fields]


def format_summary(reports: dict[str, MetricsReport]) -> str:
    """Plain-text metric table: one column per exit-signal source."""
    names = list(reports)
    lines = ["metric      " + "".join(f"{n:>16}" for n in names)]
    rows = [
        ("FPR", "fpr", "{:16.4f}"),
        ("AUROC", "auroc", "{:16.4f}"),
        ("AUC(%)", "auc", "{:16.2f}"),
        ("OP75(%)", "op75", "{:16.2f}"),
        ("P_norm(%)", "p_norm", "{:16.2f}"),
    ]
    for label, attr, fmt in rows:
        cells = "".join(fmt.format(getattr(reports[n], attr)) for n in names)
        lines.append(f"{label:<12}" + cells)
    return "\n".join(lines)
