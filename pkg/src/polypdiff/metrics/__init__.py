"""Segmentation metrics and per-split report aggregation."""
from .measures import dice, e_measure_curve, e_measure_mean, s_measure, weighted_fbeta
from .report import FrameScore, MetricReport, SplitRow, aggregate_report

__all__ = [
    "dice", "s_measure", "e_measure_mean", "e_measure_curve", "weighted_fbeta",
    "FrameScore", "MetricReport", "SplitRow", "aggregate_report", "score_frame",
]


def score_frame(prob, gt, threshold: float = 0.5, frame_id: str = "", case_id: str = "") -> FrameScore:
    """All four measures for one frame; Dice uses the ``>= threshold`` mask."""
    return FrameScore(
        s_alpha=s_measure(prob, gt),
        e_phi_mn=e_measure_mean(prob, gt),
        f_w_beta=weighted_fbeta(prob, gt),
        dice=dice(prob >= threshold, gt),
        frame_id=frame_id,
        case_id=case_id,
    )
