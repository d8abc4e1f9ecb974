"""Precision rate, success rate and their two-ground-truth maximum variants."""
from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .sampling import centers, overlap_ratio

logger = logging.getLogger(__name__)

PR_THRESHOLDS = np.arange(0, 51, dtype=np.float64)        # 0..50 px
SR_THRESHOLDS = np.linspace(0.0, 1.0, 21)                  # 0, 0.05, ..., 1


def _pair(results, gts):
    r = np.asarray(results, dtype=np.float64).reshape(-1, 4)
    g = np.asarray(gts, dtype=np.float64).reshape(-1, 4)
    if len(r) != len(g):
        raise ValueError(f"length mismatch: {len(r)} results vs {len(g)} ground truths")
    return r, g


def center_errors(results, gts):
    r, g = _pair(results, gts)
    return np.linalg.norm(centers(r) - centers(g), axis=1)


def overlaps(results, gts):
    r, g = _pair(results, gts)
    return np.array([overlap_ratio(a, b)[0] for a, b in zip(r, g)])


def pr_from_errors(errors, tau):
    return float(np.mean(np.asarray(errors) <= tau)) if len(errors) else 0.0


def sr_curve_from_overlaps(ious):
    """Fraction of frames with IoU > t per grid point; the t = 0 bin counts every frame."""
    ious = np.asarray(ious)
    if len(ious) == 0:
        return np.zeros(len(SR_THRESHOLDS))
    return np.array([1.0 if t == 0 else np.mean(ious > t) for t in SR_THRESHOLDS])


def precision_rate(results, gts, tau=20.0) -> float:
    """Fraction of frames whose centre error is within ``tau`` pixels."""
    return pr_from_errors(center_errors(results, gts), tau)


def success_rate_auc(results, gts) -> float:
    """Mean of :func:`sr_curve_from_overlaps` over the 21-point grid."""
    return float(sr_curve_from_overlaps(overlaps(results, gts)).mean())


def max_metrics(results, gts_rgb, gts_thermal, tau=20.0):
    """(MPR, MSR): per frame the closer centre / larger overlap of the two ground truths."""
    if gts_rgb is None or gts_thermal is None:
        logger.warning("only one ground-truth stream given; falling back to single-gt metrics")
        g = gts_rgb if gts_rgb is not None else gts_thermal
        return precision_rate(results, g, tau), success_rate_auc(results, g)
    err = np.minimum(center_errors(results, gts_rgb), center_errors(results, gts_thermal))
    ov = np.maximum(overlaps(results, gts_rgb), overlaps(results, gts_thermal))
    return pr_from_errors(err, tau), float(sr_curve_from_overlaps(ov).mean())


@dataclass
class MetricReport:
    pr_curve: np.ndarray
    sr_curve: np.ndarray
    pr5: float
    pr20: float
    sr: float
    mean_iou: float

    def summary(self) -> str:
        return f"{self.pr5:.4f},{self.pr20:.4f},{self.sr:.4f}"


def evaluate(results, gts) -> MetricReport:
    err = center_errors(results, gts)
    ov = overlaps(results, gts)
    pr = np.array([pr_from_errors(err, t) for t in PR_THRESHOLDS])
    sr = sr_curve_from_overlaps(ov)
    return MetricReport(pr, sr, pr_from_errors(err, 5), pr_from_errors(err, 20), float(sr.mean()),
                        float(ov.mean()))


def write_report(report: MetricReport, out_dir):
    """Writes pr_curve.csv, sr_curve.csv and summary.txt ("PR@5,PR@20,SR")."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "pr_curve.csv").write_text("threshold,precision\n" + "".join(
        f"{t:g},{v:.6f}\n" for t, v in zip(PR_THRESHOLDS, report.pr_curve)))
    (out / "sr_curve.csv").write_text("threshold,success\n" + "".join(
        f"{t:.2f},{v:.6f}\n" for t, v in zip(SR_THRESHOLDS, report.sr_curve)))
    (out / "summary.txt").write_text("PR@5,PR@20,SR\n" + report.summary() + "\n")
