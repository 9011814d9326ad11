"""Pose-error metrics and batch aggregation."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np


def rotation_error_deg(R_gt, R_hat):
    """Geodesic angle of ``R_gt^-1 R_hat`` in degrees, in [0, 180]."""
    R_gt = np.asarray(R_gt, dtype=float)
    R_hat = np.asarray(R_hat, dtype=float)
    c = 0.5 * (np.trace(R_gt.T @ R_hat) - 1.0)
    return math.degrees(math.acos(min(1.0, max(-1.0, c))))


def translation_error(t_gt, t_hat):
    return float(np.linalg.norm(np.asarray(t_gt, dtype=float) - np.asarray(t_hat, dtype=float)))


@dataclass
class TrialReport:
    trial_id: int
    ground_truth: object
    estimate: object
    rot_error_deg: float
    trans_error: float
    iterations: int
    stop_reason: str
    wall_time_ms: float
    error: str | None = None

    @classmethod
    def score(cls, trial_id, ground_truth, estimate, iterations, stop_reason, wall_time_ms):
        return cls(
            trial_id,
            ground_truth,
            estimate,
            rotation_error_deg(ground_truth.rotation, estimate.rotation),
            translation_error(ground_truth.translation, estimate.translation),
            iterations,
            stop_reason,
            wall_time_ms,
        )


@dataclass
class BatchSummary:
    count: int
    rot_mae: float
    rot_rmse: float
    trans_mae: float
    trans_rmse: float
    success_rate: float
    rot_thresh_deg: float
    trans_thresh: float
    rot_median: float = field(default=float("nan"))
    trans_median: float = field(default=float("nan"))

    def as_dict(self):
        return asdict(self)


def _rmse(e):
    # scale first so tiny errors do not underflow when squared
    m = float(np.max(np.abs(e)))
    if m == 0 or not math.isfinite(m):
        return m
    return m * float(np.sqrt(np.mean((e / m) ** 2)))


def summarize(trials, rot_thresh_deg, trans_thresh):
    """MAE / RMSE per metric and the fraction of trials under both thresholds."""
    if not trials:
        raise ValueError("cannot summarize an empty list of trials")
    rot = np.array([t.rot_error_deg for t in trials], dtype=float)
    tr = np.array([t.trans_error for t in trials], dtype=float)
    ok = (rot < rot_thresh_deg) & (tr < trans_thresh)
    summary = BatchSummary(
        count=len(trials),
        rot_mae=float(np.mean(np.abs(rot))),
        rot_rmse=_rmse(rot),
        trans_mae=float(np.mean(np.abs(tr))),
        trans_rmse=_rmse(tr),
        success_rate=float(np.mean(ok)),
        rot_thresh_deg=float(rot_thresh_deg),
        trans_thresh=float(trans_thresh),
        rot_median=float(np.median(rot)),
        trans_median=float(np.median(tr)),
    )
    for mae, rmse in ((summary.rot_mae, summary.rot_rmse), (summary.trans_mae, summary.trans_rmse)):
        assert not rmse < mae * (1 - 1e-12), "RMSE below MAE"
    return summary
