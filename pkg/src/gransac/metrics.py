"""Evaluation metrics (no gradients): F1, error CDFs, pose AUC, registration."""

from __future__ import annotations

import numpy as np

from .losses import rotation_angle

AUC_THRESHOLDS = (5.0, 10.0, 20.0)


def f1_score(est_mask, gt_mask) -> float:
    """Harmonic mean of inlier precision and recall; 0 when nothing matches."""
    est = np.asarray(est_mask, dtype=bool)
    gt = np.asarray(gt_mask, dtype=bool)
    tp = int(np.sum(est & gt))
    if tp == 0:
        return 1.0 if not est.any() and not gt.any() else 0.0
    precision = tp / est.sum()
    recall = tp / gt.sum()
    return float(2 * precision * recall / (precision + recall))


def median_error(errors) -> float:
    return float(np.median(np.asarray(errors, dtype=float)))


def error_cdf(errors, thresholds) -> np.ndarray:
    """Fraction of errors at or below each threshold."""
    e = np.sort(np.asarray(errors, dtype=float))
    return np.searchsorted(e, np.asarray(thresholds, dtype=float), side="right") / len(e)


def pose_auc(errors, thresholds=AUC_THRESHOLDS) -> dict:
    """Area under the recall-vs-threshold curve up to each threshold, over the threshold.

    Recall r(x) is the fraction of errors <= x, a step function, so the area
    is exact: (1/T) sum_i max(0, T - e_i) / n.
    """
    e = np.asarray(errors, dtype=float)
    if e.size == 0:
        raise ValueError("no errors to summarize")
    e = np.where(np.isfinite(e), e, np.inf)
    out = {}
    for T in thresholds:
        out[float(T)] = float(np.sum(np.maximum(0.0, T - e)) / (len(e) * T))
    return out


def registration_errors(R_hat, t_hat, R, t, P=None) -> dict:
    """RRE (degrees), RTE (scene units) and, with source points, RMSE."""
    R_hat = np.asarray(R_hat, dtype=float)
    t_hat = np.asarray(t_hat, dtype=float)
    out = {
        "rre": float(rotation_angle(R_hat, R)),
        "rte": float(np.linalg.norm(t_hat - np.asarray(t, dtype=float))),
    }
    if P is not None:
        P = np.asarray(P, dtype=float)
        d = P @ R_hat.T + t_hat - (P @ np.asarray(R).T + np.asarray(t))
        out["rmse"] = float(np.sqrt(np.mean(np.sum(d * d, axis=1))))
    return out


def registration_recall(rmse, threshold: float = 0.2) -> float:
    """Fraction of pairs whose RMSE is below the success threshold."""
    r = np.asarray(rmse, dtype=float)
    return float(np.mean(r < threshold))
