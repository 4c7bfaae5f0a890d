"""Differentiable training losses: pose error, mean symmetric epipolar error
and their weighted sum. Inputs may be plain floats or tape values.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import diff, scoring

DEG = 180.0 / math.pi


@dataclass
class LossWeights:
    alpha: float = 1.0
    beta: float = 1.0

    def __post_init__(self):
        if self.alpha < 0 or self.beta < 0 or self.alpha + self.beta <= 0:
            raise ValueError("loss weights must be nonnegative and not both zero")

    @classmethod
    def default_for(cls, kind: str) -> "LossWeights":
        return cls(0.0, 1.0) if kind == "F" else cls(1.0, 1.0)


def rotation_error(R_hat, R) -> float:
    """Angle of R_hat R^T in degrees."""
    R_hat = np.asarray(R_hat, dtype=object)
    R = np.asarray(R, dtype=float)
    tr = diff.dsum([R_hat[a, b] * R[a, b] for a in range(3) for b in range(3)])
    return diff.acos((tr - 1.0) * 0.5) * DEG


def translation_error(t_hat, t) -> float:
    """Angle between two translation directions in degrees."""
    t_hat = list(np.asarray(t_hat, dtype=object))
    t = np.asarray(t, dtype=float)
    nt = float(np.linalg.norm(t))
    nh2 = diff.dsum([v * v for v in t_hat])
    if nt == 0.0 or diff.value_of(nh2) == 0.0:
        raise ValueError("translation error needs nonzero vectors")
    c = diff.dot(t_hat, t) / (diff.sqrt(nh2) * nt)
    return diff.acos(c) * DEG


def pose_loss(R_hat, t_hat, R, t):
    """Mean of rotation and translation angular errors, in degrees."""
    return 0.5 * (rotation_error(R_hat, R) + translation_error(t_hat, t))


def rotation_angle(R_hat, R) -> float:
    """Angle of R_hat R^T in degrees for plain floats, accurate near 0 and 180.

    Uses atan2(sin, cos) of the relative rotation; acos loses about half the
    digits for small angles.
    """
    M = np.asarray(R_hat, dtype=float) @ np.asarray(R, dtype=float).T
    s = 0.5 * np.linalg.norm([M[2, 1] - M[1, 2], M[0, 2] - M[2, 0], M[1, 0] - M[0, 1]])
    c = 0.5 * (np.trace(M) - 1.0)
    return math.atan2(s, c) * DEG


def translation_angle(t_hat, t) -> float:
    """Angle between two nonzero vectors in degrees, accurate at every angle."""
    a = np.asarray(t_hat, dtype=float)
    b = np.asarray(t, dtype=float)
    if not np.linalg.norm(a) or not np.linalg.norm(b):
        raise ValueError("translation error needs nonzero vectors")
    return math.atan2(np.linalg.norm(np.cross(a, b)), float(a @ b)) * DEG


def pose_error_max(R_hat, t_hat, R, t) -> float:
    """max(eps_R, eps_t) in degrees, the error used for pose AUC."""
    R_hat = np.asarray(diff.value_of(np.asarray(R_hat, dtype=object)), dtype=float)
    t_hat = np.asarray(diff.value_of(np.asarray(t_hat, dtype=object)), dtype=float)
    return max(rotation_angle(R_hat, R), translation_angle(t_hat, t))


def gt_inlier_mask(kind: str, gt_model, x1, x2, threshold: float) -> np.ndarray:
    """Ground-truth inlier set: residual under the true model below the threshold."""
    return scoring.residuals(kind, gt_model, x1, x2) < threshold


def epipolar_loss(kind: str, model_d, x1_d, x2_d, gt_mask):
    """Mean residual of the estimated model over the ground-truth inliers."""
    index = np.flatnonzero(np.asarray(gt_mask, dtype=bool))
    if len(index) == 0:
        raise ValueError("empty ground-truth inlier set")
    r = scoring.residuals_d(kind, model_d, x1_d, x2_d, index)
    return diff.dsum(r) * (1.0 / len(index))


def combined_loss(l_pose, l_epi, weights: LossWeights):
    out = 0.0
    if weights.alpha:
        out = out + weights.alpha * l_pose
    if weights.beta:
        out = out + weights.beta * l_epi
    return out
