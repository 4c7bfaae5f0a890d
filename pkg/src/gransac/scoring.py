"""Residuals, model quality functions and the adaptive termination bound."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import diff
from .solvers.common import homogeneous

SENTINEL = 1e10
LINE_EPS = 1e-12
# |e| below this fraction of |F| |x1| |x2| is a kink at zero: slope 0 there
KINK_TOL = 1e-13
DEFAULT_LEVELS = 10


@dataclass
class Quality:
    score: float
    inlier_mask: np.ndarray
    threshold: float

    @property
    def n_inliers(self) -> int:
        return int(self.inlier_mask.sum())


# residuals -----------------------------------------------------------------


def _epipolar_parts(F, x1, x2):
    h1 = homogeneous(x1)
    h2 = homogeneous(x2)
    l2 = h1 @ F.T          # F x1: epipolar line in image 2
    l1 = h2 @ F            # F^T x2: epipolar line in image 1
    e = np.sum(h2 * l2, axis=1)
    a = l2[:, 0] ** 2 + l2[:, 1] ** 2
    b = l1[:, 0] ** 2 + l1[:, 1] ** 2
    return h1, h2, l1, l2, e, a, b


def symmetric_epipolar(F, x1, x2) -> tuple[np.ndarray, np.ndarray]:
    """Symmetric point-to-epipolar-line distance and a degeneracy flag per point.

    Points whose epipolar line has a vanishing normal get ``SENTINEL``.
    """
    F = np.asarray(F, dtype=float)
    _, _, _, _, e, a, b = _epipolar_parts(F, np.asarray(x1, float), np.asarray(x2, float))
    bad = (a < LINE_EPS ** 2) | (b < LINE_EPS ** 2)
    with np.errstate(divide="ignore", invalid="ignore"):
        r = np.abs(e) * np.sqrt(1.0 / a + 1.0 / b)
    r[bad] = SENTINEL
    return r, bad


def symmetric_epipolar_jacobian(F, x1, x2):
    """Residuals and their partials: dr/dF (N, 9), dr/dx1 (N, 2), dr/dx2 (N, 2)."""
    F = np.asarray(F, dtype=float)
    h1, h2, l1, l2, e, a, b = _epipolar_parts(F, x1, x2)
    bad = (a < LINE_EPS ** 2) | (b < LINE_EPS ** 2)
    a = np.where(bad, 1.0, a)
    b = np.where(bad, 1.0, b)
    s = np.sqrt(1.0 / a + 1.0 / b)
    r = np.abs(e) * s
    scale = np.linalg.norm(F) * np.linalg.norm(h1, axis=1) * np.linalg.norm(h2, axis=1)
    sg = np.where(np.abs(e) > KINK_TOL * scale, np.sign(e), 0.0)
    # r = |e| s;  dr = sg s de - |e| / (2 s) (da / a^2 + db / b^2)
    ce = sg * s
    ca = -np.abs(e) / (2.0 * s * a * a)
    cb = -np.abs(e) / (2.0 * s * b * b)
    n = len(e)
    de_dF = (h2[:, :, None] * h1[:, None, :]).reshape(n, 9)
    da_dF = np.zeros((n, 3, 3))
    db_dF = np.zeros((n, 3, 3))
    for k in range(2):
        da_dF[:, k, :] = 2.0 * l2[:, k, None] * h1
        db_dF[:, :, k] = 2.0 * l1[:, k, None] * h2
    dF = ce[:, None] * de_dF + ca[:, None] * da_dF.reshape(n, 9) + cb[:, None] * db_dF.reshape(n, 9)
    # a depends on x1 through l2 = F x1, b on x2 through l1 = F^T x2
    da_dx1 = 2.0 * (l2[:, 0, None] * F[0, :2] + l2[:, 1, None] * F[1, :2])
    db_dx2 = 2.0 * (l1[:, 0, None] * F[:2, 0] + l1[:, 1, None] * F[:2, 1])
    dx1 = ce[:, None] * l1[:, :2] + ca[:, None] * da_dx1
    dx2 = ce[:, None] * l2[:, :2] + cb[:, None] * db_dx2
    r[bad] = SENTINEL
    dF[bad] = 0.0
    dx1[bad] = 0.0
    dx2[bad] = 0.0
    return r, dF, dx1, dx2


def rigid_residuals(model, P, Q) -> np.ndarray:
    model = np.asarray(model, dtype=float)
    R, t = model[:, :3], model[:, 3]
    return np.linalg.norm(np.asarray(P, float) @ R.T + t - np.asarray(Q, float), axis=1)


def residuals(kind: str, model, x1, x2) -> np.ndarray:
    """Plain residuals; ``model`` is 3x3 for F/E and 3x4 [R|t] for rigid."""
    if kind == "rigid":
        return rigid_residuals(model, x1, x2)
    return symmetric_epipolar(model, x1, x2)[0]


def residuals_d(kind: str, model_d, x1_d, x2_d, index=None) -> list:
    """Residuals on the tape for the rows in ``index`` (default all).

    Each residual is one composite node whose parents are the model entries
    and the point's coordinates, with exact analytic partials.
    """
    model_d = np.asarray(model_d, dtype=object)
    x1_d = np.asarray(x1_d, dtype=object)
    x2_d = np.asarray(x2_d, dtype=object)
    index = np.arange(len(x1_d)) if index is None else np.asarray(index)
    M = np.asarray(diff.value_of(model_d), dtype=float)
    x1 = np.asarray(diff.value_of(x1_d[index]), dtype=float).reshape(len(index), -1)
    x2 = np.asarray(diff.value_of(x2_d[index]), dtype=float).reshape(len(index), -1)
    if kind == "rigid":
        R, t = M[:, :3], M[:, 3]
        d = x1 @ R.T + t - x2
        r = np.linalg.norm(d, axis=1)
        scale = 1.0 + np.linalg.norm(x2, axis=1)
        u = np.divide(d, r[:, None], out=np.zeros_like(d), where=r[:, None] > KINK_TOL * scale[:, None])
        dM = np.concatenate([u[:, :, None] * x1[:, None, :], u[:, :, None]], axis=2).reshape(len(index), -1)
        jac = np.hstack([dM, u @ R, -u])
        name = "rigid_residual"
    else:
        r, dF, dx1, dx2 = symmetric_epipolar_jacobian(M, x1, x2)
        jac = np.hstack([dF, dx1, dx2])
        name = "epipolar_residual"
    m_tape, m_idx = diff.indices_of(list(model_d.reshape(-1)))
    c1_tape, c1_idx = diff.indices_of(list(x1_d[index].reshape(-1)))
    c2_tape, c2_idx = diff.indices_of(list(x2_d[index].reshape(-1)))
    tapes = {id(t): t for t in (m_tape, c1_tape, c2_tape) if t is not None}
    if not tapes:
        return [float(v) for v in r]
    if len(tapes) > 1:
        raise diff.TapeError("operands live on different tapes")
    tape = next(iter(tapes.values()))
    rows = np.hstack([
        np.broadcast_to(m_idx, (len(index), len(m_idx))),
        c1_idx.reshape(len(index), -1),
        c2_idx.reshape(len(index), -1),
    ])
    return tape.push_rows(name, r, rows, jac)


# quality -------------------------------------------------------------------


def _check_threshold(threshold):
    if not threshold > 0:
        raise ValueError("threshold must be positive")


def score_count(r, threshold: float) -> Quality:
    _check_threshold(threshold)
    mask = np.asarray(r) < threshold
    return Quality(float(mask.sum()), mask, threshold)


def _msac_sum(r, threshold):
    return float(np.sum(np.maximum(0.0, 1.0 - (r / threshold) ** 2)))


def score_msac(r, threshold: float) -> Quality:
    """Truncated quadratic: sum of max(0, 1 - r^2 / threshold^2)."""
    _check_threshold(threshold)
    r = np.asarray(r, dtype=float)
    return Quality(_msac_sum(r, threshold), r < threshold, threshold)


def score_marginalized(r, threshold_max: float, levels: int = DEFAULT_LEVELS) -> Quality:
    """MSAC averaged over thresholds threshold_max * j / levels, j = 1..levels."""
    _check_threshold(threshold_max)
    if levels < 1:
        raise ValueError("levels must be at least 1")
    r = np.asarray(r, dtype=float)
    total = 0.0
    for j in range(1, levels + 1):
        total += _msac_sum(r, threshold_max * j / levels)
    return Quality(total / levels, r < threshold_max, threshold_max)


SCORERS = {"count": score_count, "msac": score_msac, "marginalized": score_marginalized}


def make_scorer(name: str, threshold: float, levels: int = DEFAULT_LEVELS):
    """Quality function of residuals; the marginalized one spans twice the threshold."""
    if name == "count":
        return lambda r: score_count(r, threshold)
    if name == "msac":
        return lambda r: score_msac(r, threshold)
    if name == "marginalized":
        return lambda r: score_marginalized(r, 2.0 * threshold, levels)
    raise ValueError(f"unknown scorer {name!r}")


def termination_iterations(w: float, k: int, confidence: float, max_iterations: int = 10**7) -> int:
    """ceil(log(1 - eta) / log(1 - w^k)), capped at ``max_iterations``."""
    if not 0.0 < confidence < 1.0:
        raise ValueError("confidence must lie in (0, 1)")
    if not 0.0 <= w <= 1.0:
        raise ValueError("inlier ratio must lie in [0, 1]")
    p = w ** k
    if p >= 1.0:
        return 1
    if p <= 0.0:
        return max_iterations
    n = math.ceil(math.log(1.0 - confidence) / math.log1p(-p))
    return int(min(max(n, 1), max_iterations))
