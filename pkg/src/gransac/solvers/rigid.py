"""Weighted Kabsch alignment of 3-D point sets."""

from __future__ import annotations

import numpy as np

from .. import diff, numkit
from .common import DegenerateSampleError, as_values

COLLINEAR_TOL = 1e-12


def _weights(n, weights):
    if weights is None:
        return np.full(n, 1.0 / n)
    w = np.asarray(weights, dtype=float)
    if np.any(w < 0) or w.sum() <= 0:
        raise ValueError("weights must be nonnegative with a positive sum")
    return w / w.sum()


def solve_kabsch(P, Q, weights=None) -> tuple[np.ndarray, np.ndarray]:
    """R, t minimizing sum w_i |R p_i + t - q_i|^2 (proper rotation)."""
    P = np.asarray(P, dtype=float)
    Q = np.asarray(Q, dtype=float)
    if P.shape != Q.shape or P.shape[0] < 3 or P.shape[1] != 3:
        raise ValueError("Kabsch needs matching (n >= 3, 3) point arrays")
    w = _weights(len(P), weights)
    pc = w @ P
    qc = w @ Q
    H = (P - pc).T @ ((Q - qc) * w[:, None])
    U, S, V = numkit.svd(H)
    if S[0] == 0.0 or S[1] < COLLINEAR_TOL * S[0]:
        raise DegenerateSampleError("points are collinear or coincident")
    d = 1.0 if np.linalg.det(V @ U.T) > 0 else -1.0
    R = V @ np.diag([1.0, 1.0, d]) @ U.T
    return R, qc - R @ pc


def kabsch_d(P_d, Q_d, weights=None):
    """Kabsch on the tape; returns object arrays R (3x3) and t (3,)."""
    P = np.asarray(P_d, dtype=object)
    Q = np.asarray(Q_d, dtype=object)
    n = len(P)
    Pv, Qv = as_values(P), as_values(Q)
    R_ref, _ = solve_kabsch(Pv, Qv, weights)
    w = _weights(n, weights)
    pc = [diff.dsum([w[i] * P[i, a] for i in range(n)]) for a in range(3)]
    qc = [diff.dsum([w[i] * Q[i, a] for i in range(n)]) for a in range(3)]
    Pc = [[P[i, a] - pc[a] for a in range(3)] for i in range(n)]
    Qc = [[Q[i, a] - qc[a] for a in range(3)] for i in range(n)]
    H = np.array([[diff.dsum([w[i] * Pc[i][a] * Qc[i][b] for i in range(n)]) for b in range(3)] for a in range(3)],
                 dtype=object)
    U, _, V = numkit.svd_d(H)
    d = 1.0 if np.linalg.det(as_values(V) @ as_values(U).T) > 0 else -1.0
    R = np.outer(V[:, 0], U[:, 0]) + np.outer(V[:, 1], U[:, 1]) + d * np.outer(V[:, 2], U[:, 2])
    t = np.array([qc[a] - (R[a, 0] * pc[0] + R[a, 1] * pc[1] + R[a, 2] * pc[2]) for a in range(3)], dtype=object)
    return R, t
