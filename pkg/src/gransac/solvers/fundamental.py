"""Normalized eight-point and seven-point fundamental matrix solvers."""

from __future__ import annotations

import math

import numpy as np

from .. import diff, numkit
from .common import (
    DegenerateSampleError,
    as_values,
    attach,
    canonical_sign,
    epipolar_jacobian_inputs,
    epipolar_rows,
)

RANK_TOL = 1e-10


def hartley_transform(x: np.ndarray) -> np.ndarray:
    """Similarity moving the centroid to 0 and the mean distance to sqrt(2)."""
    x = np.asarray(x, dtype=float)
    c = x.mean(axis=0)
    d = np.linalg.norm(x - c, axis=1).mean()
    if d < 1e-300:
        raise DegenerateSampleError("all points coincide")
    s = math.sqrt(2.0) / d
    return np.array([[s, 0.0, -s * c[0]], [0.0, s, -s * c[1]], [0.0, 0.0, 1.0]])


def _apply(T: np.ndarray, x: np.ndarray) -> np.ndarray:
    return x * T[0, 0] + T[:2, 2]


def _finish(F: np.ndarray) -> np.ndarray:
    F = F / np.linalg.norm(F)
    return F * canonical_sign(F)


def solve_8pc(x1, x2, weights=None) -> list[np.ndarray]:
    """Normalized 8-point algorithm on n >= 8 correspondences (least squares if n > 8).

    Optional per-row ``weights`` scale the algebraic constraints.
    """
    x1 = np.asarray(x1, dtype=float)
    x2 = np.asarray(x2, dtype=float)
    if len(x1) < 8 or len(x1) != len(x2):
        raise ValueError("8PC needs at least 8 matched points")
    T1 = hartley_transform(x1)
    T2 = hartley_transform(x2)
    A = epipolar_rows(_apply(T1, x1), _apply(T2, x2))
    if weights is not None:
        A = A * np.asarray(weights, dtype=float)[:, None]
    _, S, V = numkit.svd(A)
    sv = np.zeros(9)
    sv[: len(S)] = S
    if sv[7] < RANK_TOL * sv[0]:
        raise DegenerateSampleError("8PC constraint matrix has nullity >= 2")
    U, s, Vf = numkit.svd(V[:, -1].reshape(3, 3))
    Fn = U @ np.diag([s[0], s[1], 0.0]) @ Vf.T
    return [_finish(T2.T @ Fn @ T1)]


def fundamental_8pc_d(x1_d, x2_d) -> np.ndarray:
    """8PC recorded on the tape; returns an object 3x3 array of DiffValues."""
    x1 = np.asarray(x1_d, dtype=object)
    x2 = np.asarray(x2_d, dtype=object)
    n = len(x1)
    A_val = epipolar_rows(_apply(hartley_transform(as_values(x1)), as_values(x1)),
                          _apply(hartley_transform(as_values(x2)), as_values(x2)))
    S = np.linalg.svd(A_val, compute_uv=False)
    sv = np.zeros(9)
    sv[: len(S)] = S
    if sv[7] < RANK_TOL * sv[0]:
        raise DegenerateSampleError("8PC constraint matrix has nullity >= 2")

    def normalize(x):
        cx = diff.dsum(x[:, 0]) * (1.0 / n)
        cy = diff.dsum(x[:, 1]) * (1.0 / n)
        dx = [x[i, 0] - cx for i in range(n)]
        dy = [x[i, 1] - cy for i in range(n)]
        d = diff.dsum([diff.sqrt(dx[i] * dx[i] + dy[i] * dy[i]) for i in range(n)]) * (1.0 / n)
        s = math.sqrt(2.0) / d
        xn = [(s * dx[i], s * dy[i]) for i in range(n)]
        T = np.array([[s, 0.0, -(s * cx)], [0.0, s, -(s * cy)], [0.0, 0.0, 1.0]], dtype=object)
        return xn, T

    p1, T1 = normalize(x1)
    p2, T2 = normalize(x2)
    rows = []
    for (u1, v1), (u2, v2) in zip(p1, p2):
        rows.append([u2 * u1, u2 * v1, u2, v2 * u1, v2 * v1, v2, u1, v1, 1.0])
    f = numkit.null_vector_d(np.array(rows, dtype=object))
    Fn = np.array(f, dtype=object).reshape(3, 3)
    U, s, V = numkit.svd_d(Fn)
    Fp = Fn - s[2] * np.outer(U[:, 2], V[:, 2])
    F = T2.T @ Fp @ T1
    norm = diff.sqrt(diff.dsum([e * e for e in F.reshape(-1)]))
    sign = canonical_sign(as_values(F))
    return F * (sign / norm)


def _cubic_det_coeffs(A: np.ndarray, B: np.ndarray) -> list[float]:
    """Ascending coefficients of ``det(A + l B)`` for 3x3 matrices."""
    cofA = np.array(numkit.cofactor3(A))
    cofB = np.array(numkit.cofactor3(B))
    return [numkit.det3(A), float(np.sum(cofA * B)), float(np.sum(cofB * A)), numkit.det3(B)]


def solve_7pc(x1, x2) -> list[np.ndarray]:
    """Seven-point algorithm: 1 to 3 rank-2 solutions, unit Frobenius norm."""
    x1 = np.asarray(x1, dtype=float)
    x2 = np.asarray(x2, dtype=float)
    if len(x1) != 7 or len(x2) != 7:
        raise ValueError("7PC needs exactly 7 matched points")
    T1 = hartley_transform(x1)
    T2 = hartley_transform(x2)
    A = epipolar_rows(_apply(T1, x1), _apply(T2, x2))
    _, S, V = numkit.svd(A)
    if S[6] < RANK_TOL * S[0]:
        raise DegenerateSampleError("7PC constraint matrix has nullity >= 3")
    F1 = V[:, 7].reshape(3, 3)
    F2 = V[:, 8].reshape(3, 3)
    # det(l F1 + (1 - l) F2) = det(F2 + l (F1 - F2))
    lambdas = numkit.roots_cubic(_cubic_det_coeffs(F2, F1 - F2))
    out = []
    for lam in lambdas:
        Fn = lam * F1 + (1.0 - lam) * F2
        out.append(_finish(T2.T @ Fn @ T1))
    return out


def seven_point_jacobian(F: np.ndarray, x1: np.ndarray, x2: np.ndarray) -> np.ndarray:
    """Implicit derivative of a 7PC root with respect to the 28 input coordinates.

    The root satisfies seven epipolar equations, ``det F = 0`` and
    ``|F|^2 = 1``; differentiating that square system gives ``dF``.
    """
    JF = np.vstack([epipolar_rows(x1, x2), np.array(numkit.cofactor3(F)).reshape(1, 9), 2.0 * F.reshape(1, 9)])
    Jx = np.vstack([epipolar_jacobian_inputs(F, x1, x2), np.zeros((2, 28))])
    try:
        return -np.linalg.solve(JF, Jx)
    except np.linalg.LinAlgError as exc:
        raise DegenerateSampleError("7PC root is not simple") from exc


def fundamental_7pc_d(F: np.ndarray, x1_d, x2_d) -> np.ndarray:
    x1 = as_values(x1_d)
    x2 = as_values(x2_d)
    return attach("7pc", F, x1_d, x2_d, seven_point_jacobian(F, x1, x2))
