"""Five-point essential matrix solver (Nister's elimination) and pose recovery."""

from __future__ import annotations

import math
from functools import lru_cache

import numpy as np
from scipy.optimize import least_squares
from scipy.spatial.transform import Rotation

from .. import diff, numkit
from .common import (
    DegenerateSampleError,
    as_values,
    attach,
    canonical_sign,
    epipolar_jacobian_inputs,
    epipolar_rows,
    homogeneous,
)

SQRT2 = math.sqrt(2.0)

# Cubic monomials x^a y^b z^c in the order used by the elimination; the first
# ten are eliminated, the last ten are [xz^2, xz, x, yz^2, yz, y, z^3, z^2, z, 1].
CUBIC_MONOMIALS = [
    (3, 0, 0), (0, 3, 0), (2, 1, 0), (1, 2, 0), (2, 0, 1), (2, 0, 0), (0, 2, 1), (0, 2, 0), (1, 1, 1), (1, 1, 0),
    (1, 0, 2), (1, 0, 1), (1, 0, 0), (0, 1, 2), (0, 1, 1), (0, 1, 0), (0, 0, 3), (0, 0, 2), (0, 0, 1), (0, 0, 0),
]
LINEAR_MONOMIALS = [(1, 0, 0), (0, 1, 0), (0, 0, 1), (0, 0, 0)]
QUADRATIC_MONOMIALS = [(a, b, c) for a in range(3) for b in range(3) for c in range(3) if a + b + c <= 2]


@lru_cache(maxsize=None)
def _product_matrix(left: tuple, right: tuple, out: tuple) -> np.ndarray:
    """Map outer-product coefficients of two bases onto the ``out`` basis."""
    index = {m: i for i, m in enumerate(out)}
    M = np.zeros((len(left) * len(right), len(out)))
    for i, a in enumerate(left):
        for j, b in enumerate(right):
            M[i * len(right) + j, index[tuple(p + q for p, q in zip(a, b))]] = 1.0
    return M


def _mul_lin_lin(a, b):
    M = _product_matrix(tuple(LINEAR_MONOMIALS), tuple(LINEAR_MONOMIALS), tuple(QUADRATIC_MONOMIALS))
    outer = a[..., :, None] * b[..., None, :]
    return outer.reshape(*outer.shape[:-2], 16) @ M


def _mul_quad_lin(a, b):
    M = _product_matrix(tuple(QUADRATIC_MONOMIALS), tuple(LINEAR_MONOMIALS), tuple(CUBIC_MONOMIALS))
    outer = a[..., :, None] * b[..., None, :]
    return outer.reshape(*outer.shape[:-2], 40) @ M


def constraint_matrix(basis: np.ndarray) -> np.ndarray:
    """10 x 20 coefficients of det(E) = 0 and 2 E E^T E - tr(E E^T) E = 0.

    ``basis`` holds the four null vectors X, Y, Z, W (as 9-vectors) with
    E = x X + y Y + z Z + W.
    """
    Ec = np.stack([basis[:, j].reshape(3, 3) for j in range(4)], axis=-1)  # (3, 3, 4)
    EEt = np.zeros((3, 3, 10))
    for k in range(3):
        EEt += _mul_lin_lin(Ec[:, None, k, :], Ec[None, :, k, :])
    trace = EEt[0, 0] + EEt[1, 1] + EEt[2, 2]
    C = np.zeros((3, 3, 20))
    for k in range(3):
        C += 2.0 * _mul_quad_lin(EEt[:, k, None, :], Ec[None, k, :, :])
    C -= _mul_quad_lin(np.broadcast_to(trace, (3, 3, 10)), Ec)
    cof0 = [
        _mul_lin_lin(Ec[1, 1], Ec[2, 2]) - _mul_lin_lin(Ec[1, 2], Ec[2, 1]),
        _mul_lin_lin(Ec[1, 2], Ec[2, 0]) - _mul_lin_lin(Ec[1, 0], Ec[2, 2]),
        _mul_lin_lin(Ec[1, 0], Ec[2, 1]) - _mul_lin_lin(Ec[1, 1], Ec[2, 0]),
    ]
    det = sum(_mul_quad_lin(cof0[j], Ec[0, j]) for j in range(3))
    return np.vstack([det[None, :], C.reshape(9, 20)])


def _b_matrix(R: np.ndarray) -> list[list[np.ndarray]]:
    """Rows <e> - z<f>, <g> - z<h>, <i> - z<j> as polynomials in z (ascending)."""
    rows = []
    for top, bot in ((4, 5), (6, 7), (8, 9)):
        e = R[top, 10:]
        f = R[bot, 10:]
        xc = np.array([e[2], e[1] - f[2], e[0] - f[1], -f[0]])
        yc = np.array([e[5], e[4] - f[5], e[3] - f[4], -f[3]])
        oc = np.array([e[9], e[8] - f[9], e[7] - f[8], e[6] - f[7], -f[6]])
        rows.append([xc, yc, oc])
    return rows


def _det_poly(B) -> np.ndarray:
    pm = np.polynomial.polynomial.polymul

    def minor(a, b, c, d):
        return np.polynomial.polynomial.polysub(pm(a, d), pm(b, c))

    t0 = pm(B[0][0], minor(B[1][1], B[1][2], B[2][1], B[2][2]))
    t1 = pm(B[0][1], minor(B[1][0], B[1][2], B[2][0], B[2][2]))
    t2 = pm(B[0][2], minor(B[1][0], B[1][1], B[2][0], B[2][1]))
    p = np.polynomial.polynomial.polyadd(np.polynomial.polynomial.polysub(t0, t1), t2)
    out = np.zeros(11)
    out[: len(p)] = p[:11]
    return out


def essential_residuals(E: np.ndarray, x1: np.ndarray, x2: np.ndarray, rows=None) -> np.ndarray:
    """Stacked constraint values: epipolar (n), det (1), trace (9), norm (1)."""
    rows = epipolar_rows(x1, x2) if rows is None else rows
    EEt = E @ E.T
    trace = 2.0 * EEt @ E - np.trace(EEt) * E
    return np.concatenate([
        rows @ E.reshape(-1),
        [numkit.det3(E)],
        trace.reshape(-1),
        [np.sum(E * E) - 2.0],
    ])


def essential_constraint_jacobian(E: np.ndarray) -> np.ndarray:
    """Jacobian of the det, trace and norm constraints (11 rows) in vec(E)."""
    I = np.eye(3)
    EEt = E @ E.T
    EtE = E.T @ E
    # d(2 E E^T E - tr(E E^T) E) / dE[a, b], indexed [r, c, a, b]
    J = 2.0 * (np.einsum("ra,bc->rcab", I, EtE) + np.einsum("rb,ac->rcab", E, E) + np.einsum("ra,bc->rcab", EEt, I))
    J -= np.trace(EEt) * np.einsum("ra,cb->rcab", I, I) + 2.0 * np.einsum("rc,ab->rcab", E, E)
    return np.vstack([np.array(numkit.cofactor3(E)).reshape(1, 9), J.reshape(9, 9), 2.0 * E.reshape(1, 9)])


def five_point_jacobian(E: np.ndarray, x1: np.ndarray, x2: np.ndarray) -> np.ndarray:
    """Implicit derivative dE/d(inputs) of one 5PC solution.

    The solution satisfies the overdetermined but consistent system of
    :func:`essential_residuals`; its Jacobian in E has full column rank at a
    simple root, so the least-squares solve gives the exact derivative.
    """
    n = len(x1)
    JE = np.vstack([epipolar_rows(x1, x2), essential_constraint_jacobian(E)])
    Jx = np.vstack([epipolar_jacobian_inputs(E, x1, x2), np.zeros((11, 4 * n))])
    sol, _, rank, _ = np.linalg.lstsq(JE, -Jx, rcond=None)
    if rank < 9:
        raise DegenerateSampleError("5PC root is not simple")
    return sol


ROOT_TOL = 1e-9


def _polish(E: np.ndarray, x1: np.ndarray, x2: np.ndarray, steps: int = 8):
    """Gauss-Newton on the stacked constraints; None if it does not converge."""
    A = epipolar_rows(x1, x2)
    for _ in range(steps):
        JE = np.vstack([A, essential_constraint_jacobian(E)])
        step = np.linalg.lstsq(JE, essential_residuals(E, x1, x2, A), rcond=None)[0]
        E = E - step.reshape(3, 3)
        if np.abs(step).max() < 1e-15:
            break
    if not np.all(np.isfinite(E)) or np.abs(essential_residuals(E, x1, x2, A)).max() > ROOT_TOL:
        return None
    return E


def solve_5pc(x1, x2) -> list[np.ndarray]:
    """Essential matrices (|E|_F = sqrt 2) consistent with 5 calibrated matches.

    Inputs are normalized camera coordinates (pixels premultiplied by K^-1).
    An empty list is a valid outcome when the degree-10 polynomial has no
    real roots.
    """
    x1 = np.asarray(x1, dtype=float)
    x2 = np.asarray(x2, dtype=float)
    if len(x1) != 5 or len(x2) != 5:
        raise ValueError("5PC needs exactly 5 matched points")
    A = epipolar_rows(x1, x2)
    _, S, V = numkit.svd(A)
    if S[4] < 1e-10 * S[0]:
        raise DegenerateSampleError("5PC constraint matrix is rank deficient")
    basis = V[:, 5:9]
    M = constraint_matrix(basis)
    try:
        R = numkit.gauss_jordan(M)
    except numkit.NumericalError as exc:
        raise DegenerateSampleError(str(exc)) from exc
    B = _b_matrix(R)
    poly = _det_poly(B)
    try:
        zs = numkit.roots_companion(poly)
    except numkit.NumericalError:
        return []
    out = []
    for z in zs:
        Bz = np.array([[np.polynomial.polynomial.polyval(z, B[i][j]) for j in range(3)] for i in range(3)])
        cands = [numkit.cross3(Bz[0], Bz[1]), numkit.cross3(Bz[0], Bz[2]), numkit.cross3(Bz[1], Bz[2])]
        v = max(cands, key=lambda c: float(np.linalg.norm(c)))
        if abs(v[2]) < 1e-14 * (np.linalg.norm(v) or 1.0):
            continue
        x, y = v[0] / v[2], v[1] / v[2]
        E = (x * basis[:, 0] + y * basis[:, 1] + z * basis[:, 2] + basis[:, 3]).reshape(3, 3)
        nrm = np.linalg.norm(E)
        if nrm == 0.0 or not np.isfinite(nrm):
            continue
        # spurious roots from an ill-conditioned elimination fail to polish
        E = _polish(E * (SQRT2 / nrm), x1, x2)
        if E is None:
            continue
        out.append(E * canonical_sign(E))
    return out


def essential_5pc_d(E: np.ndarray, x1_d, x2_d) -> np.ndarray:
    x1 = as_values(x1_d)
    x2 = as_values(x2_d)
    return attach("5pc", E, x1_d, x2_d, five_point_jacobian(E, x1, x2))


# pose recovery -------------------------------------------------------------


def project_essential(E: np.ndarray) -> np.ndarray:
    """Closest matrix with singular values (1, 1, 0)."""
    U, _, V = numkit.svd(E)
    return U @ np.diag([1.0, 1.0, 0.0]) @ V.T


def triangulate_midpoint(R, t, x1, x2):
    """Depths of midpoint-triangulated points in both cameras (x2 ~ R x1 + t)."""
    d1 = homogeneous(x1)
    d2 = homogeneous(x2) @ R          # rays of camera 2 expressed in camera 1
    c2 = -R.T @ t
    a = np.sum(d1 * d1, axis=1)
    b = np.sum(d1 * d2, axis=1)
    c = np.sum(d2 * d2, axis=1)
    d = d1 @ c2
    e = d2 @ c2
    den = a * c - b * b
    den = np.where(np.abs(den) < 1e-15, 1e-15, den)
    l1 = (d * c - b * e) / den
    l2 = (b * d - a * e) / den
    X = 0.5 * (l1[:, None] * d1 + c2 + l2[:, None] * d2)
    X2 = X @ R.T + t
    return X[:, 2], X2[:, 2]


def pose_candidates(E: np.ndarray):
    """The four (R, t) pairs of a unit-singular-value essential matrix.

    With t the unit left null vector, R = cof(E) - [t]x E satisfies E = [t]x R
    and R = cof(E) + [t]x E satisfies -E = [t]x R.
    """
    U, _, _ = numkit.svd(E)
    t = U[:, 2] * _canonical_translation(U[:, 2])
    cof = np.array(numkit.cofactor3(E))
    tx = np.array(numkit.skew(t))
    Ra = cof - tx @ E
    Rb = cof + tx @ E
    return [(Ra, t, 0), (Ra, -t, 1), (Rb, t, 2), (Rb, -t, 3)]


class CheiralityError(ValueError):
    pass


def choose_pose(E: np.ndarray, x1, x2):
    """Candidate index and (R, t) with the most points in front of both cameras."""
    Ep = project_essential(np.asarray(E, dtype=float))
    best = None
    for R, t, idx in pose_candidates(Ep):
        z1, z2 = triangulate_midpoint(R, t, x1, x2)
        good = int(np.sum((z1 > 0) & (z2 > 0)))
        if best is None or good > best[0]:
            best = (good, idx, R, t)
    if best[0] * 2 <= len(x1):
        raise CheiralityError("no pose candidate places most points in front of both cameras")
    return best[1], best[2], best[3]


def decompose_essential(E, x1, x2):
    """Relative pose (R, unit t) with x2 ~ R x1 + t, chosen by cheirality."""
    _, R, t = choose_pose(E, np.asarray(x1, float), np.asarray(x2, float))
    return R, t / np.linalg.norm(t)


def _signed_epipolar(E, h1, h2):
    l2 = h1 @ E.T
    l1 = h2 @ E
    e = np.sum(h2 * l2, axis=1)
    a = np.maximum(l2[:, 0] ** 2 + l2[:, 1] ** 2, 1e-24)
    b = np.maximum(l1[:, 0] ** 2 + l1[:, 1] ** 2, 1e-24)
    return e * np.sqrt(1.0 / a + 1.0 / b)


def refine_essential(E, x1, x2, max_evals: int = 200) -> np.ndarray:
    """Levenberg-Marquardt on (R, t) minimizing the symmetric epipolar error.

    The update stays on the essential manifold: R moves by a rotation vector
    and t within the tangent plane of the unit sphere. Returns E scaled to
    Frobenius norm sqrt(2).
    """
    x1 = np.asarray(x1, dtype=float)
    x2 = np.asarray(x2, dtype=float)
    if len(x1) < 5:
        raise DegenerateSampleError("refinement needs at least 5 points")
    R0, t0, _ = pose_candidates(project_essential(np.asarray(E, dtype=float)))[0]
    basis = np.linalg.svd(t0[None, :])[2][1:]
    h1, h2 = homogeneous(x1), homogeneous(x2)

    def model(p):
        t = t0 + basis.T @ p[3:]
        t = t / np.linalg.norm(t)
        R = Rotation.from_rotvec(p[:3]).as_matrix() @ R0
        return np.array(numkit.skew(t)) @ R

    fit = least_squares(lambda p: _signed_epipolar(model(p), h1, h2), np.zeros(5), method="lm", max_nfev=max_evals)
    Eh = model(fit.x)
    return Eh * (SQRT2 / np.linalg.norm(Eh))


def project_essential_d(E_d) -> np.ndarray:
    """:func:`project_essential` on the tape.

    With E = U S V^T and dE mapped to M = U^T dE V, the projection moves by
    U G V^T where the 2x2 block of G is (M_ij - M_ji) / (s_i + s_j), so the
    derivative stays finite when the two leading singular values coincide.
    """
    E_d = np.asarray(E_d, dtype=object)
    U, S, V = numkit.svd(as_values(E_d))
    if S[1] <= 1e-12 * S[0]:
        raise DegenerateSampleError("essential matrix has rank below 2")
    P = U @ np.diag([1.0, 1.0, 0.0]) @ V.T
    M = np.einsum("ai,bj->abij", U, V)  # M[a, b] = U^T e_a e_b^T V
    G = np.zeros_like(M)
    for i in range(2):
        j = 1 - i
        G[..., i, j] = (M[..., i, j] - M[..., j, i]) / (S[i] + S[j])
        G[..., i, 2] = (M[..., i, 2] * S[i] + M[..., 2, i] * S[2]) / (S[i] ** 2 - S[2] ** 2)
        G[..., 2, i] = (M[..., 2, i] * S[i] + M[..., i, 2] * S[2]) / (S[i] ** 2 - S[2] ** 2)
    dP = np.einsum("ri,abij,cj->rcab", U, G, V).reshape(9, 9)
    out = diff.custom("essential_projection", P.reshape(-1), list(E_d.reshape(-1)), dP)
    return np.array(out, dtype=object).reshape(3, 3)


def _canonical_translation(t):
    """Sign fix making the largest-magnitude entry of the null vector positive."""
    tv = as_values(np.asarray(t, dtype=object)) if np.asarray(t).dtype == object else np.asarray(t)
    return 1.0 if tv[int(np.argmax(np.abs(tv)))] >= 0 else -1.0


def decompose_essential_d(E_d, x1, x2):
    """Differentiable decomposition of an object-array essential matrix.

    E is projected to singular values (1, 1, 0) on the tape; for solver
    outputs already on that manifold this leaves value and derivative intact.
    The cheirality choice is a discrete decision made on values.
    """
    E_d = np.asarray(E_d, dtype=object)
    idx, _, _ = choose_pose(as_values(E_d), x1, x2)
    Eh = project_essential_d(E_d)
    t = np.array(numkit.left_null_vector_d(Eh), dtype=object)
    t = t * _canonical_translation(t)
    cof = np.array(numkit.cofactor3(Eh), dtype=object)
    txE = np.array(numkit.matmul3(numkit.skew(t), Eh), dtype=object)
    R = cof - txE if idx in (0, 1) else cof + txE
    if idx in (1, 3):
        t = -t
    return R, t
