"""Small dense linear algebra and polynomial roots.

Plain routines take and return float arrays.  The ``*_d`` variants accept
arrays of :class:`~gransac.diff.DiffValue` and attach exact first-order
derivatives (SVD perturbation theory, implicit differentiation of roots).
Generic helpers such as :func:`det3` and :func:`cross3` are written with plain
arithmetic and work on either kind of entry.
"""

from __future__ import annotations

import math
from typing import NamedTuple

import numpy as np

from . import diff

SVD_GAP_EPS = 1e-10


class NumericalError(RuntimeError):
    """A routine failed to converge or hit a singular pivot."""


def _canonical_sign(vec: np.ndarray) -> float:
    k = int(np.argmax(np.abs(vec)))
    return -1.0 if vec[k] < 0 else 1.0


def svd(A):
    """Full SVD ``A = U diag(S) V^T`` with descending ``S`` and fixed signs.

    Each right singular vector is flipped so that its largest-magnitude entry
    is positive; the matching left vector is flipped with it.
    """
    A = np.asarray(A, dtype=float)
    if A.ndim != 2 or A.size == 0:
        raise ValueError("svd expects a nonempty 2-D array")
    if not np.all(np.isfinite(A)):
        raise NumericalError("svd input has non-finite entries")
    try:
        U, S, Vt = np.linalg.svd(A, full_matrices=True)
    except np.linalg.LinAlgError as exc:
        raise NumericalError(f"svd did not converge: {exc}") from exc
    V = Vt.T.copy()
    r = len(S)
    for j in range(V.shape[1]):
        sgn = _canonical_sign(V[:, j])
        if sgn < 0:
            V[:, j] *= -1.0
            if j < r:
                U[:, j] *= -1.0
    return U, S, V


class NullSpace(NamedTuple):
    basis: np.ndarray
    degenerate: bool


def null_space(A, dim: int) -> NullSpace:
    """Right singular vectors of the ``dim`` smallest singular values.

    ``degenerate`` is set when the gap between the smallest kept and the
    largest discarded singular value is below 1e-14 of the largest one.
    """
    A = np.asarray(A, dtype=float)
    m, n = A.shape
    if dim > n or dim < 1:
        raise ValueError("dim must lie in [1, cols]")
    _, S, V = svd(A)
    sv = np.zeros(n)
    sv[: len(S)] = S
    basis = V[:, n - dim:]
    if dim == n:
        degenerate = False
    else:
        top = sv[0] if sv[0] > 0 else 1.0
        degenerate = bool(sv[n - dim - 1] - sv[n - dim] < 1e-14 * top)
    return NullSpace(basis, degenerate)


def gauss_jordan(M, pivot_tol: float = 1e-12) -> np.ndarray:
    """Reduce ``M`` (m x n, m <= n) so its left m x m block is the identity.

    Partial pivoting; a pivot below ``pivot_tol`` times the largest entry of
    the input raises :class:`NumericalError`.
    """
    M = np.array(M, dtype=float)
    m = M.shape[0]
    scale = np.abs(M).max() or 1.0
    for c in range(m):
        p = c + int(np.argmax(np.abs(M[c:, c])))
        if abs(M[p, c]) < pivot_tol * scale:
            raise NumericalError("elimination pivot below tolerance")
        if p != c:
            M[[c, p]] = M[[p, c]]
        M[c] /= M[c, c]
        col = M[:, c].copy()
        col[c] = 0.0
        M -= np.outer(col, M[c])
    return M


# polynomials (coefficients in ascending degree) ---------------------------


def polyval(coeffs, x):
    r = 0.0
    for c in reversed(coeffs):
        r = r * x + c
    return r


def polyder(coeffs):
    return [i * c for i, c in enumerate(coeffs)][1:] or [0.0]


def _newton(coeffs, roots, steps: int = 2):
    d = polyder(coeffs)
    out = []
    for r in roots:
        for _ in range(steps):
            dp = polyval(d, r)
            if dp == 0.0:
                break
            step = polyval(coeffs, r) / dp
            if not math.isfinite(step):
                break
            r = r - step
        out.append(r)
    return out


def _trim(coeffs, rel: float = 1e-12):
    c = [float(x) for x in coeffs]
    big = max((abs(x) for x in c), default=0.0)
    while len(c) > 1 and abs(c[-1]) < rel * big:
        c.pop()
    return c, big


def roots_quadratic(coeffs) -> list[float]:
    c, big = _trim(coeffs)
    if big == 0.0:
        return []
    if len(c) == 1:
        return []
    if len(c) == 2:
        return [-c[0] / c[1]]
    a0, a1, a2 = c
    disc = a1 * a1 - 4.0 * a2 * a0
    if disc < 0.0:
        if disc > -1e-14 * max(a1 * a1, abs(4.0 * a2 * a0)):
            return [-a1 / (2.0 * a2)]
        return []
    q = -0.5 * (a1 + math.copysign(math.sqrt(disc), a1))
    roots = [q / a2]
    if q != 0.0:
        roots.append(a0 / q)
    else:
        roots.append(0.0)
    return sorted(roots)


def roots_cubic(coeffs) -> list[float]:
    """Real roots of ``c0 + c1 x + c2 x^2 + c3 x^3`` in closed form.

    A negligible leading coefficient demotes the problem to a quadratic.
    Roots are polished with two Newton steps and returned in ascending order.
    """
    c = [float(x) for x in coeffs]
    if len(c) != 4:
        raise ValueError("roots_cubic expects four coefficients")
    big = max(abs(x) for x in c)
    if big == 0.0:
        return []
    if abs(c[3]) < 1e-12 * big:
        return roots_quadratic(c[:3])
    a = c[2] / c[3]
    b = c[1] / c[3]
    d = c[0] / c[3]
    # depressed cubic t^3 + p t + q with x = t - a/3
    p = b - a * a / 3.0
    q = 2.0 * a ** 3 / 27.0 - a * b / 3.0 + d
    shift = -a / 3.0
    disc = (q / 2.0) ** 2 + (p / 3.0) ** 3
    if disc > 0.0:
        sq = math.sqrt(disc)
        u = math.copysign(abs(-q / 2.0 + sq) ** (1.0 / 3.0), -q / 2.0 + sq)
        v = math.copysign(abs(-q / 2.0 - sq) ** (1.0 / 3.0), -q / 2.0 - sq)
        roots = [u + v + shift]
    elif p == 0.0:
        roots = [shift]
    else:
        m = 2.0 * math.sqrt(-p / 3.0)
        arg = 3.0 * q / (p * m)
        arg = min(1.0, max(-1.0, arg))
        theta = math.acos(arg) / 3.0
        roots = [m * math.cos(theta - 2.0 * math.pi * j / 3.0) + shift for j in range(3)]
    return sorted(_newton(c, roots))


def companion_matrix(coeffs) -> np.ndarray:
    c = np.asarray(coeffs, dtype=float)
    n = len(c) - 1
    C = np.zeros((n, n))
    C[1:, :-1] = np.eye(n - 1)
    C[:, -1] = -c[:-1] / c[-1]
    return C


def roots_companion(coeffs, real_tol: float = 1e-8) -> list[float]:
    """Real roots of a polynomial of degree <= 10 via companion eigenvalues.

    An eigenvalue counts as real when its imaginary part is below
    ``real_tol`` times the spectral radius.  Real roots get two Newton steps
    on the original polynomial.
    """
    c, big = _trim(coeffs)
    if big == 0.0:
        raise NumericalError("zero polynomial")
    if len(c) - 1 > 10:
        raise ValueError("degree above 10")
    if len(c) == 1:
        return []
    zeros = 0
    while len(c) > 1 and c[0] == 0.0:
        c.pop(0)
        zeros += 1
    roots: list[float] = [0.0] * zeros
    if len(c) > 1:
        try:
            ev = np.linalg.eigvals(companion_matrix(c))
        except np.linalg.LinAlgError as exc:
            raise NumericalError(f"eigenvalue iteration failed: {exc}") from exc
        radius = float(np.max(np.abs(ev))) or 1.0
        real = ev[np.abs(ev.imag) < real_tol * radius].real
        roots += _newton(c, [float(r) for r in real])
    return sorted(roots)


# 3x3 helpers (generic over floats and DiffValues) --------------------------


def det3(M):
    return (M[0][0] * (M[1][1] * M[2][2] - M[1][2] * M[2][1])
            - M[0][1] * (M[1][0] * M[2][2] - M[1][2] * M[2][0])
            + M[0][2] * (M[1][0] * M[2][1] - M[1][1] * M[2][0]))


def cofactor3(M):
    """Cofactor matrix (transpose of the adjugate)."""
    return [
        [M[1][1] * M[2][2] - M[1][2] * M[2][1], M[1][2] * M[2][0] - M[1][0] * M[2][2], M[1][0] * M[2][1] - M[1][1] * M[2][0]],
        [M[0][2] * M[2][1] - M[0][1] * M[2][2], M[0][0] * M[2][2] - M[0][2] * M[2][0], M[0][1] * M[2][0] - M[0][0] * M[2][1]],
        [M[0][1] * M[1][2] - M[0][2] * M[1][1], M[0][2] * M[1][0] - M[0][0] * M[1][2], M[0][0] * M[1][1] - M[0][1] * M[1][0]],
    ]


def cross3(a, b):
    return [a[1] * b[2] - a[2] * b[1], a[2] * b[0] - a[0] * b[2], a[0] * b[1] - a[1] * b[0]]


def skew(t):
    z = 0.0
    return [[z, -t[2], t[1]], [t[2], z, -t[0]], [-t[1], t[0], z]]


def matmul3(A, B):
    return [[A[i][0] * B[0][j] + A[i][1] * B[1][j] + A[i][2] * B[2][j] for j in range(3)] for i in range(3)]


def transpose3(A):
    return [[A[j][i] for j in range(3)] for i in range(3)]


def eig3_sym(M):
    """Eigenvalues (ascending) and eigenvectors of a symmetric 3x3 matrix."""
    M = np.asarray(M, dtype=float)
    w, v = np.linalg.eigh(0.5 * (M + M.T))
    return w, v


def qr3(M):
    """QR with a nonnegative diagonal in R."""
    Q, R = np.linalg.qr(np.asarray(M, dtype=float))
    d = np.where(np.diag(R) < 0, -1.0, 1.0)
    return Q * d, (R.T * d).T


def rq3(M):
    """RQ decomposition ``M = R Q`` (upper-triangular R, orthogonal Q)."""
    P = np.eye(3)[::-1]
    Q, R = qr3((P @ np.asarray(M, dtype=float)).T)
    return P @ R.T @ P, P @ Q.T


# differentiable forms ------------------------------------------------------


def _entries(A):
    arr = np.asarray(A, dtype=object)
    return arr, list(arr.reshape(-1))


def _guard(d):
    return np.where(np.abs(d) < SVD_GAP_EPS, np.where(d < 0, -SVD_GAP_EPS, SVD_GAP_EPS), d)


def svd_jacobians(A):
    """SVD of ``A`` and first-order derivatives of every factor.

    Returns ``U, S, V, dU, dS, dV`` where ``dU[:, :, r, c]`` is the
    derivative of ``U`` with respect to ``A[r, c]`` (likewise for the others).
    Denominators ``s_n^2 - s_j^2`` are guarded at ``1e-10``.
    """
    A = np.asarray(A, dtype=float)
    m, n = A.shape
    U, S, V = svd(A)
    r = len(S)
    su = np.zeros(m)
    su[:r] = S
    sv = np.zeros(n)
    sv[:r] = S
    q = min(m, n)
    Upad = np.zeros((m, n))
    Upad[:, :q] = U[:, :q]
    Vpad = np.zeros((n, m))
    Vpad[:, :q] = V[:, :q]
    dS = np.einsum("rk,ck->krc", U[:, :r], V[:, :r])
    Wu = 1.0 / _guard(su[:, None] ** 2 - su[None, :] ** 2)
    np.fill_diagonal(Wu, 0.0)
    Wv = 1.0 / _guard(sv[:, None] ** 2 - sv[None, :] ** 2)
    np.fill_diagonal(Wv, 0.0)
    B1 = np.einsum("ij,kj,rj->kir", U, Wu, U)
    B2 = np.einsum("ij,kj,j,cj->kic", U, Wu, su, Vpad)
    dU = (su[:, None, None, None] * Vpad.T[:, None, None, :] * B1[:, :, :, None]
          + U.T[:, None, :, None] * B2[:, :, None, :]).transpose(1, 0, 2, 3)
    A1 = np.einsum("ij,kj,cj->kic", V, Wv, V)
    A2 = np.einsum("ij,kj,j,rj->kir", V, Wv, sv, Upad)
    dV = (sv[:, None, None, None] * Upad.T[:, None, :, None] * A1[:, :, None, :]
          + V.T[:, None, None, :] * A2[:, :, :, None]).transpose(1, 0, 2, 3)
    return U, S, V, dU, dS, dV


def svd_d(A):
    """SVD of a matrix of DiffValues; returns object arrays ``U, S, V``."""
    arr, parents = _entries(A)
    vals = np.asarray(diff.value_of(arr), dtype=float)
    m, n = vals.shape
    U, S, V, dU, dS, dV = svd_jacobians(vals)
    Ud = np.array(diff.custom("svd_u", U.reshape(-1), parents, dU.reshape(m * m, m * n)), dtype=object).reshape(m, m)
    Sd = np.array(diff.custom("svd_s", S, parents, dS.reshape(len(S), m * n)), dtype=object)
    Vd = np.array(diff.custom("svd_v", V.reshape(-1), parents, dV.reshape(n * n, m * n)), dtype=object).reshape(n, n)
    return Ud, Sd, Vd


def null_vector_jacobian(A):
    """Unit right null vector of ``A`` (simple smallest singular value) and its Jacobian.

    The derivative is taken for the least-squares null vector, i.e. the right
    singular vector of the smallest singular value.
    """
    A = np.asarray(A, dtype=float)
    m, n = A.shape
    U, S, V, dU, dS, dV = svd_jacobians(A)
    return V[:, -1], dV[:, -1].reshape(n, m * n)


def null_vector_d(A):
    arr, parents = _entries(A)
    vals = np.asarray(diff.value_of(arr), dtype=float)
    v, jac = null_vector_jacobian(vals)
    return diff.custom("null_vector", v, parents, jac)


def left_null_vector_d(A):
    """Unit left null vector (``u^T A = 0``) of a square matrix of DiffValues."""
    arr = np.asarray(A, dtype=object)
    return null_vector_d(arr.T)


def roots_d(coeffs, roots: list[float]) -> list:
    """Attach implicit derivatives ``dr = -sum(r^i dc_i) / p'(r)`` to roots."""
    cv = [float(diff.value_of(c)) for c in coeffs]
    d = polyder(cv)
    out = []
    for r in roots:
        dp = polyval(d, r)
        if dp == 0.0:
            raise NumericalError("multiple root has no derivative")
        jac = -np.array([r ** i for i in range(len(cv))]) / dp
        out.append(diff.custom("root", [r], list(coeffs), jac[None, :])[0])
    return out


def roots_cubic_d(coeffs):
    return roots_d(coeffs, roots_cubic([diff.value_of(c) for c in coeffs]))


def roots_companion_d(coeffs):
    return roots_d(coeffs, roots_companion([diff.value_of(c) for c in coeffs]))
