from __future__ import annotations

import numpy as np

from .. import diff


class DegenerateSampleError(ValueError):
    """The sample does not determine a model (rank deficiency, collinearity...)."""


def homogeneous(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    return np.hstack([x, np.ones((x.shape[0], 1))])


def epipolar_rows(x1: np.ndarray, x2: np.ndarray) -> np.ndarray:
    """Rows ``kron(x2_h, x1_h)`` so that ``A @ vec(F) = x2^T F x1`` (row-major F)."""
    h1 = homogeneous(x1)
    h2 = homogeneous(x2)
    return (h2[:, :, None] * h1[:, None, :]).reshape(len(h1), 9)


def canonical_sign(M: np.ndarray) -> float:
    flat = np.asarray(M, dtype=float).reshape(-1)
    k = int(np.argmax(np.abs(flat)))
    return -1.0 if flat[k] < 0 else 1.0


def epipolar_jacobian_inputs(M: np.ndarray, x1: np.ndarray, x2: np.ndarray) -> np.ndarray:
    """d(x2_i^T M x1_i)/d(x1, x2), inputs ordered as ``[x1.ravel(), x2.ravel()]``."""
    n = len(x1)
    h1 = homogeneous(x1)
    h2 = homogeneous(x2)
    J = np.zeros((n, 4 * n))
    g1 = h2 @ M          # row i: x2_i^T M  -> derivative wrt x1_i
    g2 = h1 @ M.T        # row i: (M x1_i)^T -> derivative wrt x2_i
    for i in range(n):
        J[i, 2 * i:2 * i + 2] = g1[i, :2]
        J[i, 2 * n + 2 * i:2 * n + 2 * i + 2] = g2[i, :2]
    return J


def attach(kind: str, model: np.ndarray, x1_d, x2_d, jac_inputs: np.ndarray) -> np.ndarray:
    """Put ``model`` on the tape of the inputs with a precomputed Jacobian."""
    parents = list(np.asarray(x1_d, dtype=object).reshape(-1)) + list(np.asarray(x2_d, dtype=object).reshape(-1))
    out = diff.custom(kind, model.reshape(-1), parents, jac_inputs)
    return np.array(out, dtype=object).reshape(model.shape)


def as_values(x) -> np.ndarray:
    return np.asarray(diff.value_of(np.asarray(x, dtype=object)), dtype=float) if np.asarray(x).dtype == object else np.asarray(x, dtype=float)
