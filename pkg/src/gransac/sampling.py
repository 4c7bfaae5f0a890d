"""Minimal-sample drawing: Gumbel top-k with a straight-through surrogate,
Plackett-Luce probabilities, the test-time exponent trick, uniform draws,
PROSAC, and a counter-based per-hypothesis random stream.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass

import numpy as np

from . import diff

U_CLAMP = 1e-12


def _top_k(keys: np.ndarray, k: int) -> tuple:
    """Indices of the k largest keys, descending; ties go to the lower index."""
    order = np.lexsort((np.arange(len(keys)), -keys))
    return tuple(int(i) for i in order[:k])


def _check(n, k):
    if not 1 <= k <= n:
        raise ValueError(f"need 1 <= k <= N, got k={k}, N={n}")


def gumbel_from_uniform(u) -> np.ndarray:
    u = np.clip(np.asarray(u, dtype=float), U_CLAMP, 1.0 - U_CLAMP)
    return -np.log(-np.log(u))


def softmax_values(x, tau: float = 1.0) -> np.ndarray:
    z = np.asarray(x, dtype=float) / tau
    z = np.exp(z - z.max())
    return z / z.sum()


# training-time sampler -------------------------------------------------------


@dataclass
class MinimalSample:
    """Indices of one Gumbel top-k draw plus what is needed to route gradients.

    ``scores`` are the (possibly tape-valued) logits. ``anchor`` is the value
    point where the stop-gradient copy of the surrogate is frozen; it equals
    the scores during training and differs only when finite-differencing.
    """

    indices: tuple
    gamma: np.ndarray
    tau: float
    scores: np.ndarray
    anchor: np.ndarray

    @property
    def k(self) -> int:
        return len(self.indices)

    @property
    def n(self) -> int:
        return len(self.gamma)

    def surrogate(self) -> np.ndarray:
        """Values of softmax((s + gamma) / tau) at the current scores."""
        return softmax_values(diff.value_of(self.scores) + self.gamma, self.tau)

    def anchored_surrogate(self) -> np.ndarray:
        return softmax_values(self.anchor + self.gamma, self.tau)

    def _offset(self) -> np.ndarray:
        """y - sg(y) in value: zero unless the anchor was moved away from s."""
        sv = np.asarray(diff.value_of(self.scores), dtype=float)
        if np.array_equal(sv, self.anchor):
            return np.zeros(self.n)
        return self.surrogate() - self.anchored_surrogate()

    def selection(self) -> np.ndarray:
        """k x N matrix Y = onehot + y - sg(y), one straight-through entry per cell."""
        s = np.asarray(self.scores, dtype=object)
        y = diff.softmax([s[i] + self.gamma[i] for i in range(self.n)], self.tau)
        offset = self._offset()
        Y = np.empty((self.k, self.n), dtype=object)
        for j, idx in enumerate(self.indices):
            for m in range(self.n):
                forward = (1.0 if m == idx else 0.0) + offset[m]
                Y[j, m] = diff.straight_through(forward, y[m])
        return Y

    def _feature_parts(self, phi):
        pv = np.asarray(diff.value_of(phi), dtype=float)
        if pv.ndim == 1:
            pv = pv[:, None]
        y = self.surrogate()
        offset = self._offset()
        ds = (y[:, None] * (pv - y @ pv)) / self.tau        # dh_jd / ds_m, same for every j
        values = pv[list(self.indices)] + offset @ pv
        return pv, values, ds, offset

    def feature_values(self, phi) -> np.ndarray:
        """Values of h = Y phi for the k selected rows."""
        return self._feature_parts(phi)[1]

    def pullback(self, G, phi) -> tuple[np.ndarray, np.ndarray]:
        """Gradients in (s, phi) given G = dL/dh of shape (k, D).

        Exact counterpart of backpropagating through :meth:`features`.
        """
        pv, _, ds, offset = self._feature_parts(phi)
        G = np.asarray(G, dtype=float).reshape(self.k, -1)
        col = G.sum(axis=0)
        grad_s = ds @ col
        grad_phi = np.outer(offset, col)
        np.add.at(grad_phi, list(self.indices), G)
        return grad_s, grad_phi

    def features(self, phi) -> np.ndarray:
        """h = Y phi for the k selected rows, as fused tape nodes.

        Each entry h_jd has value phi[i_j, d] + (y - y_anchor) . phi[:, d];
        its partials are (1/tau) y_m (phi_md - sum_n y_n phi_nd) in s_m and
        1 + y_m - y_anchor_m in phi[m, d].
        """
        phi = np.asarray(phi, dtype=object)
        if phi.ndim == 1:
            phi = phi[:, None]
        pv, values, ds, offset = self._feature_parts(phi)
        s_tape, s_idx = diff.indices_of(list(np.asarray(self.scores, dtype=object).reshape(-1)))
        p_tape, p_idx = diff.indices_of(list(phi.reshape(-1)))
        p_idx = p_idx.reshape(phi.shape)
        tape = s_tape or p_tape
        if s_tape is not None and p_tape is not None and s_tape is not p_tape:
            raise diff.TapeError("scores and features live on different tapes")
        k, D = values.shape
        if tape is None:
            return values.astype(object)
        n = self.n
        rows = np.empty((k * D, 2 * n), dtype=np.int64)
        jac = np.empty((k * D, 2 * n))
        for j, i in enumerate(self.indices):
            for d in range(D):
                r = j * D + d
                rows[r, :n] = s_idx
                rows[r, n:] = p_idx[:, d]
                jac[r, :n] = ds[:, d]
                jac[r, n:] = offset
                jac[r, n + i] += 1.0
        out = tape.push_rows("gumbel_feature", values.reshape(-1), rows, jac)
        return np.array(out, dtype=object).reshape(k, D)


def gumbel_topk(s, k: int, tau: float = 1.0, rng=None, u=None, gamma=None, anchor=None) -> MinimalSample:
    """Top-k of s + gamma with gamma standard Gumbel.

    Noise comes from ``gamma`` if given, else from uniforms ``u``, else from
    ``rng``. Indices are taken at ``anchor + gamma`` (default: the score values).
    """
    s_obj = np.asarray(s, dtype=object) if np.asarray(s).dtype == object else np.asarray(s, dtype=float)
    sv = np.asarray(diff.value_of(s_obj), dtype=float)
    n = len(sv)
    _check(n, k)
    if tau <= 0:
        raise ValueError("temperature must be positive")
    if not np.all(np.isfinite(sv)):
        raise ValueError("scores must be finite")
    if gamma is None:
        if u is None:
            if rng is None:
                raise ValueError("need gamma, u or rng")
            u = rng.random(n)
        gamma = gumbel_from_uniform(u)
    gamma = np.asarray(gamma, dtype=float)
    anchor = sv.copy() if anchor is None else np.asarray(anchor, dtype=float)
    return MinimalSample(_top_k(anchor + gamma, k), gamma, float(tau), s_obj, anchor)


# Plackett-Luce ---------------------------------------------------------------


def pl_probability(s, indices, logits: bool = True) -> float:
    """Probability of drawing ``indices`` in order, without replacement.

    With ``logits`` the weights are softmax(s); otherwise s are positive weights.
    """
    s = np.asarray(s, dtype=float)
    p = softmax_values(s) if logits else s / s.sum()
    if len(set(indices)) != len(indices):
        raise ValueError("indices must be distinct")
    prob = 1.0
    remaining = 1.0
    for i in indices:
        if remaining <= 0.0:
            raise ValueError("Plackett-Luce denominator vanished")
        prob *= p[i] / remaining
        remaining -= p[i]
    return float(prob)


def enumerate_pl(s, k: int, logits: bool = True) -> dict:
    """Exact probability of every ordered k-tuple."""
    n = len(s)
    _check(n, k)
    return {tup: pl_probability(s, tup, logits) for tup in itertools.permutations(range(n), k)}


# test-time and baseline samplers ----------------------------------------------


def draw_weights(s) -> np.ndarray:
    """Map logits to the positive weights used by the exponent trick."""
    return softmax_values(s)


def draw_log_weights(s) -> np.ndarray:
    """Logarithm of :func:`draw_weights`, finite even where the weights underflow."""
    z = np.asarray(s, dtype=float)
    z = z - z.max()
    return z - np.log(np.sum(np.exp(z)))


def weighted_keys(w, u, log: bool = False) -> np.ndarray:
    """Keys ordered like u^(1/w): log(w) - log(-log(u)).

    The log form keeps tiny weights from tying at 0; with ``log`` the input
    already holds log-weights.
    """
    w = np.asarray(w, dtype=float)
    if log:
        if np.any(np.isnan(w)) or np.any(w == np.inf):
            raise ValueError("log-weights must be finite")
        lw = w
    else:
        if np.any(w <= 0) or not np.all(np.isfinite(w)):
            raise ValueError("weights must be positive and finite")
        lw = np.log(w)
    u = np.clip(np.asarray(u, dtype=float), U_CLAMP, 1.0 - U_CLAMP)
    return lw - np.log(-np.log(u))


def weighted_draw_test(w, k: int, rng=None, u=None, log: bool = False) -> tuple:
    """Top-k of u_i^(1/w_i): a Plackett-Luce draw with weights proportional to w."""
    w = np.asarray(w, dtype=float)
    _check(len(w), k)
    u = rng.random(len(w)) if u is None else u
    return _top_k(weighted_keys(w, u, log), k)


def weighted_draw_batch(w, k: int, U: np.ndarray, log: bool = False) -> np.ndarray:
    """Row-wise :func:`weighted_draw_test` for a (B, N) block of uniforms."""
    keys = weighted_keys(w, U, log)
    n = keys.shape[1]
    _check(n, k)
    # stable sort on (-key) keeps the lower index first on ties
    order = np.argsort(-keys, axis=1, kind="stable")
    return order[:, :k]


def uniform_draw(n: int, k: int, rng=None, u=None) -> tuple:
    """Partial Fisher-Yates shuffle driven by k uniforms."""
    _check(n, k)
    u = rng.random(k) if u is None else np.asarray(u, dtype=float)
    return tuple(int(i) for i in uniform_draw_batch(n, k, u[None, :k])[0])


def uniform_draw_batch(n: int, k: int, U: np.ndarray) -> np.ndarray:
    """Vectorized partial Fisher-Yates, one sample per row of ``U`` (uses k columns).

    The virtual permutation is stored as the list of swaps made so far, so
    the cost does not depend on N.
    """
    _check(n, k)
    U = np.asarray(U, dtype=float)[:, :k]
    B = len(U)
    picks = np.empty((B, k), dtype=np.int64)
    pos = np.empty((B, k), dtype=np.int64)
    val = np.empty((B, k), dtype=np.int64)

    def lookup(p, upto):
        out = p.copy()
        for jj in range(upto):
            out = np.where(pos[:, jj] == p, val[:, jj], out)
        return out

    for j in range(k):
        r = j + np.minimum((U[:, j] * (n - j)).astype(np.int64), n - j - 1)
        picks[:, j] = lookup(r, j)
        pos[:, j] = r
        val[:, j] = lookup(np.full(B, j, dtype=np.int64), j)
    return picks


class Prosac:
    """Progressive sampling over a quality-sorted list.

    Hypothesis t draws from the top-n(t) prefix with the standard growth
    function: k-1 points from the first n-1 plus point n, until the schedule
    passes T'_n, after which all k come from the prefix.
    """

    def __init__(self, order, k: int, growth_max: int = 20000):
        self.order = np.asarray(order, dtype=np.int64)
        self.N = len(self.order)
        _check(self.N, k)
        self.k = k
        self.n = k
        self.t = 0
        self.T_n = float(growth_max)
        for i in range(k):
            self.T_n *= (k - i) / (self.N - i)
        self.T_prime = 1

    @classmethod
    def from_scores(cls, s, k: int, growth_max: int = 20000):
        s = np.asarray(s, dtype=float)
        order = np.lexsort((np.arange(len(s)), -s))
        return cls(order, k, growth_max)

    def _grow(self):
        T_next = self.T_n * (self.n + 1) / (self.n + 1 - self.k)
        self.T_prime += int(math.ceil(T_next - self.T_n))
        self.T_n = T_next
        self.n += 1

    def next(self, rng=None, u=None) -> tuple:
        self.t += 1
        if self.t >= self.T_prime and self.n < self.N:
            self._grow()
        u = rng.random(self.k) if u is None else np.asarray(u, dtype=float)
        if self.T_prime < self.t or self.n == self.k:
            pos = uniform_draw(self.n, self.k, u=u)
        else:
            pos = uniform_draw(self.n - 1, self.k - 1, u=u) + (self.n - 1,)
        return tuple(int(self.order[p]) for p in pos)

    @property
    def prefix(self) -> int:
        return self.n


# counter-based streams ---------------------------------------------------------


class HypothesisStream:
    """Uniforms for hypothesis i live at a fixed Philox counter offset.

    Any batch of hypotheses [a, b) reproduces exactly the numbers a serial
    loop would see, which makes parallel chunking deterministic.
    """

    def __init__(self, seed: int, width: int):
        self.seed = int(seed)
        self.width = int(width)
        self.block = 4 * ((self.width + 3) // 4)

    def uniforms(self, start: int, count: int) -> np.ndarray:
        bg = np.random.Philox(key=self.seed, counter=[start * (self.block // 4), 0, 0, 0])
        out = np.random.Generator(bg).random((count, self.block))
        return out[:, : self.width]

    def rng(self, index: int) -> np.random.Generator:
        return np.random.Generator(np.random.Philox(key=self.seed, counter=[index * (self.block // 4), 0, 0, 0]))
