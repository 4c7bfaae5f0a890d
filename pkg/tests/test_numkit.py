import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from gransac import numkit
from gransac.solvers.common import epipolar_rows
from gransac import synthdata


class TestSvd:
    def test_identity(self):
        U, S, V = numkit.svd(np.eye(3))
        np.testing.assert_allclose(S, [1.0, 1.0, 1.0])

    def test_diagonal(self):
        U, S, V = numkit.svd(np.diag([3.0, 2.0, 1.0]))
        np.testing.assert_allclose(S, [3.0, 2.0, 1.0])
        np.testing.assert_allclose(U, np.eye(3), atol=1e-15)
        np.testing.assert_allclose(V, np.eye(3), atol=1e-15)

    def test_random_9x9_reconstruction(self):
        A = np.random.default_rng(0).normal(size=(9, 9))
        U, S, V = numkit.svd(A)
        assert np.linalg.norm(A - U @ np.diag(S) @ V.T) / np.linalg.norm(A) < 1e-12

    def test_fuzzed_reconstruction_and_orthogonality(self):
        rng = np.random.default_rng(1)
        for _ in range(1000):
            m, n = rng.integers(1, 13, size=2)
            A = rng.normal(size=(m, n)) * 10.0 ** rng.uniform(-3, 3)
            U, S, V = numkit.svd(A)
            Sm = np.zeros((m, n))
            Sm[: len(S), : len(S)] = np.diag(S)
            assert np.linalg.norm(A - U @ Sm @ V.T) <= 1e-11 * np.linalg.norm(A)
            assert np.linalg.norm(U.T @ U - np.eye(m)) <= 1e-12
            assert np.linalg.norm(V.T @ V - np.eye(n)) <= 1e-12

    def test_descending_and_canonical_sign(self):
        A = np.random.default_rng(2).normal(size=(6, 4))
        U, S, V = numkit.svd(A)
        assert np.all(np.diff(S) <= 0)
        for j in range(V.shape[1]):
            assert V[np.argmax(np.abs(V[:, j])), j] > 0

    def test_nonfinite_rejected(self):
        with pytest.raises(numkit.NumericalError):
            numkit.svd(np.array([[1.0, np.nan], [0.0, 1.0]]))


class TestNullSpace:
    def test_simple(self):
        ns = numkit.null_space(np.array([[1.0, 0, 0], [0, 1.0, 0]]), 1)
        np.testing.assert_allclose(np.abs(ns.basis[:, 0]), [0, 0, 1], atol=1e-15)

    def test_zero_matrix(self):
        ns = numkit.null_space(np.zeros((2, 3)), 3)
        np.testing.assert_allclose(ns.basis.T @ ns.basis, np.eye(3), atol=1e-14)
        np.testing.assert_allclose(np.zeros((2, 3)) @ ns.basis, 0.0)

    def test_seven_epipolar_rows(self):
        item = synthdata.generate(synthdata.SceneSpec(kind="F", n=7, seed=3))
        A = epipolar_rows(item.x1, item.x2)
        ns = numkit.null_space(A, 2)
        for f in ns.basis.T:
            F = f.reshape(3, 3)
            h1 = np.hstack([item.x1, np.ones((7, 1))])
            h2 = np.hstack([item.x2, np.ones((7, 1))])
            assert np.max(np.abs(np.sum(h2 * (h1 @ F.T), axis=1))) < 1e-10

    def test_bad_dim(self):
        with pytest.raises(ValueError):
            numkit.null_space(np.eye(3), 4)


def _monic_from_roots(roots):
    desc = np.poly(roots)
    return list(desc[::-1])


class TestRoots:
    def test_cubic_unity(self):
        np.testing.assert_allclose(numkit.roots_cubic([-1.0, 0.0, 0.0, 1.0]), [1.0])

    def test_cubic_factored(self):
        np.testing.assert_allclose(numkit.roots_cubic(_monic_from_roots([1, 2, 3])), [1, 2, 3], atol=1e-12)

    def test_cubic_vs_companion_eigen_oracle(self):
        rng = np.random.default_rng(4)
        for _ in range(100):
            r = np.sort(rng.uniform(-10, 10, 3))
            c = np.array(_monic_from_roots(r)) * rng.uniform(0.5, 2.0)
            oracle = np.sort(np.linalg.eigvals(numkit.companion_matrix(c)).real)
            np.testing.assert_allclose(numkit.roots_cubic(c), oracle, atol=1e-8)

    def test_companion_degree_ten(self):
        np.testing.assert_allclose(numkit.roots_companion(_monic_from_roots(np.arange(10))), np.arange(10), atol=1e-6)

    def test_no_real_roots(self):
        assert numkit.roots_companion([1.0, 0.0, 1.0]) == []

    def test_residual_bound(self):
        rng = np.random.default_rng(5)
        for _ in range(200):
            c = rng.normal(size=rng.integers(3, 11))
            for r in numkit.roots_companion(c):
                assert abs(numkit.polyval(c, r)) <= 1e-8 * np.abs(c).max() * max(1.0, abs(r)) ** (len(c) - 1)

    @settings(max_examples=200, deadline=None)
    @given(st.lists(st.floats(-10, 10), min_size=3, max_size=3), st.floats(0.1, 10))
    def test_cubic_and_companion_agree(self, roots, lead):
        roots = np.sort(roots)
        if np.min(np.diff(roots)) < 1e-3:
            return
        c = np.array(_monic_from_roots(roots)) * lead
        a, b = numkit.roots_cubic(c), numkit.roots_companion(c)
        assert len(a) == len(b) == 3
        np.testing.assert_allclose(a, b, atol=1e-8 * max(1.0, np.abs(roots).max()))


class TestSmallMatrices:
    def test_det_identity(self):
        assert numkit.det3(np.eye(3)) == 1.0

    def test_cross(self):
        np.testing.assert_array_equal(numkit.cross3([1.0, 0, 0], [0, 1.0, 0]), [0, 0, 1.0])

    def test_det_vs_singular_values(self):
        rng = np.random.default_rng(6)
        for _ in range(50):
            M = rng.normal(size=(3, 3))
            d = numkit.det3(M)
            prod = np.prod(numkit.svd(M)[1])
            assert abs(abs(d) - prod) / prod < 1e-10

    def test_skew_is_cross(self):
        rng = np.random.default_rng(7)
        a, b = rng.normal(size=(2, 3))
        np.testing.assert_allclose(np.array(numkit.skew(a)) @ b, np.cross(a, b), atol=1e-15)

    def test_eig3_sym(self):
        M = np.random.default_rng(8).normal(size=(3, 3))
        M = M + M.T
        w, v = numkit.eig3_sym(M)
        np.testing.assert_allclose(M @ v, v * w, atol=1e-12)

    def test_qr_rq(self):
        M = np.random.default_rng(9).normal(size=(3, 3))
        Q, R = numkit.qr3(M)
        np.testing.assert_allclose(Q @ R, M, atol=1e-12)
        np.testing.assert_allclose(np.tril(R, -1), 0.0, atol=1e-15)
        R2, Q2 = numkit.rq3(M)
        np.testing.assert_allclose(R2 @ Q2, M, atol=1e-12)
        np.testing.assert_allclose(np.tril(R2, -1), 0.0, atol=1e-15)


class TestGaussJordan:
    def test_identity_block(self):
        M = np.random.default_rng(10).normal(size=(4, 7))
        G = numkit.gauss_jordan(M)
        np.testing.assert_allclose(G[:, :4], np.eye(4), atol=1e-12)
        np.testing.assert_allclose(np.linalg.solve(M[:, :4], M[:, 4:]), G[:, 4:], atol=1e-10)

    def test_singular(self):
        with pytest.raises(numkit.NumericalError):
            numkit.gauss_jordan(np.zeros((2, 3)))


class TestDifferentials:
    def test_null_vector_jacobian_fd(self):
        rng = np.random.default_rng(11)
        A = rng.normal(size=(8, 9))
        v0, J = numkit.null_vector_jacobian(A)
        np.testing.assert_allclose(np.abs(v0), np.abs(numkit.null_space(A, 1).basis[:, 0]), atol=1e-12)
        h = 1e-6
        num = np.zeros((9, A.size))
        for i in range(A.size):
            d = np.zeros(A.size)
            d[i] = h
            vp = numkit.null_space(A + d.reshape(A.shape), 1).basis[:, 0]
            vm = numkit.null_space(A - d.reshape(A.shape), 1).basis[:, 0]
            vp *= np.sign(vp @ v0)
            vm *= np.sign(vm @ v0)
            num[:, i] = (vp - vm) / (2 * h)
        np.testing.assert_allclose(J, num, atol=1e-6)
