import numpy as np
import pytest

from gransac import diff, synthdata
from gransac.losses import rotation_angle as rotation_error
from gransac.solvers import (
    CheiralityError,
    DegenerateSampleError,
    decompose_essential,
    fundamental_7pc_d,
    fundamental_8pc_d,
    kabsch_d,
    project_essential,
    select_best_algebraic,
    solve_5pc,
    solve_7pc,
    solve_8pc,
    solve_kabsch,
)
from gransac.solvers.essential import refine_essential


def _scene(kind="F", n=208, seed=0, planarity=0.0, noise=0.0):
    return synthdata.generate(synthdata.SceneSpec(kind=kind, n=n, seed=seed, planarity=planarity, noise=noise))


def _epi(F, x1, x2):
    h1 = np.hstack([x1, np.ones((len(x1), 1))])
    h2 = np.hstack([x2, np.ones((len(x2), 1))])
    return np.abs(np.sum(h2 * (h1 @ np.asarray(F).T), axis=1))


def _gauge_dist(A, B):
    A = A / np.linalg.norm(A)
    B = B / np.linalg.norm(B)
    return min(np.linalg.norm(A - B), np.linalg.norm(A + B))


class TestEightPoint:
    def test_noise_free(self):
        item = _scene()
        n1, n2 = item.normalized()
        F = solve_8pc(n1[:8], n2[:8])[0]
        assert _epi(F, n1[:8], n2[:8]).max() < 1e-10
        assert _epi(F, n1[8:], n2[8:]).max() < 1e-8

    def test_pixel_scaling_covariance(self):
        item = _scene(seed=1)
        F = solve_8pc(item.x1[:8], item.x2[:8])[0]
        F2 = solve_8pc(2.0 * item.x1[:8], 2.0 * item.x2[:8])[0]
        S = np.diag([0.5, 0.5, 1.0])
        assert _gauge_dist(F2, S @ F @ S) < 1e-9

    def test_planar_scene_not_silently_accurate(self):
        item = _scene(planarity=1.0, seed=2)
        n1, n2 = item.normalized()
        try:
            F = solve_8pc(n1[:8], n2[:8])[0]
        except DegenerateSampleError:
            return
        E_true = item.E
        assert _gauge_dist(F, E_true) > 1e-3 or np.median(_epi(F, n1[8:] + 0.3, n2[8:])) > 1e-3

    def test_invariants(self):
        rng = np.random.default_rng(3)
        for _ in range(200):
            F = solve_8pc(rng.normal(size=(8, 2)), rng.normal(size=(8, 2)))[0]
            assert abs(np.linalg.norm(F) - 1.0) < 1e-12
            assert abs(np.linalg.det(F)) < 1e-10

    def test_weights_scale_rows(self):
        item = _scene(n=20, seed=4, noise=1.0)
        F = solve_8pc(item.x1, item.x2)[0]
        Fw = solve_8pc(item.x1, item.x2, np.full(20, 3.0))[0]
        assert _gauge_dist(F, Fw) < 1e-10


class TestSevenPoint:
    def test_noise_free(self):
        item = _scene(n=207, seed=5)
        n1, n2 = item.normalized()
        Fs = solve_7pc(n1[:7], n2[:7])
        assert 1 <= len(Fs) <= 3
        assert min(np.max(_epi(F, n1[7:], n2[7:])) for F in Fs) < 1e-8

    def test_det_zero(self):
        rng = np.random.default_rng(6)
        for _ in range(200):
            for F in solve_7pc(rng.normal(size=(7, 2)), rng.normal(size=(7, 2))):
                assert abs(np.linalg.det(F)) < 1e-9

    def test_duplicate_point(self):
        item = _scene(n=7, seed=7)
        x1, x2 = item.x1.copy(), item.x2.copy()
        x1[1], x2[1] = x1[0], x2[0]
        with pytest.raises(DegenerateSampleError):
            solve_7pc(x1, x2)


class TestFivePoint:
    def test_recovers_ground_truth(self):
        for seed in range(20):
            item = _scene(kind="E", n=5, seed=seed)
            n1, n2 = item.normalized()
            Es = solve_5pc(n1, n2)
            assert len(Es) <= 10
            assert min(_gauge_dist(E, item.E) for E in Es) < 1e-6
            for E in Es:
                assert _epi(E, n1, n2).max() < 1e-8

    def test_solution_count_bound(self):
        rng = np.random.default_rng(8)
        for _ in range(300):
            try:
                Es = solve_5pc(rng.normal(size=(5, 2)), rng.normal(size=(5, 2)))
            except DegenerateSampleError:
                continue
            assert len(Es) <= 10
            for E in Es:
                s = np.linalg.svd(E, compute_uv=False)
                assert abs(s[0] - s[1]) < 1e-6 * s[0] and s[2] < 1e-6 * s[0]

    def test_projection(self):
        E = project_essential(np.random.default_rng(9).normal(size=(3, 3)))
        s = np.linalg.svd(E, compute_uv=False)
        np.testing.assert_allclose(s, [1.0, 1.0, 0.0], atol=1e-12)


class TestDecompose:
    def test_recovers_pose(self):
        item = _scene(kind="E", n=20, seed=10)
        n1, n2 = item.normalized()
        R, t = decompose_essential(item.E, n1, n2)
        assert rotation_error(R, item.R) < 1e-8
        np.testing.assert_allclose(t, item.t / np.linalg.norm(item.t), atol=1e-10)

    def test_sign_absorbed(self):
        item = _scene(kind="E", n=20, seed=11)
        n1, n2 = item.normalized()
        a = decompose_essential(item.E, n1, n2)
        b = decompose_essential(-item.E, n1, n2)
        np.testing.assert_allclose(a[0], b[0], atol=1e-12)
        np.testing.assert_allclose(a[1], b[1], atol=1e-12)

    def test_points_behind_cameras(self):
        item = _scene(kind="E", n=20, seed=12)
        n1, n2 = item.normalized()
        # half the points moved behind both cameras along their rays: those
        # favour the flipped-baseline candidate, so no pose wins a majority
        X = np.hstack([n1[10:], np.ones((10, 1))]) * -3.0
        Y = X @ item.R.T + item.t
        x1 = np.vstack([n1[:10], X[:, :2] / X[:, 2:]])
        x2 = np.vstack([n2[:10], Y[:, :2] / Y[:, 2:]])
        with pytest.raises(CheiralityError):
            decompose_essential(item.E, x1, x2)

    def test_refine_keeps_exact_model(self):
        item = _scene(kind="E", n=40, seed=13)
        n1, n2 = item.normalized()
        E = refine_essential(item.E, n1, n2)
        assert _gauge_dist(E, item.E) < 1e-8


class TestKabsch:
    def test_identity(self):
        P = np.random.default_rng(14).normal(size=(5, 3))
        R, t = solve_kabsch(P, P)
        np.testing.assert_allclose(R, np.eye(3), atol=1e-12)
        np.testing.assert_allclose(t, 0.0, atol=1e-12)

    def test_exact_transform(self):
        rng = np.random.default_rng(15)
        for _ in range(50):
            R0 = synthdata.random_rotation(rng, 180.0)
            t0 = rng.normal(size=3)
            P = rng.normal(size=(3, 3))
            R, t = solve_kabsch(P, P @ R0.T + t0)
            assert rotation_error(R, R0) < 1e-10
            np.testing.assert_allclose(t, t0, atol=1e-10)

    def test_noise_residual(self):
        rng = np.random.default_rng(16)
        k, sigma = 6, 0.01
        rms = []
        for _ in range(1000):
            P = rng.normal(size=(k, 3))
            Q = P @ synthdata.random_rotation(rng, 180.0).T + rng.normal(size=3) + sigma * rng.normal(size=(k, 3))
            R, t = solve_kabsch(P, Q)
            rms.append(np.mean(np.sum((P @ R.T + t - Q) ** 2, axis=1)))
        expected = sigma * np.sqrt(3 * (1 - 2 / k))
        assert abs(np.sqrt(np.mean(rms)) - expected) < 0.2 * expected

    def test_orthogonality(self):
        rng = np.random.default_rng(17)
        for _ in range(200):
            R, _ = solve_kabsch(rng.normal(size=(4, 3)), rng.normal(size=(4, 3)))
            np.testing.assert_allclose(R.T @ R, np.eye(3), atol=1e-12)
            assert abs(np.linalg.det(R) - 1.0) < 1e-12


class TestSelectBest:
    def test_singleton(self):
        assert select_best_algebraic([np.eye(3)], lambda m: 0.0) == 0

    def test_ties_lower_index(self):
        assert select_best_algebraic([1, 2, 3], lambda m: 1.0) == 0

    def test_ground_truth_among_random(self):
        from gransac import scoring

        item = _scene(kind="E", n=100, seed=18)
        n1, n2 = item.normalized()
        rng = np.random.default_rng(19)
        models = [project_essential(rng.normal(size=(3, 3))) for _ in range(9)]
        models.insert(4, item.E)
        sel = select_best_algebraic(
            models, lambda E: scoring.score_marginalized(scoring.residuals("E", E, n1, n2), 2e-3).score)
        assert sel == 4


class TestSolverGradients:
    def _check(self, solve_d, n_min, kind="F", seed=0, noise=0.3):
        item = _scene(kind=kind, n=n_min + 20, seed=seed, noise=noise)
        n1, n2 = item.normalized()
        held1, held2 = n1[n_min:], n2[n_min:]
        from gransac.scoring import residuals_d

        def f(z):
            z = np.asarray(z).reshape(n_min, 4)
            M = solve_d(z[:, :2], z[:, 2:])
            r = residuals_d("F", M, held1, held2)
            return diff.dsum(r) if np.asarray(z).dtype == object else float(np.sum(r))

        x = np.hstack([n1[:n_min], n2[:n_min]]).reshape(-1)
        return diff.grad_check(f, x, h=1e-7).max_rel_error

    def test_8pc(self):
        assert self._check(fundamental_8pc_d, 8) < 1e-4

    def test_7pc(self):
        def solve_d(a, b):
            Fs = solve_7pc(diff.value_of(a), diff.value_of(b))
            return fundamental_7pc_d(Fs[0], a, b)

        assert self._check(solve_d, 7, seed=3) < 1e-4

    def test_kabsch(self):
        rng = np.random.default_rng(20)
        P = rng.normal(size=(5, 3))
        Q = P @ synthdata.random_rotation(rng, 90.0).T + 0.01 * rng.normal(size=(5, 3))

        def f(z):
            z = np.asarray(z).reshape(5, 6)
            R, t = kabsch_d(z[:, :3], z[:, 3:])
            return diff.dsum(R.reshape(-1) * np.arange(9)) + t[0]

        assert diff.grad_check(f, np.hstack([P, Q]).reshape(-1)).max_rel_error < 1e-6
