import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from gransac import diff, losses, metrics, scoring, synthdata


def _rot_z(deg):
    a = math.radians(deg)
    return np.array([[math.cos(a), -math.sin(a), 0], [math.sin(a), math.cos(a), 0], [0, 0, 1.0]])


class TestAngles:
    def test_zero(self):
        R = synthdata.random_rotation(np.random.default_rng(0), 90)
        assert losses.rotation_angle(R, R) == 0.0

    def test_thirty_degrees(self):
        R = synthdata.random_rotation(np.random.default_rng(1), 90)
        assert abs(losses.rotation_angle(R @ _rot_z(30.0), R) - 30.0) < 1e-10
        assert abs(float(losses.rotation_error(R @ _rot_z(30.0), R)) - 30.0) < 1e-10

    def test_antipodal_translation(self):
        t = np.array([0.3, -1.0, 2.0])
        assert losses.translation_angle(-t, t) == pytest.approx(180.0)
        assert float(losses.translation_error(-t, t)) == pytest.approx(180.0)

    def test_small_angle_accuracy(self):
        R = synthdata.random_rotation(np.random.default_rng(2), 90)
        assert losses.rotation_angle(R @ _rot_z(1e-9), R) == pytest.approx(1e-9, rel=1e-5)

    @settings(max_examples=50, deadline=None)
    @given(st.integers(0, 10**6))
    def test_rotation_symmetry_and_invariance(self, seed):
        rng = np.random.default_rng(seed)
        A, B, C = (synthdata.random_rotation(rng, 180.0) for _ in range(3))
        assert losses.rotation_angle(A, B) == pytest.approx(losses.rotation_angle(B, A), abs=1e-9)
        assert losses.rotation_angle(C @ A, C @ B) == pytest.approx(losses.rotation_angle(A, B), abs=1e-9)

    @settings(max_examples=50, deadline=None)
    @given(st.lists(st.floats(-5, 5), min_size=6, max_size=6), st.floats(0.1, 10), st.floats(0.1, 10))
    def test_translation_scale_invariance(self, v, a, b):
        t1, t2 = np.array(v[:3]), np.array(v[3:])
        if np.linalg.norm(t1) < 1e-3 or np.linalg.norm(t2) < 1e-3:
            return
        assert losses.translation_angle(a * t1, b * t2) == pytest.approx(losses.translation_angle(t1, t2), abs=1e-9)


class TestPoseLoss:
    def test_exact(self):
        R = synthdata.random_rotation(np.random.default_rng(3), 40)
        t = np.array([1.0, 0.2, 0.1])
        assert float(losses.pose_loss(R, t, R, t)) == pytest.approx(0.0, abs=1e-5)

    def test_constructed(self):
        R = np.eye(3)
        t = np.array([1.0, 0.0, 0.0])
        t_hat = np.array([math.cos(math.radians(20)), math.sin(math.radians(20)), 0.0])
        assert float(losses.pose_loss(_rot_z(10.0), t_hat, R, t)) == pytest.approx(15.0, abs=1e-10)

    def test_nonnegative_and_direction_only(self):
        rng = np.random.default_rng(4)
        R = synthdata.random_rotation(rng, 90)
        t = rng.normal(size=3)
        assert float(losses.pose_loss(R, 3.0 * t, R, t)) < 1e-5
        assert float(losses.pose_loss(synthdata.random_rotation(rng, 90), rng.normal(size=3), R, t)) > 0

    def test_grad_check(self):
        rng = np.random.default_rng(5)
        R, t = synthdata.random_rotation(rng, 90), rng.normal(size=3)
        R_hat = synthdata.random_rotation(rng, 90)
        x = np.concatenate([R_hat.reshape(-1), rng.normal(size=3)])

        def f(z):
            z = np.asarray(z)
            return losses.pose_loss(z[:9].reshape(3, 3), z[9:], R, t)

        assert diff.grad_check(f, x).max_rel_error < 1e-4


class TestEpipolarLoss:
    def test_ground_truth(self):
        item = synthdata.generate(synthdata.SceneSpec(kind="F", n=50, seed=6))
        assert float(losses.epipolar_loss("F", item.F, item.x1, item.x2, np.ones(50, bool))) < 1e-8

    def test_single_inlier(self):
        rng = np.random.default_rng(7)
        F, x1, x2 = rng.normal(size=(3, 3)), rng.normal(size=(5, 2)), rng.normal(size=(5, 2))
        mask = np.eye(5, dtype=bool)[2]
        assert float(losses.epipolar_loss("F", F, x1, x2, mask)) == scoring.residuals("F", F, x1, x2)[2]

    def test_brute_mean(self):
        rng = np.random.default_rng(8)
        F, x1, x2 = rng.normal(size=(3, 3)), rng.normal(size=(80, 2)), rng.normal(size=(80, 2))
        mask = np.arange(80) < 50
        expect = np.mean(scoring.residuals("F", F, x1, x2)[mask])
        assert float(losses.epipolar_loss("F", F, x1, x2, mask)) == pytest.approx(expect, rel=1e-12)


class TestCombined:
    def test_weights(self):
        assert losses.combined_loss(10.0, 2.0, losses.LossWeights(1, 0)) == 10.0
        assert losses.combined_loss(10.0, 2.0, losses.LossWeights(0, 1)) == 2.0
        assert losses.combined_loss(10.0, 2.0, losses.LossWeights(0.5, 0.5)) == 6.0

    def test_gradient_linearity(self):
        tape = diff.Tape()
        x = tape.leaves(np.array([0.3, 1.2]))
        lp = diff.sin(x[0]) * x[1]
        le = x[0] * x[0] + diff.exp(x[1])
        w = losses.LossWeights(0.7, 1.9)
        got = tape.gradient(losses.combined_loss(lp, le, w), x)
        np.testing.assert_allclose(got, 0.7 * tape.gradient(lp, x) + 1.9 * tape.gradient(le, x), rtol=1e-15)

    def test_invalid_weights(self):
        with pytest.raises(ValueError):
            losses.LossWeights(0, 0)


class TestMetrics:
    def test_f1(self):
        m = np.array([1, 0, 1, 1], bool)
        assert metrics.f1_score(m, m) == 1.0
        assert metrics.f1_score(~m, m) == 0.0
        assert metrics.f1_score(np.array([1, 1, 0, 0], bool), m) == pytest.approx(2 * 0.5 * (1 / 3) / (0.5 + 1 / 3))

    def test_auc_perfect(self):
        assert metrics.pose_auc(np.zeros(5)) == {5.0: 1.0, 10.0: 1.0, 20.0: 1.0}

    def test_auc_fine_grid(self):
        errs = np.array([2.0, 8.0])
        grid = np.linspace(0, 10, 2_000_001)
        recall = (errs[None, :] <= grid[:, None]).mean(axis=1)
        brute = np.trapezoid(recall, grid) / 10.0
        assert metrics.pose_auc(errs, (10.0,))[10.0] == pytest.approx(brute, abs=1e-6)

    @settings(max_examples=100, deadline=None)
    @given(st.lists(st.floats(0, 90), min_size=1, max_size=40))
    def test_auc_monotone(self, errs):
        a = metrics.pose_auc(errs)
        assert a[5.0] <= a[10.0] + 1e-15 and a[10.0] <= a[20.0] + 1e-15
        assert all(0.0 <= v <= 1.0 for v in a.values())

    def test_cdf(self):
        np.testing.assert_allclose(metrics.error_cdf([1, 2, 3, 4], [0.5, 2, 10]), [0, 0.5, 1.0])

    def test_registration(self):
        rng = np.random.default_rng(9)
        R = synthdata.random_rotation(rng, 90)
        t = rng.normal(size=3)
        P = rng.normal(size=(20, 3))
        e = metrics.registration_errors(R, t + [0.0, 0.0, 0.1], R, t, P)
        assert e["rre"] == 0.0
        assert e["rte"] == pytest.approx(0.1)
        assert e["rmse"] == pytest.approx(0.1)
        assert metrics.registration_recall([0.1, 0.3, 0.05, np.inf]) == 0.5
