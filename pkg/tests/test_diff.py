import zlib

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from gransac import diff, losses
from gransac.solvers import fundamental_8pc_d, kabsch_d
from gransac.scoring import residuals_d
from gransac import synthdata


def _grad1(f, x):
    tape = diff.Tape()
    v = tape.leaf(x)
    out = f(v)
    return out.value, tape.backward(out)[v.index]


def _fd(f, x, h=1e-6):
    return (f(x + h) - f(x - h)) / (2 * h)


class TestPrimitives:
    def test_square(self):
        assert _grad1(lambda x: x * x, 3.0)[1] == 6.0

    def test_acos_at_zero(self):
        np.testing.assert_allclose(_grad1(diff.acos, 0.0)[1], -1.0, rtol=1e-15)

    def test_sin_exp_composite(self):
        rng = np.random.default_rng(0)
        for x in rng.uniform(-3, 3, 50):
            _, g = _grad1(lambda v: diff.sin(v) * diff.exp(v), x)
            num = _fd(lambda v: np.sin(v) * np.exp(v), x)
            assert abs(g - num) / max(abs(num), 1e-8) < 1e-8 or abs(g - num) < 1e-9

    UNARY = {
        "sqrt": (diff.sqrt, np.sqrt, (0.1, 5.0)),
        "exp": (diff.exp, np.exp, (-3.0, 3.0)),
        "log": (diff.log, np.log, (0.1, 5.0)),
        "sin": (diff.sin, np.sin, (-3.0, 3.0)),
        "cos": (diff.cos, np.cos, (-3.0, 3.0)),
        "tan": (diff.tan, np.tan, (-1.2, 1.2)),
        "acos": (diff.acos, np.arccos, (-0.95, 0.95)),
        "pow": (lambda v: v ** 2.5, lambda v: v ** 2.5, (0.1, 3.0)),
        "div": (lambda v: 1.0 / v, lambda v: 1.0 / v, (0.5, 3.0)),
        "neg_sub": (lambda v: 2.0 - v * 3.0, lambda v: 2.0 - v * 3.0, (-2.0, 2.0)),
    }

    @pytest.mark.parametrize("name", sorted(UNARY))
    def test_unary_fd(self, name):
        fd_fn, np_fn, (lo, hi) = self.UNARY[name]
        rng = np.random.default_rng(zlib.crc32(name.encode()))
        for x in rng.uniform(lo, hi, 100):
            val, g = _grad1(fd_fn, x)
            assert val == pytest.approx(np_fn(x), rel=1e-14, abs=1e-14)
            num = _fd(np_fn, x, 1e-5)
            assert abs(g - num) / max(1.0, abs(num)) < 1e-7

    def test_atan2_fd(self):
        rng = np.random.default_rng(1)
        for y, x in rng.normal(size=(100, 2)):
            tape = diff.Tape()
            a, b = tape.leaf(y), tape.leaf(x)
            out = diff.atan2(a, b)
            adj = tape.backward(out)
            h = 1e-6
            gy = (np.arctan2(y + h, x) - np.arctan2(y - h, x)) / (2 * h)
            gx = (np.arctan2(y, x + h) - np.arctan2(y, x - h)) / (2 * h)
            np.testing.assert_allclose([adj[a.index], adj[b.index]], [gy, gx], rtol=1e-7, atol=1e-9)

    def test_min_max_ties_lower_index(self):
        tape = diff.Tape()
        a, b = tape.leaf(1.0), tape.leaf(1.0)
        adj = tape.backward(diff.minimum(a, b))
        assert (adj[a.index], adj[b.index]) == (1.0, 0.0)
        adj = tape.backward(diff.maximum(a, b))
        assert (adj[a.index], adj[b.index]) == (1.0, 0.0)

    def test_acos_clamped_near_one(self):
        tape = diff.Tape()
        x = tape.leaf(1.0 + 5e-10)
        out = diff.acos(x)
        assert out.value == 0.0
        assert np.isfinite(tape.backward(out)[x.index])

    def test_acos_out_of_range(self):
        with pytest.raises(Exception):
            diff.acos(diff.Tape().leaf(1.1))


class TestBackward:
    def test_leaf(self):
        tape = diff.Tape()
        x = tape.leaf(2.0)
        assert tape.backward(x)[x.index] == 1.0

    def test_sum_of_squares(self):
        tape = diff.Tape()
        xs = tape.leaves(np.ones(10))
        loss = diff.dsum(x * x for x in xs)
        np.testing.assert_array_equal(tape.gradient(loss, xs), 2.0)

    @settings(max_examples=50, deadline=None)
    @given(st.floats(-3, 3), st.floats(-3, 3), st.lists(st.floats(-2, 2), min_size=3, max_size=3))
    def test_linearity(self, a, b, x):
        tape = diff.Tape()
        v = tape.leaves(np.array(x))
        f = diff.sin(v[0]) * v[1] + v[2] * v[2]
        g = diff.exp(v[0]) - v[1] * v[2]
        gf, gg = tape.gradient(f, v), tape.gradient(g, v)
        h = a * f + b * g
        assert np.array_equal(tape.gradient(h, v), a * gf + b * gg) or np.allclose(
            tape.gradient(h, v), a * gf + b * gg, rtol=1e-15, atol=1e-15)

    def test_replay_determinism(self):
        def run():
            tape = diff.Tape()
            v = tape.leaves(np.array([0.3, -1.2, 2.0]))
            out = diff.dsum(diff.softmax(list(v))[i] * v[i] for i in range(3))
            return tape.gradient(out, v)

        assert run().tobytes() == run().tobytes()

    def test_loss_not_on_tape(self):
        tape = diff.Tape()
        tape.leaf(1.0)
        np.testing.assert_array_equal(tape.backward(3.0), 0.0)

    def test_custom_duplicate_parents_merge(self):
        tape = diff.Tape()
        x = tape.leaf(2.0)
        (y,) = tape.custom("twice", [4.0], [x, x], np.array([[1.0, 1.0]]))
        assert tape.backward(y)[x.index] == 2.0

    def test_mixed_tapes_rejected(self):
        a, b = diff.Tape().leaf(1.0), diff.Tape().leaf(1.0)
        with pytest.raises(diff.TapeError):
            _ = a + b

    def test_push_rows_constants(self):
        tape = diff.Tape()
        x = tape.leaf(1.0)
        (y,) = tape.push_rows("r", [5.0], [[x.index, -1]], [[3.0, 7.0]])
        assert tape.backward(y)[x.index] == 3.0


class TestStraightThrough:
    def test_value_and_gradient(self):
        tape = diff.Tape()
        x = tape.leaf(np.log(0.7 / 0.3))
        sig = 1.0 / (1.0 + diff.exp(-x))
        assert sig.value == pytest.approx(0.7)
        out = diff.straight_through(1.0, sig)
        assert out.value == 1.0
        np.testing.assert_allclose(tape.backward(out)[x.index], 0.7 * 0.3, rtol=1e-12)

    def test_identity_when_equal(self):
        tape = diff.Tape()
        x = tape.leaf(0.4)
        s = x * x
        out = diff.straight_through(s, s)
        assert out.value == s.value
        assert tape.backward(out)[x.index] == tape.backward(s)[x.index]

    def test_one_hot_softmax_jacobian(self):
        rng = np.random.default_rng(2)
        s = rng.normal(size=5)
        tau = 0.7
        tape = diff.Tape()
        v = tape.leaves(s)
        y = diff.softmax(list(v), tau)
        onehot = np.eye(5)[2]
        Y = [diff.straight_through(onehot[m], y[m]) for m in range(5)]
        np.testing.assert_array_equal([o.value for o in Y], onehot)
        p = np.exp(s / tau) / np.exp(s / tau).sum()
        J = (np.diag(p) - np.outer(p, p)) / tau
        got = np.array([tape.gradient(o, v) for o in Y])
        np.testing.assert_allclose(got, J, atol=1e-12)


class TestGradCheck:
    def test_cube(self):
        assert diff.grad_check(lambda x: x[0] ** 3, np.array([2.0])).max_rel_error < 1e-9

    def test_eight_point_residual_loss(self):
        item = synthdata.generate(synthdata.SceneSpec(kind="F", n=20, noise=0.5, seed=1))
        x = np.hstack([item.x1[:8], item.x2[:8]]).reshape(-1)
        held1, held2 = item.x1[8:], item.x2[8:]

        def f(z):
            z = np.asarray(z).reshape(8, 4)
            F = fundamental_8pc_d(z[:, :2], z[:, 2:])
            return diff.dsum(residuals_d("F", F, held1, held2)) if z.dtype == object else \
                float(np.sum(residuals_d("F", F, held1, held2)))

        assert diff.grad_check(f, x, h=1e-4).max_rel_error < 1e-4

    def test_kabsch_rotation_error(self):
        rng = np.random.default_rng(3)
        P = rng.normal(size=(6, 3))
        R = synthdata.rotation_about([0.2, 1.0, 0.3], 0.8)
        Q = P @ R.T + 0.05 * rng.normal(size=(6, 3))

        def f(z):
            z = np.asarray(z).reshape(6, 6)
            Rh, _ = kabsch_d(z[:, :3], z[:, 3:])
            return losses.rotation_error(Rh, R)

        assert diff.grad_check(f, np.hstack([P, Q]).reshape(-1)).max_rel_error < 1e-4
