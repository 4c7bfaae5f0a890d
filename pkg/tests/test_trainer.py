import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.special import softmax

from gransac import engine, synthdata, trainer


def _items(count=4, n=30, w=0.5, noise=1.0, seed=0, kind="E"):
    spec = synthdata.SceneSpec(kind=kind, n=n, inlier_ratio=w, noise=noise, seed=seed)
    est = engine.EstimationConfig(kind=kind)
    return [trainer.TrainItem.from_item(it, est) for it in synthdata.generate_dataset(spec, count)]


def _config(**kw):
    est = engine.EstimationConfig(kind="E", train_iterations=4)
    return trainer.TrainConfig(estimation=est, **kw)


class TestInitKL:
    def test_equal_residuals_uniform(self):
        item = _items(1, n=12, w=1.0, noise=0.0)[0]
        s = trainer.init_kl(item.problem, item.gt)
        np.testing.assert_allclose(softmax(s), np.full(12, 1 / 12), atol=1e-9)

    def test_concentrates_on_perfect_point(self):
        item = _items(1, n=12, w=1.0, noise=0.0)[0]
        # one exact point, the others pushed off the epipolar geometry
        x2 = item.problem.x2.copy()
        x2[1:] += 40.0
        problem = engine.Problem("E", item.problem.x1, x2, item.problem.K1, item.problem.K2)
        s = trainer.init_kl(problem, item.gt, tau_init=1e-4)
        assert softmax(s)[0] > 0.99

    def test_zero_divergence(self):
        for item in _items(3, noise=1.0):
            q = trainer.kl_target(item.problem, item.gt)
            s = trainer.init_kl(item.problem, item.gt)
            assert abs(trainer.kl_divergence(q, s)) < 1e-12

    def test_affine_fit_is_optimal(self):
        items = _items(6, n=40, w=0.4)
        theta = trainer.fit_affine_kl(items)

        def total(th):
            return sum(trainer.kl_divergence(trainer.kl_target(it.problem, it.gt),
                                             trainer.affine_scores(th, it.side)) for it in items)

        base = total(theta)
        rng = np.random.default_rng(0)
        for _ in range(10):
            assert total(theta + 1e-3 * rng.normal(size=theta.shape)) >= base - 1e-9


class TestClipping:
    @settings(max_examples=200, deadline=None)
    @given(st.lists(st.floats(-1e6, 1e6), min_size=1, max_size=20), st.floats(1e-6, 1e3))
    def test_norm_bounded(self, values, clip):
        g, norm = trainer.clip_global_norm(np.array(values), clip)
        assert np.linalg.norm(g) <= clip + 1e-12
        assert norm == pytest.approx(np.linalg.norm(values))

    def test_small_gradient_untouched(self):
        g, _ = trainer.clip_global_norm(np.array([0.1, 0.2]), 1.0)
        np.testing.assert_array_equal(g, [0.1, 0.2])


class TestTraining:
    def test_zero_lr_unchanged(self):
        items = _items(3)
        config = _config(lr=0.0)
        state = trainer.TrainState.create(items, config)
        before = [p.copy() for p in state.params]
        _, report = trainer.train(items, config, epochs=2, state=state)
        for a, b in zip(before, state.params):
            np.testing.assert_array_equal(a, b)
        v0 = trainer.validation_objective(items, state, config)
        v1 = trainer.validation_objective(items, state, config)
        assert v0 == v1
        assert state.epoch == 2

    def test_report_rates(self):
        items = _items(3)
        _, report = trainer.train(items, _config(lr=0.01), epochs=2)
        for e in report.epochs:
            assert 0.0 <= e.valid_rate <= 1.0
            assert 0.0 <= e.inlier_mass <= 1.0
            assert 0.0 <= e.all_inlier_probability <= 1.0
            assert e.trained + e.skipped_invalid + e.skipped_nan == 3

    def test_deterministic(self):
        items = _items(3)
        config = _config(lr=0.01, seed=5)
        s1, r1 = trainer.train(items, config, epochs=2)
        s2, r2 = trainer.train(items, config, epochs=2)
        assert [e.to_dict() for e in r1.epochs] == [e.to_dict() for e in r2.epochs]
        for a, b in zip(s1.params, s2.params):
            np.testing.assert_array_equal(a, b)

    def test_affine_shares_one_block(self):
        items = _items(3)
        config = _config(lr=0.01, scorer="affine")
        state, _ = trainer.train(items, config, epochs=1)
        assert len(state.params) == 1 and state.steps[0] == 3
        assert np.all(np.isfinite(state.params[0]))

    def test_affine_param_grad(self):
        items = _items(1)
        config = _config(scorer="affine")
        state = trainer.TrainState.create(items, config)
        g = np.random.default_rng(1).normal(size=items[0].problem.n)
        theta = state.params[0]
        v = np.random.default_rng(2).normal(size=theta.shape)
        eps = 1e-6
        num = (g @ trainer.affine_scores(theta + eps * v, items[0].side)
               - g @ trainer.affine_scores(theta - eps * v, items[0].side)) / (2 * eps)
        assert state.param_grad(g, items[0]) @ v == pytest.approx(num, rel=1e-7)

    def test_adam_step_size(self):
        items = _items(1)
        config = _config(lr=0.1)
        state = trainer.TrainState.create(items, config)
        p0 = state.params[0].copy()
        grad = np.zeros_like(p0)
        grad[0] = 0.5
        state.step(0, grad, config)
        # first bias-corrected Adam step moves each active coordinate by lr
        assert p0[0] - state.params[0][0] == pytest.approx(0.1, rel=1e-6)
        np.testing.assert_array_equal(state.params[0][1:], p0[1:])

    def test_nonfinite_update_raises(self):
        items = _items(1)
        config = _config(lr=0.1)
        state = trainer.TrainState.create(items, config)
        state.params[0] = state.params[0] + np.inf
        with pytest.raises(trainer.TrainingError):
            state.step(0, np.ones_like(state.params[0]), config)

    def test_empty_dataset(self):
        with pytest.raises(trainer.TrainingError):
            trainer.train([], _config(), epochs=1)

    def test_config_validation(self):
        with pytest.raises(ValueError):
            _config(scorer="mlp")
        with pytest.raises(ValueError):
            _config(clip_norm=0.0)


class TestSamplingEfficiency:
    def test_uniform_matches_analytic(self):
        rng = np.random.default_rng(0)
        masks = [rng.permutation(np.arange(40) < 20) for _ in range(5)]
        eff = trainer.eval_sampling_efficiency([np.zeros(40)] * 5, masks, k=3, draws=10_000, trials=20, horizon=200)
        p = math.comb(20, 3) / math.comb(40, 3)
        assert eff.analytic_uniform == pytest.approx(p)
        sigma = math.sqrt(p * (1 - p) / 50_000)
        assert abs(eff.weighted - p) < 3 * sigma
        assert abs(eff.uniform - p) < 3 * sigma

    def test_oracle_scores(self):
        mask = np.arange(40) < 10
        s = np.where(mask, 0.0, -1e3)
        eff = trainer.eval_sampling_efficiency([s], [mask], k=5, draws=10_000, trials=20, horizon=100)
        assert eff.weighted == 1.0
        assert np.all(eff.first_success == 1)
        assert eff.ratio > 100

    def test_first_success(self):
        ok = np.array([[False, True, True], [False, False, False], [True, False, False]])
        np.testing.assert_array_equal(trainer._first_success(ok), [2, 0, 1])

    def test_all_inlier_probability(self):
        mask = np.arange(20) < 10
        assert trainer.all_inlier_probability(np.where(mask, 0.0, -1e3), mask, 4) == 1.0
        assert trainer.all_inlier_probability(np.where(mask, -1e3, 0.0), mask, 4) == 0.0


class TestCheckpoint:
    def test_round_trip(self, tmp_path):
        items = _items(2)
        config = _config(lr=0.01)
        state, _ = trainer.train(items, config, epochs=1)
        path = tmp_path / "ck.npz"
        trainer.save_checkpoint(path, state, config)
        back = trainer.load_checkpoint(path, config)
        assert back.scorer == state.scorer and back.epoch == state.epoch and back.steps == state.steps
        for a, b in zip(state.params + state.m + state.v, back.params + back.m + back.v):
            np.testing.assert_array_equal(a, b)

    def test_resume_equals_continuous(self, tmp_path):
        items = _items(2)
        config = _config(lr=0.01)
        full, _ = trainer.train(items, config, epochs=2)
        half, _ = trainer.train(items, config, epochs=1)
        path = tmp_path / "ck.npz"
        trainer.save_checkpoint(path, half, config)
        resumed, _ = trainer.train(items, config, epochs=1, state=trainer.load_checkpoint(path, config))
        for a, b in zip(full.params, resumed.params):
            np.testing.assert_array_equal(a, b)

    def test_hash_mismatch_refused(self, tmp_path):
        items = _items(1)
        config = _config(lr=0.01)
        state = trainer.TrainState.create(items, config)
        path = tmp_path / "ck.npz"
        trainer.save_checkpoint(path, state, config)
        with pytest.raises(trainer.TrainingError):
            trainer.load_checkpoint(path, _config(lr=0.02))
        assert trainer.read_checkpoint(path).epoch == 0

    def test_digest_ignores_threads(self):
        a = trainer.TrainConfig(estimation=engine.EstimationConfig(kind="E", threads=1))
        b = trainer.TrainConfig(estimation=engine.EstimationConfig(kind="E", threads=4))
        assert a.digest() == b.digest()


class TestItemSeed:
    def test_stable_and_distinct(self):
        assert trainer.item_seed(0, 1, 2) == trainer.item_seed(0, 1, 2)
        assert trainer.item_seed(0, 1, 2) != trainer.item_seed(0, 2, 1)
        assert 0 <= trainer.item_seed(123, 4) < 2**63
