import numpy as np
import pytest

from conftest import check_grad_fd
from radsynth import autodiff as ad
from radsynth import nets, train
from radsynth.errors import ConfigError, ShapeError, TrainingAbort


class TestPresets:
    def test_table_rows(self):
        m1 = train.TrainConfig.from_preset("M1")
        assert (m1.image_size, m1.critic_iters, m1.epochs, m1.denoise) == (256, 2, 550, False)
        m2 = train.TrainConfig.from_preset("M2")
        assert (m2.image_size, m2.critic_iters, m2.epochs, m2.denoise) == (256, 1, 150, True)
        m3 = train.TrainConfig.from_preset("M3")
        assert (m3.image_size, m3.critic_iters, m3.epochs, m3.denoise) == (256, 4, 250, True)
        m4 = train.TrainConfig.from_preset("M4")
        assert (m4.image_size, m4.critic_iters, m4.epochs, m4.denoise) == (256, 5, 100, True)

    def test_unknown_preset(self):
        with pytest.raises(ConfigError):
            train.TrainConfig.from_preset("M9")

    def test_invalid_config(self):
        with pytest.raises(ConfigError):
            train.TrainConfig(critic_iters=0).validate()
        with pytest.raises(ConfigError):
            train.TrainConfig(gp_lambda=-1).validate()
        with pytest.raises(ConfigError):
            train.TrainConfig(batch_size=1).validate()


class TestInterpolate:
    def test_endpoints_and_midpoint(self, rng):
        real = rng.normal(size=(4, 1, 3, 3))
        fake = rng.normal(size=(4, 1, 3, 3))
        ones = np.ones(4)
        np.testing.assert_allclose(
            train.interpolate_samples(real, fake, ones).data, real)
        np.testing.assert_allclose(
            train.interpolate_samples(real, fake, np.zeros(4)).data, fake)
        mid = train.interpolate_samples(np.full((2, 2), 2.0), np.zeros((2, 2)),
                                        np.full(2, 0.5))
        np.testing.assert_allclose(mid.data, 1.0)

    def test_shape_mismatch(self, rng):
        with pytest.raises(ShapeError):
            train.interpolate_samples(rng.normal(size=(2, 3)), rng.normal(size=(2, 4)),
                                      np.full(2, 0.5))

    def test_eps_range(self, rng):
        x = rng.normal(size=(2, 3))
        with pytest.raises(ConfigError):
            train.interpolate_samples(x, x, np.array([0.5, 1.5]))


def linear_critic(w):
    wt = ad.Tensor(np.asarray(w, dtype=np.float64).reshape(-1, 1), requires_grad=True)
    return (lambda x: ad.matmul(x, wt)), wt


class TestGradientPenalty:
    def test_linear_critic_analytic(self, rng):
        """For D(x) = w.x the input gradient is w everywhere, so the
        penalty is exactly lambda * (||w|| - 1)^2."""
        for _ in range(5):
            w = rng.normal(size=6)
            critic, _ = linear_critic(w)
            real = rng.normal(size=(8, 6))
            fake = rng.normal(size=(8, 6))
            for lam in (0.0, 1.0, 10.0):
                gp = train.gradient_penalty(critic, real, fake, lam, rng)
                expect = lam * (np.linalg.norm(w) - 1.0) ** 2
                assert abs(gp.item() - expect) <= 1e-6

    def test_unit_norm_gives_zero(self, rng):
        w = rng.normal(size=5)
        w /= np.linalg.norm(w)
        critic, _ = linear_critic(w)
        gp = train.gradient_penalty(critic, rng.normal(size=(4, 5)),
                                    rng.normal(size=(4, 5)), 10.0, rng)
        assert abs(gp.item()) <= 1e-6

    def test_lambda_zero(self, rng):
        critic, _ = linear_critic(rng.normal(size=4))
        gp = train.gradient_penalty(critic, rng.normal(size=(4, 4)),
                                    rng.normal(size=(4, 4)), 0.0, rng)
        assert gp.item() == 0.0

    def test_nonnegative(self, rng):
        for seed in range(4):
            critic, _ = linear_critic(rng.normal(size=3) * (seed + 0.2))
            gp = train.gradient_penalty(critic, rng.normal(size=(6, 3)),
                                        rng.normal(size=(6, 3)), 7.0, seed)
            assert gp.item() >= 0.0

    def test_backprops_into_critic_params(self, rng):
        critic, wt = linear_critic(rng.normal(size=4))
        gp = train.gradient_penalty(critic, rng.normal(size=(6, 4)),
                                    rng.normal(size=(6, 4)), 10.0, rng)
        g = ad.grad(gp, wt)
        w = wt.data.reshape(-1)
        expect = 10.0 * 2 * (np.linalg.norm(w) - 1.0) * w / np.linalg.norm(w)
        np.testing.assert_allclose(g.data.reshape(-1), expect, rtol=1e-6)


class StubCritic:
    """Returns canned scores for the exact real/fake arrays it was built
    with, and a linear map for anything else (the GP interpolates), so the
    penalty term stays fixed while scores shift."""

    def __init__(self, real, fake, real_scores, fake_scores, w):
        self.real = real
        self.fake = fake
        self.real_scores = np.asarray(real_scores, dtype=np.float64)
        self.fake_scores = np.asarray(fake_scores, dtype=np.float64)
        self.w = ad.Tensor(np.asarray(w, dtype=np.float64).reshape(-1, 1))

    def __call__(self, x):
        if x.data.shape == self.real.shape and np.array_equal(x.data, self.real):
            return ad.Tensor(self.real_scores)
        if x.data.shape == self.fake.shape and np.array_equal(x.data, self.fake):
            return ad.Tensor(self.fake_scores)
        return ad.matmul(x, self.w)


class TestCriticLoss:
    def test_sign_convention(self, rng):
        real = rng.normal(size=(5, 3))
        fake = rng.normal(size=(5, 3)) + 10.0
        critic = StubCritic(real, fake, np.ones(5), np.zeros(5), rng.normal(size=3))
        loss = train.critic_loss(critic, real, fake, 0.0, rng)
        assert loss.item() == pytest.approx(-1.0)

    def test_constant_critic_leaves_only_gp(self, rng):
        w = rng.normal(size=3)
        real = rng.normal(size=(6, 3))
        fake = rng.normal(size=(6, 3))
        critic = StubCritic(real, fake, np.full(6, 4.2), np.full(6, 4.2), w)
        loss = train.critic_loss(critic, real, fake, 10.0, rng)
        expect_gp = 10.0 * (np.linalg.norm(w) - 1.0) ** 2
        assert loss.item() == pytest.approx(expect_gp, abs=1e-6)

    def test_raising_real_scores_lowers_loss_by_delta(self, rng):
        """Sign contract: +delta on every real score means -delta on the
        loss, with the GP pinned by the stub's fixed interpolate map."""
        real = rng.normal(size=(5, 3))
        fake = rng.normal(size=(5, 3))
        w = rng.normal(size=3)
        rs = rng.normal(size=5)
        fs = rng.normal(size=5)
        delta = 0.73
        base = train.critic_loss(StubCritic(real, fake, rs, fs, w), real, fake, 10.0, 3)
        raised = train.critic_loss(StubCritic(real, fake, rs + delta, fs, w), real, fake, 10.0, 3)
        assert raised.item() - base.item() == pytest.approx(-delta, abs=1e-9)

    def test_batch_size_mismatch(self, rng):
        critic, _ = linear_critic(rng.normal(size=3))
        with pytest.raises(ShapeError):
            train.critic_loss(critic, rng.normal(size=(4, 3)), rng.normal(size=(5, 3)),
                              1.0, rng)

    def test_param_gradient_matches_fd(self, rng):
        """Double-backward path: d(critic_loss)/d(params) against central
        differences on a small conv critic."""
        critic = nets.build_critic(nets.CriticConfig(input_size=32, base_features=2),
                                   seed=5, dtype=np.float64)
        real = rng.normal(size=(3, 1, 32, 32)) * 0.5
        fake = rng.normal(size=(3, 1, 32, 32)) * 0.5
        params = critic.parameters()
        check_grad_fd(lambda: train.critic_loss(critic, real, fake, 10.0, 11),
                      params.tensors(), rng, probes=3, rtol=1e-3)


class TestGeneratorLoss:
    def test_values(self):
        assert train.generator_loss(ad.Tensor(np.full(4, 2.0))).item() == -2.0
        assert train.generator_loss(ad.Tensor(np.zeros(3))).item() == 0.0

    def test_per_score_gradient(self, rng):
        scores = ad.Tensor(rng.normal(size=6), requires_grad=True)
        g = ad.grad(train.generator_loss(scores), scores)
        np.testing.assert_allclose(g.data, np.full(6, -1.0 / 6.0), atol=1e-12)

    def test_empty_batch(self):
        with pytest.raises(ShapeError):
            train.generator_loss(ad.Tensor(np.zeros((0,))))


class TestAdam:
    def _store(self, value):
        p = ad.Tensor(np.asarray(value, dtype=np.float64), requires_grad=True)
        return nets.ParameterStore([("p", p)]), p

    def test_zero_gradient_no_change(self):
        store, p = self._store([1.5, -2.0])
        before = p.data.copy()
        train.adam_step(store, [ad.Tensor(np.zeros(2))], train.OptimizerState())
        np.testing.assert_array_equal(p.data, before)

    def test_hand_derived_single_step(self):
        store, p = self._store([1.0])
        train.adam_step(store, [ad.Tensor(np.array([1.0]))], train.OptimizerState(),
                        lr=0.1, beta1=0.0, beta2=0.9, eps=1e-8)
        m_hat = 1.0
        v_hat = (0.1 * 1.0) / (1 - 0.9)
        expect = 1.0 - 0.1 * m_hat / (np.sqrt(v_hat) + 1e-8)
        assert abs(p.data[0] - expect) <= 1e-12

    def test_converges_on_quadratic(self):
        store, p = self._store([0.0])
        state = train.OptimizerState()
        for _ in range(500):
            g = 2.0 * (p.data - 3.0)
            train.adam_step(store, [ad.Tensor(g)], state, lr=0.05, beta1=0.9, beta2=0.999)
        assert abs(p.data[0] - 3.0) < 1e-2

    def test_nan_gradient_aborts_with_name(self):
        store, _ = self._store([1.0])
        with pytest.raises(TrainingAbort, match="p"):
            train.adam_step(store, [ad.Tensor(np.array([np.nan]))], train.OptimizerState())


class CountingDataset(train.ArrayDataset):
    def __init__(self, images):
        super().__init__(images)
        self.batch_calls = 0

    def batch(self, indices):
        self.batch_calls += 1
        return super().batch(indices)


def toy_dataset(n=24, size=32, seed=0):
    rng = np.random.default_rng(seed)
    return rng.normal(0, 0.4, size=(n, 1, size, size)).clip(-1, 1).astype(np.float32)


SMALL_GEN = nets.GeneratorConfig(noise_channels=16, target_size=32, base_features=4)
SMALL_CRITIC = nets.CriticConfig(input_size=32, base_features=4)


class TestRunTraining:
    def test_critic_iters_schedule(self):
        """Preset M2 semantics: exactly one critic update (one real batch)
        per generator step."""
        ds = CountingDataset(toy_dataset())
        cfg = train.TrainConfig(image_size=32, critic_iters=1, epochs=2, batch_size=8,
                                seed=0, max_steps=4, gp_lambda=1.0)
        result = train.run_training(cfg, ds, SMALL_GEN, SMALL_CRITIC)
        assert ds.batch_calls == 4 * 1
        assert len(result.log) == 4
        ds = CountingDataset(toy_dataset())
        cfg = train.TrainConfig(image_size=32, critic_iters=3, epochs=10, batch_size=8,
                                seed=0, max_steps=2, gp_lambda=1.0)
        train.run_training(cfg, ds, SMALL_GEN, SMALL_CRITIC)
        assert ds.batch_calls == 2 * 3

    def test_bit_reproducible(self):
        ds = train.ArrayDataset(toy_dataset())
        cfg = train.TrainConfig(image_size=32, critic_iters=2, epochs=5, batch_size=8,
                                seed=123, max_steps=6)
        log1 = train.run_training(cfg, ds, SMALL_GEN, SMALL_CRITIC).log
        log2 = train.run_training(cfg, ds, SMALL_GEN, SMALL_CRITIC).log
        assert [vars(r) for r in log1.records] == [vars(r) for r in log2.records]

    def test_dataset_smaller_than_batch(self):
        ds = train.ArrayDataset(toy_dataset(n=4))
        cfg = train.TrainConfig(image_size=32, batch_size=8, epochs=1, critic_iters=1)
        with pytest.raises(ConfigError):
            train.run_training(cfg, ds, SMALL_GEN, SMALL_CRITIC)

    def test_divergence_aborts(self):
        ds = train.ArrayDataset(toy_dataset())
        cfg = train.TrainConfig(image_size=32, critic_iters=1, epochs=50, batch_size=8,
                                seed=0, lr=1e12, max_steps=50)
        with pytest.raises(TrainingAbort):
            train.run_training(cfg, ds, SMALL_GEN, SMALL_CRITIC)

    def test_checkpoints_and_log_files(self, tmp_path):
        ds = train.ArrayDataset(toy_dataset())
        cfg = train.TrainConfig(image_size=32, critic_iters=1, epochs=3, batch_size=8,
                                seed=1, max_steps=4, checkpoint_interval=2)
        result = train.run_training(cfg, ds, SMALL_GEN, SMALL_CRITIC, run_dir=tmp_path)
        names = sorted(p.name for p in tmp_path.glob("*.ckpt"))
        assert "gen_000002.ckpt" in names and "gen_000004.ckpt" in names
        assert (tmp_path / "log.csv").exists()
        assert (tmp_path / "config.json").exists()
        reloaded = train.TrainLog.from_csv(tmp_path / "log.csv")
        assert [vars(r) for r in reloaded.records] == [vars(r) for r in result.log.records]

    def test_log_append_only(self):
        log = train.TrainLog()
        log.append(train.LogRecord(1, 0, 0.0, 0.0, 0.0, 0.0))
        with pytest.raises(ConfigError):
            log.append(train.LogRecord(1, 0, 0.0, 0.0, 0.0, 0.0))


class TestWasserstein1d:
    def test_identical(self, rng):
        a = rng.normal(size=50)
        assert train.wasserstein1d_exact(a, a) == 0.0

    def test_point_masses(self):
        assert train.wasserstein1d_exact([0.0], [1.0]) == 1.0

    def test_translation(self, rng):
        a = rng.normal(size=200)
        for c in (-2.5, 0.3, 4.0):
            assert train.wasserstein1d_exact(a, a + c) == pytest.approx(abs(c), abs=1e-12)

    def test_unequal_counts(self):
        with pytest.raises(ShapeError):
            train.wasserstein1d_exact([1.0, 2.0], [1.0])

    def test_known_value(self):
        # sorted pairing: |1-2| + |3-4| over 2 samples = 1
        assert train.wasserstein1d_exact([3.0, 1.0], [2.0, 4.0]) == 1.0
