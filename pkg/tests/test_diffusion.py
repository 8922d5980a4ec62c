import numpy as np
import pytest

from cdua.diffusion import (CI_Z, ForecastEnsemble, SupervisedWindow, TrainConfig, TrainingAborted, build_schedule,
                            diffusion_loss, evaluate_loss, forecast_windows, forward_sample, rescaled_schedule,
                            reverse_step, sample_ensemble, sample_trajectory, train)
from cdua.graph import Tensor
from cdua.model import CduaConfig, CduaModel


class OracleNoise:
    """Test stub that returns a fixed noise array."""

    horizon = 4

    def __init__(self, eps):
        self.eps = eps

    def encode(self, x):
        return None

    def predict_noise(self, y_t, t, ctx, alpha_bar=None):
        return Tensor(self.eps)


def tiny(**kw):
    return CduaModel(CduaConfig(**{"channels": (16, 32), "time_embed_dim": 16, "feature_dim": 3, **kw}))


def windows(rng, n=4, L=8, H=8, C=4):
    return [SupervisedWindow(rng.standard_normal((L, C)), rng.uniform(0, 1, H), np.ones(H, bool)) for _ in range(n)]


class TestSchedule:
    def test_defaults(self):
        s = build_schedule()
        assert s.T == 700
        assert np.all(np.diff(s.beta) > 0) and np.all(np.diff(s.alpha_bar) < 0)
        assert s.alpha_bar[0] == 1 - s.beta[0]
        assert s.alpha_bar[-1] < 1e-3
        assert s.beta[0] == 1e-4 and s.beta[-1] == pytest.approx(2e-2, abs=1e-15)

    def test_single_step_and_midpoint(self):
        np.testing.assert_array_equal(build_schedule(1).beta, [1e-4])
        s = build_schedule(701)
        assert s.beta[350] == pytest.approx((1e-4 + 2e-2) / 2, abs=1e-15)

    @pytest.mark.parametrize("args", [(0,), (10, 0.0, 0.1), (10, 0.2, 0.1), (10, 0.1, 1.0)])
    def test_invalid(self, args):
        with pytest.raises(ValueError):
            build_schedule(*args)

    def test_rescaled_terminal_level(self):
        ref = build_schedule()
        short = rescaled_schedule(100)
        assert short.T == 100
        # same order of terminal signal level: both chains end in near-pure noise
        assert short.alpha_bar[-1] < 1e-3 and ref.alpha_bar[-1] / short.alpha_bar[-1] < 2

    def test_sigma_monotone_and_range(self):
        s = build_schedule()
        assert np.all(np.diff(s.sigma(np.arange(1, 701))) > 0)
        with pytest.raises(ValueError):
            s.sigma(0)
        with pytest.raises(ValueError):
            s.check_t(701)


class TestForward:
    def test_noiseless_and_terminal(self, rng):
        s = build_schedule()
        y0 = rng.standard_normal(8)
        np.testing.assert_allclose(forward_sample(s, y0, 100, np.zeros(8)), np.sqrt(s.alpha_bar[99]) * y0)
        eps = rng.standard_normal(8)
        yT = forward_sample(s, y0, 700, eps)
        assert np.all(np.abs(yT - eps) <= np.sqrt(8.4e-4) * np.abs(y0) + np.abs(eps) * 1e-3)

    def test_per_row_t(self, rng):
        s = build_schedule()
        y0, eps = rng.standard_normal((3, 4)), rng.standard_normal((3, 4))
        t = np.array([1, 50, 700])
        out = forward_sample(s, y0, t, eps)
        for i in range(3):
            np.testing.assert_allclose(out[i], forward_sample(s, y0[i], t[i], eps[i]))

    def test_x0_identity(self, rng):
        s = build_schedule()
        for _ in range(100):
            t = int(rng.integers(1, 701))
            y0, eps = rng.standard_normal(8), rng.standard_normal(8)
            yt = forward_sample(s, y0, t, eps)
            rec = (yt - np.sqrt(1 - s.alpha_bar[t - 1]) * eps) / np.sqrt(s.alpha_bar[t - 1])
            np.testing.assert_allclose(rec, y0, atol=1e-10)


class TestLoss:
    def test_oracle_stub_gives_zero(self, rng):
        s = build_schedule()
        ws = windows(rng, 3, H=4)
        eps = rng.standard_normal((3, 4))
        loss = diffusion_loss(OracleNoise(eps), ws, s, rng, eps=eps)
        assert float(loss.data) == 0.0

    def test_all_masked_raises(self, rng):
        ws = [SupervisedWindow(np.zeros((8, 4)), np.zeros(8), np.zeros(8, bool))]
        with pytest.raises(ValueError):
            diffusion_loss(tiny(), ws, build_schedule(), rng)

    def test_masked_targets_cannot_leak(self, rng):
        m = tiny()
        s = build_schedule()
        mask = np.ones(8, bool)
        mask[5:] = False
        a = SupervisedWindow(np.zeros((8, 4)), np.full(8, 0.3), mask)
        b = SupervisedWindow(np.zeros((8, 4)), np.r_[np.full(5, 0.3), [9.0, -4.0, 1e6]], mask)
        la = diffusion_loss(m, [a], s, np.random.default_rng(0))
        lb = diffusion_loss(m, [b], s, np.random.default_rng(0))
        assert la.data.tobytes() == lb.data.tobytes()

    def test_nonnegative_and_grads_reach_params(self, rng):
        from cdua.graph import adam_step
        m = tiny()
        s = build_schedule()
        ws = windows(rng)
        # the output head starts at zero, so only it sees gradient on the first step
        for _ in range(2):
            m.store.zero_grad()
            loss = diffusion_loss(m, ws, s, rng)
            assert float(loss.data) >= 0
            loss.backward()
            adam_step(m.store, 1e-3)
        touched = [n for n in m.store.names() if m.store[n].grad is not None and np.any(m.store[n].grad != 0)]
        assert "den.out.w" in touched and any(n.startswith("enc.") for n in touched)
        assert len(touched) > 0.9 * len(m.store.names())


class TestTrain:
    def test_lr_zero_leaves_parameters(self, rng):
        m = tiny()
        m.store.quantize()
        before = m.store.snapshot()
        res = train(m, windows(rng), build_schedule(20), TrainConfig(epochs=3, batch_size=2, lr=0.0))
        for n, v in before.items():
            np.testing.assert_array_equal(m.store[n].data, v)
        assert len(res.history) == 3

    def test_same_seed_same_history(self, rng):
        ws = windows(rng)
        hists = []
        for _ in range(2):
            m = tiny(seed=5)
            hists.append(train(m, ws, build_schedule(20), TrainConfig(epochs=4, batch_size=2, seed=3)).history)
        assert hists[0] == hists[1]

    def test_loss_decreases(self, rng):
        m = tiny()
        ws = windows(rng)
        s = rescaled_schedule(50)
        before = evaluate_loss(m, ws, s)
        train(m, ws, s, TrainConfig(epochs=40, batch_size=4, lr=3e-3, noise_draws=8))
        assert evaluate_loss(m, ws, s) < before

    def test_nan_aborts_and_rolls_back(self, rng):
        m = tiny()
        ws = windows(rng)
        ws[0].x[0, 0] = np.nan
        m.store.quantize()
        snap = m.store.snapshot()
        with pytest.raises((TrainingAborted, ValueError)):
            train(m, ws, build_schedule(20), TrainConfig(epochs=2, batch_size=4))
        for n, v in snap.items():
            np.testing.assert_array_equal(m.store[n].data, v)

    def test_cosine_schedule(self):
        c = TrainConfig(epochs=11, lr=1.0, lr_schedule="cosine", lr_floor=0.1)
        assert c.lr_at(0) == pytest.approx(1.0) and c.lr_at(10) == pytest.approx(0.1)
        assert all(c.lr_at(i) >= c.lr_at(i + 1) for i in range(10))

    def test_bad_config(self, rng):
        with pytest.raises(ValueError):
            train(tiny(), windows(rng), build_schedule(5), TrainConfig(lr_schedule="step"))
        with pytest.raises(ValueError):
            train(tiny(), [], build_schedule(5), TrainConfig())


class TestReverse:
    def test_oracle_step_and_terminal(self, rng):
        s = build_schedule()
        y0, eps = rng.standard_normal((1, 4)), rng.standard_normal((1, 4))
        stub = OracleNoise(eps)
        yt = forward_sample(s, y0, 1, eps)
        out = reverse_step(stub, s, yt, 1, None, rng.standard_normal((1, 4)))
        # at t=1 the mean is exactly the x0 reconstruction and no noise is added
        np.testing.assert_allclose(out, y0, atol=1e-10)
        z = rng.standard_normal((1, 4))
        a = reverse_step(stub, s, yt, 2, None, z)
        b = reverse_step(stub, s, yt, 2, None, np.zeros((1, 4)))
        np.testing.assert_allclose(a - b, np.sqrt(s.beta[1]) * z, atol=1e-12)

    def test_sampling_seeded(self, rng):
        m = tiny(feature_dim=3)
        s = build_schedule(30)
        ctx = m.encode(rng.standard_normal((1, 8, 4)))
        a = sample_trajectory(m, s, ctx, 1)
        assert a.tobytes() == sample_trajectory(m, s, ctx, 1).tobytes()
        assert not np.array_equal(a, sample_trajectory(m, s, ctx, 2))

    def test_untrained_finite(self, rng):
        m = tiny()
        s = build_schedule()
        ctx = m.encode(rng.standard_normal((1, 8, 4))).repeat(100)
        from cdua.diffusion import sample_batch
        assert np.all(np.isfinite(sample_batch(m, s, ctx, range(100))))

    def test_forecast_windows_matches_single(self, rng):
        m = tiny()
        s = build_schedule(10)
        x = rng.standard_normal((2, 8, 4))
        traj = forecast_windows(m, s, x, n=3, base_seeds=[10, 20], chunk=4)
        ens = sample_ensemble(m, s, m.encode(x[1:]), n=3, base_seed=20)
        np.testing.assert_allclose(traj[1], ens.trajectories, atol=1e-12)


class TestEnsemble:
    def test_two_member_arithmetic(self):
        e = ForecastEnsemble.from_trajectories(np.array([[0.0] * 3, [2.0] * 3]))
        np.testing.assert_allclose(e.mean, 1.0)
        np.testing.assert_allclose(e.std, 1.0)
        np.testing.assert_allclose(e.lower, -0.96)
        np.testing.assert_allclose(e.upper, 2.96)

    def test_identical_members(self):
        e = ForecastEnsemble.from_trajectories(np.ones((40, 8)))
        assert np.all(e.std == 0) and np.all(e.upper == e.lower)

    def test_invariants(self, rng):
        e = ForecastEnsemble.from_trajectories(rng.standard_normal((40, 8)))
        assert np.all(e.lower <= e.mean) and np.all(e.mean <= e.upper)
        np.testing.assert_allclose(e.upper - e.lower, 2 * CI_Z * e.std)
        with pytest.raises(ValueError):
            ForecastEnsemble.from_trajectories(np.ones((1, 8)))

    def test_map_denormalizes(self, rng):
        e = ForecastEnsemble.from_trajectories(rng.standard_normal((40, 8)))
        f = e.map(lambda u: 10 * u + 100)
        np.testing.assert_allclose(f.mean, 10 * e.mean + 100)
        np.testing.assert_allclose(f.std, 10 * e.std)

    def test_gaussian_coverage(self, rng):
        hits = []
        for _ in range(600):
            mu, sd = rng.uniform(-1, 1), rng.uniform(0.1, 2)
            e = ForecastEnsemble.from_trajectories(rng.normal(mu, sd, (40, 1)))
            hits.append(e.lower[0] <= rng.normal(mu, sd) <= e.upper[0])
        assert 0.90 <= np.mean(hits) <= 0.98
