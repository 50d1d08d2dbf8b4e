import math

import numpy as np
import pytest
from scipy import stats

from gdlnet import data
from gdlnet.gabor import eval_filterbank
from gdlnet.gradcheck import (
    check_gradients,
    random_model,
    random_problem,
    tied_consistency,
)
from gdlnet.net import ArchConfig, forward, init_model
from gdlnet.train import (
    NonFiniteError,
    OptimState,
    Schedule,
    StaleCacheError,
    TrainSettings,
    backward,
    clip_global_norm,
    format_record,
    loss_and_grad,
    make_batch,
    mse_grad,
    mse_loss,
    optimizer_step,
    sample_sigmas,
    train,
)

SMALL = ArchConfig(K=2, M=3, stride=2, P=3, S=2, adaptive=True)


class TestLoss:
    def test_identical(self):
        x = np.random.default_rng(0).random((4, 4))
        assert mse_loss(x, x) == 0.0

    def test_half_gray(self):
        assert mse_loss(np.full((2, 2), 0.5), np.zeros((2, 2))) == pytest.approx(1.0)

    def test_loop_oracle(self):
        rng = np.random.default_rng(1)
        a, b = rng.random((8, 8)), rng.random((8, 8))
        ref = math.fsum((a[i, j] - b[i, j]) ** 2 for i in range(8) for j in range(8))
        assert mse_loss(a, b) == pytest.approx(ref, rel=1e-14)

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            mse_loss(np.zeros((2, 2)), np.zeros((2, 3)))


class TestBackward:
    def test_zero_upstream(self):
        rng = np.random.default_rng(2)
        theta = random_model(SMALL, rng)
        y, _, sigma = random_problem(SMALL, rng, size=8)
        xhat, cache = forward(theta, y, sigma, keep_cache=True)
        for g in backward(theta, cache, np.zeros_like(xhat)).values():
            assert np.all(g == 0)

    def test_missing_cache(self):
        theta = random_model(SMALL, np.random.default_rng(3))
        with pytest.raises(StaleCacheError):
            backward(theta, None, np.zeros((8, 8)))

    def test_stale_cache(self):
        rng = np.random.default_rng(4)
        theta = random_model(SMALL, rng)
        y, x, sigma = random_problem(SMALL, rng, size=8)
        xhat, cache = forward(theta, y, sigma, keep_cache=True)
        theta.refresh()
        with pytest.raises(StaleCacheError):
            backward(theta, cache, mse_grad(xhat, x))

    def test_shapes_match_parameters(self):
        rng = np.random.default_rng(5)
        cfg = ArchConfig(3, 4, 2, 3, 1, adaptive=True, tie={"a", "thresholds"})
        theta = random_model(cfg, rng)
        y, x, sigma = random_problem(cfg, rng, size=8)
        _, grads = loss_and_grad(theta, y, x, sigma)
        assert set(grads) == set(theta.arrays)
        for k, g in grads.items():
            assert g.shape == theta.arrays[k].shape

    @pytest.mark.parametrize("tie", [frozenset(), frozenset({"alpha"}),
                                     frozenset({"alpha", "a", "omega0", "psi", "thresholds"})])
    def test_finite_differences(self, tie):
        rng = np.random.default_rng(6)
        cfg = ArchConfig(2, 3, 2, 3, 2, adaptive=True, tie=tie)
        theta = random_model(cfg, rng)
        y, x, sigma = random_problem(cfg, rng, size=12)
        rep = check_gradients(theta, y, x, sigma)
        assert rep.checked == theta.num_params()
        assert rep.passed(1e-5), rep.where

    def test_odd_sized_input(self):
        # gradient flows through the reflect padding's crop
        rng = np.random.default_rng(7)
        cfg = ArchConfig(2, 2, 2, 3, 1)
        theta = random_model(cfg, rng)
        y = rng.random((2, 9, 11))
        x = rng.random((2, 9, 11))
        rep = check_gradients(theta, y, x, np.array([20.0, 30.0]), keys=["D", "tau0", "A.psi"])
        assert rep.passed(1e-5), rep.where

    def test_tied_gradient_is_layer_sum(self):
        gap = tied_consistency(ArchConfig(3, 4, 2, 3, 2, adaptive=True, tie={"alpha"}),
                               np.random.default_rng(8), size=12)
        assert gap <= 1e-12

    def test_corrupted_backward_is_caught(self):
        rng = np.random.default_rng(9)
        theta = random_model(SMALL, rng)
        y, x, sigma = random_problem(SMALL, rng, size=8)

        def corrupted(theta, cache, grad_out):
            grads = backward(theta, cache, grad_out)
            grads["B.psi"] = grads["B.psi"] * 1.01
            return grads

        rep = check_gradients(theta, y, x, sigma, backward_fn=corrupted)
        assert not rep.passed(1e-5)
        assert rep.worst["psi"] > 1e-3


class TestOptimizer:
    def model(self, seed=10):
        return init_model(ArchConfig(2, 3, 2, 3, 1, adaptive=True), np.random.default_rng(seed))

    def test_zero_gradients(self):
        theta = self.model()
        before = {k: v.copy() for k, v in theta.arrays.items()}
        state = OptimState()
        optimizer_step(theta, {k: np.zeros_like(v) for k, v in before.items()}, state, Schedule())
        for k in before:
            np.testing.assert_array_equal(theta.arrays[k], before[k])
        assert state.step == 1

    def test_projection(self):
        theta = self.model()
        theta.arrays["tau0"][:] = 0.001
        grads = {k: np.zeros_like(v) for k, v in theta.arrays.items()}
        grads["tau0"][:] = 1e6
        optimizer_step(theta, grads, OptimState(), Schedule(lr_tau=0.1))
        assert np.all(theta.arrays["tau0"] == 0.0)

    def test_two_step_closed_form(self):
        theta = self.model()
        key, idx = "D", (0, 0, 2)
        x0 = theta.arrays[key][idx]
        g1, g2 = 0.3, -1.7
        lr = 1e-3
        b1, b2, eps = 0.9, 0.999, 1e-8
        state = OptimState()
        sched = Schedule(lr_gabor=lr, lr_tau=lr, lr_min=lr)
        for g in (g1, g2):
            grads = {k: np.zeros_like(v) for k, v in theta.arrays.items()}
            grads[key][idx] = g
            optimizer_step(theta, grads, state, sched)
        m1, v1 = (1 - b1) * g1, (1 - b2) * g1**2
        x1 = x0 - lr * (m1 / (1 - b1)) / (math.sqrt(v1 / (1 - b2)) + eps)
        m2, v2 = b1 * m1 + (1 - b1) * g2, b2 * v1 + (1 - b2) * g2**2
        x2 = x1 - lr * (m2 / (1 - b1**2)) / (math.sqrt(v2 / (1 - b2**2)) + eps)
        assert theta.arrays[key][idx] == pytest.approx(x2, abs=1e-12)

    def test_non_finite_gradient(self):
        theta = self.model()
        before = theta.arrays["A.a"].copy()
        grads = {k: np.zeros_like(v) for k, v in theta.arrays.items()}
        grads["A.a"][0, 0, 0, 0] = np.nan
        state = OptimState()
        with pytest.raises(NonFiniteError, match="A.a"):
            optimizer_step(theta, grads, state, Schedule())
        np.testing.assert_array_equal(theta.arrays["A.a"], before)
        assert state.step == 0

    def test_filters_re_realized(self):
        rng = np.random.default_rng(11)
        theta = self.model()
        grads = {k: rng.standard_normal(v.shape) for k, v in theta.arrays.items()}
        optimizer_step(theta, grads, OptimState(), Schedule())
        f = theta.filters
        np.testing.assert_array_equal(f.A, eval_filterbank(theta.bank_params("A"), 3))
        np.testing.assert_array_equal(f.D, eval_filterbank(theta.arrays["D"], 3))

    def test_tied_values_stay_identical(self):
        rng = np.random.default_rng(12)
        cfg = ArchConfig(3, 3, 2, 3, 1, tie={"omega0", "thresholds"})
        theta = init_model(cfg, rng)
        state = OptimState()
        for _ in range(3):
            y, x, sigma = random_problem(cfg, rng, size=8)
            _, grads = loss_and_grad(theta, y, x, sigma)
            optimizer_step(theta, grads, state, Schedule())
        w = theta.bank_params("A")[..., 3:5]
        assert np.all(w == w[:1])
        t = theta.tau(0)
        assert np.all(t == t[:1])


class TestSchedule:
    def test_endpoints(self):
        s = Schedule(1e-3, 1e-4, 1e-6, total=100)
        assert s.rates(0) == (1e-3, 1e-4)
        assert s.rates(100) == pytest.approx((1e-6, 1e-6))
        assert s.rates(50)[0] == pytest.approx(1e-6 + (1e-3 - 1e-6) / 2)

    def test_monotone(self):
        s = Schedule(total=50)
        lrs = [s.rates(t)[0] for t in range(51)]
        assert all(a >= b for a, b in zip(lrs, lrs[1:]))


class TestClip:
    def test_scales_down(self):
        grads = {"a": np.array([3.0, 0.0]), "b": np.array([[4.0]])}
        norm = clip_global_norm(grads, 1.0)
        assert norm == pytest.approx(5.0)
        assert math.hypot(grads["a"][0], grads["b"][0, 0]) == pytest.approx(1.0)

    def test_noop_below(self):
        grads = {"a": np.array([0.3, 0.4])}
        clip_global_norm(grads, 1.0)
        np.testing.assert_array_equal(grads["a"], [0.3, 0.4])


class TestSampling:
    def test_sigma_uniform(self):
        sig = sample_sigmas(0, range(10_000), 20.0, 30.0)
        assert np.all((sig >= 20) & (sig <= 30))
        assert stats.kstest(sig, stats.uniform(loc=20, scale=10).cdf).pvalue > 0.01

    def test_degenerate_range(self):
        assert np.all(sample_sigmas(3, range(100), 25.0, 25.0) == 25.0)

    def test_batch_replayable_per_sample(self):
        images = [np.random.default_rng(13).random((40, 40))]
        s4 = TrainSettings(20, 30, batch=4, crop=16)
        s2 = TrainSettings(20, 30, batch=2, crop=16)
        c4, n4, g4 = make_batch(images, s4, 1)
        c2, n2, g2 = make_batch(images, s2, 3)
        # samples 6 and 7 coincide whatever the batch size
        np.testing.assert_array_equal(c4[2:], c2)
        np.testing.assert_array_equal(n4[2:], n2)
        np.testing.assert_array_equal(g4[2:], g2)

    def test_noise_level_matches(self):
        images = [np.full((64, 64), 0.5)]
        clean, noisy, sig = make_batch(images, TrainSettings(25, 25, batch=8, crop=64), 0)
        assert np.all(sig == 25)
        assert np.std(noisy - clean) == pytest.approx(25 / 255, rel=0.02)


def tiny_settings(**kw):
    base = dict(sigma_lo=25, sigma_hi=25, batch=2, crop=16, steps=12, log_every=5, val_every=6,
                precision="float64")
    base.update(kw)
    return TrainSettings(**base)


class TestTrain:
    images = [np.random.default_rng(14).random((32, 32)) for _ in range(3)]
    cfg = ArchConfig(2, 4, 2, 3, 1)

    def test_deterministic(self):
        a = train(self.cfg, self.images, tiny_settings())
        b = train(self.cfg, self.images, tiny_settings())
        for k in a.theta.arrays:
            assert a.theta.arrays[k].tobytes() == b.theta.arrays[k].tobytes()

    def test_float32_deterministic(self):
        a = train(self.cfg, self.images, tiny_settings(precision="float32"))
        b = train(self.cfg, self.images, tiny_settings(precision="float32"))
        for k in a.theta.arrays:
            assert a.theta.arrays[k].tobytes() == b.theta.arrays[k].tobytes()

    def test_log_records(self):
        lines = []
        res = train(self.cfg, self.images, tiny_settings(), sink=lines.append)
        assert lines[0] == "event=banner regime=-S sigma=25"
        steps = [r["step"] for r in res.records[1:]]
        assert steps == [5, 10, 12]
        for line in lines[1:]:
            keys = [tok.split("=")[0] for tok in line.split()]
            assert keys == ["step", "loss", "lr", "val_psnr", "clipped", "wall_ms"]

    def test_regime_banners(self):
        lines = []
        train(ArchConfig(1, 2, 2, 3, 1, adaptive=True), self.images,
              tiny_settings(sigma_lo=10, sigma_hi=40, steps=1), sink=lines.append)
        assert "regime=adaptive" in lines[0]
        lines = []
        train(ArchConfig(1, 2, 2, 3, 1), self.images,
              tiny_settings(sigma_lo=10, sigma_hi=40, steps=1), sink=lines.append)
        assert "regime=-B" in lines[0]

    def test_validation_checkpoint(self):
        res = train(self.cfg, self.images[:2], tiny_settings(), val_images=self.images[2:])
        vals = {r["step"]: r["val_psnr"] for r in res.records[1:] if not math.isnan(r["val_psnr"])}
        assert set(vals) == {6, 12}
        assert res.best_val == max(vals.values())
        assert res.best_step == max(vals, key=vals.get)
        assert res.theta.filters.D.dtype == np.float64

    def test_thresholds_stay_non_negative(self):
        res = train(self.cfg, self.images, tiny_settings(lr_tau=0.05, steps=8))
        assert np.all(res.theta.arrays["tau0"] >= 0)

    def test_non_finite_loss(self):
        bad = [np.full((32, 32), np.nan)]
        with pytest.raises(NonFiniteError, match="iteration 0"):
            train(self.cfg, bad, tiny_settings())

    def test_empty_dataset(self):
        with pytest.raises(ValueError):
            train(self.cfg, [], tiny_settings())

    @pytest.mark.parametrize("kw", [dict(sigma_lo=30, sigma_hi=20), dict(sigma_lo=-1),
                                    dict(batch=0), dict(precision="float16")])
    def test_settings_validation(self, kw):
        with pytest.raises(ValueError):
            tiny_settings(**kw)


def test_format_record():
    assert format_record({"step": 3, "loss": 0.125, "lr": 1e-3}) == "step=3 loss=0.125 lr=0.001"


def test_stream_keys_independent():
    a = data.stream(0, data.STREAM_NOISE, 5).random(4)
    b = data.stream(0, data.STREAM_PATCH, 5).random(4)
    assert not np.array_equal(a, b)
