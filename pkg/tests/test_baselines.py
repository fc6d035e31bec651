import numpy as np
import pytest

from gpdm_soh.baselines import (
    GPLVM,
    GPRegressor,
    GpRegressionModel,
    fit_gp,
    fit_gplvm,
    gp_nll_grad,
    gplvm_forecast,
    gplvm_reconstruct,
    predict_gp,
)
from gpdm_soh.dataio import BatteryDataset, assemble_transfer
from gpdm_soh.eval import synth_fleet
from gpdm_soh.kernels import parse_kernel
from gpdm_soh.model import CholeskyFactor, GpdmParams, gplvm_objective, neg_log_posterior, observation_nll
from gpdm_soh.train import TrainConfig, pca_init


def line_dataset(N=60, slope=0.002):
    n = np.arange(1, N + 1)
    soh = 1 - slope * (n - 1)
    return BatteryDataset("L", cycles=n, soh=soh, capacity=2 * soh)


class TestGp:
    def test_reproduces_line(self):
        d = line_dataset()
        ts, held = assemble_transfer([d], "L", 0.5)
        model = fit_gp(ts, "1*polynomial(1,1,degree=1)", TrainConfig(max_iters=300))
        mean, _ = predict_gp(model, np.arange(31, 61))
        np.testing.assert_allclose(mean, held, atol=1e-6)

    def test_huge_noise_is_prior(self):
        Z = np.column_stack([np.linspace(0, 1, 20), np.zeros(20)])
        y = 1 - 0.2 * Z[:, 0]
        m = GpRegressionModel(spec=parse_kernel("1*matern32(1,1) + 1*matern52(1,1)"), sigma2=1e8, Z=Z, y=y)
        mean, _ = m.predict_normalized(np.column_stack([np.linspace(0, 2, 15), np.zeros(15)]))
        assert np.max(np.abs(mean)) < 1e-2

    def test_variance_contracts(self):
        Z = np.column_stack([np.linspace(0, 1, 10), np.zeros(10)])
        m = GpRegressionModel(spec=parse_kernel("1*matern52(1,4)"), sigma2=1e-4, Z=Z, y=np.sin(Z[:, 0]))
        _, v = m.predict_normalized(np.array([[Z[3, 0], 0.0], [3.0, 0.0]]))
        assert v[0] < v[1]
        _, vn = m.predict_normalized(np.array([[3.0, 0.0]]), include_noise=True)
        assert vn[0] == pytest.approx(v[1] + 1e-4)

    def test_matches_observation_nll(self, rng):
        Z = rng.normal(size=(9, 2))
        y = rng.normal(size=9)
        spec = parse_kernel("0.7*rbf(1.2,0.8) + 0.4*linear(0.5)")
        nll, _, _ = gp_nll_grad(spec, Z, y, 0.03)
        p = GpdmParams(X=Z, kernel_y=spec, kernel_x=parse_kernel("1*rbf(1,1)"), L_y=CholeskyFactor.identity(1),
                       L_x=CholeskyFactor.identity(2), sigma2_y=0.03, sigma2_x=1.0)
        assert nll == pytest.approx(observation_nll(y[:, None], p), abs=1e-10)

    def test_gradient(self, rng):
        Z = rng.normal(size=(8, 2))
        y = rng.normal(size=8)
        spec = parse_kernel("1*matern32(0.9,1.3) + 0.8*matern52(0.6,0.4)")
        _, g, gs = gp_nll_grad(spec, Z, y, 0.05)
        h = 1e-6
        for i in range(spec.n_params):
            tp, tm = spec.theta.copy(), spec.theta.copy()
            tp[i] += h
            tm[i] -= h
            fd = (gp_nll_grad(spec.with_theta(tp), Z, y, 0.05)[0] - gp_nll_grad(spec.with_theta(tm), Z, y, 0.05)[0]) / (2 * h)
            assert g[i] == pytest.approx(fd, rel=1e-5, abs=1e-8)
        fd = (gp_nll_grad(spec, Z, y, 0.05 + h)[0] - gp_nll_grad(spec, Z, y, 0.05 - h)[0]) / (2 * h)
        assert gs == pytest.approx(fd, rel=1e-5)

    def test_fit_deterministic_and_sane(self):
        fleet = synth_fleet(2, M=2, N=40)
        ts, held = assemble_transfer(fleet, "SYN2", 0.5)
        a = fit_gp(ts, cfg=TrainConfig(max_iters=100, restarts=2))
        b = fit_gp(ts, cfg=TrainConfig(max_iters=100, restarts=2))
        assert a.objective_trace == b.objective_trace
        assert np.all(np.diff(a.objective_trace) <= 1e-12)
        mean, var = predict_gp(a, np.arange(21, 41))
        assert np.all(np.isfinite(mean)) and np.all(var >= -1e-10)

    def test_estimator(self):
        X = np.linspace(0, 1, 15)[:, None]
        y = np.sin(3 * X[:, 0])
        est = GPRegressor(max_iter=100).fit(X, y)
        assert est.score(X, y) > 0.99
        mean, std = est.predict(X, return_std=True)
        assert mean.shape == std.shape == (15,)


@pytest.fixture(scope="module")
def lowrank():
    rng = np.random.default_rng(11)
    t = np.linspace(-1, 1, 20)
    Y = np.column_stack([t, t**2, np.sin(2 * t), t**3]) + 0.01 * rng.normal(size=(20, 4))
    return Y


class TestGplvm:
    def test_reduction(self, rng):
        from conftest import random_params

        for _ in range(5):
            p = random_params(rng, 7, 3, 2)
            Y = rng.normal(size=(7, 3))
            assert gplvm_objective(Y, p) == neg_log_posterior(Y, p, include_dynamics=False)

    def test_beats_pca(self, lowrank):
        Q = 1
        est = GPLVM(n_components=Q, max_iter=300).fit(lowrank)
        m = est.model_
        Yc = m.Y
        post = m.posterior()
        rec = np.array([post(x)[0] for x in m.params.X])
        Xp = pca_init(Yc, Q)
        W = np.linalg.lstsq(Xp, Yc, rcond=None)[0]
        assert np.sum((rec - Yc) ** 2) < np.sum((Xp @ W - Yc) ** 2)

    def test_deterministic(self, lowrank):
        a = GPLVM(max_iter=40, restarts=2, random_state=3).fit(lowrank)
        b = GPLVM(max_iter=40, restarts=2, random_state=3).fit(lowrank)
        assert a.model_.objective_trace == b.model_.objective_trace
        np.testing.assert_array_equal(a.transform(), b.transform())

    def test_score_is_negative_objective(self, lowrank):
        est = GPLVM(max_iter=20).fit(lowrank)
        assert est.score() == pytest.approx(-est.model_.objective, rel=1e-12)


@pytest.fixture(scope="module")
def linear_model():
    t = np.linspace(0, 1, 30)
    Y = np.column_stack([t, np.sin(2 * t), 2 * t + 1])
    return GPLVM(kernel="1*rbf(1,1) + 1*linear(1)", n_components=1, max_iter=400).fit(Y), Y


class TestReconstruct:
    def test_mask_nothing(self, linear_model):
        est, Y = linear_model
        out, lat = gplvm_reconstruct(est.model_, Y[:5], np.zeros((5, 3), bool), return_latent=True)
        np.testing.assert_array_equal(out, Y[:5])
        np.testing.assert_array_equal(lat, est.latent_[:5])

    def test_linear_relation(self, linear_model):
        est, _ = linear_model
        t = np.array([0.13, 0.42, 0.77])
        rows = np.column_stack([t, np.sin(2 * t), np.zeros(3)])
        mask = np.zeros((3, 3), bool)
        mask[:, 2] = True
        out = est.reconstruct(rows, mask)
        np.testing.assert_allclose(out[:, 2], 2 * t + 1, atol=1e-3)
        np.testing.assert_array_equal(out[:, :2], rows[:, :2])

    def test_errors(self, linear_model):
        est, Y = linear_model
        with pytest.raises(ValueError):
            est.reconstruct(Y[:2], np.ones((2, 3), bool))
        with pytest.raises(ValueError):
            est.reconstruct(Y[:2, :2], np.zeros((2, 2), bool))


def test_gplvm_forecast_runs():
    fleet = synth_fleet(4, M=2, N=30)
    ts, held = assemble_transfer(fleet, "SYN2", 0.5)
    m = fit_gplvm(ts, cfg=TrainConfig(max_iters=50))
    soh = gplvm_forecast(m, np.arange(16, 31))
    assert soh.shape == held.shape and np.all(np.isfinite(soh))
    np.testing.assert_array_equal(soh, gplvm_forecast(m, np.arange(16, 31)))
