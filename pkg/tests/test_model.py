import numpy as np
import pytest
from scipy.stats import multivariate_normal

from gpdm_soh.kernels import KernelSpec, gram
from gpdm_soh.model import (
    CholeskyFactor,
    GpdmParams,
    StructuredCovariance,
    dumps_params,
    dynamics_nll,
    gplvm_objective,
    loads_params,
    neg_log_posterior,
    neg_log_posterior_grad,
    objective_terms,
    observation_nll,
    structured_logdet_solve,
    transition_indices,
)

from conftest import random_factor, random_params, random_spec


def dense_obs_nll(Y, p):
    K = gram(p.kernel_y, p.X, jitter=0.0)
    cov = np.kron(K, p.L_y.cov) + p.sigma2_y * np.eye(Y.size)
    return -multivariate_normal(np.zeros(Y.size), cov).logpdf(Y.ravel())


def dense_dyn_nll(X, p):
    K = gram(p.kernel_x, X[:-1], jitter=0.0)
    cov = np.kron(K, p.L_x.cov) + p.sigma2_x * np.eye((X.shape[0] - 1) * X.shape[1])
    tgt = X[1:].ravel()
    return -multivariate_normal(np.zeros(tgt.size), cov).logpdf(tgt) + 0.5 * X[0] @ X[0]


class TestCholeskyFactor:
    def test_rejects_bad_diagonal(self):
        with pytest.raises(ValueError):
            CholeskyFactor(np.array([[1.0, 0.0], [0.5, -1.0]]))

    def test_free_round_trip(self, rng):
        F = random_factor(rng, 4)
        again = CholeskyFactor.from_free(F.free, 4)
        np.testing.assert_allclose(again.L, F.L, rtol=1e-15)

    def test_low_rank(self):
        F = CholeskyFactor.identity(4, rank=2)
        assert F.L.shape == (4, 2)
        assert np.linalg.matrix_rank(F.cov) == 2


class TestStructured:
    def test_identity(self):
        cov = StructuredCovariance(np.eye(3), np.eye(2), 0.0)
        v = np.arange(6.0)
        x, ld = structured_logdet_solve(cov, v)
        np.testing.assert_allclose(x, v, atol=1e-14)
        assert ld == pytest.approx(0.0, abs=1e-13)

    def test_dense_oracle(self, rng):
        A, B = rng.normal(size=(4, 4)), rng.normal(size=(3, 3))
        cov = StructuredCovariance(A @ A.T, B @ B.T, 0.3)
        v = rng.normal(size=12)
        dense = np.kron(A @ A.T, B @ B.T) + 0.3 * np.eye(12)
        x, ld = structured_logdet_solve(cov, v)
        np.testing.assert_allclose(x, np.linalg.solve(dense, v), atol=1e-8)
        assert ld == pytest.approx(np.linalg.slogdet(dense)[1], abs=1e-8)
        np.testing.assert_array_equal(cov.dense(), dense)

    def test_large_noise_limit(self, rng):
        A = rng.normal(size=(3, 3))
        cov = StructuredCovariance(A @ A.T / 3, np.eye(2), 1e6)
        assert cov.logdet() == pytest.approx(6 * np.log(1e6), rel=1e-3)

    def test_monotone_in_noise(self, rng):
        A = rng.normal(size=(4, 4))
        lds = [StructuredCovariance(A @ A.T, np.eye(2), s).logdet() for s in (0.1, 0.2, 0.4)]
        assert lds[0] < lds[1] < lds[2]

    def test_corrupt_factor_rejected(self):
        with pytest.raises(np.linalg.LinAlgError):
            StructuredCovariance(-np.eye(2), np.eye(2), 0.1)


class TestObservation:
    def test_zero_data(self, rng):
        p = random_params(rng, 4, 3, 2)
        cov = StructuredCovariance(gram(p.kernel_y, p.X, jitter=0.0), p.L_y.cov, p.sigma2_y)
        expect = 0.5 * cov.logdet() + 6 * np.log(2 * np.pi)
        assert observation_nll(np.zeros((4, 3)), p) == pytest.approx(expect, abs=1e-12)

    def test_dense_oracle(self, rng):
        p = random_params(rng, 3, 2, 2)
        Y = rng.normal(size=(3, 2))
        assert observation_nll(Y, p) == pytest.approx(dense_obs_nll(Y, p), abs=1e-8)

    def test_single_output_gp(self, rng):
        p = random_params(rng, 6, 1, 2)
        p = p.replace(L_y=CholeskyFactor.identity(1))
        y = rng.normal(size=6)
        K = gram(p.kernel_y, p.X, jitter=0.0) + p.sigma2_y * np.eye(6)
        c = np.linalg.cholesky(K)
        a = np.linalg.solve(K, y)
        ref = 0.5 * y @ a + np.sum(np.log(np.diag(c))) + 3 * np.log(2 * np.pi)
        assert observation_nll(y[:, None], p) == pytest.approx(ref, abs=1e-10)

    def test_row_permutation_invariance(self, rng):
        p = random_params(rng, 7, 3, 2)
        Y = rng.normal(size=(7, 3))
        perm = rng.permutation(7)
        q = p.replace(X=p.X[perm])
        assert observation_nll(Y[perm], q) == pytest.approx(observation_nll(Y, p), abs=1e-10)

    def test_weighted_logdet_scale_logdet(self, rng):
        p = random_params(rng, 4, 3, 2)
        cov = StructuredCovariance(gram(p.kernel_y, p.X, jitter=0.0), p.L_y.cov, p.sigma2_y)
        Y = rng.normal(size=(4, 3))
        delta = observation_nll(Y, p, weighted_logdet=True) - observation_nll(Y, p)
        assert delta == pytest.approx(0.5 * (3 - 1) * cov.logdet(), abs=1e-10)

    def test_kernel_noise_not_double_counted(self, rng):
        p = random_params(rng, 4, 2, 2)
        noisy = KernelSpec(p.kernel_y.terms, include_noise=True, noise_precision=2.0)
        q = p.replace(kernel_y=noisy)
        Y = rng.normal(size=(4, 2))
        assert observation_nll(Y, q) == observation_nll(Y, p)


class TestDynamics:
    def test_zero_path(self, rng):
        p = random_params(rng, 5, 2, 2).replace(X=np.zeros((5, 2)))
        K = gram(p.kernel_x, np.zeros((4, 2)), jitter=0.0)
        cov = StructuredCovariance(K, p.L_x.cov, p.sigma2_x)
        assert dynamics_nll(p.X, p) == pytest.approx(0.5 * cov.logdet() + 4 * np.log(2 * np.pi), abs=1e-12)

    def test_dense_oracle(self, rng):
        p = random_params(rng, 4, 3, 2)
        assert dynamics_nll(p.X, p) == pytest.approx(dense_dyn_nll(p.X, p), abs=1e-8)

    def test_segments_block_transitions(self, rng):
        p = random_params(rng, 6, 2, 2)
        split = dynamics_nll(p.X, p, [(0, 3), (3, 6)])
        a = p.replace(X=p.X[:3])
        b = p.replace(X=p.X[3:])
        # the two sequences share hyperparameters but no transitions
        inp, tgt, starts = transition_indices(6, [(0, 3), (3, 6)])
        assert list(inp) == [0, 1, 3, 4] and list(tgt) == [1, 2, 4, 5] and list(starts) == [0, 3]
        assert np.isfinite(split) and split != dynamics_nll(p.X, p)
        assert dynamics_nll(a.X, a) + dynamics_nll(b.X, b) != pytest.approx(split)  # joint Gram couples them

    def test_requires_two_points(self, rng):
        p = random_params(rng, 1, 2, 2)
        with pytest.raises(ValueError):
            dynamics_nll(p.X, p)

    @pytest.mark.parametrize("segments", [[(0, 2), (3, 5)], [(0, 3), (2, 5)], [(0, 6)]])
    def test_bad_segments(self, segments):
        with pytest.raises(ValueError):
            transition_indices(5, segments)


class TestPosterior:
    def test_unit_priors_vanish(self, rng):
        p = random_params(rng, 4, 3, 2)
        ones_y = p.kernel_y.with_theta(np.ones(p.kernel_y.n_params))
        ones_x = p.kernel_x.with_theta(np.ones(p.kernel_x.n_params))
        q = p.replace(kernel_y=ones_y, kernel_x=ones_x, sigma2_y=1.0, sigma2_x=1.0)
        t = objective_terms(rng.normal(size=(4, 3)), q)
        assert t["prior_y"] == 0.0 and t["prior_x"] == 0.0

    def test_doubling_theta_adds_log2(self, rng):
        p = random_params(rng, 4, 3, 2)
        th = p.kernel_y.theta.copy()
        th[0] *= 2
        q = p.replace(kernel_y=p.kernel_y.with_theta(th))
        dt = objective_terms(np.zeros((4, 3)), q)["prior_y"] - objective_terms(np.zeros((4, 3)), p)["prior_y"]
        assert dt == pytest.approx(np.log(2.0), abs=1e-14)

    def test_compositional_oracle(self, rng):
        p = random_params(rng, 4, 3, 2)
        Y = rng.normal(size=(4, 3))
        prior = (np.sum(np.log(p.kernel_y.theta)) + np.log(p.sigma2_y)
                 + np.sum(np.log(p.kernel_x.theta)) + np.log(p.sigma2_x))
        ref = dense_obs_nll(Y, p) + dense_dyn_nll(p.X, p) + prior
        assert neg_log_posterior(Y, p) == pytest.approx(ref, abs=1e-8)

    def test_gplvm_reduction_exact(self, rng):
        for _ in range(5):
            p = random_params(rng, 5, 3, 2)
            Y = rng.normal(size=(5, 3))
            t = objective_terms(Y, p)
            assert t["observation"] + t["prior_y"] == gplvm_objective(Y, p)
            assert neg_log_posterior(Y, p, include_dynamics=False) == gplvm_objective(Y, p)
            rest = neg_log_posterior(Y, p) - (t["dynamics"] + t["prior_x"])
            assert rest == pytest.approx(gplvm_objective(Y, p), abs=1e-12)


def _flat_params(p):
    return p.X, np.log(p.kernel_y.theta), np.log(p.kernel_x.theta), p.L_y, p.L_x


def fd_check(Y, p, segments=None, h=1e-6, include_dynamics=True):
    """Largest relative error between analytic and central-difference gradients."""
    f = (lambda q: neg_log_posterior(Y, q, segments)) if include_dynamics else (lambda q: gplvm_objective(Y, q))
    _, G = neg_log_posterior_grad(Y, p, segments, include_dynamics=include_dynamics)
    checks = []

    def rel(a, b):
        return abs(a - b) / max(1.0, abs(a), abs(b))

    for idx in np.ndindex(p.X.shape):
        up, dn = p.X.copy(), p.X.copy()
        up[idx] += h
        dn[idx] -= h
        checks.append(rel(G.X[idx], (f(p.replace(X=up)) - f(p.replace(X=dn))) / (2 * h)))
    for name, g in (("kernel_y", G.log_theta_y), ("kernel_x", G.log_theta_x)):
        spec = getattr(p, name)
        for i in range(spec.n_params):
            lt = np.log(spec.theta)
            up, dn = lt.copy(), lt.copy()
            up[i] += h
            dn[i] -= h
            fu = f(p.replace(**{name: spec.with_theta(np.exp(up))}))
            fdn = f(p.replace(**{name: spec.with_theta(np.exp(dn))}))
            checks.append(rel(g[i], (fu - fdn) / (2 * h)))
    for name, g in (("sigma2_y", G.log_sigma_y), ("sigma2_x", G.log_sigma_x)):
        s = getattr(p, name)
        fu = f(p.replace(**{name: s * np.exp(2 * h)}))
        fdn = f(p.replace(**{name: s * np.exp(-2 * h)}))
        checks.append(rel(g, (fu - fdn) / (2 * h)))
    for name, g in (("L_y", G.L_y), ("L_x", G.L_x)):
        F = getattr(p, name)
        free = F.free
        mask = np.tril(np.ones(F.L.shape, dtype=bool))
        gvec = g[mask]
        for i in range(free.size):
            up, dn = free.copy(), free.copy()
            up[i] += h
            dn[i] -= h
            fu = f(p.replace(**{name: CholeskyFactor.from_free(up, F.dim, F.rank)}))
            fdn = f(p.replace(**{name: CholeskyFactor.from_free(dn, F.dim, F.rank)}))
            checks.append(rel(gvec[i], (fu - fdn) / (2 * h)))
    return max(checks)


class TestGradient:
    @pytest.mark.parametrize("seed", range(4))
    def test_finite_differences(self, seed):
        rng = np.random.default_rng(100 + seed)
        p = random_params(rng, 4, 3, 2)
        assert fd_check(rng.normal(size=(4, 3)), p) < 1e-5

    def test_segments_and_gplvm(self, rng):
        p = random_params(rng, 6, 2, 2)
        Y = rng.normal(size=(6, 2))
        assert fd_check(Y, p, [(0, 3), (3, 6)]) < 1e-5
        assert fd_check(Y, p, include_dynamics=False) < 1e-5
        _, G = neg_log_posterior_grad(Y, p, include_dynamics=False)
        assert not np.any(G.L_x) and not np.any(G.log_theta_x)

    def test_x1_prior_contribution(self, rng):
        p = random_params(rng, 4, 2, 2)
        Y = rng.normal(size=(4, 2))
        q = p.replace(X=p.X.copy())
        _, G = neg_log_posterior_grad(Y, q)
        # removing the start prior by hand shifts only row 0, by exactly x_1
        terms_grad = G.X.copy()
        terms_grad[0] -= p.X[0]
        eps = 1e-6
        up = p.X.copy(); up[0, 0] += eps
        dn = p.X.copy(); dn[0, 0] -= eps
        no_prior = lambda X: neg_log_posterior(Y, p.replace(X=X)) - 0.5 * X[0] @ X[0]
        fd = (no_prior(up) - no_prior(dn)) / (2 * eps)
        assert terms_grad[0, 0] == pytest.approx(fd, rel=1e-5, abs=1e-7)


class TestSerialisation:
    def test_bit_exact(self, rng):
        p = random_params(rng, 5, 3, 2)
        q = loads_params(dumps_params(p))
        np.testing.assert_array_equal(q.X, p.X)
        np.testing.assert_array_equal(q.L_y.L, p.L_y.L)
        assert q.kernel_y == p.kernel_y and q.sigma2_x == p.sigma2_x

    def test_rejects_foreign(self):
        with pytest.raises(ValueError):
            loads_params('{"format": "other"}')

    def test_validation(self, rng):
        with pytest.raises(ValueError):
            GpdmParams(X=np.zeros((3, 2)), kernel_y=random_spec(rng), kernel_x=random_spec(rng),
                       L_y=CholeskyFactor.identity(2), L_x=CholeskyFactor.identity(3),
                       sigma2_y=0.1, sigma2_x=0.1)
        with pytest.raises(ValueError):
            GpdmParams(X=np.zeros((3, 2)), kernel_y=random_spec(rng), kernel_x=random_spec(rng),
                       L_y=CholeskyFactor.identity(2), L_x=CholeskyFactor.identity(2),
                       sigma2_y=0.0, sigma2_x=0.1)
