"""Comparison models: GP regression on ``[n, m]`` and the GPLVM (GPDM without dynamics)."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import cho_factor, cho_solve
from scipy.optimize import minimize as sp_minimize
from sklearn.base import BaseEstimator, RegressorMixin

from .forecast import GpPosterior
from .kernels import KernelSpec, cross_gram, gram, gram_vjp, parse_kernel
from .model import CholeskyFactor, gplvm_objective
from .optim import minimize
from .train import (
    DEFAULT_KERNEL,
    TrainConfig,
    init_kernel,
    initial_params,
    optimize_params,
    resolve_q,
)
from .validation import check_matrix

log = logging.getLogger(__name__)

__all__ = [
    "GP_KERNEL",
    "GpRegressionModel",
    "GPRegressor",
    "fit_gp",
    "predict_gp",
    "GplvmModel",
    "GPLVM",
    "fit_gplvm",
    "gplvm_reconstruct",
    "gplvm_forecast",
]

GP_KERNEL = "1*matern32(1,1) + 1*matern52(1,1)"


def _spec(k):
    return k if isinstance(k, KernelSpec) else parse_kernel(k)


# ---------------------------------------------------------------------------
# GP regression


def gp_nll_grad(spec, Z, y, sigma2):
    """Zero-mean GP negative log marginal likelihood and its gradient.

    Returns ``(nll, d/dtheta, d/dsigma2)``; the kernel's own noise term, if
    any, is ignored in favour of ``sigma2``.
    """
    spec = spec.without_noise()
    T = len(y)
    K = gram(spec, Z, jitter=0.0) + sigma2 * np.eye(T)
    c = cho_factor(K, lower=True)
    alpha = cho_solve(c, y)
    nll = 0.5 * float(y @ alpha) + float(np.sum(np.log(np.diag(c[0])))) + 0.5 * T * np.log(2 * np.pi)
    W = cho_solve(c, np.eye(T)) - np.outer(alpha, alpha)
    g_theta, _ = gram_vjp(spec, Z, 0.5 * W)
    return nll, g_theta, 0.5 * float(np.trace(W))


@dataclass
class GpRegressionModel:
    """Fitted single-output GP on normalised ``[n, m]`` inputs."""

    spec: KernelSpec
    sigma2: float
    Z: np.ndarray
    y: np.ndarray
    col_lo: np.ndarray = field(default_factory=lambda: np.zeros(2))
    col_hi: np.ndarray = field(default_factory=lambda: np.ones(2))
    target_label: float = 0.0
    objective_trace: list = field(default_factory=list)
    converged: bool = False

    def __post_init__(self):
        K = gram(self.spec, self.Z, jitter=0.0) + self.sigma2 * np.eye(len(self.y))
        self._chol = cho_factor(K, lower=True)
        self._alpha = cho_solve(self._chol, self.y)

    def predict_normalized(self, Zs, include_noise=False):
        Zs = np.atleast_2d(np.asarray(Zs, dtype=float))
        Ks = cross_gram(self.spec, self.Z, Zs)
        mean = Ks.T @ self._alpha
        v = cho_solve(self._chol, Ks)
        kss = np.array([cross_gram(self.spec, z[None], z[None])[0, 0] for z in Zs])
        var = kss - np.einsum("ts,ts->s", Ks, v)
        if include_noise:
            var = var + self.sigma2
        return mean, var


def _fit_gp_arrays(Z, y, spec, cfg, noise_floor=1e-6, theta_floor=1e-6):
    Z = check_matrix(Z, name="Z")
    y = np.asarray(y, dtype=float).ravel()
    if len(y) != len(Z):
        raise ValueError("inputs and targets differ in length")
    spec = init_kernel(_spec(spec), Z) if cfg.init_hyperparameters else _spec(spec).without_noise()
    var_y = float(np.var(y)) or 1.0
    floor = noise_floor * var_y
    # the inverse priors reward switching an unused term off without limit;
    # floors relative to the starting values keep the objective bounded
    t_floor = theta_floor * spec.theta
    P = spec.n_params

    def unpack(z):
        return spec.with_theta(t_floor + np.exp(z[:P])), floor + float(np.exp(z[P]))

    def fg(z):
        s, s2 = unpack(z)
        nll, g_t, g_s = gp_nll_grad(s, Z, y, s2)
        # inverse priors on each hyperparameter and on the noise variance
        val = nll + float(np.sum(np.log(s.theta))) + np.log(s2)
        g = np.concatenate([(g_t + 1.0 / s.theta) * (s.theta - t_floor), [(g_s + 1.0 / s2) * (s2 - floor)]])
        return val, g

    z0 = np.concatenate([np.log(spec.theta - t_floor), [np.log(0.01 * var_y)]])
    best = None
    for r in range(cfg.restarts):
        zr = z0 if r == 0 else z0 + 0.1 * np.random.default_rng([cfg.seed, r]).standard_normal(z0.shape)
        res = minimize(fg, zr, method=cfg.optimizer, max_iters=cfg.max_iters, rel_tol=cfg.rel_tol)
        if best is None or res.fun < best.fun:
            best = res
    s, s2 = unpack(best.x)
    return s, s2, best


def fit_gp(ts, spec=GP_KERNEL, cfg=None):
    """MAP fit of a GP from ``[n, m]`` to SOH on a :class:`~gpdm_soh.dataio.TrainingSet`."""
    cfg = cfg or TrainConfig()
    ci, li, si = (ts.columns.index(c) for c in ("cycle", "label", "soh"))
    Z = ts.Y[:, [ci, li]]
    y = ts.denormalize(ts.Y)[:, si]
    s, s2, res = _fit_gp_arrays(Z, y, spec, cfg)
    return GpRegressionModel(
        spec=s, sigma2=s2, Z=Z, y=y, col_lo=ts.col_lo[[ci, li]], col_hi=ts.col_hi[[ci, li]],
        target_label=float(ts.target_label), objective_trace=res.trace, converged=res.converged,
    )


def predict_gp(model, cycles, label=None, include_noise=False):
    """Predictive ``(mean, variance)`` of SOH at raw cycle numbers for battery ``label``.

    ``label`` is in normalised units and defaults to the target battery.
    """
    cycles = np.asarray(cycles, dtype=float).ravel()
    n = (cycles - model.col_lo[0]) / (model.col_hi[0] - model.col_lo[0])
    m = model.target_label if label is None else float(label)
    return model.predict_normalized(np.column_stack([n, np.full_like(n, m)]), include_noise)


class GPRegressor(RegressorMixin, BaseEstimator):
    """Estimator wrapper around the GP baseline for arbitrary input matrices."""

    def __init__(self, kernel=GP_KERNEL, optimizer="cg", max_iter=500, tol=1e-6, restarts=1,
                 random_state=0, noise_floor=1e-6):
        self.kernel = kernel
        self.optimizer = optimizer
        self.max_iter = max_iter
        self.tol = tol
        self.restarts = restarts
        self.random_state = random_state
        self.noise_floor = noise_floor

    def fit(self, X, y):
        cfg = TrainConfig(optimizer=self.optimizer, max_iters=self.max_iter, rel_tol=self.tol,
                          restarts=self.restarts, seed=self.random_state)
        s, s2, res = _fit_gp_arrays(X, y, self.kernel, cfg, self.noise_floor)
        self.model_ = GpRegressionModel(spec=s, sigma2=s2, Z=np.asarray(X, dtype=float),
                                        y=np.asarray(y, dtype=float).ravel(),
                                        objective_trace=res.trace, converged=res.converged)
        self.kernel_ = s
        self.sigma2_ = s2
        return self

    def predict(self, X, return_std=False):
        mean, var = self.model_.predict_normalized(check_matrix(X, name="X"))
        if return_std:
            return mean, np.sqrt(np.maximum(var, 0.0))
        return mean


# ---------------------------------------------------------------------------
# GPLVM


@dataclass
class GplvmModel:
    """GPLVM fit: latent matrix plus observation-side parameters only."""

    params: object
    Y: np.ndarray
    y_center: np.ndarray
    objective_trace: list
    converged: bool
    columns: list = field(default_factory=list)
    meta: dict = field(default_factory=dict)

    @property
    def objective(self):
        return self.objective_trace[-1]

    def posterior(self):
        p = self.params
        return GpPosterior(p.kernel_y, p.X, self.Y, p.L_y.cov, p.sigma2_y)


def fit_gplvm(ts, spec=DEFAULT_KERNEL, cfg=None):
    """Optimise ``{X, theta_Y, L_Y, sigma_Y}`` on the observation term and priors."""
    cfg = cfg or TrainConfig()
    est = GPLVM(kernel=spec, n_components=cfg.Q, optimizer=cfg.optimizer, max_iter=cfg.max_iters,
                tol=cfg.rel_tol, restarts=cfg.restarts, random_state=cfg.seed,
                weighted_logdet=cfg.weighted_logdet, init_jitter=cfg.init_jitter,
                fix_latent_norm=cfg.fix_latent_norm, unit_det_factors=cfg.unit_det_factors,
                noise_floor=cfg.noise_floor)
    est.fit(ts.Y, columns=ts.columns)
    est.model_.meta.update(ts.metadata())
    return est.model_


class GPLVM(BaseEstimator):
    """Gaussian process latent variable model with PCA initialisation."""

    def __init__(self, kernel=DEFAULT_KERNEL, n_components="all", optimizer="cg", max_iter=500,
                 tol=1e-6, restarts=1, random_state=0, weighted_logdet=False, init_jitter=0.01,
                 fix_latent_norm=True, unit_det_factors=True, noise_floor=1e-6):
        self.kernel = kernel
        self.n_components = n_components
        self.optimizer = optimizer
        self.max_iter = max_iter
        self.tol = tol
        self.restarts = restarts
        self.random_state = random_state
        self.weighted_logdet = weighted_logdet
        self.init_jitter = init_jitter
        self.fix_latent_norm = fix_latent_norm
        self.unit_det_factors = unit_det_factors
        self.noise_floor = noise_floor

    def fit(self, Y, columns=None):
        cfg = TrainConfig(Q=self.n_components, optimizer=self.optimizer, max_iters=self.max_iter,
                          rel_tol=self.tol, seed=self.random_state, restarts=self.restarts,
                          weighted_logdet=self.weighted_logdet, init_jitter=self.init_jitter,
                          fix_latent_norm=self.fix_latent_norm, unit_det_factors=self.unit_det_factors,
                          noise_floor=self.noise_floor)
        Y = check_matrix(Y, min_rows=3)
        center = Y.mean(0)
        Yc = Y - center
        Q = resolve_q(Yc, cfg.Q)
        k = _spec(self.kernel)
        best = None
        n_runs = cfg.restarts if cfg.max_iters > 0 else 1
        for r in range(n_runs):
            rng = np.random.default_rng([cfg.seed, r]) if cfg.max_iters > 0 else None
            p0, fy, fx = initial_params(Yc, Q, k, k, cfg, rng=rng, dynamics=False)
            p, res = optimize_params(Yc, p0, cfg, fy, fx, dynamics=False)
            if best is None or res.fun < best[1].fun:
                best = (p, res)
        p, res = best
        self.model_ = GplvmModel(params=p, Y=Yc, y_center=center, objective_trace=list(res.trace),
                                 converged=res.converged, columns=list(columns or []))
        self.latent_ = p.X
        return self

    def transform(self, Y=None):
        """Latent coordinates of the training rows."""
        return self.latent_

    def reconstruct(self, rows, mask):
        return gplvm_reconstruct(self.model_, rows, mask)

    def score(self, Y=None):
        return -float(gplvm_objective(self.model_.Y, self.model_.params, self.weighted_logdet))


def gplvm_reconstruct(model, rows, mask, return_latent=False):
    """Complete partially observed rows.

    ``rows`` are in the units of the training matrix; ``mask`` is True where
    a value is unknown.  For each row a test latent is initialised at the
    training row nearest in the known columns and moved to maximise the
    predictive density of those columns; the unknown columns are then
    filled with the decoded mean.
    """
    rows = np.atleast_2d(np.asarray(rows, dtype=float))
    mask = np.atleast_2d(np.asarray(mask, dtype=bool))
    if rows.shape != mask.shape or rows.shape[1] != model.Y.shape[1]:
        raise ValueError("rows and mask must both be R x D with D matching the model")
    if np.any(mask.all(axis=1)):
        raise ValueError("every row needs at least one known column")
    post = model.posterior()
    X = model.params.X
    s2 = model.params.sigma2_y
    Ytrain = model.Y + model.y_center
    out = rows.copy()
    latents = np.zeros((len(rows), X.shape[1]))
    for i, (r, mk) in enumerate(zip(rows, mask)):
        known = ~mk
        if not np.all(np.isfinite(r[known])):
            raise ValueError(f"row {i} has non-finite known values")
        start = X[np.argmin(np.sum((Ytrain[:, known] - r[known]) ** 2, axis=1))]
        if not mk.any():
            latents[i] = start
            continue

        def nll(x):
            m, C = post(x)
            res = r[known] - (m + model.y_center)[known]
            Ck = C[np.ix_(known, known)] + s2 * np.eye(known.sum())
            sign, logdet = np.linalg.slogdet(Ck)
            if sign <= 0:
                return np.inf
            return 0.5 * logdet + 0.5 * float(res @ np.linalg.solve(Ck, res))

        opt = sp_minimize(nll, start, method="L-BFGS-B")
        x = opt.x if np.isfinite(opt.fun) and opt.fun <= nll(start) else start
        m, _ = post(x)
        out[i, mk] = (m + model.y_center)[mk]
        latents[i] = x
    return (out, latents) if return_latent else out


def gplvm_forecast(model, cycles):
    """SOH for future target cycles by reconstructing rows from the known ``[n, m]`` columns."""
    meta = model.meta
    cols = meta["columns"]
    lo, hi = np.asarray(meta["col_lo"]), np.asarray(meta["col_hi"])
    ci, li, si = cols.index("cycle"), cols.index("label"), cols.index("soh")
    cycles = np.asarray(cycles, dtype=float)
    rows = np.zeros((len(cycles), len(cols)))
    rows[:, ci] = (cycles - lo[ci]) / (hi[ci] - lo[ci])
    rows[:, li] = meta["target_label"]
    mask = np.ones_like(rows, dtype=bool)
    mask[:, [ci, li]] = False
    done = gplvm_reconstruct(model, rows, mask)
    return lo[si] + done[:, si] * (hi[si] - lo[si])
