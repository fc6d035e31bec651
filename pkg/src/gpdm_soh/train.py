"""PCA initialisation and MAP fitting of the GPDM.

The objective has exact symmetries that make it unbounded below if every
parameter is left free: a rescaling of the latent matrix absorbed by the
inverse lengthscales, an overall scale traded between kernel amplitudes
and the Cholesky factors, and noise variances driven to zero by their
inverse priors.  The fit therefore optimises in a reparameterisation that
pins those directions (see :class:`TrainConfig`) without changing the
objective itself.
"""
from __future__ import annotations

import json
import logging
import warnings
from dataclasses import asdict, dataclass, field

import numpy as np
from sklearn.base import BaseEstimator

from .kernels import KernelSpec, parse_kernel
from .model import (
    CholeskyFactor,
    GpdmParams,
    neg_log_posterior_grad,
    params_from_dict,
    params_to_dict,
)
from .optim import minimize
from .validation import check_matrix, check_segments

log = logging.getLogger(__name__)

__all__ = [
    "DEFAULT_KERNEL",
    "TrainConfig",
    "GpdmModel",
    "GPDM",
    "pca_init",
    "resolve_q",
    "init_kernel",
    "fit",
    "save_model",
    "load_model",
]

DEFAULT_KERNEL = "1*rbf(1,1) + 1*linear(1)"


@dataclass(frozen=True)
class TrainConfig:
    """Optimisation settings.

    ``fix_latent_norm`` keeps the Frobenius norm of the latent matrix at its
    initial value, ``unit_det_factors`` constrains the product of each
    Cholesky diagonal to 1, and ``noise_floor`` bounds each noise variance
    below by that fraction of the mean column variance it models.
    """

    Q: object = "all"
    optimizer: str = "cg"
    max_iters: int = 500
    rel_tol: float = 1e-6
    seed: int = 0
    restarts: int = 1
    weighted_logdet: bool = False
    init_jitter: float = 0.01
    init_hyperparameters: bool = True
    fix_latent_norm: bool = True
    unit_det_factors: bool = True
    noise_floor: float = 1e-6

    def __post_init__(self):
        if self.max_iters < 0:
            raise ValueError("max_iters must be >= 0")
        if not self.rel_tol > 0:
            raise ValueError("rel_tol must be positive")
        if self.restarts < 1:
            raise ValueError("restarts must be >= 1")
        if self.optimizer not in ("cg", "gd"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")
        if self.Q != "all" and (int(self.Q) != self.Q or int(self.Q) < 1):
            raise ValueError("Q must be a positive integer or 'all'")


def resolve_q(Y, Q="all", tol=1e-10):
    """Number of latent dimensions; ``"all"`` keeps every non-degenerate component."""
    Y = check_matrix(Y)
    if Q != "all":
        Q = int(Q)
        if Q > Y.shape[1]:
            raise ValueError(f"Q={Q} exceeds the data dimension {Y.shape[1]}")
        return Q
    Yc = Y - Y.mean(0)
    s = np.linalg.svd(Yc, compute_uv=False)
    if s.size == 0 or s[0] == 0:
        return 1
    return max(1, int(np.sum(s > tol * s[0])))


def pca_init(Y, Q):
    """Project centred ``Y`` on its top-``Q`` principal directions.

    Components are ordered by decreasing variance and signed so that the
    largest-magnitude loading of each direction is positive.  Returns the
    latent matrix; with zero-variance data it is all zeros.
    """
    Y = check_matrix(Y)
    T, D = Y.shape
    Q = int(Q)
    if not 1 <= Q <= D:
        raise ValueError(f"Q must lie in [1, {D}], got {Q}")
    Yc = Y - Y.mean(0)
    if not np.any(Yc):
        warnings.warn("data has zero variance; latent points initialised at zero", RuntimeWarning)
        return np.zeros((T, Q))
    evals, evecs = np.linalg.eigh(Yc.T @ Yc / max(T - 1, 1))
    order = np.argsort(evals)[::-1][:Q]
    W = evecs[:, order]
    flip = np.sign(W[np.argmax(np.abs(W), axis=0), np.arange(Q)])
    W = W * flip
    return Yc @ W


def _pca_components(Y, Q):
    Yc = Y - Y.mean(0)
    evals, evecs = np.linalg.eigh(Yc.T @ Yc / max(Y.shape[0] - 1, 1))
    order = np.argsort(evals)[::-1][:Q]
    W = evecs[:, order]
    return W * np.sign(W[np.argmax(np.abs(W), axis=0), np.arange(Q)]), evals[order]


def _median_sqdist(X):
    if X.shape[0] < 2:
        return 1.0
    diff = X[:, None, :] - X[None, :, :]
    d2 = np.einsum("abq,abq->ab", diff, diff)[np.triu_indices(X.shape[0], 1)]
    med = float(np.median(d2))
    return med if med > 0 else 1.0


def init_kernel(spec, X):
    """Unit amplitudes/variances, inverse lengthscales 1/median squared distance."""
    g = 1.0 / _median_sqdist(X)
    theta = []
    for t in spec.terms:
        if t.kind in ("rbf", "matern32", "matern52"):
            theta += [1.0, g]
        elif t.kind == "rational_quadratic":
            theta += [1.0, g, 1.0]
        elif t.kind == "linear":
            theta += [1.0]
        else:
            theta += [1.0, 1.0]
    spec = spec.without_noise()
    return spec.with_theta(np.array(theta))


# ---------------------------------------------------------------------------
# reparameterisation between GpdmParams and a flat optimiser vector


class _Packer:
    def __init__(self, template, cfg, floor_y, floor_x, r0, dynamics=True):
        self.t = template
        self.cfg = cfg
        self.floor_y = floor_y
        self.floor_x = floor_x
        self.r0 = r0
        self.dynamics = dynamics
        T, Q = template.X.shape
        self.sizes = [
            T * Q,
            template.kernel_y.n_params,
            template.kernel_x.n_params if dynamics else 0,
            1,
            1 if dynamics else 0,
            self._n_factor(template.L_y),
            self._n_factor(template.L_x) if dynamics else 0,
        ]
        self.offsets = np.concatenate([[0], np.cumsum(self.sizes)])

    def _n_factor(self, F):
        n = int(np.tril(np.ones(F.L.shape, dtype=bool)).sum())
        return n - 1 if self.cfg.unit_det_factors else n

    def _split(self, z):
        return [z[self.offsets[i]:self.offsets[i + 1]] for i in range(len(self.sizes))]

    def _factor_free(self, F):
        free = F.free
        if not self.cfg.unit_det_factors:
            return free
        # drop the last diagonal entry; it equals minus the sum of the others
        return np.delete(free, self._last_diag(F))

    def _last_diag(self, F):
        mask = np.tril(np.ones(F.L.shape, dtype=bool))
        pos = np.cumsum(mask.ravel()) - 1
        r = F.rank - 1
        return int(pos[r * F.rank + r])

    def _diag_positions(self, F):
        mask = np.tril(np.ones(F.L.shape, dtype=bool))
        pos = np.cumsum(mask.ravel()) - 1
        return np.array([pos[i * F.rank + i] for i in range(F.rank)], dtype=int)

    def _factor_from(self, vals, F):
        if self.cfg.unit_det_factors:
            diag = self._diag_positions(F)
            last = diag[-1]
            full = np.insert(vals, last, 0.0)
            full[last] = -np.sum(full[diag[:-1]])
            vals = full
        return CholeskyFactor.from_free(vals, F.dim, F.rank)

    def _factor_grad(self, G, F):
        g = G[np.tril(np.ones(G.shape, dtype=bool))]
        if not self.cfg.unit_det_factors:
            return g
        diag = self._diag_positions(F)
        last = diag[-1]
        g = g.copy()
        g[diag[:-1]] -= g[last]
        return np.delete(g, last)

    def pack(self, p):
        if self.dynamics:
            parts = [p.X.ravel(), np.log(p.kernel_y.theta), np.log(p.kernel_x.theta),
                     [np.log(p.sigma2_y - self.floor_y)], [np.log(p.sigma2_x - self.floor_x)],
                     self._factor_free(p.L_y), self._factor_free(p.L_x)]
        else:
            parts = [p.X.ravel(), np.log(p.kernel_y.theta), [], [np.log(p.sigma2_y - self.floor_y)],
                     [], self._factor_free(p.L_y), []]
        return np.concatenate([np.asarray(a, dtype=float) for a in parts])

    def _latent(self, zx):
        Z = zx.reshape(self.t.X.shape)
        if not self.cfg.fix_latent_norm or self.r0 == 0:
            return Z, None
        nz = np.linalg.norm(Z)
        return self.r0 * Z / nz, nz

    def unpack(self, z):
        zx, ty, tx, sy, sx, ly, lx = self._split(z)
        X, _ = self._latent(zx)
        return self.t.replace(
            X=X,
            kernel_y=self.t.kernel_y.with_theta(np.exp(ty)),
            kernel_x=self.t.kernel_x.with_theta(np.exp(tx)) if self.dynamics else self.t.kernel_x,
            sigma2_y=self.floor_y + float(np.exp(sy[0])),
            sigma2_x=self.floor_x + float(np.exp(sx[0])) if self.dynamics else self.t.sigma2_x,
            L_y=self._factor_from(ly, self.t.L_y),
            L_x=self._factor_from(lx, self.t.L_x) if self.dynamics else self.t.L_x,
        )

    def grad(self, z, p, G):
        zx = self._split(z)[0]
        X, nz = self._latent(zx)
        gX = G.X
        if nz is not None:
            Xh = X / self.r0
            gX = (self.r0 / nz) * (gX - np.sum(gX * Xh) * Xh)
        # d sigma2 / d rho = sigma2 - floor; d sigma2 / d log sigma = 2 sigma2
        gy = G.log_sigma_y * (p.sigma2_y - self.floor_y) / (2.0 * p.sigma2_y)
        parts = [gX.ravel(), G.log_theta_y]
        if self.dynamics:
            gx = G.log_sigma_x * (p.sigma2_x - self.floor_x) / (2.0 * p.sigma2_x)
            parts += [G.log_theta_x, [gy], [gx], self._factor_grad(G.L_y, p.L_y),
                      self._factor_grad(G.L_x, p.L_x)]
        else:
            parts += [[gy], self._factor_grad(G.L_y, p.L_y)]
        return np.concatenate([np.asarray(a, dtype=float) for a in parts])


def _objective(Y, packer, segments, weighted_logdet):
    def fg(z):
        p = packer.unpack(z)
        val, G = neg_log_posterior_grad(Y, p, segments, weighted_logdet,
                                        include_dynamics=packer.dynamics)
        return val, packer.grad(z, p, G)
    return fg


def initial_params(Y, Q, kernel_y, kernel_x, cfg, segments=None, rng=None, dynamics=True):
    """Starting point: PCA latents (optionally jittered) and data-scaled hyperparameters."""
    X = pca_init(Y, Q)
    if rng is not None and cfg.init_jitter > 0 and np.any(X):
        X = X + cfg.init_jitter * X.std(0, keepdims=True) * rng.standard_normal(X.shape)
    var_y = float(np.mean(np.var(Y, axis=0)))
    var_x = float(np.mean(np.var(X, axis=0))) if np.any(X) else 1.0
    var_y = var_y if var_y > 0 else 1.0
    if cfg.init_hyperparameters:
        ky, kx = init_kernel(kernel_y, X), init_kernel(kernel_x, X)
    else:
        ky, kx = kernel_y, kernel_x
    floor_y = cfg.noise_floor * var_y
    floor_x = cfg.noise_floor * var_x
    p = GpdmParams(
        X=X, kernel_y=ky, kernel_x=kx,
        L_y=CholeskyFactor.identity(Y.shape[1]), L_x=CholeskyFactor.identity(Q),
        sigma2_y=0.01 * var_y + floor_y, sigma2_x=0.01 * var_x + floor_x,
    )
    return p, floor_y, floor_x


def optimize_params(Y, params, cfg, floor_y, floor_x, segments=None, dynamics=True):
    """Run the configured optimiser from ``params``; returns (params, OptimResult)."""
    packer = _Packer(params, cfg, floor_y, floor_x, float(np.linalg.norm(params.X)), dynamics)
    z0 = packer.pack(params)
    res = minimize(_objective(Y, packer, segments, cfg.weighted_logdet), z0,
                   method=cfg.optimizer, max_iters=cfg.max_iters, rel_tol=cfg.rel_tol)
    return packer.unpack(res.x), res


# ---------------------------------------------------------------------------
# fitted model container


@dataclass
class GpdmModel:
    """A trained GPDM together with the data it was conditioned on.

    ``Y`` is the centred training matrix actually modelled; ``y_center`` is
    added back when decoding.  ``segments`` delimit independent sequences
    (one per battery); ``target_segment`` picks the sequence to forecast.
    """

    params: GpdmParams
    Y: np.ndarray
    y_center: np.ndarray
    segments: list
    objective_trace: list
    converged: bool
    grad_norm: float
    columns: list = field(default_factory=list)
    target_segment: int = -1
    meta: dict = field(default_factory=dict)
    weighted_logdet: bool = False

    @property
    def objective(self):
        return self.objective_trace[-1]

    @property
    def last_latent(self):
        return self.params.X[self.segments[self.target_segment][1] - 1]


FORMAT_NAME = "gpdm-model"
FORMAT_VERSION = 1


def _clean(o):
    if isinstance(o, dict):
        return {str(k): _clean(v) for k, v in o.items()}
    if isinstance(o, (list, tuple)):
        return [_clean(v) for v in o]
    if isinstance(o, np.ndarray):
        return _clean(o.tolist())
    if isinstance(o, (np.floating,)):
        return float(o)
    if isinstance(o, (np.integer,)):
        return int(o)
    if isinstance(o, (np.bool_,)):
        return bool(o)
    return o


def model_to_dict(model):
    return {
        "format": FORMAT_NAME,
        "version": FORMAT_VERSION,
        "params": params_to_dict(model.params),
        "Y": {"shape": list(model.Y.shape), "data": [float(v) for v in model.Y.ravel()]},
        "y_center": [float(v) for v in model.y_center],
        "segments": [[int(s), int(e)] for s, e in model.segments],
        "objective_trace": [float(v) for v in model.objective_trace],
        "converged": bool(model.converged),
        "grad_norm": float(model.grad_norm),
        "columns": list(model.columns),
        "target_segment": int(model.target_segment),
        "weighted_logdet": bool(model.weighted_logdet),
        "meta": _clean(model.meta),
    }


def model_from_dict(d):
    if d.get("format") != FORMAT_NAME:
        raise ValueError(f"not a {FORMAT_NAME} file")
    if d.get("version") != FORMAT_VERSION:
        raise ValueError(f"unsupported {FORMAT_NAME} version {d.get('version')}")
    Y = np.array(d["Y"]["data"], dtype=float).reshape(d["Y"]["shape"])
    return GpdmModel(
        params=params_from_dict(d["params"]),
        Y=Y,
        y_center=np.array(d["y_center"], dtype=float),
        segments=[tuple(s) for s in d["segments"]],
        objective_trace=list(d["objective_trace"]),
        converged=d["converged"],
        grad_norm=d["grad_norm"],
        columns=list(d["columns"]),
        target_segment=d["target_segment"],
        meta=d["meta"],
        weighted_logdet=d.get("weighted_logdet", False),
    )


def dumps_model(model):
    return json.dumps(model_to_dict(model), indent=1)


def loads_model(text):
    return model_from_dict(json.loads(text))


def save_model(model, path):
    from .io_utils import atomic_write_text

    atomic_write_text(path, dumps_model(model))


def load_model(path):
    with open(path) as fh:
        return loads_model(fh.read())


# ---------------------------------------------------------------------------
# estimator


def _as_spec(k):
    if isinstance(k, KernelSpec):
        return k
    return parse_kernel(k)


class GPDM(BaseEstimator):
    """Gaussian process dynamical model with Kronecker-structured outputs.

    Parameters mirror :class:`TrainConfig`; ``kernel_y`` / ``kernel_x`` are
    :class:`KernelSpec` objects or kernel strings.

    Attributes set by :meth:`fit`: ``model_`` (a :class:`GpdmModel`),
    ``latent_``, ``objective_trace_``, ``converged_``.
    """

    def __init__(self, kernel_y=DEFAULT_KERNEL, kernel_x=DEFAULT_KERNEL, n_components="all",
                 optimizer="cg", max_iter=500, tol=1e-6, restarts=1, random_state=0,
                 weighted_logdet=False, init_jitter=0.01, init_hyperparameters=True,
                 fix_latent_norm=True, unit_det_factors=True, noise_floor=1e-6, center=True):
        self.kernel_y = kernel_y
        self.kernel_x = kernel_x
        self.n_components = n_components
        self.optimizer = optimizer
        self.max_iter = max_iter
        self.tol = tol
        self.restarts = restarts
        self.random_state = random_state
        self.weighted_logdet = weighted_logdet
        self.init_jitter = init_jitter
        self.init_hyperparameters = init_hyperparameters
        self.fix_latent_norm = fix_latent_norm
        self.unit_det_factors = unit_det_factors
        self.noise_floor = noise_floor
        self.center = center

    def _config(self):
        return TrainConfig(
            Q=self.n_components, optimizer=self.optimizer, max_iters=self.max_iter,
            rel_tol=self.tol, seed=self.random_state, restarts=self.restarts,
            weighted_logdet=self.weighted_logdet, init_jitter=self.init_jitter,
            init_hyperparameters=self.init_hyperparameters, fix_latent_norm=self.fix_latent_norm,
            unit_det_factors=self.unit_det_factors, noise_floor=self.noise_floor,
        )

    def fit(self, Y, segments=None, target_segment=-1, columns=None):
        cfg = self._config()
        Y = check_matrix(Y, min_rows=3)
        segments = check_segments(segments, Y.shape[0])
        center = Y.mean(0) if self.center else np.zeros(Y.shape[1])
        Yc = Y - center
        Q = resolve_q(Yc, cfg.Q)
        ky, kx = _as_spec(self.kernel_y), _as_spec(self.kernel_x)

        best = None
        n_runs = cfg.restarts if cfg.max_iters > 0 else 1
        for r in range(n_runs):
            # restarts perturb the PCA start; with no optimisation the plain PCA state is returned
            rng = np.random.default_rng([cfg.seed, r]) if cfg.max_iters > 0 else None
            p0, fy, fx = initial_params(Yc, Q, ky, kx, cfg, segments, rng)
            p, res = optimize_params(Yc, p0, cfg, fy, fx, segments)
            log.info("restart %d: objective %.6f after %d iterations (%s)", r, res.fun, res.n_iter, res.message)
            if best is None or res.fun < best[1].fun:
                best = (p, res)
        p, res = best
        self.model_ = GpdmModel(
            params=p, Y=Yc, y_center=center, segments=list(segments),
            objective_trace=list(res.trace), converged=res.converged,
            grad_norm=res.grad_norm, columns=list(columns or []),
            target_segment=target_segment, weighted_logdet=cfg.weighted_logdet,
            meta={"config": asdict(cfg)},
        )
        self.latent_ = p.X
        self.objective_trace_ = self.model_.objective_trace
        self.converged_ = res.converged
        return self

    def predict(self, n_steps, start=None):
        """Mean-prediction rollout of ``n_steps`` observations after ``start``."""
        from .forecast import rollout_path

        X, Ym, _, _ = rollout_path(self.model_, n_steps, start)
        return Ym

    def score(self, Y=None):
        """Negative of the final objective (higher is better)."""
        return -self.model_.objective


def fit(ts, kernels=(DEFAULT_KERNEL, DEFAULT_KERNEL), cfg=None):
    """Fit a GPDM to a :class:`~gpdm_soh.dataio.TrainingSet`.

    ``kernels`` is ``(kernel_y, kernel_x)``.  Each battery is an
    independent sequence; the target battery's sequence is the one
    forecast by :func:`gpdm_soh.forecast.rollout`.
    """
    cfg = cfg or TrainConfig()
    est = GPDM(
        kernel_y=kernels[0], kernel_x=kernels[1], n_components=cfg.Q, optimizer=cfg.optimizer,
        max_iter=cfg.max_iters, tol=cfg.rel_tol, restarts=cfg.restarts, random_state=cfg.seed,
        weighted_logdet=cfg.weighted_logdet, init_jitter=cfg.init_jitter,
        init_hyperparameters=cfg.init_hyperparameters, fix_latent_norm=cfg.fix_latent_norm,
        unit_det_factors=cfg.unit_det_factors, noise_floor=cfg.noise_floor,
    )
    est.fit(ts.Y, segments=ts.segments, target_segment=ts.target_index, columns=ts.columns)
    model = est.model_
    model.meta.update(ts.metadata())
    return model
