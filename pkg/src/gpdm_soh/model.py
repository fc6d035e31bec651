"""Kronecker-structured GPDM likelihoods, priors and analytic gradients.

Both the observation and the dynamics model share the covariance form

    Sigma = K (x) S + sigma^2 I,        S = L L^T,

acting on a row-major stacked matrix (entry ``(n, d)`` at ``n * D + d``),
so ``vec(Y) == Y.ravel()``.  All solves and log-determinants go through the
paired eigendecompositions of ``K`` and ``S``; ``Sigma`` is never formed.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field, replace

import numpy as np

from .kernels import KernelSpec, format_kernel, gram, gram_vjp, parse_kernel

__all__ = [
    "CholeskyFactor",
    "GpdmParams",
    "GpdmGradient",
    "StructuredCovariance",
    "structured_logdet_solve",
    "observation_nll",
    "dynamics_nll",
    "log_prior",
    "objective_terms",
    "neg_log_posterior",
    "neg_log_posterior_grad",
    "gplvm_objective",
    "transition_indices",
    "params_to_dict",
    "params_from_dict",
]

LOG_2PI = np.log(2.0 * np.pi)


@dataclass(frozen=True)
class CholeskyFactor:
    """Lower-triangular (or lower-trapezoidal, for low rank) factor with positive diagonal."""

    L: np.ndarray

    def __post_init__(self):
        L = np.array(self.L, dtype=float)
        if L.ndim != 2 or L.shape[1] > L.shape[0]:
            raise ValueError(f"factor must be (dim, rank) with rank <= dim, got {L.shape}")
        if np.any(np.triu(L, 1) != 0):
            raise ValueError("factor must be lower triangular")
        if np.any(np.diag(L) <= 0):
            raise ValueError("factor diagonal must be positive")
        L.setflags(write=False)
        object.__setattr__(self, "L", L)

    @classmethod
    def identity(cls, dim, rank=None):
        return cls(np.eye(dim, rank or dim))

    @property
    def dim(self):
        return self.L.shape[0]

    @property
    def rank(self):
        return self.L.shape[1]

    @property
    def cov(self):
        return self.L @ self.L.T

    def _mask(self):
        return np.tril(np.ones(self.L.shape, dtype=bool))

    @property
    def free(self):
        """Free entries in row-major order, diagonal stored as its log."""
        M = np.array(self.L)
        idx = np.arange(self.rank)
        M[idx, idx] = np.log(M[idx, idx])
        return M[self._mask()]

    @classmethod
    def from_free(cls, values, dim, rank=None):
        rank = rank or dim
        M = np.zeros((dim, rank))
        M[np.tril(np.ones((dim, rank), dtype=bool))] = values
        idx = np.arange(rank)
        M[idx, idx] = np.exp(M[idx, idx])
        return cls(M)

    def __eq__(self, other):
        return isinstance(other, CholeskyFactor) and np.array_equal(self.L, other.L)

    __hash__ = None


@dataclass(frozen=True)
class GpdmParams:
    X: np.ndarray
    kernel_y: KernelSpec
    kernel_x: KernelSpec
    L_y: CholeskyFactor
    L_x: CholeskyFactor
    sigma2_y: float
    sigma2_x: float

    def __post_init__(self):
        X = np.array(self.X, dtype=float)
        if X.ndim != 2:
            raise ValueError("latent matrix must be 2-D")
        if not np.all(np.isfinite(X)):
            raise ValueError("latent matrix has non-finite entries")
        if self.L_x.dim != X.shape[1]:
            raise ValueError(f"L_x is {self.L_x.dim}-dimensional but Q = {X.shape[1]}")
        if not (self.sigma2_y > 0 and self.sigma2_x > 0):
            raise ValueError("noise variances must be positive")
        X.setflags(write=False)
        object.__setattr__(self, "X", X)
        # the delta term is replaced by the explicit sigma^2 I
        object.__setattr__(self, "kernel_y", self.kernel_y.without_noise())
        object.__setattr__(self, "kernel_x", self.kernel_x.without_noise())
        object.__setattr__(self, "sigma2_y", float(self.sigma2_y))
        object.__setattr__(self, "sigma2_x", float(self.sigma2_x))

    @property
    def T(self):
        return self.X.shape[0]

    @property
    def Q(self):
        return self.X.shape[1]

    @property
    def D(self):
        return self.L_y.dim

    def replace(self, **kw):
        return replace(self, **kw)


@dataclass
class GpdmGradient:
    """Gradient in the unconstrained coordinates used by the optimiser.

    ``L_y`` / ``L_x`` hold derivatives with respect to the lower-triangular
    entries, the diagonal taken in log space.
    """

    X: np.ndarray
    log_theta_y: np.ndarray
    log_theta_x: np.ndarray
    log_sigma_y: float
    log_sigma_x: float
    L_y: np.ndarray
    L_x: np.ndarray

    def flat(self):
        mask_y = np.tril(np.ones(self.L_y.shape, dtype=bool))
        mask_x = np.tril(np.ones(self.L_x.shape, dtype=bool))
        return np.concatenate([
            self.X.ravel(), self.log_theta_y, self.log_theta_x,
            [self.log_sigma_y, self.log_sigma_x],
            self.L_y[mask_y], self.L_x[mask_x],
        ])


class StructuredCovariance:
    """``K (x) S + sigma2 I`` via eigendecompositions ``K = U diag(lam) U^T``, ``S = V diag(gam) V^T``."""

    def __init__(self, K, S, sigma2):
        self.K = np.asarray(K, dtype=float)
        self.S = np.asarray(S, dtype=float)
        self.sigma2 = float(sigma2)
        self.lam, self.U = np.linalg.eigh(0.5 * (self.K + self.K.T))
        self.gam, self.V = np.linalg.eigh(0.5 * (self.S + self.S.T))
        self.E = np.outer(self.lam, self.gam) + self.sigma2
        if not np.all(self.E > 0):
            raise np.linalg.LinAlgError(
                f"structured covariance is not positive definite (min eigenvalue {self.E.min():.3e})"
            )

    @property
    def shape(self):
        n = self.K.shape[0] * self.S.shape[0]
        return (n, n)

    def logdet(self):
        return float(np.sum(np.log(self.E)))

    def solve_mat(self, Y):
        """Solve with ``vec(Y)`` as right-hand side, returning the result as a matrix."""
        Y = np.asarray(Y, dtype=float)
        Yt = self.U.T @ Y @ self.V
        return self.U @ (Yt / self.E) @ self.V.T

    def solve(self, v):
        T, D = self.K.shape[0], self.S.shape[0]
        v = np.asarray(v, dtype=float)
        if v.shape != (T * D,):
            raise ValueError(f"vector must have length {T * D}, got {v.shape}")
        return self.solve_mat(v.reshape(T, D)).ravel()

    def dense(self):
        return np.kron(self.K, self.S) + self.sigma2 * np.eye(self.shape[0])


def structured_logdet_solve(cov, v):
    """Return ``(Sigma^-1 v, log|Sigma|)``."""
    return cov.solve(v), cov.logdet()


def transition_indices(T, segments=None):
    """Row indices of transition inputs/targets and sequence starts.

    ``segments`` is a list of ``(start, stop)`` row ranges, each an
    independent sequence; transitions never cross segment boundaries.
    """
    if segments is None:
        segments = [(0, T)]
    inp, tgt, starts = [], [], []
    covered = 0
    for s, e in segments:
        if not (0 <= s < e <= T):
            raise ValueError(f"bad segment {(s, e)} for {T} rows")
        inp.extend(range(s, e - 1))
        tgt.extend(range(s + 1, e))
        starts.append(s)
        covered += e - s
    if covered != T:
        raise ValueError("segments must cover every row exactly once")
    return np.array(inp, dtype=int), np.array(tgt, dtype=int), np.array(starts, dtype=int)


# ---------------------------------------------------------------------------
# objective pieces


def _gaussian_term(cov, Y, logdet_weight):
    alpha = cov.solve_mat(Y)
    quad = float(np.sum(Y * alpha))
    return 0.5 * logdet_weight * cov.logdet() + 0.5 * quad + 0.5 * Y.size * LOG_2PI, alpha


def _obs_cov(X, params):
    K = gram(params.kernel_y, X, jitter=0.0)
    return StructuredCovariance(K, params.L_y.cov, params.sigma2_y)


def _dyn_cov(X, params, inp):
    K = gram(params.kernel_x, X[inp], jitter=0.0)
    return StructuredCovariance(K, params.L_x.cov, params.sigma2_x)


def observation_nll(Y, params, weighted_logdet=False):
    """Negative log density of ``vec(Y)`` under ``K_Y (x) L_Y L_Y^T + sigma_Y^2 I``.

    With ``weighted_logdet`` the log-determinant is weighted by D instead
    of 1, reproducing the literal published objective.
    """
    Y = np.asarray(Y, dtype=float)
    if Y.shape != (params.T, params.D):
        raise ValueError(f"Y has shape {Y.shape}, expected {(params.T, params.D)}")
    cov = _obs_cov(params.X, params)
    val = _gaussian_term(cov, Y, params.D if weighted_logdet else 1.0)[0]
    if not np.isfinite(val):
        raise FloatingPointError("observation likelihood is not finite")
    return val


def dynamics_nll(X, params, segments=None, weighted_logdet=False):
    """Latent transition term plus the standard-normal prior on each sequence start."""
    X = np.asarray(X, dtype=float)
    T, Q = X.shape
    inp, tgt, starts = transition_indices(T, segments)
    if inp.size == 0:
        raise ValueError("dynamics need at least two consecutive latent points")
    cov = _dyn_cov(X, params, inp)
    val = _gaussian_term(cov, X[tgt], Q if weighted_logdet else 1.0)[0]
    val += 0.5 * float(np.sum(X[starts] ** 2))
    if not np.isfinite(val):
        raise FloatingPointError("dynamics likelihood is not finite")
    return val


def log_prior(spec, sigma2):
    """Negative log of the inverse priors: sum log theta + 2 log sigma."""
    return float(np.sum(np.log(spec.theta))) + float(np.log(sigma2))


def objective_terms(Y, params, segments=None, weighted_logdet=False):
    return {
        "observation": observation_nll(Y, params, weighted_logdet),
        "prior_y": log_prior(params.kernel_y, params.sigma2_y),
        "dynamics": dynamics_nll(params.X, params, segments, weighted_logdet),
        "prior_x": log_prior(params.kernel_x, params.sigma2_x),
    }


def gplvm_objective(Y, params, weighted_logdet=False):
    """Observation term and its priors only (the model without dynamics)."""
    return observation_nll(Y, params, weighted_logdet) + log_prior(params.kernel_y, params.sigma2_y)


def neg_log_posterior(Y, params, segments=None, weighted_logdet=False, include_dynamics=True):
    """Observation and dynamics terms with their priors.

    ``include_dynamics=False`` weights out the dynamics side (transitions,
    sequence-start prior and the latent kernel's priors), leaving exactly
    the GPLVM objective.
    """
    if not include_dynamics:
        return gplvm_objective(Y, params, weighted_logdet)
    t = objective_terms(Y, params, segments, weighted_logdet)
    return (t["observation"] + t["prior_y"]) + (t["dynamics"] + t["prior_x"])


# ---------------------------------------------------------------------------
# gradients


def _gaussian_grads(cov, Y, logdet_weight):
    """Derivatives of 0.5*w*log|Sigma| + 0.5*vec(Y)^T Sigma^-1 vec(Y).

    Returns value, alpha (= dF/dY as a matrix), dF/dK, dF/dS, dF/dsigma2.
    """
    val, A = _gaussian_term(cov, Y, logdet_weight)
    inv_E = 1.0 / cov.E
    w = logdet_weight
    dK = 0.5 * (w * (cov.U * (inv_E @ cov.gam)) @ cov.U.T - A @ cov.S @ A.T)
    dS = 0.5 * (w * (cov.V * (cov.lam @ inv_E)) @ cov.V.T - A.T @ cov.K @ A)
    ds2 = 0.5 * (w * float(np.sum(inv_E)) - float(np.sum(A * A)))
    return val, A, dK, dS, ds2


def _factor_grad(dS, factor):
    G = 2.0 * (0.5 * (dS + dS.T)) @ factor.L
    G = np.tril(G)
    idx = np.arange(factor.rank)
    G[idx, idx] *= factor.L[idx, idx]
    return G


def neg_log_posterior_grad(Y, params, segments=None, weighted_logdet=False, include_dynamics=True):
    """Value and :class:`GpdmGradient` of the negative log posterior.

    With ``include_dynamics=False`` this is the GPLVM objective and the
    dynamics entries of the gradient are zero.
    """
    Y = np.asarray(Y, dtype=float)
    X = params.X
    T, Q = X.shape
    if Y.shape != (T, params.D):
        raise ValueError(f"Y has shape {Y.shape}, expected {(T, params.D)}")

    cov_y = _obs_cov(X, params)
    val_y, _, dK, dS, ds2 = _gaussian_grads(cov_y, Y, params.D if weighted_logdet else 1.0)
    gth_y, gX = gram_vjp(params.kernel_y, X, dK)
    theta_y = params.kernel_y.theta
    g_log_theta_y = gth_y * theta_y + 1.0
    g_log_sigma_y = 2.0 * params.sigma2_y * ds2 + 2.0
    g_Ly = _factor_grad(dS, params.L_y)
    value = val_y + log_prior(params.kernel_y, params.sigma2_y)

    theta_x = params.kernel_x.theta
    if include_dynamics:
        inp, tgt, starts = transition_indices(T, segments)
        if inp.size == 0:
            raise ValueError("dynamics need at least two consecutive latent points")
        cov_x = _dyn_cov(X, params, inp)
        val_x, A, dKx, dSx, ds2x = _gaussian_grads(cov_x, X[tgt], Q if weighted_logdet else 1.0)
        gth_x, gXin = gram_vjp(params.kernel_x, X[inp], dKx)
        gX = gX.copy()
        np.add.at(gX, inp, gXin)
        np.add.at(gX, tgt, A)
        np.add.at(gX, starts, X[starts])
        val_x += 0.5 * float(np.sum(X[starts] ** 2))
        g_log_theta_x = gth_x * theta_x + 1.0
        g_log_sigma_x = 2.0 * params.sigma2_x * ds2x + 2.0
        g_Lx = _factor_grad(dSx, params.L_x)
        value = value + (val_x + log_prior(params.kernel_x, params.sigma2_x))
    else:
        g_log_theta_x = np.zeros_like(theta_x)
        g_log_sigma_x = 0.0
        g_Lx = np.zeros(params.L_x.L.shape)

    if not np.isfinite(value):
        raise FloatingPointError("objective is not finite")
    grad = GpdmGradient(gX, g_log_theta_y, g_log_theta_x, float(g_log_sigma_y),
                        float(g_log_sigma_x), g_Ly, g_Lx)
    return value, grad


# ---------------------------------------------------------------------------
# serialisation

FORMAT_NAME = "gpdm-params"
FORMAT_VERSION = 1


def _arr(a):
    a = np.asarray(a, dtype=float)
    return {"shape": list(a.shape), "data": [float(v) for v in a.ravel()]}


def _unarr(d):
    return np.array(d["data"], dtype=float).reshape(d["shape"])


def params_to_dict(params):
    """JSON-ready dict; floats survive a round trip bit-exactly."""
    return {
        "format": FORMAT_NAME,
        "version": FORMAT_VERSION,
        "kernel_y": format_kernel(params.kernel_y),
        "kernel_x": format_kernel(params.kernel_x),
        "X": _arr(params.X),
        "L_y": _arr(params.L_y.L),
        "L_x": _arr(params.L_x.L),
        "sigma2_y": params.sigma2_y,
        "sigma2_x": params.sigma2_x,
    }


def params_from_dict(d):
    if d.get("format") != FORMAT_NAME:
        raise ValueError(f"not a {FORMAT_NAME} record")
    if d.get("version") != FORMAT_VERSION:
        raise ValueError(f"unsupported {FORMAT_NAME} version {d.get('version')}")
    return GpdmParams(
        X=_unarr(d["X"]),
        kernel_y=parse_kernel(d["kernel_y"]),
        kernel_x=parse_kernel(d["kernel_x"]),
        L_y=CholeskyFactor(_unarr(d["L_y"])),
        L_x=CholeskyFactor(_unarr(d["L_x"])),
        sigma2_y=float(d["sigma2_y"]),
        sigma2_x=float(d["sigma2_x"]),
    )


def dumps_params(params):
    return json.dumps(params_to_dict(params), indent=1)


def loads_params(text):
    return params_from_dict(json.loads(text))
