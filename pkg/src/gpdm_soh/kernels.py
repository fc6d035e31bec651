"""Primitive covariance functions and weighted multi-kernels.

A :class:`KernelSpec` is a weighted sum of up to six primitive kernels,

    k(x, x') = sum_l w_l k_l(x, x' | theta_l)  [+ theta_noise^-1 delta_{nn'}]

where the optional noise term is keyed on the *row index* of the points and
not on coordinate equality.  Weights are fixed constants; every entry of
every ``theta_l`` (and the noise precision, when present) is a positive
hyperparameter.

Primitive parameterisations (``r2 = ||x - x'||^2``, ``s = sqrt(g * r2)``)::

    rbf(a, g)                 a * exp(-g/2 * r2)
    linear(c)                 c * x.x'
    matern32(a, g)            a * (1 + sqrt3 s) exp(-sqrt3 s)
    matern52(a, g)            a * (1 + sqrt5 s + 5/3 s^2) exp(-sqrt5 s)
    rational_quadratic(a,g,q) a * (1 + g r2 / (2 q))^-q
    polynomial(c, b)          c * (x.x' + b)^degree

The text form used in configuration files is
``kernel = 1*rbf(1,2) + 1*linear(1) + noise(0.01)`` where the argument of
``noise`` is the variance (inverse of the precision).
"""
from __future__ import annotations

import re
from dataclasses import dataclass, replace

import numpy as np

__all__ = [
    "KERNEL_KINDS",
    "KernelTerm",
    "KernelSpec",
    "eval_kernel",
    "gram",
    "gram_grad",
    "gram_vjp",
    "cross_gram",
    "parse_kernel",
    "format_kernel",
]

_SQRT3 = np.sqrt(3.0)
_SQRT5 = np.sqrt(5.0)

KERNEL_KINDS = {
    "rbf": ("amplitude", "inv_lengthscale"),
    "linear": ("variance",),
    "matern32": ("amplitude", "inv_lengthscale"),
    "matern52": ("amplitude", "inv_lengthscale"),
    "rational_quadratic": ("amplitude", "inv_lengthscale", "alpha"),
    "polynomial": ("variance", "bias"),
}
MAX_TERMS = 6


@dataclass(frozen=True)
class KernelTerm:
    kind: str
    params: tuple
    weight: float = 1.0
    degree: int = 2

    def __post_init__(self):
        if self.kind not in KERNEL_KINDS:
            raise ValueError(f"unknown kernel kind {self.kind!r}")
        params = tuple(float(p) for p in self.params)
        if len(params) != len(KERNEL_KINDS[self.kind]):
            raise ValueError(
                f"{self.kind} takes {len(KERNEL_KINDS[self.kind])} hyperparameters, got {len(params)}"
            )
        if not all(np.isfinite(p) and p > 0 for p in params):
            raise ValueError(f"{self.kind} hyperparameters must be positive, got {params}")
        if not (np.isfinite(self.weight) and self.weight > 0):
            raise ValueError(f"kernel weight must be positive, got {self.weight}")
        if self.kind == "polynomial" and (int(self.degree) != self.degree or self.degree < 1):
            raise ValueError("polynomial degree must be a positive integer")
        object.__setattr__(self, "params", params)
        object.__setattr__(self, "weight", float(self.weight))
        object.__setattr__(self, "degree", int(self.degree))


@dataclass(frozen=True)
class KernelSpec:
    """Weighted sum of primitive kernels with an optional index-keyed noise term."""

    terms: tuple
    include_noise: bool = False
    noise_precision: float = 1.0
    jitter: float = 1e-8

    def __post_init__(self):
        terms = tuple(self.terms)
        if not terms:
            raise ValueError("a kernel needs at least one term")
        if len(terms) > MAX_TERMS:
            raise ValueError(f"at most {MAX_TERMS} kernel terms are supported")
        if not all(isinstance(t, KernelTerm) for t in terms):
            raise TypeError("terms must be KernelTerm instances")
        if not (np.isfinite(self.noise_precision) and self.noise_precision > 0):
            raise ValueError("noise precision must be positive")
        if self.jitter < 0:
            raise ValueError("jitter must be non-negative")
        object.__setattr__(self, "terms", terms)

    @classmethod
    def from_terms(cls, *terms, noise=None, jitter=1e-8):
        """Build from ``(kind, params[, weight])`` tuples; ``noise`` is a variance."""
        built = []
        for t in terms:
            if isinstance(t, KernelTerm):
                built.append(t)
            else:
                built.append(KernelTerm(*t))
        if noise is None:
            return cls(tuple(built), jitter=jitter)
        return cls(tuple(built), include_noise=True, noise_precision=1.0 / noise, jitter=jitter)

    @property
    def n_params(self):
        return sum(len(t.params) for t in self.terms) + int(self.include_noise)

    @property
    def theta(self):
        """Flat vector of all positive hyperparameters (noise precision last)."""
        vals = [p for t in self.terms for p in t.params]
        if self.include_noise:
            vals.append(self.noise_precision)
        return np.array(vals, dtype=float)

    def param_names(self):
        names = []
        for i, t in enumerate(self.terms):
            names.extend(f"{i}.{t.kind}.{n}" for n in KERNEL_KINDS[t.kind])
        if self.include_noise:
            names.append("noise_precision")
        return names

    def with_theta(self, theta):
        theta = np.asarray(theta, dtype=float)
        if theta.shape != (self.n_params,):
            raise ValueError(f"expected {self.n_params} hyperparameters, got shape {theta.shape}")
        terms, k = [], 0
        for t in self.terms:
            n = len(t.params)
            terms.append(replace(t, params=tuple(theta[k:k + n])))
            k += n
        noise = theta[k] if self.include_noise else self.noise_precision
        return replace(self, terms=tuple(terms), noise_precision=float(noise))

    def without_noise(self):
        return replace(self, include_noise=False)

    def __str__(self):
        return format_kernel(self)


# ---------------------------------------------------------------------------
# primitive evaluations on blocks of points


def _sqdist(A, B):
    # explicit differences keep the diagonal exactly zero and the result symmetric
    diff = A[:, None, :] - B[None, :, :]
    return np.einsum("abq,abq->ab", diff, diff)


def _term_block(term, A, B):
    """Return (K, dK/dtheta list, dK/dr2 or None, dK/d(dot) or None) for one term.

    The radial derivative is with respect to r2; the dot derivative with
    respect to x.x'.  Both exclude the weight.
    """
    p = term.params
    if term.kind in ("linear", "polynomial"):
        dot = A @ B.T
        if term.kind == "linear":
            (c,) = p
            return c * dot, [dot], None, np.full_like(dot, c)
        c, b = p
        deg = term.degree
        base = dot + b
        pw = base ** (deg - 1) if deg > 1 else np.ones_like(base)
        K = c * pw * base
        dK_dc = pw * base
        dK_db = c * deg * pw
        return K, [dK_dc, dK_db], None, c * deg * pw
    r2 = _sqdist(A, B)
    if term.kind == "rbf":
        a, g = p
        e = np.exp(-0.5 * g * r2)
        return a * e, [e, -0.5 * a * r2 * e], -0.5 * a * g * e, None
    if term.kind == "matern32":
        a, g = p
        s = np.sqrt(g * r2)
        e = np.exp(-_SQRT3 * s)
        K = a * (1.0 + _SQRT3 * s) * e
        return K, [K / a, -1.5 * a * r2 * e], -1.5 * a * g * e, None
    if term.kind == "matern52":
        a, g = p
        s = np.sqrt(g * r2)
        e = np.exp(-_SQRT5 * s)
        poly = 1.0 + _SQRT5 * s
        K = a * (poly + (5.0 / 3.0) * s * s) * e
        common = -(5.0 / 6.0) * a * poly * e
        return K, [K / a, common * r2], common * g, None
    if term.kind == "rational_quadratic":
        a, g, q = p
        u = 1.0 + g * r2 / (2.0 * q)
        base = u ** (-q)
        K = a * base
        dK_dg = -a * r2 * 0.5 * u ** (-q - 1.0)
        dK_dq = K * (-np.log(u) + (u - 1.0) / u)
        return K, [base, dK_dg, dK_dq], -0.5 * a * g * u ** (-q - 1.0), None
    raise ValueError(term.kind)  # pragma: no cover


def _as_rows(x):
    x = np.asarray(x, dtype=float)
    if x.ndim == 1:
        x = x[None, :]
    if x.ndim != 2:
        raise ValueError("points must be a 2-D array of shape (n, Q)")
    return x


def cross_gram(spec, A, B):
    """Noise-free cross-covariance matrix between row sets ``A`` and ``B``."""
    A, B = _as_rows(A), _as_rows(B)
    if A.shape[1] != B.shape[1]:
        raise ValueError(f"dimension mismatch: {A.shape[1]} vs {B.shape[1]}")
    K = np.zeros((A.shape[0], B.shape[0]))
    for t in spec.terms:
        K += t.weight * _term_block(t, A, B)[0]
    return K


def eval_kernel(spec, x, xp, same_index=False):
    """Evaluate ``k(x, x')`` for two single points.

    The noise term contributes only when ``same_index`` is true, i.e. when
    both arguments are the same indexed observation.
    """
    x = np.atleast_1d(np.asarray(x, dtype=float))
    xp = np.atleast_1d(np.asarray(xp, dtype=float))
    if x.shape != xp.shape or x.ndim != 1:
        raise ValueError(f"dimension mismatch: {x.shape} vs {xp.shape}")
    val = float(cross_gram(spec, x[None, :], xp[None, :])[0, 0])
    if spec.include_noise and same_index:
        val += 1.0 / spec.noise_precision
    return val


def gram(spec, rows, jitter=None):
    """Gram matrix over ``rows`` with index-keyed noise and diagonal jitter.

    ``jitter`` defaults to ``spec.jitter`` and is relative to the mean
    diagonal of the noise-free matrix; pass 0 to disable.
    """
    X = _as_rows(rows)
    if X.shape[0] < 1:
        raise ValueError("gram needs at least one point")
    K = cross_gram(spec, X, X)
    K = 0.5 * (K + K.T)
    rel = spec.jitter if jitter is None else jitter
    if rel:
        K[np.diag_indices_from(K)] += rel * max(np.mean(np.diag(K)), 0.0)
    if spec.include_noise:
        K[np.diag_indices_from(K)] += 1.0 / spec.noise_precision
    return K


def gram_grad(spec, rows):
    """Dense derivatives of the (jitter-free) Gram matrix.

    Returns ``(dtheta, dX)`` where ``dtheta`` has shape (P, T, T), one
    matrix per hyperparameter in :attr:`KernelSpec.theta` order, and ``dX``
    has shape (T, Q, T, T) with ``dX[n, q] = dK/dx_{n,q}``.  Meant for
    testing and small problems; optimisation uses :func:`gram_vjp`.
    """
    X = _as_rows(rows)
    T, Q = X.shape
    dtheta = []
    dX = np.zeros((T, Q, T, T))
    diff = X[:, None, :] - X[None, :, :]  # (T, T, Q): x_a - x_b
    for t in spec.terms:
        _, dps, d_r2, d_dot = _term_block(t, X, X)
        dtheta.extend(t.weight * d for d in dps)
        # first-argument derivative of k(x_a, x_b) w.r.t. x_a
        if d_r2 is not None:
            P = t.weight * 2.0 * d_r2[:, :, None] * diff
        else:
            P = t.weight * d_dot[:, :, None] * X[None, :, :]
        for n in range(T):
            for q in range(Q):
                dX[n, q, n, :] += P[n, :, q]
                dX[n, q, :, n] += P[n, :, q]
    if spec.include_noise:
        dtheta.append(-np.eye(T) / spec.noise_precision**2)
    return np.array(dtheta).reshape(len(dtheta), T, T), dX


def gram_vjp(spec, rows, G):
    """Contract ``G`` with the Gram derivatives.

    Returns ``(g_theta, g_X)`` with ``g_theta[i] = sum(G * dK/dtheta_i)``
    and ``g_X[n, q] = sum(G * dK/dx_{n,q})`` without materialising the
    per-coordinate matrices.
    """
    X = _as_rows(rows)
    G = np.asarray(G, dtype=float)
    H = G + G.T
    g_theta = []
    g_X = np.zeros_like(X)
    for t in spec.terms:
        _, dps, d_r2, d_dot = _term_block(t, X, X)
        g_theta.extend(t.weight * np.sum(G * d) for d in dps)
        if d_r2 is not None:
            W = t.weight * 2.0 * H * d_r2
            g_X += W.sum(1)[:, None] * X - W @ X
        else:
            g_X += (t.weight * H * d_dot) @ X
    if spec.include_noise:
        g_theta.append(-np.trace(G) / spec.noise_precision**2)
    return np.array(g_theta), g_X


# ---------------------------------------------------------------------------
# text form

_TERM_RE = re.compile(
    r"^\s*(?:(?P<w>[0-9.eE+\-]+)\s*\*\s*)?(?P<kind>[a-z_0-9]+)\s*\((?P<args>[^)]*)\)\s*$"
)


def _split_terms(text):
    out, depth, cur = [], 0, []
    for i, ch in enumerate(text):
        if ch == "(":
            depth += 1
        elif ch == ")":
            depth -= 1
        # a '+' that is not part of an exponent like 1e+3
        if ch == "+" and depth == 0 and not (i > 0 and text[i - 1] in "eE" and i > 1 and text[i - 2].isdigit()):
            out.append("".join(cur))
            cur = []
        else:
            cur.append(ch)
    out.append("".join(cur))
    out = [o.strip() for o in out]
    if any(not o for o in out):
        raise ValueError(f"empty term in kernel expression {text!r}")
    return out


def parse_kernel(text):
    """Parse ``w1*rbf(a,b) + w2*linear(c) [+ noise(var)]`` into a spec.

    A leading ``kernel =`` is accepted.  Polynomial degree is given as a
    keyword, ``polynomial(c, b, degree=3)``.
    """
    body = text.split("=", 1)[1] if re.match(r"^\s*kernel\s*=", text) else text
    terms, noise, precision = [], None, None
    for chunk in _split_terms(body):
        m = _TERM_RE.match(chunk)
        if not m:
            raise ValueError(f"cannot parse kernel term {chunk!r}")
        kind = m.group("kind")
        args = [a.strip() for a in m.group("args").split(",") if a.strip()]
        kw = {}
        pos = []
        for a in args:
            if "=" in a:
                k, v = a.split("=", 1)
                kw[k.strip()] = v.strip()
            else:
                pos.append(float(a))
        if kind == "noise":
            if m.group("w") or len(pos) + len(kw) != 1:
                raise ValueError("noise takes exactly one argument")
            noise = pos[0] if pos else 1.0 / float(kw["precision"])
            precision = float(kw["precision"]) if kw else None
            continue
        weight = float(m.group("w")) if m.group("w") else 1.0
        degree = int(kw.pop("degree", 2))
        if kw:
            raise ValueError(f"unknown kernel keywords {sorted(kw)}")
        terms.append(KernelTerm(kind, tuple(pos), weight, degree))
    if noise is not None and not noise > 0:
        raise ValueError("noise variance must be positive")
    spec = KernelSpec.from_terms(*terms, noise=noise)
    if precision is not None:
        spec = replace(spec, noise_precision=precision)
    return spec


def format_kernel(spec):
    """Inverse of :func:`parse_kernel`; floats are written round-trip exact."""
    parts = []
    for t in spec.terms:
        args = ",".join(repr(p) for p in t.params)
        if t.kind == "polynomial" and t.degree != 2:
            args += f",degree={t.degree}"
        parts.append(f"{t.weight!r}*{t.kind}({args})")
    if spec.include_noise:
        var = 1.0 / spec.noise_precision
        if 1.0 / var == spec.noise_precision:
            parts.append(f"noise({var!r})")
        else:
            parts.append(f"noise(precision={spec.noise_precision!r})")
    return " + ".join(parts)
