"""Mean-prediction rollout, observation decoding and EOL/RUL extraction."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .kernels import cross_gram
from .model import StructuredCovariance, transition_indices
from .kernels import gram

log = logging.getLogger(__name__)

__all__ = [
    "GpPosterior",
    "ForecastResult",
    "latent_step",
    "observe",
    "rollout_path",
    "rollout",
    "eol_rul",
    "NOT_REACHED",
]

NOT_REACHED = "not reached"
Z95 = 1.96


class GpPosterior:
    """Conditional of a Kronecker-structured GP given ``vec(targets)``.

    For an input ``x`` the cross-covariance with the training outputs is
    ``k(x) (x) S`` so that

        mean(x) = S A^T k(x),           A = Sigma^-1 vec(targets) as a matrix
        cov(x)  = k(x, x) S - (k (x) S)^T Sigma^-1 (k (x) S)
    """

    def __init__(self, spec, inputs, targets, S, sigma2):
        self.spec = spec
        self.inputs = np.asarray(inputs, dtype=float)
        self.targets = np.asarray(targets, dtype=float)
        K = gram(spec, self.inputs, jitter=0.0)
        self.cov = StructuredCovariance(K, S, sigma2)
        self.A = self.cov.solve_mat(self.targets)
        self.S = self.cov.S
        self._gam2 = self.cov.gam**2

    def __call__(self, x):
        x = np.atleast_2d(np.asarray(x, dtype=float))
        k = cross_gram(self.spec, self.inputs, x)[:, 0]
        mean = self.S @ (self.A.T @ k)
        kxx = cross_gram(self.spec, x, x)[0, 0]
        proj = self.cov.U.T @ k
        w = (proj**2) @ (self._gam2 / self.cov.E)
        cov = kxx * self.S - (self.cov.V * w) @ self.cov.V.T
        return mean, 0.5 * (cov + cov.T)


def dynamics_posterior(model):
    p = model.params
    inp, tgt, _ = transition_indices(p.T, model.segments)
    return GpPosterior(p.kernel_x, p.X[inp], p.X[tgt], p.L_x.cov, p.sigma2_x)


def observation_posterior(model):
    p = model.params
    return GpPosterior(p.kernel_y, p.X, model.Y, p.L_y.cov, p.sigma2_y)


def latent_step(model, x):
    """(mean, covariance) of the next latent point given ``x``."""
    x = np.asarray(x, dtype=float)
    if not np.all(np.isfinite(x)):
        raise ValueError("latent point must be finite")
    return dynamics_posterior(model)(x)


def observe(model, x):
    """(mean, covariance) of the observation decoded from latent ``x``.

    The mean includes the column centring removed before fitting, so it
    is in the normalised units of the training matrix.
    """
    mean, cov = observation_posterior(model)(x)
    return mean + model.y_center, cov


def rollout_path(model, n_steps, start=None, bound_factor=10.0):
    """Iterate the latent mean ``n_steps`` times from ``start``.

    ``start`` defaults to the final latent point of the target sequence.
    Returns ``(latent_path, y_mean, y_cov, truncated)`` in normalised units;
    the rollout stops early if the latent norm exceeds ``bound_factor``
    times the largest training latent norm.
    """
    dyn = dynamics_posterior(model)
    obs = observation_posterior(model)
    x = np.asarray(model.last_latent if start is None else start, dtype=float)
    radius = float(np.max(np.linalg.norm(model.params.X, axis=1)))
    bound = bound_factor * radius if radius > 0 else np.inf
    xs, ms, cs = [], [], []
    truncated = False
    for _ in range(int(n_steps)):
        x, _ = dyn(x)
        if not np.all(np.isfinite(x)) or np.linalg.norm(x) > bound:
            truncated = True
            log.warning("latent rollout diverged after %d steps; forecast truncated", len(xs))
            break
        m, c = obs(x)
        xs.append(x)
        ms.append(m + model.y_center)
        cs.append(c)
    Q, D = model.params.Q, model.params.D
    return (np.array(xs).reshape(-1, Q), np.array(ms).reshape(-1, D),
            np.array(cs).reshape(-1, D, D), truncated)


@dataclass
class ForecastResult:
    cycles: np.ndarray
    y_mean: np.ndarray
    y_var: np.ndarray
    soh_mean: np.ndarray
    soh_std: np.ndarray
    latent_path: np.ndarray
    eol: object
    rul: object
    columns: list = field(default_factory=list)
    truncated: bool = False
    threshold: float = 0.8
    train_cycles: int = 0

    @property
    def soh_lo(self):
        return self.soh_mean - Z95 * self.soh_std

    @property
    def soh_hi(self):
        return self.soh_mean + Z95 * self.soh_std

    def to_csv(self):
        attrs = [c for c in self.columns if c not in ("cycle", "label", "soh")]
        idx = {c: i for i, c in enumerate(self.columns)}
        header = ["cycle", "soh_mean", "soh_lo", "soh_hi"] + [f"{a}_mean" for a in attrs]
        lines = [",".join(header)]
        for i, n in enumerate(self.cycles):
            row = [str(int(n)), repr(float(self.soh_mean[i])), repr(float(self.soh_lo[i])),
                   repr(float(self.soh_hi[i]))]
            row += [repr(float(self.y_mean[i, idx[a]])) for a in attrs]
            lines.append(",".join(row))
        return "\n".join(lines) + "\n"

    def latent_csv(self):
        Q = self.latent_path.shape[1] if self.latent_path.size else 0
        lines = [",".join(["cycle"] + [f"x{q}" for q in range(Q)])]
        for i, n in enumerate(self.cycles[: len(self.latent_path)]):
            lines.append(",".join([str(int(n))] + [repr(float(v)) for v in self.latent_path[i]]))
        return "\n".join(lines) + "\n"


def eol_rul(soh, threshold, current_cycle, cycles=None):
    """First cycle with ``SOH <= threshold`` and the cycles remaining from ``current_cycle``.

    ``cycles`` labels the series (default 1, 2, ...).  Returns
    ``(NOT_REACHED, NOT_REACHED)`` when the threshold is never met.
    """
    soh = np.asarray(soh, dtype=float)
    if soh.size == 0:
        raise ValueError("SOH series is empty")
    cycles = np.arange(1, soh.size + 1) if cycles is None else np.asarray(cycles)
    hit = np.flatnonzero(soh <= threshold)
    if hit.size == 0:
        return NOT_REACHED, NOT_REACHED
    eol = int(cycles[hit[0]])
    return eol, eol - int(current_cycle)


def rollout(model, horizon, threshold=0.8, pin_deterministic_columns=True, bound_factor=10.0,
            include_noise=False):
    """Forecast the target battery from its last training cycle up to ``horizon``.

    Uses the column normalisation stored in ``model.meta`` (written by
    :func:`gpdm_soh.train.fit`) to report attributes in raw units.  The band
    uses the decoded covariance alone; with ``include_noise`` it describes
    a new observation instead, adding ``sigma2_y``.
    """
    meta = model.meta
    T = int(meta.get("target_train_cycles", model.segments[model.target_segment][1]
                     - model.segments[model.target_segment][0]))
    if horizon <= T:
        raise ValueError(f"horizon {horizon} must exceed the {T} training cycles")
    if not 0 < threshold <= 1:
        raise ValueError("threshold must lie in (0, 1]")
    D = model.params.D
    columns = list(meta.get("columns", model.columns)) or [f"y{d}" for d in range(D)]
    lo = np.asarray(meta.get("col_lo", np.zeros(D)), dtype=float)
    hi = np.asarray(meta.get("col_hi", np.ones(D)), dtype=float)
    scale = hi - lo

    X, Ym, C, truncated = rollout_path(model, horizon - T, bound_factor=bound_factor)
    cycles = np.arange(T + 1, T + 1 + len(X))
    if pin_deterministic_columns and "cycle" in columns:
        Ym[:, columns.index("cycle")] = (cycles - lo[columns.index("cycle")]) / scale[columns.index("cycle")]
    if pin_deterministic_columns and "label" in columns and "target_label" in meta:
        Ym[:, columns.index("label")] = float(meta["target_label"])
    if include_noise:
        C = C + model.params.sigma2_y * np.eye(D)[None]
    y_raw = lo + Ym * scale
    var_raw = C * np.outer(scale, scale)[None]
    s = columns.index("soh") if "soh" in columns else 0
    soh_var = var_raw[:, s, s] if len(X) else np.zeros(0)
    if np.any(soh_var < -1e-10):
        log.warning("negative predictive variance %.3e clamped to zero", soh_var.min())
    soh_std = np.sqrt(np.maximum(soh_var, 0.0))
    soh_mean = y_raw[:, s] if len(X) else np.zeros(0)
    if len(X):
        eol, rul = eol_rul(soh_mean, threshold, T, cycles)
    else:
        eol, rul = NOT_REACHED, NOT_REACHED
    return ForecastResult(
        cycles=cycles, y_mean=y_raw, y_var=var_raw, soh_mean=soh_mean, soh_std=soh_std,
        latent_path=X, eol=eol, rul=rul, columns=columns, truncated=truncated,
        threshold=threshold, train_cycles=T,
    )
