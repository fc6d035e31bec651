"""Scoring, synthetic fleets, experiment matrices and report tables."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .dataio import BatteryDataset, minmax_fit

log = logging.getLogger(__name__)


def rmse(pred, truth):
    """Root-mean-square error over all points."""
    pred = np.asarray(pred, dtype=float).ravel()
    truth = np.asarray(truth, dtype=float).ravel()
    if pred.shape != truth.shape:
        raise ValueError(f"length mismatch: {pred.size} predictions for {truth.size} targets")
    if pred.size == 0:
        raise ValueError("rmse needs at least one point")
    return float(np.sqrt(np.mean((pred - truth) ** 2)))


@dataclass(frozen=True)
class FadeParams:
    """Fleet-mean capacity-fade generator ``1 - a n - b (exp(c n) - 1) + ripple``."""

    a: float = 1.0e-3
    b: float = 1.0e-2
    c: float = 2.0e-2
    ripple: float = 2.0e-3
    period: float = 25.0
    jitter: float = 0.1
    v0: float = 3.2
    v1: float = 0.6
    t0: float = 40.0
    t1: float = 8.0
    i0: float = 7000.0
    attr_noise: float = 0.1


def synth_fleet(seed, M=3, N=120, fade=None, noise=0.005):
    fade = fade or FadeParams()
    if M < 1:
        raise ValueError("M must be >= 1")
    if N < 10:
        raise ValueError("N must be >= 10")
    rng = np.random.default_rng(seed)
    n = np.arange(1, N + 1, dtype=float)
    out = []
    for m in range(M):
        a, b, c = (p * np.exp(fade.jitter * rng.standard_normal()) for p in (fade.a, fade.b, fade.c))
        phase = rng.uniform(0, 2 * np.pi)
        clean = 1 - a * (n - 1) - b * np.expm1(c * (n - 1)) + fade.ripple * (np.sin(2 * np.pi * (n - 1) / fade.period + phase) - np.sin(phase))
        soh = clean + noise * rng.standard_normal(N)
        soh[0] = 1.0
        if np.any(soh <= 0):
            raise ValueError(f"fade parameters drive SOH to zero within {N} cycles")
        eps = fade.attr_noise * noise
        attrs = {
            "midpoint_voltage": fade.v0 + fade.v1 * soh + fade.v1 * eps * rng.standard_normal(N),
            "midpoint_temperature": fade.t0 - fade.t1 * soh + fade.t1 * eps * rng.standard_normal(N),
            "energy": fade.i0 * soh * (1 + eps * rng.standard_normal(N)),
        }
        out.append(BatteryDataset(
            battery_id=f"SYN{m + 1}", cycles=np.arange(1, N + 1), soh=soh, capacity=2.0 * soh,
            attributes=attrs, normalization={k: minmax_fit(v) for k, v in attrs.items()},
            meta={"generator": {"seed": int(seed), "a": a, "b": b, "c": c, "phase": phase, "noise": noise}},
        ))
    return out


# ---------------------------------------------------------------------------
# experiment matrices

METHODS = ("gpdm", "gpdm_no_transfer", "gp", "gplvm")
DEFAULT_RATIOS = (0.33, 0.50, 0.70)


@dataclass(frozen=True)
class ExperimentConfig:
    """One sweep over (target, ratio, method, seed).

    ``datasets`` is either a list of :class:`BatteryDataset` or ``None``
    with ``synthetic`` set, in which case each seed generates its own fleet
    via :func:`synth_fleet`.  ``seeds`` is a count starting at ``seed``.
    """

    datasets: tuple = None
    targets: tuple = ()
    ratios: tuple = DEFAULT_RATIOS
    methods: tuple = ("gpdm", "gpdm_no_transfer", "gp")
    seeds: int = 5
    seed: int = 0
    attributes: tuple = ("midpoint_temperature", "midpoint_voltage", "energy")
    kernels: dict = field(default_factory=dict)
    synthetic: dict = None
    threshold: float = 0.8
    max_iters: int = 500
    restarts: int = 1
    Q: object = "all"

    def __post_init__(self):
        if self.seeds < 1:
            raise ValueError("seeds must be >= 1")
        if not self.ratios or any(not 0 < r <= 1 for r in self.ratios):
            raise ValueError("ratios must lie in (0, 1]")
        bad = [m for m in self.methods if m not in METHODS]
        if bad:
            raise ValueError(f"unknown methods {bad}; choose from {METHODS}")
        if (self.datasets is None) == (self.synthetic is None):
            raise ValueError("give exactly one of datasets or synthetic")
        unknown = set(self.kernels) - {"gpdm_y", "gpdm_x", "gp", "gplvm"}
        if unknown:
            raise ValueError(f"unknown kernel keys {sorted(unknown)}")

    @property
    def seed_values(self):
        return tuple(range(self.seed, self.seed + self.seeds))

    def kernel(self, key):
        from .baselines import GP_KERNEL
        from .train import DEFAULT_KERNEL

        return self.kernels.get(key, GP_KERNEL if key == "gp" else DEFAULT_KERNEL)

    def fleet(self, seed):
        if self.synthetic is not None:
            s = dict(self.synthetic)
            fade = FadeParams(**s.pop("fade", {}))
            return synth_fleet(seed, fade=fade, **s)
        return list(self.datasets)

    def target_ids(self, seed=None):
        if self.targets:
            return tuple(self.targets)
        return (self.fleet(self.seed)[-1].battery_id,)


def load_config(path, seed=None):
    """Parse an experiment TOML file.

    Recognised tables: ``[experiment]`` (targets, ratios, methods, seeds,
    seed, attributes, threshold, max_iters, restarts, q, data),
    ``[synthetic]`` (batteries, cycles, noise, and a nested ``fade``
    table) and ``[kernels]`` (gpdm_y, gpdm_x, gp, gplvm).  ``data`` points
    to a directory of processed datasets, relative to the file.
    """
    import sys
    from pathlib import Path

    if sys.version_info >= (3, 11):
        import tomllib
    else:
        import tomli as tomllib
    from .dataio import load_datasets

    path = Path(path)
    with open(path, "rb") as fh:
        raw = tomllib.load(fh)
    unknown = set(raw) - {"experiment", "synthetic", "kernels"}
    if unknown:
        raise ValueError(f"unknown config tables {sorted(unknown)}")
    ex = dict(raw.get("experiment", {}))
    allowed = {"targets", "ratios", "methods", "seeds", "seed", "attributes", "threshold",
               "max_iters", "restarts", "q", "data"}
    bad = set(ex) - allowed
    if bad:
        raise ValueError(f"unknown [experiment] keys {sorted(bad)}")
    datasets = None
    if "data" in ex:
        datasets = tuple(load_datasets(path.parent / ex.pop("data")))
    synthetic = None
    if "synthetic" in raw:
        s = dict(raw["synthetic"])
        synthetic = {"M": int(s.pop("batteries", 3)), "N": int(s.pop("cycles", 120)),
                     "noise": float(s.pop("noise", 0.005)), "fade": dict(s.pop("fade", {}))}
        if s:
            raise ValueError(f"unknown [synthetic] keys {sorted(s)}")
    kw = {}
    for key in ("targets", "ratios", "methods", "attributes"):
        if key in ex:
            kw[key] = tuple(ex[key])
    for key in ("seeds", "max_iters", "restarts"):
        if key in ex:
            kw[key] = int(ex[key])
    if "threshold" in ex:
        kw["threshold"] = float(ex["threshold"])
    if "q" in ex:
        kw["Q"] = ex["q"]
    kw["seed"] = int(ex.get("seed", 0)) if seed is None else int(seed)
    return ExperimentConfig(datasets=datasets, synthetic=synthetic,
                            kernels=dict(raw.get("kernels", {})), **kw)


@dataclass
class CellResult:
    battery: str
    ratio: float
    method: str
    seed: int
    rmse: float
    eol_pred: object = None
    eol_true: object = None
    eol_error: float = float("nan")
    status: str = "ok"
    reason: str = ""
    cycles: np.ndarray = None
    soh_mean: np.ndarray = None
    soh_lo: np.ndarray = None
    soh_hi: np.ndarray = None
    truth: np.ndarray = None

    @property
    def key(self):
        return (self.battery, self.ratio, self.method)


def _eol_error(pred, true):
    if isinstance(pred, str) or isinstance(true, str) or pred is None or true is None:
        return float("nan")
    return float(pred - true)


def run_cell(cfg, battery, ratio, method, seed):
    """Train, forecast and score one matrix cell; failures become NaN with a reason."""
    from .baselines import fit_gp, fit_gplvm, gplvm_forecast, predict_gp
    from .dataio import assemble_transfer
    from .forecast import eol_rul, rollout
    from .train import TrainConfig, fit

    try:
        fleet = cfg.fleet(seed)
        ids = [d.battery_id for d in fleet]
        if battery not in ids:
            raise ValueError(f"unknown target {battery!r}")
        target = fleet[ids.index(battery)]
        pool = [target] if method == "gpdm_no_transfer" else fleet
        ts, truth = assemble_transfer(pool, battery, ratio, cfg.attributes)
        if truth.size == 0:
            return CellResult(battery, ratio, method, seed, float("nan"), status="not applicable",
                              reason="no held-out cycles")
        tcfg = TrainConfig(Q=cfg.Q, max_iters=cfg.max_iters, restarts=cfg.restarts, seed=seed)
        cycles = ts.heldout_cycles
        lo = hi = None
        if method in ("gpdm", "gpdm_no_transfer"):
            model = fit(ts, (cfg.kernel("gpdm_y"), cfg.kernel("gpdm_x")), tcfg)
            fr = rollout(model, ts.target_full_cycles, cfg.threshold)
            if fr.truncated:
                raise FloatingPointError(f"latent rollout diverged after {len(fr.cycles)} steps")
            mean, lo, hi = fr.soh_mean, fr.soh_lo, fr.soh_hi
        elif method == "gp":
            model = fit_gp(ts, cfg.kernel("gp"), tcfg)
            mean, var = predict_gp(model, cycles)
            sd = np.sqrt(np.maximum(var, 0.0))
            lo, hi = mean - 1.96 * sd, mean + 1.96 * sd
        else:
            model = fit_gplvm(ts, cfg.kernel("gplvm"), tcfg)
            mean = gplvm_forecast(model, cycles)
        score = rmse(mean, truth)
        ntrain = ts.target_train_cycles
        eol_p, _ = eol_rul(mean, cfg.threshold, ntrain, cycles)
        eol_t, _ = eol_rul(target.soh, cfg.threshold, ntrain, target.cycles)
        return CellResult(battery, ratio, method, seed, score, eol_p, eol_t, _eol_error(eol_p, eol_t),
                          cycles=cycles, soh_mean=mean, soh_lo=lo, soh_hi=hi, truth=truth)
    except Exception as exc:  # a failed cell never aborts the matrix
        log.warning("cell %s/%s/%s/seed %d failed: %s", battery, ratio, method, seed, exc)
        return CellResult(battery, ratio, method, seed, float("nan"), status="failed",
                          reason=f"{type(exc).__name__}: {exc}")


def _run_cell_args(args):
    return run_cell(*args)


@dataclass
class ReportRow:
    battery: str
    ratio: float
    method: str
    rmse_per_seed: list
    eol_error_per_seed: list
    seeds: list

    @property
    def mean_rmse(self):
        return float(np.mean(self.rmse_per_seed))

    @property
    def mean_eol_error(self):
        v = np.asarray(self.eol_error_per_seed, dtype=float)
        return float(np.mean(v[np.isfinite(v)])) if np.any(np.isfinite(v)) else float("nan")

    @property
    def n_failed(self):
        return int(np.sum(~np.isfinite(self.rmse_per_seed)))


def _num(v):
    return "nan" if v is None or not np.isfinite(v) else repr(float(v))


@dataclass
class ReportTable:
    rows: list
    cells: list = field(default_factory=list)

    HEADER = ["battery", "ratio", "method", "n_seeds", "mean_rmse", "rmse_per_seed",
              "mean_eol_error", "n_failed"]

    def lookup(self, battery, ratio, method):
        for r in self.rows:
            if (r.battery, r.ratio, r.method) == (battery, ratio, method):
                return r
        raise KeyError((battery, ratio, method))

    def to_csv(self):
        lines = [",".join(self.HEADER)]
        for r in self.rows:
            lines.append(",".join([
                r.battery, repr(float(r.ratio)), r.method, str(len(r.rmse_per_seed)), _num(r.mean_rmse),
                ";".join(_num(v) for v in r.rmse_per_seed), _num(r.mean_eol_error), str(r.n_failed),
            ]))
        return "\n".join(lines) + "\n"

    def cells_csv(self):
        lines = ["battery,ratio,method,seed,rmse,eol_pred,eol_true,status,reason"]
        for c in self.cells:
            reason = c.reason.replace(",", ";").replace("\n", " ")
            lines.append(",".join([c.battery, repr(float(c.ratio)), c.method, str(c.seed), _num(c.rmse),
                                   str(c.eol_pred), str(c.eol_true), c.status, reason]))
        return "\n".join(lines) + "\n"


def experiment_cells(cfg):
    return [(cfg, b, r, m, s) for b in cfg.target_ids() for r in cfg.ratios
            for m in cfg.methods for s in cfg.seed_values]


def run_experiment(cfg, jobs=1):
    """Evaluate every (target, ratio, method, seed) cell and aggregate over seeds.

    Cells are independent; with ``jobs > 1`` they run in worker processes.
    Results are assembled in matrix order, so the table does not depend on
    scheduling.
    """
    cells = experiment_cells(cfg)
    if jobs > 1 and len(cells) > 1:
        from concurrent.futures import ProcessPoolExecutor

        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(_run_cell_args, cells))
    else:
        results = [_run_cell_args(c) for c in cells]
    rows = []
    for b in cfg.target_ids():
        for r in cfg.ratios:
            for m in cfg.methods:
                sel = [c for c in results if c.key == (b, r, m)]
                rows.append(ReportRow(b, r, m, [c.rmse for c in sel], [c.eol_error for c in sel],
                                      [c.seed for c in sel]))
    return ReportTable(rows=rows, cells=results)


# ---------------------------------------------------------------------------
# side-by-side comparison and figures


def comparison_csv(table):
    methods = list(dict.fromkeys(r.method for r in table.rows))
    keys = list(dict.fromkeys((r.battery, r.ratio) for r in table.rows))
    lines = [",".join(["battery", "ratio"] + methods)]
    for b, ratio in keys:
        vals = []
        for m in methods:
            try:
                vals.append(_num(table.lookup(b, ratio, m).mean_rmse))
            except KeyError:
                vals.append("")
        lines.append(",".join([b, repr(float(ratio))] + vals))
    return "\n".join(lines) + "\n"


def cell_forecast_csv(cell):
    lines = ["cycle,truth,soh_mean,soh_lo,soh_hi"]
    for i, n in enumerate(cell.cycles):
        lo = "" if cell.soh_lo is None else repr(float(cell.soh_lo[i]))
        hi = "" if cell.soh_hi is None else repr(float(cell.soh_hi[i]))
        lines.append(f"{int(n)},{float(cell.truth[i])!r},{float(cell.soh_mean[i])!r},{lo},{hi}")
    return "\n".join(lines) + "\n"


def svg_forecast(cycles, truth, mean, lo=None, hi=None, title="", width=480, height=300):
    """A minimal line plot: shaded band, forecast mean and truth."""
    pad = 40
    cycles = np.asarray(cycles, dtype=float)
    series = [np.asarray(truth, float), np.asarray(mean, float)]
    if lo is not None:
        series += [np.asarray(lo, float), np.asarray(hi, float)]
    ymin = min(float(np.min(s)) for s in series)
    ymax = max(float(np.max(s)) for s in series)
    if ymax <= ymin:
        ymax = ymin + 1.0
    x0, x1 = float(cycles.min()), float(cycles.max())
    x1 = x1 if x1 > x0 else x0 + 1.0

    def px(x):
        return pad + (x - x0) / (x1 - x0) * (width - 2 * pad)

    def py(y):
        return height - pad - (y - ymin) / (ymax - ymin) * (height - 2 * pad)

    def pts(xs, ys):
        return " ".join(f"{px(a):.2f},{py(b):.2f}" for a, b in zip(xs, ys))

    parts = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
             f'viewBox="0 0 {width} {height}">',
             f'<rect width="{width}" height="{height}" fill="white"/>',
             f'<text x="{width / 2:.0f}" y="20" text-anchor="middle" font-size="13">{title}</text>',
             f'<line x1="{pad}" y1="{height - pad}" x2="{width - pad}" y2="{height - pad}" stroke="black"/>',
             f'<line x1="{pad}" y1="{pad}" x2="{pad}" y2="{height - pad}" stroke="black"/>',
             f'<text x="{pad}" y="{height - pad + 15}" font-size="10">{x0:g}</text>',
             f'<text x="{width - pad}" y="{height - pad + 15}" font-size="10" text-anchor="end">{x1:g}</text>',
             f'<text x="{pad - 4}" y="{py(ymin):.2f}" font-size="10" text-anchor="end">{ymin:.3f}</text>',
             f'<text x="{pad - 4}" y="{py(ymax):.2f}" font-size="10" text-anchor="end">{ymax:.3f}</text>']
    if lo is not None:
        band = pts(cycles, series[2]) + " " + pts(cycles[::-1], series[3][::-1])
        parts.append(f'<polygon points="{band}" fill="#9ecae1" fill-opacity="0.5" stroke="none"/>')
    parts.append(f'<polyline points="{pts(cycles, series[0])}" fill="none" stroke="black" stroke-width="1.5"/>')
    parts.append(f'<polyline points="{pts(cycles, series[1])}" fill="none" stroke="#d62728" '
                 f'stroke-width="1.5" stroke-dasharray="5,3"/>')
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


def write_comparison(table, out_dir):
    """Write ``comparison.csv``, ``report.csv`` and per-cell forecast CSV/SVG files."""
    from pathlib import Path

    from .io_utils import atomic_write_text

    out = Path(out_dir)
    written = []

    def put(name, text):
        atomic_write_text(out / name, text)
        written.append(out / name)

    put("comparison.csv", comparison_csv(table))
    put("report.csv", table.to_csv())
    put("cells.csv", table.cells_csv())
    for c in table.cells:
        if c.status != "ok":
            continue
        stem = f"{c.battery}_r{c.ratio:g}_{c.method}_s{c.seed}"
        put(f"cells/{stem}.csv", cell_forecast_csv(c))
        put(f"cells/{stem}.svg", svg_forecast(c.cycles, c.truth, c.soh_mean, c.soh_lo, c.soh_hi,
                                              title=f"{c.battery} {c.ratio:g} {c.method} seed {c.seed}"))
    return written
