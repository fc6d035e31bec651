"""Command-line entry point: ``gpdm-soh <command> [options]``.

Exit codes: 0 success, 1 domain error (one-line diagnostic on stderr),
2 usage error.  Every command writes its outputs atomically and a run
manifest ``<out>.manifest.json`` (or ``<out>/manifest.json`` for
directory outputs) with inputs, seeds, versions and output hashes.
"""
from __future__ import annotations

import argparse
import json
import logging
import platform
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .io_utils import atomic_write_text, sha256_file

log = logging.getLogger("gpdm_soh")


class CliError(Exception):
    """A domain failure reported with exit code 1."""


# ---------------------------------------------------------------------------
# helpers


def _versions():
    import scipy
    import sklearn

    return {"gpdm_soh": __version__, "python": platform.python_version(), "numpy": np.__version__,
            "scipy": scipy.__version__, "scikit-learn": sklearn.__version__}


def _hash_paths(paths):
    out = {}
    for p in paths:
        p = Path(p)
        if p.is_dir():
            for f in sorted(q for q in p.rglob("*") if q.is_file() and q.name != "manifest.json"):
                out[str(f)] = sha256_file(f)
        elif p.exists():
            out[str(p)] = sha256_file(p)
    return out


def _write_manifest(args, inputs, outputs, manifest_path, extra=None):
    record = {
        "command": args.command,
        "argv": list(args.argv),
        "seed": getattr(args, "seed", None),
        "jobs": getattr(args, "jobs", 1),
        "versions": _versions(),
        "inputs": _hash_paths(inputs),
        "outputs": _hash_paths(outputs),
    }
    if extra:
        record.update(extra)
    atomic_write_text(manifest_path, json.dumps(record, indent=1, sort_keys=True))


def _file_manifest(out):
    return Path(str(out) + ".manifest.json")


def _split_attrs(text):
    if text is None:
        return None
    names = [a.strip() for a in text.split(",") if a.strip()]
    return [] if names == ["none"] else names


def _load_data(path):
    from .dataio import load_datasets

    p = Path(path)
    if not p.exists():
        raise CliError(f"data directory not found: {p}")
    return load_datasets(p)


def _default_attrs(datasets):
    from .dataio import ATTRIBUTES

    return [a for a in ATTRIBUTES if all(a in d.attributes for d in datasets)]


def _training_set(args):
    from .dataio import assemble_transfer

    datasets = _load_data(args.data)
    ids = [d.battery_id for d in datasets]
    target = args.target or ids[-1]
    if target not in ids:
        raise CliError(f"unknown target {target!r}; available: {', '.join(ids)}")
    attrs = _split_attrs(args.attributes)
    attrs = _default_attrs(datasets) if attrs is None else attrs
    pool = [d for d in datasets if d.battery_id == target] if args.no_transfer else datasets
    ts, truth = assemble_transfer(pool, target, args.ratio, attrs)
    return ts, truth, datasets[ids.index(target)]


def _train_config(args):
    from .train import TrainConfig

    q = args.q if args.q == "all" else int(args.q)
    return TrainConfig(Q=q, optimizer=args.optimizer, max_iters=args.max_iters, rel_tol=args.tol,
                       seed=args.seed, restarts=args.restarts, weighted_logdet=args.weighted_logdet)


def _forecast_table(cycles, mean, lo, hi):
    lines = ["cycle,soh_mean,soh_lo,soh_hi"]
    for i, n in enumerate(cycles):
        row = [str(int(n)), repr(float(mean[i]))]
        row += ["", ""] if lo is None else [repr(float(lo[i])), repr(float(hi[i]))]
        lines.append(",".join(row))
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# commands


def cmd_preprocess(args):
    from .dataio import extract_attributes, preprocess, read_cycle_csv, save_datasets

    src = Path(args.input)
    if not src.exists():
        raise CliError(f"input not found: {src}")
    raw = read_cycle_csv(src)
    ids = args.battery or list(raw)
    missing = [b for b in ids if b not in raw]
    if missing:
        raise CliError(f"batteries not in input: {', '.join(missing)}")
    attrs = _split_attrs(args.attributes)
    out = []
    for b in ids:
        ds = preprocess(raw[b], args.cutoff, args.grid)
        if attrs is None or attrs:
            ds = extract_attributes(ds, attrs) if attrs else extract_attributes(ds)
        out.append(ds)
        log.info("%s: %d cycles kept", b, len(ds))
    save_datasets(out, args.out)
    _write_manifest(args, [src], [args.out], Path(args.out) / "manifest.json")
    return 0


def cmd_synth(args):
    from .dataio import save_datasets
    from .eval import synth_fleet

    fleet = synth_fleet(args.seed, M=args.batteries, N=args.cycles, noise=args.noise)
    save_datasets(fleet, args.out)
    _write_manifest(args, [], [args.out], Path(args.out) / "manifest.json")
    return 0


def cmd_train(args):
    from .train import fit, save_model

    ts, _, _ = _training_set(args)
    model = fit(ts, (args.kernel_y, args.kernel_x), _train_config(args))
    model.meta["no_transfer"] = bool(args.no_transfer)
    save_model(model, args.out)
    log.info("objective %.6f, converged=%s", model.objective, model.converged)
    _write_manifest(args, [args.data], [args.out], _file_manifest(args.out))
    return 0


def cmd_forecast(args):
    from .forecast import rollout
    from .train import load_model

    path = Path(args.model)
    if not path.exists():
        raise CliError(f"model file not found: {path}")
    try:
        model = load_model(path)
    except (ValueError, KeyError) as exc:
        raise CliError(f"cannot read model {path}: {exc}") from exc
    horizon = args.horizon or int(model.meta.get("target_full_cycles", 0))
    if not horizon:
        raise CliError("--horizon is required for this model")
    fr = rollout(model, horizon, args.threshold, pin_deterministic_columns=not args.no_pin,
                 include_noise=args.noise_band)
    atomic_write_text(args.out, fr.to_csv())
    outs = [args.out]
    if args.latent_out:
        atomic_write_text(args.latent_out, fr.latent_csv())
        outs.append(args.latent_out)
    print(f"EOL={fr.eol} RUL={fr.rul}" + (" (truncated)" if fr.truncated else ""))
    _write_manifest(args, [path], outs, _file_manifest(args.out),
                    {"eol": fr.eol, "rul": fr.rul, "truncated": fr.truncated})
    return 0


def cmd_baseline(args):
    from .baselines import GP_KERNEL, fit_gp, fit_gplvm, gplvm_forecast, predict_gp
    from .train import DEFAULT_KERNEL

    ts, truth, target = _training_set(args)
    horizon = args.horizon or ts.target_full_cycles
    cycles = np.arange(ts.target_train_cycles + 1, horizon + 1)
    if cycles.size == 0:
        raise CliError("nothing to forecast: horizon does not exceed the training cycles")
    cfg = _train_config(args)
    if args.method == "gp":
        model = fit_gp(ts, args.kernel or GP_KERNEL, cfg)
        mean, var = predict_gp(model, cycles)
        sd = np.sqrt(np.maximum(var, 0.0))
        text = _forecast_table(cycles, mean, mean - 1.96 * sd, mean + 1.96 * sd)
    else:
        model = fit_gplvm(ts, args.kernel or DEFAULT_KERNEL, cfg)
        text = _forecast_table(cycles, gplvm_forecast(model, cycles), None, None)
    atomic_write_text(args.out, text)
    _write_manifest(args, [args.data], [args.out], _file_manifest(args.out))
    return 0


def _experiment(args):
    from .eval import load_config

    path = Path(args.config)
    if not path.exists():
        raise CliError(f"config file not found: {path}")
    seed = args.seed if args.seed_given else None
    try:
        return path, load_config(path, seed)
    except ValueError as exc:
        raise CliError(f"{path}: {exc}") from exc


def cmd_evaluate(args):
    from .eval import run_experiment

    path, cfg = _experiment(args)
    table = run_experiment(cfg, jobs=args.jobs)
    atomic_write_text(args.out, table.to_csv())
    outs = [args.out]
    if args.cells_out:
        atomic_write_text(args.cells_out, table.cells_csv())
        outs.append(args.cells_out)
    _write_manifest(args, [path], outs, _file_manifest(args.out), {"seeds": list(cfg.seed_values)})
    return 0


def cmd_compare(args):
    from .eval import run_experiment, write_comparison

    path, cfg = _experiment(args)
    table = run_experiment(cfg, jobs=args.jobs)
    write_comparison(table, args.out)
    print(Path(args.out, "comparison.csv").read_text(), end="")
    _write_manifest(args, [path], [args.out], Path(args.out) / "manifest.json",
                    {"seeds": list(cfg.seed_values)})
    return 0


# ---------------------------------------------------------------------------
# parser


def _common(sub_default):
    p = argparse.ArgumentParser(add_help=False)
    d = argparse.SUPPRESS if sub_default else None
    p.add_argument("--jobs", type=int, default=d if sub_default else 1, help="parallel worker processes")
    p.add_argument("--verbose", "-v", action="count", default=d if sub_default else 0)
    p.add_argument("--seed", type=int, default=d if sub_default else 0)
    return p


def _data_flags(p):
    p.add_argument("--data", required=True, help="directory of processed datasets")
    p.add_argument("--target", help="target battery id (default: last dataset)")
    p.add_argument("--ratio", type=float, default=0.5, help="fraction of target cycles used for training")
    p.add_argument("--attributes", help="comma-separated attributes, or 'none' (default: all present)")
    p.add_argument("--no-transfer", action="store_true", help="train on the target battery alone")
    p.add_argument("--q", default="all", help="latent dimension or 'all'")
    p.add_argument("--optimizer", choices=["cg", "gd"], default="cg")
    p.add_argument("--max-iters", type=int, default=500)
    p.add_argument("--tol", type=float, default=1e-6)
    p.add_argument("--restarts", type=int, default=1)
    p.add_argument("--weighted-logdet", action="store_true",
                   help="weight log-determinants by the output dimension")


def build_parser():
    from .train import DEFAULT_KERNEL

    sub_common = _common(True)
    parser = argparse.ArgumentParser(prog="gpdm-soh", parents=[_common(False)],
                                     description="GPDM transfer learning for battery SOH forecasting")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("preprocess", parents=[sub_common], help="cut-off, resample and extract attributes")
    p.add_argument("--input", required=True, help="canonical cycle CSV or directory of CSVs")
    p.add_argument("--out", required=True)
    p.add_argument("--cutoff", type=float, required=True, help="discharge cut-off voltage")
    p.add_argument("--grid", type=int, default=200)
    p.add_argument("--attributes", help="comma-separated attributes, or 'none' (default: all)")
    p.add_argument("--battery", action="append", help="restrict to these battery ids (repeatable)")
    p.set_defaults(func=cmd_preprocess)

    p = sub.add_parser("synth", parents=[sub_common], help="write a synthetic fleet")
    p.add_argument("--batteries", type=int, default=3)
    p.add_argument("--cycles", type=int, default=120)
    p.add_argument("--noise", type=float, default=0.005)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", parents=[sub_common], help="fit a GPDM")
    _data_flags(p)
    p.add_argument("--kernel-y", default=DEFAULT_KERNEL)
    p.add_argument("--kernel-x", default=DEFAULT_KERNEL)
    p.add_argument("--out", required=True, help="model file")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("forecast", parents=[sub_common], help="roll a trained GPDM forward")
    p.add_argument("--model", required=True)
    p.add_argument("--horizon", type=int, help="last cycle to forecast (default: target length)")
    p.add_argument("--threshold", type=float, default=0.8)
    p.add_argument("--no-pin", action="store_true", help="report decoded cycle/label columns")
    p.add_argument("--noise-band", action="store_true", help="add observation noise to the band")
    p.add_argument("--out", required=True)
    p.add_argument("--latent-out")
    p.set_defaults(func=cmd_forecast)

    p = sub.add_parser("baseline", parents=[sub_common], help="fit and forecast a baseline")
    p.add_argument("method", choices=["gp", "gplvm"])
    _data_flags(p)
    p.add_argument("--kernel")
    p.add_argument("--horizon", type=int)
    p.add_argument("--out", required=True, help="forecast CSV")
    p.set_defaults(func=cmd_baseline)

    for name, func, help_ in (("evaluate", cmd_evaluate, "run an experiment matrix"),
                              ("compare", cmd_compare, "experiment matrix with per-cell plots")):
        p = sub.add_parser(name, parents=[sub_common], help=help_)
        p.add_argument("--config", required=True, help="TOML experiment file")
        p.add_argument("--out", required=True)
        if name == "evaluate":
            p.add_argument("--cells-out", help="per-seed cell CSV")
        p.set_defaults(func=func)
    return parser


def main(argv=None):
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    args.argv = argv
    args.seed_given = any(a == "--seed" or a.startswith("--seed=") for a in argv)
    if args.jobs < 1:
        print("error: --jobs must be >= 1", file=sys.stderr)
        return 2
    level = logging.WARNING - 10 * min(args.verbose, 2)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s", force=True)
    from .dataio import DataError

    try:
        return args.func(args)
    except (CliError, DataError, ValueError, FileNotFoundError, np.linalg.LinAlgError,
            FloatingPointError, KeyError, OSError) as exc:
        msg = str(exc).splitlines()[0] if str(exc) else type(exc).__name__
        print(f"error: {msg}", file=sys.stderr)
        return 1


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
