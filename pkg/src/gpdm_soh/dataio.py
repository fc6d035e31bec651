"""Cycling-data ingestion, preprocessing and transfer-set assembly.

Canonical input is a CSV with one row per sample::

    battery_id,cycle,t_s,voltage_v,current_a,temperature_c,capacity_ah

with the discharge capacity repeated on every row of its cycle.
"""
from __future__ import annotations

import json
import logging
import os
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
import pandas as pd
from scipy.interpolate import CubicSpline

from .io_utils import atomic_write_text

log = logging.getLogger(__name__)

__all__ = [
    "CSV_COLUMNS",
    "ATTRIBUTES",
    "DataError",
    "RawCycle",
    "RawCycleSet",
    "BatteryDataset",
    "TrainingSet",
    "read_cycle_csv",
    "load_raw",
    "preprocess",
    "extract_attributes",
    "assemble_transfer",
    "minmax_fit",
    "save_dataset",
    "load_dataset",
    "save_datasets",
    "load_datasets",
]

CSV_COLUMNS = ["battery_id", "cycle", "t_s", "voltage_v", "current_a", "temperature_c", "capacity_ah"]
ATTRIBUTES = ("midpoint_temperature", "midpoint_voltage", "energy")


class DataError(ValueError):
    """Raised for malformed or unusable cycling data."""


@dataclass
class RawCycle:
    cycle: int
    time: np.ndarray
    voltage: np.ndarray
    current: np.ndarray
    temperature: np.ndarray
    capacity: float


@dataclass
class RawCycleSet:
    battery_id: str
    cycles: list

    def __len__(self):
        return len(self.cycles)


def _validate_cycle(c, battery_id):
    n = len(c.time)
    if not (len(c.voltage) == len(c.current) == len(c.temperature) == n):
        raise DataError(f"{battery_id} cycle {c.cycle}: per-sample arrays differ in length")
    if n > 1 and np.any(np.diff(c.time) <= 0):
        raise DataError(f"{battery_id} cycle {c.cycle}: time is not strictly increasing")


def read_cycle_csv(path):
    """Read a canonical CSV file (or a directory of them) into ``{battery_id: RawCycleSet}``.

    Cycles with any non-finite required value are dropped; the number
    dropped is logged as a warning.
    """
    path = Path(path)
    if path.is_dir():
        files = sorted(path.glob("*.csv"))
        if not files:
            raise DataError(f"no CSV files in {path}")
    elif path.exists():
        files = [path]
    else:
        raise DataError(f"{path} does not exist")
    frames = []
    for f in files:
        try:
            df = pd.read_csv(f, dtype={"battery_id": str})
        except (pd.errors.ParserError, UnicodeDecodeError) as exc:
            raise DataError(f"cannot parse {f}: {exc}") from exc
        missing = [c for c in CSV_COLUMNS if c not in df.columns]
        if missing:
            raise DataError(f"{f} is missing columns {missing}")
        frames.append(df[CSV_COLUMNS])
    df = pd.concat(frames, ignore_index=True)
    if df.empty:
        raise DataError(f"{path} holds no samples")
    num = CSV_COLUMNS[1:]
    df[num] = df[num].apply(pd.to_numeric, errors="coerce")

    out = {}
    for bid, g in df.groupby("battery_id", sort=False):
        cycles, dropped = [], 0
        for cyc, h in g.groupby("cycle", sort=True):
            vals = h[num].to_numpy(dtype=float)
            if not np.all(np.isfinite(vals)) or not np.isfinite(cyc):
                dropped += 1
                continue
            c = RawCycle(
                cycle=int(cyc), time=vals[:, 1].copy(), voltage=vals[:, 2].copy(),
                current=vals[:, 3].copy(), temperature=vals[:, 4].copy(), capacity=float(vals[0, 5]),
            )
            _validate_cycle(c, bid)
            cycles.append(c)
        if dropped:
            log.warning("%s: dropped %d cycle(s) with non-finite values", bid, dropped)
        if not cycles:
            raise DataError(f"{bid}: no usable cycles")
        out[str(bid)] = RawCycleSet(str(bid), cycles)
    return out


def load_raw(path, battery_id=None):
    """Load one battery's raw cycles; ``battery_id`` may be omitted if the file holds one."""
    sets = read_cycle_csv(path)
    if battery_id is None:
        if len(sets) != 1:
            raise DataError(f"{path} holds {len(sets)} batteries; pass battery_id")
        return next(iter(sets.values()))
    try:
        return sets[str(battery_id)]
    except KeyError:
        raise DataError(f"battery {battery_id!r} not found in {path}") from None


# ---------------------------------------------------------------------------


def minmax_fit(values):
    """(min, max) of ``values``; a constant series gets ``max = min + 1``."""
    v = np.asarray(values, dtype=float)
    lo, hi = float(np.min(v)), float(np.max(v))
    if hi <= lo:
        hi = lo + 1.0
    return lo, hi


@dataclass
class BatteryDataset:
    """One battery after preprocessing.

    ``cycles`` are consecutive indices 1..N; ``raw_cycles`` keeps the
    original cycle numbers.  ``attributes`` hold raw (unnormalised) values
    and ``normalization`` the (min, max) fitted to them.
    """

    battery_id: str
    cycles: np.ndarray
    soh: np.ndarray
    capacity: np.ndarray
    raw_cycles: np.ndarray = None
    time_grid: np.ndarray = None
    voltage: np.ndarray = None
    temperature: np.ndarray = None
    attributes: dict = field(default_factory=dict)
    normalization: dict = field(default_factory=dict)
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.cycles = np.asarray(self.cycles, dtype=int)
        self.soh = np.asarray(self.soh, dtype=float)
        self.capacity = np.asarray(self.capacity, dtype=float)
        if self.raw_cycles is None:
            self.raw_cycles = self.cycles.copy()
        self.raw_cycles = np.asarray(self.raw_cycles, dtype=int)
        n = len(self.cycles)
        if not (len(self.soh) == len(self.capacity) == len(self.raw_cycles) == n):
            raise DataError("per-cycle arrays differ in length")
        if n > 1 and np.any(np.diff(self.cycles) <= 0):
            raise DataError("cycle indices must be strictly increasing")
        for name, a in self.attributes.items():
            if len(a) != n:
                raise DataError(f"attribute {name} has {len(a)} values for {n} cycles")

    def __len__(self):
        return len(self.cycles)

    def normalized(self, name):
        lo, hi = self.normalization[name]
        return (np.asarray(self.attributes[name]) - lo) / (hi - lo)

    def denormalize(self, name, values):
        lo, hi = self.normalization[name]
        return lo + np.asarray(values) * (hi - lo)


def _truncate(t, v, temp, cutoff):
    below = np.flatnonzero(v <= cutoff)
    if below.size == 0:
        return None
    k = int(below[0])
    if v[k] == cutoff or k == 0:
        return t[: k + 1], v[: k + 1], temp[: k + 1]
    # close the segment exactly at the crossing
    w = (v[k - 1] - cutoff) / (v[k - 1] - v[k])
    tc = t[k - 1] + w * (t[k] - t[k - 1])
    Tc = temp[k - 1] + w * (temp[k] - temp[k - 1])
    return np.append(t[:k], tc), np.append(v[:k], cutoff), np.append(temp[:k], Tc)


def preprocess(raw, cutoff, grid=200):
    """Cut each discharge at ``cutoff`` volts and resample on ``grid`` uniform times.

    Voltage and temperature are interpolated by natural cubic splines.
    Cycles that never reach the cut-off, or have fewer than 4 samples
    before it, are dropped with a warning.  SOH is the capacity relative
    to the first retained cycle.
    """
    if grid < 2:
        raise ValueError("grid must have at least 2 points")
    keep, tg, vg, Tg, caps = [], [], [], [], []
    no_cut = few = 0
    for c in raw.cycles:
        seg = _truncate(c.time, c.voltage, c.temperature, cutoff)
        if seg is None:
            no_cut += 1
            continue
        t, v, temp = seg
        if len(t) < 4:
            few += 1
            continue
        ts = np.linspace(t[0], t[-1], grid)
        vs = CubicSpline(t, v, bc_type="natural")(ts)
        Ts = CubicSpline(t, temp, bc_type="natural")(ts)
        # the final knot sits on the cut-off; pin both ends to the samples
        vs[0], vs[-1] = v[0], v[-1]
        Ts[0], Ts[-1] = temp[0], temp[-1]
        keep.append(c.cycle)
        tg.append(ts)
        vg.append(vs)
        Tg.append(Ts)
        caps.append(c.capacity)
    if no_cut:
        log.warning("%s: dropped %d cycle(s) that never reached %.3f V", raw.battery_id, no_cut, cutoff)
    if few:
        log.warning("%s: dropped %d cycle(s) with fewer than 4 samples", raw.battery_id, few)
    if not keep:
        raise DataError(f"{raw.battery_id}: no cycles survived preprocessing")
    caps = np.array(caps)
    if caps[0] <= 0:
        raise DataError(f"{raw.battery_id}: first-cycle capacity must be positive")
    return BatteryDataset(
        battery_id=raw.battery_id,
        cycles=np.arange(1, len(keep) + 1),
        raw_cycles=np.array(keep),
        soh=caps / caps[0],
        capacity=caps,
        time_grid=np.array(tg),
        voltage=np.array(vg),
        temperature=np.array(Tg),
        meta={"cutoff_v": float(cutoff), "grid": int(grid)},
    )


def extract_attributes(ds, which=ATTRIBUTES):
    """Add scalar per-cycle attributes computed from the resampled grids.

    ``midpoint_*`` read the grid at index ``G // 2``; ``energy`` is the
    trapezoidal integral of voltage over the truncated discharge time.
    """
    which = list(which)
    unknown = [w for w in which if w not in ATTRIBUTES]
    if unknown:
        raise DataError(f"unknown attributes {unknown}; choose from {ATTRIBUTES}")
    attrs = dict(ds.attributes)
    for w in which:
        if w == "midpoint_temperature":
            if ds.temperature is None:
                raise DataError(f"{ds.battery_id}: no temperature channel for {w}")
            attrs[w] = ds.temperature[:, ds.temperature.shape[1] // 2].copy()
        else:
            if ds.voltage is None or ds.time_grid is None:
                raise DataError(f"{ds.battery_id}: no voltage grid for {w}")
            if w == "midpoint_voltage":
                attrs[w] = ds.voltage[:, ds.voltage.shape[1] // 2].copy()
            else:
                attrs[w] = np.trapezoid(ds.voltage, ds.time_grid, axis=1)
    norm = dict(ds.normalization)
    norm.update({w: minmax_fit(attrs[w]) for w in which})
    return replace(ds, attributes=attrs, normalization=norm)


# ---------------------------------------------------------------------------


@dataclass
class TrainingSet:
    """Transfer-encoded observation matrix with rows ``[n, m, SOH, attrs...]``.

    Columns are normalised as ``(raw - col_lo) / (col_hi - col_lo)``: the
    cycle by the largest training cycle, the label and attributes by their
    training-row min-max, SOH left as is.
    """

    Y: np.ndarray
    columns: list
    target_id: str
    battery_ids: list
    labels: list
    counts: list
    col_lo: np.ndarray
    col_hi: np.ndarray
    target_full_cycles: int
    heldout_cycles: np.ndarray

    @property
    def segments(self):
        ends = np.cumsum(self.counts)
        return [(int(e - c), int(e)) for c, e in zip(self.counts, ends)]

    @property
    def target_index(self):
        return self.battery_ids.index(self.target_id)

    @property
    def target_train_cycles(self):
        return self.counts[self.target_index]

    @property
    def target_label(self):
        j = self.columns.index("label")
        return (self.labels[self.target_index] - self.col_lo[j]) / (self.col_hi[j] - self.col_lo[j])

    def normalize(self, raw):
        return (np.asarray(raw, dtype=float) - self.col_lo) / (self.col_hi - self.col_lo)

    def denormalize(self, Y):
        return self.col_lo + np.asarray(Y, dtype=float) * (self.col_hi - self.col_lo)

    def metadata(self):
        return {
            "columns": list(self.columns),
            "col_lo": [float(v) for v in self.col_lo],
            "col_hi": [float(v) for v in self.col_hi],
            "target_id": self.target_id,
            "battery_ids": list(self.battery_ids),
            "labels": list(self.labels),
            "counts": list(self.counts),
            "target_label": float(self.target_label),
            "target_train_cycles": int(self.target_train_cycles),
            "target_full_cycles": int(self.target_full_cycles),
        }


def _round_half_up(x):
    return int(np.floor(x + 0.5))


def assemble_transfer(datasets, target, train_ratio, attributes=None):
    """Pool full sibling histories with the first ``round(ratio * N)`` target cycles.

    Returns ``(TrainingSet, heldout_soh)`` where ``heldout_soh`` is the
    target's true SOH for cycles ``T + 1 .. N``.  Labels are 1..M in input
    order; rows are battery-major then cycle-major.
    """
    datasets = list(datasets)
    if not datasets:
        raise DataError("no datasets given")
    ids = [d.battery_id for d in datasets]
    if len(set(ids)) != len(ids):
        raise DataError("battery ids must be unique")
    if target not in ids:
        raise DataError(f"unknown target battery {target!r}; have {ids}")
    if not 0 < train_ratio <= 1:
        raise DataError("train_ratio must lie in (0, 1]")
    attributes = list(attributes or [])
    for d in datasets:
        missing = [a for a in attributes if a not in d.attributes]
        if missing:
            raise DataError(f"{d.battery_id} lacks attributes {missing}")

    ti = ids.index(target)
    n_full = len(datasets[ti])
    T = min(_round_half_up(train_ratio * n_full), n_full)
    if T < 2:
        raise DataError(f"ratio {train_ratio} leaves {T} training cycle(s) for {target}")

    blocks, counts, labels = [], [], []
    for m, d in enumerate(datasets, start=1):
        n = T if m - 1 == ti else len(d)
        cols = [d.cycles[:n].astype(float), np.full(n, float(m)), d.soh[:n]]
        cols += [np.asarray(d.attributes[a][:n], dtype=float) for a in attributes]
        blocks.append(np.column_stack(cols))
        counts.append(n)
        labels.append(m)
    raw = np.vstack(blocks)

    columns = ["cycle", "label", "soh"] + attributes
    lo = np.zeros(raw.shape[1])
    hi = np.ones(raw.shape[1])
    hi[0] = float(raw[:, 0].max())
    lo[1], hi[1] = minmax_fit(raw[:, 1]) if len(datasets) > 1 else (float(labels[0]), float(labels[0]) + 1.0)
    for j in range(3, raw.shape[1]):
        lo[j], hi[j] = minmax_fit(raw[:, j])
    Y = (raw - lo) / (hi - lo)

    tgt = datasets[ti]
    ts = TrainingSet(
        Y=Y, columns=columns, target_id=target, battery_ids=ids, labels=labels, counts=counts,
        col_lo=lo, col_hi=hi, target_full_cycles=n_full, heldout_cycles=tgt.cycles[T:].copy(),
    )
    return ts, tgt.soh[T:].copy()


# ---------------------------------------------------------------------------
# persistence

DATASET_FORMAT = "gpdm-battery-dataset"


def _fmt_table(rows):
    rows = np.atleast_2d(rows)
    return "\n".join(",".join(repr(float(v)) for v in r) for r in rows) + "\n"


def _read_table(path):
    a = np.loadtxt(path, delimiter=",", dtype=float, ndmin=2)
    return a


def save_dataset(ds, directory):
    """Write ``meta.json``, ``cycles.csv`` and (when present) per-cycle grid tables."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    attr_names = list(ds.attributes)
    header = ["cycle", "raw_cycle", "capacity", "soh"] + attr_names
    cols = [ds.cycles, ds.raw_cycles, ds.capacity, ds.soh] + [ds.attributes[a] for a in attr_names]
    lines = [",".join(header)]
    for i in range(len(ds)):
        vals = [str(int(ds.cycles[i])), str(int(ds.raw_cycles[i]))]
        vals += [repr(float(c[i])) for c in cols[2:]]
        lines.append(",".join(vals))
    atomic_write_text(d / "cycles.csv", "\n".join(lines) + "\n")
    grids = []
    for name in ("time_grid", "voltage", "temperature"):
        g = getattr(ds, name)
        if g is not None:
            atomic_write_text(d / f"{name}.csv", _fmt_table(g))
            grids.append(name)
    meta = {
        "format": DATASET_FORMAT,
        "version": 1,
        "battery_id": ds.battery_id,
        "attributes": attr_names,
        "normalization": {k: [float(v[0]), float(v[1])] for k, v in ds.normalization.items()},
        "grids": grids,
        "meta": ds.meta,
    }
    atomic_write_text(d / "meta.json", json.dumps(meta, indent=1))


def load_dataset(directory):
    d = Path(directory)
    try:
        meta = json.loads((d / "meta.json").read_text())
    except FileNotFoundError:
        raise DataError(f"{d} is not a dataset directory (no meta.json)") from None
    if meta.get("format") != DATASET_FORMAT:
        raise DataError(f"{d}/meta.json is not a {DATASET_FORMAT} record")
    df = pd.read_csv(d / "cycles.csv", dtype=str)
    attrs = {a: np.array([float(v) for v in df[a]]) for a in meta["attributes"]}
    grids = {g: _read_table(d / f"{g}.csv") for g in meta["grids"]}
    return BatteryDataset(
        battery_id=meta["battery_id"],
        cycles=df["cycle"].astype(int).to_numpy(),
        raw_cycles=df["raw_cycle"].astype(int).to_numpy(),
        capacity=np.array([float(v) for v in df["capacity"]]),
        soh=np.array([float(v) for v in df["soh"]]),
        attributes=attrs,
        normalization={k: tuple(v) for k, v in meta["normalization"].items()},
        meta=meta.get("meta", {}),
        **grids,
    )


def save_datasets(datasets, root):
    """Save several datasets under ``root/<battery_id>/`` with an ordering index."""
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    ids = []
    for ds in datasets:
        save_dataset(ds, root / ds.battery_id)
        ids.append(ds.battery_id)
    atomic_write_text(root / "datasets.json", json.dumps({"batteries": ids}, indent=1))


def load_datasets(root):
    root = Path(root)
    index = root / "datasets.json"
    if index.exists():
        ids = json.loads(index.read_text())["batteries"]
    elif (root / "meta.json").exists():
        return [load_dataset(root)]
    else:
        ids = sorted(p.name for p in root.iterdir() if (p / "meta.json").exists())
    if not ids:
        raise DataError(f"no datasets under {root}")
    return [load_dataset(root / i) for i in ids]
