"""Readers and writers for weather stacks, target series and predictions,
plus a synthetic case generator.

On-disk layout
--------------
Grid stack directory::

    geometry.json   origin_lon, origin_lat, cell_size, n_rows, n_cols,
                    variables (ordered), start_date, n_weeks
    <var>.csv       date,cell_0_0,...,cell_{R-1}_{C-1}   (row-major)

``origin_lon``/``origin_lat`` locate the outer north-west corner of cell
``(0, 0)``; rows run southwards, columns eastwards.

Target file ``<sensor_id>.csv`` has header ``date,depth_m`` with an empty
depth field for a missing week. Predictions go to
``predictions_<sensor>_<model>.csv`` with header
``date,ensemble_mean_m,ensemble_std_m``.
"""
from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

WEEK = np.timedelta64(7, "D")
SIDECAR = "geometry.json"


def _fmt(v) -> str:
    """Shortest text that parses back to the same float."""
    return repr(float(v))


class DataFormatError(ValueError):
    """Raised when an input file violates its format contract."""


@dataclass(frozen=True)
class GridGeometry:
    origin_lon: float
    origin_lat: float
    cell_size: float
    n_rows: int
    n_cols: int

    def __post_init__(self):
        if not self.cell_size > 0:
            raise ValueError(f"cell_size must be positive, got {self.cell_size}")
        if self.n_rows < 1 or self.n_cols < 1:
            raise ValueError(f"grid must have at least one cell, got {self.n_rows}x{self.n_cols}")

    def cell_centers(self) -> tuple[np.ndarray, np.ndarray]:
        """Center longitudes per column and latitudes per row."""
        lons = self.origin_lon + (np.arange(self.n_cols) + 0.5) * self.cell_size
        lats = self.origin_lat - (np.arange(self.n_rows) + 0.5) * self.cell_size
        return lons, lats


@dataclass(frozen=True, eq=False)
class RasterSeries:
    geometry: GridGeometry
    variables: tuple[str, ...]
    timestamps: np.ndarray  # datetime64[D], weekly
    values: np.ndarray  # (time, row, col, variable)

    def __post_init__(self):
        object.__setattr__(self, "variables", tuple(self.variables))
        ts = np.asarray(self.timestamps, dtype="datetime64[D]")
        vals = np.asarray(self.values, dtype=np.float64)
        if not self.variables:
            raise ValueError("a raster series needs at least one variable")
        expected = (len(ts), self.geometry.n_rows, self.geometry.n_cols, len(self.variables))
        if vals.shape != expected:
            raise ValueError(f"values shape {vals.shape} does not match {expected}")
        if len(ts) > 1 and np.any(np.diff(ts) != WEEK):
            raise DataFormatError("timestamp misalignment: weather weeks must be consecutive")
        if not np.all(np.isfinite(vals)):
            raise DataFormatError("weather values must be finite")
        ts.flags.writeable = False
        vals.flags.writeable = False
        object.__setattr__(self, "timestamps", ts)
        object.__setattr__(self, "values", vals)

    @property
    def shape(self):
        return self.values.shape

    def with_values(self, values, geometry=None) -> "RasterSeries":
        return replace(self, values=values, geometry=geometry or self.geometry)


@dataclass(frozen=True, eq=False)
class TargetSeries:
    sensor_id: str
    timestamps: np.ndarray  # datetime64[D]
    values: np.ndarray  # meters below surface, NaN where missing
    train_mean: float | None = None
    train_std: float | None = None
    train_min: float | None = None
    train_max: float | None = None

    def __post_init__(self):
        ts = np.asarray(self.timestamps, dtype="datetime64[D]")
        vals = np.asarray(self.values, dtype=np.float64)
        if ts.shape != vals.shape or ts.ndim != 1:
            raise ValueError("timestamps and values must be 1-D and of equal length")
        if len(ts) > 1 and np.any(np.diff(ts) <= np.timedelta64(0, "D")):
            raise DataFormatError("timestamps not increasing")
        present = vals[~np.isnan(vals)]
        if np.any(present <= 0):
            raise DataFormatError("water table depths must be positive")
        ts.flags.writeable = False
        vals.flags.writeable = False
        object.__setattr__(self, "timestamps", ts)
        object.__setattr__(self, "values", vals)

    @property
    def missing(self) -> np.ndarray:
        return np.isnan(self.values)

    @property
    def n_observations(self) -> int:
        return int(np.count_nonzero(~self.missing))


def _parse_date(text: str, where: str) -> np.datetime64:
    try:
        return np.datetime64(text.strip(), "D")
    except ValueError as exc:
        raise DataFormatError(f"{where}: bad date {text!r}") from exc


def load_grid_stack(path) -> RasterSeries:
    """Read a grid stack directory; fails rather than returning a partial stack."""
    path = Path(path)
    sidecar = path / SIDECAR
    if not sidecar.is_file():
        raise DataFormatError(f"missing geometry sidecar {sidecar}")
    meta = json.loads(sidecar.read_text(encoding="utf-8"))
    geometry = GridGeometry(
        float(meta["origin_lon"]),
        float(meta["origin_lat"]),
        float(meta["cell_size"]),
        int(meta["n_rows"]),
        int(meta["n_cols"]),
    )
    variables = list(meta["variables"])
    start = np.datetime64(meta["start_date"], "D")
    n_weeks = int(meta["n_weeks"])
    expected_ts = start + WEEK * np.arange(n_weeks)
    n_cells = geometry.n_rows * geometry.n_cols
    header = ["date"] + [f"cell_{r}_{c}" for r in range(geometry.n_rows) for c in range(geometry.n_cols)]

    values = np.empty((n_weeks, geometry.n_rows, geometry.n_cols, len(variables)))
    for p, var in enumerate(variables):
        fname = path / f"{var}.csv"
        with open(fname, newline="", encoding="utf-8") as fh:
            rows = list(csv.reader(fh))
        if not rows or rows[0] != header:
            raise DataFormatError(f"{fname}: unexpected header")
        body = rows[1:]
        dates = np.array([_parse_date(r[0], f"{fname} row {i + 2}") for i, r in enumerate(body)],
                         dtype="datetime64[D]")
        if len(dates) != n_weeks or np.any(dates != expected_ts):
            raise DataFormatError(f"timestamp misalignment in {fname}")
        for i, r in enumerate(body):
            if len(r) != n_cells + 1:
                raise DataFormatError(f"{fname} row {i + 2}: expected {n_cells} cells, got {len(r) - 1}")
            try:
                cells = np.array([float(v) for v in r[1:]])
            except ValueError as exc:
                raise DataFormatError(f"{fname} row {i + 2}: non-numeric cell") from exc
            if not np.all(np.isfinite(cells)):
                raise DataFormatError(f"{fname} row {i + 2}: NaN or infinite cell")
            values[i, :, :, p] = cells.reshape(geometry.n_rows, geometry.n_cols)
    return RasterSeries(geometry, tuple(variables), expected_ts, values)


def write_grid_stack(raster: RasterSeries, path) -> None:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    g = raster.geometry
    meta = {
        "origin_lon": g.origin_lon,
        "origin_lat": g.origin_lat,
        "cell_size": g.cell_size,
        "n_rows": g.n_rows,
        "n_cols": g.n_cols,
        "variables": list(raster.variables),
        "start_date": str(raster.timestamps[0]),
        "n_weeks": len(raster.timestamps),
    }
    header = ["date"] + [f"cell_{r}_{c}" for r in range(g.n_rows) for c in range(g.n_cols)]
    for p, var in enumerate(raster.variables):
        with open(path / f"{var}.csv", "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(header)
            for t, ts in enumerate(raster.timestamps):
                w.writerow([str(ts)] + [_fmt(v) for v in raster.values[t, :, :, p].ravel()])
    (path / SIDECAR).write_text(json.dumps(meta, indent=2) + "\n", encoding="utf-8")


def load_target_series(path, sensor_id: str | None = None) -> TargetSeries:
    path = Path(path)
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    if not rows or [h.strip() for h in rows[0]] != ["date", "depth_m"]:
        raise DataFormatError(f"{path}: header must be 'date,depth_m'")
    dates, depths = [], []
    for i, r in enumerate(rows[1:], start=2):
        if not r:
            continue
        dates.append(_parse_date(r[0], f"{path} row {i}"))
        text = r[1].strip() if len(r) > 1 else ""
        depths.append(float(text) if text else np.nan)
    return TargetSeries(sensor_id or path.stem, np.array(dates, dtype="datetime64[D]"), np.array(depths))


def write_target_series(target: TargetSeries, path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["date", "depth_m"])
        for ts, v in zip(target.timestamps, target.values):
            w.writerow([str(ts), "" if np.isnan(v) else _fmt(v)])


def predictions_filename(sensor_id: str, model_kind: str) -> str:
    return f"predictions_{sensor_id}_{model_kind}.csv"


def write_predictions(dates, mean, std, path) -> None:
    dates = np.asarray(dates, dtype="datetime64[D]")
    mean = np.asarray(mean, dtype=np.float64)
    std = np.asarray(std, dtype=np.float64)
    if not (len(dates) == len(mean) == len(std)):
        raise ValueError(f"length mismatch: {len(dates)} dates, {len(mean)} means, {len(std)} stds")
    if np.any(std < 0):
        raise ValueError("ensemble standard deviation cannot be negative")
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["date", "ensemble_mean_m", "ensemble_std_m"])
        for d, m, s in zip(dates, mean, std):
            w.writerow([str(d), _fmt(m), _fmt(s)])


def read_predictions(path) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    if not rows or rows[0] != ["date", "ensemble_mean_m", "ensemble_std_m"]:
        raise DataFormatError(f"{path}: unexpected header")
    body = rows[1:]
    dates = np.array([r[0] for r in body], dtype="datetime64[D]")
    mean = np.array([float(r[1]) for r in body])
    std = np.array([float(r[2]) for r in body])
    return dates, mean, std


# -- synthetic case ---------------------------------------------------------

SYNTH_VARIABLES = ("tp", "tmax", "tmin")
SYNTH_START = np.datetime64("2008-01-07")  # a Monday
SYNTH_MEMORY = 26
MIN_WEEKS_FACTOR = 3


@dataclass(frozen=True)
class SynthParams:
    """Constants of the synthetic generator.

    The target is ``base + driver_gain * (m - driver_center)
    + season_amp * sin(2*pi*day/365.25 + season_phase) + noise``, where
    ``m`` is the mean of channel 0 over all cells and the previous
    ``memory`` weeks.
    """

    memory: int = SYNTH_MEMORY
    base: float = 4.4
    driver_center: float = 2.5
    driver_gain: float = -1.0
    season_amp: float = 0.5
    season_phase: float = 0.8
    noise: float = 0.03
    ar_coef: float = 0.5
    # per channel: offset, seasonal amplitude, seasonal phase shift, anomaly scale
    channels: tuple = ((2.5, 1.0, 0.0, 1.0), (18.0, 8.0, -1.9, 2.0), (7.0, 7.0, -2.0, 1.5))
    coupling: tuple = (1.0, -0.8, -0.8)
    spatial_scale: float = 0.3
    start_date: np.datetime64 = field(default=SYNTH_START)


def annual_phase(dates) -> np.ndarray:
    """Angle of the annual cycle, in radians, from days since 1970-01-01."""
    days = np.asarray(dates, dtype="datetime64[D]").astype(np.int64)
    return 2.0 * np.pi * days / 365.25


def _smooth_field(rng, n_rows, n_cols):
    coarse = rng.standard_normal((3, 3))
    ri = np.linspace(0, 2, n_rows)
    ci = np.linspace(0, 2, n_cols)
    # bilinear upsampling of the 3x3 field
    rows = np.array([np.interp(ri, [0, 1, 2], coarse[:, j]) for j in range(3)]).T
    return np.array([np.interp(ci, [0, 1, 2], rows[i]) for i in range(n_rows)])


def synthetic_target(tp_spatial_mean: np.ndarray, dates, params: SynthParams) -> np.ndarray:
    """Noise-free target given the weekly spatial mean of channel 0."""
    n = len(tp_spatial_mean)
    if n <= params.memory:
        return np.full(n, np.nan)
    kernel = np.ones(params.memory) / params.memory
    trailing = np.full(n, np.nan)
    # convolve()[i] is the mean of weeks [i, i + memory)
    trailing[params.memory:] = np.convolve(tp_spatial_mean, kernel, mode="valid")[:-1]
    out = (params.base + params.driver_gain * (trailing - params.driver_center)
           + params.season_amp * np.sin(annual_phase(dates) + params.season_phase))
    return out


def generate_synthetic_case(
    seed: int, geometry: GridGeometry, n_weeks: int, T: int = 104, params: SynthParams | None = None
) -> tuple[RasterSeries, TargetSeries]:
    """Build a deterministic weather stack and a target that depends on it.

    Each channel is an annual sinusoid plus an AR(1) anomaly shared by the
    grid and a smaller spatially smooth AR(1) field. The first
    ``params.memory`` target weeks are missing since their trailing window
    is incomplete.
    """
    params = params or SynthParams()
    if n_weeks < MIN_WEEKS_FACTOR * T:
        raise ValueError(
            f"n_weeks={n_weeks} too small: need at least {MIN_WEEKS_FACTOR}*T={MIN_WEEKS_FACTOR * T} "
            "so that train, validation and test sets survive the gaps"
        )
    rng = np.random.default_rng(seed)
    dates = params.start_date + WEEK * np.arange(n_weeks)
    phase = annual_phase(dates)
    channels = params.channels
    H, W = geometry.n_rows, geometry.n_cols
    values = np.empty((n_weeks, H, W, len(channels)))
    innov = np.sqrt(1.0 - params.ar_coef**2)
    common = np.zeros((n_weeks, len(channels)))
    state = np.zeros(len(channels))
    for t in range(n_weeks):
        state = params.ar_coef * state + innov * rng.standard_normal(len(channels))
        common[t] = state
    # mix each channel's grid-wide anomaly with that of channel 0
    coupling = np.asarray(params.coupling[: len(channels)])
    common = coupling * common[:, :1] + np.sqrt(1.0 - coupling**2) * common
    for p, (offset, amp, shift, scale) in enumerate(channels):
        spatial = np.zeros((H, W))
        for t in range(n_weeks):
            spatial = params.ar_coef * spatial + innov * params.spatial_scale * _smooth_field(rng, H, W)
            values[t, :, :, p] = offset + amp * np.sin(phase[t] + shift) + scale * (common[t, p] + spatial)
    raster = RasterSeries(geometry, SYNTH_VARIABLES[: len(channels)], dates, values)
    depth = synthetic_target(values[:, :, :, 0].mean(axis=(1, 2)), dates, params)
    depth = depth + params.noise * rng.standard_normal(n_weeks)
    depth[: params.memory] = np.nan
    return raster, TargetSeries("synthetic", dates, depth)


def synthetic_split_dates(timestamps, T: int, train_frac: float = 0.7, val_frac: float = 0.1):
    """Train-end and test-start dates that leave all three sets non-empty.

    Two gaps of ``T`` weeks and the ``T``-week input warm-up are taken off
    first; the remaining prediction weeks are shared out by the fractions.
    """
    ts = np.asarray(timestamps, dtype="datetime64[D]")
    usable = len(ts) - 3 * T
    if usable < 3:
        raise ValueError("record too short for a gapped three-way split")
    n_train = max(1, int(round(train_frac * usable)))
    n_val = max(1, int(round(val_frac * usable)))
    train_end = ts[T + n_train]
    test_start = ts[T + n_train + T + n_val]
    return train_end, test_start
