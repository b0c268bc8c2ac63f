"""Clipping, weekly aggregation, normalization, gapped splits and windowing."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .dataio import WEEK, GridGeometry, RasterSeries, TargetSeries

DEFAULT_T = 104
TRAIN_END = np.datetime64("2016-01-01")
TEST_START = np.datetime64("2022-01-01")
STUDY_BBOX = (6.90, 44.35, 7.79, 44.84)  # lon_min, lat_min, lon_max, lat_max
N_MONTH_FEATURES = 11
MIN_SQUARE_SIDE = 5

TRAIN, VAL, TEST = "train", "val", "test"
DROPPED_GAP, DROPPED_MISSING = "dropped-gap", "dropped-missing"
SETS = (TRAIN, VAL, TEST)

_EPS = 1e-9


def clip_to_bbox(raster: RasterSeries, bbox) -> RasterSeries:
    """Keep the cells whose centers lie inside the closed box ``(lon_min, lat_min, lon_max, lat_max)``."""
    lon_min, lat_min, lon_max, lat_max = bbox
    g = raster.geometry
    lons, lats = g.cell_centers()
    cols = np.flatnonzero((lons >= lon_min - _EPS) & (lons <= lon_max + _EPS))
    rows = np.flatnonzero((lats >= lat_min - _EPS) & (lats <= lat_max + _EPS))
    if len(cols) == 0 or len(rows) == 0:
        raise ValueError(f"bounding box {bbox} does not contain any cell center of the grid")
    geometry = GridGeometry(
        g.origin_lon + cols[0] * g.cell_size,
        g.origin_lat - rows[0] * g.cell_size,
        g.cell_size,
        len(rows),
        len(cols),
    )
    values = raster.values[:, rows[0] : rows[-1] + 1, cols[0] : cols[-1] + 1, :]
    return raster.with_values(values.copy(), geometry)


def default_square_side(n_rows: int, n_cols: int) -> int:
    return max(n_rows, n_cols, MIN_SQUARE_SIDE)


def pad_to_square(raster: RasterSeries, side: int) -> RasterSeries:
    """Zero-pad symmetrically to ``side x side``; odd remainders go bottom/right.

    Call this on normalized data so the pad value is the training mean.
    """
    g = raster.geometry
    if side < max(g.n_rows, g.n_cols):
        raise ValueError(f"side {side} smaller than grid {g.n_rows}x{g.n_cols}")
    top = (side - g.n_rows) // 2
    left = (side - g.n_cols) // 2
    values = np.zeros((raster.values.shape[0], side, side, raster.values.shape[3]))
    values[:, top : top + g.n_rows, left : left + g.n_cols, :] = raster.values
    geometry = GridGeometry(
        g.origin_lon - left * g.cell_size, g.origin_lat + top * g.cell_size, g.cell_size, side, side
    )
    return raster.with_values(values, geometry)


def week_start(dates) -> np.ndarray:
    """Monday on or before each date."""
    days = np.asarray(dates, dtype="datetime64[D]")
    # 1970-01-01 was a Thursday: weekday (Mon=0) is (days + 3) % 7
    weekday = (days.astype(np.int64) + 3) % 7
    return days - weekday.astype("timedelta64[D]")


def aggregate_weekly(dates, values) -> tuple[np.ndarray, np.ndarray]:
    """Average daily values into Monday-anchored weeks.

    ``values`` may carry trailing dimensions; NaN marks a missing day. A
    week with no present value stays NaN.
    """
    dates = np.asarray(dates, dtype="datetime64[D]")
    values = np.asarray(values, dtype=np.float64)
    weeks = week_start(dates)
    uniq, inverse = np.unique(weeks, return_inverse=True)
    present = ~np.isnan(values)
    sums = np.zeros((len(uniq),) + values.shape[1:])
    counts = np.zeros_like(sums)
    np.add.at(sums, inverse, np.where(present, values, 0.0))
    np.add.at(counts, inverse, present)
    with np.errstate(invalid="ignore", divide="ignore"):
        out = np.where(counts > 0, sums / np.maximum(counts, 1), np.nan)
    return uniq, out


def month_one_hot(date) -> np.ndarray:
    """11-dim month indicator; December is the all-zero reference category."""
    month = int(np.datetime64(date, "M").astype(np.int64) % 12) + 1
    return MONTH_TABLE[month]


def months_of(dates) -> np.ndarray:
    """Calendar month (1-12) of each date."""
    return (np.asarray(dates, dtype="datetime64[M]").astype(np.int64) % 12 + 1).astype(np.int64)


# row m is the encoding of month m; row 0 is unused
MONTH_TABLE = np.zeros((13, N_MONTH_FEATURES))
MONTH_TABLE[np.arange(1, 12), np.arange(11)] = 1.0
MONTH_TABLE.flags.writeable = False


@dataclass(frozen=True)
class SplitIndex:
    dates: np.ndarray
    membership: np.ndarray  # one of SETS or a dropped-* label per date
    T: int

    def mask(self, name: str) -> np.ndarray:
        return self.membership == name

    def counts(self) -> dict:
        labels = SETS + (DROPPED_GAP, DROPPED_MISSING)
        return {k: int(np.count_nonzero(self.membership == k)) for k in labels}


def _weeks_between(later, earlier) -> np.ndarray:
    return (np.asarray(later, dtype="datetime64[D]") - earlier).astype(np.int64) / 7.0


def split_with_gaps(
    target: TargetSeries,
    train_end=TRAIN_END,
    test_start=TEST_START,
    T: int = DEFAULT_T,
    weather_start=None,
) -> SplitIndex:
    """Assign each prediction date to train/val/test with a ``T``-week gap.

    Train holds dates before ``train_end``, test those from ``test_start``
    on, val the rest. A val (test) date ``t`` is dropped when its window
    ``[t-T, t-1]`` reaches back to any week used by an earlier set, input
    weeks or target week. Missing targets are dropped first, so naturally
    missing stretches absorb the gap. With ``weather_start`` given, dates
    whose window would start before it are also dropped.
    """
    if T < 1:
        raise ValueError(f"T must be >= 1, got {T}")
    train_end = np.datetime64(train_end, "D")
    test_start = np.datetime64(test_start, "D")
    if test_start <= train_end:
        raise ValueError("test_start must come after train_end")
    dates = target.timestamps
    labels = np.where(dates < train_end, TRAIN, np.where(dates < test_start, VAL, TEST)).astype(object)
    labels[target.missing] = DROPPED_MISSING
    if weather_start is not None:
        short = dates - T * WEEK < np.datetime64(weather_start, "D")
        labels[short & (labels != DROPPED_MISSING)] = DROPPED_GAP

    for later in (VAL, TEST):
        earlier = np.isin(labels, SETS[: SETS.index(later)])
        if not earlier.any():
            break
        last_used = dates[earlier].max()
        cand = labels == later
        labels[cand & (_weeks_between(dates, last_used) <= T)] = DROPPED_GAP

    split = SplitIndex(dates, labels.astype(str), T)
    counts = split.counts()
    empty = [s for s in SETS if counts[s] == 0]
    if empty:
        raise ValueError(f"empty set(s) {empty} after applying gaps; counts: {counts}")
    return split


def window_overlaps(split: SplitIndex) -> list[tuple]:
    """Brute-force check: pairs of samples in different sets sharing an input week."""
    idx = {s: np.flatnonzero(split.mask(s)) for s in SETS}
    conflicts = []
    for a_pos, a in enumerate(SETS):
        for b in SETS[a_pos + 1 :]:
            for i in idx[a]:
                wa = set(split.dates[i] - WEEK * np.arange(1, split.T + 1))
                for j in idx[b]:
                    wb = split.dates[j] - WEEK * np.arange(1, split.T + 1)
                    if wa.intersection(wb):
                        conflicts.append((a, split.dates[i], b, split.dates[j]))
    return conflicts


@dataclass(frozen=True)
class NormStats:
    weather_mean: np.ndarray  # per channel
    weather_std: np.ndarray
    target_mean: float
    target_std: float
    target_min: float
    target_max: float

    def __post_init__(self):
        if np.any(np.asarray(self.weather_std) <= 0) or not self.target_std > 0:
            raise ValueError("zero variance: normalization needs positive standard deviations")
        if not self.target_max > self.target_min:
            raise ValueError("training targets must span a positive range")

    def normalize_weather(self, values):
        return (values - self.weather_mean) / self.weather_std

    def normalize_target(self, y):
        return (np.asarray(y, dtype=np.float64) - self.target_mean) / self.target_std

    def denormalize_target(self, z):
        return np.asarray(z, dtype=np.float64) * self.target_std + self.target_mean

    def to_dict(self) -> dict:
        return {
            "weather_mean": [float(v) for v in self.weather_mean],
            "weather_std": [float(v) for v in self.weather_std],
            "target_mean": float(self.target_mean),
            "target_std": float(self.target_std),
            "target_min": float(self.target_min),
            "target_max": float(self.target_max),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "NormStats":
        return cls(np.asarray(d["weather_mean"]), np.asarray(d["weather_std"]), d["target_mean"],
                   d["target_std"], d["target_min"], d["target_max"])


def fit_normalizer(weather: RasterSeries, target: TargetSeries, split: SplitIndex) -> NormStats:
    """Training-period statistics, population (1/N) standard deviations.

    Weather statistics pool all cells of the weeks that feed any training
    window; target statistics use the present training targets.
    """
    train = split.mask(TRAIN)
    if np.count_nonzero(train) < 2:
        raise ValueError("need at least two training targets to fit the normalizer")
    y = target.values[np.isin(target.timestamps, split.dates[train])]
    first = split.dates[train].min() - split.T * WEEK
    last = split.dates[train].max() - WEEK
    weeks = (weather.timestamps >= first) & (weather.timestamps <= last)
    if not weeks.any():
        raise ValueError("no weather weeks overlap the training windows")
    w = weather.values[weeks]
    mean = w.mean(axis=(0, 1, 2))
    std = w.std(axis=(0, 1, 2))
    zero = [weather.variables[i] for i in np.flatnonzero(std <= 0)]
    if zero:
        raise ValueError(f"zero variance in weather channel(s) {zero}")
    return NormStats(mean, std, float(y.mean()), float(y.std()), float(y.min()), float(y.max()))


@dataclass(frozen=True, eq=False)
class WindowedDataset:
    """Samples indexed over one shared normalized weather array.

    Sample ``i`` predicts ``dates[i]`` from weather weeks
    ``end[i]-T .. end[i]-1`` (week ``end[i]`` itself is never an input).
    """

    weather: np.ndarray  # (n_weeks, S, S, P), normalized and padded
    weather_months: np.ndarray  # (n_weeks,) month 1..12
    end: np.ndarray  # (N,) index of the prediction week in the weather timeline
    dates: np.ndarray
    membership: np.ndarray
    z: np.ndarray  # normalized target
    y: np.ndarray  # target in meters
    T: int
    stats: NormStats

    def __post_init__(self):
        for a in (self.weather, self.weather_months, self.end, self.dates, self.membership, self.z, self.y):
            a.flags.writeable = False

    def __len__(self):
        return len(self.end)

    def indices(self, name: str) -> np.ndarray:
        return np.flatnonzero(self.membership == name)

    def window(self, i: int) -> tuple[np.ndarray, np.ndarray]:
        e = self.end[i]
        return self.weather[e - self.T : e], self.weather_months[e - self.T : e]

    def batch(self, idx) -> tuple[np.ndarray, np.ndarray]:
        """Stacked ``(B, T, S, S, P)`` video and ``(B, T)`` months."""
        offsets = np.asarray(self.end)[np.asarray(idx)][:, None] - self.T + np.arange(self.T)
        return self.weather[offsets], self.weather_months[offsets]


def build_windows(
    weather: RasterSeries,
    target: TargetSeries,
    split: SplitIndex,
    T: int | None = None,
    stats: NormStats | None = None,
    side: int | None = None,
) -> WindowedDataset:
    """Materialize one normalized sample per retained prediction date."""
    T = split.T if T is None else T
    if T != split.T:
        raise ValueError(f"split was built with T={split.T}, not {T}")
    stats = stats or fit_normalizer(weather, target, split)
    keep = np.isin(split.membership, SETS)
    dates = split.dates[keep]
    start = weather.timestamps[0]
    offset = (dates - start).astype(np.int64)
    if np.any(offset % 7):
        raise ValueError("prediction dates are not aligned with the weather weeks")
    end = offset // 7
    bad = (end - T < 0) | (end - 1 > len(weather.timestamps) - 1)
    if bad.any():
        raise ValueError(f"window exits weather record for prediction date {dates[bad][0]}")

    normalized = weather.with_values(stats.normalize_weather(weather.values))
    g = normalized.geometry
    side = side if side is not None else default_square_side(g.n_rows, g.n_cols)
    padded = pad_to_square(normalized, side)

    y = target.values[np.isin(target.timestamps, dates)]
    return WindowedDataset(
        weather=padded.values,
        weather_months=months_of(weather.timestamps),
        end=end,
        dates=dates,
        membership=split.membership[keep],
        z=stats.normalize_target(y),
        y=y,
        T=T,
        stats=stats,
    )
