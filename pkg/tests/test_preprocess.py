import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from tdcnet.dataio import SYNTH_START, GridGeometry, RasterSeries, TargetSeries
from tdcnet.preprocess import (
    DROPPED_GAP,
    DROPPED_MISSING,
    MONTH_TABLE,
    STUDY_BBOX,
    TEST,
    TRAIN,
    VAL,
    aggregate_weekly,
    build_windows,
    clip_to_bbox,
    default_square_side,
    fit_normalizer,
    month_one_hot,
    months_of,
    pad_to_square,
    split_with_gaps,
    week_start,
    window_overlaps,
)

WEEK = np.timedelta64(7, "D")


def weekly(n, start=SYNTH_START):
    return start + WEEK * np.arange(n)


def _target(n, missing=(), start=SYNTH_START):
    v = 4.0 + 0.1 * np.arange(n)
    v[list(missing)] = np.nan
    return TargetSeries("s", weekly(n, start), v)


# -- clipping and padding ---------------------------------------------------

def _grid(origin_lon, origin_lat, rows, cols, cell=0.125, n=2):
    g = GridGeometry(origin_lon, origin_lat, cell, rows, cols)
    values = np.arange(n * rows * cols * 1, dtype=float).reshape(n, rows, cols, 1)
    return RasterSeries(g, ("tp",), weekly(n), values)


def brute_force_inside(raster, bbox):
    g = raster.geometry
    inside = []
    for r in range(g.n_rows):
        for c in range(g.n_cols):
            lon = g.origin_lon + (c + 0.5) * g.cell_size
            lat = g.origin_lat - (r + 0.5) * g.cell_size
            if bbox[0] <= lon <= bbox[2] and bbox[1] <= lat <= bbox[3]:
                inside.append((r, c))
    return inside


def test_clip_study_box_on_aligned_grid():
    # centers on multiples of 0.125 degrees
    raster = _grid(6.4375, 45.3125, 10, 12)
    clipped = clip_to_bbox(raster, STUDY_BBOX)
    inside = brute_force_inside(raster, STUDY_BBOX)
    rows = sorted({r for r, _ in inside})
    cols = sorted({c for _, c in inside})
    assert (clipped.geometry.n_rows, clipped.geometry.n_cols) == (len(rows), len(cols)) == (4, 7)
    np.testing.assert_array_equal(clipped.values[0, :, :, 0],
                                  raster.values[0, rows[0]:rows[-1] + 1, cols[0]:cols[-1] + 1, 0])
    lons, lats = clipped.geometry.cell_centers()
    assert lons[0] == pytest.approx(7.0) and lats[-1] == pytest.approx(44.375)


def test_clip_study_box_on_box_anchored_grid():
    # first center exactly at the box's south-west corner: one more column fits
    raster = _grid(6.90 - 0.0625, 44.35 + 0.0625 + 0.125 * 5, 8, 12)
    clipped = clip_to_bbox(raster, STUDY_BBOX)
    assert (clipped.geometry.n_rows, clipped.geometry.n_cols) == (4, 8)
    assert len(brute_force_inside(raster, STUDY_BBOX)) == 32


@settings(max_examples=30, deadline=None)
@given(
    ox=st.floats(6.0, 7.0),
    oy=st.floats(44.9, 45.6),
    lon0=st.floats(6.2, 7.5),
    lat0=st.floats(44.0, 44.8),
    w=st.floats(0.2, 1.0),
    h=st.floats(0.2, 0.6),
)
def test_clip_matches_enumeration(ox, oy, lon0, lat0, w, h):
    raster = _grid(ox, oy, 14, 16)
    bbox = (lon0, lat0, lon0 + w, lat0 + h)
    inside = brute_force_inside(raster, bbox)
    if not inside:
        with pytest.raises(ValueError):
            clip_to_bbox(raster, bbox)
        return
    clipped = clip_to_bbox(raster, bbox)
    assert clipped.geometry.n_rows * clipped.geometry.n_cols == len(inside)


def test_clip_empty_intersection():
    with pytest.raises(ValueError, match="does not contain"):
        clip_to_bbox(_grid(6.5, 45.25, 4, 4), (10.0, 10.0, 11.0, 11.0))


def test_pad_to_square_centres_data():
    raster = _grid(7.0, 44.875, 4, 7)
    assert default_square_side(4, 7) == 7
    assert default_square_side(2, 3) == 5
    padded = pad_to_square(raster, 7)
    v = padded.values[0, :, :, 0]
    assert v.shape == (7, 7)
    assert np.all(v[0] == 0) and np.all(v[5:] == 0)
    np.testing.assert_array_equal(v[1:5], raster.values[0, :, :, 0])
    with pytest.raises(ValueError):
        pad_to_square(raster, 6)


# -- calendar ---------------------------------------------------------------

def test_week_start_is_monday():
    days = np.datetime64("2008-01-07") + np.arange(14)
    ws = week_start(days)
    assert np.all(ws[:7] == np.datetime64("2008-01-07"))
    assert np.all(ws[7:] == np.datetime64("2008-01-14"))


def test_aggregate_weekly():
    days = np.datetime64("2008-01-07") + np.arange(21)
    vals = np.arange(21.0)
    vals[3] = np.nan
    vals[14:] = np.nan
    weeks, out = aggregate_weekly(days, vals)
    assert list(weeks) == list(weekly(3))
    assert out[0] == pytest.approx(np.mean([0, 1, 2, 4, 5, 6]))
    assert out[1] == pytest.approx(10.0)
    assert np.isnan(out[2])


def test_month_encoding():
    dec = month_one_hot("2015-12-20")
    assert dec.shape == (11,) and np.all(dec == 0)
    for m in range(1, 12):
        v = month_one_hot(f"2015-{m:02d}-03")
        assert v.sum() == 1 and v[m - 1] == 1
    assert list(months_of(["2015-01-31", "2015-12-01"])) == [1, 12]
    assert not MONTH_TABLE.flags.writeable


# -- split with gaps ----------------------------------------------------------

def test_toy_split():
    target = _target(30)
    split = split_with_gaps(target, weekly(30)[10], weekly(30)[20], T=4)
    m = split.membership
    assert list(np.flatnonzero(m == TRAIN)) == list(range(10))
    assert list(np.flatnonzero(m == VAL)) == list(range(14, 20))
    assert list(np.flatnonzero(m == TEST)) == list(range(24, 30))
    assert list(np.flatnonzero(m == DROPPED_GAP)) == [10, 11, 12, 13, 20, 21, 22, 23]


def test_missing_targets_absorb_gap():
    target = _target(30, missing=range(9, 12))
    split = split_with_gaps(target, weekly(30)[10], weekly(30)[20], T=4)
    assert list(np.flatnonzero(split.mask(DROPPED_MISSING))) == [9, 10, 11]
    # last train week is 8, so val may start at 13
    assert np.flatnonzero(split.mask(VAL))[0] == 13


def test_weather_start_drops_short_windows():
    split = split_with_gaps(_target(30), weekly(30)[10], weekly(30)[20], T=4, weather_start=weekly(30)[0])
    assert list(np.flatnonzero(split.mask(TRAIN))) == list(range(4, 10))


def test_split_errors():
    with pytest.raises(ValueError):
        split_with_gaps(_target(30), weekly(30)[10], weekly(30)[20], T=0)
    with pytest.raises(ValueError, match="empty"):
        split_with_gaps(_target(30), weekly(30)[10], weekly(30)[12], T=4)


@settings(max_examples=40, deadline=None)
@given(
    T=st.integers(1, 8),
    a=st.integers(5, 25),
    b=st.integers(5, 25),
    missing=st.sets(st.integers(0, 79), max_size=20),
)
def test_no_leakage_property(T, a, b, missing):
    n = 80
    target = _target(n, missing=missing)
    ts = weekly(n)
    try:
        split = split_with_gaps(target, ts[a], ts[min(a + b, n - 1)], T=T)
    except ValueError:
        return
    assert window_overlaps(split) == []
    order = {TRAIN: 0, VAL: 1, TEST: 2}
    used = [(order[m], d) for m, d in zip(split.membership, split.dates) if m in order]
    for rank, d in used:
        inputs = set(d - WEEK * np.arange(1, T + 1))
        for other_rank, other in used:
            if other_rank < rank:
                assert other not in inputs
                assert not inputs & set(other - WEEK * np.arange(1, T + 1))


# -- normalization and windows -----------------------------------------------

def _case(n=40, T=4):
    rng = np.random.default_rng(0)
    g = GridGeometry(7.0, 44.875, 0.125, 3, 4)
    w = RasterSeries(g, ("tp", "tmax"), weekly(n), rng.normal(5.0, 2.0, size=(n, 3, 4, 2)))
    t = _target(n)
    split = split_with_gaps(t, weekly(n)[20], weekly(n)[30], T=T, weather_start=weekly(n)[0])
    return w, t, split


def test_normalizer_uses_training_windows_only():
    w, t, split = _case()
    stats = fit_normalizer(w, t, split)
    train_dates = split.dates[split.mask(TRAIN)]
    week_ids = sorted({int((d - weekly(1)[0]) / WEEK) - k for d in train_dates for k in range(1, 5)})
    pooled = [w.values[i, r, c, 0] for i in week_ids for r in range(3) for c in range(4)]
    mu = sum(pooled) / len(pooled)
    sd = (sum((x - mu) ** 2 for x in pooled) / len(pooled)) ** 0.5
    assert stats.weather_mean[0] == pytest.approx(mu, abs=1e-12)
    assert stats.weather_std[0] == pytest.approx(sd, abs=1e-12)
    y = t.values[np.isin(t.timestamps, train_dates)]
    assert stats.target_std == pytest.approx(np.sqrt(np.mean((y - y.mean()) ** 2)))
    z = stats.normalize_target(y)
    assert z.mean() == pytest.approx(0, abs=1e-12) and z.std() == pytest.approx(1)
    np.testing.assert_allclose(stats.denormalize_target(z), y)


def test_zero_variance_rejected():
    w, t, split = _case()
    const = w.with_values(np.ones_like(w.values))
    with pytest.raises(ValueError, match="zero variance"):
        fit_normalizer(const, t, split)


def test_windows_exclude_prediction_week():
    w, t, split = _case()
    data = build_windows(w, t, split)
    stats = data.stats
    i = 5
    video, months = data.window(i)
    e = data.end[i]
    assert w.timestamps[e] == data.dates[i]
    # 3x4 grid padded to 5x5: one row above, one row below, one column right
    np.testing.assert_allclose(video[:, 1:4, :4], stats.normalize_weather(w.values[e - 4:e]))
    assert np.all(video[:, 0] == 0) and np.all(video[:, 4] == 0) and np.all(video[:, :, 4] == 0)
    assert video.shape == (4, 5, 5, 2)
    vb, mb = data.batch([i, i + 1])
    assert vb.shape == (2, 4, 5, 5, 2) and mb.shape == (2, 4)
    np.testing.assert_array_equal(vb[0], video)
    np.testing.assert_array_equal(mb[0], months)
    assert data.y[i] == t.values[e]


def test_window_past_record_end():
    w, t, split = _case()
    short = RasterSeries(w.geometry, w.variables, w.timestamps[:30], w.values[:30])
    with pytest.raises(ValueError, match="window exits weather record"):
        build_windows(short, t, split)


def test_stats_round_trip():
    w, t, split = _case()
    stats = fit_normalizer(w, t, split)
    back = type(stats).from_dict(stats.to_dict())
    np.testing.assert_array_equal(back.weather_std, stats.weather_std)
    assert back.target_mean == stats.target_mean


def test_missing_block_across_boundary_costs_nothing():
    target = _target(30, missing=range(8, 14))
    split = split_with_gaps(target, weekly(30)[10], weekly(30)[20], T=4)
    assert list(np.flatnonzero(split.mask(VAL))) == list(range(14, 20))
    gap = np.flatnonzero(split.mask(DROPPED_GAP))
    assert all(i >= 20 for i in gap)

