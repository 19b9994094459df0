import numpy as np
import pytest

from mstn.data import (PAPER_MASK_RATIOS, MaskSpec, MinMaxScaler, TimeSeriesDataset, WindowSpec,
                       apply_mask, chronological_split, draw_mask, fit_transform_minmax,
                       lag_autocorrelation, load_csv, make_segments, make_windows, mask_windows,
                       save_csv, save_mask_csv, stratified_split, synth_classes, synth_sine)
from mstn.errors import ConfigError, DataError, DegenerateError, ProtocolError
from mstn.rng import Rng


def write(tmp_path, text, name="s.csv"):
    p = tmp_path / name
    p.write_text(text, encoding="utf-8")
    return p


# ------------------------------------------------------------------------ CSV
def test_load_plain_csv(tmp_path):
    ds = load_csv(write(tmp_path, "1,2\n3,4\n5,6\n"), has_header=False, split=(1, 2))
    np.testing.assert_array_equal(ds.values, [[1, 2], [3, 4], [5, 6]])


def test_load_with_timestamp_column(tmp_path):
    ds = load_csv(write(tmp_path, "date,a,b\n2020-01-01,1,2\n2020-01-02,3,4\n2020-01-03,5,6\n"),
                  timestamp_col=0, split=(1, 2))
    assert ds.n_features == 2
    assert ds.feature_names == ["a", "b"]
    assert ds.timestamps == ["2020-01-01", "2020-01-02", "2020-01-03"]


def test_unparseable_cell_reports_position(tmp_path):
    with pytest.raises(DataError, match="row 3, column 2"):
        load_csv(write(tmp_path, "a,b\n1,2\n3,x\n"))


def test_ragged_row(tmp_path):
    with pytest.raises(DataError, match="ragged"):
        load_csv(write(tmp_path, "a,b\n1,2\n3\n"))


def test_missing_file(tmp_path):
    with pytest.raises(DataError):
        load_csv(tmp_path / "nope.csv")


def test_nan_row_rejected(tmp_path):
    with pytest.raises(DataError, match="row 1"):
        load_csv(write(tmp_path, "a\n1\nnan\n2\n"), split=(1, 2))


def test_csv_round_trip(tmp_path, np_rng):
    ds = TimeSeriesDataset(np_rng.standard_normal((20, 3)) * 1e3, ["x", "y", "z"],
                           timestamps=[f"t{i}" for i in range(20)])
    save_csv(ds, tmp_path / "a.csv")
    back = load_csv(tmp_path / "a.csv", timestamp_col=0)
    np.testing.assert_allclose(back.values, ds.values, atol=1e-9, rtol=0)
    assert back.feature_names == ds.feature_names and back.timestamps == ds.timestamps


def test_mask_csv(tmp_path):
    save_mask_csv(np.array([[1.0, 0.0], [0.0, 1.0]]), tmp_path / "m.csv")
    assert (tmp_path / "m.csv").read_text() == "1,0\n0,1\n"


@pytest.mark.parametrize("n, bounds", [(100, (70, 80)), (10, (7, 8)), (1200, (840, 960))])
def test_chronological_split(n, bounds):
    assert chronological_split(n) == bounds


def test_bad_split():
    with pytest.raises(DataError):
        TimeSeriesDataset(np.zeros((10, 1)), split=(5, 3))


# ------------------------------------------------------------------- scaling
def test_minmax_example():
    ds = TimeSeriesDataset(np.array([[0.0], [5.0], [10.0], [20.0]]), split=(3, 4))
    out = fit_transform_minmax(ds)
    np.testing.assert_allclose(out.values[:, 0], [0, 0.5, 1.0, 2.0])


def test_minmax_round_trip(np_rng):
    x = np_rng.standard_normal((50, 4)) * 7 + 3
    s = MinMaxScaler.fit(x[:30])
    np.testing.assert_allclose(s.inverse_transform(s.transform(x)), x, atol=1e-6)
    t = s.transform(x[:30])
    np.testing.assert_allclose(t.min(axis=0), 0.0)
    np.testing.assert_allclose(t.max(axis=0), 1.0)


def test_constant_feature_is_named():
    ds = TimeSeriesDataset(np.column_stack([np.arange(10.0), np.ones(10)]), ["ok", "flat"])
    with pytest.raises(DegenerateError, match="flat"):
        fit_transform_minmax(ds)


def test_scaler_ignores_test_rows(np_rng):
    x = np_rng.standard_normal((40, 2))
    a = fit_transform_minmax(TimeSeriesDataset(x.copy())).scaler
    x[32:] *= 100
    b = fit_transform_minmax(TimeSeriesDataset(x)).scaler
    np.testing.assert_array_equal(a.data_min, b.data_min)
    np.testing.assert_array_equal(a.data_max, b.data_max)


# ------------------------------------------------------------------- windows
def series(n, D=1):
    return TimeSeriesDataset(np.arange(n * D, dtype=float).reshape(n, D), split=(n - 2, n - 1))


def test_window_count_example():
    X, Y = make_windows(series(12), WindowSpec(4, 2), "train")
    assert len(X) == 5 and X.shape == (5, 4, 1) and Y.shape == (5, 2, 1)


def test_windows_abut_and_reproduce_rows():
    ds = series(40, 2)
    rows = ds.rows("train")
    X, Y = make_windows(ds, WindowSpec(5, 3), "train")
    assert Y[0, 0, 0] == X[0, -1, 0] + 2
    for i in range(len(X)):
        np.testing.assert_array_equal(np.concatenate([X[i], Y[i]]), rows[i:i + 8])


def test_window_count_sweep(np_rng):
    for _ in range(200):
        L, H = np_rng.integers(1, 10, 2)
        n = int(np_rng.integers(L + H, L + H + 30))
        ds = TimeSeriesDataset(np.zeros((n + 2, 1)), split=(n, n + 1))
        assert len(make_windows(ds, WindowSpec(L, H), "train")[0]) == n - L - H + 1 == WindowSpec(L, H).count(n)


def test_window_split_too_short():
    with pytest.raises(ProtocolError, match="needs at least 8"):
        make_windows(series(12), WindowSpec(4, 4), "val")


def test_window_spec_validation():
    with pytest.raises(ConfigError):
        WindowSpec(0, 3)


def test_segments_stride():
    segs = make_segments(series(30), 6, "train", stride=3)
    assert segs.shape == (8, 6, 1)
    np.testing.assert_array_equal(segs[:, 0, 0], np.arange(0, 24, 3))


# --------------------------------------------------------------------- masks
def test_mask_half_of_two_by_two():
    xm, mask, xt = apply_mask(np.ones((2, 2)), MaskSpec(0.5, seed=1))
    assert mask.sum() == 2
    np.testing.assert_array_equal(xm, 1 - mask)
    np.testing.assert_array_equal(xt, np.ones((2, 2)))


def test_mask_same_seed_same_mask():
    a = apply_mask(np.zeros((10, 3)), MaskSpec(0.25, seed=7))[1]
    b = apply_mask(np.zeros((10, 3)), MaskSpec(0.25, seed=7))[1]
    np.testing.assert_array_equal(a, b)


@pytest.mark.parametrize("ratio", PAPER_MASK_RATIOS)
def test_mask_count_exact_on_grid(ratio):
    rng = Rng(0, "grid")
    spec = MaskSpec(ratio)
    for T in range(8, 97, 8):
        for D in range(1, 22, 4):
            m = draw_mask((T, D), spec, rng)
            assert m.sum() == int(np.floor(ratio * T * D + 0.5))
            assert set(np.unique(m)) <= {0.0, 1.0}


def test_mask_count_rounds_half_up():
    assert MaskSpec(0.125).count(4, 1) == 1
    assert MaskSpec(0.375).count(4, 1) == 2


def test_mask_uniform_over_cells():
    rng = Rng(3)
    freq = np.mean([draw_mask((4, 3), MaskSpec(0.25), rng) for _ in range(10_000)], axis=0)
    assert np.abs(freq - 0.25).max() < 0.02


def test_timestep_masks_whole_rows():
    m = draw_mask((8, 3), MaskSpec(0.25, unit="timestep"), Rng(0))
    assert m.sum() == 2 * 3
    assert ((m.sum(axis=1) == 0) | (m.sum(axis=1) == 3)).all()


def test_mask_degenerate():
    with pytest.raises(DegenerateError):
        draw_mask((2, 1), MaskSpec(0.1), Rng(0))


@pytest.mark.parametrize("ratio", [0.0, 1.0, -0.2])
def test_mask_ratio_bounds(ratio):
    with pytest.raises(ConfigError):
        MaskSpec(ratio)


def test_mask_windows_zero_fill(np_rng):
    X = np_rng.standard_normal((5, 8, 2))
    Xm, M = mask_windows(X, MaskSpec(0.25, seed=2))
    assert (M.sum(axis=(1, 2)) == 4).all()
    np.testing.assert_array_equal(Xm[M == 1], 0.0)
    np.testing.assert_array_equal(Xm[M == 0], X[M == 0])


# ----------------------------------------------------------------- synthetic
def test_sine_exactly_periodic():
    ds = synth_sine(2, 400, 3, period_range=(6, 12), seed=4)
    p = ds.meta["period"]
    v = ds.values
    assert p < 400
    np.testing.assert_allclose(v[:-p], v[p:], atol=1e-6)


def test_sine_deterministic_bytes():
    assert synth_sine(2, 100, 2, seed=1).values.tobytes() == synth_sine(2, 100, 2, seed=1).values.tobytes()
    assert synth_sine(2, 100, 2, seed=1).values.tobytes() != synth_sine(2, 100, 2, seed=2).values.tobytes()


def test_sine_noise():
    clean = synth_sine(1, 500, 1, seed=0).values
    noisy = synth_sine(1, 500, 1, noise_sd=0.1, seed=0).values
    assert 0.08 < np.std(noisy - clean) < 0.12


def test_classes_autocorrelation_separates():
    data = synth_classes(50, 64, 2, seed=0, period=8)
    ac = data.meta["autocorr"]
    assert ac[0] > 0.9 and ac[1] < 0.3
    assert data.X.shape == (100, 64, 2) and np.bincount(data.y).tolist() == [50, 50]
    i = int(np.flatnonzero(data.y == 0)[0])
    assert lag_autocorrelation(data.X[i, :, 0], 8) > 0.99


def test_classes_deterministic():
    a, b = synth_classes(10, 32, 1, seed=5), synth_classes(10, 32, 1, seed=5)
    assert a.X.tobytes() == b.X.tobytes() and (a.y == b.y).all()


def test_stratified_split_covers_every_class():
    y = np.repeat([0, 1, 2], 20)
    parts = stratified_split(y, seed=0)
    assert sorted(np.concatenate(list(parts.values())).tolist()) == list(range(60))
    for idx in parts.values():
        assert set(y[idx]) == {0, 1, 2}


def test_stratified_split_too_few():
    with pytest.raises(DataError, match="absent"):
        stratified_split(np.array([0, 0, 0, 1]), seed=0)
