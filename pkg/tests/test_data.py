import logging
import struct

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from ragl import data as D


def series(steps=100, n=3, c=1, seed=0, distances=True):
    rng = np.random.default_rng(seed)
    dist = rng.uniform(0, 10, (n, n)) if distances else None
    if dist is not None:
        dist = (dist + dist.T) / 2
        np.fill_diagonal(dist, 0)
    return D.TrafficSeries(rng.standard_normal((steps, n, c)).astype(np.float32), 1546300800, 900, dist)


# ---- binary format


def test_round_trip_is_byte_identical(tmp_path):
    s = series()
    p1, p2 = tmp_path / "a.bin", tmp_path / "b.bin"
    D.save_series(s, p1)
    D.save_series(D.load_series(p1), p2)
    assert p1.read_bytes() == p2.read_bytes()
    back = D.load_series(p1)
    np.testing.assert_array_equal(back.values, s.values)
    np.testing.assert_array_equal(back.distances, s.distances.astype(np.float32))
    assert (back.start_timestamp, back.interval_seconds) == (1546300800, 900)


def test_header_layout():
    blob = D.encode_series(series(steps=2, n=2, c=1, distances=False))
    magic, version, n, steps, c, interval, start = struct.unpack_from("<4sIIQIIq", blob)
    assert (magic, version, n, steps, c, interval, start) == (b"RAGL", 1, 2, 2, 1, 900, 1546300800)
    assert len(blob) == 36 + 4 * 4 + 1


def test_truncated_payload_names_sizes():
    blob = D.encode_series(series(distances=False))
    cut = blob[:-50]
    with pytest.raises(D.TruncatedFileError, match=f"{len(blob)} bytes.*got {len(cut)}"):
        D.decode_series(cut)
    with pytest.raises(D.TruncatedFileError):
        D.decode_series(blob[:20])


def test_year_of_quarter_hours_header():
    steps = 365 * 96
    assert steps == 35040
    header = struct.pack("<4sIIQIIq", b"RAGL", 1, 716, steps, 1, 900, 0)
    expected = 36 + 4 * 716 * steps + 1
    with pytest.raises(D.TruncatedFileError, match=str(expected)):
        D.decode_series(header)
    s = D.TrafficSeries(np.zeros((steps, 1, 1)), 0, 900)
    assert s.steps == 35040
    assert s.timestamps()[-1] - s.timestamps()[0] == (365 * 86400) - 900


def test_bad_magic_and_nan(tmp_path):
    with pytest.raises(D.BadMagicError):
        D.decode_series(b"NOPE" + bytes(40))
    s = series(distances=False)
    s.values[3, 1, 0] = np.nan
    with pytest.raises(D.NonFiniteDataError):
        D.decode_series(D.encode_series(s))


def test_distinct_error_classes():
    classes = {D.BadMagicError, D.TruncatedFileError, D.NonFiniteDataError}
    assert len(classes) == 3
    assert all(issubclass(c, D.SeriesFormatError) for c in classes)


def test_text_format_round_trip(tmp_path):
    s = series(steps=10, n=2, c=2, distances=False)
    path = tmp_path / "s.txt"
    D.save_text_series(s, path)
    assert path.read_text().splitlines()[0] == "2 10 2 900 1546300800"
    back = D.read_series(path)
    np.testing.assert_allclose(back.values, s.values, rtol=1e-7)


def test_read_series_detects_binary(tmp_path):
    path = tmp_path / "s.bin"
    D.save_series(series(), path)
    assert D.read_series(path).steps == 100


# ---- splits and windows


def test_split_100_steps():
    sp = D.split_and_window(series(100), (0.6, 0.2, 0.2), 12, 12)
    assert sp.bounds == (60, 80, 100)
    assert (len(sp.train), len(sp.val), len(sp.test)) == (37, 0, 0)


def test_split_too_short_for_training_window():
    with pytest.raises(D.DataConfigError):
        D.split_and_window(series(30), (0.6, 0.2, 0.2), 12, 12)


def test_split_100_steps_small_horizon():
    sp = D.split_and_window(series(100), (0.6, 0.2, 0.2), 4, 4)
    assert sp.bounds == (60, 80, 100)
    assert (len(sp.train), len(sp.val), len(sp.test)) == (53, 13, 13)


def test_split_year_arithmetic():
    assert D.split_steps(35040) == (21024, 7008, 7008)
    assert D.window_count(21024, 12, 12) == 21001
    assert D.window_count(7008, 12, 12) == 6985


def test_all_train_split():
    sp = D.split_and_window(series(100), (1.0, 0.0, 0.0), 12, 12)
    assert len(sp.train) == 77 and len(sp.val) == 0 and len(sp.test) == 0


def test_bad_ratios():
    with pytest.raises(D.DataConfigError):
        D.split_steps(100, (0.5, 0.2, 0.2))


def test_window_slices_are_consecutive():
    s = series(60, seed=4)
    sp = D.split_and_window(s, (0.6, 0.2, 0.2), 3, 2)
    w = sp.val[2]
    k = sp.val.starts[2]
    np.testing.assert_array_equal(w.input, s.values[k:k + 3].transpose(1, 0, 2))
    np.testing.assert_array_equal(w.target, s.values[k + 3:k + 5].transpose(1, 0, 2))
    ts = s.start_timestamp + 900 * (k + 2)
    assert (w.time_index.tod, w.time_index.dow) == (
        (ts % 86400) // 900, ((ts // 86400) + 3) % 7)


@given(st.integers(30, 400), st.integers(1, 6), st.integers(1, 6))
def test_window_counts_and_no_leakage(steps, t_in, t_out):
    s = D.TrafficSeries(np.zeros((steps, 1, 1)))
    sizes = D.split_steps(steps)
    if min(sizes) < t_in + t_out:
        return
    sp = D.split_and_window(s, (0.6, 0.2, 0.2), t_in, t_out)
    for ws, size in zip(sp, sizes):
        assert len(ws) == size - t_in - t_out + 1
        assert np.all(np.diff(ws.starts) == 1)
    last_train_target = sp.train.starts[-1] + t_in + t_out - 1
    assert sp.val.starts[0] + t_in > last_train_target
    assert sp.test.starts[0] + t_in > sp.val.starts[-1] + t_in + t_out - 1
    assert sp.train.starts[-1] + t_in + t_out <= sizes[0]


# ---- normalisation


def test_normalize_uses_training_steps_only():
    s = series(200, seed=1)
    sp = D.split_and_window(s, (0.6, 0.2, 0.2), 4, 4)
    _, stats = D.normalize(sp)
    block = s.values[: sp.train.starts[-1] + 4]
    np.testing.assert_allclose(stats.mean, block.mean(axis=(0, 1)))
    np.testing.assert_allclose(stats.std, block.std(axis=(0, 1)))
    shifted = D.TrafficSeries(s.values.copy(), s.start_timestamp, s.interval_seconds)
    shifted.values[150:] += 1000
    _, stats2 = D.normalize(D.split_and_window(shifted, (0.6, 0.2, 0.2), 4, 4))
    np.testing.assert_array_equal(stats.mean, stats2.mean)


def test_normalize_targets_stay_raw():
    s = series(200, seed=2)
    sp, stats = D.normalize(D.split_and_window(s, (0.6, 0.2, 0.2), 4, 4))
    b = sp.test.batch([0])
    k = sp.test.starts[0]
    np.testing.assert_array_equal(b.targets[0], s.values[k + 4:k + 8].transpose(1, 0, 2))
    np.testing.assert_allclose(b.inputs[0], stats.apply(s.values[k:k + 4]).transpose(1, 0, 2))


def test_round_trip_within_tolerance():
    stats = D.NormStats(np.array([3.0]), np.array([7.0]))
    x = np.random.default_rng(0).standard_normal((5, 2, 1)) * 100
    np.testing.assert_allclose(stats.invert(stats.apply(x)), x, atol=1e-12)


def test_constant_channel_guarded(caplog):
    s = D.TrafficSeries(np.full((60, 2, 1), 5.0))
    with caplog.at_level(logging.WARNING):
        sp, stats = D.normalize(D.split_and_window(s, (0.6, 0.2, 0.2), 2, 2))
    assert stats.std[0] == 1.0
    assert np.all(sp.train.all().inputs == 0.0)
    assert "zero-variance" in caplog.text


# ---- geographic adjacency


def test_geo_adjacency_properties():
    s = D.synth_generate(n_nodes=15, steps=10, seed=3)
    a = D.geo_adjacency(s.distances).toarray()
    np.testing.assert_allclose(a.sum(1), 1.0, atol=1e-12)
    assert a.min() >= 0
    raw = D.gaussian_kernel(s.distances)
    np.testing.assert_array_equal(np.diag(raw), 1.0)
    assert np.all((raw == 0) | (raw >= 0.1))


def test_geo_threshold_zeroes_small_weights():
    r = np.array([[0.0, 1.0, 10.0], [1.0, 0.0, 10.0], [10.0, 10.0, 0.0]])
    raw = D.gaussian_kernel(r, sigma=2.0, eps_threshold=0.1)
    assert raw[0, 2] == 0.0
    np.testing.assert_allclose(raw[0, 1], np.exp(-0.25))


def test_geo_two_nodes_symmetric():
    r = np.array([[0.0, 3.0], [3.0, 0.0]])
    raw = D.gaussian_kernel(r, sigma=4.0)
    np.testing.assert_array_equal(raw, raw.T)
    a = D.geo_adjacency(r, sigma=4.0).toarray()
    np.testing.assert_allclose(a.sum(1), 1.0)


def test_geo_isolated_row_gets_self_loop():
    r = np.array([[0.0, 100.0], [100.0, 0.0]])
    # with a tiny sigma even the diagonal is kept only through the self-loop rule
    a = D.geo_adjacency(r, sigma=1.0, eps_threshold=1.5).toarray()
    np.testing.assert_array_equal(a, np.eye(2))


def test_geo_rejects_negative():
    with pytest.raises(D.DataConfigError):
        D.geo_adjacency(np.array([[0.0, -1.0], [-1.0, 0.0]]))


# ---- synthetic data


def test_synth_deterministic():
    a = D.synth_generate(n_nodes=4, steps=300, seed=5)
    b = D.synth_generate(n_nodes=4, steps=300, seed=5)
    np.testing.assert_array_equal(a.values, b.values)
    np.testing.assert_array_equal(a.distances, b.distances)
    c = D.synth_generate(n_nodes=4, steps=300, seed=6)
    assert not np.array_equal(a.values, c.values)


def test_synth_noise_free_is_daily_periodic():
    s = D.synth_generate(n_nodes=5, steps=96 * 5, seed=1, noise_std=0.0, weekly_amplitude=0.0)
    np.testing.assert_allclose(s.values[96:], s.values[:-96], atol=1e-9)
    w = D.synth_generate(n_nodes=5, steps=96 * 15, seed=1, noise_std=0.0)
    np.testing.assert_allclose(w.values[7 * 96:], w.values[:-7 * 96], atol=1e-9)


def test_synth_uncoupled_nodes_independent():
    s = D.synth_generate(n_nodes=2, steps=10_000, seed=2, coupling=0.0, daily=False,
                         weekly_amplitude=0.0, noise_std=0.3)
    corr = np.corrcoef(s.values[:, 0, 0], s.values[:, 1, 0])[0, 1]
    assert abs(corr) < 0.1


def test_synth_lag_shifts_neighbour_signal():
    base = dict(n_nodes=6, steps=400, seed=4, coupling=1.0, noise_std=0.0)
    now = D.synth_generate(**base)
    later = D.synth_generate(**base, lag=5)
    np.testing.assert_allclose(later.values[5:], now.values[:-5], atol=1e-9)


def test_synth_needs_two_nodes():
    with pytest.raises(D.DataConfigError):
        D.synth_generate(n_nodes=1, steps=10)
