import math

import numpy as np
import pytest
from hypothesis import assume, given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from soilwave.errors import AlignmentError, ArgumentError, DegenerateInputError
from soilwave.preprocess import (
    Dataset,
    aggregate_classes,
    align_gateways,
    chronological_split,
    class_rows_csv,
    correlation_matrix,
    decompose_fading,
    denormalize,
    make_lag_features,
    make_windows,
    matrix_csv,
    normalize_minmax,
    pearson,
    split_sizes,
)
from soilwave.simulator import GatewayChannelConfig, SimConfig, simulate
from soilwave.telemetry import RecordSet, UplinkRecord

finite = st.floats(-150, 0, allow_nan=False)


def trailing_mean_oracle(raw, w):
    out = []
    for t in range(len(raw)):
        lo = max(0, t - w + 1)
        acc = 0.0
        for k in range(lo, t + 1):
            acc += raw[k]
        out.append(acc / (t + 1 - lo))
    return out


def pearson_oracle(x, y):
    n = len(x)
    mx = sum(x) / n
    my = sum(y) / n
    sxy = sum((a - mx) * (b - my) for a, b in zip(x, y))
    sxx = sum((a - mx) ** 2 for a in x)
    syy = sum((b - my) ** 2 for b in y)
    return sxy / math.sqrt(sxx * syy)


def ds_from(features, targets, names=None):
    features = np.asarray(features, dtype=float)
    if features.ndim == 1:
        features = features[:, None]
    names = names or tuple(f"c{k}" for k in range(features.shape[1]))
    return Dataset(names, features, np.asarray(targets, dtype=float))


class TestDecomposeFading:
    def test_constant(self):
        d = decompose_fading([-95.0] * 48, 24)
        assert np.all(d.long_term == -95.0) and np.all(d.short_term == 0.0)

    def test_two_points(self):
        d = decompose_fading([0.0, 2.0], 2)
        assert d.long_term.tolist() == [0.0, 1.0] and d.short_term.tolist() == [0.0, 1.0]

    def test_seeded_noise_against_loop_oracle(self):
        raw = -95.0 + 3.0 * np.random.default_rng(5).standard_normal(500)
        d = decompose_fading(raw, 24)
        assert np.array_equal(d.long_term + d.short_term, raw)
        np.testing.assert_allclose(d.long_term, trailing_mean_oracle(raw.tolist(), 24), rtol=0, atol=1e-12)

    def test_window_zero(self):
        with pytest.raises(ArgumentError):
            decompose_fading([1.0, 2.0], 0)

    def test_empty(self):
        with pytest.raises(ArgumentError):
            decompose_fading([], 3)

    def test_window_longer_than_series(self):
        d = decompose_fading([1.0, 2.0, 6.0], 24)
        assert d.long_term.tolist() == [1.0, 1.5, 3.0]

    @given(hnp.arrays(float, st.integers(1, 200), elements=st.floats(-150, -76)), st.integers(1, 40))
    @settings(max_examples=200, deadline=None)
    def test_reconstruction_exact(self, raw, w):
        d = decompose_fading(raw, w)
        assert len(d.raw) == len(d.long_term) == len(d.short_term)
        assert np.array_equal(d.long_term + d.short_term, raw)

    @given(hnp.arrays(np.int64, st.integers(1, 200), elements=st.integers(-200, 0)),
           st.integers(1, 40), st.sampled_from([1.0, 0.25]))
    @settings(max_examples=200, deadline=None)
    def test_reconstruction_exact_on_quantized_readings(self, q, w, step):
        raw = q * step
        d = decompose_fading(raw, w)
        assert np.array_equal(d.long_term + d.short_term, raw)

    @given(hnp.arrays(float, st.integers(1, 200), elements=st.floats(-40, 40)), st.integers(1, 40))
    @settings(max_examples=200, deadline=None)
    def test_reconstruction_error_bounded_across_zero(self, raw, w):
        d = decompose_fading(raw, w)
        err = np.abs(d.long_term + d.short_term - raw)
        assert np.all(err <= np.spacing(np.maximum(np.abs(d.long_term), np.abs(raw))))
        np.testing.assert_allclose(d.long_term, trailing_mean_oracle(raw.tolist(), w), rtol=0, atol=1e-12)

    @given(hnp.arrays(float, st.integers(1, 120), elements=finite), st.integers(1, 30))
    @settings(max_examples=100, deadline=None)
    def test_residuals_about_window_mean_sum_to_zero(self, raw, w):
        # raw deviations from the long-term value at t vanish on average over t's window
        d = decompose_fading(raw, w)
        for t in range(w - 1, raw.size):
            seg = raw[t - w + 1:t + 1]
            assert abs(np.mean(seg - d.long_term[t])) <= 1e-9

    def test_mean_of_short_term_itself_is_not_zero_on_a_ramp(self):
        # the residual series is not zero-mean over trailing windows in general
        d = decompose_fading([0.0, 1.0, 2.0, 3.0], 2)
        assert d.short_term.tolist() == [0.0, 0.5, 0.5, 0.5]
        assert np.mean(d.short_term[2:4]) == 0.5


class TestAggregateClasses:
    def test_single_class_mean(self):
        (row,) = aggregate_classes([29.1, 29.4], [-90.0, -92.0], 29.0, 39.0, 0.5)
        assert (row.class_low, row.class_high, row.mean_rssi, row.count) == (29.0, 29.5, -91.0, 2)
        assert math.isnan(row.mean_snr)

    def test_boundary_assignment(self):
        rows = aggregate_classes([29.1, 29.6], [-90.0, -92.0], 29.0, 39.0, 0.5)
        assert [(r.class_low, r.count) for r in rows] == [(29.0, 1), (29.5, 1)]

    def test_half_open_edges(self):
        rows = aggregate_classes([29.0, 29.5, 39.0, 28.9], [1.0, 2.0, 3.0, 4.0], 29.0, 39.0, 0.5)
        assert [(r.class_low, r.mean_rssi) for r in rows] == [(29.0, 1.0), (29.5, 2.0)]

    def test_snr_means(self):
        (row,) = aggregate_classes([30.1, 30.2], [-90.0, -92.0], 29.0, 39.0, 0.5, snr=[4.0, 6.0])
        assert row.mean_snr == 5.0

    def test_mismatched_lengths(self):
        with pytest.raises(ArgumentError):
            aggregate_classes([30.0], [-90.0, -91.0], 29.0, 39.0)

    @pytest.mark.parametrize("low,high,width", [(29.0, 39.0, 0.0), (39.0, 29.0, 0.5)])
    def test_bad_bounds(self, low, high, width):
        with pytest.raises(ArgumentError):
            aggregate_classes([30.0], [-90.0], low, high, width)

    def test_noiseless_simulation_strictly_decreasing(self):
        ch = GatewayChannelConfig(noise_sigma=0.0, snr_sigma=0.0, slope=-0.5)
        rs = simulate(SimConfig(gateways=(("g", ch),), seed=42))
        h = np.array([r.soil_humidity for r in rs.records])
        s = np.array([r.rssi for r in rs.records])
        rows = aggregate_classes(h, s, 29.0, 39.0, 0.5)
        means = [r.mean_rssi for r in rows]
        assert len(rows) > 5
        assert all(b < a for a, b in zip(means, means[1:]))
        for r in rows:
            sel = (h >= r.class_low) & (h < r.class_high)
            assert r.count == sel.sum()
            assert r.mean_rssi == pytest.approx(s[sel].mean(), abs=1e-12)

    @given(hnp.arrays(float, st.integers(1, 100), elements=st.floats(25, 45)))
    @settings(max_examples=50, deadline=None)
    def test_rows_disjoint_ascending(self, h):
        rows = aggregate_classes(h, -h, 29.0, 39.0, 0.5)
        for a, b in zip(rows, rows[1:]):
            assert a.class_high <= b.class_low
        for r in rows:
            assert r.class_high - r.class_low == pytest.approx(0.5)
            assert r.count >= 1
        assert sum(r.count for r in rows) == np.sum((h >= 29.0) & (h < 39.0))

    def test_csv(self):
        text = class_rows_csv(aggregate_classes([29.1], [-90.0], 29.0, 39.0, 0.5))
        assert text == "class_low,class_high,mean_rssi,mean_snr,count\n29.0,29.5,-90.0,,1\n"


class TestPearson:
    def test_perfect_negative(self):
        assert pearson([1, 2, 3], [-2, -4, -6]) == -1.0

    def test_zero_variance(self):
        with pytest.raises(DegenerateInputError):
            pearson([1, 2, 3], [5, 5, 5])

    def test_seeded_against_two_pass_oracle(self):
        g = np.random.default_rng(17)
        for _ in range(20):
            x = g.standard_normal(300)
            y = 0.6 * x + 0.8 * g.standard_normal(300)
            assert abs(pearson(x, y) - pearson_oracle(x.tolist(), y.tolist())) <= 1e-12

    def test_too_short(self):
        with pytest.raises(ArgumentError):
            pearson([1.0], [2.0])

    @given(hnp.arrays(float, st.integers(3, 40), elements=st.floats(-100, 100)),
           st.floats(-10, 10).filter(lambda a: abs(a) > 1e-2), st.floats(-50, 50), st.integers(0, 1000))
    @settings(max_examples=100, deadline=None)
    def test_symmetry_and_scale(self, x, a, b, seed):
        y = np.random.default_rng(seed).standard_normal(x.size)
        assume(np.ptp(x) > 1e-3)
        r = pearson(x, y)
        assert -1.0 <= r <= 1.0
        assert pearson(y, x) == pytest.approx(r, abs=1e-12)
        assert pearson(a * x + b, y) == pytest.approx(math.copysign(1.0, a) * r, abs=1e-9)

    def test_matrix(self):
        names, m = correlation_matrix({"a": [1.0, 2.0, 3.0], "b": [3.0, 1.0, 2.0]})
        assert names == ["a", "b"] and m[0, 0] == 1.0 and m[0, 1] == m[1, 0] == -0.5
        assert matrix_csv(names, m).splitlines()[0] == ",a,b"


class TestNormalize:
    def test_endpoints(self):
        out = normalize_minmax(ds_from([-100.0, -90.0], [0.0, 1.0]))
        assert out.features[:, 0].tolist() == [0.0, 1.0]

    def test_midpoint_denormalize(self):
        assert denormalize(0.5, -100.0, -90.0) == -95.0

    def test_constant_column_named(self):
        with pytest.raises(DegenerateInputError, match="rssi_gw1"):
            normalize_minmax(ds_from([[1.0, 5.0], [2.0, 5.0]], [0.0, 1.0], ("snr_gw1", "rssi_gw1")))

    def test_seeded_round_trip(self):
        col = np.random.default_rng(3).uniform(-120, -60, 1000)
        out = normalize_minmax(ds_from(col, np.arange(1000.0)))
        p = out.norm_params
        back = denormalize(out.features[:, 0], p.feature_min[0], p.feature_max[0])
        assert np.max(np.abs(back - col)) <= 1e-12

    @given(hnp.arrays(float, st.tuples(st.integers(2, 30), st.integers(1, 4)), elements=st.floats(-1e3, 1e3)))
    @settings(max_examples=60, deadline=None)
    def test_train_bounds(self, f):
        assume(np.all(np.ptp(f, axis=0) > 1e-6))
        out = normalize_minmax(ds_from(f, np.arange(f.shape[0], dtype=float)))
        assert out.features.min() >= 0.0 and out.features.max() <= 1.0
        assert out.targets.min() == 0.0 and out.targets.max() == 1.0


class TestSplit:
    @pytest.mark.parametrize("n,frac,want", [(13900, 0.8, (11120, 2780)), (10, 0.8, (8, 2)), (5, 0.5, (2, 3))])
    def test_sizes(self, n, frac, want):
        assert split_sizes(n, frac) == want
        tr, te = chronological_split(ds_from(np.arange(n, dtype=float), np.arange(n, dtype=float)), frac)
        assert (len(tr), len(te)) == want

    def test_too_small(self):
        with pytest.raises(ArgumentError):
            chronological_split(ds_from([1.0], [1.0]), 0.8)

    @pytest.mark.parametrize("frac", [0.0, 1.0, 1.5])
    def test_bad_fraction(self, frac):
        with pytest.raises(ArgumentError):
            chronological_split(ds_from([1.0, 2.0, 3.0], [1.0, 2.0, 3.0]), frac)

    def test_params_fit_on_train_only(self):
        f = np.array([0.0, 10.0, 5.0, 20.0, -10.0])
        tr, te = chronological_split(ds_from(f, f), 0.6)
        assert tr.norm_params.feature_min[0] == 0.0 and tr.norm_params.feature_max[0] == 10.0
        assert te.features[:, 0].tolist() == [2.0, -1.0]
        assert te.norm_params is tr.norm_params

    @given(st.integers(2, 300), st.floats(0.05, 0.95))
    @settings(max_examples=100, deadline=None)
    def test_conservation(self, n, frac):
        assume(0 < math.floor(n * frac) < n)
        f = np.arange(n, dtype=float)
        tr, te = chronological_split(ds_from(f, f), frac, normalize=False)
        assert len(tr) + len(te) == n
        assert np.array_equal(np.concatenate([tr.features, te.features])[:, 0], f)


class TestLagFeatures:
    def test_definition(self):
        out = make_lag_features(ds_from([[1.0], [2.0], [3.0]], [0.0, 1.0, 2.0]))
        assert out.features.tolist() == [[2.0, 1.0], [3.0, 2.0]]
        assert out.targets.tolist() == [1.0, 2.0]

    def test_shape_and_names(self):
        out = make_lag_features(ds_from(np.zeros((5, 3)), np.zeros(5)))
        assert out.features.shape == (4, 6)
        assert out.feature_names[3:] == ("c0_lag1", "c1_lag1", "c2_lag1")

    def test_single_row(self):
        with pytest.raises(ArgumentError):
            make_lag_features(ds_from([[1.0]], [1.0]))


class TestWindows:
    def test_count(self):
        assert len(make_windows(ds_from(np.zeros(100), np.zeros(100)), 18)) == 83

    def test_boundary(self):
        w = make_windows(ds_from(np.arange(18.0), np.arange(18.0)), 18)
        assert len(w) == 1 and w.targets.tolist() == [17.0]

    def test_alignment(self):
        w = make_windows(ds_from(np.arange(20.0), np.arange(20.0)), 18)
        assert w.targets.tolist() == [17.0, 18.0, 19.0]
        assert w.windows[1, :, 0].tolist() == list(range(1, 19))

    def test_too_short(self):
        with pytest.raises(ArgumentError):
            make_windows(ds_from(np.zeros(5), np.zeros(5)), 18)

    @given(st.integers(1, 80), st.integers(1, 80), st.integers(1, 3))
    @settings(max_examples=100, deadline=None)
    def test_count_property(self, n, steps, d):
        assume(n >= steps)
        f = np.random.default_rng(n).random((n, d))
        w = make_windows(ds_from(f, np.arange(n, dtype=float)), steps)
        assert w.windows.shape == (n - steps + 1, steps, d)
        k = n - steps
        assert np.array_equal(w.windows[k], f[k:k + steps]) and w.targets[k] == n - 1


def uplinks(schedule):
    """``schedule`` maps gateway -> list of ts; rssi encodes (gateway, ts)."""
    recs = []
    for gi, (gw, tss) in enumerate(schedule.items()):
        for t in tss:
            recs.append(UplinkRecord(t, gw, -float(t) - 100 * gi, float(gi), 30.0 + t, None))
    return RecordSet.from_records(recs)


class TestAlignGateways:
    def test_full_overlap(self):
        ds = align_gateways(uplinks({"gw1": [1, 2, 3], "gw2": [1, 2, 3]}))
        assert len(ds) == 3 and ds.feature_names == ("rssi_gw1", "snr_gw1", "rssi_gw2", "snr_gw2")
        assert ds.features[:, 2].tolist() == [-101.0, -102.0, -103.0]
        assert ds.targets.tolist() == [31.0, 32.0, 33.0] and ds.ts.tolist() == [1, 2, 3]

    def test_locf(self):
        ds = align_gateways(uplinks({"gw1": [1, 2, 3, 4], "gw2": [1, 2, 4]}))
        assert ds.features[:, 2].tolist() == [-101.0, -102.0, -102.0, -104.0]

    def test_leading_gap_dropped(self):
        ds = align_gateways(uplinks({"gw1": list(range(1, 11)), "gw2": list(range(6, 11))}))
        assert ds.ts.tolist() == list(range(6, 11))

    def test_primary_selects_rows(self):
        ds = align_gateways(uplinks({"gw1": [1, 2, 3, 4], "gw2": [2, 4]}), primary="gw2")
        assert ds.ts.tolist() == [2, 4]

    def test_no_overlap(self):
        with pytest.raises(AlignmentError):
            align_gateways(uplinks({"gw1": [1, 2], "gw2": [5]}))

    def test_empty(self):
        with pytest.raises(ArgumentError):
            align_gateways(RecordSet.from_records([]))

    def test_unknown_gateway(self):
        with pytest.raises(AlignmentError):
            align_gateways(uplinks({"gw1": [1, 2]}), gateways=["gw1", "gw9"])

    def test_components(self):
        rs = uplinks({"gw1": [1, 2, 3, 4]})
        long = align_gateways(rs, components="long", window_len=2)
        assert long.features[:, 0].tolist() == [-1.0, -1.5, -2.5, -3.5]
        with pytest.raises(ArgumentError):
            align_gateways(rs, components="median")
