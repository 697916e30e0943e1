import math

import numpy as np
import pytest

from blurcast.data import (
    NormStats,
    RawSeries,
    SynthConfig,
    WindowBatch,
    add_time_features,
    load_csv,
    make_windows,
    split_windows,
    synth_multiscale,
    zscore_apply,
    zscore_fit,
    zscore_invert,
)
from blurcast.exception import (
    BadFractions,
    ChannelMismatch,
    EmptyFile,
    EmptySplit,
    IndexGap,
    InvalidConfig,
    MissingColumn,
    NonNumericCell,
    SeriesTooShort,
)


def _series(targets, features=None) -> RawSeries:
    targets = np.asarray(targets, dtype=np.float64).reshape(len(targets), -1)
    features = np.zeros((len(targets), 0)) if features is None else np.asarray(features, dtype=np.float64)
    return RawSeries(time_index=np.arange(len(targets)), features=features, targets=targets)


class TestLoadCsv:
    def test_three_rows(self, tmp_path):
        """A small file reads back verbatim."""
        path = tmp_path / "series.csv"
        path.write_text("y\n1.0\n2.0\n3.0\n", encoding="utf-8")
        series = load_csv(path, ["y"])
        assert series.length == 3
        assert np.array_equal(series.targets[:, 0], [1.0, 2.0, 3.0])
        assert series.target_names == ("y",)

    def test_column_order_preserved(self, tmp_path):
        """Targets and features follow the requested column order."""
        path = tmp_path / "series.csv"
        path.write_text("t,a,b,y\n0,1,2,3\n1,4,5,6\n", encoding="utf-8")
        series = load_csv(path, ["y"], ["b", "a"], time_col="t")
        assert np.array_equal(series.features, [[2.0, 1.0], [5.0, 4.0]])
        assert series.feature_names == ("b", "a")

    def test_header_only(self, tmp_path):
        """A header without rows is an empty file."""
        path = tmp_path / "series.csv"
        path.write_text("y\n", encoding="utf-8")
        with pytest.raises(EmptyFile):
            load_csv(path, ["y"])

    def test_blank_file(self, tmp_path):
        """A file without a header is an empty file."""
        path = tmp_path / "series.csv"
        path.write_text("", encoding="utf-8")
        with pytest.raises(EmptyFile):
            load_csv(path, ["y"])

    def test_non_numeric_cell(self, tmp_path):
        """The offending row and column are reported."""
        path = tmp_path / "series.csv"
        path.write_text("y\n1.0\nabc\n3.0\n", encoding="utf-8")
        with pytest.raises(NonNumericCell) as info:
            load_csv(path, ["y"])
        assert (info.value.row, info.value.column) == (2, "y")

    def test_missing_column(self, tmp_path):
        """Absent columns are named."""
        path = tmp_path / "series.csv"
        path.write_text("x\n1.0\n", encoding="utf-8")
        with pytest.raises(MissingColumn, match="`y`"):
            load_csv(path, ["y"])

    def test_integer_index_gap(self, tmp_path):
        """A jump in the integer time column is rejected at its row."""
        path = tmp_path / "series.csv"
        path.write_text("t,y\n0,1\n1,2\n3,3\n", encoding="utf-8")
        with pytest.raises(IndexGap) as info:
            load_csv(path, ["y"], time_col="t")
        assert info.value.row == 3

    def test_iso_timestamps(self, tmp_path):
        """Evenly spaced ISO-8601 stamps become a step index."""
        path = tmp_path / "series.csv"
        path.write_text(
            "time,y\n2024-01-01T00:00:00,1\n2024-01-01T01:00:00,2\n2024-01-01T02:00:00,3\n", encoding="utf-8"
        )
        series = load_csv(path, ["y"], time_col="time")
        assert np.array_equal(series.time_index, [0, 1, 2])

    def test_iso_gap(self, tmp_path):
        """Uneven ISO-8601 spacing is a gap."""
        path = tmp_path / "series.csv"
        path.write_text(
            "time,y\n2024-01-01T00:00:00,1\n2024-01-01T01:00:00,2\n2024-01-01T03:00:00,3\n", encoding="utf-8"
        )
        with pytest.raises(IndexGap):
            load_csv(path, ["y"], time_col="time")


class TestSynthMultiscale:
    def test_zero_amplitudes(self):
        """No sinusoids and no noise give an all-zero series."""
        series = synth_multiscale(SynthConfig(length=64, coarse_amp=0.0, fine_amp=0.0, ar_std=0.0))
        assert np.all(series.targets == 0.0)

    def test_deterministic(self):
        """The same config reproduces the series bit for bit."""
        cfg = SynthConfig(length=300)
        assert np.array_equal(synth_multiscale(cfg).targets, synth_multiscale(cfg).targets)
        assert np.array_equal(synth_multiscale(cfg).features, synth_multiscale(cfg).features)

    def test_spectral_peaks(self):
        """Fourier magnitude peaks at the bins of both periods."""
        cfg = SynthConfig(
            length=500, coarse_period=96, fine_period=8, coarse_amp=1.0, fine_amp=0.3, ar_coeff=0.5, ar_std=0.05, seed=7
        )
        magnitude = np.abs(np.fft.rfft(synth_multiscale(cfg).targets[:, 0]))
        assert 1 + int(np.argmax(magnitude[1:31])) == 5
        assert 30 + int(np.argmax(magnitude[30:251])) in (62, 63)

    def test_features(self):
        """Features are sin/cos encodings at both periods."""
        series = synth_multiscale(SynthConfig(length=10))
        assert series.n_features == 4
        assert np.allclose(series.features[:, 0] ** 2 + series.features[:, 1] ** 2, 1.0)

    @pytest.mark.parametrize(
        "cfg",
        [
            SynthConfig(fine_period=100.0),
            SynthConfig(ar_coeff=1.0),
            SynthConfig(length=1),
        ],
    )
    def test_invalid(self, cfg):
        """Violated invariants raise InvalidConfig."""
        with pytest.raises(InvalidConfig):
            synth_multiscale(cfg)


class TestZscore:
    def test_population_std(self):
        """[0,2,4,6] has mean 3 and population std sqrt(5)."""
        stats = zscore_fit(_series([0, 2, 4, 6]), 1.0)
        assert stats.mean[0] == pytest.approx(3.0)
        assert stats.std[0] == pytest.approx(math.sqrt(5.0))

    def test_constant_channel_guard(self):
        """A constant channel gets std 1."""
        stats = zscore_fit(_series([5, 5, 5]), 1.0)
        assert (stats.mean[0], stats.std[0]) == (5.0, 1.0)

    def test_training_prefix_only(self):
        """Half of [0,2,4,6] uses [0,2] only."""
        stats = zscore_fit(_series([0, 2, 4, 6]), 0.5)
        assert (stats.mean[0], stats.std[0]) == (1.0, 1.0)

    def test_no_leakage(self):
        """Perturbing steps after the prefix leaves the stats unchanged."""
        values = np.arange(20, dtype=np.float64)
        perturbed = values.copy()
        perturbed[16:] += 100.0
        first, second = zscore_fit(_series(values), 0.8), zscore_fit(_series(perturbed), 0.8)
        assert np.array_equal(first.mean, second.mean)
        assert np.array_equal(first.std, second.std)

    def test_apply(self):
        """[0,2] with mean 1 and std 1 maps to [-1,1]."""
        stats = NormStats(mean=np.array([1.0]), std=np.array([1.0]))
        assert np.array_equal(zscore_apply(_series([0, 2]), stats).targets[:, 0], [-1.0, 1.0])

    def test_round_trip(self):
        """invert(apply(x)) recovers x within 1e-10."""
        rng = np.random.default_rng(0)
        series = _series(rng.normal(5.0, 3.0, size=(500, 1)), rng.normal(-2.0, 0.5, size=(500, 1)))
        stats = zscore_fit(series, 0.8)
        restored = zscore_invert(zscore_apply(series, stats), stats)
        assert np.max(np.abs(restored.channels() - series.channels())) <= 1e-10

    def test_channel_mismatch(self):
        """Stats with the wrong channel count are rejected."""
        stats = NormStats(mean=np.zeros(2), std=np.ones(2))
        with pytest.raises(ChannelMismatch):
            zscore_apply(_series([0, 1]), stats)

    def test_invert_targets(self):
        """Normalized predictions map back to original units."""
        stats = NormStats(mean=np.array([0.0, 10.0]), std=np.array([1.0, 2.0]), n_features=1)
        assert np.array_equal(stats.invert_targets(np.array([[1.0], [-1.0]])), [[12.0], [8.0]])


class TestWindows:
    def test_count(self):
        """L=300, kappa=192, tau=24 gives 85 windows."""
        windows = make_windows(_series(np.arange(300)), 192, 24)
        assert len(windows) == 85
        assert [w.cutoff for w in windows[:3]] == [192, 193, 194]

    @pytest.mark.parametrize(("length", "kappa", "tau", "stride"), [(50, 10, 5, 1), (50, 10, 5, 3), (41, 7, 2, 4)])
    def test_count_formula(self, length, kappa, tau, stride):
        """Window count is floor((L - kappa - tau) / stride) + 1."""
        windows = make_windows(_series(np.arange(length)), kappa, tau, stride)
        assert len(windows) == (length - kappa - tau) // stride + 1
        assert all(w.cutoff == kappa + i * stride for i, w in enumerate(windows))

    def test_contiguity(self):
        """History and future cover adjacent, disjoint step ranges."""
        values = np.arange(40, dtype=np.float64)
        for window in make_windows(_series(values), 6, 3, 2):
            assert window.history_steps().stop == window.future_steps().start
            assert np.array_equal(window.history[:, -1], values[window.cutoff - 6 : window.cutoff])
            assert np.array_equal(window.future[:, 0], values[window.cutoff : window.cutoff + 3])

    def test_exact_length(self):
        """L = kappa + tau gives exactly one window."""
        assert len(make_windows(_series(np.arange(30)), 20, 10)) == 1

    def test_too_short(self):
        """L = kappa + tau - 1 is too short."""
        with pytest.raises(SeriesTooShort):
            make_windows(_series(np.arange(29)), 20, 10)

    def test_future_features(self):
        """Windows carry the known covariates of the horizon."""
        series = synth_multiscale(SynthConfig(length=30))
        window = make_windows(series, 10, 5)[2]
        assert np.array_equal(window.future_features, series.features[12:17])

    def test_batch(self):
        """Stacking adds a leading axis; take selects rows."""
        windows = make_windows(_series(np.arange(30)), 5, 2)
        batch = WindowBatch.stack(windows)
        assert len(batch) == len(windows)
        assert batch.history.shape == (len(windows), 5, 1)
        picked = batch.take(np.array([3, 0]))
        assert np.array_equal(picked.cutoffs, [windows[3].cutoff, windows[0].cutoff])

    def test_empty_batch(self):
        """An empty collection cannot be stacked."""
        with pytest.raises(EmptySplit):
            WindowBatch.stack([])


class TestSplit:
    @pytest.mark.parametrize(("n", "expected"), [(100, (80, 10, 10)), (10, (8, 1, 1))])
    def test_sizes(self, n, expected):
        """Counts follow the 80/10/10 partition."""
        windows = make_windows(_series(np.arange(n + 3)), 2, 2)
        assert len(windows) == n
        split = split_windows(windows)
        assert (len(split.train), len(split.validation), len(split.test)) == expected

    @pytest.mark.parametrize(("n", "expected"), [(7, (5, 1, 1)), (9, (7, 1, 1)), (19, (15, 2, 2)), (29, (23, 3, 3))])
    def test_remainder_spread(self, n, expected):
        """Rounding leftovers are spread, so no part drifts more than one window from its share."""
        split = split_windows(make_windows(_series(np.arange(n + 3)), 2, 2))
        sizes = (len(split.train), len(split.validation), len(split.test))
        assert sizes == expected
        assert all(abs(size - f * n) <= 1 for size, f in zip(sizes, (0.8, 0.1, 0.1), strict=True))

    def test_contiguous_in_time(self):
        """Train precedes validation precedes test."""
        split = split_windows(make_windows(_series(np.arange(53)), 2, 2))
        assert max(w.cutoff for w in split.train) < min(w.cutoff for w in split.validation)
        assert max(w.cutoff for w in split.validation) < min(w.cutoff for w in split.test)

    def test_bad_fractions(self):
        """Fractions must sum to one."""
        with pytest.raises(BadFractions):
            split_windows(make_windows(_series(np.arange(10)), 2, 2), (0.5, 0.5, 0.5))


class TestTimeFeatures:
    def test_adds_encodings(self):
        """Each period adds a sin and a cos column."""
        series = add_time_features(_series(np.arange(12)), [24.0, 7.0])
        assert series.n_features == 4
        assert series.feature_names == ("sin_24", "cos_24", "sin_7", "cos_7")
        assert series.features[0, 1] == 1.0
