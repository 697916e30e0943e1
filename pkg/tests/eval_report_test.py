import math

import numpy as np
import pytest

from blurcast import backbone
from blurcast.backbone import BackboneKind
from blurcast.data import RawSeries, SynthConfig, make_windows, split_windows, synth_multiscale, zscore_apply, zscore_fit
from blurcast.eval_report import (
    AGGREGATE_COLUMNS,
    AggregateRow,
    MetricRecord,
    aggregate,
    aggregate_group,
    emit_forecast_points,
    emit_table,
    evaluate,
    mae,
    mse,
    read_records,
    window_errors,
    write_records,
)
from blurcast.exception import DimensionMismatch, EmptyResults, PreconditionViolation, ShapeMismatch
from blurcast.numerics import RngStream
from blurcast.pipeline import PipelineParams, Variant
from blurcast.trainer import AdamState, Checkpoint, GPConfig, TrainConfig, train


def _record(mse_value: float, *, seed: int = 0, variant: str = "dg", horizon: int = 24, split: str = "test") -> MetricRecord:
    return MetricRecord(
        dataset="synthetic", variant=variant, horizon=horizon, seed=seed, split=split, mse=mse_value, mae=mse_value / 2
    )


@pytest.fixture
def checkpoint(toy_split) -> Checkpoint:
    cfg = TrainConfig(
        variant=Variant.DG, gp=GPConfig(inducing=2, lengthscale=0.3), batch_size=32, epochs=1, warmup_steps=5, seed=2
    )
    return train(toy_split, cfg)


@pytest.fixture
def stats(small_series):
    return zscore_fit(small_series, 0.8)


class TestMetrics:
    def test_equal(self):
        """Identical arrays have zero error."""
        y = np.arange(4.0).reshape(2, 2)
        assert mse(y, y) == 0.0
        assert mae(y, y) == 0.0

    def test_unit(self):
        """Unit errors give unit MSE."""
        assert mse(np.zeros(2), np.ones(2)) == 1.0

    def test_hand_values(self):
        """[1,2,3] against [2,2,5] gives MSE 5/3 and MAE 1."""
        y, y_hat = np.array([1.0, 2.0, 3.0]), np.array([2.0, 2.0, 5.0])
        assert mse(y, y_hat) == pytest.approx(5.0 / 3.0)
        assert mae(y, y_hat) == pytest.approx(1.0)

    def test_jensen(self):
        """MAE never exceeds the root of MSE."""
        rng = RngStream(0)
        for _ in range(1000):
            y, y_hat = rng.standard_normal((4, 2)), rng.standard_normal((4, 2))
            assert mae(y, y_hat) <= math.sqrt(mse(y, y_hat)) + 1e-12

    def test_shape_mismatch(self):
        """Arrays must have the same shape."""
        with pytest.raises(DimensionMismatch):
            mse(np.zeros(2), np.zeros(3))


class TestEvaluate:
    def test_oracle(self):
        """A model that predicts the true future scores zero."""
        series = RawSeries(time_index=np.arange(40), features=np.zeros((40, 0)), targets=np.zeros((40, 1)))
        windows = make_windows(series, 6, 3)
        forecaster = backbone.zero_params(BackboneKind.linear(), 6, 1, 3, 1)
        oracle = Checkpoint(
            params=PipelineParams(variant=Variant.BACKBONE_ONLY, forecaster=forecaster),
            optimizer=AdamState.zeros(forecaster.size),
            config=TrainConfig(variant=Variant.BACKBONE_ONLY),
        )
        stats = zscore_fit(series, 0.8)
        record = evaluate(oracle, windows, stats)
        assert (record.mse, record.mae) == (0.0, 0.0)
        assert record.variant == "backbone"
        assert record.horizon == 3

    def test_deterministic(self, checkpoint, toy_split, stats):
        """The fixed evaluation stream reproduces the record."""
        assert evaluate(checkpoint, toy_split.test, stats) == evaluate(checkpoint, toy_split.test, stats)

    def test_window_mean(self, checkpoint, toy_split, stats):
        """Metrics are per-window errors averaged over windows."""
        record = evaluate(checkpoint, toy_split.test, stats)
        assert record.mse == pytest.approx(float(np.mean(window_errors(checkpoint, toy_split.test))))
        assert record.mae <= math.sqrt(record.mse)

    def test_original_space(self, checkpoint, toy_split, stats):
        """Original units scale the MSE by the target variance."""
        normalized = evaluate(checkpoint, toy_split.test, stats)
        original = evaluate(checkpoint, toy_split.test, stats, space="original")
        assert original.mse == pytest.approx(normalized.mse * stats.std[-1] ** 2)

    def test_shape_mismatch(self, checkpoint, small_series, stats):
        """Windows of another horizon are rejected."""
        windows = make_windows(zscore_apply(small_series, stats), 8, 5)
        with pytest.raises(ShapeMismatch):
            evaluate(checkpoint, windows, stats)

    def test_no_windows(self, checkpoint, stats):
        """An empty split cannot be evaluated."""
        with pytest.raises(EmptyResults):
            evaluate(checkpoint, [], stats)


class TestAggregate:
    def test_single_seed(self):
        """One seed has zero standard error."""
        (row,) = aggregate([_record(0.4)])
        assert (row.mean_mse, row.stderr_mse, row.n_seeds) == (0.4, 0.0, 1)

    def test_hand_values(self):
        """{0.1, 0.2, 0.3} has mean 0.2 and standard error 0.1 / sqrt(3)."""
        (row,) = aggregate([_record(0.1, seed=0), _record(0.2, seed=1), _record(0.3, seed=2)])
        assert row.mean_mse == pytest.approx(0.2)
        assert row.stderr_mse == pytest.approx(0.1 / math.sqrt(3))
        assert row.mean_mae == pytest.approx(0.1)

    def test_order_invariant(self):
        """Record order does not change the aggregate."""
        records = [_record(0.1 * i, seed=i) for i in range(1, 6)]
        assert aggregate(records) == aggregate(list(reversed(records)))

    def test_groups(self):
        """Each (dataset, variant, horizon, split) key forms one row."""
        rows = aggregate([_record(0.1), _record(0.2, variant="di"), _record(0.3, horizon=48), _record(0.4, split="validation")])
        assert len(rows) == 4

    def test_mixed_group(self):
        """A single group cannot mix variants."""
        with pytest.raises(PreconditionViolation):
            aggregate_group([_record(0.1), _record(0.2, variant="di")])

    def test_empty(self):
        """No records give no rows."""
        assert aggregate([]) == []


class TestEmitTable:
    def test_empty_csv(self, tmp_path):
        """No rows give a header-only file."""
        path = emit_table([], tmp_path / "summary.csv")
        assert path.read_text(encoding="utf-8") == ",".join(AGGREGATE_COLUMNS) + "\n"

    def test_one_row_csv(self, tmp_path):
        """One row gives two lines in the fixed column order."""
        row = AggregateRow(
            dataset="synthetic",
            variant="dg",
            horizon=24,
            split="test",
            mean_mse=0.2,
            stderr_mse=0.1,
            mean_mae=0.3,
            stderr_mae=0.05,
            n_seeds=3,
        )
        text = emit_table([row], tmp_path / "summary.csv").read_bytes().decode("utf-8")
        assert text == (
            "dataset,variant,horizon,split,mean_mse,stderr_mse,mean_mae,stderr_mae,n_seeds\n"
            "synthetic,dg,24,test,0.2,0.1,0.3,0.05,3\n"
        )

    def test_markdown(self, tmp_path):
        """Variants become columns and horizons rows with ``mean ±stderr`` cells."""
        rows = [
            AggregateRow(
                dataset="electricity", variant=variant, horizon=horizon, split="test",
                mean_mse=0.165, stderr_mse=0.001, mean_mae=0.2, stderr_mae=0.0, n_seeds=5,
            )
            for horizon in (24, 48)
            for variant in ("dg", "di")
        ]
        text = emit_table(rows, tmp_path / "summary.md", "markdown").read_text(encoding="utf-8")
        assert text.splitlines()[0] == "## electricity (test, MSE)"
        assert "| horizon | dg | di |" in text
        assert "| 24 | 0.165 ±0.001 | 0.165 ±0.001 |" in text
        assert "\r" not in text

    def test_failed_cells(self, tmp_path):
        """Failed cells render as FAILED."""
        row = AggregateRow(
            dataset="synthetic", variant="dg", horizon=24, split="test",
            mean_mse=0.1, stderr_mse=0.0, mean_mae=0.1, stderr_mae=0.0, n_seeds=1,
        )
        path = emit_table([row], tmp_path / "summary.md", "markdown", failed=[("synthetic", "di", 24, "test")])
        assert "| 24 | 0.100 ±0.000 | FAILED |" in path.read_text(encoding="utf-8")


class TestForecastPoints:
    def test_backbone_only(self, tmp_path, toy_split, stats):
        """BackboneOnly leaves y_b empty and copies y_f into y_d."""
        cfg = TrainConfig(variant=Variant.BACKBONE_ONLY, epochs=0)
        checkpoint = train(toy_split, cfg)
        window = toy_split.test[0]
        path = emit_forecast_points(checkpoint, window, stats, tmp_path / "points.csv")
        lines = path.read_text(encoding="utf-8").splitlines()
        assert lines[0] == "step,y_true,y_f,y_b,y_d"
        assert len(lines) == 1 + window.tau
        for line in lines[1:]:
            step, _, y_f, y_b, y_d = line.split(",")
            assert y_b == ""
            assert y_f == y_d
        assert int(lines[1].split(",")[0]) == window.cutoff

    def test_dg_zero_draw(self, tmp_path, checkpoint, toy_split, stats):
        """A zero draw leaves the blurred forecast equal to the forecast."""
        window = toy_split.test[0]
        path = emit_forecast_points(checkpoint, window, stats, tmp_path / "points.csv", eps=np.zeros((1, window.tau, 1)))
        for line in path.read_text(encoding="utf-8").splitlines()[1:]:
            _, _, y_f, y_b, _ = line.split(",")
            assert y_f == y_b

    def test_bad_channel(self, tmp_path, checkpoint, toy_split, stats):
        """Only target channels can be emitted."""
        with pytest.raises(ShapeMismatch):
            emit_forecast_points(checkpoint, toy_split.test[0], stats, tmp_path / "points.csv", channel=1)


def test_records_round_trip(tmp_path):
    """Records written to CSV read back equal."""
    records = [_record(0.25, seed=1), _record(0.5, seed=2, variant="rb")]
    assert read_records(write_records(records, tmp_path / "records.csv")) == records


@pytest.mark.slow
def test_backbone_recovers_ar1():
    """A linear forecaster on AR(1) noise reaches the innovation variance."""
    cfg = SynthConfig(length=3000, coarse_amp=0.0, fine_amp=0.0, ar_coeff=0.5, ar_std=1.0, seed=1)
    series = synth_multiscale(cfg)
    stats = zscore_fit(series, 0.8)
    split = split_windows(make_windows(zscore_apply(series, stats), 8, 1))
    checkpoint = train(split, TrainConfig(variant=Variant.BACKBONE_ONLY, epochs=50, seed=0))
    record = evaluate(checkpoint, split.test, stats)
    innovation = (cfg.ar_std / stats.std[-1]) ** 2
    assert abs(record.mse - innovation) <= 0.1 * innovation
