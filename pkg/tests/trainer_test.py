import math
from dataclasses import replace

import numpy as np
import pytest

from blurcast.backbone import BackboneKind
from blurcast.data import (
    SynthConfig,
    WindowBatch,
    WindowSplit,
    make_windows,
    split_windows,
    synth_multiscale,
    zscore_apply,
    zscore_fit,
)
from blurcast.exception import EmptySplit, InvalidConfig, LengthMismatch
from blurcast.gp_blur import elbo_and_grad
from blurcast.numerics import RngStream
from blurcast.pipeline import Mode, Variant, pipeline_backward, pipeline_forward
from blurcast.trainer import (
    EVAL_STREAM,
    AdamState,
    GPConfig,
    TrainConfig,
    adam_step,
    composite_loss,
    grid_search,
    loss_and_grad,
    predict,
    train,
    train_rb,
    warmup_lr,
)


def _cfg(variant: Variant = Variant.DG, **overrides) -> TrainConfig:
    defaults: dict = {
        "variant": variant,
        "backbone": BackboneKind.linear(),
        "gp": GPConfig(inducing=2, lengthscale=0.3, amplitude=0.1, noise=0.05),
        "batch_size": 32,
        "epochs": 3,
        "warmup_steps": 10,
        "base_scale": 0.1,
        "seed": 3,
    }
    defaults.update(overrides)
    return TrainConfig(**defaults)


class TestCompositeLoss:
    def test_perfect_fit(self):
        """A perfect prediction without the ELBO costs nothing."""
        y = np.arange(6.0).reshape(3, 2)
        assert composite_loss(y, y, -10.0, 0.0) == 0.0

    def test_unit_error(self):
        """All-ones residuals give unit MSE."""
        y = np.zeros((4, 1))
        assert composite_loss(y + 1.0, y, 0.0, 0.0) == 1.0

    def test_elbo_subtracted(self):
        """The bound is maximized, so a negative ELBO raises the loss."""
        y = np.zeros((5, 1))
        y_d = np.full((5, 1), math.sqrt(0.2))
        assert composite_loss(y_d, y, -50.0, 0.001) == pytest.approx(0.25)
        assert composite_loss(y_d, y, -50.0, 0.001, maximize=False) == pytest.approx(0.15)

    def test_shape_mismatch(self):
        """Predictions and targets must agree."""
        with pytest.raises(LengthMismatch):
            composite_loss(np.zeros((3, 1)), np.zeros((4, 1)), 0.0, 0.0)


class TestAdam:
    def test_zero_gradient(self):
        """A zero gradient leaves parameters unchanged and advances the step."""
        params = np.array([1.0, -2.0])
        updated, state = adam_step(params, np.zeros(2), AdamState.zeros(2), 0.1)
        assert np.array_equal(updated, params)
        assert state.step == 1

    def test_first_step_magnitude(self):
        """Bias correction makes the first step about lr."""
        updated, _ = adam_step(np.array([0.0]), np.array([3.0]), AdamState.zeros(1), 0.01)
        assert updated[0] == pytest.approx(-0.01, rel=1e-6)

    def test_quadratic_convergence(self):
        """Adam minimizes a one-dimensional quadratic."""
        theta, state = np.array([1.0]), AdamState.zeros(1)
        for _ in range(200):
            theta, state = adam_step(theta, theta.copy(), state, 0.1)
        assert abs(theta[0]) < 1e-2

    def test_length_mismatch(self):
        """Parameter and gradient lengths must agree."""
        with pytest.raises(LengthMismatch):
            adam_step(np.zeros(2), np.zeros(3), AdamState.zeros(2), 0.1)


class TestWarmup:
    def test_crossover(self):
        """Both branches meet at the warm-up step."""
        assert warmup_lr(1000, 1000, 2.0) == pytest.approx(2.0 * 1000**-0.5)

    def test_first_step(self):
        """The first step uses the linear branch."""
        assert warmup_lr(1, 1000) == pytest.approx(1000**-1.5)

    def test_decay(self):
        """After warm-up the rate decays with the inverse square root."""
        assert warmup_lr(2000, 1000) / warmup_lr(1000, 1000) == pytest.approx(2**-0.5)

    def test_peak(self):
        """The rate peaks at the warm-up step."""
        rates = [warmup_lr(step, 50) for step in range(1, 200)]
        assert int(np.argmax(rates)) + 1 == 50

    def test_step_zero(self):
        """Steps count from one."""
        with pytest.raises(InvalidConfig):
            warmup_lr(0, 1000)


class TestTrainConfig:
    @pytest.mark.parametrize("overrides", [{"lam": -1.0}, {"batch_size": 0}, {"epochs": -1}, {"selection": "first"}])
    def test_invalid(self, overrides):
        """Out-of-range settings are rejected."""
        with pytest.raises(InvalidConfig):
            _cfg(**overrides)

    def test_dict_round_trip(self):
        """Dictionaries use the ``lambda`` key and rebuild the same config."""
        cfg = _cfg(Variant.DI, backbone=BackboneKind.mlp(8, 2), lam=0.01)
        data = cfg.to_dict()
        assert data["lambda"] == 0.01
        assert "lam" not in data
        assert TrainConfig.from_dict(data) == cfg

    def test_unknown_key(self):
        """Unknown keys are reported."""
        with pytest.raises(InvalidConfig, match="learning_rate"):
            TrainConfig.from_dict({"learning_rate": 0.1})

    def test_digest(self):
        """Equal configs hash equally; any change alters the hash."""
        assert _cfg().digest() == _cfg().digest()
        assert _cfg().digest() != _cfg(seed=4).digest()
        assert len(_cfg().digest()) == 32


class TestLossAndGrad:
    def test_zero_lambda_drops_elbo(self, toy_split):
        """With lambda 0 the GP gradient comes only from the blurred MSE path."""
        cfg = _cfg(lam=0.0)
        batch = WindowBatch.stack(toy_split.train[:4])
        params = train(toy_split, replace(cfg, epochs=0)).params
        eps = RngStream(1).standard_normal(batch.future.shape)
        parts = loss_and_grad(params, batch, cfg, eps=eps)
        output = pipeline_forward(params, batch, Mode.TRAIN, RngStream(0), eps=eps)
        diff = output.y_d - batch.future
        expected = pipeline_backward(output, 2.0 * diff / diff.size).flatten()
        assert parts.elbo == 0.0
        assert np.array_equal(parts.grad, expected)

    def test_elbo_contribution(self, toy_split):
        """A positive lambda adds exactly minus lambda times the ELBO gradient."""
        batch = WindowBatch.stack(toy_split.train[:4])
        params = train(toy_split, _cfg(epochs=0)).params
        eps = RngStream(1).standard_normal(batch.future.shape)
        with_elbo = loss_and_grad(params, batch, _cfg(lam=0.5), eps=eps)
        without = loss_and_grad(params, batch, _cfg(lam=0.0), eps=eps)
        y_f = pipeline_forward(params, batch, Mode.TRAIN, RngStream(0), eps=eps).y_f
        value, grad = elbo_and_grad(params.gp, y_f)
        gp = params.groups()["gp"]
        assert with_elbo.elbo == pytest.approx(value)
        assert np.allclose(with_elbo.grad[gp] - without.grad[gp], -0.5 * grad)
        assert with_elbo.loss == pytest.approx(without.mse - 0.5 * value)


class TestTrain:
    def test_zero_epochs(self, toy_split):
        """Without epochs the initialization is returned."""
        checkpoint = train(toy_split, _cfg(epochs=0))
        again = train(toy_split, _cfg(epochs=0))
        assert checkpoint.history == ()
        assert checkpoint.optimizer.step == 0
        assert np.array_equal(checkpoint.params.flatten(), again.params.flatten())

    @pytest.mark.parametrize("variant", list(Variant))
    def test_deterministic(self, variant, toy_split):
        """The same split and config reproduce the history exactly."""
        first = train(toy_split, _cfg(variant))
        second = train(toy_split, _cfg(variant))
        assert first.history == second.history
        assert np.array_equal(first.params.flatten(), second.params.flatten())

    def test_seed_changes_run(self, toy_split):
        """Different seeds draw different initializations."""
        assert train(toy_split, _cfg(seed=1)).history != train(toy_split, _cfg(seed=2)).history

    def test_best_selection(self, toy_split):
        """The returned epoch has the minimal validation MSE."""
        checkpoint = train(toy_split, _cfg(epochs=5))
        scores = [record.validation_mse for record in checkpoint.history]
        assert checkpoint.best_epoch == int(np.argmin(scores)) + 1

    def test_last_selection(self, toy_split):
        """``selection = last`` keeps the final epoch."""
        checkpoint = train(toy_split, _cfg(epochs=4, selection="last"))
        assert checkpoint.best_epoch == 4
        assert checkpoint.optimizer.step == 4 * math.ceil(len(toy_split.train) / 32)

    def test_empty_validation(self, toy_split):
        """Without validation windows the training MSE selects the checkpoint."""
        split = WindowSplit(train=toy_split.train, validation=[], test=toy_split.test)
        checkpoint = train(split, _cfg(epochs=3))
        assert all(record.validation_mse is None for record in checkpoint.history)
        assert checkpoint.best_epoch == int(np.argmin([r.train_mse for r in checkpoint.history])) + 1

    def test_empty_train(self, toy_split):
        """Training needs at least one window."""
        with pytest.raises(EmptySplit):
            train(WindowSplit(validation=toy_split.validation), _cfg())

    def test_sigma_iso_stays_clamped(self, toy_split):
        """The isotropic scale stays within its range during training."""
        checkpoint = train(toy_split, _cfg(Variant.DI, base_scale=10.0, epochs=3))
        assert 0.0 <= checkpoint.params.sigma_iso <= 0.1


class TestResidualBoosting:
    def test_forecaster_frozen(self, toy_split):
        """Stage two leaves the stage-one forecaster bitwise unchanged."""
        cfg = _cfg(Variant.RB)
        stage_one = train(toy_split, replace(cfg, variant=Variant.BACKBONE_ONLY))
        boosted = train_rb(toy_split, cfg)
        assert np.array_equal(boosted.params.forecaster.values, stage_one.params.forecaster.values)
        assert [record.stage for record in boosted.history] == [1] * 3 + [2] * 3

    def test_dispatch(self, toy_split):
        """Training an RB config runs both stages."""
        checkpoint = train(toy_split, _cfg(Variant.RB))
        assert checkpoint.params.variant is Variant.RB
        assert checkpoint.params.denoiser is not None


def test_grid_search(toy_split):
    """Every cell is trained and the winner has the lowest validation MSE."""
    cells, best = grid_search(toy_split, _cfg(epochs=1), hidden=(2, 3), layers=(1,), warmups=(5, 10))
    assert len(cells) == 4
    winner = min(cells, key=lambda cell: cell.validation_mse)
    assert (best.backbone, best.warmup_steps) == (winner.backbone, winner.warmup_steps)


@pytest.fixture(scope="module")
def synthetic_split() -> WindowSplit:
    series = synth_multiscale(SynthConfig(length=3000))
    return split_windows(make_windows(zscore_apply(series, zscore_fit(series, 0.8)), 48, 24))


@pytest.mark.slow
def test_dg_learns_synthetic_task(synthetic_split):
    """Training MSE halves over fifty epochs."""
    checkpoint = train(synthetic_split, TrainConfig(variant=Variant.DG, epochs=50, seed=0))
    assert checkpoint.history[-1].train_mse < 0.5 * checkpoint.history[0].train_mse


@pytest.mark.slow
def test_boosting_improves_fit(synthetic_split):
    """A residual head does not hurt the training fit."""
    cfg = TrainConfig(variant=Variant.RB, epochs=20, seed=0, selection="last")
    boosted = train(synthetic_split, cfg)
    assert boosted.history[-1].train_mse <= boosted.history[cfg.epochs - 1].train_mse


# DT trains on the same streams as DG and only skips the inference draw, so the
# two differ by the expected blur penalty on the denoiser; this margin bounds it.
DT_MARGIN = 5e-3


@pytest.fixture(scope="module")
def variant_test_mse(synthetic_split) -> dict[Variant, float]:
    test = WindowBatch.stack(synthetic_split.test)
    means = {}
    for variant in (Variant.BACKBONE_ONLY, Variant.DG, Variant.DI, Variant.DT):
        errors = []
        for seed in range(5):
            checkpoint = train(synthetic_split, TrainConfig(variant=variant, epochs=50, seed=seed))
            y_hat = predict(checkpoint.params, test, RngStream(seed, EVAL_STREAM))
            errors.append(float(np.mean((test.future - y_hat) ** 2)))
        means[variant] = float(np.mean(errors))
    return means


@pytest.mark.slow
class TestVariantOrdering:
    def test_gp_blur_beats_backbone(self, variant_test_mse):
        """Denoising a GP-blurred forecast beats the bare linear forecaster."""
        assert variant_test_mse[Variant.DG] < variant_test_mse[Variant.BACKBONE_ONLY]

    def test_gp_blur_beats_isotropic(self, variant_test_mse):
        """Correlated blur beats isotropic blur on the five-seed mean."""
        assert variant_test_mse[Variant.DG] < variant_test_mse[Variant.DI]

    def test_train_only_blur_is_not_better(self, variant_test_mse):
        """Dropping the blur at inference does not improve on blurring throughout."""
        assert variant_test_mse[Variant.DG] <= variant_test_mse[Variant.DT] * (1.0 + DT_MARGIN)
