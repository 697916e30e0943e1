"""
Joint optimization of forecaster, blur and denoiser under
``L = MSE - lambda * ELBO`` with Adam and a warm-up learning-rate law.
"""

from __future__ import annotations

import hashlib
import json
import logging
import math
from collections.abc import Sequence
from dataclasses import asdict, dataclass, field, replace
from typing import Any, Literal

import numpy as np

from .backbone import HIDDEN_SEARCH_SPACE, LAYER_SEARCH_SPACE, BackboneKind, KindName
from .data import Window, WindowBatch, WindowSplit
from .exception import EmptySplit, InvalidConfig, LengthMismatch, NonFiniteLoss
from .gp_blur import ISO_MAX, GPParams, elbo_and_grad
from .numerics import RngStream
from .pipeline import Mode, PipelineParams, Variant, init_pipeline, pipeline_backward, pipeline_forward

__all__ = [
    "AdamState",
    "Checkpoint",
    "EpochRecord",
    "GPConfig",
    "GridCell",
    "LossParts",
    "TrainConfig",
    "adam_step",
    "composite_loss",
    "fit_residual_head",
    "grid_search",
    "loss_and_grad",
    "predict",
    "train",
    "train_rb",
    "warmup_lr",
]

logger = logging.getLogger(__name__)

# Stream ids derived from the run seed; 1 and 2 are taken by parameter initialization.
SHUFFLE_STREAM = 3
BLUR_STREAM = 4
EVAL_STREAM = 5

WARMUP_SEARCH_SPACE = (1000, 8000)


@dataclass(frozen=True, kw_only=True, slots=True)
class GPConfig:
    """Initial blur hyperparameters; the white-noise floor starts well below the smooth amplitude."""

    inducing: int | None = None
    lengthscale: float = 0.1
    amplitude: float = 0.02
    noise: float = 1e-4

    def build(self, tau: int) -> GPParams:
        m = self.inducing if self.inducing is not None else max(4, tau // 4)
        return GPParams.initial(m, lengthscale=self.lengthscale, amplitude=self.amplitude, noise=self.noise)


@dataclass(frozen=True, kw_only=True, slots=True)
class TrainConfig:
    variant: Variant = Variant.DG
    backbone: BackboneKind = field(default_factory=BackboneKind.linear)
    gp: GPConfig = field(default_factory=GPConfig)
    lam: float = 0.001
    batch_size: int = 256
    epochs: int = 50
    warmup_steps: int = 1000
    base_scale: float = 1.0
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    seed: int = 0
    elbo_target: Literal["forecast", "residual"] = "forecast"
    elbo_sign: Literal["maximize", "penalty"] = "maximize"
    selection: Literal["best", "last"] = "best"
    denoiser_init: Literal["glorot", "passthrough"] = "glorot"
    iso_init: float = 0.05

    def __post_init__(self) -> None:
        if self.lam < 0:
            raise InvalidConfig(f"lambda {self.lam} must be non-negative")
        if self.batch_size < 1:
            raise InvalidConfig(f"batch_size {self.batch_size} must be at least 1")
        if self.epochs < 0:
            raise InvalidConfig(f"epochs {self.epochs} must be non-negative")
        if self.warmup_steps < 1:
            raise InvalidConfig(f"warmup_steps {self.warmup_steps} must be at least 1")
        for name, value, allowed in [
            ("elbo_target", self.elbo_target, ("forecast", "residual")),
            ("elbo_sign", self.elbo_sign, ("maximize", "penalty")),
            ("selection", self.selection, ("best", "last")),
            ("denoiser_init", self.denoiser_init, ("glorot", "passthrough")),
        ]:
            if value not in allowed:
                raise InvalidConfig(f"{name} `{value}` must be one of {allowed}")

    def to_dict(self) -> dict[str, Any]:
        data = asdict(self)
        data["variant"] = self.variant.value
        data["backbone"] = {"kind": self.backbone.name.value, "hidden": self.backbone.hidden, "layers": self.backbone.layers}
        data["lambda"] = data.pop("lam")
        return data

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> TrainConfig:
        data = dict(data)
        if "lambda" in data:
            data["lam"] = data.pop("lambda")
        if "variant" in data:
            data["variant"] = Variant.parse(str(data["variant"]))
        if "backbone" in data:
            spec = dict(data["backbone"])
            data["backbone"] = BackboneKind(
                name=KindName(spec.get("kind", "linear")), hidden=int(spec.get("hidden", 16)), layers=int(spec.get("layers", 1))
            )
        if "gp" in data:
            data["gp"] = GPConfig(**data["gp"])
        unknown = set(data) - set(cls.__dataclass_fields__)
        if unknown:
            raise InvalidConfig(f"unknown training keys: {sorted(unknown)}")
        return cls(**data)

    def digest(self) -> bytes:
        canonical = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canonical.encode("utf-8")).digest()


@dataclass(frozen=True, kw_only=True, slots=True)
class AdamState:
    m: np.ndarray
    v: np.ndarray
    step: int = 0

    @classmethod
    def zeros(cls, size: int) -> AdamState:
        return cls(m=np.zeros(size), v=np.zeros(size), step=0)


@dataclass(frozen=True, kw_only=True, slots=True)
class EpochRecord:
    epoch: int
    train_loss: float
    train_mse: float
    validation_mse: float | None
    stage: int = 1


@dataclass(frozen=True, kw_only=True, slots=True)
class Checkpoint:
    params: PipelineParams
    optimizer: AdamState
    config: TrainConfig
    history: tuple[EpochRecord, ...] = ()
    best_epoch: int = 0

    @property
    def config_hash(self) -> bytes:
        return self.config.digest()


@dataclass(frozen=True, kw_only=True, slots=True)
class LossParts:
    loss: float
    mse: float
    elbo: float
    grad: np.ndarray


def composite_loss(y_d: np.ndarray, y: np.ndarray, elbo_value: float, lam: float, *, maximize: bool = True) -> float:
    """``mean((y_d - y)^2) - lam * elbo``; with ``maximize=False`` the ELBO is added as a penalty."""
    if np.shape(y_d) != np.shape(y):
        raise LengthMismatch(f"prediction shape {np.shape(y_d)} differs from target shape {np.shape(y)}")
    mse = float(np.mean((np.asarray(y_d) - np.asarray(y)) ** 2))
    sign = -1.0 if maximize else 1.0
    return mse + sign * lam * elbo_value


def adam_step(
    params: np.ndarray,
    grad: np.ndarray,
    state: AdamState,
    lr: float,
    *,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> tuple[np.ndarray, AdamState]:
    if params.shape != grad.shape or state.m.shape != params.shape:
        raise LengthMismatch(f"params {params.shape}, grad {grad.shape}, state {state.m.shape}")
    step = state.step + 1
    m = beta1 * state.m + (1.0 - beta1) * grad
    v = beta2 * state.v + (1.0 - beta2) * grad**2
    m_hat = m / (1.0 - beta1**step)
    v_hat = v / (1.0 - beta2**step)
    return params - lr * m_hat / (np.sqrt(v_hat) + eps), AdamState(m=m, v=v, step=step)


def warmup_lr(step: int, warmup_steps: int, base_scale: float = 1.0) -> float:
    """``base_scale * min(step^-1/2, step * warmup^-3/2)``; peaks at ``step == warmup_steps``."""
    if step < 1:
        raise InvalidConfig(f"learning-rate step {step} must be at least 1")
    return base_scale * min(step**-0.5, step * warmup_steps**-1.5)


def loss_and_grad(
    params: PipelineParams,
    batch: WindowBatch,
    cfg: TrainConfig,
    *,
    rng: RngStream | None = None,
    eps: np.ndarray | None = None,
) -> LossParts:
    """Composite loss of one mini-batch in training mode and its gradient in the flat layout."""
    if rng is None:
        rng = RngStream(cfg.seed, BLUR_STREAM)
    output = pipeline_forward(params, batch, Mode.TRAIN, rng, eps=eps)
    diff = output.y_d - batch.future
    grad = pipeline_backward(output, 2.0 * diff / diff.size).flatten()

    elbo_value = 0.0
    if params.gp is not None and cfg.lam != 0.0:
        # ELBO observations are detached from the forecaster
        obs = output.y_f if cfg.elbo_target == "forecast" else batch.future - output.y_f
        elbo_value, elbo_grad = elbo_and_grad(params.gp, obs)
        sign = -1.0 if cfg.elbo_sign == "maximize" else 1.0
        grad[params.groups()["gp"]] += sign * cfg.lam * elbo_grad

    loss = composite_loss(output.y_d, batch.future, elbo_value, cfg.lam, maximize=cfg.elbo_sign == "maximize")
    return LossParts(loss=loss, mse=float(np.mean(diff**2)), elbo=elbo_value, grad=grad)


def predict(params: PipelineParams, batch: WindowBatch, rng: RngStream, *, chunk: int = 1024) -> np.ndarray:
    """Inference-mode ``y_d`` for every window, evaluated in chunks."""
    outputs = [
        pipeline_forward(params, batch.take(np.arange(start, min(start + chunk, len(batch)))), Mode.INFER, rng).y_d
        for start in range(0, len(batch), chunk)
    ]
    return np.concatenate(outputs, axis=0)


def _validation_mse(params: PipelineParams, batch: WindowBatch | None, cfg: TrainConfig) -> float | None:
    if batch is None:
        return None
    y_d = predict(params, batch, RngStream(cfg.seed, EVAL_STREAM), chunk=max(cfg.batch_size, 256))
    return float(np.mean((y_d - batch.future) ** 2))


def _stack(windows: Sequence[Window]) -> WindowBatch | None:
    return WindowBatch.stack(windows) if windows else None


def _project(vector: np.ndarray, params: PipelineParams) -> np.ndarray:
    if params.sigma_iso is not None:
        index = params.groups()["sigma_iso"]
        vector[index] = np.clip(vector[index], 0.0, ISO_MAX)
    return vector


def _initial_params(batch: WindowBatch, cfg: TrainConfig, variant: Variant) -> PipelineParams:
    return init_pipeline(
        variant,
        cfg.backbone,
        kappa=batch.kappa,
        tau=batch.tau,
        n_features=batch.n_features,
        n_targets=batch.n_targets,
        rng=RngStream(cfg.seed),
        gp=cfg.gp.build(batch.tau) if variant.has_gp else None,
        sigma_iso=cfg.iso_init,
        denoiser_init=cfg.denoiser_init,
    )


def _fit(
    params: PipelineParams,
    train_batch: WindowBatch,
    validation_batch: WindowBatch | None,
    cfg: TrainConfig,
    *,
    frozen: Sequence[str] = (),
    stage: int = 1,
) -> Checkpoint:
    vector = params.flatten()
    groups = params.groups()
    mask = np.ones_like(vector)
    for name in frozen:
        mask[groups[name]] = 0.0
    state = AdamState.zeros(vector.size)
    shuffle = RngStream(cfg.seed, SHUFFLE_STREAM + 10 * (stage - 1))
    blur = RngStream(cfg.seed, BLUR_STREAM + 10 * (stage - 1))
    n = len(train_batch)

    history: list[EpochRecord] = []
    best: tuple[float, PipelineParams, AdamState, int] | None = None
    for epoch in range(1, cfg.epochs + 1):
        order = shuffle.permutation(n)
        loss_sum = mse_sum = 0.0
        for index, start in enumerate(range(0, n, cfg.batch_size)):
            batch = train_batch.take(order[start : start + cfg.batch_size])
            parts = loss_and_grad(params, batch, cfg, rng=blur)
            if not math.isfinite(parts.loss) or not np.all(np.isfinite(parts.grad)):
                raise NonFiniteLoss(epoch, index, parts.loss)
            lr = warmup_lr(state.step + 1, cfg.warmup_steps, cfg.base_scale)
            vector, state = adam_step(
                vector, parts.grad * mask, state, lr, beta1=cfg.beta1, beta2=cfg.beta2, eps=cfg.adam_eps
            )
            vector = _project(vector, params)
            params = params.with_vector(vector)
            loss_sum += parts.loss * len(batch)
            mse_sum += parts.mse * len(batch)
            logger.debug(f"epoch {epoch} batch {index}: loss={parts.loss:.6f} lr={lr:.3e}")

        validation_mse = _validation_mse(params, validation_batch, cfg)
        record = EpochRecord(
            epoch=epoch, train_loss=loss_sum / n, train_mse=mse_sum / n, validation_mse=validation_mse, stage=stage
        )
        history.append(record)
        logger.info(
            f"{cfg.variant} stage {stage} epoch {epoch}/{cfg.epochs}: train_mse={record.train_mse:.5f} "
            f"validation_mse={'n/a' if validation_mse is None else f'{validation_mse:.5f}'}"
        )
        score = record.train_mse if validation_mse is None else validation_mse
        if best is None or score < best[0]:
            best = (score, params, state, epoch)

    if best is None or cfg.selection == "last":
        return Checkpoint(params=params, optimizer=state, config=cfg, history=tuple(history), best_epoch=len(history))
    _, best_params, best_state, best_epoch = best
    return Checkpoint(
        params=best_params, optimizer=best_state, config=cfg, history=tuple(history), best_epoch=best_epoch
    )


def _batches(split: WindowSplit) -> tuple[WindowBatch, WindowBatch | None]:
    train_batch = _stack(split.train)
    if train_batch is None:
        raise EmptySplit("training split has no windows")
    validation_batch = _stack(split.validation)
    if validation_batch is None:
        logger.warning("Validation split is empty; selecting checkpoints by training MSE")
    return train_batch, validation_batch


def train(split: WindowSplit, cfg: TrainConfig) -> Checkpoint:
    """Train one variant; deterministic given ``(split, cfg)``."""
    if cfg.variant is Variant.RB:
        return train_rb(split, cfg)
    train_batch, validation_batch = _batches(split)
    logger.info(
        f"Training {cfg.variant} ({cfg.backbone}) on {len(train_batch)} windows, "
        f"kappa={train_batch.kappa}, tau={train_batch.tau}, seed={cfg.seed}"
    )
    params = _initial_params(train_batch, cfg, cfg.variant)
    return _fit(params, train_batch, validation_batch, cfg)


def fit_residual_head(split: WindowSplit, cfg: TrainConfig, forecaster_checkpoint: Checkpoint) -> Checkpoint:
    """Second boosting stage: the forecaster is frozen and the head learns ``Y - Y_F``."""
    train_batch, validation_batch = _batches(split)
    forecaster = forecaster_checkpoint.params.forecaster
    template = _initial_params(train_batch, replace(cfg, variant=Variant.RB), Variant.RB)
    params = PipelineParams(variant=Variant.RB, forecaster=forecaster, denoiser=template.denoiser)
    stage_two = _fit(params, train_batch, validation_batch, cfg, frozen=("forecaster",), stage=2)
    return replace(stage_two, history=forecaster_checkpoint.history + stage_two.history)


def train_rb(split: WindowSplit, cfg: TrainConfig) -> Checkpoint:
    """Residual boosting: fit the forecaster alone, then a residual head on its frozen output."""
    logger.info(f"Residual boosting stage 1: forecaster only (seed={cfg.seed})")
    stage_one = train(split, replace(cfg, variant=Variant.BACKBONE_ONLY))
    logger.info("Residual boosting stage 2: residual head")
    return fit_residual_head(split, cfg, stage_one)


@dataclass(frozen=True, kw_only=True, slots=True)
class GridCell:
    backbone: BackboneKind
    warmup_steps: int
    validation_mse: float


def grid_search(
    split: WindowSplit,
    cfg: TrainConfig,
    *,
    hidden: Sequence[int] = HIDDEN_SEARCH_SPACE,
    layers: Sequence[int] = LAYER_SEARCH_SPACE,
    warmups: Sequence[int] = WARMUP_SEARCH_SPACE,
) -> tuple[list[GridCell], TrainConfig]:
    """Exhaustive search over backbone width, depth and warm-up; selection by best validation MSE."""
    cells = []
    for width in hidden:
        for depth in layers:
            for warmup in warmups:
                candidate = replace(cfg, backbone=BackboneKind.mlp(width, depth), warmup_steps=warmup)
                checkpoint = train(split, candidate)
                scores = [r.validation_mse if r.validation_mse is not None else r.train_mse for r in checkpoint.history]
                score = min(scores) if scores else math.inf
                cells.append(GridCell(backbone=candidate.backbone, warmup_steps=warmup, validation_mse=score))
                logger.info(f"Grid cell {candidate.backbone} warmup={warmup}: validation_mse={score:.5f}")
    if not cells:
        raise InvalidConfig("empty search space")
    winner = min(cells, key=lambda cell: cell.validation_mse)
    return cells, replace(cfg, backbone=winner.backbone, warmup_steps=winner.warmup_steps)
