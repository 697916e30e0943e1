"""
Forecast, blur and denoise composition for the six evaluated variants.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import StrEnum, unique
from typing import Any

import numpy as np

from . import backbone
from .backbone import BackboneKind, ForwardCache, ModelParams
from .data import Window, WindowBatch
from .exception import DimensionMismatch, InvalidConfig, StaleCache
from .gp_blur import (
    ISO_MAX,
    BlurDraw,
    GPParams,
    blur_backward,
    isotropic_backward,
    isotropic_blur,
    sample_blur,
)
from .numerics import RngStream

__all__ = [
    "Mode",
    "PipelineGrads",
    "PipelineOutput",
    "PipelineParams",
    "Variant",
    "denoiser_input",
    "init_pipeline",
    "pipeline_backward",
    "pipeline_forward",
]


@unique
class Variant(StrEnum):
    BACKBONE_ONLY = "backbone"
    DG = "dg"
    DI = "di"
    DWB = "dwb"
    RB = "rb"
    DT = "dt"

    @classmethod
    def parse(cls, text: str) -> Variant:
        key = text.strip().lower().replace("_", "").replace("-", "")
        aliases = {"backbone": cls.BACKBONE_ONLY, "backboneonly": cls.BACKBONE_ONLY, "dwc": cls.DWB}
        if key in aliases:
            return aliases[key]
        try:
            return cls(key)
        except ValueError as error:
            raise InvalidConfig(f"unknown variant `{text}`; expected one of {[v.value for v in cls]}") from error

    @property
    def has_denoiser(self) -> bool:
        return self is not Variant.BACKBONE_ONLY

    @property
    def has_gp(self) -> bool:
        return self in (Variant.DG, Variant.DT)

    @property
    def has_isotropic(self) -> bool:
        return self is Variant.DI


@unique
class Mode(StrEnum):
    TRAIN = "train"
    INFER = "infer"


@dataclass(frozen=True, kw_only=True, slots=True)
class PipelineParams:
    """Forecaster ``phi``, denoiser ``xi`` and the blur parameters of one variant."""

    variant: Variant
    forecaster: ModelParams
    denoiser: ModelParams | None = None
    gp: GPParams | None = None
    sigma_iso: float | None = None

    def __post_init__(self) -> None:
        if self.variant.has_denoiser != (self.denoiser is not None):
            raise InvalidConfig(f"variant {self.variant} {'needs' if self.variant.has_denoiser else 'has no'} denoiser")
        if self.variant.has_gp != (self.gp is not None):
            raise InvalidConfig(f"variant {self.variant} {'needs' if self.variant.has_gp else 'has no'} GP blur")
        if self.variant.has_isotropic != (self.sigma_iso is not None):
            raise InvalidConfig(f"variant {self.variant} {'needs' if self.variant.has_isotropic else 'has no'} sigma_iso")

    def groups(self) -> dict[str, slice]:
        """Slices of the flat vector owned by each parameter group."""
        sizes = {"forecaster": self.forecaster.size}
        if self.denoiser is not None:
            sizes["denoiser"] = self.denoiser.size
        if self.gp is not None:
            sizes["gp"] = GPParams.flat_size(self.gp.m)
        if self.sigma_iso is not None:
            sizes["sigma_iso"] = 1
        slices, offset = {}, 0
        for name, size in sizes.items():
            slices[name] = slice(offset, offset + size)
            offset += size
        return slices

    def flatten(self) -> np.ndarray:
        parts = [self.forecaster.values]
        if self.denoiser is not None:
            parts.append(self.denoiser.values)
        if self.gp is not None:
            parts.append(self.gp.flatten())
        if self.sigma_iso is not None:
            parts.append(np.array([self.sigma_iso]))
        return np.concatenate(parts)

    def with_vector(self, values: np.ndarray) -> PipelineParams:
        groups = self.groups()
        return PipelineParams(
            variant=self.variant,
            forecaster=self.forecaster.with_values(values[groups["forecaster"]].copy()),
            denoiser=self.denoiser.with_values(values[groups["denoiser"]].copy()) if self.denoiser else None,
            gp=GPParams.unflatten(values[groups["gp"]].copy(), self.gp.m) if self.gp else None,
            sigma_iso=float(values[groups["sigma_iso"]][0]) if self.sigma_iso is not None else None,
        )


@dataclass(frozen=True, kw_only=True, slots=True)
class PipelineGrads:
    forecaster: np.ndarray
    denoiser: np.ndarray | None = None
    gp: np.ndarray | None = None
    sigma_iso: float | None = None

    def flatten(self) -> np.ndarray:
        parts = [self.forecaster]
        if self.denoiser is not None:
            parts.append(self.denoiser)
        if self.gp is not None:
            parts.append(self.gp)
        if self.sigma_iso is not None:
            parts.append(np.array([self.sigma_iso]))
        return np.concatenate(parts)


@dataclass(slots=True)
class _Caches:
    params: PipelineParams
    batch: WindowBatch
    squeeze: bool
    forecaster: ForwardCache
    denoiser: ForwardCache | None = None
    draw: BlurDraw | None = None


@dataclass(frozen=True, kw_only=True, slots=True)
class PipelineOutput:
    y_f: np.ndarray
    y_b: np.ndarray | None
    y_d: np.ndarray
    caches: Any = field(repr=False, default=None)


def init_pipeline(
    variant: Variant,
    kind: BackboneKind,
    *,
    kappa: int,
    tau: int,
    n_features: int,
    n_targets: int,
    rng: RngStream,
    gp: GPParams | None = None,
    sigma_iso: float = 0.05,
    denoiser_init: str = "glorot",
) -> PipelineParams:
    """Fresh parameters; the forecaster and denoiser share ``kind`` but draw from separate streams."""
    channels = n_features + n_targets
    forecaster = backbone.init_params(kind, kappa, channels, tau, n_targets, rng.derive(1))
    denoiser = None
    if variant is Variant.RB:
        denoiser = backbone.zero_params(kind, kappa + tau, channels, tau, n_targets)
    elif variant.has_denoiser:
        if denoiser_init == "passthrough":
            if kind != BackboneKind.linear():
                raise InvalidConfig("passthrough denoiser initialization requires the linear backbone")
            denoiser = backbone.passthrough_params(kappa, tau, n_features, n_targets)
        elif denoiser_init == "glorot":
            denoiser = backbone.init_params(kind, kappa + tau, channels, tau, n_targets, rng.derive(2))
        else:
            raise InvalidConfig(f"unknown denoiser_init `{denoiser_init}`")
    return PipelineParams(
        variant=variant,
        forecaster=forecaster,
        denoiser=denoiser,
        gp=(gp if gp is not None else GPParams.initial(max(4, tau // 4))) if variant.has_gp else None,
        sigma_iso=float(np.clip(sigma_iso, 0.0, ISO_MAX)) if variant.has_isotropic else None,
    )


def _as_batch(window: Window | WindowBatch) -> tuple[WindowBatch, bool]:
    if isinstance(window, Window):
        return WindowBatch.stack([window]), True
    return window, False


def denoiser_input(window: Window | WindowBatch, y_b: np.ndarray) -> np.ndarray:
    """
    History rows unchanged, followed by ``tau`` rows holding the known future
    covariates and the blurred forecast in the target columns.
    """
    batch, squeeze = _as_batch(window)
    y_b = np.asarray(y_b, dtype=np.float64)
    if squeeze and y_b.ndim == 2:
        y_b = y_b[None]
    if y_b.shape != batch.future.shape:
        raise DimensionMismatch(f"blurred forecast has shape {y_b.shape}, window expects {batch.future.shape}")
    future_rows = np.concatenate([batch.future_features, y_b], axis=2)
    stacked = np.concatenate([batch.history, future_rows], axis=1)
    return stacked[0] if squeeze else stacked


def pipeline_forward(
    params: PipelineParams,
    window: Window | WindowBatch,
    mode: Mode,
    rng: RngStream,
    *,
    eps: np.ndarray | None = None,
) -> PipelineOutput:
    """
    Run forecaster, blur and denoiser. ``eps`` pins the standard-normal blur draw
    (same shape as the forecast) instead of consuming ``rng``.
    """
    batch, squeeze = _as_batch(window)
    variant = params.variant
    if params.forecaster.in_shape != batch.history.shape[1:]:
        raise DimensionMismatch(f"history {batch.history.shape[1:]} does not match forecaster {params.forecaster.in_shape}")
    if eps is not None and squeeze and eps.ndim == 2:
        eps = eps[None]

    y_f, f_cache = backbone.forward(params.forecaster, batch.history)
    caches = _Caches(params=params, batch=batch, squeeze=squeeze, forecaster=f_cache)

    if variant is Variant.BACKBONE_ONLY:
        return _output(y_f, None, y_f, caches)

    y_b: np.ndarray | None
    if variant is Variant.DG or (variant is Variant.DT and mode is Mode.TRAIN):
        caches.draw = sample_blur(y_f, params.gp, rng, eps=eps)
        y_b = caches.draw.blurred
    elif variant is Variant.DI:
        caches.draw = isotropic_blur(y_f, params.sigma_iso, rng, eps=eps)
        y_b = caches.draw.blurred
    elif variant is Variant.RB:
        y_b = None
    else:
        y_b = y_f.copy()

    refined, d_cache = backbone.forward(params.denoiser, denoiser_input(batch, y_f if y_b is None else y_b))
    caches.denoiser = d_cache
    y_d = y_f + refined if variant is Variant.RB else refined
    return _output(y_f, y_b, y_d, caches)


def _output(y_f: np.ndarray, y_b: np.ndarray | None, y_d: np.ndarray, caches: _Caches) -> PipelineOutput:
    if caches.squeeze:
        return PipelineOutput(y_f=y_f[0], y_b=None if y_b is None else y_b[0], y_d=y_d[0], caches=caches)
    return PipelineOutput(y_f=y_f, y_b=y_b, y_d=y_d, caches=caches)


def pipeline_backward(output: PipelineOutput, loss_grad: np.ndarray) -> PipelineGrads:
    """Chain ``loss -> y_d -> denoiser -> y_b slice -> blur -> y_f -> forecaster``."""
    caches = output.caches
    if not isinstance(caches, _Caches):
        raise StaleCache("output carries no backward state")
    if loss_grad.shape != output.y_d.shape:
        raise StaleCache(f"loss gradient has shape {loss_grad.shape}, y_d has {output.y_d.shape}")
    params = caches.params
    variant = params.variant
    grad = loss_grad[None] if caches.squeeze else loss_grad

    if variant is Variant.BACKBONE_ONLY:
        g_phi, _ = backbone.backward(params.forecaster, caches.forecaster, grad)
        return PipelineGrads(forecaster=g_phi)

    g_xi, g_input = backbone.backward(params.denoiser, caches.denoiser, grad)
    kappa, n_features = caches.batch.kappa, caches.batch.n_features
    g_blurred = g_input[:, kappa:, n_features:]

    g_gp = np.zeros(GPParams.flat_size(params.gp.m)) if params.gp is not None else None
    g_sigma = 0.0 if params.sigma_iso is not None else None
    if variant is Variant.RB:
        # the residual head is trained on detached residuals
        g_forecast = grad
    elif caches.draw is not None and variant.has_gp:
        g_gp, g_forecast = blur_backward(caches.draw, g_blurred, params.gp, caches.draw.source)
    elif caches.draw is not None:
        g_sigma, g_forecast = isotropic_backward(caches.draw, g_blurred)
    else:
        g_forecast = g_blurred

    g_phi, _ = backbone.backward(params.forecaster, caches.forecaster, np.ascontiguousarray(g_forecast))
    return PipelineGrads(forecaster=g_phi, denoiser=g_xi, gp=g_gp, sigma_iso=g_sigma)
