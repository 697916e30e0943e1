"""
Finite-difference suites for every hand-written gradient, at toy dimensions.
"""

from __future__ import annotations

import logging
from collections.abc import Callable
from dataclasses import dataclass

import numpy as np

from . import backbone
from .backbone import BackboneKind
from .data import SynthConfig, WindowBatch, make_windows, synth_multiscale
from .gp_blur import GPParams, blur_backward, elbo, elbo_and_grad, sample_blur
from .numerics import RngStream, finite_diff_check
from .pipeline import Mode, PipelineParams, Variant, init_pipeline, pipeline_forward
from .trainer import TrainConfig, loss_and_grad

__all__ = ["GradientCheck", "GradientResult", "ToyDims", "default_checks", "run_gradchecks"]

logger = logging.getLogger(__name__)

BACKBONE_TOLERANCE = 1e-4
CHAIN_TOLERANCE = 1e-3


@dataclass(frozen=True, kw_only=True, slots=True)
class ToyDims:
    kappa: int = 8
    tau: int = 4
    inducing: int = 2
    batch: int = 3

    def __str__(self) -> str:
        return f"kappa={self.kappa}, tau={self.tau}, M={self.inducing}"


@dataclass(frozen=True, kw_only=True, slots=True)
class GradientResult:
    name: str
    max_rel_err: float
    tolerance: float

    @property
    def passed(self) -> bool:
        return self.max_rel_err <= self.tolerance


@dataclass(frozen=True, kw_only=True, slots=True)
class GradientCheck:
    name: str
    f: Callable[[np.ndarray], float]
    grad: Callable[[np.ndarray], np.ndarray]
    theta: np.ndarray
    tolerance: float = CHAIN_TOLERANCE

    def run(self, h: float = 1e-5) -> GradientResult:
        error = finite_diff_check(self.f, self.grad, self.theta, h)
        return GradientResult(name=self.name, max_rel_err=error, tolerance=self.tolerance)


def _toy_batch(dims: ToyDims) -> WindowBatch:
    series = synth_multiscale(SynthConfig(length=dims.kappa + dims.tau + dims.batch + 8, coarse_period=24.0, seed=3))
    return WindowBatch.stack(make_windows(series, dims.kappa, dims.tau)[: dims.batch])


def _backbone_check(kind: BackboneKind, batch: WindowBatch, rng: RngStream) -> GradientCheck:
    params = backbone.init_params(kind, batch.kappa, batch.history.shape[2], batch.tau, batch.n_targets, rng.derive(11))
    upstream = rng.derive(12).standard_normal((len(batch), batch.tau, batch.n_targets))

    def f(theta: np.ndarray) -> float:
        output, _ = backbone.forward(params.with_values(theta), batch.history)
        return float(np.sum(upstream * output))

    def grad(theta: np.ndarray) -> np.ndarray:
        current = params.with_values(theta)
        _, cache = backbone.forward(current, batch.history)
        return backbone.backward(current, cache, upstream)[0]

    return GradientCheck(name=f"backbone[{kind}]", f=f, grad=grad, theta=params.values, tolerance=BACKBONE_TOLERANCE)


def _backbone_input_check(kind: BackboneKind, batch: WindowBatch, rng: RngStream) -> GradientCheck:
    params = backbone.init_params(kind, batch.kappa, batch.history.shape[2], batch.tau, batch.n_targets, rng.derive(13))
    upstream = rng.derive(14).standard_normal((len(batch), batch.tau, batch.n_targets))
    shape = batch.history.shape

    def f(x: np.ndarray) -> float:
        output, _ = backbone.forward(params, x.reshape(shape))
        return float(np.sum(upstream * output))

    def grad(x: np.ndarray) -> np.ndarray:
        _, cache = backbone.forward(params, x.reshape(shape))
        return backbone.backward(params, cache, upstream)[1].reshape(-1)

    return GradientCheck(
        name=f"backbone-input[{kind}]", f=f, grad=grad, theta=batch.history.reshape(-1).copy(), tolerance=BACKBONE_TOLERANCE
    )


def _blur_check(batch: WindowBatch, m: int, rng: RngStream) -> GradientCheck:
    psi = GPParams.initial(m, lengthscale=0.3, amplitude=0.5, noise=0.1)
    eps = rng.derive(21).standard_normal(batch.future.shape)
    upstream = rng.derive(22).standard_normal(batch.future.shape)
    y_f = batch.future

    def f(theta: np.ndarray) -> float:
        draw = sample_blur(y_f, GPParams.unflatten(theta, m), rng, eps=eps)
        return float(np.sum(upstream * draw.blurred))

    def grad(theta: np.ndarray) -> np.ndarray:
        current = GPParams.unflatten(theta, m)
        draw = sample_blur(y_f, current, rng, eps=eps)
        return blur_backward(draw, upstream, current, y_f)[0]

    return GradientCheck(name="blur", f=f, grad=grad, theta=psi.flatten())


def _elbo_check(batch: WindowBatch, m: int, rng: RngStream) -> GradientCheck:
    base = GPParams.initial(m, lengthscale=0.3, amplitude=0.5, noise=0.1)
    theta = base.flatten() + 0.05 * rng.derive(31).standard_normal(GPParams.flat_size(m))

    def f(values: np.ndarray) -> float:
        return elbo_and_grad(GPParams.unflatten(values, m), batch.future)[0]

    def grad(values: np.ndarray) -> np.ndarray:
        return elbo_and_grad(GPParams.unflatten(values, m), batch.future)[1]

    return GradientCheck(name="elbo", f=f, grad=grad, theta=theta)


def _pipeline_check(variant: Variant, batch: WindowBatch, dims: ToyDims, rng: RngStream) -> GradientCheck:
    cfg = TrainConfig(variant=variant, backbone=BackboneKind.mlp(4, 1), lam=0.1, seed=0)
    params = init_pipeline(
        variant,
        cfg.backbone,
        kappa=batch.kappa,
        tau=batch.tau,
        n_features=batch.n_features,
        n_targets=batch.n_targets,
        rng=rng.derive(41),
        gp=GPParams.initial(dims.inducing, lengthscale=0.3, amplitude=0.5, noise=0.1),
        sigma_iso=0.05,
    )
    eps = rng.derive(42).standard_normal(batch.future.shape)
    theta = params.flatten()
    trainable = slice(None)
    if variant is Variant.RB:
        # the residual head sees Y_F as data, so only its own parameters are checked
        trainable = params.groups()["denoiser"]

    def expand(values: np.ndarray) -> PipelineParams:
        full = theta.copy()
        full[trainable] = values
        return params.with_vector(full)

    # the ELBO conditions on Y_F as data, so the check holds its observations fixed
    observed = pipeline_forward(params, batch, Mode.TRAIN, rng, eps=eps).y_f

    def f(values: np.ndarray) -> float:
        current = expand(values)
        mse = loss_and_grad(current, batch, cfg, eps=eps).mse
        return mse if current.gp is None else mse - cfg.lam * elbo(current.gp, observed)

    def grad(values: np.ndarray) -> np.ndarray:
        return loss_and_grad(expand(values), batch, cfg, eps=eps).grad[trainable]

    return GradientCheck(name=f"pipeline[{variant}]", f=f, grad=grad, theta=theta[trainable])


def default_checks(dims: ToyDims | None = None, seed: int = 0) -> list[GradientCheck]:
    dims = dims or ToyDims()
    rng = RngStream(seed)
    batch = _toy_batch(dims)
    checks = [
        _backbone_check(BackboneKind.linear(), batch, rng),
        _backbone_input_check(BackboneKind.linear(), batch, rng),
        _backbone_check(BackboneKind.mlp(4, 2), batch, rng),
        _backbone_input_check(BackboneKind.mlp(4, 2), batch, rng),
        _blur_check(batch, dims.inducing, rng),
        _elbo_check(batch, dims.inducing, rng),
    ]
    checks += [_pipeline_check(variant, batch, dims, rng) for variant in Variant]
    return checks


def run_gradchecks(checks: list[GradientCheck]) -> list[GradientResult]:
    results = []
    for check in checks:
        result = check.run()
        status = "ok" if result.passed else "FAILED"
        level = logging.INFO if result.passed else logging.ERROR
        logger.log(level, f"{result.name}: max relative error {result.max_rel_err:.3e} (tolerance {result.tolerance:g}) {status}")
        results.append(result)
    return results

