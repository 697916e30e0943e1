"""
Binary checkpoint format.

Layout (little endian)::

    b"FBD1" | sha256(config) 32 bytes | u64 n | n bytes of UTF-8 JSON metadata
    | for each block in BLOCKS: u64 count | count float64 values

Blocks that do not apply to the variant are written with a zero count.
"""

from __future__ import annotations

import json
import logging
import struct
from pathlib import Path
from typing import Any

import numpy as np

from .backbone import BackboneKind, KindName, ModelParams
from .exception import CheckpointFormatError, InvalidConfig
from .gp_blur import GPParams
from .pipeline import PipelineParams, Variant
from .trainer import AdamState, Checkpoint, EpochRecord, TrainConfig

__all__ = ["BLOCKS", "MAGIC", "load_checkpoint", "save_checkpoint"]

logger = logging.getLogger(__name__)

MAGIC = b"FBD1"
BLOCKS = ("forecaster", "denoiser", "gp", "sigma_iso", "adam_m", "adam_v")
_U64 = struct.Struct("<Q")
_F64 = np.dtype("<f8")


def _model_meta(params: ModelParams | None) -> dict[str, Any] | None:
    if params is None:
        return None
    return {
        "kind": {"kind": params.kind.name.value, "hidden": params.kind.hidden, "layers": params.kind.layers},
        "shapes": [[name, list(dims)] for name, dims in params.shapes],
        "in_shape": list(params.in_shape),
        "out_shape": list(params.out_shape),
    }


def _model_from_meta(meta: dict[str, Any] | None, values: np.ndarray) -> ModelParams | None:
    if meta is None:
        return None
    kind = meta["kind"]
    return ModelParams(
        values=values,
        shapes=tuple((name, tuple(dims)) for name, dims in meta["shapes"]),
        kind=BackboneKind(name=KindName(kind["kind"]), hidden=kind["hidden"], layers=kind["layers"]),
        in_shape=(meta["in_shape"][0], meta["in_shape"][1]),
        out_shape=(meta["out_shape"][0], meta["out_shape"][1]),
    )


def _gp_block(gp: GPParams | None) -> np.ndarray:
    # raw fields rather than the log-diagonal optimizer layout keep the round trip bit exact
    if gp is None:
        return np.zeros(0)
    head = np.array([gp.log_lengthscale, gp.log_amplitude, gp.log_noise])
    return np.concatenate([head, gp.inducing, gp.var_mean, gp.var_chol.reshape(-1)])


def _gp_from_block(values: np.ndarray, m: int | None) -> GPParams | None:
    if m is None:
        return None
    if values.shape != (3 + 2 * m + m * m,):
        raise CheckpointFormatError(f"GP block has {values.shape[0]} values, expected {3 + 2 * m + m * m}")
    return GPParams(
        log_lengthscale=float(values[0]),
        log_amplitude=float(values[1]),
        log_noise=float(values[2]),
        inducing=values[3 : 3 + m].copy(),
        var_mean=values[3 + m : 3 + 2 * m].copy(),
        var_chol=values[3 + 2 * m :].reshape(m, m).copy(),
    )


def save_checkpoint(checkpoint: Checkpoint, path: Path) -> Path:
    params = checkpoint.params
    meta = {
        "version": 1,
        "variant": params.variant.value,
        "config": checkpoint.config.to_dict(),
        "forecaster": _model_meta(params.forecaster),
        "denoiser": _model_meta(params.denoiser),
        "gp_m": params.gp.m if params.gp is not None else None,
        "adam_step": checkpoint.optimizer.step,
        "best_epoch": checkpoint.best_epoch,
        "history": [
            {
                "epoch": r.epoch,
                "stage": r.stage,
                "train_loss": r.train_loss,
                "train_mse": r.train_mse,
                "validation_mse": r.validation_mse,
            }
            for r in checkpoint.history
        ],
    }
    encoded = json.dumps(meta, sort_keys=True, separators=(",", ":")).encode("utf-8")
    blocks = [
        params.forecaster.values,
        params.denoiser.values if params.denoiser is not None else np.zeros(0),
        _gp_block(params.gp),
        np.array([params.sigma_iso]) if params.sigma_iso is not None else np.zeros(0),
        checkpoint.optimizer.m,
        checkpoint.optimizer.v,
    ]

    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("wb") as stream:
        stream.write(MAGIC)
        stream.write(checkpoint.config_hash)
        stream.write(_U64.pack(len(encoded)))
        stream.write(encoded)
        for block in blocks:
            stream.write(_U64.pack(block.size))
            stream.write(np.ascontiguousarray(block, dtype=_F64).tobytes())
    logger.info(f"Checkpoint written to {path}")
    return path


class _Reader:
    def __init__(self, payload: bytes, path: Path) -> None:
        self.payload = payload
        self.offset = 0
        self.path = path

    def take(self, count: int) -> bytes:
        if self.offset + count > len(self.payload):
            raise CheckpointFormatError(f"{self.path}: truncated at byte {self.offset}")
        chunk = self.payload[self.offset : self.offset + count]
        self.offset += count
        return chunk

    def u64(self) -> int:
        return int(_U64.unpack(self.take(_U64.size))[0])

    def floats(self) -> np.ndarray:
        count = self.u64()
        return np.frombuffer(self.take(count * _F64.itemsize), dtype=_F64).astype(np.float64)


def load_checkpoint(path: Path) -> Checkpoint:
    payload = path.read_bytes()
    reader = _Reader(payload, path)
    if reader.take(len(MAGIC)) != MAGIC:
        raise CheckpointFormatError(f"{path}: not a checkpoint (bad magic)")
    digest = reader.take(32)
    try:
        meta = json.loads(reader.take(reader.u64()).decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as error:
        raise CheckpointFormatError(f"{path}: unreadable metadata") from error
    if not isinstance(meta, dict):
        raise CheckpointFormatError(f"{path}: metadata is not an object")
    if meta.get("version") != 1:
        raise CheckpointFormatError(f"{path}: unsupported version {meta.get('version')}")

    try:
        return _decode(meta, digest, reader, path)
    except (InvalidConfig, KeyError, IndexError, TypeError, ValueError) as error:
        raise CheckpointFormatError(f"{path}: malformed metadata ({type(error).__name__}: {error})") from error


def _decode(meta: dict[str, Any], digest: bytes, reader: _Reader, path: Path) -> Checkpoint:
    config = TrainConfig.from_dict(meta["config"])
    if config.digest() != digest:
        raise CheckpointFormatError(f"{path}: config hash does not match the stored config")
    blocks = {name: reader.floats() for name in BLOCKS}
    if reader.offset != len(reader.payload):
        raise CheckpointFormatError(f"{path}: {len(reader.payload) - reader.offset} trailing bytes")

    forecaster = _model_from_meta(meta["forecaster"], blocks["forecaster"])
    if forecaster is None:
        raise CheckpointFormatError(f"{path}: missing forecaster")
    params = PipelineParams(
        variant=Variant(meta["variant"]),
        forecaster=forecaster,
        denoiser=_model_from_meta(meta["denoiser"], blocks["denoiser"]),
        gp=_gp_from_block(blocks["gp"], meta["gp_m"]),
        sigma_iso=float(blocks["sigma_iso"][0]) if blocks["sigma_iso"].size else None,
    )
    history = tuple(
        EpochRecord(
            epoch=r["epoch"],
            stage=r["stage"],
            train_loss=r["train_loss"],
            train_mse=r["train_mse"],
            validation_mse=r["validation_mse"],
        )
        for r in meta["history"]
    )
    return Checkpoint(
        params=params,
        optimizer=AdamState(m=blocks["adam_m"], v=blocks["adam_v"], step=meta["adam_step"]),
        config=config,
        history=history,
        best_epoch=meta["best_epoch"],
    )
