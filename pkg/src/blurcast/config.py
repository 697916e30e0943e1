"""
Experiment configuration loaded from YAML.

Missing keys take defaults that follow the standard benchmark protocol; unknown
keys are rejected.
"""

from __future__ import annotations

import logging
from collections.abc import Callable, Mapping
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Any

import yaml

from .backbone import HIDDEN_SEARCH_SPACE, LAYER_SEARCH_SPACE, BackboneKind, KindName
from .data import SynthConfig
from .exception import InvalidConfig
from .pipeline import Variant
from .trainer import WARMUP_SEARCH_SPACE, GPConfig, TrainConfig

__all__ = [
    "BackboneConfig",
    "DatasetConfig",
    "ExperimentConfig",
    "OutputConfig",
    "SearchConfig",
    "TrainingConfig",
    "WindowConfig",
    "dump_config",
    "load_config",
    "save_config",
]

logger = logging.getLogger(__name__)


@dataclass(frozen=True, kw_only=True, slots=True)
class DatasetConfig:
    name: str = "synthetic"
    csv: Path | None = None
    target_cols: tuple[str, ...] = ("y",)
    feature_cols: tuple[str, ...] = ()
    time_col: str | None = None
    time_periods: tuple[float, ...] = ()
    synth: SynthConfig = field(default_factory=SynthConfig)


@dataclass(frozen=True, kw_only=True, slots=True)
class WindowConfig:
    kappa: int = 192
    horizons: tuple[int, ...] = (24, 48, 72, 96)
    stride: int = 1
    fractions: tuple[float, float, float] = (0.8, 0.1, 0.1)


@dataclass(frozen=True, kw_only=True, slots=True)
class BackboneConfig:
    kind: KindName = KindName.LINEAR
    hidden: int = 16
    layers: int = 1

    def build(self) -> BackboneKind:
        return BackboneKind(name=self.kind, hidden=self.hidden, layers=self.layers)


@dataclass(frozen=True, kw_only=True, slots=True)
class TrainingConfig:
    lam: float = 0.001
    batch_size: int = 256
    epochs: int = 50
    warmup_steps: int = 1000
    base_scale: float = 1.0
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    elbo_target: str = "forecast"
    elbo_sign: str = "maximize"
    selection: str = "best"
    denoiser_init: str = "glorot"
    iso_init: float = 0.05


@dataclass(frozen=True, kw_only=True, slots=True)
class SearchConfig:
    hidden: tuple[int, ...] = HIDDEN_SEARCH_SPACE
    layers: tuple[int, ...] = LAYER_SEARCH_SPACE
    warmups: tuple[int, ...] = WARMUP_SEARCH_SPACE


@dataclass(frozen=True, kw_only=True, slots=True)
class OutputConfig:
    dir: Path = Path("results")
    workers: int = 1


@dataclass(frozen=True, kw_only=True, slots=True)
class ExperimentConfig:
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    window: WindowConfig = field(default_factory=WindowConfig)
    variants: tuple[Variant, ...] = (Variant.DG,)
    seeds: tuple[int, ...] = (0,)
    backbone: BackboneConfig = field(default_factory=BackboneConfig)
    gp: GPConfig = field(default_factory=GPConfig)
    training: TrainingConfig = field(default_factory=TrainingConfig)
    search: SearchConfig = field(default_factory=SearchConfig)
    output: OutputConfig = field(default_factory=OutputConfig)

    def validate(self) -> None:
        if not self.window.horizons:
            raise InvalidConfig("window.horizons must list at least one horizon")
        if not self.seeds:
            raise InvalidConfig("seeds must list at least one seed")
        if not self.variants:
            raise InvalidConfig("variants must list at least one variant")
        if self.window.kappa < 1 or min(self.window.horizons) < 1:
            raise InvalidConfig("window.kappa and every horizon must be positive")
        if self.output.workers < 1:
            raise InvalidConfig(f"output.workers {self.output.workers} must be at least 1")
        if self.dataset.csv is not None:
            if not self.dataset.csv.is_file():
                raise InvalidConfig(f"dataset.csv `{self.dataset.csv}` does not exist")
        else:
            self.dataset.synth.validate(min_length=self.window.kappa + max(self.window.horizons) + 1)
        # TrainConfig carries its own range checks
        self.train_config(self.variants[0], self.seeds[0])

    def train_config(self, variant: Variant, seed: int) -> TrainConfig:
        return TrainConfig(
            variant=variant,
            backbone=self.backbone.build(),
            gp=self.gp,
            seed=seed,
            **asdict(self.training),  # type: ignore[arg-type]
        )

    def to_dict(self) -> dict[str, Any]:
        data = asdict(self)
        data["dataset"]["csv"] = str(self.dataset.csv) if self.dataset.csv is not None else None
        data["variants"] = [v.value for v in self.variants]
        data["backbone"]["kind"] = self.backbone.kind.value
        data["training"]["lambda"] = data["training"].pop("lam")
        data["output"]["dir"] = str(self.output.dir)
        return _plain(data)

    @classmethod
    def from_dict(cls, data: Mapping[str, Any], *, base: Path | None = None) -> ExperimentConfig:
        data = dict(data or {})
        _reject_unknown(data, {f.name for f in fields(cls)}, "")

        dataset = _mapping(data.get("dataset"), "dataset")
        if "synth" in dataset:
            dataset["synth"] = _section(SynthConfig, dataset["synth"], "dataset.synth")
        if dataset.get("csv") is not None:
            csv = Path(dataset["csv"])
            dataset["csv"] = csv if base is None or csv.is_absolute() else base / csv
        training = _mapping(data.get("training"), "training")
        if "lambda" in training:
            training["lam"] = training.pop("lambda")

        return cls(
            dataset=_section(
                DatasetConfig,
                dataset,
                "dataset",
                target_cols=tuple,
                feature_cols=tuple,
                time_periods=lambda v: tuple(float(p) for p in v),
            ),
            window=_section(
                WindowConfig, data.get("window"), "window", horizons=lambda v: tuple(int(h) for h in v), fractions=tuple
            ),
            variants=tuple(Variant.parse(str(v)) for v in data.get("variants", [Variant.DG.value])),
            seeds=tuple(int(s) for s in data.get("seeds", [0])),
            backbone=_section(BackboneConfig, data.get("backbone"), "backbone", kind=_kind),
            gp=_section(GPConfig, data.get("gp"), "gp"),
            training=_section(TrainingConfig, training, "training"),
            search=_section(SearchConfig, data.get("search"), "search", hidden=tuple, layers=tuple, warmups=tuple),
            output=_section(OutputConfig, data.get("output"), "output", dir=Path),
        )


def _kind(value: Any) -> KindName:
    try:
        return KindName(str(value).lower())
    except ValueError as error:
        raise InvalidConfig(f"unknown backbone kind `{value}`") from error


def _reject_unknown(data: Mapping[str, Any], known: set[str], section: str) -> None:
    for key in data:
        if key not in known:
            raise InvalidConfig(f"unknown configuration key `{section}{key}`")


def _mapping(data: Any, section: str) -> dict[str, Any]:
    if data is None:
        return {}
    if not isinstance(data, Mapping):
        raise InvalidConfig(f"section `{section}` must be a mapping")
    return dict(data)


def _section[T](cls: type[T], data: Any, section: str, **convert: Callable[[Any], Any]) -> T:
    data = _mapping(data, section)
    _reject_unknown(data, {f.name for f in fields(cls)}, f"{section}.")  # type: ignore[arg-type]
    values = {key: convert[key](value) if key in convert else value for key, value in data.items()}
    try:
        return cls(**values)
    except TypeError as error:
        raise InvalidConfig(f"section `{section}`: {error}") from error


def _plain(value: Any) -> Any:
    if isinstance(value, dict):
        return {key: _plain(item) for key, item in value.items()}
    if isinstance(value, list | tuple):
        return [_plain(item) for item in value]
    return value


def dump_config(config: ExperimentConfig) -> str:
    return yaml.safe_dump(config.to_dict(), sort_keys=False)


def save_config(config: ExperimentConfig, path: Path) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(dump_config(config), encoding="utf-8")
    return path


def load_config(path: Path | None) -> ExperimentConfig:
    """Load and validate a YAML experiment file; ``None`` gives the defaults."""
    if path is None:
        config = ExperimentConfig()
    else:
        if not path.is_file():
            raise InvalidConfig(f"config file `{path}` does not exist")
        try:
            data = yaml.safe_load(path.read_text(encoding="utf-8"))
        except yaml.YAMLError as error:
            raise InvalidConfig(f"`{path}` is not valid YAML: {error}") from error
        if data is not None and not isinstance(data, dict):
            raise InvalidConfig(f"`{path}` must contain a mapping at the top level")
        config = ExperimentConfig.from_dict(data or {}, base=path.parent)
    config.validate()
    logger.debug(f"Loaded configuration from {path or 'defaults'}")
    return config
