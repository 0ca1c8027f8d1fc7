"""Configuration dataclasses and the YAML run-config loader."""
from __future__ import annotations

import copy
from dataclasses import asdict, dataclass, field, fields, is_dataclass
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple

import yaml


class ConfigError(ValueError):
    """Raised when a configuration is internally inconsistent."""


@dataclass
class SyntheticTerrainConfig:
    size: Tuple[int, int] = (128, 128)
    seed: int = 0
    scarp_count: Tuple[int, int] = (1, 2)
    scarp_depth_m: Tuple[float, float] = (20.0, 30.0)
    noise_octaves: int = 4
    vegetation_texture_strength: float = 0.5
    radius_px: Tuple[float, float] = (0.2, 0.28)  # fraction of min(H, W)
    relief_m: float = 60.0
    regional_slope_m: float = 40.0
    resolution_m: float = 2.0
    native_dem_resolution_m: Optional[float] = None  # emit a coarse DEM when set
    min_candidates: int = 16  # landslide candidates required per scene with scarps

    def validate(self) -> None:
        h, w = self.size
        if h <= 0 or w <= 0 or h % 8 or w % 8:
            raise ConfigError(f"size must be positive multiples of 8, got {self.size}")
        lo, hi = self.scarp_count
        if lo < 0 or hi < lo:
            raise ConfigError(f"bad scarp_count range {self.scarp_count}")
        dlo, dhi = self.scarp_depth_m
        if dlo <= 0 or dhi < dlo:
            raise ConfigError(f"bad scarp_depth_m range {self.scarp_depth_m}")
        if not 0.0 <= self.vegetation_texture_strength <= 1.0:
            raise ConfigError("vegetation_texture_strength must lie in [0, 1]")
        if self.noise_octaves < 1:
            raise ConfigError("noise_octaves must be >= 1")
        rlo, rhi = self.radius_px
        if rlo <= 0 or rhi < rlo:
            raise ConfigError(f"bad radius_px range {self.radius_px}")
        # the horseshoe needs room for a rim plus at least two hyper-pixels across
        if hi > 0 and rlo * min(h, w) < 12:
            raise ConfigError(
                f"scene {self.size} too small to fit a scarp of radius {rlo * min(h, w):.1f} px"
            )


@dataclass
class NetworkConfig:
    input_size: Tuple[int, int] = (128, 128)
    in_channels_hrsi: int = 3
    in_channels_dem: int = 1
    hfe_channels: Tuple[int, int] = (32, 64)
    hfe_out_channels: int = 64
    backbone_depth: str = "small"  # small | resnet101
    backbone_widths: Optional[Tuple[int, int, int, int]] = None
    aspp_rates: Tuple[int, ...] = (6, 12, 18)
    aspp_channels: int = 256
    ca_reduction: int = 32
    se_reduction: int = 16
    encoder_out_channels: int = 256
    projection_dim: int = 128
    decoder_channels: int = 64
    num_classes: int = 2

    def validate(self) -> None:
        h, w = self.input_size
        if h % 8 or w % 8:
            raise ConfigError(f"input_size must be multiples of 8, got {self.input_size}")
        if self.backbone_depth not in ("small", "resnet101"):
            raise ConfigError(f"unknown backbone_depth {self.backbone_depth!r}")
        if self.num_classes != 2:
            raise ConfigError("only binary segmentation is supported")
        if not self.aspp_rates:
            raise ConfigError("aspp_rates must not be empty")


@dataclass
class ContrastiveConfig:
    K: int = 16
    M: int = 1000
    L: int = 4096
    D: int = 128
    tau: float = 0.1
    momentum: float = 0.999
    hard_fraction: float = 0.10
    stride: int = 8
    min_pixels: int = 7
    max_pixels: int = 57

    def validate(self) -> None:
        if self.K < 1 or self.M < 1:
            raise ConfigError("K and M must be positive")
        if self.L < self.M:
            raise ConfigError(f"queue length L={self.L} must be >= M={self.M}")
        if self.K > self.L:
            raise ConfigError(f"K={self.K} exceeds queue length L={self.L}")
        if self.tau <= 0:
            raise ConfigError("tau must be positive")
        if not 0.0 <= self.momentum < 1.0:
            raise ConfigError("momentum must lie in [0, 1)")
        if not 0.0 <= self.hard_fraction <= 1.0:
            raise ConfigError("hard_fraction must lie in [0, 1]")
        if not 0 <= self.min_pixels <= self.max_pixels < self.stride ** 2:
            raise ConfigError("need min_pixels <= max_pixels < stride**2")


@dataclass
class LossConfig:
    alpha: float = 1.0
    beta: float = 0.1

    def __post_init__(self) -> None:
        self.validate()

    def validate(self) -> None:
        if not self.alpha > 0:
            raise ConfigError(f"alpha must be > 0, got {self.alpha}")
        if not self.beta >= 0:
            raise ConfigError(f"beta must be >= 0, got {self.beta}")


@dataclass
class Hyperparameters:
    batch_size: int = 2
    epochs: int = 100
    initial_lr: float = 0.007
    weight_decay: float = 0.007
    sgd_momentum: float = 0.9
    poly_power: float = 0.9
    seed: int = 0
    augment: bool = True
    equalize: bool = True

    def validate(self) -> None:
        if self.batch_size < 1 or self.epochs < 1:
            raise ConfigError("batch_size and epochs must be positive")
        if self.initial_lr < 0 or self.weight_decay < 0 or self.sgd_momentum < 0:
            raise ConfigError("learning rate, weight decay and momentum must be non-negative")
        if not self.poly_power > 0:
            raise ConfigError("poly_power must be > 0")


@dataclass
class RunConfig:
    dataset_root: str = "data/synthetic"
    output_dir: str = "runs/default"
    device: str = "cpu"
    precision: int = 32
    synthetic_count: int = 40
    dem_interpolation: str = "kriging"  # kriging | bilinear
    folds: int = 5
    split_ratio: Tuple[int, int, int] = (6, 2, 2)
    synthetic: SyntheticTerrainConfig = field(default_factory=SyntheticTerrainConfig)
    network: NetworkConfig = field(default_factory=NetworkConfig)
    contrastive: ContrastiveConfig = field(default_factory=ContrastiveConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    train: Hyperparameters = field(default_factory=Hyperparameters)

    def validate(self) -> None:
        if self.precision not in (32, 64):
            raise ConfigError(f"precision must be 32 or 64, got {self.precision}")
        if self.dem_interpolation not in ("kriging", "bilinear"):
            raise ConfigError(f"unknown dem_interpolation {self.dem_interpolation!r}")
        for section in (self.synthetic, self.network, self.contrastive, self.loss, self.train):
            section.validate()
        if self.contrastive.D != self.network.projection_dim:
            raise ConfigError(
                f"contrastive.D={self.contrastive.D} does not match "
                f"network.projection_dim={self.network.projection_dim}"
            )


def desk_config(**overrides: Any) -> RunConfig:
    """A CPU-sized configuration used by the tests and the acceptance suite."""
    cfg = RunConfig(
        network=NetworkConfig(
            hfe_channels=(8, 16),
            hfe_out_channels=16,
            backbone_depth="small",
            aspp_channels=32,
            ca_reduction=4,
            se_reduction=4,
            encoder_out_channels=64,
            projection_dim=32,
            decoder_channels=16,
        ),
        contrastive=ContrastiveConfig(K=16, M=64, L=128, D=32),
        train=Hyperparameters(epochs=200, augment=False),
    )
    return apply_overrides(cfg, overrides) if overrides else cfg


def to_dict(cfg: Any) -> Dict[str, Any]:
    def _plain(v: Any) -> Any:
        if isinstance(v, tuple):
            return [_plain(x) for x in v]
        if isinstance(v, dict):
            return {k: _plain(x) for k, x in v.items()}
        return v

    return _plain(asdict(cfg))


def _coerce(cls: type, data: Dict[str, Any]) -> Any:
    kwargs = {}
    known = {f.name: f for f in fields(cls)}
    for key, value in data.items():
        if key not in known:
            raise ConfigError(f"unknown key {key!r} in section {cls.__name__}")
        default = getattr(cls(), key) if key not in _NESTED.get(cls, {}) else None
        if key in _NESTED.get(cls, {}):
            kwargs[key] = _coerce(_NESTED[cls][key], value or {})
        elif isinstance(default, tuple) and isinstance(value, (list, tuple)):
            kwargs[key] = tuple(value)
        else:
            kwargs[key] = value
    return cls(**kwargs)


_NESTED = {
    RunConfig: {
        "synthetic": SyntheticTerrainConfig,
        "network": NetworkConfig,
        "contrastive": ContrastiveConfig,
        "loss": LossConfig,
        "train": Hyperparameters,
    }
}


def from_dict(data: Dict[str, Any]) -> RunConfig:
    try:
        cfg = _coerce(RunConfig, data or {})
    except TypeError as exc:
        raise ConfigError(str(exc)) from exc
    return cfg


def _parse_scalar(text: str) -> Any:
    return yaml.safe_load(text)


def apply_overrides(cfg: RunConfig, overrides: Dict[str, Any]) -> RunConfig:
    """Return a copy of ``cfg`` with dotted-key overrides applied.

    ``{"loss.beta": 0, "train.epochs": 5}`` sets nested fields; string
    values are parsed as YAML scalars so ``"0.1"`` becomes a float.
    """
    data = to_dict(cfg)
    for key, value in overrides.items():
        if isinstance(value, str):
            value = _parse_scalar(value)
        node = data
        parts = key.split(".")
        for part in parts[:-1]:
            if part not in node or not isinstance(node[part], dict):
                raise ConfigError(f"unknown config section {part!r} in {key!r}")
            node = node[part]
        if parts[-1] not in node:
            raise ConfigError(f"unknown config key {key!r}")
        node[parts[-1]] = value
    return from_dict(data)


def load_config(path: Optional[str | Path] = None, overrides: Optional[Dict[str, Any]] = None,
                base: Optional[RunConfig] = None) -> RunConfig:
    cfg = copy.deepcopy(base) if base is not None else RunConfig()
    if path is not None:
        text = Path(path).read_text()
        try:
            data = yaml.safe_load(text) or {}
        except yaml.YAMLError as exc:
            raise ConfigError(f"cannot parse {path}: {exc}") from exc
        if not isinstance(data, dict):
            raise ConfigError(f"{path} must hold a mapping at top level")
        flat = _flatten(data)
        cfg = apply_overrides(cfg, flat)
    if overrides:
        cfg = apply_overrides(cfg, overrides)
    cfg.validate()
    return cfg


def _flatten(data: Dict[str, Any], prefix: str = "") -> Dict[str, Any]:
    out: Dict[str, Any] = {}
    for key, value in data.items():
        name = f"{prefix}{key}"
        if isinstance(value, dict):
            out.update(_flatten(value, name + "."))
        else:
            out[name] = value
    return out


def dump_config(cfg: RunConfig, path: str | Path) -> None:
    Path(path).write_text(yaml.safe_dump(to_dict(cfg), sort_keys=False))
