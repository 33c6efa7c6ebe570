"""Run configuration: built-in defaults, a JSON config file, then command-line overrides."""

from __future__ import annotations

import dataclasses
import json
import os
from dataclasses import dataclass, fields
from pathlib import Path
from typing import Any, Mapping

from .model import WINDOW_SETS, ModelConfig
from .preprocess import PreprocessConfig
from .training import TrainConfig


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class RunConfig:
    """Flat view of every tunable; each field's default is the documented value.

    Preprocessing
      center_crop: (w, h) of the initial center crop, padded with air
      fixed_crop: (w, h) of the fallback crop
      lung_threshold_hu: HU below which a pixel counts as lung candidate
      bbox_margin_px: margin added around the two-lung bounding box
      min_box_fraction: smaller lung boxes (relative to the crop) fall back
      input_size: side of the square model input
    Model
      mode: window set, one of VWL, DWL, TWL, MWL
      stage_channels, blocks_per_stage, stage_dilations: backbone layout
      stem_channels: stem width, 0 for the first stage width
      cbam_reduction, spatial_kernel, use_cbam: attention gates
    Training
      epochs, batch_size, lr, seed, balance_classes
      bn_recalibration: slices used to refresh batch-norm statistics after
        each epoch, 0 to keep the momentum estimates
    Execution
      jobs: worker threads for slice loading and per-patient inference
    """

    center_crop: tuple[int, int] = (400, 400)
    fixed_crop: tuple[int, int] = (300, 180)
    lung_threshold_hu: float = -400.0
    bbox_margin_px: int = 10
    min_box_fraction: float = 0.05
    input_size: int = 224

    mode: str = "DWL"
    stage_channels: tuple[int, ...] = (16, 32, 64, 128)
    blocks_per_stage: tuple[int, ...] = (1, 1, 1, 1)
    stage_dilations: tuple[int, ...] = (1, 1, 2, 4)
    stem_channels: int = 0
    cbam_reduction: int = 8
    spatial_kernel: int = 7
    use_cbam: bool = True

    epochs: int = 10
    batch_size: int = 16
    lr: float = 1e-3
    seed: int = 0
    balance_classes: bool = False
    bn_recalibration: int = 128

    jobs: int = 1

    def __post_init__(self):
        if self.mode.upper() not in WINDOW_SETS:
            raise ConfigError(f"mode must be one of {sorted(WINDOW_SETS)}, got {self.mode!r}")
        object.__setattr__(self, "mode", self.mode.upper())
        for name, lo in (("epochs", 1), ("batch_size", 2), ("jobs", 1), ("input_size", 8), ("bn_recalibration", 0)):
            if getattr(self, name) < lo:
                raise ConfigError(f"{name} must be >= {lo}")
        if self.lr <= 0:
            raise ConfigError("lr must be positive")
        try:
            self.model_config()
            self.preprocess_config()
        except ValueError as exc:
            raise ConfigError(str(exc)) from None

    # ------------------------------------------------------------------

    @classmethod
    def keys(cls) -> tuple[str, ...]:
        return tuple(f.name for f in fields(cls))

    @classmethod
    def from_mapping(cls, values: Mapping[str, Any], base: "RunConfig | None" = None) -> "RunConfig":
        base = base or cls()
        unknown = sorted(set(values) - set(cls.keys()))
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
        merged = dataclasses.asdict(base)
        for key, raw in values.items():
            merged[key] = _coerce(key, raw, merged[key])
        return cls(**merged)

    @classmethod
    def load(cls, path: str | os.PathLike | None = None, overrides: Mapping[str, Any] | None = None) -> "RunConfig":
        """Defaults, then the JSON object in ``path``, then ``overrides``."""
        cfg = cls()
        if path is not None:
            try:
                data = json.loads(Path(path).read_text())
            except OSError as exc:
                raise ConfigError(f"cannot read config {path}: {exc}") from None
            except json.JSONDecodeError as exc:
                raise ConfigError(f"config {path} is not valid JSON: {exc}") from None
            if not isinstance(data, dict):
                raise ConfigError("config file must hold a JSON object")
            cfg = cls.from_mapping(data, cfg)
        if overrides:
            cfg = cls.from_mapping(overrides, cfg)
        return cfg

    def to_dict(self) -> dict:
        return {k: list(v) if isinstance(v, tuple) else v for k, v in dataclasses.asdict(self).items()}

    def dump(self, path: str | os.PathLike) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2) + "\n")

    # ------------------------------------------------------------------

    def model_config(self) -> ModelConfig:
        return ModelConfig(
            stage_channels=self.stage_channels,
            blocks_per_stage=self.blocks_per_stage,
            stage_dilations=self.stage_dilations,
            cbam_reduction=self.cbam_reduction,
            spatial_kernel=self.spatial_kernel,
            input_size=self.input_size,
            stem_channels=self.stem_channels,
            use_cbam=self.use_cbam,
        )

    def preprocess_config(self) -> PreprocessConfig:
        return PreprocessConfig(
            center_crop_size=self.center_crop,
            fixed_crop_size=self.fixed_crop,
            lung_threshold_hu=self.lung_threshold_hu,
            bbox_margin_px=self.bbox_margin_px,
            min_box_fraction=self.min_box_fraction,
            model_input_size=(self.input_size, self.input_size),
        )

    def train_config(self) -> TrainConfig:
        return TrainConfig(
            epochs=self.epochs,
            batch_size=self.batch_size,
            lr=self.lr,
            seed=self.seed,
            balance_classes=self.balance_classes,
            bn_recalibration=self.bn_recalibration,
        )


def _coerce(key: str, raw: Any, current: Any) -> Any:
    """Convert a file or command-line value to the type of the current value."""
    try:
        if isinstance(current, bool):
            if isinstance(raw, bool):
                return raw
            text = str(raw).strip().lower()
            if text in ("1", "true", "yes", "on"):
                return True
            if text in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if isinstance(current, tuple):
            items = raw.replace("x", ",").split(",") if isinstance(raw, str) else list(raw)
            return tuple(int(v) for v in items)
        if isinstance(current, int):
            if isinstance(raw, float) and not raw.is_integer():
                raise ValueError(raw)
            return int(raw)
        if isinstance(current, float):
            return float(raw)
        return str(raw)
    except (TypeError, ValueError):
        raise ConfigError(f"bad value for {key}: {raw!r}") from None
