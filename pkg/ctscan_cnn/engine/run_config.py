"""Run configuration: YAML file validated into pydantic models.

Precedence for the handful of overridable fields:
CLI flags > environment (``CTSCAN_DATA_DIR``, ``CTSCAN_OUT_DIR``,
``CTSCAN_SEED``) > config file > defaults. Relative paths resolve against
the directory of the config file.
"""

import hashlib
import json
import os
from pathlib import Path
from typing import Any, Dict, List, Optional, Tuple

import yaml
from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

from ..errors import ConfigError, DataError, ShapeError
from .data import DEFAULT_CLASS_MAP, DEFAULT_RATIOS, PreprocessOptions
from .layers import ModelSpec, build_model_spec, reference_model_spec
from .metrics import MetricsConfig
from .train import TrainConfig

PACKAGED_DEFAULT_CONFIG = Path(__file__).resolve().parent.parent / "data" / "default_config.yaml"

# Fields that do not change results and stay out of the fingerprint.
_NOT_FINGERPRINTED = {"data_root", "output_dir", "workers", "cache"}


class ModelConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    conv_filters: List[int] = Field(default_factory=lambda: [16, 32, 64])
    conv_kernels: List[int] = Field(default_factory=lambda: [3, 3, 5])
    dense_units: List[int] = Field(default_factory=lambda: [260])
    num_classes: int = Field(4, ge=2)
    dtype: str = Field("float32", pattern="^(float32|float64)$")


class RunConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    data_root: Path = Path("dataset")
    class_map: Dict[str, int] = Field(default_factory=lambda: dict(DEFAULT_CLASS_MAP))
    split_ratios: Tuple[float, float, float] = DEFAULT_RATIOS
    preprocess: PreprocessOptions = Field(default_factory=PreprocessOptions)
    model: ModelConfig = Field(default_factory=ModelConfig)
    train: TrainConfig = Field(default_factory=TrainConfig)
    metrics: MetricsConfig = Field(default_factory=MetricsConfig)
    output_dir: Path = Path("runs/default")
    workers: int = Field(1, ge=1)
    cache: bool = False
    log_timing: bool = False

    @model_validator(mode="after")
    def _check(self) -> "RunConfig":
        if any(r < 0 for r in self.split_ratios) or abs(sum(self.split_ratios) - 1.0) > 1e-9:
            raise ValueError(f"split_ratios must be non-negative and sum to 1, got {self.split_ratios}")
        bad = {k: v for k, v in self.class_map.items() if not 0 <= v < self.model.num_classes}
        if bad:
            raise ValueError(f"class_map labels out of range 0..{self.model.num_classes - 1}: {bad}")
        return self

    @property
    def in_channels(self) -> int:
        return 1 if self.preprocess.grayscale else 3

    def model_spec(self) -> ModelSpec:
        m = self.model
        try:
            if m == ModelConfig(dtype=m.dtype) and self.preprocess.size == 64:
                return reference_model_spec(self.in_channels)
            return build_model_spec(
                in_channels=self.in_channels,
                input_size=self.preprocess.size,
                conv_filters=m.conv_filters,
                conv_kernels=m.conv_kernels,
                dense_units=m.dense_units,
                num_classes=m.num_classes,
            )
        except ShapeError as exc:
            raise ConfigError(f"model does not fit the input size: {exc.detail}") from exc

    def check_paths(self) -> None:
        if not self.data_root.is_dir():
            raise DataError(f"data root {self.data_root} does not exist")

    def fingerprint(self) -> str:
        """SHA-256 of the canonical JSON form, without paths and performance knobs."""
        payload = self.model_dump(mode="json", exclude=_NOT_FINGERPRINTED)
        canonical = json.dumps(payload, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canonical.encode()).hexdigest()


def _env_overrides() -> Dict[str, Any]:
    out: Dict[str, Any] = {}
    if os.getenv("CTSCAN_DATA_DIR"):
        out["data_root"] = str(Path(os.environ["CTSCAN_DATA_DIR"]).resolve())
    if os.getenv("CTSCAN_OUT_DIR"):
        out["output_dir"] = str(Path(os.environ["CTSCAN_OUT_DIR"]).resolve())
    if os.getenv("CTSCAN_SEED"):
        try:
            out["seed"] = int(os.environ["CTSCAN_SEED"])
        except ValueError:
            raise ConfigError(f"CTSCAN_SEED must be an integer, got {os.environ['CTSCAN_SEED']!r}")
    return out


def _apply_overrides(raw: Dict[str, Any], overrides: Dict[str, Any]) -> None:
    train_keys = {"seed", "epochs", "batch_size", "learning_rate"}
    for key, value in overrides.items():
        if value is None:
            continue
        if key in train_keys:
            raw.setdefault("train", {})
            if not isinstance(raw["train"], dict):
                raise ConfigError("'train' must be a mapping")
            raw["train"][key] = value
        else:
            raw[key] = value


def load_run_config(path, overrides: Optional[Dict[str, Any]] = None) -> RunConfig:
    """Read, merge overrides into, and validate a YAML run config.

    Path overrides are expected to be absolute already; only paths written
    in the file are resolved against its directory.
    """
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file {path} not found")
    try:
        raw = yaml.safe_load(path.read_text(encoding="utf-8")) or {}
    except yaml.YAMLError as exc:
        raise ConfigError(f"cannot parse {path}: {exc}") from exc
    if not isinstance(raw, dict):
        raise ConfigError(f"{path}: top level must be a mapping")

    _apply_overrides(raw, _env_overrides())
    _apply_overrides(raw, overrides or {})

    try:
        cfg = RunConfig.model_validate(raw)
    except ValidationError as exc:
        problems = "; ".join(
            f"{'.'.join(str(p) for p in err['loc']) or '<root>'}: {err['msg']}"
            for err in exc.errors()
        )
        raise ConfigError(f"invalid config {path}: {problems}") from exc

    base = path.resolve().parent
    updates = {}
    for field_name in ("data_root", "output_dir"):
        value = getattr(cfg, field_name)
        if not value.is_absolute():
            updates[field_name] = base / value
    return cfg.model_copy(update=updates)
