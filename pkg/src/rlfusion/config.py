"""Experiment configuration: one JSON document describes a full run.

Every sub-config is a dataclass with defaults; `Config.from_dict` rejects
unknown keys so typos fail loudly, and `to_dict` echoes the fully resolved
configuration (written next to every training run).
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field, fields

from .boxes import CLASS_NAMES
from .detection_head import ClassAnchor, RpnLossWeights
from .errors import ConfigError
from .metrics import EvalConfig
from .pillars import GridConfig


@dataclass
class GridSettings:
    """Shared BEV geometry plus per-modality pillar capacities."""

    x_range: tuple[float, float] = (0.0, 25.6)
    y_range: tuple[float, float] = (-12.8, 12.8)
    z_range: tuple[float, float] = (-1.0, 3.0)
    pillar_size: float = 0.4
    radar_max_pillars: int = 1024
    radar_max_points: int = 8
    lidar_max_pillars: int = 4096
    lidar_max_points: int = 16

    def radar_grid(self) -> GridConfig:
        return GridConfig(self.x_range, self.y_range, self.z_range, self.pillar_size,
                          self.radar_max_pillars, self.radar_max_points)

    def lidar_grid(self) -> GridConfig:
        return GridConfig(self.x_range, self.y_range, self.z_range, self.pillar_size,
                          self.lidar_max_pillars, self.lidar_max_points)


@dataclass
class ModelSettings:
    embed_dim: int = 32
    backbone_channels: tuple[int, int] = (32, 32)
    shape_hidden: int = 16
    attention_softmax: bool = True
    tau: float = 0.1
    alpha: float = 1.0
    score_threshold: float = 0.1
    nms_iou: float = 0.25
    max_detections: int = 100
    dtype: str = "float32"

    def __post_init__(self):
        if not 0.0 < self.tau < 1.0:
            raise ConfigError("tau must lie in (0, 1)")
        if self.alpha < 0.0:
            raise ConfigError("alpha must be >= 0")
        if self.dtype not in ("float32", "float64"):
            raise ConfigError("dtype must be float32 or float64")


@dataclass
class TrainSettings:
    steps: int = 2000
    batch_size: int = 4
    learning_rate: float = 0.01
    momentum: float = 0.9
    grad_clip: float = 10.0
    seed: int = 0
    log_every: int = 25


@dataclass
class AblationSettings:
    """Module toggles; all on is the full model, all off the concat baseline."""

    gate_radar: bool = True
    attend_lidar: bool = True
    shape_fusion: bool = True


@dataclass
class IndicativeMask:
    """Channel switches for the radar doppler/reflectivity triple."""

    v_r: bool = True
    v_a: bool = True
    rcs: bool = True

    def as_vector(self):
        return [1.0 if self.v_r else 0.0, 1.0 if self.v_a else 0.0,
                1.0 if self.rcs else 0.0]


@dataclass
class AnchorSettings:
    car: ClassAnchor = field(default_factory=lambda: ClassAnchor(4.2, 1.8, 1.6, 0.6, 0.45))
    pedestrian: ClassAnchor = field(default_factory=lambda: ClassAnchor(0.6, 0.6, 1.7, 0.5, 0.35))
    cyclist: ClassAnchor = field(default_factory=lambda: ClassAnchor(1.8, 0.6, 1.7, 0.5, 0.35))

    def templates(self) -> dict[str, ClassAnchor]:
        return {name: getattr(self, name) for name in CLASS_NAMES}


@dataclass
class Config:
    grid: GridSettings = field(default_factory=GridSettings)
    model: ModelSettings = field(default_factory=ModelSettings)
    train: TrainSettings = field(default_factory=TrainSettings)
    loss: RpnLossWeights = field(default_factory=RpnLossWeights)
    ablation: AblationSettings = field(default_factory=AblationSettings)
    indicative: IndicativeMask = field(default_factory=IndicativeMask)
    eval: EvalConfig = field(default_factory=EvalConfig)
    anchors: AnchorSettings = field(default_factory=AnchorSettings)

    @property
    def n_classes(self) -> int:
        return len(CLASS_NAMES)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, doc: dict) -> "Config":
        return _build(cls, doc, "config")

    @classmethod
    def load(cls, path: str) -> "Config":
        try:
            with open(path, encoding="utf-8") as f:
                doc = json.load(f)
        except (OSError, json.JSONDecodeError) as e:
            raise ConfigError(f"cannot read config {path}: {e}") from e
        return cls.from_dict(doc)

    def save(self, path: str) -> None:
        with open(path, "w", encoding="utf-8") as f:
            json.dump(self.to_dict(), f, indent=2, sort_keys=True)
            f.write("\n")


def _build(dc_type, doc, where):
    """Recursively build a dataclass from a dict, rejecting unknown keys."""
    if not isinstance(doc, dict):
        raise ConfigError(f"{where}: expected an object")
    known = {f.name: f for f in fields(dc_type)}
    unknown = set(doc) - set(known)
    if unknown:
        raise ConfigError(f"{where}: unknown keys {sorted(unknown)}")
    kwargs = {}
    for name in known:
        if name not in doc:
            continue
        value = doc[name]
        if isinstance(value, dict):
            sub = _DATACLASS_FIELDS.get((dc_type, name))
            kwargs[name] = _build(sub, value, f"{where}.{name}") if sub else value
        elif isinstance(value, list):
            kwargs[name] = tuple(value)
        else:
            kwargs[name] = value
    try:
        return dc_type(**kwargs)
    except (TypeError, ValueError) as e:
        if isinstance(e, ConfigError):
            raise
        raise ConfigError(f"{where}: {e}") from e


# field name -> nested dataclass type (from __future__ annotations the
# declared types are strings, so map them explicitly)
_DATACLASS_FIELDS = {
    (Config, "grid"): GridSettings,
    (Config, "model"): ModelSettings,
    (Config, "train"): TrainSettings,
    (Config, "loss"): RpnLossWeights,
    (Config, "ablation"): AblationSettings,
    (Config, "indicative"): IndicativeMask,
    (Config, "eval"): EvalConfig,
    (Config, "anchors"): AnchorSettings,
    (AnchorSettings, "car"): ClassAnchor,
    (AnchorSettings, "pedestrian"): ClassAnchor,
    (AnchorSettings, "cyclist"): ClassAnchor,
}
