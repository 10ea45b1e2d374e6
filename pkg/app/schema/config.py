"""
Experiment configuration
Every knob of a run, grouped by concern, with defaults. On disk a config is a
flat text file of ``dotted.key = value`` lines; values are YAML scalars or flow
sequences.
"""
import hashlib
import json
from pathlib import Path
from typing import Any, Dict, List, Mapping, Tuple

import yaml
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

from app.core.config import settings
from app.core.constant import BranchMode, PerceiverMode, ShiftPreset, StageSchedule, Supervision
from app.core.exceptions import ConfigError, DataFileError


class _Section(BaseModel):
    model_config = ConfigDict(extra="forbid", validate_assignment=True)


class SceneSpec(_Section):
    image_size: int = 64
    channels: int = 3
    num_classes: int = 3
    min_objects: int = 1
    max_objects: int = 6
    min_object_size: int = 10
    max_object_size: int = 22
    max_overlap_iou: float = 0.3
    n_train_source: int = 2000
    n_train_target: int = 2000
    n_eval_target: int = 500
    n_eval_source: int = 500
    root: str = Field(default_factory=lambda: settings.XDDA_DATA_ROOT)

    @model_validator(mode="after")
    def check_ranges(self):
        if self.image_size < 8:
            raise ValueError("image_size must be >= 8")
        if self.channels not in (1, 3):
            raise ValueError("channels must be 1 or 3")
        if not 1 <= self.min_objects <= self.max_objects:
            raise ValueError("need 1 <= min_objects <= max_objects")
        if not 2 <= self.min_object_size <= self.max_object_size < self.image_size:
            raise ValueError("object sizes must satisfy 2 <= min <= max < image_size")
        if min(self.n_train_source, self.n_train_target, self.n_eval_target, self.n_eval_source) < 1:
            raise ValueError("every split needs at least one scene")
        return self


SHIFT_PRESETS: Dict[ShiftPreset, Dict[str, float]] = {
    ShiftPreset.FOGGY: dict(contrast_scale=0.75, brightness_shift=0.05, haze_strength=0.6,
                            noise_sigma=0.03, palette_rotation=0.2),
    ShiftPreset.SIM2REAL: dict(contrast_scale=0.6, brightness_shift=-0.05, haze_strength=0.1,
                               noise_sigma=0.02, palette_rotation=1.2),
    ShiftPreset.CROSS_CAMERA: dict(contrast_scale=0.85, brightness_shift=0.15, haze_strength=0.15,
                                   noise_sigma=0.08, palette_rotation=0.4),
}


class DomainShiftSpec(_Section):
    preset: ShiftPreset = ShiftPreset.CUSTOM
    contrast_scale: float = 0.7
    brightness_shift: float = 0.05
    haze_strength: float = 0.55
    noise_sigma: float = 0.04
    palette_rotation: float = 0.8

    @field_validator("haze_strength")
    @classmethod
    def haze_in_unit(cls, v: float) -> float:
        if not 0.0 <= v <= 1.0:
            raise ValueError("haze_strength must lie in [0, 1]")
        return v

    @field_validator("noise_sigma")
    @classmethod
    def noise_nonnegative(cls, v: float) -> float:
        if v < 0:
            raise ValueError("noise_sigma must be >= 0")
        return v

    @classmethod
    def identity(cls) -> "DomainShiftSpec":
        return cls(contrast_scale=1.0, brightness_shift=0.0, haze_strength=0.0,
                   noise_sigma=0.0, palette_rotation=0.0)

    def resolved(self) -> "DomainShiftSpec":
        """Knob values with the named preset applied"""
        if self.preset == ShiftPreset.CUSTOM:
            return self
        return self.model_copy(update=SHIFT_PRESETS[self.preset])


class ModelConfig(_Section):
    channels: List[int] = [8, 16, 32]
    anchor_size: float = 16.0
    top_k: int = 32
    pool_grid: int = 2
    d_model: int = 128
    num_heads: int = 16
    d_geo_emb: int = 16
    geo_eps: float = 1e-3
    perceiver_iterations: int = 2
    g_init_scale: float = 1e-3
    zero_init_g: bool = False

    @model_validator(mode="after")
    def check_dims(self):
        if not self.channels:
            raise ValueError("channels must not be empty")
        if self.d_model % self.num_heads != 0:
            raise ValueError("d_model must be divisible by num_heads")
        if self.d_geo_emb % 8 != 0:
            raise ValueError("d_geo_emb must be a multiple of 8")
        if self.perceiver_iterations not in (1, 2):
            raise ValueError("perceiver_iterations must be 1 or 2")
        return self

    @property
    def stride(self) -> int:
        return 2 ** len(self.channels)

    @property
    def feature_dim(self) -> int:
        return self.pool_grid * self.pool_grid * self.channels[-1]

    @property
    def d_head(self) -> int:
        return self.d_model // self.num_heads


class DistillConfig(_Section):
    pseudo_threshold: float = 0.7
    ema_alpha: float = 0.9996
    nms_iou: float = 0.5
    lr: float = 0.01
    momentum: float = 0.9
    weight_decay: float = 5e-4
    grad_clip_norm: float = 0.0
    iters_jdp: int = 1500
    iters_cdd_dtr: int = 2500
    cdd_warmup: int = 400
    eval_every: int = 250
    beta_fda: float = 0.1
    focal_gamma: float = 2.0
    focal_alpha: float = 0.25
    rpn_pos_iou: float = 0.5
    rpn_neg_iou: float = 0.3
    roi_fg_iou: float = 0.5
    smooth_l1_beta: float = 1.0
    add_gt_proposals: bool = True
    branch_mode: BranchMode = BranchMode.DUAL
    perceiver_mode: PerceiverMode = PerceiverMode.ASYM
    use_target_like: bool = True
    use_target: bool = True
    stages: StageSchedule = StageSchedule.JDP_CDD_DTR
    supervision: Supervision = Supervision.ADAPT

    @model_validator(mode="after")
    def check_ranges(self):
        if not 0.0 < self.pseudo_threshold < 1.0:
            raise ValueError("pseudo_threshold must lie in (0, 1)")
        if not 0.0 <= self.ema_alpha <= 1.0:
            raise ValueError("ema_alpha must lie in [0, 1]")
        if not 0.0 <= self.beta_fda <= 0.5:
            raise ValueError("beta_fda must lie in [0, 0.5]")
        if self.grad_clip_norm < 0.0:
            raise ValueError("grad_clip_norm must be non-negative (0 disables clipping)")
        if self.iters_jdp < 1 or self.iters_cdd_dtr < 0 or self.cdd_warmup < 0 or self.eval_every < 1:
            raise ValueError("iteration counts out of range")
        if not self.rpn_neg_iou <= self.rpn_pos_iou:
            raise ValueError("rpn_neg_iou must not exceed rpn_pos_iou")
        return self


class EvalConfig(_Section):
    iou_threshold: float = 0.5
    score_floor: float = 0.05
    max_detections: int = 100
    max_images: int = 0


class AblationConfig(_Section):
    seeds: List[int] = [1, 2, 3]


class ExperimentConfig(_Section):
    seed: int = 1
    output_dir: str = "runs/default"
    data: SceneSpec = Field(default_factory=SceneSpec)
    shift: DomainShiftSpec = Field(default_factory=DomainShiftSpec)
    model: ModelConfig = Field(default_factory=ModelConfig)
    distill: DistillConfig = Field(default_factory=DistillConfig)
    eval: EvalConfig = Field(default_factory=EvalConfig)
    ablation: AblationConfig = Field(default_factory=AblationConfig)


SECTIONS = ("data", "shift", "model", "distill", "eval", "ablation")


def _to_plain(value: Any) -> Any:
    if isinstance(value, (list, tuple)):
        return [_to_plain(v) for v in value]
    return value


def to_flat(config: ExperimentConfig) -> Dict[str, Any]:
    flat: Dict[str, Any] = {}
    dumped = config.model_dump(mode="json")
    for key, value in dumped.items():
        if key in SECTIONS:
            for sub, sub_value in value.items():
                flat[f"{key}.{sub}"] = sub_value
        else:
            flat[key] = value
    return flat


def from_flat(flat: Mapping[str, Any], base: ExperimentConfig = None) -> ExperimentConfig:
    """Build a config from dotted keys on top of ``base`` (defaults if omitted)"""
    nested = (base or ExperimentConfig()).model_dump(mode="json")
    for key, value in flat.items():
        parts = key.split(".")
        if len(parts) == 1 and parts[0] in nested and parts[0] not in SECTIONS:
            nested[parts[0]] = _to_plain(value)
        elif len(parts) == 2 and parts[0] in SECTIONS and parts[1] in nested[parts[0]]:
            nested[parts[0]][parts[1]] = _to_plain(value)
        else:
            raise ConfigError(f"unknown config key '{key}'")
    try:
        return ExperimentConfig.model_validate(nested)
    except ValidationError as e:
        raise ConfigError(f"invalid config: {e}") from e


def _format_value(value: Any) -> str:
    text = yaml.safe_dump(value, default_flow_style=True, sort_keys=False)
    if text.endswith("...\n"):
        text = text[:-4]
    return text.strip()


def dumps_config(config: ExperimentConfig) -> str:
    lines = [f"{key} = {_format_value(value)}" for key, value in to_flat(config).items()]
    return "\n".join(lines) + "\n"


def loads_config(text: str, base: ExperimentConfig = None) -> ExperimentConfig:
    flat: Dict[str, Any] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value'")
        key, value = (part.strip() for part in line.split("=", 1))
        try:
            flat[key] = yaml.safe_load(value) if value else None
        except yaml.YAMLError as e:
            raise ConfigError(f"line {lineno}: cannot parse value for '{key}': {e}") from e
    return from_flat(flat, base)


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    if not path.is_file():
        raise DataFileError(path, "config file not found")
    return loads_config(path.read_text(encoding="utf-8"))


def save_config(config: ExperimentConfig, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(dumps_config(config), encoding="utf-8")
    return path


def config_diff(a: ExperimentConfig, b: ExperimentConfig) -> Dict[str, Tuple[Any, Any]]:
    fa, fb = to_flat(a), to_flat(b)
    return {k: (fa[k], fb[k]) for k in fa if fa[k] != fb[k]}


def config_hash(config: ExperimentConfig) -> str:
    """Hash of everything that shapes the parameter tensors"""
    shaping = {
        "model": config.model.model_dump(mode="json"),
        "image_size": config.data.image_size,
        "channels": config.data.channels,
        "num_classes": config.data.num_classes,
    }
    return hashlib.sha256(json.dumps(shaping, sort_keys=True).encode("utf-8")).hexdigest()[:16]
