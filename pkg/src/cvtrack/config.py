"""Run configuration: defaults, JSON files, and dotted-key overrides.

Precedence is defaults < config file < --set flags, and every subcommand
echoes the effective config into its output directory.
"""

from __future__ import annotations

import dataclasses
import json
import os
from dataclasses import dataclass, field

from .errors import ConfigError
from .scene import SceneConfig


@dataclass
class ModelConfig:
    d_e: int = 32
    d_tok: int = 16
    num_slots: int = 20  # detection queries per view
    num_tracks: int = 20  # persistent track queries
    num_views: int = 3  # fixed: cross-attention weights are per view
    det_layers: int = 2
    track_layers: int = 2
    heads: int = 4
    ffn_dim: int = 64
    dropout: float = 0.0
    cls_weight: float = 1.0
    iou_weight: float = 1.0
    giou_weight: float = 1.0
    l1_weight: float = 0.0  # optional extra box term, off by default

    @classmethod
    def full_scale(cls, num_views: int = 3) -> "ModelConfig":
        """The published-scale preset: 256-d embeddings, 8 heads, 2048-d
        feed-forward, 6 decoder layers, 20 queries of each kind."""
        return cls(
            d_e=256,
            num_slots=20,
            num_tracks=20,
            num_views=num_views,
            det_layers=6,
            track_layers=6,
            heads=8,
            ffn_dim=2048,
        )

    def validate(self):
        if self.d_e % self.heads:
            raise ConfigError(f"d_e={self.d_e} not divisible by heads={self.heads}")
        if min(self.d_e, self.d_tok, self.num_slots, self.num_tracks, self.num_views) < 1:
            raise ConfigError("model dimensions must be positive")


@dataclass
class LossWeights:
    det: float = 1.0
    det_aux: float = 1.0
    across_cams: float = 1.0
    across_frames: float = 1.0
    track_iou: float = 1.0
    track_giou: float = 1.0


@dataclass
class OptimConfig:
    lr: float = 1e-4
    decay_factor: float = 0.3
    decay_every_epochs: int = 20
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


@dataclass
class ProtocolConfig:
    stage1_epochs: int = 30
    stage2_epochs: int = 100
    clip_len: int = 4
    segment_mean_start: float = 1.0  # expected segment length in clips
    segment_mean_end: float = 16.0
    freeze_detector_in_stage2: bool = True
    reset_moments_in_stage2: bool = False
    segments_per_epoch: int = 32
    checkpoint_every_epochs: int = 25
    seed: int = 0

    def validate(self):
        if self.clip_len < 2:
            raise ConfigError("clip_len must be >= 2 (cross-frame pairs need two frames)")
        if min(self.segment_mean_start, self.segment_mean_end) < 1.0:
            raise ConfigError("segment means must be >= 1 clip")


@dataclass
class InferenceConfig:
    confidence_threshold: float = 0.9
    miss_reset_frames: int = 4
    output_mode: str = "detection_boxes"  # or "track_boxes"
    match_floor: float = 0.0  # optional minimum association probability
    canvas: int = 1000  # pixel scale used in prediction CSVs

    def validate(self):
        if not 0.0 < self.confidence_threshold < 1.0:
            raise ConfigError("confidence_threshold must be in (0, 1)")
        if self.miss_reset_frames < 1:
            raise ConfigError("miss_reset_frames must be >= 1")
        if self.output_mode not in ("detection_boxes", "track_boxes"):
            raise ConfigError(f"unknown output_mode {self.output_mode!r}")


@dataclass
class EvalConfig:
    iou_min: float = 0.5
    pair_average: str = "per_frame"  # or "pooled": see metrics.aidf1


@dataclass
class RunConfig:
    scene: SceneConfig = field(default_factory=SceneConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    optim: OptimConfig = field(default_factory=OptimConfig)
    train: ProtocolConfig = field(default_factory=ProtocolConfig)
    infer: InferenceConfig = field(default_factory=InferenceConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    loss_weights: LossWeights = field(default_factory=LossWeights)
    num_scenes: int = 5
    val_frac: float = 0.2
    seed: int = 0
    workers: int = 1


def to_dict(cfg: RunConfig) -> dict:
    return dataclasses.asdict(cfg)


_TUPLE_KEYS = ("world_size", "speed_range", "object_width_range", "object_height_range")


def _build(dc_type, data: dict, path: str):
    kwargs = {}
    names = {f.name: f for f in dataclasses.fields(dc_type)}
    for key, val in data.items():
        if key not in names:
            raise ConfigError(f"unknown config key {path}{key}")
        f = names[key]
        default = f.default_factory() if f.default_factory is not dataclasses.MISSING else f.default
        if dataclasses.is_dataclass(default):
            val = _build(type(default), val, f"{path}{key}.")
        elif isinstance(val, list) and key in _TUPLE_KEYS:
            val = tuple(val)
        elif isinstance(val, list) and key == "occluder_rects":
            val = [tuple(r) for r in val]
        elif isinstance(val, list) and key == "camera_poses":
            from .scene import CameraPose

            val = [CameraPose(*p) if isinstance(p, list) else CameraPose(**p) for p in val]
        kwargs[key] = val
    return dc_type(**kwargs)


def from_dict(data: dict) -> RunConfig:
    return _build(RunConfig, data, "")


def load_config(path: str | None) -> RunConfig:
    if path is None:
        return RunConfig()
    if not os.path.exists(path):
        raise ConfigError(f"config file not found: {path}")
    with open(path) as fh:
        try:
            data = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON ({exc})") from None
    return from_dict(data)


def apply_overrides(cfg: RunConfig, sets: list[str]) -> RunConfig:
    """Apply dotted-key overrides like `train.stage1_epochs=1`."""
    data = to_dict(cfg)
    for item in sets:
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        key, _, raw = item.partition("=")
        try:
            value = json.loads(raw)
        except json.JSONDecodeError:
            value = raw  # bare strings are fine
        node = data
        parts = key.split(".")
        for p in parts[:-1]:
            if p not in node or not isinstance(node[p], dict):
                raise ConfigError(f"unknown config section {key!r}")
            node = node[p]
        if parts[-1] not in node:
            raise ConfigError(f"unknown config key {key!r}")
        node[parts[-1]] = value
    return from_dict(data)


def echo_config(cfg: RunConfig, out_dir: str):
    os.makedirs(out_dir, exist_ok=True)
    with open(os.path.join(out_dir, "config.json"), "w") as fh:
        json.dump(to_dict(cfg), fh, indent=2, sort_keys=True)
        fh.write("\n")


def resolve_seed(cfg: RunConfig, flag_seed: int | None) -> int:
    """Flag wins, then MCTR_SEED from the environment, then the config."""
    if flag_seed is not None:
        return flag_seed
    env = os.environ.get("MCTR_SEED")
    if env is not None:
        try:
            return int(env)
        except ValueError:
            raise ConfigError(f"MCTR_SEED must be an integer, got {env!r}") from None
    return cfg.seed
