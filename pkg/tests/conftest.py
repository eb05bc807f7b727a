"""Shared fixtures: tiny scenes and models sized for fast unit tests."""

import numpy as np
import pytest

from cvtrack.config import ModelConfig, OptimConfig, ProtocolConfig, RunConfig
from cvtrack.model import TrackingModel
from cvtrack.scene import SceneConfig, generate_scene


def tiny_model_config(**kw) -> ModelConfig:
    base = dict(
        d_e=16,
        d_tok=8,
        num_slots=6,
        num_tracks=4,
        num_views=2,
        det_layers=1,
        track_layers=1,
        heads=2,
        ffn_dim=32,
    )
    base.update(kw)
    return ModelConfig(**base)


def tiny_scene_config(**kw) -> SceneConfig:
    base = dict(
        num_views=2,
        num_objects=2,
        num_frames=24,
        d_tok=8,
        camera_fov_deg=110.0,
        seed=11,
    )
    base.update(kw)
    return SceneConfig(**base)


def tiny_run_config(**kw) -> RunConfig:
    cfg = RunConfig(
        scene=tiny_scene_config(),
        model=tiny_model_config(),
        optim=OptimConfig(lr=3e-3, decay_every_epochs=1000),
        train=ProtocolConfig(
            stage1_epochs=2,
            stage2_epochs=2,
            clip_len=4,
            segments_per_epoch=2,
            segment_mean_end=2.0,
            checkpoint_every_epochs=100,
            seed=5,
        ),
    )
    for k, v in kw.items():
        setattr(cfg, k, v)
    return cfg


@pytest.fixture
def tiny_scene():
    return generate_scene(tiny_scene_config())


@pytest.fixture
def tiny_model():
    return TrackingModel(tiny_model_config(), seed=1)


@pytest.fixture
def rng():
    return np.random.default_rng(0)
