"""Full model bundle: per-view detector, track updater, association
projections, and the view-specific track-box heads."""

from __future__ import annotations

import numpy as np

from .config import ModelConfig
from .detector import DetectorParams
from .losses import TrackBoxHeads
from .nn import Tensor, assign_params, load_params, save_params
from .tracker import TrackerParams


class TrackingModel:
    def __init__(self, cfg: ModelConfig, seed: int = 0):
        cfg.validate()
        self.cfg = cfg
        rng = np.random.Generator(np.random.Philox(np.random.SeedSequence([seed, 0xC0DE])))
        self.detector = DetectorParams(rng, cfg)
        self.tracker = TrackerParams(rng, cfg)
        self.box_heads = TrackBoxHeads(rng, cfg)

    def named_parameters(self) -> dict[str, Tensor]:
        out: dict[str, Tensor] = {}
        for name, p in self.detector.named_parameters("detector"):
            out[name] = p
        for name, p in self.tracker.named_parameters("tracker"):
            out[name] = p
        for name, p in self.box_heads.named_parameters("track_box_heads"):
            out[name] = p
        if len(out) != sum(1 for _ in self._iter_names()):
            raise RuntimeError("duplicate parameter names in model")
        return out

    def _iter_names(self):
        yield from self.detector.named_parameters("detector")
        yield from self.tracker.named_parameters("tracker")
        yield from self.box_heads.named_parameters("track_box_heads")

    def detector_param_names(self) -> set[str]:
        return {name for name, _ in self.detector.named_parameters("detector")}

    def num_parameters(self) -> int:
        return sum(p.array.size for p in self.named_parameters().values())

    def zero_grads(self):
        for p in self.named_parameters().values():
            p.zero_grad()

    def save_weights(self, path):
        save_params(self.named_parameters(), path)

    def load_weights(self, path):
        assign_params(self.named_parameters(), load_params(path))
