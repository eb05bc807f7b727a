"""Deterministic synthetic multi-camera scenes.

Objects move on a 2-d ground plane; each camera is a flattened pinhole (a
position, an orientation angle and a field of view) with a synthetic
vertical axis derived from camera height and per-object physical height.
Occluders are world-space rectangles that block the camera-to-object
sight line.  All randomness comes from numpy's Philox counter-based
generator, so a (config, seed) pair reproduces the dataset bit for bit on
any platform.

Dataset files are JSON lines, one record per frame:

    {"frame": int, "views": [{"view": int,
                              "gt": [{"tid": int, "box": [cx,cy,w,h], "vis": bool}],
                              "tokens": [[f64, ...]]}]}

Coordinates are normalized to [0, 1].  This file format is the contract
between the synth, train, track and eval subcommands.
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, DataError, GenerationError


@dataclass(frozen=True)
class CameraPose:
    x: float
    y: float
    angle: float  # optical-axis direction, radians
    fov: float  # horizontal field of view, radians


@dataclass
class SceneConfig:
    num_views: int = 3
    num_objects: int = 4
    num_frames: int = 300
    world_size: tuple[float, float] = (10.0, 10.0)
    camera_poses: list[CameraPose] | None = None  # None: ring facing center
    camera_distance: float = 8.0
    camera_fov_deg: float = 90.0
    camera_height: float = 1.6
    occluder_rects: list[tuple[float, float, float, float]] = field(default_factory=list)
    speed_range: tuple[float, float] = (0.04, 0.10)
    turn_prob: float = 0.05
    clutter_rate: float = 0.0
    object_width_range: tuple[float, float] = (0.30, 0.50)
    object_height_range: tuple[float, float] = (0.75, 1.05)
    d_tok: int = 16
    appearance_sigma: float = 0.05
    box_sigma: float = 0.01
    max_tokens_per_view: int = 20
    min_visible_frac: float = 0.9
    max_retries: int = 20
    seed: int = 0
    # When set, identity appearance vectors come from this seed instead of
    # the scene seed, so every scene of a family shares one identity pool
    # (same actors recorded in new sessions).
    appearance_seed: int | None = None

    def cameras(self) -> list[CameraPose]:
        if self.camera_poses is not None:
            return list(self.camera_poses)
        cx, cy = self.world_size[0] / 2.0, self.world_size[1] / 2.0
        fov = math.radians(self.camera_fov_deg)
        poses = []
        for v in range(self.num_views):
            a = 2.0 * math.pi * v / self.num_views
            px, py = cx + self.camera_distance * math.cos(a), cy + self.camera_distance * math.sin(a)
            poses.append(CameraPose(px, py, math.atan2(cy - py, cx - px), fov))
        return poses

    def validate(self):
        if self.num_views < 2:
            raise ConfigError("at least two camera views are required")
        if self.num_objects < 1 or self.num_frames < 1:
            raise ConfigError("num_objects and num_frames must be positive")
        if self.num_objects > self.max_tokens_per_view:
            raise ConfigError(
                f"{self.num_objects} objects exceed the {self.max_tokens_per_view}-token view budget"
            )
        if self.d_tok <= 4:
            raise ConfigError("d_tok must leave room for appearance features (> 4)")


@dataclass
class Annotation:
    tid: int
    box: np.ndarray  # (4,) cx, cy, w, h
    vis: bool


@dataclass
class ViewFrame:
    view: int
    gt: list[Annotation]
    tokens: np.ndarray  # (n_tokens, d_tok)


@dataclass
class FrameRecord:
    frame: int
    views: list[ViewFrame]


@dataclass
class SceneDataset:
    frames: list[FrameRecord]

    @property
    def num_frames(self) -> int:
        return len(self.frames)

    @property
    def num_views(self) -> int:
        return len(self.frames[0].views) if self.frames else 0

    @property
    def d_tok(self) -> int | None:
        for fr in self.frames:
            for vf in fr.views:
                if vf.tokens.shape[0]:
                    return vf.tokens.shape[1]
        return None


NEAR_PLANE = 0.1


def project_to_view(world_pos, extent, camera: CameraPose):
    """Normalized (cx, cy, w, h) box, or None when the center is outside the
    frustum.  Boxes are clamped into [0,1]^4; a box fully clamped away is
    treated as outside."""
    if camera.fov <= 0:
        raise ConfigError("camera field of view must be positive")
    dx, dy = world_pos[0] - camera.x, world_pos[1] - camera.y
    ca, sa = math.cos(camera.angle), math.sin(camera.angle)
    depth = dx * ca + dy * sa
    lateral = -dx * sa + dy * ca
    half_tan = math.tan(camera.fov / 2.0)
    if depth <= NEAR_PLANE or abs(lateral) > depth * half_tan:
        return None
    f = 0.5 / half_tan
    obj_w, obj_h, cam_h = extent[0], extent[1], extent[2]
    cx = 0.5 + f * lateral / depth
    w = f * obj_w / depth
    y_bottom = 0.5 + f * cam_h / depth
    y_top = 0.5 + f * (cam_h - obj_h) / depth
    x0, x1 = max(0.0, cx - w / 2.0), min(1.0, cx + w / 2.0)
    y0, y1 = max(0.0, min(y_top, y_bottom)), min(1.0, max(y_top, y_bottom))
    if x1 <= x0 or y1 <= y0:
        return None
    return np.array([(x0 + x1) / 2.0, (y0 + y1) / 2.0, x1 - x0, y1 - y0])


def segment_hits_rect(p0, p1, rect) -> bool:
    """True when segment p0->p1 intersects the axis-aligned rectangle
    (x0, y0, x1, y1).  Standard slab clipping."""
    x0, y0, x1, y1 = rect
    dx, dy = p1[0] - p0[0], p1[1] - p0[1]
    t0, t1 = 0.0, 1.0
    for p, q in ((-dx, p0[0] - x0), (dx, x1 - p0[0]), (-dy, p0[1] - y0), (dy, y1 - p0[1])):
        if p == 0.0:
            if q < 0.0:
                return False
            continue
        t = q / p
        if p < 0.0:
            if t > t1:
                return False
            t0 = max(t0, t)
        else:
            if t < t0:
                return False
            t1 = min(t1, t)
    return t0 <= t1


def _occluded(camera: CameraPose, pos, rects) -> bool:
    return any(segment_hits_rect((camera.x, camera.y), pos, r) for r in rects)


def _simulate_tracks(cfg: SceneConfig, rng) -> np.ndarray:
    """Object centers per frame, shape (frames, objects, 2); bounce walls."""
    w, h = cfg.world_size
    margin = 0.5
    pos = np.column_stack(
        [rng.uniform(margin, w - margin, cfg.num_objects), rng.uniform(margin, h - margin, cfg.num_objects)]
    )
    speed = rng.uniform(cfg.speed_range[0], cfg.speed_range[1], cfg.num_objects)
    heading = rng.uniform(0.0, 2.0 * math.pi, cfg.num_objects)
    out = np.empty((cfg.num_frames, cfg.num_objects, 2))
    for t in range(cfg.num_frames):
        out[t] = pos
        turn = rng.random(cfg.num_objects) < cfg.turn_prob
        heading = np.where(turn, rng.uniform(0.0, 2.0 * math.pi, cfg.num_objects), heading)
        pos = pos + np.column_stack([speed * np.cos(heading), speed * np.sin(heading)])
        for k in range(cfg.num_objects):
            if pos[k, 0] < margin or pos[k, 0] > w - margin:
                heading[k] = math.pi - heading[k]
                pos[k, 0] = min(max(pos[k, 0], margin), w - margin)
            if pos[k, 1] < margin or pos[k, 1] > h - margin:
                heading[k] = -heading[k]
                pos[k, 1] = min(max(pos[k, 1], margin), h - margin)
    return out


def generate_scene(cfg: SceneConfig) -> SceneDataset:
    """Deterministic function of the config (including its seed)."""
    cfg.validate()
    cameras = cfg.cameras()
    if len(cameras) != cfg.num_views:
        raise ConfigError(f"{len(cameras)} camera poses for {cfg.num_views} views")

    for attempt in range(cfg.max_retries):
        rng = np.random.Generator(np.random.Philox(np.random.SeedSequence([cfg.seed, attempt])))
        ds, ok = _generate_once(cfg, cameras, rng)
        if ok:
            return ds
    raise GenerationError(
        f"could not satisfy the {cfg.min_visible_frac:.0%} visibility constraint "
        f"after {cfg.max_retries} seeds; relax occluders or camera layout"
    )


def _generate_once(cfg: SceneConfig, cameras, rng):
    d_app = cfg.d_tok - 4
    if cfg.appearance_seed is not None:
        app_rng = np.random.Generator(
            np.random.Philox(np.random.SeedSequence([cfg.appearance_seed, 0xA99]))
        )
    else:
        app_rng = rng
    appearance = app_rng.normal(size=(cfg.num_objects, d_app))
    appearance /= np.linalg.norm(appearance, axis=1, keepdims=True)
    obj_w = rng.uniform(*cfg.object_width_range, cfg.num_objects)
    obj_h = rng.uniform(*cfg.object_height_range, cfg.num_objects)
    centers = _simulate_tracks(cfg, rng)

    frames: list[FrameRecord] = []
    visible_count = np.zeros(cfg.num_objects, dtype=int)
    for t in range(cfg.num_frames):
        views: list[ViewFrame] = []
        seen_any = np.zeros(cfg.num_objects, dtype=bool)
        for v, cam in enumerate(cameras):
            gt: list[Annotation] = []
            tokens: list[np.ndarray] = []
            for k in range(cfg.num_objects):
                box = project_to_view(centers[t, k], (obj_w[k], obj_h[k], cfg.camera_height), cam)
                if box is None:
                    continue
                vis = not _occluded(cam, centers[t, k], cfg.occluder_rects)
                gt.append(Annotation(tid=k, box=box, vis=vis))
                if vis:
                    seen_any[k] = True
                    # Box features are centered and scaled to roughly unit
                    # variance so they are not drowned out by the appearance
                    # dims; detectors learn the affine back-mapping.
                    noisy_box = box + rng.normal(0.0, cfg.box_sigma, 4)
                    tok = np.concatenate(
                        [
                            4.0 * (noisy_box - 0.5),
                            appearance[k] + rng.normal(0.0, cfg.appearance_sigma, d_app),
                        ]
                    )
                    tokens.append(tok)
            n_clutter = int(rng.poisson(cfg.clutter_rate))
            for _ in range(n_clutter):
                if len(tokens) >= cfg.max_tokens_per_view:
                    break
                fake_box = np.concatenate(
                    [rng.uniform(0.1, 0.9, 2), rng.uniform(0.02, 0.15, 2)]
                )
                # Clutter appearance is off the unit sphere real identities
                # live on, so rejecting it is learnable.
                fake_app = rng.normal(0.0, 0.25, d_app)
                tokens.append(np.concatenate([4.0 * (fake_box - 0.5), fake_app]))
            tok_arr = np.array(tokens) if tokens else np.zeros((0, cfg.d_tok))
            views.append(ViewFrame(view=v, gt=gt, tokens=tok_arr))
        visible_count += seen_any
        frames.append(FrameRecord(frame=t, views=views))

    ok = bool(np.all(visible_count >= cfg.min_visible_frac * cfg.num_frames))
    return SceneDataset(frames=frames), ok


def save_dataset(ds: SceneDataset, path):
    with open(path, "w") as fh:
        for fr in ds.frames:
            rec = {
                "frame": fr.frame,
                "views": [
                    {
                        "view": vf.view,
                        "gt": [
                            {"tid": a.tid, "box": [float(x) for x in a.box], "vis": bool(a.vis)}
                            for a in vf.gt
                        ],
                        "tokens": [[float(x) for x in row] for row in vf.tokens],
                    }
                    for vf in fr.views
                ],
            }
            fh.write(json.dumps(rec) + "\n")


def load_dataset(path) -> SceneDataset:
    if not os.path.exists(path):
        raise DataError(f"dataset file not found: {path}")
    frames: list[FrameRecord] = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                rec = json.loads(line)
                views = []
                for vrec in rec["views"]:
                    gt = [
                        Annotation(tid=int(g["tid"]), box=np.asarray(g["box"], dtype=np.float64), vis=bool(g["vis"]))
                        for g in vrec["gt"]
                    ]
                    toks = vrec["tokens"]
                    tok_arr = np.asarray(toks, dtype=np.float64) if toks else np.zeros((0, 0))
                    views.append(ViewFrame(view=int(vrec["view"]), gt=gt, tokens=tok_arr))
                frames.append(FrameRecord(frame=int(rec["frame"]), views=views))
            except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
                raise DataError(f"{path}:{lineno}: malformed dataset record ({exc})") from None
    return SceneDataset(frames=frames)
