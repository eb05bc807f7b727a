"""Online frame-by-frame inference with track lifecycle management.

Per frame: update track embeddings from every view's detections, threshold
detections on confidence, Hungarian-match survivors to tracks per view so
total association probability is maximized, then advance the lifecycle:
matched tracks keep or receive a global id, tracks missed in every view age
toward a reset back to their learned initial query embedding.
"""

from __future__ import annotations

import csv
import os
import time
from dataclasses import dataclass

import numpy as np

from .config import InferenceConfig
from .detector import detect_view, hungarian
from .errors import ConfigError
from .model import TrackingModel
from .scene import SceneDataset
from .tensor import Tensor, no_grad
from .tracker import TrackState, associate, init_tracks, update_tracks


@dataclass
class TrackedItem:
    global_id: int
    box: np.ndarray  # (4,) cx, cy, w, h normalized
    confidence: float


@dataclass
class TrackedFrame:
    frame_index: int
    per_view: list[list[TrackedItem]]


def step_frame(
    state: TrackState,
    dets: list,
    model: TrackingModel,
    cfg: InferenceConfig,
) -> tuple[TrackState, TrackedFrame]:
    cfg.validate()
    num_views = model.cfg.num_views
    num_tracks = model.cfg.num_tracks

    state = update_tracks(state, dets, model.tracker)
    assoc = [
        associate(dets[v].embeddings, state.embeddings, model.tracker, v).A.array
        for v in range(num_views)
    ]

    per_view_pairs: list[list[tuple[int, int]]] = []
    matched_tracks: set[int] = set()
    for v in range(num_views):
        probs = dets[v].class_prob.array
        keep = np.nonzero(probs >= cfg.confidence_threshold)[0]
        pairs: list[tuple[int, int]] = []
        if keep.size:
            rows, cols = hungarian(-assoc[v][keep])
            for r, c in zip(rows, cols):
                if assoc[v][keep[r], c] >= cfg.match_floor:
                    pairs.append((int(keep[r]), int(c)))
        per_view_pairs.append(pairs)
        matched_tracks.update(t for _, t in pairs)

    # Lifecycle: a track is "missed" only when no view matched it this frame.
    resets = []
    state.age += 1
    for t in range(num_tracks):
        if t in matched_tracks:
            state.miss_count[t] = 0
            if state.global_ids[t] is None:
                state.global_ids[t] = state.next_global_id
                state.next_global_id += 1
        else:
            state.miss_count[t] += 1
            if state.miss_count[t] > cfg.miss_reset_frames:
                resets.append(t)
    if resets:
        emb = state.embeddings.array.copy()
        for t in resets:
            emb[t] = model.tracker.init_queries.array[t]
            state.global_ids[t] = None
            state.miss_count[t] = 0
            state.age[t] = 0
        state.embeddings = Tensor(emb)

    per_view_items: list[list[TrackedItem]] = []
    if cfg.output_mode == "detection_boxes":
        for v in range(num_views):
            items = [
                TrackedItem(
                    global_id=state.global_ids[t],
                    box=dets[v].boxes.array[d].copy(),
                    confidence=float(dets[v].class_prob.array[d]),
                )
                for d, t in per_view_pairs[v]
            ]
            per_view_items.append(items)
    else:  # track_boxes: one box per active track in every view
        for v in range(num_views):
            boxes = model.box_heads(v, state.embeddings).array
            items = [
                TrackedItem(global_id=state.global_ids[t], box=boxes[t].copy(), confidence=1.0)
                for t in range(num_tracks)
                if state.global_ids[t] is not None
            ]
            per_view_items.append(items)

    return state, TrackedFrame(frame_index=-1, per_view=per_view_items)


def run_sequence(
    dataset: SceneDataset, model: TrackingModel, cfg: InferenceConfig
) -> tuple[list[TrackedFrame], dict]:
    """Strictly online pass over a scene; also records per-frame wall time."""
    if dataset.num_views != model.cfg.num_views:
        raise ConfigError(
            f"dataset has {dataset.num_views} views, model expects {model.cfg.num_views}"
        )
    d_tok = dataset.d_tok
    if d_tok is not None and d_tok != model.cfg.d_tok:
        raise ConfigError(f"dataset token dim {d_tok} does not match model d_tok={model.cfg.d_tok}")

    state = init_tracks(model.tracker)
    out: list[TrackedFrame] = []
    times = []
    with no_grad():
        for fr in dataset.frames:
            t0 = time.perf_counter()
            dets = [detect_view(vf.tokens, model.detector, vf.view) for vf in fr.views]
            state, tracked = step_frame(state, dets, model, cfg)
            times.append(time.perf_counter() - t0)
            tracked.frame_index = fr.frame
            out.append(tracked)
    arr = np.array(times) if times else np.zeros(1)
    stats = {
        "frames": len(out),
        "total_s": float(arr.sum()),
        "mean_ms": float(arr.mean() * 1e3),
        "median_ms": float(np.median(arr) * 1e3),
    }
    return out, stats


def write_prediction_csvs(frames: list[TrackedFrame], out_dir: str, num_views: int, canvas: int):
    """MOT-style per-view CSVs: frame,id,bb_left,bb_top,bb_width,bb_height,
    conf,-1,-1,-1.  Frames are 1-based; normalized boxes are scaled by the
    declared canvas."""
    os.makedirs(out_dir, exist_ok=True)
    paths = []
    for v in range(num_views):
        path = os.path.join(out_dir, f"view_{v}.csv")
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            for fr in frames:
                for item in fr.per_view[v]:
                    cx, cy, w, h = item.box
                    writer.writerow(
                        [
                            fr.frame_index + 1,
                            item.global_id,
                            f"{(cx - w / 2) * canvas:.6f}",
                            f"{(cy - h / 2) * canvas:.6f}",
                            f"{w * canvas:.6f}",
                            f"{h * canvas:.6f}",
                            f"{item.confidence:.6f}",
                            -1,
                            -1,
                            -1,
                        ]
                    )
        paths.append(path)
    return paths
