"""Adam optimizer, the two-stage training protocol, and checkpointing.

Stage 1 trains everything on single four-frame clips.  Stage 2 freezes the
detector and continues on segments whose length (in clips) is drawn from a
geometric distribution with linearly growing mean; track embeddings carry
across the clips of a segment (detached at clip boundaries, so backprop
stays within one clip) and reset to the learned initial queries at segment
starts.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field

import numpy as np

from .config import LossWeights, OptimConfig, ProtocolConfig, RunConfig
from .detector import detect_view, detection_losses_all_layers, visible
from .errors import CheckpointError, ConfigError, NumericalAbort
from .losses import (
    LossBreakdown,
    across_frames_loss,
    across_views_clip_loss,
    matched_tids,
    total_loss,
    track_box_loss,
)
from .model import TrackingModel
from .nn import PARAM_FORMAT
from .scene import FrameRecord, SceneDataset
from .tensor import Tape, Tensor, no_grad
from .tracker import associate, init_tracks, update_tracks


class Adam:
    """Adam with bias correction and stepwise-decayed learning rate."""

    def __init__(self, params: dict[str, Tensor], cfg: OptimConfig):
        self.params = params
        self.cfg = cfg
        self.step_count = 0
        self.m = {k: np.zeros_like(p.array) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.array) for k, p in params.items()}

    def lr_at(self, epoch: int) -> float:
        return self.cfg.lr * self.cfg.decay_factor ** (epoch // self.cfg.decay_every_epochs)

    def step(self, epoch: int, frozen: set[str] = frozenset()):
        """Apply accumulated gradients and zero them.  Frozen parameters are
        skipped entirely (their moments stay put)."""
        lr = self.lr_at(epoch)
        self.step_count += 1
        b1, b2, eps = self.cfg.beta1, self.cfg.beta2, self.cfg.eps
        c1 = 1.0 - b1**self.step_count
        c2 = 1.0 - b2**self.step_count
        for name, p in self.params.items():
            g = p.grad
            p.grad = None
            if name in frozen or g is None:
                continue
            if not np.isfinite(g).all():
                raise NumericalAbort(f"non-finite gradient for parameter {name}")
            m = self.m[name]
            v = self.v[name]
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            p.array -= lr * (m / c1) / (np.sqrt(v / c2) + eps)

    def reset_moments(self):
        for k in self.m:
            self.m[k][...] = 0.0
            self.v[k][...] = 0.0
        self.step_count = 0

    def state_dict(self) -> dict:
        return {
            "step": self.step_count,
            "m": {k: a.reshape(-1).tolist() for k, a in self.m.items()},
            "v": {k: a.reshape(-1).tolist() for k, a in self.v.items()},
        }

    def load_state_dict(self, state: dict):
        if set(state["m"]) != set(self.m):
            raise CheckpointError("optimizer state parameter names do not match the model")
        self.step_count = int(state["step"])
        for k in self.m:
            self.m[k][...] = np.asarray(state["m"][k], dtype=np.float64).reshape(self.m[k].shape)
            self.v[k][...] = np.asarray(state["v"][k], dtype=np.float64).reshape(self.v[k].shape)


def sample_segment_length(epoch: int, cfg: ProtocolConfig, rng) -> int:
    """Geometric draw (support 1, 2, ...) whose mean grows linearly over
    stage-2 epochs from segment_mean_start to segment_mean_end."""
    denom = max(1, cfg.stage2_epochs - 1)
    frac = min(1.0, max(0.0, (epoch - cfg.stage1_epochs) / denom))
    return _geometric_with_mean(cfg, frac, rng)


def _geometric_with_mean(cfg: ProtocolConfig, frac: float, rng) -> int:
    mean = cfg.segment_mean_start + (cfg.segment_mean_end - cfg.segment_mean_start) * frac
    if mean <= 1.0:
        return 1
    return int(rng.geometric(1.0 / mean))


def forward_clip(
    model: TrackingModel,
    frames: list[FrameRecord],
    state,
    weights: LossWeights,
    detector_frozen: bool = False,
):
    """Run one training clip and assemble the loss breakdown.

    Returns (breakdown, new TrackState).  With the detector frozen its
    forward runs off-tape, so backward stops at the detection embeddings.
    """
    cfg = model.cfg
    n_vf = 0
    l_det_sum = None
    l_aux_sum = None
    mats_by_frame = []
    tids_by_frame = []
    iou_parts = []
    giou_parts = []
    aux_on = weights.track_iou != 0.0 or weights.track_giou != 0.0

    for fr in frames:
        if len(fr.views) != cfg.num_views:
            raise ConfigError(f"frame has {len(fr.views)} views, model expects {cfg.num_views}")
        if detector_frozen:
            with no_grad():
                dets = [detect_view(vf.tokens, model.detector, vf.view) for vf in fr.views]
        else:
            dets = [detect_view(vf.tokens, model.detector, vf.view) for vf in fr.views]
        state = update_tracks(state, dets, model.tracker)
        mats = [associate(dets[v].embeddings, state.embeddings, model.tracker, v) for v in range(cfg.num_views)]

        matches = []
        vis_by_view = []
        for v in range(cfg.num_views):
            anns = fr.views[v].gt
            l_main, l_aux, match = detection_losses_all_layers(dets[v], anns, cfg)
            l_det_sum = l_main if l_det_sum is None else l_det_sum + l_main
            l_aux_sum = l_aux if l_aux_sum is None else l_aux_sum + l_aux
            matches.append(match)
            vis_by_view.append(visible(anns))
            n_vf += 1
        tids = [matched_tids(matches[v], vis_by_view[v], cfg.num_slots) for v in range(cfg.num_views)]
        mats_by_frame.append(mats)
        tids_by_frame.append(tids)
        if aux_on:
            li, lg = track_box_loss(state.embeddings, model.box_heads, mats, matches, vis_by_view)
            iou_parts.append(li)
            giou_parts.append(lg)

    l_det = l_det_sum / float(n_vf)
    l_det_aux = l_aux_sum / float(n_vf)
    l_cams, n_cams = across_views_clip_loss(mats_by_frame, tids_by_frame)
    l_frames, n_frames_pairs = across_frames_loss(mats_by_frame, tids_by_frame)
    if aux_on:
        l_tiou = iou_parts[0]
        l_tgiou = giou_parts[0]
        for t in iou_parts[1:]:
            l_tiou = l_tiou + t
        for t in giou_parts[1:]:
            l_tgiou = l_tgiou + t
        l_tiou = l_tiou / float(len(frames))
        l_tgiou = l_tgiou / float(len(frames))
    else:
        l_tiou = Tensor(0.0)
        l_tgiou = Tensor(0.0)

    breakdown = total_loss(
        l_det,
        l_det_aux,
        l_cams,
        l_frames,
        l_tiou,
        l_tgiou,
        weights=weights,
        n_pairs_cams=n_cams,
        n_pairs_frames=n_frames_pairs,
    )
    return breakdown, state


def train_segment(
    model: TrackingModel,
    frames: list[FrameRecord],
    opt: Adam,
    epoch: int = 0,
    weights: LossWeights | None = None,
    frozen: set[str] = frozenset(),
    detector_frozen: bool = False,
    clip_len: int = 4,
    step_info: str = "",
) -> list[LossBreakdown]:
    """Train on one contiguous segment, one optimizer step per clip.

    Track embeddings start from the learned initial queries (gradients reach
    them through the first clip) and carry across clips detached, so each
    clip is its own backprop unit.
    """
    weights = weights or LossWeights()
    n_clips = len(frames) // clip_len
    if n_clips < 1:
        raise ConfigError(f"segment of {len(frames)} frames is shorter than one {clip_len}-frame clip")
    state = init_tracks(model.tracker)
    state.embeddings = model.tracker.init_queries
    out = []
    for c in range(n_clips):
        clip = frames[c * clip_len : (c + 1) * clip_len]
        with Tape() as tape:
            try:
                bd, state = forward_clip(model, clip, state, weights, detector_frozen=detector_frozen)
            except NumericalAbort as exc:
                raise NumericalAbort(f"{exc} at {step_info} clip {c}") from None
            if not np.isfinite(bd.total.array):
                raise NumericalAbort(f"non-finite loss at {step_info} clip {c}")
            tape.backward(bd.total)
        opt.step(epoch, frozen)
        state = state.clone_lifecycle(state.embeddings.detach())
        out.append(bd)
    return out


RNG_STREAM_TRAIN = 0x7EA1


def _rng_to_hex(rng) -> str:
    state = rng.bit_generator.state
    return json.dumps(state, default=lambda o: o.tolist()).encode().hex()


_BIT_GENERATORS = {"Philox": np.random.Philox, "PCG64": np.random.PCG64}


def _rng_from_hex(hexstate: str):
    state = json.loads(bytes.fromhex(hexstate).decode())
    kind = state.get("bit_generator")
    if kind not in _BIT_GENERATORS:
        raise CheckpointError(f"unsupported rng kind {kind!r}")
    if kind == "Philox":
        state["state"]["counter"] = np.array(state["state"]["counter"], dtype=np.uint64)
        state["state"]["key"] = np.array(state["state"]["key"], dtype=np.uint64)
        state["buffer"] = np.array(state["buffer"], dtype=np.uint64)
    rng = np.random.Generator(_BIT_GENERATORS[kind]())
    rng.bit_generator.state = state
    return rng


CHECKPOINT_FORMAT = "cvtrack-checkpoint-v1"


def save_checkpoint(model: TrackingModel, opt: Adam, epoch: int, rng, path):
    blob = {
        "format": CHECKPOINT_FORMAT,
        "epoch": epoch,
        "rng": _rng_to_hex(rng),
        "opt": opt.state_dict(),
        "params": {
            "format": PARAM_FORMAT,
            "params": [
                {"name": k, "shape": list(p.array.shape), "data": p.array.reshape(-1).tolist()}
                for k, p in model.named_parameters().items()
            ],
        },
    }
    tmp = f"{path}.tmp"
    with open(tmp, "w") as fh:
        json.dump(blob, fh)
    os.replace(tmp, path)


def load_checkpoint(model: TrackingModel, opt: Adam | None, path):
    """Restore parameters (and optionally optimizer + rng).  Returns
    (epoch, rng or None)."""
    if not os.path.exists(path):
        raise CheckpointError(f"checkpoint not found: {path}")
    with open(path) as fh:
        try:
            blob = json.load(fh)
        except json.JSONDecodeError as exc:
            raise CheckpointError(f"{path}: invalid checkpoint ({exc})") from None
    if blob.get("format") != CHECKPOINT_FORMAT:
        raise CheckpointError(f"{path}: unrecognized checkpoint format")
    named = model.named_parameters()
    records = {r["name"]: r for r in blob["params"]["params"]}
    missing = set(named) - set(records)
    extra = set(records) - set(named)
    if missing or extra:
        raise CheckpointError(f"checkpoint/model mismatch: missing={sorted(missing)[:3]} extra={sorted(extra)[:3]}")
    for name, p in named.items():
        rec = records[name]
        if tuple(rec["shape"]) != p.array.shape:
            raise CheckpointError(
                f"checkpoint shape mismatch for {name}: {tuple(rec['shape'])} vs {p.array.shape}"
            )
        p.array[...] = np.asarray(rec["data"], dtype=np.float64).reshape(p.array.shape)
    if opt is not None:
        opt.load_state_dict(blob["opt"])
    rng = _rng_from_hex(blob["rng"]) if blob.get("rng") else None
    return int(blob["epoch"]), rng


@dataclass
class TrainResult:
    epochs_run: int
    steps: int
    final_checkpoint: str
    epoch_mean_totals: list[float] = field(default_factory=list)


def run_training(
    model: TrackingModel,
    scenes: list[SceneDataset],
    run_cfg: RunConfig,
    out_dir: str,
    resume: str | None = None,
    stage2_clip_budget: int | None = None,
    log_every: int = 1,
) -> TrainResult:
    """Drive the full two-stage protocol over a set of training scenes.

    `stage2_clip_budget` switches stage 2 from epoch accounting to an exact
    clip budget (used for step-matched schedule comparisons); the geometric
    mean then grows with consumed budget instead of epoch index.
    """
    tc = run_cfg.train
    tc.validate()
    if not scenes:
        raise ConfigError("no training scenes")
    os.makedirs(out_dir, exist_ok=True)
    opt = Adam(model.named_parameters(), run_cfg.optim)
    rng = np.random.Generator(np.random.Philox(np.random.SeedSequence([tc.seed, RNG_STREAM_TRAIN])))
    start_epoch = 0
    if resume:
        start_epoch, saved_rng = load_checkpoint(model, opt, resume)
        if saved_rng is not None:
            rng = saved_rng

    frozen_names = model.detector_param_names() if tc.freeze_detector_in_stage2 else set()
    log_path = os.path.join(out_dir, "train_log.jsonl")
    final_ck = os.path.join(out_dir, "checkpoint_final.json")
    step = 0
    epoch_means: list[float] = []

    def draw_segment(n_clips_cap: int, length: int):
        scene = scenes[int(rng.integers(len(scenes)))]
        max_clips = scene.num_frames // tc.clip_len
        span = min(length, max_clips, n_clips_cap)
        start = int(rng.integers(0, scene.num_frames - span * tc.clip_len + 1))
        return scene.frames[start : start + span * tc.clip_len]

    with open(log_path, "a" if resume else "w") as log:

        def run_one_segment(frames, epoch, frozen):
            nonlocal step
            bds = train_segment(
                model,
                frames,
                opt,
                epoch=epoch,
                weights=run_cfg.loss_weights,
                frozen=frozen,
                detector_frozen=bool(frozen),
                clip_len=tc.clip_len,
                step_info=f"epoch {epoch} step {step}",
            )
            vals = []
            for bd in bds:
                rec = {"step": step, "epoch": epoch}
                rec.update(bd.to_floats())
                if step % log_every == 0:
                    log.write(json.dumps(rec) + "\n")
                vals.append(rec["total"])
                step += 1
            return vals

        total_epochs = tc.stage1_epochs + tc.stage2_epochs
        epoch = start_epoch
        while epoch < total_epochs:
            stage2 = epoch >= tc.stage1_epochs
            frozen = frozen_names if stage2 else set()
            if stage2 and epoch == tc.stage1_epochs and tc.reset_moments_in_stage2:
                opt.reset_moments()
            if stage2 and stage2_clip_budget is not None:
                means = _run_budgeted_stage2(
                    run_one_segment, draw_segment, rng, tc, stage2_clip_budget, frozen
                )
                epoch_means.extend(means)
                epoch = total_epochs
                break
            totals = []
            for _ in range(tc.segments_per_epoch):
                length = 1 if not stage2 else sample_segment_length(epoch, tc, rng)
                frames = draw_segment(10**9, length)
                totals.extend(run_one_segment(frames, epoch, frozen))
            mean_total = float(np.mean(totals)) if totals else float("nan")
            epoch_means.append(mean_total)
            log.write(
                json.dumps(
                    {"kind": "epoch", "epoch": epoch, "lr": opt.lr_at(epoch), "mean_total": mean_total}
                )
                + "\n"
            )
            epoch += 1
            if epoch % tc.checkpoint_every_epochs == 0 or epoch == total_epochs:
                save_checkpoint(model, opt, epoch, rng, final_ck)
                if epoch != total_epochs:
                    save_checkpoint(model, opt, epoch, rng, os.path.join(out_dir, f"checkpoint_epoch{epoch}.json"))
        save_checkpoint(model, opt, epoch, rng, final_ck)

    return TrainResult(
        epochs_run=epoch - start_epoch,
        steps=step,
        final_checkpoint=final_ck,
        epoch_mean_totals=epoch_means,
    )


def _run_budgeted_stage2(run_one_segment, draw_segment, rng, tc: ProtocolConfig, budget: int, frozen):
    """Stage 2 with an exact clip budget; mean segment length grows with the
    consumed fraction of the budget."""
    consumed = 0
    totals = []
    while consumed < budget:
        frac = consumed / budget
        length = _geometric_with_mean(tc, frac, rng)
        frames = draw_segment(budget - consumed, length)
        vals = run_one_segment(frames, tc.stage1_epochs + consumed // max(1, tc.segments_per_epoch), frozen)
        consumed += len(vals)
        totals.extend(vals)
    return [float(np.mean(totals))] if totals else []
