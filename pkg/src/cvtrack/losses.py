"""Track-consistency losses: pairwise same-track likelihood across views and
frames, plus the auxiliary track-box overlap losses.

Pairs are labeled from the per-view Hungarian matches: same when both
detections map to the same ground-truth id, different when both map to
distinct ids, undefined when either side is unmatched.  Undefined pairs are
excluded from the loss; the pair count N_p normalizes it.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np

from .boxes import giou_rowwise, iou_rowwise
from .config import LossWeights, ModelConfig
from .detector import MatchResult
from .nn import BoxMLP
from .scene import Annotation
from .tensor import Tensor, clip, log, matmul, reshape, take_rows, transpose
from .tracker import AssociationMatrix

PAIR_EPS = 1e-7


class PairLabel(enum.Enum):
    SAME = "same"
    DIFFERENT = "different"
    UNDEFINED = "undefined"


def matched_tids(match: MatchResult, vis_anns: list[Annotation], num_slots: int) -> np.ndarray:
    """Per detection slot, the matched ground-truth track id, or -1."""
    tids = np.full(num_slots, -1, dtype=np.int64)
    for d, g in match.pairs:
        tids[d] = vis_anns[g].tid
    return tids


def pair_label(tids1: np.ndarray, d1: int, tids2: np.ndarray, d2: int) -> PairLabel:
    a, b = tids1[d1], tids2[d2]
    if a < 0 or b < 0:
        return PairLabel.UNDEFINED
    return PairLabel.SAME if a == b else PairLabel.DIFFERENT


def pair_probability(row_a: Tensor, row_b: Tensor) -> Tensor:
    """Probability two detections share a track: inner product of their
    association rows (both row-stochastic)."""
    return (row_a * row_b).sum()


def _bce_terms(a1: Tensor, a2: Tensor, tids1: np.ndarray, tids2: np.ndarray):
    """Summed log-likelihood over defined pairs between two association
    matrices, plus the pair count.  Positive log-likelihood: negate and
    normalize at the caller."""
    both = (tids1[:, None] >= 0) & (tids2[None, :] >= 0)
    same = both & (tids1[:, None] == tids2[None, :])
    diff = both & ~same
    n = int(both.sum())
    if n == 0:
        return None, 0
    p = clip(matmul(a1, transpose(a2)), PAIR_EPS, 1.0 - PAIR_EPS)
    term = Tensor(0.0)
    if same.any():
        term = term + (Tensor(same.astype(np.float64)) * log(p)).sum()
    if diff.any():
        term = term + (Tensor(diff.astype(np.float64)) * log(1.0 - p)).sum()
    return term, n


def _pooled_loss(pieces):
    """-(sum of terms)/N_p over accumulated (term, n) pieces; 0 when empty."""
    total_n = sum(n for _, n in pieces)
    if total_n == 0:
        return Tensor(0.0), 0
    total = None
    for term, n in pieces:
        if n:
            total = term if total is None else total + term
    return -(total / float(total_n)), total_n


def across_views_loss(
    mats: list[AssociationMatrix], tids_by_view: list[np.ndarray]
):
    """Binary log-likelihood loss over all cross-view detection pairs of one
    frame (all unordered view pairs)."""
    pieces = []
    n_views = len(mats)
    for v1 in range(n_views):
        for v2 in range(v1 + 1, n_views):
            pieces.append(_bce_terms(mats[v1].A, mats[v2].A, tids_by_view[v1], tids_by_view[v2]))
    return _pooled_loss(pieces)


def across_views_clip_loss(
    mats_by_frame: list[list[AssociationMatrix]], tids_by_frame: list[list[np.ndarray]]
):
    """Cross-view loss pooled over every frame of a clip (one normalization
    by the total defined-pair count)."""
    pieces = []
    for mats, tids in zip(mats_by_frame, tids_by_frame):
        n_views = len(mats)
        for v1 in range(n_views):
            for v2 in range(v1 + 1, n_views):
                pieces.append(_bce_terms(mats[v1].A, mats[v2].A, tids[v1], tids[v2]))
    return _pooled_loss(pieces)


def across_frames_loss(
    mats_by_frame: list[list[AssociationMatrix]], tids_by_frame: list[list[np.ndarray]]
):
    """Same loss over same-view detection pairs across all frame pairs of a
    clip, pooled over views and frame pairs."""
    pieces = []
    n_frames = len(mats_by_frame)
    n_views = len(mats_by_frame[0]) if n_frames else 0
    for f1 in range(n_frames):
        for f2 in range(f1 + 1, n_frames):
            for v in range(n_views):
                pieces.append(
                    _bce_terms(
                        mats_by_frame[f1][v].A,
                        mats_by_frame[f2][v].A,
                        tids_by_frame[f1][v],
                        tids_by_frame[f2][v],
                    )
                )
    return _pooled_loss(pieces)


class TrackBoxHeads:
    """View-specific 3-layer MLPs decoding track embeddings into boxes."""

    def __init__(self, rng, cfg: ModelConfig):
        from .detector import BOX_PRIOR_LOGITS

        self.heads = [BoxMLP(rng, cfg.d_e, cfg.d_e) for _ in range(cfg.num_views)]
        for head in self.heads:
            head.lin3.bias.array[...] = BOX_PRIOR_LOGITS

    def __call__(self, view: int, track_embeddings: Tensor) -> Tensor:
        return self.heads[view](track_embeddings)

    def named_parameters(self, prefix: str = "track_box_heads"):
        for v, head in enumerate(self.heads):
            yield from head.named_parameters(f"{prefix}.view{v}")


def track_box_loss(
    track_embeddings: Tensor,
    heads: TrackBoxHeads,
    mats: list[AssociationMatrix],
    matches: list[MatchResult],
    vis_anns_by_view: list[list[Annotation]],
):
    """Association-weighted overlap losses between per-view predicted track
    boxes and the gt boxes of matched detections; (iou_loss, giou_loss)."""
    num_views = len(mats)
    num_tracks = mats[0].A.shape[1]
    total_iou = Tensor(0.0)
    total_giou = Tensor(0.0)
    for v in range(num_views):
        pairs = matches[v].pairs
        if not pairs:
            continue
        det_idx = [d for d, _ in pairs]
        gt_boxes = np.stack([vis_anns_by_view[v][g].box for _, g in pairs])
        n_matched = len(det_idx)
        bhat = heads(v, track_embeddings)  # (T, 4)
        rep_idx = np.repeat(np.arange(num_tracks), n_matched)
        bhat_rep = take_rows(bhat, rep_idx)
        gt_rep = Tensor(np.tile(gt_boxes, (num_tracks, 1)))
        weights = transpose(take_rows(mats[v].A, det_idx))  # (T, n_matched)
        l_iou = 1.0 - reshape(iou_rowwise(bhat_rep, gt_rep), (num_tracks, n_matched))
        l_giou = 1.0 - reshape(giou_rowwise(bhat_rep, gt_rep), (num_tracks, n_matched))
        total_iou = total_iou + (weights * l_iou).sum()
        total_giou = total_giou + (weights * l_giou).sum()
    scale = 1.0 / float(num_views * num_tracks)
    return total_iou * scale, total_giou * scale


@dataclass
class LossBreakdown:
    l_det: Tensor
    l_det_aux: Tensor
    l_across_cams: Tensor
    l_across_frames: Tensor
    l_track_iou: Tensor
    l_track_giou: Tensor
    total: Tensor
    n_pairs_cams: int = 0
    n_pairs_frames: int = 0

    def to_floats(self) -> dict:
        return {
            "l_det": self.l_det.item(),
            "l_det_aux": self.l_det_aux.item(),
            "l_across_cams": self.l_across_cams.item(),
            "l_across_frames": self.l_across_frames.item(),
            "l_track_iou": self.l_track_iou.item(),
            "l_track_giou": self.l_track_giou.item(),
            "n_pairs_cams": self.n_pairs_cams,
            "n_pairs_frames": self.n_pairs_frames,
            "total": self.total.item(),
        }


def total_loss(
    l_det: Tensor,
    l_det_aux: Tensor,
    l_across_cams: Tensor,
    l_across_frames: Tensor,
    l_track_iou: Tensor,
    l_track_giou: Tensor,
    weights: LossWeights | None = None,
    n_pairs_cams: int = 0,
    n_pairs_frames: int = 0,
) -> LossBreakdown:
    """Weighted components and their sum.  Default weights are all 1, the
    plain six-term sum; zero weights drop a component entirely (ablations)."""
    w = weights or LossWeights()
    parts = [
        l_det * w.det,
        l_det_aux * w.det_aux,
        l_across_cams * w.across_cams,
        l_across_frames * w.across_frames,
        l_track_iou * w.track_iou,
        l_track_giou * w.track_giou,
    ]
    total = parts[0]
    for p in parts[1:]:
        total = total + p
    return LossBreakdown(
        l_det=parts[0],
        l_det_aux=parts[1],
        l_across_cams=parts[2],
        l_across_frames=parts[3],
        l_track_iou=parts[4],
        l_track_giou=parts[5],
        total=total,
        n_pairs_cams=n_pairs_cams,
        n_pairs_frames=n_pairs_frames,
    )
