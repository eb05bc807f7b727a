"""Global track-embedding update and probabilistic detection-track association.

Each tracking layer cross-attends the T track embeddings against every
view's detection embeddings with view-specific weights, averages the
per-view results, then applies shared self-attention and feed-forward
blocks.  Association is scaled dot-product between linearly projected
detection and track embeddings, softmaxed per detection row.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .config import ModelConfig
from .detector import DetectionSet
from .errors import ConfigError
from .nn import FeedForward, LayerNorm, MultiHeadAttention, dropout_mask
from .tensor import Tensor, matmul, softmax_rows, transpose


@dataclass
class TrackState:
    """T track embeddings plus per-slot lifecycle bookkeeping.

    Lifecycle fields belong to the inference engine; update_tracks carries
    them through untouched.
    """

    embeddings: Tensor  # (T, d_e)
    miss_count: np.ndarray  # (T,) int
    global_ids: list[int | None]
    age: np.ndarray  # (T,) frames since init/reset
    next_global_id: int = 1

    def clone_lifecycle(self, embeddings: Tensor) -> "TrackState":
        return TrackState(
            embeddings=embeddings,
            miss_count=self.miss_count,
            global_ids=self.global_ids,
            age=self.age,
            next_global_id=self.next_global_id,
        )


@dataclass
class AssociationMatrix:
    view: int
    A: Tensor  # (D, T), rows sum to 1


class TrackLayer:
    def __init__(self, rng, d: int, heads: int, ffn_dim: int, num_views: int):
        self.ln_x = LayerNorm(d)
        # One cross-attention block per camera view, no weight sharing.
        self.xattn = [MultiHeadAttention(rng, d, heads) for _ in range(num_views)]
        self.ln_s = LayerNorm(d)
        self.self_attn = MultiHeadAttention(rng, d, heads)
        self.ln_f = LayerNorm(d)
        self.ffn = FeedForward(rng, d, ffn_dim)

    def named_parameters(self, prefix: str):
        yield from self.ln_x.named_parameters(f"{prefix}.ln_x")
        for v, block in enumerate(self.xattn):
            yield from block.named_parameters(f"{prefix}.xattn.view{v}")
        yield from self.ln_s.named_parameters(f"{prefix}.ln_s")
        yield from self.self_attn.named_parameters(f"{prefix}.self_attn")
        yield from self.ln_f.named_parameters(f"{prefix}.ln_f")
        yield from self.ffn.named_parameters(f"{prefix}.ffn")


class TrackerParams:
    def __init__(self, rng, cfg: ModelConfig):
        d = cfg.d_e
        self.cfg = cfg
        self.init_queries = Tensor(
            rng.normal(0.0, 1.0 / np.sqrt(d), (cfg.num_tracks, d)), requires_grad=True
        )
        self.layers = [
            TrackLayer(rng, d, cfg.heads, cfg.ffn_dim, cfg.num_views) for _ in range(cfg.track_layers)
        ]
        # Association projections: plain linear maps, no bias.
        self.w_det = Tensor(rng.normal(0.0, 1.0 / np.sqrt(d), (d, d)), requires_grad=True)
        self.w_trk = Tensor(rng.normal(0.0, 1.0 / np.sqrt(d), (d, d)), requires_grad=True)

    def named_parameters(self, prefix: str = "tracker"):
        yield f"{prefix}.init_queries", self.init_queries
        for i, layer in enumerate(self.layers):
            yield from layer.named_parameters(f"{prefix}.layer{i}")
        yield f"{prefix}.w_det", self.w_det
        yield f"{prefix}.w_trk", self.w_trk


def init_tracks(params: TrackerParams) -> TrackState:
    """Fresh state: every row is a bit-exact copy of its initial query."""
    t = params.cfg.num_tracks
    return TrackState(
        embeddings=Tensor(params.init_queries.array.copy()),
        miss_count=np.zeros(t, dtype=np.int64),
        global_ids=[None] * t,
        age=np.zeros(t, dtype=np.int64),
        next_global_id=1,
    )


def update_tracks(
    state: TrackState,
    dets: list[DetectionSet],
    params: TrackerParams,
    dropout_rng=None,
) -> TrackState:
    """One frame of track-embedding refinement from all views' detections."""
    cfg = params.cfg
    by_view = {d.view: d for d in dets}
    if sorted(by_view) != list(range(cfg.num_views)):
        raise ConfigError(
            f"expected one detection set per view 0..{cfg.num_views - 1}, got views {sorted(by_view)}"
        )
    q = state.embeddings
    for layer in params.layers:
        qn = layer.ln_x(q)
        pooled = None
        for v in range(cfg.num_views):
            emb = by_view[v].embeddings
            out = layer.xattn[v](qn, emb, emb)
            pooled = out if pooled is None else pooled + out
        pooled = pooled / float(cfg.num_views)
        mask = dropout_mask(dropout_rng, pooled.shape, cfg.dropout) if dropout_rng is not None else None
        q = q + (pooled * mask if mask is not None else pooled)

        qs = layer.ln_s(q)
        attn_out = layer.self_attn(qs, qs, qs)
        mask = dropout_mask(dropout_rng, attn_out.shape, cfg.dropout) if dropout_rng is not None else None
        q = q + (attn_out * mask if mask is not None else attn_out)

        ffn_out = layer.ffn(layer.ln_f(q))
        mask = dropout_mask(dropout_rng, ffn_out.shape, cfg.dropout) if dropout_rng is not None else None
        q = q + (ffn_out * mask if mask is not None else ffn_out)
    return state.clone_lifecycle(q)


def associate(
    det_embeddings: Tensor, track_embeddings: Tensor, params: TrackerParams, view: int
) -> AssociationMatrix:
    """Row-stochastic D x T matrix: detections query, tracks key."""
    d_e = params.cfg.d_e
    logits = matmul(matmul(det_embeddings, params.w_det), transpose(matmul(track_embeddings, params.w_trk)))
    logits = logits / float(np.sqrt(d_e))
    return AssociationMatrix(view=view, A=softmax_rows(logits))
