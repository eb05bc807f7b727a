"""Miniature query-based detector, one shared set of weights applied per view.

A stack of decoder layers refines D learned query embeddings against the
view's scene tokens; shared class/box heads read out every layer so the
deeper-supervision auxiliary losses have per-layer predictions to train on.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import _kernels
from .boxes import giou_matrix, giou_rowwise, iou_matrix, iou_rowwise
from .config import ModelConfig
from .errors import CapacityError, ConfigError, NumericalAbort
from .nn import BoxMLP, FeedForward, LayerNorm, Linear, MultiHeadAttention
from .scene import Annotation
from .tensor import Tensor, clip, log, maximum, reshape, slice_cols, softmax_rows, take_rows

CLS_EPS = 1e-7


def hungarian(cost: np.ndarray):
    """Minimum-cost assignment of the smaller side; returns (rows, cols)."""
    return _kernels.hungarian(cost)


@dataclass
class MatchResult:
    """Bipartite assignment of detection slots to ground-truth entries."""

    pairs: list[tuple[int, int]]  # (detection index, gt index)
    unmatched_detections: list[int]

    def det_to_gt(self) -> dict[int, int]:
        return dict(self.pairs)


@dataclass
class DetectionSet:
    view: int
    embeddings: Tensor  # (D, d_e), final normed decoder output
    class_prob: Tensor  # (D,), object probability
    boxes: Tensor  # (D, 4), (cx, cy, w, h) in (0, 1)
    layer_preds: list[tuple[Tensor, Tensor]] = field(default_factory=list)
    # per decoder layer (class_prob, boxes); the last entry equals the main heads


class DecoderLayer:
    def __init__(self, rng, d: int, heads: int, ffn_dim: int):
        self.ln_x = LayerNorm(d)
        self.xattn = MultiHeadAttention(rng, d, heads)
        self.ln_s = LayerNorm(d)
        self.self_attn = MultiHeadAttention(rng, d, heads)
        self.ln_f = LayerNorm(d)
        self.ffn = FeedForward(rng, d, ffn_dim)

    def __call__(self, q: Tensor, memory: Tensor | None) -> Tensor:
        if memory is not None:
            qn = self.ln_x(q)
            q = q + self.xattn(qn, memory, memory)
        qn = self.ln_s(q)
        q = q + self.self_attn(qn, qn, qn)
        q = q + self.ffn(self.ln_f(q))
        return q

    def named_parameters(self, prefix: str):
        for name, sub in (
            ("ln_x", self.ln_x),
            ("xattn", self.xattn),
            ("ln_s", self.ln_s),
            ("self_attn", self.self_attn),
            ("ln_f", self.ln_f),
            ("ffn", self.ffn),
        ):
            yield from sub.named_parameters(f"{prefix}.{name}")


# Nominal box prior: the box heads start near this (cx, cy, w, h) instead of
# (.5, .5, .5, .5), which skips most of the sigmoid logit traversal.
BOX_PRIOR_LOGITS = np.array([0.0, 0.0, -1.386, -0.619])


class DetectorParams:
    """Weights shared across views; per-view behavior comes from the tokens."""

    def __init__(self, rng, cfg: ModelConfig):
        d = cfg.d_e
        self.cfg = cfg
        self.input_proj = Linear(rng, cfg.d_tok, d)
        self.input_norm = LayerNorm(d)
        self.queries = Tensor(rng.normal(0.0, 1.0 / np.sqrt(d), (cfg.num_slots, d)), requires_grad=True)
        self.layers = [DecoderLayer(rng, d, cfg.heads, cfg.ffn_dim) for _ in range(cfg.det_layers)]
        self.final_norm = LayerNorm(d)
        self.class_head = Linear(rng, d, 2)
        self.box_head = BoxMLP(rng, d, d)
        self.box_head.lin3.bias.array[...] = BOX_PRIOR_LOGITS

    def named_parameters(self, prefix: str = "detector"):
        yield from self.input_proj.named_parameters(f"{prefix}.input_proj")
        yield from self.input_norm.named_parameters(f"{prefix}.input_norm")
        yield f"{prefix}.queries", self.queries
        for i, layer in enumerate(self.layers):
            yield from layer.named_parameters(f"{prefix}.layer{i}")
        yield from self.final_norm.named_parameters(f"{prefix}.final_norm")
        yield from self.class_head.named_parameters(f"{prefix}.class_head")
        yield from self.box_head.named_parameters(f"{prefix}.box_head")


def _read_heads(params: DetectorParams, emb: Tensor):
    logits = params.class_head(emb)
    probs = softmax_rows(logits)
    class_prob = reshape(slice_cols(probs, 0, 1), (emb.shape[0],))
    boxes = params.box_head(emb)
    return class_prob, boxes


def detect_view(tokens, params: DetectorParams, view: int = 0) -> DetectionSet:
    """Forward pass for one view; deterministic given tokens and weights."""
    arr = tokens.array if isinstance(tokens, Tensor) else np.asarray(tokens, dtype=np.float64)
    if arr.ndim != 2:
        arr = arr.reshape(0, params.cfg.d_tok) if arr.size == 0 else arr
    if arr.shape[0] and arr.shape[1] != params.cfg.d_tok:
        raise ConfigError(
            f"token dim {arr.shape[1]} does not match model d_tok={params.cfg.d_tok}"
        )
    memory = None
    if arr.shape[0]:
        memory = params.input_norm(
            params.input_proj(tokens if isinstance(tokens, Tensor) else Tensor(arr))
        )

    q = params.queries
    layer_preds = []
    emb = None
    for layer in params.layers:
        q = layer(q, memory)
        emb = params.final_norm(q)
        layer_preds.append(_read_heads(params, emb))
    class_prob, boxes = layer_preds[-1]
    return DetectionSet(
        view=view, embeddings=emb, class_prob=class_prob, boxes=boxes, layer_preds=layer_preds
    )


def visible(anns: list[Annotation]) -> list[Annotation]:
    return [a for a in anns if a.vis]


def _match_cost(class_prob: np.ndarray, boxes: np.ndarray, gt_boxes: np.ndarray, cfg: ModelConfig):
    p = np.clip(class_prob, CLS_EPS, 1.0)
    cost = cfg.cls_weight * (-np.log(p))[:, None]
    cost = cost + cfg.iou_weight * (1.0 - iou_matrix(boxes, gt_boxes))
    cost = cost + cfg.giou_weight * (1.0 - giou_matrix(boxes, gt_boxes))
    if cfg.l1_weight:
        cost = cost + cfg.l1_weight * np.abs(boxes[:, None, :] - gt_boxes[None, :, :]).sum(axis=2)
    return cost


def detection_loss(det: DetectionSet, anns: list[Annotation], cfg: ModelConfig):
    """DETR-style set loss on the main predictions.

    Only visible annotations participate.  Returns the scalar loss and the
    match that downstream pair labeling reuses.
    """
    return _layer_loss(det.class_prob, det.boxes, visible(anns), cfg)


def _layer_loss(class_prob: Tensor, boxes: Tensor, vis_anns: list[Annotation], cfg: ModelConfig):
    num_slots = class_prob.shape[0]
    n_gt = len(vis_anns)
    if n_gt > num_slots:
        raise CapacityError(f"{n_gt} ground-truth objects exceed {num_slots} detection slots")

    if n_gt:
        gt_boxes = np.stack([a.box for a in vis_anns])
        cost = _match_cost(class_prob.array, boxes.array, gt_boxes, cfg)
        if not np.isfinite(cost).all():
            raise NumericalAbort("non-finite detection matching cost (bad inputs or diverged weights)")
        rows, cols = hungarian(cost)
        pairs = list(zip(rows.tolist(), cols.tolist()))
    else:
        pairs = []
    matched = {d for d, _ in pairs}
    unmatched = [d for d in range(num_slots) if d not in matched]

    terms = []
    if pairs:
        det_idx = [d for d, _ in pairs]
        gt_idx = [g for _, g in pairs]
        gt_sel = Tensor(np.stack([vis_anns[g].box for g in gt_idx]))
        # One-sided clamps keep the loss exactly 0 at perfect predictions.
        p_m = clip(take_rows(class_prob, det_idx), CLS_EPS, 1.0)
        terms.append(cfg.cls_weight * (-log(p_m)).sum())
        box_sel = take_rows(boxes, det_idx)
        terms.append(cfg.iou_weight * (1.0 - iou_rowwise(box_sel, gt_sel)).sum())
        terms.append(cfg.giou_weight * (1.0 - giou_rowwise(box_sel, gt_sel)).sum())
        if cfg.l1_weight:
            diff = box_sel - gt_sel
            terms.append(cfg.l1_weight * maximum(diff, -diff).sum())
    if unmatched:
        q_u = clip(1.0 - take_rows(class_prob, unmatched), CLS_EPS, 1.0)
        terms.append((-log(q_u)).sum())

    total = terms[0]
    for t in terms[1:]:
        total = total + t
    loss = total / float(max(1, n_gt))
    return loss, MatchResult(pairs=pairs, unmatched_detections=unmatched)


def detection_losses_all_layers(det: DetectionSet, anns: list[Annotation], cfg: ModelConfig):
    """(main loss, mean auxiliary loss over earlier layers, main match)."""
    vis_anns = visible(anns)
    main_loss, match = _layer_loss(det.class_prob, det.boxes, vis_anns, cfg)
    aux_layers = det.layer_preds[:-1]
    if not aux_layers:
        return main_loss, Tensor(0.0), match
    aux_total = None
    for cp, bx in aux_layers:
        l, _ = _layer_loss(cp, bx, vis_anns, cfg)
        aux_total = l if aux_total is None else aux_total + l
    return main_loss, aux_total / float(len(aux_layers)), match
