"""Tracking metrics: per-view MOTA and IDF1, cross-view AIDF1 and MOAA.

Per-frame correspondence is Hungarian matching maximizing IoU with a gate
(pairs under the gate are dropped).  Identity metrics treat prediction ids
as opaque labels, so any global relabeling bijection leaves them unchanged.
Cross-view association metrics compare, per frame and unordered view pair,
the set of prediction pairs sharing a predicted id against the ground-truth
associations induced by shared track ids.
"""

from __future__ import annotations

import csv
import json
import os
from dataclasses import asdict, dataclass, field

import numpy as np

from .boxes import iou_matrix
from .detector import hungarian
from .errors import ConfigError, DataError
from .scene import SceneDataset

# type aliases for clarity: per view, frame -> entries
# predictions: {frame: [(pid, box4, conf)]}; ground truth: {frame: [(tid, box4)]}


def load_predictions_csv(path: str, canvas: int) -> dict[int, list[tuple[int, np.ndarray, float]]]:
    if not os.path.exists(path):
        raise DataError(f"predictions file not found: {path}")
    out: dict[int, list[tuple[int, np.ndarray, float]]] = {}
    with open(path, newline="") as fh:
        for row_num, row in enumerate(csv.reader(fh), start=1):
            if not row:
                continue
            if len(row) < 7:
                raise DataError(f"{path}:{row_num}: expected >= 7 columns, got {len(row)}")
            try:
                frame = int(row[0]) - 1  # CSV frames are 1-based
                pid = int(row[1])
            except ValueError:
                raise DataError(f"{path}:{row_num}: frame and id must be integers") from None
            try:
                left, top, w, h, conf = (float(x) for x in row[2:7])
            except ValueError:
                raise DataError(f"{path}:{row_num}: malformed box columns") from None
            box = np.array([(left + w / 2) / canvas, (top + h / 2) / canvas, w / canvas, h / canvas])
            out.setdefault(frame, []).append((pid, box, conf))
    return out


def gt_view_frames(ds: SceneDataset, view: int) -> dict[int, list[tuple[int, np.ndarray]]]:
    """All annotations for one view, occluded ones included."""
    out: dict[int, list[tuple[int, np.ndarray]]] = {}
    for fr in ds.frames:
        out[fr.frame] = [(a.tid, a.box) for a in fr.views[view].gt]
    return out


def match_frame(
    pred_boxes: np.ndarray, gt_boxes: np.ndarray, iou_min: float = 0.5
) -> list[tuple[int, int]]:
    """Hungarian matching maximizing IoU; pairs below iou_min are dropped."""
    if not (0.0 < iou_min < 1.0):
        raise ConfigError("iou_min must be in (0, 1)")
    if len(pred_boxes) == 0 or len(gt_boxes) == 0:
        return []
    overlap = iou_matrix(np.asarray(pred_boxes), np.asarray(gt_boxes))
    rows, cols = hungarian(-overlap)
    return [(int(r), int(c)) for r, c in zip(rows, cols) if overlap[r, c] >= iou_min]


@dataclass
class SequenceMatches:
    """Per-frame (pid, tid) correspondences plus basic detection counts."""

    per_frame: dict[int, list[tuple[int, int]]] = field(default_factory=dict)
    tp: int = 0
    fp: int = 0
    fn: int = 0
    total_pred: int = 0
    total_gt: int = 0


def match_sequence(preds, gts, iou_min: float) -> SequenceMatches:
    out = SequenceMatches()
    frames = sorted(set(preds) | set(gts))
    for f in frames:
        p = preds.get(f, [])
        g = gts.get(f, [])
        pairs = match_frame(
            np.array([b for _, b, *_ in p]) if p else np.zeros((0, 4)),
            np.array([b for _, b in g]) if g else np.zeros((0, 4)),
            iou_min,
        )
        out.per_frame[f] = [(p[i][0], g[j][0]) for i, j in pairs]
        out.tp += len(pairs)
        out.fp += len(p) - len(pairs)
        out.fn += len(g) - len(pairs)
        out.total_pred += len(p)
        out.total_gt += len(g)
    return out


def count_id_switches(matches: SequenceMatches) -> int:
    """An id switch: a ground-truth identity whose matched prediction id
    differs from the one at its previous matched frame (gaps allowed)."""
    last: dict[int, int] = {}
    idsw = 0
    for f in sorted(matches.per_frame):
        for pid, tid in matches.per_frame[f]:
            if tid in last and last[tid] != pid:
                idsw += 1
            last[tid] = pid
    return idsw


def mota(matches: SequenceMatches) -> float | None:
    if matches.total_gt == 0:
        return None
    idsw = count_id_switches(matches)
    return 1.0 - (matches.fn + matches.fp + idsw) / matches.total_gt


def idf1(matches: SequenceMatches) -> float | None:
    if matches.total_gt == 0 and matches.total_pred == 0:
        return None
    counts: dict[tuple[int, int], int] = {}
    for pairs in matches.per_frame.values():
        for pid, tid in pairs:
            counts[(tid, pid)] = counts.get((tid, pid), 0) + 1
    if not counts:
        return 0.0
    tids = sorted({t for t, _ in counts})
    pids = sorted({p for _, p in counts})
    mat = np.zeros((len(tids), len(pids)))
    for (t, p), c in counts.items():
        mat[tids.index(t), pids.index(p)] = c
    rows, cols = hungarian(-mat)
    idtp = int(mat[rows, cols].sum())
    idfp = matches.total_pred - idtp
    idfn = matches.total_gt - idtp
    return 2.0 * idtp / (2.0 * idtp + idfp + idfn)


def _frame_view_assoc(
    matches_v1: list[tuple[int, int]],
    matches_v2: list[tuple[int, int]],
    pids_v1: set[int],
    pids_v2: set[int],
    gt_tids_v1: set[int],
    gt_tids_v2: set[int],
):
    """Association bookkeeping for one (frame, view pair).

    Returns (n_pred_pairs, n_correct, n_true_tp_pairs, n_gt_pairs, fn, fp,
    idsw) where "true tp pairs" counts shared identities detected in both
    views and "gt pairs" counts shared identities annotated in both views.
    """
    m1 = dict((tid, pid) for pid, tid in matches_v1)
    m2 = dict((tid, pid) for pid, tid in matches_v2)
    tp1 = {pid: tid for pid, tid in matches_v1}
    tp2 = {pid: tid for pid, tid in matches_v2}

    shared_pids = pids_v1 & pids_v2
    n_pred = len(shared_pids)
    n_correct = sum(
        1 for pid in shared_pids if pid in tp1 and pid in tp2 and tp1[pid] == tp2[pid]
    )
    fp = n_pred - n_correct

    true_tp_tids = set(m1) & set(m2)
    n_true = len(true_tp_tids)
    idsw = sum(1 for tid in true_tp_tids if m1[tid] != m2[tid])

    gt_shared = gt_tids_v1 & gt_tids_v2
    n_gt = len(gt_shared)
    fn = sum(1 for tid in gt_shared if tid not in true_tp_tids)
    return n_pred, n_correct, n_true, n_gt, fn, fp, idsw


def _iter_frame_view_pairs(preds_by_view, gts_by_view, seq_matches):
    n_views = len(preds_by_view)
    if n_views < 2:
        raise ConfigError("cross-view metrics need at least two views")
    frames = sorted({f for view in gts_by_view for f in view} | {f for view in preds_by_view for f in view})
    for f in frames:
        for v1 in range(n_views):
            for v2 in range(v1 + 1, n_views):
                yield _frame_view_assoc(
                    seq_matches[v1].per_frame.get(f, []),
                    seq_matches[v2].per_frame.get(f, []),
                    {pid for pid, *_ in preds_by_view[v1].get(f, [])},
                    {pid for pid, *_ in preds_by_view[v2].get(f, [])},
                    {tid for tid, _ in gts_by_view[v1].get(f, [])},
                    {tid for tid, _ in gts_by_view[v2].get(f, [])},
                )


def aidf1(preds_by_view, gts_by_view, seq_matches, average: str = "per_frame") -> float | None:
    """Geometric mean of precision/recall of predicted cross-view pairs.

    `per_frame` averages the score over (frame, view pair) cells, counting
    empty-both cells as 1; `pooled` computes one score from pooled counts.
    """
    scores = []
    pooled = np.zeros(3)  # correct, pred, true
    for n_pred, n_correct, n_true, *_ in _iter_frame_view_pairs(preds_by_view, gts_by_view, seq_matches):
        pooled += (n_correct, n_pred, n_true)
        if n_pred == 0 and n_true == 0:
            scores.append(1.0)
        else:
            precision = n_correct / n_pred if n_pred else 0.0
            recall = n_correct / n_true if n_true else 0.0
            scores.append(float(np.sqrt(precision * recall)))
    if average == "pooled":
        correct, pred, true = pooled
        if pred == 0 and true == 0:
            return 1.0
        p = correct / pred if pred else 0.0
        r = correct / true if true else 0.0
        return float(np.sqrt(p * r))
    return float(np.mean(scores)) if scores else None


def moaa(preds_by_view, gts_by_view, seq_matches) -> float | None:
    """MOTA-style association accuracy with id switches counted across view
    pairs: 1 - (assoc FN + assoc FP + cross-view IDSW) / true associations."""
    fn = fp = idsw = n_gt = 0
    for _, _, _, gt_pairs, f_n, f_p, sw in _iter_frame_view_pairs(preds_by_view, gts_by_view, seq_matches):
        n_gt += gt_pairs
        fn += f_n
        fp += f_p
        idsw += sw
    if n_gt == 0:
        return None
    return 1.0 - (fn + fp + idsw) / n_gt


@dataclass
class ViewMetrics:
    view: int
    mota: float | None
    idf1: float | None
    tp: int
    fp: int
    fn: int
    idsw: int
    gt: int


@dataclass
class ClipReport:
    clip: str
    views: list[ViewMetrics]
    aidf1: float | None
    moaa: float | None


@dataclass
class EvalReport:
    clips: list[ClipReport]
    mean_mota: float | None
    mean_idf1: float | None
    mean_aidf1: float | None
    mean_moaa: float | None

    def to_json(self) -> dict:
        return asdict(self)


def evaluate_clip(
    clip_name: str,
    preds_by_view,
    gts_by_view,
    iou_min: float = 0.5,
    pair_average: str = "per_frame",
) -> ClipReport:
    seq = [match_sequence(p, g, iou_min) for p, g in zip(preds_by_view, gts_by_view)]
    views = []
    for v, m in enumerate(seq):
        views.append(
            ViewMetrics(
                view=v,
                mota=mota(m),
                idf1=idf1(m),
                tp=m.tp,
                fp=m.fp,
                fn=m.fn,
                idsw=count_id_switches(m),
                gt=m.total_gt,
            )
        )
    return ClipReport(
        clip=clip_name,
        views=views,
        aidf1=aidf1(preds_by_view, gts_by_view, seq, pair_average),
        moaa=moaa(preds_by_view, gts_by_view, seq),
    )


def _mean(vals) -> float | None:
    vals = [v for v in vals if v is not None]
    return float(np.mean(vals)) if vals else None


def build_report(clips: list[ClipReport]) -> EvalReport:
    return EvalReport(
        clips=clips,
        mean_mota=_mean(vm.mota for c in clips for vm in c.views),
        mean_idf1=_mean(vm.idf1 for c in clips for vm in c.views),
        mean_aidf1=_mean(c.aidf1 for c in clips),
        mean_moaa=_mean(c.moaa for c in clips),
    )


def write_report(report: EvalReport, path: str):
    with open(path, "w") as fh:
        json.dump(report.to_json(), fh, indent=2)
        fh.write("\n")


def detection_recall(preds_by_view, gts_by_view, iou_min: float = 0.5) -> float | None:
    """TP / (TP + FN) pooled over views; identity-agnostic."""
    tp = fn = 0
    for p, g in zip(preds_by_view, gts_by_view):
        m = match_sequence(p, g, iou_min)
        tp += m.tp
        fn += m.fn
    return tp / (tp + fn) if (tp + fn) else None


def format_table(report: EvalReport) -> str:
    lines = []
    header = f"{'clip':<18} {'view':>4} {'MOTA':>8} {'IDF1':>8} {'TP':>6} {'FP':>6} {'FN':>6} {'IDSW':>5}"
    lines.append(header)
    lines.append("-" * len(header))

    def fmt(x):
        return "  -   " if x is None else f"{x:8.4f}"

    for clip in report.clips:
        for vm in clip.views:
            lines.append(
                f"{clip.clip:<18} {vm.view:>4} {fmt(vm.mota):>8} {fmt(vm.idf1):>8} "
                f"{vm.tp:>6} {vm.fp:>6} {vm.fn:>6} {vm.idsw:>5}"
            )
        lines.append(f"{clip.clip:<18} {'all':>4} AIDF1={fmt(clip.aidf1).strip()} MOAA={fmt(clip.moaa).strip()}")
    lines.append("-" * len(header))
    lines.append(
        f"means: MOTA={fmt(report.mean_mota).strip()} IDF1={fmt(report.mean_idf1).strip()} "
        f"AIDF1={fmt(report.mean_aidf1).strip()} MOAA={fmt(report.mean_moaa).strip()}"
    )
    return "\n".join(lines)
