"""Central finite-difference validation of backward rules.

The forward function is re-evaluated with perturbed parameter entries, so
the check never touches the tape's backward path: it is an independent
oracle for every analytic gradient in the package.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .tensor import Tape, Tensor

# Relative error floor: entries whose analytic and numeric gradients are
# both below this scale are compared in absolute terms instead.
REL_FLOOR = 1e-4


def rel_err(a: float, b: float) -> float:
    return abs(a - b) / max(abs(a) + abs(b), REL_FLOOR)


def fd_entry(f: Callable[[], float], param: Tensor, flat_index: int, h: float = 1e-5) -> float:
    """Central difference of f w.r.t. one flat entry of param."""
    flat = param.array.reshape(-1)
    saved = flat[flat_index]
    flat[flat_index] = saved + h
    f_plus = f()
    flat[flat_index] = saved - h
    f_minus = f()
    flat[flat_index] = saved
    return (f_plus - f_minus) / (2.0 * h)


def check_gradients(
    build_loss: Callable[[], Tensor],
    params: dict[str, Tensor],
    rng: np.random.Generator,
    entries_per_param: int = 6,
    h: float = 1e-5,
    discontinuity_guard: bool = False,
) -> dict[str, float]:
    """Max relative FD error per parameter, sampling entries of each tensor.

    `build_loss` must be a deterministic function of the live parameter
    arrays (it is called repeatedly with perturbed entries).

    With `discontinuity_guard`, an entry that disagrees is re-estimated at
    h/10: if the two FD estimates disagree with each other the loss is
    locally non-smooth there (e.g. a bipartite match flipped inside the
    stencil) and the entry is skipped; a wrong backward rule gives stable
    FD estimates and is still reported.
    """
    for p in params.values():
        p.zero_grad()
    with Tape() as tape:
        loss = build_loss()
    tape.backward(loss)
    analytic = {
        name: (p.grad.copy() if p.grad is not None else np.zeros_like(p.array))
        for name, p in params.items()
    }
    for p in params.values():
        p.zero_grad()

    def f_scalar() -> float:
        return build_loss().item()

    errs: dict[str, float] = {}
    for name, p in params.items():
        n = p.array.size
        k = min(entries_per_param, n)
        idx = rng.choice(n, size=k, replace=False)
        worst = 0.0
        flat_analytic = analytic[name].reshape(-1)
        for i in idx:
            fd = fd_entry(f_scalar, p, int(i), h)
            err = rel_err(flat_analytic[int(i)], fd)
            if err >= REL_FLOOR and discontinuity_guard:
                fd_small = fd_entry(f_scalar, p, int(i), h / 10.0)
                if rel_err(fd, fd_small) > 0.3:
                    continue  # non-smooth point, FD itself is unreliable here
                err = rel_err(flat_analytic[int(i)], fd_small)
            worst = max(worst, err)
        errs[name] = worst
    return errs


def max_err(errs: dict[str, float]) -> float:
    return max(errs.values()) if errs else 0.0


# --- full-model suite ---------------------------------------------------------


@dataclass
class CheckResult:
    name: str
    max_rel_err: float
    passed: bool


@dataclass
class SuiteReport:
    results: list[CheckResult]
    threshold: float

    @property
    def passed(self) -> bool:
        return all(r.passed for r in self.results)

    def format(self) -> str:
        width = max(len(r.name) for r in self.results) + 2
        lines = [f"{'check':<{width}} {'max rel err':>12}  status"]
        for r in self.results:
            lines.append(f"{r.name:<{width}} {r.max_rel_err:>12.3e}  {'PASS' if r.passed else 'FAIL'}")
        lines.append(f"overall: {'PASS' if self.passed else 'FAIL'} (threshold {self.threshold:g})")
        return "\n".join(lines)


def _primitive_checks(rng):
    from . import tensor as T

    def t(shape, scale=1.0):
        return T.Tensor(rng.normal(scale=scale, size=shape), requires_grad=True)

    a34, b34 = t((3, 4)), t((3, 4))
    m35, m52 = t((3, 5)), t((5, 2))
    pos = T.Tensor(1.0 + rng.random((3, 4)), requires_grad=True)
    att_q, att_k, att_v = t((4, 8)), t((5, 8)), t((5, 8))
    cat_a, cat_b = t((2, 3)), t((3, 3))
    ln = t((3, 8))

    checks = {
        "matmul": (lambda: (m35 @ m52).sum(), {"a": m35, "b": m52}),
        "add": (lambda: T.add(a34, b34).sum(), {"a": a34, "b": b34}),
        "mul": (lambda: T.mul(a34, b34).sum(), {"a": a34, "b": b34}),
        "div": (lambda: T.div(a34, pos).sum(), {"a": a34, "b": pos}),
        "maximum": (lambda: T.maximum(a34, b34).sum(), {"a": a34, "b": b34}),
        "minimum": (lambda: T.minimum(a34, b34).sum(), {"a": a34, "b": b34}),
        "relu": (lambda: T.relu(a34).sum(), {"a": a34}),
        "sigmoid": (lambda: T.sigmoid(a34).sum(), {"a": a34}),
        "log": (lambda: T.log(pos).sum(), {"a": pos}),
        "clip": (lambda: T.clip(a34, -0.5, 0.5).sum(), {"a": a34}),
        "mean": (lambda: T.mean(a34), {"a": a34}),
        "sum": (lambda: T.sum_all(a34), {"a": a34}),
        "transpose": (lambda: T.mul(T.transpose(a34), T.transpose(a34)).sum(), {"a": a34}),
        "reshape": (lambda: T.mul(T.reshape(a34, (2, 6)), 2.0).sum(), {"a": a34}),
        "softmax_rows": (lambda: T.mul(T.softmax_rows(a34), b34).sum(), {"a": a34, "b": b34}),
        "layer_norm": (lambda: T.mul(T.layer_norm(ln), 3.0).sum(), {"a": ln}),
        "concat": (lambda: T.mul(T.concat([cat_a, cat_b]), 2.0).sum(), {"a": cat_a, "b": cat_b}),
        "slice": (lambda: T.slice_cols(T.slice_rows(a34, 0, 2), 1, 4).sum(), {"a": a34}),
        "take_rows": (lambda: T.take_rows(a34, [0, 2, 2]).sum(), {"a": a34}),
        "scaled_attention": (
            lambda: T.mul(T.scaled_attention(att_q, att_k, att_v, 2), 2.0).sum(),
            {"q": att_q, "k": att_k, "v": att_v},
        ),
    }
    return checks


def _module_checks(rng):
    from .config import LossWeights, ModelConfig
    from .model import TrackingModel
    from .scene import Annotation, FrameRecord, ViewFrame
    from .tensor import Tensor
    from .tracker import associate, init_tracks, update_tracks
    from .detector import detect_view, detection_loss
    from .train import forward_clip

    cfg = ModelConfig(
        d_e=12,
        d_tok=8,
        num_slots=5,
        num_tracks=4,
        num_views=3,
        det_layers=2,
        track_layers=1,
        heads=2,
        ffn_dim=24,
    )
    model = TrackingModel(cfg, seed=int(rng.integers(2**31)))
    toks = [rng.normal(size=(int(rng.integers(1, 4)), cfg.d_tok)) for _ in range(cfg.num_views)]

    def anns_for(v):
        out = []
        for i in range(2):
            box = np.concatenate([rng.uniform(0.25, 0.75, 2), rng.uniform(0.1, 0.3, 2)])
            out.append(Annotation(tid=i, box=box, vis=True))
        return out

    frames = [
        FrameRecord(
            frame=f,
            views=[ViewFrame(view=v, gt=anns_for(v), tokens=toks[v]) for v in range(cfg.num_views)],
        )
        for f in range(2)
    ]

    det_params = dict(model.detector.named_parameters("detector"))
    trk_params = dict(model.tracker.named_parameters("tracker"))
    head_params = dict(model.box_heads.named_parameters("track_box_heads"))

    def detector_loss():
        det = detect_view(toks[0], model.detector)
        loss, _ = detection_loss(det, frames[0].views[0].gt, cfg)
        return loss

    probe = Tensor(rng.normal(size=(cfg.d_e, 1)))

    def tracker_forward():
        state = init_tracks(model.tracker)
        state.embeddings = model.tracker.init_queries
        dets = [detect_view(toks[v], model.detector, v) for v in range(cfg.num_views)]
        out = update_tracks(state, dets, model.tracker)
        a = associate(dets[0].embeddings, out.embeddings, model.tracker, 0)
        return ((out.embeddings @ probe)).sum() + a.A.sum()

    def loss_total(weights):
        def build():
            state = init_tracks(model.tracker)
            state.embeddings = model.tracker.init_queries
            bd, _ = forward_clip(model, frames, state, weights)
            return bd.total

        return build

    def loss_part(part):
        def build():
            state = init_tracks(model.tracker)
            state.embeddings = model.tracker.init_queries
            bd, _ = forward_clip(model, frames, state, LossWeights())
            return getattr(bd, part)

        return build

    all_params = {**det_params, **trk_params, **head_params}
    checks = {
        "detect_view+detection_loss": (detector_loss, det_params),
        "update_tracks+associate": (tracker_forward, {**trk_params, **det_params}),
        "loss_det": (loss_part("l_det"), det_params),
        "loss_det_aux": (loss_part("l_det_aux"), det_params),
        "loss_across_cams": (loss_part("l_across_cams"), trk_params),
        "loss_across_frames": (loss_part("l_across_frames"), trk_params),
        "loss_track_iou": (loss_part("l_track_iou"), {**head_params, **trk_params}),
        "loss_track_giou": (loss_part("l_track_giou"), {**head_params, **trk_params}),
        "loss_total": (loss_total(LossWeights()), all_params),
    }
    return checks


def run_suite(
    seed: int = 0,
    threshold: float = 1e-4,
    entries_per_param: int = 2,
    corrupt_op: str | None = None,
) -> SuiteReport:
    """Finite-difference validation of every primitive, module forward, and
    loss on randomized small instances.  `corrupt_op` deliberately breaks
    one op's backward to prove the suite catches it."""
    from .tensor import corrupt_backward

    rng = np.random.default_rng(seed)
    checks: dict = {}
    checks.update(_primitive_checks(rng))
    checks.update(_module_checks(rng))

    all_params = [p for _, ps in checks.values() for p in ps.values()]
    results = []
    for name, (build, params) in checks.items():
        # Backward flows into parameters outside this check's dict too;
        # clear everything so analytic gradients never accumulate across checks.
        for p in all_params:
            p.zero_grad()
        if corrupt_op is not None:
            with corrupt_backward(corrupt_op):
                errs = check_gradients(
                    build, params, rng, entries_per_param=entries_per_param, discontinuity_guard=True
                )
        else:
            errs = check_gradients(
                build, params, rng, entries_per_param=entries_per_param, discontinuity_guard=True
            )
        worst = max_err(errs)
        results.append(CheckResult(name=name, max_rel_err=worst, passed=worst < threshold))
    return SuiteReport(results=results, threshold=threshold)
