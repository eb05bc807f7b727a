"""Online inference: lifecycle, online property, output modes, CSV format."""

import numpy as np
import pytest

from conftest import tiny_model_config, tiny_scene_config
from cvtrack.config import InferenceConfig
from cvtrack.detector import DetectionSet
from cvtrack.infer import run_sequence, step_frame, write_prediction_csvs
from cvtrack.model import TrackingModel
from cvtrack.scene import generate_scene
from cvtrack.tensor import Tensor
from cvtrack.tracker import init_tracks


def dets_with_probs(model, probs_by_view, rng):
    """DetectionSets with chosen confidences and random embeddings/boxes."""
    cfg = model.cfg
    out = []
    for v, probs in enumerate(probs_by_view):
        out.append(
            DetectionSet(
                view=v,
                embeddings=Tensor(rng.normal(size=(cfg.num_slots, cfg.d_e))),
                class_prob=Tensor(np.asarray(probs, dtype=np.float64)),
                boxes=Tensor(rng.uniform(0.2, 0.8, (cfg.num_slots, 4))),
            )
        )
    return out


def suppressed(model, rng):
    z = np.zeros(model.cfg.num_slots)
    return dets_with_probs(model, [z] * model.cfg.num_views, rng)


def test_reset_after_five_missed_frames_bit_exact():
    model = TrackingModel(tiny_model_config(), seed=0)
    cfg = InferenceConfig(miss_reset_frames=4)
    rng = np.random.default_rng(1)
    state = init_tracks(model.tracker)
    for frame in range(5):
        state, _ = step_frame(state, suppressed(model, rng), model, cfg)
        if frame < 4:
            # drifted away from the initial queries, not yet reset
            assert not np.array_equal(state.embeddings.array, model.tracker.init_queries.array)
    np.testing.assert_array_equal(state.embeddings.array, model.tracker.init_queries.array)
    assert all(g is None for g in state.global_ids)
    assert all(state.miss_count == 0)


def test_fresh_global_id_after_reset():
    model = TrackingModel(tiny_model_config(), seed=0)
    cfg = InferenceConfig(miss_reset_frames=4, confidence_threshold=0.9)
    rng = np.random.default_rng(2)
    state = init_tracks(model.tracker)

    probs = np.zeros(model.cfg.num_slots)
    probs[0] = 0.99
    strong = lambda: dets_with_probs(model, [probs] * model.cfg.num_views, rng)
    state, _ = step_frame(state, strong(), model, cfg)
    first_ids = {g for g in state.global_ids if g is not None}
    assert first_ids  # something got matched and labeled

    for _ in range(5):
        state, _ = step_frame(state, suppressed(model, rng), model, cfg)
    assert all(g is None for g in state.global_ids)

    state, _ = step_frame(state, strong(), model, cfg)
    new_ids = {g for g in state.global_ids if g is not None}
    assert new_ids
    assert not (new_ids & first_ids)  # ids are never reused


def test_single_detection_matches_one_track():
    model = TrackingModel(tiny_model_config(), seed=0)
    cfg = InferenceConfig(confidence_threshold=0.9)
    rng = np.random.default_rng(3)
    probs = np.zeros(model.cfg.num_slots)
    probs[2] = 0.95
    zero = np.zeros(model.cfg.num_slots)
    state = init_tracks(model.tracker)
    state, _ = step_frame(state, dets_with_probs(model, [probs, zero], rng), model, cfg)
    assert sum(1 for m in state.miss_count if m == 0) == 1
    assert sum(1 for m in state.miss_count if m == 1) == model.cfg.num_tracks - 1
    assert sum(1 for g in state.global_ids if g is not None) == 1


def test_at_most_one_detection_per_track_per_view():
    model = TrackingModel(tiny_model_config(), seed=0)
    cfg = InferenceConfig(confidence_threshold=0.5)
    rng = np.random.default_rng(4)
    high = np.full(model.cfg.num_slots, 0.99)
    state = init_tracks(model.tracker)
    state, tracked = step_frame(state, dets_with_probs(model, [high, high], rng), model, cfg)
    for view_items in tracked.per_view:
        ids = [it.global_id for it in view_items]
        assert len(ids) == len(set(ids))


def scene_and_model():
    scfg = tiny_scene_config(num_frames=30)
    ds = generate_scene(scfg)
    mcfg = tiny_model_config()
    model = TrackingModel(mcfg, seed=5)
    return ds, model


def test_run_sequence_online_prefix_property():
    ds, model = scene_and_model()
    cfg = InferenceConfig(confidence_threshold=0.5)
    full, _ = run_sequence(ds, model, cfg)
    import copy

    prefix_ds = copy.deepcopy(ds)
    prefix_ds.frames = prefix_ds.frames[:12]
    prefix, _ = run_sequence(prefix_ds, model, cfg)
    assert len(prefix) == 12
    for fa, fb in zip(prefix, full[:12]):
        assert fa.frame_index == fb.frame_index
        for va, vb in zip(fa.per_view, fb.per_view):
            assert [(x.global_id, tuple(x.box)) for x in va] == [
                (y.global_id, tuple(y.box)) for y in vb
            ]


def test_run_sequence_deterministic_csvs(tmp_path):
    ds, model = scene_and_model()
    cfg = InferenceConfig(confidence_threshold=0.5)
    for sub in ("a", "b"):
        frames, _ = run_sequence(ds, model, cfg)
        write_prediction_csvs(frames, str(tmp_path / sub), model.cfg.num_views, canvas=1000)
    for v in range(model.cfg.num_views):
        b1 = (tmp_path / "a" / f"view_{v}.csv").read_bytes()
        b2 = (tmp_path / "b" / f"view_{v}.csv").read_bytes()
        assert b1 == b2


def test_run_sequence_row_capacity_bound(tmp_path):
    ds, model = scene_and_model()
    cfg = InferenceConfig(confidence_threshold=0.1)
    frames, stats = run_sequence(ds, model, cfg)
    paths = write_prediction_csvs(frames, str(tmp_path), model.cfg.num_views, canvas=1000)
    for p in paths:
        rows = [l for l in open(p) if l.strip()]
        assert len(rows) <= ds.num_frames * model.cfg.num_tracks
    assert stats["frames"] == ds.num_frames


def test_track_boxes_mode_emits_every_active_track_in_every_view():
    model = TrackingModel(tiny_model_config(), seed=0)
    rng = np.random.default_rng(6)
    probs = np.zeros(model.cfg.num_slots)
    probs[0] = 0.99
    zero = np.zeros(model.cfg.num_slots)
    state = init_tracks(model.tracker)
    # Match in view 0 only; track-box mode must still emit in view 1.
    cfg = InferenceConfig(confidence_threshold=0.9, output_mode="track_boxes")
    state, tracked = step_frame(state, dets_with_probs(model, [probs, zero], rng), model, cfg)
    n_active = sum(1 for g in state.global_ids if g is not None)
    assert n_active == 1
    for view_items in tracked.per_view:
        assert len(view_items) == n_active
        assert np.all((view_items[0].box > 0) & (view_items[0].box < 1))


def test_detection_mode_emits_only_matched_views():
    model = TrackingModel(tiny_model_config(), seed=0)
    rng = np.random.default_rng(7)
    probs = np.zeros(model.cfg.num_slots)
    probs[0] = 0.99
    zero = np.zeros(model.cfg.num_slots)
    cfg = InferenceConfig(confidence_threshold=0.9, output_mode="detection_boxes")
    state = init_tracks(model.tracker)
    state, tracked = step_frame(state, dets_with_probs(model, [probs, zero], rng), model, cfg)
    assert len(tracked.per_view[0]) == 1
    assert len(tracked.per_view[1]) == 0


def test_csv_format_columns(tmp_path):
    ds, model = scene_and_model()
    frames, _ = run_sequence(ds, model, InferenceConfig(confidence_threshold=0.5))
    paths = write_prediction_csvs(frames, str(tmp_path), model.cfg.num_views, canvas=1000)
    for p in paths:
        for line in open(p):
            cols = line.strip().split(",")
            if not cols or cols == [""]:
                continue
            assert len(cols) == 10
            assert int(cols[0]) >= 1
            int(cols[1])
            assert cols[7] == cols[8] == cols[9] == "-1"


def test_run_sequence_dimension_mismatch():
    ds, _ = scene_and_model()
    wrong = TrackingModel(tiny_model_config(num_views=3), seed=0)
    from cvtrack.errors import ConfigError

    with pytest.raises(ConfigError, match="views"):
        run_sequence(ds, wrong, InferenceConfig())
