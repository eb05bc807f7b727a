"""Metrics: hand-counted fixtures, identity-relabeling invariance, loaders."""

import itertools

import numpy as np
import pytest

from cvtrack.errors import DataError
from cvtrack.metrics import (
    aidf1,
    build_report,
    count_id_switches,
    detection_recall,
    evaluate_clip,
    idf1,
    load_predictions_csv,
    match_frame,
    match_sequence,
    moaa,
    mota,
)

BOX_A = np.array([0.3, 0.3, 0.2, 0.2])
BOX_B = np.array([0.7, 0.7, 0.2, 0.2])
BOX_FAR = np.array([0.1, 0.9, 0.05, 0.05])


def shift(box, dx):
    out = box.copy()
    out[0] += dx
    return out


# --- per-frame matching -----------------------------------------------------------


def test_match_frame_identical():
    gt = np.stack([BOX_A, BOX_B])
    pairs = match_frame(gt, gt, 0.5)
    assert sorted(pairs) == [(0, 0), (1, 1)]


def test_match_frame_empty_preds():
    assert match_frame(np.zeros((0, 4)), np.stack([BOX_A]), 0.5) == []


def test_match_frame_gate_drops_low_overlap():
    # One prediction sits on gt A; the other barely grazes gt B (iou < .5).
    preds = np.stack([BOX_A, shift(BOX_B, 0.15)])
    gts = np.stack([BOX_A, BOX_B])
    from cvtrack.boxes import Box, iou

    assert iou(Box(*preds[1]), Box(*gts[1])) < 0.5
    pairs = match_frame(preds, gts, 0.5)
    assert pairs == [(0, 0)]  # 1 TP; the grazing pred is FP, gt B is FN


# --- sequence fixtures ---------------------------------------------------------------


def seq(preds_by_frame, gts_by_frame):
    preds = {f: [(pid, box, 1.0) for pid, box in items] for f, items in preds_by_frame.items()}
    gts = {f: list(items) for f, items in gts_by_frame.items()}
    return match_sequence(preds, gts, 0.5)


def perfect_two_objects(n_frames):
    gts = {f: [(0, BOX_A), (1, BOX_B)] for f in range(n_frames)}
    preds = {f: [(10, BOX_A), (11, BOX_B)] for f in range(n_frames)}
    return preds, gts


def test_mota_perfect_is_one():
    preds, gts = perfect_two_objects(4)
    assert mota(seq(preds, gts)) == pytest.approx(1.0)


def test_mota_hand_fixture_half():
    # 6 gt boxes over 3 frames; 1 FN, 1 FP, 1 IDSW -> 1 - 3/6 = 0.5.
    gts = {f: [(0, BOX_A), (1, BOX_B)] for f in range(3)}
    preds = {
        0: [(100, BOX_A), (200, BOX_B)],
        1: [(200, BOX_B), (300, BOX_FAR)],  # gt0 missed (FN), far box is FP
        2: [(101, BOX_A), (200, BOX_B)],  # gt0 re-found under a new id: IDSW
    }
    m = seq(preds, gts)
    assert (m.fn, m.fp, count_id_switches(m)) == (1, 1, 1)
    assert mota(m) == pytest.approx(0.5, abs=1e-9)


def test_mota_all_empty_preds_zero():
    gts = {f: [(0, BOX_A)] for f in range(5)}
    m = seq({f: [] for f in range(5)}, gts)
    assert mota(m) == pytest.approx(0.0)


def test_mota_undefined_without_gt():
    m = seq({0: [(1, BOX_A)]}, {0: []})
    assert mota(m) is None


def test_idf1_perfect_is_one():
    preds, gts = perfect_two_objects(6)
    assert idf1(seq(preds, gts)) == pytest.approx(1.0)


def test_idf1_split_identity_half():
    # One gt identity covered half by pred id a, half by pred id b.
    n = 8
    gts = {f: [(0, BOX_A)] for f in range(n)}
    preds = {f: [(1 if f < n // 2 else 2, BOX_A)] for f in range(n)}
    assert idf1(seq(preds, gts)) == pytest.approx(0.5, abs=1e-9)


def idf1_brute_force(matches):
    """Exhaustive best identity bijection (oracle for small fixtures)."""
    counts = {}
    for pairs in matches.per_frame.values():
        for pid, tid in pairs:
            counts[(tid, pid)] = counts.get((tid, pid), 0) + 1
    tids = sorted({t for t, _ in counts})
    pids = sorted({p for _, p in counts})
    best = 0
    k = min(len(tids), len(pids))
    for chosen_t in itertools.permutations(tids, k):
        for chosen_p in itertools.permutations(pids, k):
            best = max(best, sum(counts.get((t, p), 0) for t, p in zip(chosen_t, chosen_p)))
    return 2.0 * best / (2.0 * best + (matches.total_pred - best) + (matches.total_gt - best))


def test_idf1_fresh_id_every_frame_matches_brute_force():
    n = 4
    gts = {f: [(0, BOX_A)] for f in range(n)}
    preds = {f: [(f + 10, BOX_A)] for f in range(n)}
    m = seq(preds, gts)
    got = idf1(m)
    want = idf1_brute_force(m)
    assert got == pytest.approx(want, abs=1e-12)
    assert got == pytest.approx(1.0 / n, abs=1e-12)


def test_idf1_random_fixtures_match_brute_force():
    rng = np.random.default_rng(0)
    boxes = [BOX_A, BOX_B, BOX_FAR]
    for _ in range(30):
        gts = {}
        preds = {}
        for f in range(4):
            gts[f] = [(i, boxes[i]) for i in range(int(rng.integers(0, 3)))]
            preds[f] = [(int(rng.integers(0, 4)) + 10, boxes[i]) for i, _ in enumerate(gts[f])]
        m = seq(preds, gts)
        if m.total_gt == 0 and m.total_pred == 0:
            continue
        assert idf1(m) == pytest.approx(idf1_brute_force(m), abs=1e-12)


# --- cross-view metrics ----------------------------------------------------------------


def two_view_setup(pred_ids_by_view_frame):
    """Two objects visible in both views every frame; preds have perfect
    boxes and the given ids: pred_ids_by_view_frame[v][f] = (id_obj0, id_obj1)."""
    n_frames = len(pred_ids_by_view_frame[0])
    gts_by_view = [{f: [(0, BOX_A), (1, BOX_B)] for f in range(n_frames)} for _ in range(2)]
    preds_by_view = []
    for v in range(2):
        frames = {}
        for f in range(n_frames):
            i0, i1 = pred_ids_by_view_frame[v][f]
            frames[f] = [(i0, BOX_A, 1.0), (i1, BOX_B, 1.0)]
        preds_by_view.append(frames)
    seqs = [match_sequence(p, g, 0.5) for p, g in zip(preds_by_view, gts_by_view)]
    return preds_by_view, gts_by_view, seqs


def test_aidf1_perfect_is_one():
    ids = [[(5, 6)] * 3, [(5, 6)] * 3]
    p, g, s = two_view_setup(ids)
    assert aidf1(p, g, s) == pytest.approx(1.0)


def test_aidf1_no_predicted_associations_zero():
    # Different id spaces per view: no shared pids at all, but true pairs exist.
    ids = [[(1, 2)] * 3, [(3, 4)] * 3]
    p, g, s = two_view_setup(ids)
    assert aidf1(p, g, s) == pytest.approx(0.0)


def aidf1_pairs_oracle(p, g, s, frame, v1=0, v2=1):
    """Exhaustive pair enumeration for one frame of a two-view fixture."""
    m1 = {pid: tid for pid, tid in s[v1].per_frame[frame]}
    m2 = {pid: tid for pid, tid in s[v2].per_frame[frame]}
    pids1 = [pid for pid, *_ in p[v1][frame]]
    pids2 = [pid for pid, *_ in p[v2][frame]]
    pred_pairs = {(a, b) for a in pids1 for b in pids2 if a == b}
    correct = {(a, b) for a, b in pred_pairs if a in m1 and b in m2 and m1[a] == m2[b]}
    tids1 = {tid for _, tid in s[v1].per_frame[frame]}
    tids2 = {tid for _, tid in s[v2].per_frame[frame]}
    true_pairs = tids1 & tids2
    if not pred_pairs and not true_pairs:
        return 1.0
    prec = len(correct) / len(pred_pairs) if pred_pairs else 0.0
    rec = len(correct) / len(true_pairs) if true_pairs else 0.0
    return float(np.sqrt(prec * rec))


def test_aidf1_swapped_id_matches_pair_oracle():
    # Frame 1 in view 1 swaps the two ids: half the associations break there.
    ids = [[(5, 6), (5, 6), (5, 6)], [(5, 6), (6, 5), (5, 6)]]
    p, g, s = two_view_setup(ids)
    want = np.mean([aidf1_pairs_oracle(p, g, s, f) for f in range(3)])
    got = aidf1(p, g, s)
    assert got == pytest.approx(float(want), abs=1e-12)
    assert got < 1.0


def test_moaa_perfect_is_one():
    ids = [[(5, 6)] * 2, [(5, 6)] * 2]
    p, g, s = two_view_setup(ids)
    assert moaa(p, g, s) == pytest.approx(1.0)


def test_moaa_hand_fixture_three_quarters():
    # 2 frames x 2 objects = 4 true associations; one cross-view id
    # disagreement (object 0, frame 1) and no FP/FN -> 1 - 1/4 = 0.75.
    ids = [[(5, 6), (5, 6)], [(5, 6), (9, 6)]]
    p, g, s = two_view_setup(ids)
    assert moaa(p, g, s) == pytest.approx(0.75, abs=1e-9)


def test_moaa_symmetric_in_view_order():
    ids = [[(5, 6), (5, 6)], [(5, 6), (9, 6)]]
    p, g, s = two_view_setup(ids)
    p2, g2, s2 = list(reversed(p)), list(reversed(g)), list(reversed(s))
    assert moaa(p, g, s) == pytest.approx(moaa(p2, g2, s2), abs=1e-12)


# --- gt-as-predictions and relabeling invariance ------------------------------------------


def random_fixture(rng, n_frames=5, n_objects=3, n_views=2):
    boxes = [
        np.array([0.2 + 0.25 * i, 0.3 + 0.2 * (i % 2), 0.15, 0.2]) for i in range(n_objects)
    ]
    gts_by_view = []
    preds_by_view = []
    for v in range(n_views):
        gts = {}
        preds = {}
        for f in range(n_frames):
            present = [i for i in range(n_objects) if rng.random() > 0.2]
            gts[f] = [(i, boxes[i]) for i in present]
            preds[f] = []
            for i in present:
                if rng.random() > 0.15:  # detected
                    pid = i if rng.random() > 0.1 else int(rng.integers(0, n_objects))
                    preds[f].append((pid, boxes[i] + rng.normal(0, 0.004, 4), 1.0))
        gts_by_view.append(gts)
        preds_by_view.append(preds)
    return preds_by_view, gts_by_view


def metrics_tuple(preds_by_view, gts_by_view):
    seqs = [match_sequence(p, g, 0.5) for p, g in zip(preds_by_view, gts_by_view)]
    per_view = [(mota(m), idf1(m)) for m in seqs]
    return per_view, aidf1(preds_by_view, gts_by_view, seqs), moaa(preds_by_view, gts_by_view, seqs)


def test_gt_as_predictions_scores_one_everywhere():
    rng = np.random.default_rng(1)
    _, gts_by_view = random_fixture(rng)
    preds = [
        {f: [(tid, box, 1.0) for tid, box in items] for f, items in g.items()} for g in gts_by_view
    ]
    per_view, a, m = metrics_tuple(preds, gts_by_view)
    for mo, idf in per_view:
        assert mo == pytest.approx(1.0)
        assert idf == pytest.approx(1.0)
    assert a == pytest.approx(1.0)
    assert m == pytest.approx(1.0)


def test_global_relabeling_invariance():
    rng = np.random.default_rng(2)
    for _ in range(25):
        preds_by_view, gts_by_view = random_fixture(rng)
        base = metrics_tuple(preds_by_view, gts_by_view)
        all_ids = sorted({pid for pv in preds_by_view for items in pv.values() for pid, *_ in items})
        target = rng.permutation(len(all_ids))
        mapping = {pid: 1000 + int(target[i]) for i, pid in enumerate(all_ids)}
        relabeled = [
            {f: [(mapping[pid], box, c) for pid, box, c in items] for f, items in pv.items()}
            for pv in preds_by_view
        ]
        got = metrics_tuple(relabeled, gts_by_view)
        for (m1, i1), (m2, i2) in zip(base[0], got[0]):
            if m1 is None:
                assert m2 is None
            else:
                assert m1 == pytest.approx(m2, abs=1e-12)
                assert i1 == pytest.approx(i2, abs=1e-12)
        for x, y in ((base[1], got[1]), (base[2], got[2])):
            if x is None:
                assert y is None
            else:
                assert x == pytest.approx(y, abs=1e-12)


# --- report and loaders -------------------------------------------------------------------


def test_evaluate_clip_and_report_means():
    ids = [[(5, 6)] * 3, [(5, 6)] * 3]
    p, g, s = two_view_setup(ids)
    clip = evaluate_clip("clip0", p, g)
    rep = build_report([clip])
    assert rep.mean_mota == pytest.approx(1.0)
    assert rep.mean_idf1 == pytest.approx(1.0)
    assert rep.mean_aidf1 == pytest.approx(1.0)
    assert rep.mean_moaa == pytest.approx(1.0)
    assert clip.views[0].gt == 6


def test_detection_recall_counts():
    ids = [[(5, 6)] * 2, [(5, 6)] * 2]
    p, g, _ = two_view_setup(ids)
    # drop one prediction from one frame of view 0
    p[0][0] = p[0][0][:1]
    assert detection_recall(p, g) == pytest.approx(7 / 8)


def test_load_predictions_rejects_bad_id(tmp_path):
    path = tmp_path / "view_0.csv"
    path.write_text("1,7,10,10,50,50,0.9,-1,-1,-1\n2,xx,10,10,50,50,0.9,-1,-1,-1\n")
    with pytest.raises(DataError, match=r"view_0\.csv:2"):
        load_predictions_csv(str(path), canvas=1000)


def test_load_predictions_round_trip_boxes(tmp_path):
    path = tmp_path / "view_0.csv"
    path.write_text("3,7,100.0,200.0,50.0,80.0,0.9,-1,-1,-1\n")
    preds = load_predictions_csv(str(path), canvas=1000)
    assert list(preds) == [2]  # 1-based frame 3 -> index 2
    pid, box, conf = preds[2][0]
    assert pid == 7
    np.testing.assert_allclose(box, [0.125, 0.24, 0.05, 0.08])
    assert conf == pytest.approx(0.9)
