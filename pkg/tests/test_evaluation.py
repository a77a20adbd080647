import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from amodalseg.evaluation import (
    COCO_IOU_THRESHOLDS,
    EvalConfig,
    evaluate,
    format_table,
    interpolated_precision,
    invariance_probe,
    match_image,
    metrics_row,
)
from amodalseg.model import AmodalModel, ModelConfig, PipelineOptions
from amodalseg.synthetic import SceneSpec, make_invariance_pairs
from amodalseg.types import BoundingBox, Detection, InstanceAnnotation, Mask
from oracles import brute_ap

SIZE = (40, 40)


def rect(x0, y0, x1, y1):
    g = np.zeros(SIZE)
    g[y0:y1, x0:x1] = 1
    return g


def gt(r, cat=1, visible=None):
    a = rect(*r)
    return InstanceAnnotation.from_masks(cat, a, rect(*visible) if visible else a)


def det(r, score, cat=1):
    g = rect(*r)
    return Detection(BoundingBox(*r), cat, score, Mask(g), Mask(g))


def pixel_iou(a, b):
    pa = {(y, x) for y in range(a[1], a[3]) for x in range(a[0], a[2])}
    pb = {(y, x) for y in range(b[1], b[3]) for x in range(b[0], b[2])}
    return len(pa & pb) / len(pa | pb)


# 4 GT over two images, 6 predictions: duplicates, a near miss, a false positive and partial overlaps
GT_RECTS = {0: [(0, 0, 10, 10), (20, 20, 30, 30)], 1: [(5, 5, 15, 15), (0, 20, 12, 40)]}
DET_RECTS = [
    (0, (0, 0, 10, 9), 0.95),
    (0, (0, 0, 10, 10), 0.90),
    (0, (21, 21, 30, 30), 0.60),
    (1, (5, 5, 15, 13), 0.85),
    (1, (30, 30, 38, 38), 0.70),
    (1, (0, 22, 12, 36), 0.40),
]


def hand_case():
    gts = {img: [gt(r) for r in rs] for img, rs in GT_RECTS.items()}
    dets = {0: [], 1: []}
    for img, r, s in DET_RECTS:
        dets[img].append(det(r, s))
    return dets, gts


def brute_case():
    gt_list = [(img, r) for img, rs in GT_RECTS.items() for r in rs]
    ious = [[pixel_iou(r, g) if img == gi else 0.0 for gi, g in gt_list] for img, r, _ in DET_RECTS]
    return brute_ap([s for _, _, s in DET_RECTS], [img for img, _, _ in DET_RECTS], ious,
                    [img for img, _ in gt_list], COCO_IOU_THRESHOLDS)


def test_hand_case_matches_brute_force():
    dets, gts = hand_case()
    res = evaluate(dets, gts)["amodal"]
    ap, per_t, recalls = brute_case()
    assert abs(res["AP"] - ap) <= 1e-9
    assert abs(res["AP50"] - per_t[0]) <= 1e-9
    assert abs(res["AP75"] - per_t[5]) <= 1e-9
    assert abs(res["AR"] - np.mean(recalls)) <= 1e-9
    assert 0 < ap < 1


@st.composite
def random_case(draw):
    gts, dets = {}, {}
    for img in range(draw(st.integers(1, 3))):
        gts[img] = []
        for _ in range(draw(st.integers(0, 3))):
            x, y = draw(st.integers(0, 30)), draw(st.integers(0, 30))
            gts[img].append((x, y, x + draw(st.integers(2, 10)), y + draw(st.integers(2, 10))))
        dets[img] = []
        for _ in range(draw(st.integers(0, 4))):
            x, y = draw(st.integers(0, 30)), draw(st.integers(0, 30))
            dets[img].append(((x, y, x + draw(st.integers(2, 10)), y + draw(st.integers(2, 10))),
                              draw(st.floats(0.01, 1.0))))
    return gts, dets


@settings(max_examples=60, deadline=None)
@given(random_case())
def test_random_cases_match_brute_force(case):
    gt_rects, det_rects = case
    gt_list = [(img, r) for img, rs in gt_rects.items() for r in rs]
    flat = [(img, r, s) for img, ds in det_rects.items() for r, s in ds]
    if not gt_list:
        return
    res = evaluate({img: [det(r, s) for r, s in ds] for img, ds in det_rects.items()},
                   {img: [gt(r) for r in rs] for img, rs in gt_rects.items()})["amodal"]
    ious = [[pixel_iou(r, g) if img == gi else 0.0 for gi, g in gt_list] for img, r, _ in flat]
    ap, _, recalls = brute_ap([s for *_, s in flat], [img for img, *_ in flat], ious,
                              [img for img, _ in gt_list], COCO_IOU_THRESHOLDS)
    # equal scores resolve by image, then input order, in both routes
    assert abs(res["AP"] - ap) <= 1e-9
    assert abs(res["AR"] - np.mean(recalls)) <= 1e-9


def test_perfect_and_empty():
    _, gts = hand_case()
    perfect = {img: [det(r, 1.0) for r in rs] for img, rs in GT_RECTS.items()}
    res = evaluate(perfect, gts)
    for side in ("amodal", "visible"):
        assert res[side]["AP"] == 1.0 and res[side]["AR"] == 1.0
    none = evaluate({}, gts)
    assert none["amodal"]["AP"] == 0.0 and none["amodal"]["AR"] == 0.0


def test_permutation_invariance():
    dets, gts = hand_case()
    base = evaluate(dets, gts)
    rng = np.random.default_rng(0)
    for _ in range(5):
        shuffled = {img: [ds[i] for i in rng.permutation(len(ds))] for img, ds in dets.items()}
        assert evaluate(shuffled, gts) == base


@settings(max_examples=40, deadline=None)
@given(random_case(), st.data())
def test_adding_a_correct_top_detection_never_lowers_ap(case, data):
    gt_rects, det_rects = case
    gts = {img: [gt(r) for r in rs] for img, rs in gt_rects.items()}
    if not any(gts.values()):
        return
    dets = {img: [det(r, s) for r, s in ds] for img, ds in det_rects.items()}
    before = evaluate(dets, gts)["amodal"]["AP"]
    img = data.draw(st.sampled_from([i for i, rs in gt_rects.items() if rs]))
    target = gt_rects[img][data.draw(st.integers(0, len(gt_rects[img]) - 1))]
    # the new detection is perfect and outranks everything, so it claims the target first
    dets[img] = [det(target, 1.0)] + dets[img]
    assert evaluate(dets, gts)["amodal"]["AP"] >= before - 1e-12


def test_visible_side_uses_visible_masks():
    g = gt((0, 0, 20, 20), visible=(0, 0, 20, 10))
    amodal_perfect = det((0, 0, 20, 20), 0.9)
    res = evaluate({0: [amodal_perfect]}, {0: [g]})
    assert res["amodal"]["AP"] == 1.0
    # visible IoU 0.5 clears only the first of ten thresholds
    assert res["visible"]["AP"] == pytest.approx(0.1, abs=1e-12)
    assert res["visible"]["AP50"] == 1.0


def test_occluded_ap_ignores_unoccluded_gt():
    occluded = gt((0, 0, 20, 20), visible=(0, 0, 20, 10))     # rate 0.5
    clear = gt((25, 25, 35, 35))                               # rate 0
    # one detection hits the clear GT, none hits the occluded one
    res = evaluate({0: [det((25, 25, 35, 35), 0.9)]}, {0: [occluded, clear]})["amodal"]
    assert res["AP_occluded"] == 0.0 and res["AR_occluded"] == 0.0
    res = evaluate({0: [det((25, 25, 35, 35), 0.9), det((0, 0, 20, 20), 0.5)]},
                   {0: [occluded, clear]})["amodal"]
    # the hit on the ignored GT is neither a true nor a false positive
    assert res["AP_occluded"] == 1.0
    assert res["AP"] == 1.0


def test_match_image_ignored_gt_last():
    ious = np.array([[0.8, 0.9]])
    match, ign = match_image(ious, np.array([False, True]), 0.5)
    assert match[0] == 0 and not ign[0]
    match, ign = match_image(np.array([[0.3, 0.9]]), np.array([False, True]), 0.5)
    assert match[0] == 1 and ign[0]


def test_interpolated_precision_hand_values():
    # TP, FP, TP over 2 GT: precision 1, 1/2, 2/3 -> envelope 1, 2/3, 2/3
    ap, rc = interpolated_precision(np.array([1, 0, 1]), np.array([0, 1, 0]), 2)
    want = (51 * 1.0 + 50 * (2 / 3)) / 101
    assert ap == pytest.approx(want, abs=1e-12) and rc == 1.0


def test_eval_config_validation():
    with pytest.raises(ValueError):
        EvalConfig(iou_thresholds=(0.5, 1.0))
    with pytest.raises(ValueError):
        EvalConfig(match_on="both")
    assert EvalConfig().occlusion_cutoff == 0.15
    assert np.allclose(EvalConfig().iou_thresholds, np.arange(0.5, 0.96, 0.05))


def test_metrics_row_and_table():
    dets, gts = hand_case()
    row = metrics_row(evaluate(dets, gts))
    assert set(row) == {"AP", "AP50", "AP75", "AR", "AP_occluded", "visible_AP", "visible_AR"}
    table = format_table([dict(name="x", **row)])
    assert table.splitlines()[0].startswith("name") and f"{100 * row['AP']:.2f}" in table


# ---------------------------------------------------------------- probe


def test_probe_identical_occluders_give_iou_one():
    torch.manual_seed(0)
    model = AmodalModel(ModelConfig(head_width=8, n_priors=2)).eval()
    pairs = make_invariance_pairs(SceneSpec(seed=3), 3)
    same = [type(p)(p.scene_a, p.scene_a, p.target_index, p.occluder_categories) for p in pairs]
    rep = invariance_probe(model, same, options=PipelineOptions(shape_prior_refine=False, rescoring=False))
    assert rep.mean_iou_full == 1.0 and rep.mean_iou_coarse == 1.0
    assert set(rep.as_dict()) == {"n_pairs", "n_skipped", "mean_iou_full", "mean_iou_coarse"}
    assert rep.n_pairs == 3 and rep.n_skipped == 0 and len(rep.per_pair) == 3


def test_probe_counts_undetected_targets():
    torch.manual_seed(0)
    model = AmodalModel(ModelConfig(head_width=8, n_priors=2)).eval()
    pairs = make_invariance_pairs(SceneSpec(seed=3), 2)
    rep = invariance_probe(model, pairs, options=PipelineOptions(shape_prior_refine=False, rescoring=False),
                           use_gt_boxes=False, match_iou=1.01)
    assert rep.n_skipped == 2 and np.isnan(rep.mean_iou_full)
