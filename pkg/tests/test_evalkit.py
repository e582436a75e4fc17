import numpy as np
import pytest
from hypothesis import given, strategies as st

from featlock.evalkit import (
    COCO_THRESHOLDS,
    BoundingBox,
    Detection,
    GroundTruth,
    average_precision_coco,
    average_precision_voc07,
    classify_tp_fp,
    coco_map,
    iou,
    iou_matrix,
    mean_ap,
    precision_recall,
    read_jsonl,
    voc07_map,
    write_jsonl,
)
from oracle_map import ap_101point, oracle_map


def B(*c):
    return BoundingBox(*map(float, c))


def random_instance(rng, max_images=5, max_dets=4, max_gts=3, n_classes=2, grid=6):
    def box():
        x0, y0 = rng.integers(0, grid - 1, size=2)
        x1 = rng.integers(x0 + 1, grid + 1)
        y1 = rng.integers(y0 + 1, grid + 1)
        return (float(x0), float(y0), float(x1), float(y1))

    n_img = int(rng.integers(1, max_images + 1))
    dets, gts = [], []
    for _ in range(n_img):
        gts.append([(int(rng.integers(n_classes)), box()) for _ in range(rng.integers(0, max_gts + 1))])
        # coarse confidences so ties happen
        dets.append([(int(rng.integers(n_classes)), float(rng.integers(1, 5)) / 4, box())
                     for _ in range(rng.integers(0, max_dets + 1))])
    if not any(gts):
        gts[0].append((0, box()))
    return dets, gts


def to_evalkit(dets, gts):
    d = [[Detection(BoundingBox(*b), c, p) for c, p, b in img] for img in dets]
    g = [[GroundTruth(BoundingBox(*b), c) for c, b in img] for img in gts]
    return d, g


# ---------------------------------------------------------------------------
# IoU
# ---------------------------------------------------------------------------


def test_iou_examples():
    a = B(0, 0, 2, 2)
    assert iou(a, a) == 1.0
    assert iou(a, B(5, 5, 6, 6)) == 0.0
    assert iou(a, B(2, 0, 4, 2)) == 0.0  # touching edge
    assert abs(iou(a, B(1, 1, 3, 3)) - 1 / 7) < 1e-15


def test_degenerate_box_rejected():
    with pytest.raises(ValueError):
        B(1, 1, 1, 3)
    with pytest.raises(ValueError):
        Detection(B(0, 0, 1, 1), 0, 1.5)


coords = st.floats(0, 100, allow_nan=False)


@st.composite
def boxes(draw):
    x0, y0 = draw(coords), draw(coords)
    return B(x0, y0, x0 + draw(st.floats(0.01, 50)), y0 + draw(st.floats(0.01, 50)))


@given(boxes(), boxes())
def test_iou_properties(a, b):
    v = iou(a, b)
    assert 0.0 <= v <= 1.0
    assert v == iou(b, a)
    assert iou(a, a) == pytest.approx(1.0, abs=1e-12)
    assert iou_matrix([a.as_list()], [b.as_list()])[0, 0] == pytest.approx(v, abs=1e-12)


# ---------------------------------------------------------------------------
# TP / FP
# ---------------------------------------------------------------------------


def test_tp_fp_examples():
    gt = [GroundTruth(B(0, 0, 10, 10), 0)]
    d06 = Detection(B(0, 0, 10, 6), 0, 0.9)  # IoU 0.6
    assert classify_tp_fp([d06], gt) == ([True], 0)

    lo = Detection(B(0, 0, 10, 9), 0, 0.7)
    assert classify_tp_fp([lo, d06], gt) == ([False, True], 0)

    wrong = Detection(B(0, 0, 10, 10), 1, 0.9)
    flags, fn = classify_tp_fp([wrong], gt)
    assert flags.count(False) == 1 and fn == 1


def test_tp_picks_highest_iou_unmatched_gt():
    gts = [GroundTruth(B(0, 0, 10, 10), 0), GroundTruth(B(0, 0, 10, 8), 0)]
    d1 = Detection(B(0, 0, 10, 8), 0, 0.9)  # takes gt 1 (IoU 1.0)
    d2 = Detection(B(0, 0, 10, 9), 0, 0.8)  # gt 1 taken, gt 0 at 0.9
    assert classify_tp_fp([d1, d2], gts) == ([True, True], 0)


def test_exact_half_iou_counts():
    gt = [GroundTruth(B(0, 0, 4, 4), 0)]
    d = Detection(B(0, 0, 4, 2), 0, 0.5)  # inter 8, union 16
    assert classify_tp_fp([d], gt, 0.5)[0] == [True]


# ---------------------------------------------------------------------------
# PR and AP
# ---------------------------------------------------------------------------


def test_precision_recall_examples():
    assert precision_recall([True, True, True], 3)[-1] == (1.0, 1.0)
    assert precision_recall([True, False, True], 2) == [(0.5, 1.0), (0.5, 0.5), (1.0, 2 / 3)]
    assert precision_recall([], 3) == []
    assert precision_recall([True], 0) == []


def test_voc07_examples():
    assert average_precision_voc07([(1.0, 1.0)]) == 1.0
    assert average_precision_voc07([]) == 0.0
    assert average_precision_voc07([(0.5, 1.0), (1.0, 0.5)]) == 8.5 / 11


def test_mean_ap_examples():
    assert mean_ap({0: 0.7}) == 0.7
    assert mean_ap({0: 1.0, 1: 0.5}) == 0.75
    assert mean_ap({0: 0.0, 1: 0.0, 2: 0.0}) == 0.0
    with pytest.raises(ValueError):
        mean_ap({})


def test_class_without_gt_excluded():
    gts = [[GroundTruth(B(0, 0, 4, 4), 0)]]
    dets = [[Detection(B(0, 0, 4, 4), 0, 0.9), Detection(B(5, 5, 8, 8), 1, 0.8)]]
    rep = voc07_map(dets, gts)
    assert rep.per_class_ap == {0: 1.0} and rep.map_value == 1.0


@given(st.integers(0, 2**32 - 1), st.floats(0.01, 1.0))
def test_ap_invariant_to_confidence_scaling(seed, s):
    dets, gts = random_instance(np.random.default_rng(seed))
    d, g = to_evalkit(dets, gts)
    scaled = [[Detection(x.box, x.class_id, x.confidence * s) for x in img] for img in d]
    assert voc07_map(d, g).map_value == voc07_map(scaled, g).map_value


@given(st.integers(0, 2**32 - 1))
def test_appending_lowest_fp_never_increases_ap(seed):
    rng = np.random.default_rng(seed)
    flags = list(rng.random(int(rng.integers(0, 8))) < 0.5)
    n_gt = int(rng.integers(max(1, sum(flags)), 10))
    before = average_precision_voc07(precision_recall(flags, n_gt))
    after = average_precision_voc07(precision_recall(flags + [False], n_gt))
    assert after <= before


# ---------------------------------------------------------------------------
# COCO-style
# ---------------------------------------------------------------------------


def _iou06_set():
    gts = [[GroundTruth(B(0, 0, 10, 10), 0)], [GroundTruth(B(20, 20, 30, 30), 1)]]
    dets = [[Detection(B(0, 0, 10, 6), 0, 0.9)], [Detection(B(20, 20, 30, 26), 1, 0.8)]]
    return dets, gts


def test_coco_perfect():
    gts = [[GroundTruth(B(0, 0, 10, 10), 0), GroundTruth(B(20, 20, 40, 30), 2)]]
    dets = [[Detection(g.box, g.class_id, 0.9) for g in gts[0]]]
    for th in ([0.5], [0.75], COCO_THRESHOLDS):
        assert coco_map(dets, gts, th).map_value == 1.0
    assert voc07_map(dets, gts).map_value == 1.0


def test_coco_iou_06_detections():
    dets, gts = _iou06_set()
    assert coco_map(dets, gts, [0.5]).map_value == 1.0
    assert coco_map(dets, gts, [0.75]).map_value == 0.0
    # IoU exactly 0.6 passes 0.5, 0.55 and 0.6 under the >= rule
    assert coco_map(dets, gts).map_value == pytest.approx(3 / 10, abs=1e-15)


def test_coco_iou_just_below_06():
    gts = [[GroundTruth(B(0, 0, 10, 10), 0)]]
    dets = [[Detection(B(0, 0, 10, 5.9), 0, 0.9)]]  # IoU 0.59
    assert coco_map(dets, gts).map_value == pytest.approx(2 / 10, abs=1e-15)


def test_coco_thresholds():
    assert COCO_THRESHOLDS == (0.5, 0.55, 0.6, 0.65, 0.7, 0.75, 0.8, 0.85, 0.9, 0.95)


# ---------------------------------------------------------------------------
# oracle equivalence (also run at full size in the acceptance suite)
# ---------------------------------------------------------------------------


@pytest.mark.parametrize("seed", range(100))
def test_voc07_matches_oracle(seed):
    dets, gts = random_instance(np.random.default_rng(seed))
    expect, per_class = oracle_map(dets, gts)
    rep = voc07_map(*to_evalkit(dets, gts))
    assert abs(rep.map_value - expect) <= 1e-9
    assert rep.per_class_ap.keys() == per_class.keys()


@pytest.mark.parametrize("seed", range(50))
def test_coco_matches_oracle(seed):
    dets, gts = random_instance(np.random.default_rng(10_000 + seed))
    expect, _ = oracle_map(dets, gts, COCO_THRESHOLDS, ap_rule=ap_101point)
    assert abs(coco_map(*to_evalkit(dets, gts)).map_value - expect) <= 1e-9


def test_coco_ap_perfect_curve():
    assert average_precision_coco([(0.5, 1.0), (1.0, 1.0)]) == 1.0
    assert average_precision_coco([]) == 0.0


@given(st.integers(0, 2**32 - 1))
def test_map_in_unit_interval(seed):
    dets, gts = random_instance(np.random.default_rng(seed))
    d, g = to_evalkit(dets, gts)
    assert 0.0 <= voc07_map(d, g).map_value <= 1.0
    assert 0.0 <= coco_map(d, g).map_value <= 1.0


# ---------------------------------------------------------------------------
# JSON lines
# ---------------------------------------------------------------------------


def test_jsonl_roundtrip(tmp_path):
    dets, gts = random_instance(np.random.default_rng(3))
    d, g = to_evalkit(dets, gts)
    ids = [f"img{i}" for i in range(len(g))]
    write_jsonl(tmp_path / "d.jsonl", d, ids)
    write_jsonl(tmp_path / "g.jsonl", g, ids)
    _, d2 = read_jsonl(tmp_path / "d.jsonl", ids)
    _, g2 = read_jsonl(tmp_path / "g.jsonl", ids)
    assert d2 == d and g2 == g
    line = (tmp_path / "g.jsonl").read_text().splitlines()[0]
    assert set(__import__("json").loads(line)) == {"image_id", "class_id", "box"}
