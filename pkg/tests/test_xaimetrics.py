import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from xaidet.core import BinaryMask, Box, Grid
from xaidet.detmetrics import Detection, GroundTruth
from xaidet.errors import BadK, NoPositiveRelevance, NothingToExplain, ShapeMismatch
from xaidet.xaimetrics import (
    ExplainedDetection,
    TargetMode,
    XaiEvalConfig,
    attribution_localization,
    evaluate_explanations,
    topk_intersection,
    topk_mask,
)

import oracles


def mask(rows):
    return BinaryMask(np.array(rows, dtype=bool))


def test_al_examples():
    g = Grid(np.array([[1.0, 2.0], [3.0, 4.0]]))
    assert attribution_localization(g, mask([[1, 1], [0, 0]])).value == pytest.approx(0.3, abs=1e-15)
    g = Grid(np.array([[-5.0, 2.0], [1.0, -1.0]]))
    r = attribution_localization(g, mask([[0, 1], [0, 0]]))
    assert (r.r_box, r.r_tot) == (2.0, 3.0)
    assert r.value == pytest.approx(2 / 3, abs=1e-15)
    inside = np.zeros((4, 4))
    inside[1:3, 1:3] = [[1, 2], [3, 4]]
    assert attribution_localization(Grid(inside), BinaryMask(inside > 0)).value == 1.0
    half = np.zeros((4, 4), dtype=bool)
    half[:2] = True
    assert attribution_localization(Grid(np.ones((4, 4))), BinaryMask(half)).value == 0.5


def test_al_errors():
    with pytest.raises(NoPositiveRelevance):
        attribution_localization(Grid(-np.ones((2, 2))), mask([[1, 1], [1, 1]]))
    with pytest.raises(NoPositiveRelevance):
        attribution_localization(Grid(np.zeros((2, 2))), mask([[1, 1], [1, 1]]))
    with pytest.raises(ShapeMismatch):
        attribution_localization(Grid(np.ones((2, 2))), BinaryMask(np.ones((2, 3))))


def test_topk_examples():
    g = Grid(np.arange(12.0)[::-1].reshape(3, 4))
    assert topk_mask(g, 12).count() == 12
    assert np.flatnonzero(topk_mask(g, 3).bits.ravel()).tolist() == [0, 1, 2]
    assert np.flatnonzero(topk_mask(Grid(np.ones((3, 3))), 2).bits.ravel()).tolist() == [0, 1]
    with pytest.raises(BadK):
        topk_mask(g, 0)
    with pytest.raises(BadK):
        topk_mask(g, 13)


def test_tki_examples():
    g = Grid(np.arange(16.0)[::-1].reshape(4, 4))
    left = np.zeros((4, 4), dtype=bool)
    left[:, :2] = True
    r = topk_intersection(g, BinaryMask(left), 4)
    assert (r.intersection_count, r.value) == (2, 0.5)
    assert topk_intersection(g, BinaryMask(np.ones((4, 4))), 5).value == 1.0

    two = np.zeros((4, 4), dtype=bool)
    two[0, 0] = two[3, 3] = True
    assert topk_intersection(g, BinaryMask(two), 8).value == 0.125  # only (0,0) is in the top 8
    two[3, 3] = False
    two[0, 1] = True
    assert topk_intersection(g, BinaryMask(two), 8).value == 0.25


grids = st.integers(1, 16).flatmap(
    lambda h: st.integers(1, 16).flatmap(
        lambda w: st.tuples(
            arrays(np.float64, (h, w), elements=st.floats(-5, 5, allow_nan=False, width=32)),
            arrays(np.bool_, (h, w)),
            st.integers(1, h * w),
        )
    )
)


@settings(max_examples=300, deadline=None)
@given(grids)
def test_metrics_match_brute_force(case):
    values, bits, k = case
    g, m = Grid(values), BinaryMask(bits)
    vl, ml = values.tolist(), bits.tolist()
    if (values > 0).any():
        assert attribution_localization(g, m).value == pytest.approx(
            oracles.attribution_localization(vl, ml), rel=1e-12, abs=1e-15
        )
    assert topk_intersection(g, m, k).value == oracles.topk_intersection(vl, ml, k)


@settings(max_examples=200, deadline=None)
@given(grids, st.floats(1e-3, 1e3))
def test_al_scale_invariant(case, s):
    values, bits, _ = case
    if not (values > 0).any():
        return
    a = attribution_localization(Grid(values), BinaryMask(bits)).value
    b = attribution_localization(Grid(values * s), BinaryMask(bits)).value
    assert b == pytest.approx(a, rel=1e-12, abs=1e-15)


@settings(max_examples=200, deadline=None)
@given(grids)
def test_topk_invariant_under_monotone_map(case):
    values, _, k = case
    if len(np.unique(values)) != values.size:
        return
    assert topk_mask(Grid(values), k) == topk_mask(Grid(np.exp(values / 2) + values**3), k)


@settings(max_examples=200, deadline=None)
@given(grids, st.data())
def test_al_monotone_in_mask(case, data):
    values, bits, _ = case
    if not (values > 0).any():
        return
    extra = data.draw(arrays(np.bool_, values.shape))
    small = attribution_localization(Grid(values), BinaryMask(bits)).value
    big = attribution_localization(Grid(values), BinaryMask(bits | extra)).value
    assert big >= small - 1e-12
    assert attribution_localization(Grid(values), BinaryMask(np.ones_like(bits))).value == 1.0


@settings(max_examples=200, deadline=None)
@given(grids)
def test_tki_bound(case):
    values, bits, k = case
    assert topk_intersection(Grid(values), BinaryMask(bits), k).value <= min(1.0, bits.sum() / k)


# ------------------------------------------------------------- pipeline


def peaked_grid(box: Box, size=16, fill=1.0):
    v = np.zeros((size, size))
    v[int(box.y_min) : int(box.y_max), int(box.x_min) : int(box.x_max)] = fill
    return Grid(v)


def test_evaluate_perfect_explanation():
    box = Box(2, 2, 6, 6)
    gt = GroundTruth(0, 1, box)
    r = evaluate_explanations(
        [ExplainedDetection(Detection(0, 1, box, 0.9), peaked_grid(box))], [gt], XaiEvalConfig(k=10)
    )
    assert (r.al.mean, r.al.variance, r.tki.mean, r.tki.variance) == (1.0, 0.0, 1.0, 0.0)
    assert r.per_class[1]["al"].count == 1


def test_evaluate_pools_and_excludes_unmatched():
    b0, b1 = Box(0, 0, 4, 4), Box(8, 8, 4, 4)
    gts = [GroundTruth(0, 1, b0), GroundTruth(1, 2, b1)]
    explained = [
        ExplainedDetection(Detection(0, 1, b0, 0.9), peaked_grid(b0)),  # AL 1
        ExplainedDetection(Detection(1, 2, b1, 0.9), peaked_grid(b0)),  # AL 0
        ExplainedDetection(Detection(1, 2, Box(0, 0, 3, 3), 0.95), peaked_grid(b0)),  # false positive
        ExplainedDetection(Detection(0, 1, b0, 0.1), peaked_grid(b1)),  # below score threshold
    ]
    r = evaluate_explanations(explained, gts, XaiEvalConfig(k=4))
    assert (r.al.mean, r.al.variance, r.al.count) == (0.5, 0.25, 2)
    assert (r.unmatched, r.below_threshold, r.evaluated) == (1, 1, 2)
    assert set(r.per_class) == {1, 2}


def test_evaluate_skips_degenerate_maps():
    b = Box(0, 0, 4, 4)
    gts = [GroundTruth(0, 1, b), GroundTruth(1, 1, b)]
    explained = [
        ExplainedDetection(Detection(0, 1, b, 0.9), Grid(np.zeros((16, 16)))),
        ExplainedDetection(Detection(1, 1, b, 0.9), peaked_grid(b)),
    ]
    r = evaluate_explanations(explained, gts, XaiEvalConfig(k=4))
    assert r.skipped_no_relevance == 1 and r.evaluated == 1
    with pytest.raises(NothingToExplain):
        evaluate_explanations(explained[:1], gts, XaiEvalConfig(k=4))


def test_evaluate_nothing_matched():
    b = Box(0, 0, 4, 4)
    with pytest.raises(NothingToExplain):
        evaluate_explanations(
            [ExplainedDetection(Detection(0, 1, Box(10, 10, 4, 4), 0.9), peaked_grid(b))],
            [GroundTruth(0, 1, b)],
        )


def test_union_target_mode():
    b0, b1 = Box(0, 0, 4, 4), Box(8, 8, 4, 4)
    gts = [GroundTruth(0, 1, b0), GroundTruth(0, 1, b1)]
    grid = Grid(peaked_grid(b0).values + peaked_grid(b1).values)
    explained = [ExplainedDetection(Detection(0, 1, b0, 0.9), grid)]
    matched = evaluate_explanations(explained, gts, XaiEvalConfig(k=32))
    union = evaluate_explanations(explained, gts, XaiEvalConfig(k=32, target_mode=TargetMode.UNION_OF_CLASS_BOXES))
    assert matched.al.mean == 0.5
    assert union.al.mean == 1.0 and union.tki.mean == 1.0


def test_k_clamped_to_grid():
    b = Box(0, 0, 16, 16)
    r = evaluate_explanations(
        [ExplainedDetection(Detection(0, 1, b, 0.9), peaked_grid(b))], [GroundTruth(0, 1, b)]
    )
    assert r.tki.mean == 1.0  # default k=1000 is clamped to 256 pixels
