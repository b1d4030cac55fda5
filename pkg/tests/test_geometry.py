import numpy as np
import pytest
from hypothesis import given, strategies as st

from ctxdet import geometry as G
from ctxdet.errors import ShapeError

box_strategy = st.tuples(
    st.floats(0, 50), st.floats(0, 50),
    st.floats(0, 30), st.floats(0, 30),
).map(lambda t: (t[0], t[1], t[0] + t[2], t[1] + t[3]))


def nms_bruteforce(boxes, scores, thr):
    """Quadratic greedy reference: visit by (score desc, index asc), keep a
    box iff IoU with every kept box is <= thr."""
    order = sorted(range(len(scores)), key=lambda i: (-scores[i], i))
    kept = []
    for i in order:
        ok = True
        for j in kept:
            if G.iou(boxes[i], boxes[j]) > thr:
                ok = False
                break
        if ok:
            kept.append(i)
    return kept


class TestIoU:
    def test_identical(self):
        assert G.iou([0, 0, 4, 4], [0, 0, 4, 4]) == 1.0

    def test_disjoint(self):
        assert G.iou([0, 0, 1, 1], [5, 5, 6, 6]) == 0.0

    def test_one_seventh(self):
        assert abs(G.iou([0, 0, 2, 2], [1, 1, 3, 3]) - 1 / 7) < 1e-12

    def test_both_degenerate(self):
        assert G.iou([1, 1, 1, 1], [1, 1, 1, 1]) == 0.0

    @given(box_strategy, box_strategy)
    def test_symmetric_and_bounded(self, a, b):
        v = G.iou(a, b)
        assert v == G.iou(b, a)
        assert 0.0 <= v <= 1.0


class TestGIoU:
    def test_identical(self):
        assert G.giou([0, 0, 4, 4], [0, 0, 4, 4]) == 1.0

    def test_overlapping_value(self):
        assert abs(G.giou([0, 0, 2, 2], [1, 1, 3, 3]) - (-5 / 63)) < 1e-12

    def test_separated_value(self):
        assert abs(G.giou([0, 0, 1, 1], [2, 0, 3, 1]) - (-1 / 3)) < 1e-12

    @given(box_strategy, box_strategy)
    def test_giou_at_most_iou(self, a, b):
        assert G.giou(a, b) <= G.iou(a, b) + 1e-12
        assert -1.0 - 1e-12 <= G.giou(a, b) <= 1.0


class TestConversions:
    @given(box_strategy)
    def test_roundtrip(self, b):
        back = G.cxcywh_to_xyxy(G.xyxy_to_cxcywh(np.array(b)))
        assert np.allclose(back, b, atol=1e-9)

    def test_canonicalize_swaps(self):
        out = G.canonicalize_xyxy([5, 7, 1, 3])
        assert np.array_equal(out, [1, 3, 5, 7])


class TestFpnLevel:
    def test_base_size_maps_to_four(self):
        assert G.assign_fpn_level([0, 0, 224, 224]) == 4

    def test_half_base(self):
        assert G.assign_fpn_level([0, 0, 112, 112]) == 3

    def test_tiny_clamps_low(self):
        assert G.assign_fpn_level([0, 0, 10, 10]) == 1

    def test_huge_clamps_high(self):
        assert G.assign_fpn_level([0, 0, 10000, 10000]) == 5

    def test_zero_area_convention(self):
        assert G.assign_fpn_level([3, 3, 3, 3]) == 1

    @given(st.lists(st.floats(1, 4000), min_size=2, max_size=8))
    def test_monotone_in_area(self, sides):
        sides = sorted(sides)
        lv = [G.assign_fpn_level([0, 0, s, s]) for s in sides]
        assert all(a <= b for a, b in zip(lv, lv[1:]))

    def test_vectorized(self):
        boxes = np.array([[0, 0, 224, 224], [0, 0, 112, 112], [0, 0, 10, 10]])
        assert np.array_equal(G.assign_fpn_level(boxes), [4, 3, 1])


class TestNms:
    def test_single_box(self):
        assert list(G.nms(np.array([[0, 0, 1, 1]]), np.array([0.9]))) == [0]

    def test_identical_pair_keeps_higher_score(self):
        boxes = np.array([[0, 0, 2, 2], [0, 0, 2, 2]])
        assert list(G.nms(boxes, np.array([0.3, 0.8]))) == [1]
        assert list(G.nms(boxes, np.array([0.8, 0.3]))) == [0]

    def test_equal_score_tie_lower_index(self):
        boxes = np.array([[0, 0, 2, 2], [0, 0, 2, 2]])
        assert list(G.nms(boxes, np.array([0.5, 0.5]))) == [0]

    def test_length_mismatch(self):
        with pytest.raises(ShapeError):
            G.nms(np.zeros((2, 4)), np.zeros(3))

    @pytest.mark.parametrize("seed", range(30))
    def test_matches_bruteforce(self, seed):
        rng = np.random.default_rng(seed)
        n = int(rng.integers(1, 21))
        xy = rng.uniform(0, 8, size=(n, 2))
        wh = rng.uniform(0.5, 6, size=(n, 2))
        boxes = np.concatenate([xy, xy + wh], axis=1)
        scores = np.round(rng.uniform(0, 1, size=n), 2)  # rounded to force ties
        got = list(G.nms(boxes, scores, 0.4))
        assert got == nms_bruteforce(boxes, scores, 0.4)

    @given(st.integers(0, 5000))
    def test_kept_pairwise_below_threshold(self, seed):
        rng = np.random.default_rng(seed)
        n = int(rng.integers(1, 15))
        xy = rng.uniform(0, 6, size=(n, 2))
        wh = rng.uniform(0.5, 5, size=(n, 2))
        boxes = np.concatenate([xy, xy + wh], axis=1)
        scores = rng.uniform(0, 1, size=n)
        kept = G.nms(boxes, scores, 0.5)
        assert sorted(scores[kept], reverse=True) == list(scores[kept])
        for i in range(len(kept)):
            for j in range(i + 1, len(kept)):
                assert G.iou(boxes[kept[i]], boxes[kept[j]]) <= 0.5
