import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from oracles import frame_iou, map_oracle
from textssm.grounding import (
    IOU_GRID,
    EvalItem,
    ScoredSegment,
    Segment,
    average_precision,
    ground,
    iou,
    labels_to_segments,
    map_suite,
    nms,
    scores_to_segments,
    segments_to_labels,
)


def S(a, b, score):
    return ScoredSegment(Segment(a, b), score)


@st.composite
def segments(draw, L=20):
    a = draw(st.integers(0, L - 1))
    return Segment(a, draw(st.integers(a + 1, L)))


def random_items(rng, n_items, max_pred=3, L=16, n_queries=3):
    items = []
    for _ in range(n_items):
        gts = set()
        for _ in range(rng.integers(0, 3)):
            a = int(rng.integers(0, L - 1))
            gts.add(Segment(a, int(rng.integers(a + 1, L + 1))))
        preds = []
        for _ in range(rng.integers(0, max_pred + 1)):
            a = int(rng.integers(0, L - 1))
            # coarse scores so ties actually occur
            preds.append(S(a, int(rng.integers(a + 1, L + 1)), float(rng.integers(1, 6)) / 6))
        items.append(EvalItem(preds, sorted(gts), query=int(rng.integers(n_queries))))
    if not any(it.ground_truth for it in items):
        items[0].ground_truth.append(Segment(0, 4))
    return items


class TestSegments:
    def test_invalid(self):
        for a, b in [(-1, 2), (3, 3), (5, 2)]:
            with pytest.raises(ValueError):
                Segment(a, b)

    def test_non_finite_score(self):
        with pytest.raises(ValueError):
            S(0, 1, float("nan"))

    def test_duplicate_ground_truth(self):
        with pytest.raises(ValueError, match="distinct"):
            EvalItem([], [Segment(0, 2), Segment(0, 2)])

    @given(st.lists(st.booleans(), min_size=1, max_size=40))
    def test_labels_round_trip(self, bits):
        y = np.array(bits, dtype=float)
        np.testing.assert_array_equal(segments_to_labels(labels_to_segments(y), len(y)), y)


class TestScoresToSegments:
    def test_hand_case(self):
        out = scores_to_segments([0.9, 0.9, 0.1, 0.8], [0.5])
        assert [(c.segment, c.score) for c in out] == [(Segment(0, 2), 0.9), (Segment(3, 4), 0.8)]

    def test_all_below(self):
        assert scores_to_segments(np.full(10, 0.05), [0.1, 0.5]) == []

    def test_all_above(self):
        out = scores_to_segments(np.full(7, 0.99), [0.1, 0.5, 0.9])
        assert len(out) == 3 and all(c.segment == Segment(0, 7) for c in out)

    def test_empty_thresholds(self):
        with pytest.raises(ValueError):
            scores_to_segments([0.5], [])

    @given(st.lists(st.floats(0, 1), min_size=1, max_size=30))
    def test_runs_are_maximal(self, s):
        s = np.array(s)
        for c in scores_to_segments(s, [0.5]):
            a, b = c.segment.start, c.segment.end
            assert np.all(s[a:b] >= 0.5)
            assert a == 0 or s[a - 1] < 0.5
            assert b == len(s) or s[b] < 0.5


class TestIou:
    def test_cases(self):
        assert iou(Segment(3, 9), Segment(3, 9)) == 1.0
        assert iou(Segment(0, 10), Segment(5, 15)) == pytest.approx(1 / 3, abs=1e-15)
        assert iou(Segment(0, 3), Segment(3, 6)) == 0.0

    @given(segments(), segments())
    def test_matches_frame_sets(self, a, b):
        assert iou(a, b) == pytest.approx(frame_iou(a, b), abs=1e-15)
        assert iou(a, b) == iou(b, a)


class TestNms:
    def test_single(self):
        c = S(2, 5, 0.7)
        assert nms([c], 0.5) == [c]

    def test_identical(self):
        assert nms([S(0, 4, 0.8), S(0, 4, 0.9)], 0.5) == [S(0, 4, 0.9)]

    def test_disjoint(self):
        assert len(nms([S(0, 4, 0.8), S(5, 9, 0.9)], 0.5)) == 2

    def test_tie_break_prefers_earlier_then_shorter(self):
        kept = nms([S(2, 6, 0.5), S(1, 6, 0.5), S(1, 5, 0.5)], 0.3)
        assert kept == [S(1, 5, 0.5)]

    @given(st.lists(st.tuples(segments(), st.floats(0.01, 0.99)), max_size=12), st.floats(0.05, 0.95))
    def test_kept_pairwise_below_threshold(self, cands, thr):
        kept = nms([ScoredSegment(s, p) for s, p in cands], thr)
        for i in range(len(kept)):
            for j in range(i):
                assert iou(kept[i].segment, kept[j].segment) < thr


class TestAveragePrecision:
    def test_exact_hit(self):
        items = [EvalItem([S(2, 8, 0.9)], [Segment(2, 8)])]
        assert all(map_suite(items).per_threshold[t] == 100.0 for t in IOU_GRID)

    def test_half(self):
        items = [EvalItem([S(20, 30, 0.9), S(0, 10, 0.8)], [Segment(0, 10)])]
        assert average_precision(items, 0.5) == 0.5

    def test_zero(self):
        items = [EvalItem([S(20, 30, 0.9)], [Segment(0, 10)])]
        assert average_precision(items, 0.1) == 0.0

    def test_threshold_gating(self):
        items = [EvalItem([S(0, 10, 0.9)], [Segment(0, 14)])]  # IoU 10/14
        g = iou(Segment(0, 10), Segment(0, 14))
        assert average_precision(items, g) == 1.0
        assert average_precision(items, g + 1e-9) == 0.0

    def test_iou_04_case(self):
        # [0,4) against [0,10): IoU exactly 0.4
        items = [EvalItem([S(0, 4, 0.6)], [Segment(0, 10)])]
        assert average_precision(items, 0.5) == 0.0
        assert average_precision(items, 0.3) == 1.0

    def test_no_ground_truth(self):
        with pytest.raises(ValueError):
            average_precision([EvalItem([S(0, 2, 0.5)], [])], 0.5)

    def test_gt_consumed_once(self):
        items = [EvalItem([S(0, 10, 0.9), S(0, 10, 0.8)], [Segment(0, 10)])]
        assert average_precision(items, 0.5) == 1.0

    def test_matches_oracle(self):
        rng = np.random.default_rng(7)
        for _ in range(200):
            items = random_items(rng, int(rng.integers(1, 5)))
            got = map_suite(items).per_threshold
            assert got == map_oracle(items, IOU_GRID)

    @pytest.mark.parametrize("seed", range(5))
    def test_raising_a_true_positive_never_hurts(self, seed):
        rng = np.random.default_rng(seed)
        gt = [Segment(0, 5), Segment(10, 15)]
        preds = [S(0, 5, 0.3), S(20, 25, 0.6), S(30, 35, 0.5)]
        base = average_precision([EvalItem(preds, gt)], 0.5)
        boosted = [S(0, 5, float(rng.uniform(0.6, 0.99)))] + preds[1:]
        assert average_precision([EvalItem(boosted, gt)], 0.5) >= base


class TestMapSuite:
    def test_empty(self):
        with pytest.raises(ValueError):
            map_suite([])

    def test_monotone_in_threshold_for_single_prediction_items(self):
        rng = np.random.default_rng(3)
        for _ in range(50):
            items = [
                EvalItem(it.predictions[:1], it.ground_truth, it.query)
                for it in random_items(rng, 4, max_pred=1)
            ]
            vals = list(map_suite(items).per_threshold.values())
            assert all(a >= b for a, b in zip(vals, vals[1:]))

    def test_write(self, tmp_path):
        table = map_suite([EvalItem([S(0, 4, 0.9)], [Segment(0, 4)])])
        table.write_json(tmp_path / "m.json")
        table.write_csv(tmp_path / "m.csv")
        lines = (tmp_path / "m.csv").read_text().splitlines()
        assert lines[0] == "threshold,mAP" and lines[-1].startswith("avg,100.0")

    def test_ground_end_to_end(self):
        s = np.zeros(30)
        s[5:12] = 0.95
        out = ground(s)
        assert out[0].segment == Segment(5, 12)
        assert len(out) == 1
