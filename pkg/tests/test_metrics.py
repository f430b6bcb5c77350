import pytest
from hypothesis import given
from hypothesis import strategies as st

from gesturestream.exceptions import InputError
from gesturestream.metrics import (MatchResult, detection_rate, evaluate, false_positive_rate,
                                   jaccard_index, match_events, temporal_iou)
from gesturestream.skeleton import NO_GESTURE, GestureEvent

from helpers import brute_jaccard, brute_match

N = NO_GESTURE


def ev(label, start, end):
    return GestureEvent(label, start, end)


@st.composite
def event_lists(draw, length=60):
    events, t = [], draw(st.integers(0, 5))
    while t < length - 1:
        end = min(length - 1, t + draw(st.integers(0, 12)))
        events.append(ev(draw(st.sampled_from("ABC")), t, end))
        t = end + 1 + draw(st.integers(1, 8))
    return events


def to_labels(events, length=60):
    out = [N] * length
    for e in events:
        out[e.start:e.end + 1] = [e.label] * e.length
    return out


class TestMatching:
    def test_exact(self):
        gt = [ev("A", 0, 9), ev("B", 20, 29)]
        m = match_events(gt, gt)
        assert m.counts() == (2, 0, 0)

    def test_no_predictions(self):
        assert match_events([], [ev("A", 0, 9)]).counts() == (0, 0, 1)

    def test_iou_example(self):
        assert temporal_iou(ev("A", 0, 9), ev("A", 5, 14)) == pytest.approx(5 / 15)
        assert match_events([ev("A", 0, 9)], [ev("A", 5, 14)]).counts() == (1, 0, 0)

    def test_overlapping_input_rejected(self):
        with pytest.raises(InputError):
            match_events([ev("A", 0, 5), ev("A", 5, 9)], [])
        with pytest.raises(InputError):
            match_events([], [ev("A", 10, 12), ev("A", 0, 5)])

    @given(event_lists(), event_lists())
    def test_matches_brute_force(self, pred, gt):
        assert match_events(pred, gt).counts() == brute_match(pred, gt)

    @given(event_lists(), event_lists(), st.randoms())
    def test_ground_truth_permutation_of_labels_irrelevant_to_totals(self, pred, gt, rnd):
        # matching is per sequence; splitting into per-sequence calls and pooling is additive
        total = MatchResult()
        total += match_events(pred, gt)
        total += match_events(gt, pred)
        tp1, fp1, fn1 = match_events(pred, gt).counts()
        tp2, fp2, fn2 = match_events(gt, pred).counts()
        assert total.counts() == (tp1 + tp2, fp1 + fp2, fn1 + fn2)

    @given(event_lists(), event_lists(), st.integers(0, 59), st.integers(0, 5))
    def test_spurious_prediction_cannot_help(self, pred, gt, start, width):
        end = min(59, start + width)
        if not gt or any(not (e.end < start or e.start > end) for e in pred):
            return
        extra = sorted(pred + [ev("D", start, end)], key=lambda e: e.start)  # "D" never occurs in gt
        before, after = match_events(pred, gt), match_events(extra, gt)
        assert detection_rate(after) <= detection_rate(before)
        assert false_positive_rate(after) > false_positive_rate(before)


class TestRates:
    def test_formulas(self):
        m = MatchResult()
        m.tp["A"], m.fn["A"] = 9, 1
        assert detection_rate(m) == 0.9
        m = MatchResult()
        m.tp["A"], m.fn["A"], m.fp["A"] = 10, 6, 2
        assert false_positive_rate(m) == 0.125

    def test_absent_when_no_ground_truth(self):
        m = match_events([ev("A", 0, 3)], [])
        assert detection_rate(m) is None and false_positive_rate(m) is None

    def test_zero_predictions_zero_fp(self):
        assert false_positive_rate(match_events([], [ev("A", 0, 3)])) == 0.0

    def test_per_label(self):
        m = match_events([ev("A", 0, 9), ev("B", 20, 29)], [ev("A", 0, 9), ev("A", 40, 49)])
        assert detection_rate(m, "A") == 0.5 and false_positive_rate(m, "A") == 0.0
        assert detection_rate(m, "B") is None


class TestJaccard:
    def test_examples(self):
        gt = to_labels([ev("A", 0, 9)], 20)
        assert jaccard_index(gt, gt) == 1.0
        assert jaccard_index(to_labels([ev("A", 5, 14)], 20), gt) == pytest.approx(5 / 15)
        assert jaccard_index(to_labels([ev("A", 10, 19)], 20), gt) == 0.0

    def test_no_gestures_is_absent(self):
        assert jaccard_index([N] * 5, [N] * 5) is None

    def test_length_mismatch(self):
        with pytest.raises(InputError):
            jaccard_index([N] * 3, [N] * 4)

    @given(st.lists(event_lists(), min_size=1, max_size=3), st.lists(event_lists(), min_size=1, max_size=3))
    def test_symmetric_and_matches_oracle(self, a, b):
        k = min(len(a), len(b))
        la, lb = [to_labels(e) for e in a[:k]], [to_labels(e) for e in b[:k]]
        assert jaccard_index(la, lb) == jaccard_index(lb, la)
        want = brute_jaccard(la, lb)
        got = jaccard_index(la, lb)
        assert (got is None and want is None) or got == pytest.approx(want)


class TestReport:
    def test_pooled_counts(self):
        gts = [[ev("A", 0, 9)], [ev("A", 0, 9), ev("B", 20, 29)]]
        preds = [[ev("A", 0, 9)], [ev("B", 20, 29), ev("B", 40, 45)]]
        rep = evaluate(preds, gts, [to_labels(p) for p in preds], [to_labels(g) for g in gts])
        assert rep.counts == {"tp": 2, "fp": 1, "fn": 1}
        assert rep.detection_rate == 2 / 3 and rep.false_positive_rate == 1 / 3
        assert rep.per_class["A"]["detection_rate"] == 0.5
        assert "overall" in rep.to_table() and '"jaccard_index"' in rep.to_json()

    def test_count_mismatch(self):
        with pytest.raises(InputError):
            evaluate([[]], [], [[]], [[]])
