import json
import math
import warnings
from fractions import Fraction

import pytest
from hypothesis import given, settings, strategies as st

from vtslab import metrics as m
from vtslab.errors import UsageError, ValidationError


# ---------------------------------------------------------------- oracles

def iou_oracle(a, b):
    """Exact rational IoU by set-length arithmetic."""
    a0, a1, b0, b1 = (Fraction(x) for x in (*a, *b))
    inter = max(Fraction(0), min(a1, b1) - max(a0, b0))
    union = (a1 - a0) + (b1 - b0) - inter
    if union == 0:
        return 1.0 if (a0, a1) == (b0, b1) else 0.0
    return float(inter / union)


def ap_oracle(scores, labels):
    """Rank of each positive by pairwise counting, then precision at that rank."""
    n = len(scores)
    rank = [1 + sum(1 for j in range(n) if scores[j] > scores[i] or (scores[j] == scores[i] and j < i))
            for i in range(n)]
    pos = [i for i in range(n) if labels[i]]
    if not pos:
        return 0.0
    precisions = [Fraction(sum(1 for j in pos if rank[j] <= rank[i]), rank[i]) for i in pos]
    return float(sum(precisions) / len(pos))


def hit_oracle(queries, level=3):
    hits = 0
    for scores, levels in queries:
        best = max(range(len(scores)), key=lambda i: (scores[i], -i))
        hits += levels[best] >= level
    return 100.0 * hits / len(queries)


def pairs_with_iou(values, length=10.0):
    """gt [0, L]; pred [0, v L] has IoU v."""
    return [(0.0, v * length) for v in values], [(0.0, length)] * len(values)


interval = st.tuples(st.floats(0, 50, allow_nan=False), st.floats(0, 20, allow_nan=False)).map(lambda t: (t[0], t[0] + t[1]))


# ---------------------------------------------------------------- IoU family

class TestIoU:
    def test_grounding_example_pair(self):
        assert m.iou((6.0, 12.0), (6.2, 12.0)) == pytest.approx(0.96667, abs=1e-5)
        assert m.iou((6.0, 12.0), (6.2, 12.0)) == pytest.approx(5.8 / 6.0, abs=1e-12)

    def test_identity_and_disjoint(self):
        assert m.iou((1, 4), (1, 4)) == 1.0
        assert m.iou((0, 1), (2, 3)) == 0.0
        assert m.iou((0, 1), (1, 2)) == 0.0

    def test_zero_length_conventions(self):
        assert m.iou((2, 2), (2, 2)) == 1.0
        assert m.iou((2, 2), (3, 3)) == 0.0
        assert m.iou((2, 2), (1, 3)) == 0.0

    def test_invalid_intervals(self):
        with pytest.raises(ValidationError):
            m.Interval(3.0, 1.0)
        with pytest.raises(ValidationError):
            m.Interval(-1.0, 1.0)
        with pytest.raises(ValidationError):
            m.Interval(0.0, math.inf)

    @settings(max_examples=300)
    @given(interval, interval)
    def test_matches_oracle_and_is_symmetric(self, a, b):
        v = m.iou(a, b)
        assert v == pytest.approx(iou_oracle(a, b), abs=1e-12)
        assert v == m.iou(b, a)
        assert 0.0 <= v <= 1.0

    def test_four_pair_fixture(self):
        preds, gts = pairs_with_iou([0.2, 0.4, 0.6, 0.8])
        assert [m.recall_at_1(preds, gts, t) for t in (0.3, 0.5, 0.7)] == [75.0, 50.0, 25.0]
        assert m.mean_iou(preds, gts) == pytest.approx(50.0, abs=1e-12)

    def test_exact_and_disjoint_sets(self):
        gts = [(0, 2), (3, 9), (1, 1.5)]
        for t in (0.3, 0.5, 0.7):
            assert m.recall_at_1(gts, gts, t) == 100.0
            assert m.recall_at_1([(20, 21)] * 3, gts, t) == 0.0
        assert m.mean_iou([(1, 4)], [(1, 4)]) == 100.0

    def test_usage_errors(self):
        with pytest.raises(UsageError):
            m.mean_iou([], [])
        with pytest.raises(UsageError):
            m.recall_at_1([(0, 1)], [(0, 1), (0, 2)], 0.5)

    @settings(max_examples=200)
    @given(st.lists(st.tuples(interval, interval), min_size=1, max_size=8))
    def test_set_metrics_match_recomputed_ious(self, pairs):
        preds, gts = [p for p, _ in pairs], [g for _, g in pairs]
        ious = [iou_oracle(p, g) for p, g in pairs]
        assert m.mean_iou(preds, gts) == pytest.approx(100 * sum(ious) / len(ious), abs=1e-9)
        recalls = []
        for t in (0.1, 0.3, 0.5, 0.7, 0.9):
            r = m.recall_at_1(preds, gts, t)
            assert r == 100.0 * sum(v >= t for v in ious) / len(ious)
            recalls.append(r)
        assert recalls == sorted(recalls, reverse=True)


# ---------------------------------------------------------------- highlight detection

class TestAveragePrecision:
    def test_fixtures(self):
        assert m.average_precision([0.9, 0.8, 0.1], [1, 1, 0]) == 1.0
        assert m.average_precision([0.9, 0.1], [0, 1]) == 0.5
        assert m.average_precision([4, 3, 2, 1], [0, 0, 1, 1]) == pytest.approx((1 / 3 + 2 / 4) / 2, abs=1e-12)
        assert m.average_precision([4, 3, 2, 1], [0, 0, 1, 1]) == pytest.approx(0.4167, abs=1e-4)

    def test_ties_follow_input_order(self):
        assert m.average_precision([1.0, 1.0], [1, 0]) == 1.0
        assert m.average_precision([1.0, 1.0], [0, 1]) == 0.5

    def test_no_positives_warns(self):
        with pytest.warns(m.NoPositivesWarning):
            assert m.average_precision([0.3, 0.2], [0, 0]) == 0.0

    def test_accepts_scored_clips(self):
        clips = [m.ScoredClip(m.Interval(2 * i, 2 * i + 2), s) for i, s in enumerate([0.1, 0.7, 0.4])]
        assert m.average_precision(clips, [0, 1, 1]) == 1.0

    def test_misaligned_labels(self):
        with pytest.raises(UsageError):
            m.average_precision([0.1, 0.2], [1])

    @settings(max_examples=300)
    @given(st.lists(st.tuples(st.integers(-3, 3), st.booleans()), min_size=1, max_size=8),
           st.floats(0.01, 100))
    def test_matches_enumeration_and_scale_invariant(self, items, c):
        scores = [float(s) for s, _ in items]
        labels = [int(l) for _, l in items]
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", m.NoPositivesWarning)
            got = m.average_precision(scores, labels)
            assert got == pytest.approx(ap_oracle(scores, labels), abs=1e-12)
            assert m.average_precision([c * s for s in scores], labels) == pytest.approx(got, abs=1e-12)

    def test_map_is_mean_over_queries(self):
        qs = [([0.9, 0.1], [0, 1]), ([0.9, 0.8, 0.1], [1, 1, 0])]
        assert m.mean_average_precision(qs) == pytest.approx(0.75)
        with pytest.raises(UsageError):
            m.mean_average_precision([])


class TestHitAt1:
    def test_fixture(self):
        qs = [([0.9, 0.1], [4, 0]), ([0.2, 0.8], [0, 3]), ([0.5, 0.4], [1, 4])]
        assert m.hit_at_1(qs) == pytest.approx(66.67, abs=5e-3)

    def test_single_queries(self):
        assert m.hit_at_1([([1.0], [4])]) == 100.0
        assert m.hit_at_1([([1.0], [0])]) == 0.0

    def test_threshold_is_configurable(self):
        assert m.hit_at_1([([1.0, 0.0], [2, 4])], hit_level=2) == 100.0

    def test_errors(self):
        with pytest.raises(UsageError):
            m.hit_at_1([([], [])])
        with pytest.raises(UsageError):
            m.hit_at_1([([0.1, 0.2], [1])])
        with pytest.raises(UsageError):
            m.hit_at_1([])

    @settings(max_examples=300)
    @given(st.lists(st.lists(st.tuples(st.integers(0, 5), st.integers(0, 4)), min_size=1, max_size=8),
                    min_size=1, max_size=8))
    def test_matches_brute_force(self, queries):
        qs = [([float(s) for s, _ in q], [lv for _, lv in q]) for q in queries]
        assert m.hit_at_1(qs) == pytest.approx(hit_oracle(qs), abs=1e-12)


class TestTokenEfficiency:
    def test_values(self):
        assert m.token_efficiency(34.2, 1.0) == 34.2
        assert m.token_efficiency(0.0, 0.5) == 0.0
        assert m.token_efficiency(29.2, 0.4) == pytest.approx(73.0, abs=1e-12)

    @pytest.mark.parametrize("d", [0.0, -1.0, math.nan])
    def test_density_must_be_positive(self, d):
        with pytest.raises(ValidationError):
            m.token_efficiency(10.0, d)


# ---------------------------------------------------------------- prediction files

class TestPredictionFiles:
    def test_round_trip(self, tmp_path):
        recs = [m.PredictionRecord("q1", [m.Interval(6.0, 12.0)],
                                   [m.ScoredClip(m.Interval(0.0, 2.0), 0.13)]),
                m.PredictionRecord("q2", [m.Interval(1.5, 3.0), m.Interval(4.0, 5.0)])]
        path = tmp_path / "preds.jsonl"
        m.write_predictions(recs, path)
        assert m.read_predictions(path) == recs

    @pytest.mark.parametrize("bad", [
        "not json",
        json.dumps({"intervals": [[0, 1]]}),
        json.dumps({"qid": "a", "intervals": []}),
        json.dumps({"qid": "a", "intervals": [[2, 1]]}),
        json.dumps({"qid": "a", "intervals": [[0, "1"]]}),
        json.dumps({"qid": "a", "intervals": [[0, 1]], "clips": [[0, 2]]}),
        json.dumps({"qid": "a", "intervals": [[0, 1]], "extra": 1}),
        json.dumps([1, 2]),
    ])
    def test_malformed_line_reports_line_number(self, tmp_path, bad):
        path = tmp_path / "preds.jsonl"
        path.write_text(json.dumps({"qid": "ok", "intervals": [[0, 1]]}) + "\n\n" + bad + "\n")
        with pytest.raises(m.PredictionFormatError, match=r"preds\.jsonl:3:"):
            m.read_predictions(path)
