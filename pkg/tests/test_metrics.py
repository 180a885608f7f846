import json
import math

import numpy as np
import pytest

from flowrec.metrics import (
    ServingLogRecord,
    auc,
    evaluate_rankings,
    mrr,
    ndcg_at,
    uvctr,
)


# --- brute-force references, deliberately written from scratch -------------

def auc_by_pair_enumeration(scores, labels):
    pairs = [(p, n) for p, yp in zip(scores, labels) if yp == 1
             for n, yn in zip(scores, labels) if yn == 0]
    if not pairs:
        return None
    total = 0.0
    for p, n in pairs:
        if p > n:
            total += 1.0
        elif p == n:
            total += 0.5
    return total / len(pairs)


def full_sort_order(scores):
    return sorted(range(len(scores)), key=lambda i: (-scores[i], i))


def mrr_by_full_sort(scores, labels):
    order = full_sort_order(scores)
    recip, n_pos = 0.0, 0
    for rank, i in enumerate(order, start=1):
        if labels[i] == 1:
            recip += 1.0 / rank
            n_pos += 1
    return recip / n_pos if n_pos else None


def ndcg_by_full_sort(scores, labels, k):
    order = full_sort_order(scores)
    n_pos = sum(labels)
    if n_pos == 0:
        return None
    dcg = 0.0
    for rank, i in enumerate(order[:k], start=1):
        if labels[i] == 1:
            dcg += 1.0 / math.log2(rank + 1)
    ideal = sum(1.0 / math.log2(r + 1) for r in range(1, min(k, n_pos) + 1))
    return dcg / ideal


class TestAuc:
    def test_perfect_ranking(self):
        assert auc([0.9, 0.1], [1, 0]) == 1.0

    def test_middle_positive(self):
        assert auc([0.9, 0.8, 0.1], [0, 1, 0]) == 0.5

    def test_all_tied_scores(self):
        assert auc([0.4, 0.4], [1, 0]) == 0.5

    def test_invalid_impressions_return_none(self):
        assert auc([0.5, 0.6], [1, 1]) is None
        assert auc([0.5, 0.6], [0, 0]) is None


class TestMrr:
    def test_positive_at_rank_two(self):
        assert mrr([0.9, 0.5], [0, 1]) == 0.5

    def test_positive_first(self):
        assert mrr([0.9, 0.5], [1, 0]) == 1.0

    def test_two_positives_ranks_one_and_four(self):
        scores = [0.9, 0.7, 0.6, 0.5]
        labels = [1, 0, 0, 1]
        assert mrr(scores, labels) == (1.0 + 0.25) / 2.0

    def test_tie_keeps_input_order(self):
        # equal scores: the earlier positive keeps the earlier rank
        assert mrr([0.5, 0.5], [0, 1]) == 0.5
        assert mrr([0.5, 0.5], [1, 0]) == 1.0


class TestNdcg:
    def test_positive_at_rank_two_k5(self):
        got = ndcg_at([0.9, 0.5], [0, 1], 5)
        assert math.isclose(got, 1.0 / math.log2(3.0), rel_tol=1e-12)

    def test_positive_first_is_one(self):
        assert ndcg_at([0.9, 0.5], [1, 0], 5) == 1.0

    def test_positive_outside_cutoff_is_zero(self):
        scores = [0.9, 0.8, 0.7, 0.6, 0.5, 0.4]
        labels = [0, 0, 0, 0, 0, 1]
        assert ndcg_at(scores, labels, 5) == 0.0


class TestOracleEquivalence:
    def test_exact_match_on_randomized_impressions(self):
        rng = np.random.default_rng(123)
        checked = 0
        for _ in range(1000):
            n = int(rng.integers(2, 9))
            scores = [float(s) for s in rng.random(n)]
            if rng.random() < 0.2:  # force some ties
                scores[0] = scores[-1]
            labels = [int(y) for y in rng.integers(0, 2, size=n)]
            assert auc(scores, labels) == auc_by_pair_enumeration(scores, labels)
            assert mrr(scores, labels) == mrr_by_full_sort(scores, labels)
            for k in (5, 10):
                assert ndcg_at(scores, labels, k) == ndcg_by_full_sort(scores, labels, k)
            checked += 1
        assert checked == 1000

    def test_monotone_transform_invariance(self):
        rng = np.random.default_rng(7)
        transforms = [lambda s: 2.0 * s + 0.5, np.expm1, np.arctan]
        for _ in range(200):
            n = int(rng.integers(2, 9))
            scores = [float(s) for s in rng.random(n)]
            labels = [int(y) for y in rng.integers(0, 2, size=n)]
            base = (auc(scores, labels), mrr(scores, labels),
                    ndcg_at(scores, labels, 5), ndcg_at(scores, labels, 10))
            for f in transforms:
                mapped = [float(f(s)) for s in scores]
                assert (auc(mapped, labels), mrr(mapped, labels),
                        ndcg_at(mapped, labels, 5), ndcg_at(mapped, labels, 10)) == base

    def test_ranges(self):
        rng = np.random.default_rng(99)
        for _ in range(200):
            n = int(rng.integers(2, 9))
            scores = [float(s) for s in rng.random(n)]
            labels = [int(y) for y in rng.integers(0, 2, size=n)]
            for value in (auc(scores, labels), mrr(scores, labels),
                          ndcg_at(scores, labels, 5), ndcg_at(scores, labels, 10)):
                if value is not None:
                    assert 0.0 <= value <= 1.0


class TestEvaluateRankings:
    def test_exclusion_counting(self):
        rankings = [
            ([0.9, 0.1], [1, 0]),
            ([0.9, 0.1], [1, 1]),   # no negative: excluded
            ([0.2, 0.3], [0, 0]),   # no positive: excluded
        ]
        report = evaluate_rankings(rankings)
        assert report.n_impressions == 1
        assert report.n_excluded == 2
        assert report.auc == 1.0

    def test_tie_flagging(self):
        report = evaluate_rankings([([0.5, 0.5], [1, 0])])
        assert report.n_tie_impressions == 1

    def test_global_auc_option(self):
        rankings = [([0.9, 0.1], [1, 0]), ([0.8, 0.2], [0, 1])]
        report = evaluate_rankings(rankings, include_global_auc=True)
        pooled = auc_by_pair_enumeration([0.9, 0.1, 0.8, 0.2], [1, 0, 0, 1])
        assert report.global_auc == pooled

    def test_json_fields(self):
        report = evaluate_rankings([([0.9, 0.1], [1, 0])])
        payload = json.loads(report.to_json())
        for key in ("auc", "mrr", "ndcg5", "ndcg10", "n_impressions", "n_excluded"):
            assert key in payload


class TestUvctr:
    def test_basic_fraction(self):
        records = [ServingLogRecord("2024-01-01", f"v{i}", True, i < 5) for i in range(20)]
        assert uvctr(records) == 0.25

    def test_all_clickers(self):
        records = [ServingLogRecord("2024-01-01", f"u{i}", True, True) for i in range(4)]
        assert uvctr(records) == 1.0

    def test_repeat_visits_deduplicated(self):
        records = [
            ServingLogRecord("2024-01-01", "u1", True, False),
            ServingLogRecord("2024-01-02", "u1", True, True),
            ServingLogRecord("2024-01-03", "u2", True, False),
        ]
        assert uvctr(records) == 0.5

    def test_window_filter(self):
        records = [
            ServingLogRecord("2024-01-01", "u1", True, True),
            ServingLogRecord("2024-02-01", "u2", True, False),
        ]
        assert uvctr(records, window=("2024-02-01", "2024-02-28")) == 0.0
        assert uvctr(records, window=("2024-01-01", "2024-02-28")) == 0.5

    def test_zero_visitors_absent(self):
        assert uvctr([], window=("2024-01-01", "2024-01-02")) is None

    def test_click_requires_visit(self):
        with pytest.raises(ValueError):
            ServingLogRecord("2024-01-01", "u1", False, True)
