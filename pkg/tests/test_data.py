import json
import math

import pytest

from flowrec.data import (
    DataFormatError,
    SyntheticSpec,
    build_corpus,
    generate_synthetic,
    parse_jsonl,
    parse_mind_behaviors,
    parse_mind_news,
    serialize_jsonl,
    split_by_time,
    subsample_users,
    unresolved_ids,
)

NEWS_LINE = "N1\tsports\tsoccer\tTitle A\tAbstract A\thttp://x\t[]\t[]"
BEHAVIOR_LINE = "1\tU1\t11/11/2019 9:05:58 AM\tN10 N11\tN20-1 N21-0"


class TestMindNews:
    def test_single_line(self):
        result = parse_mind_news([NEWS_LINE])
        assert not result.errors
        (article,) = result.articles
        assert article.article_id == "N1"
        assert article.title == "Title A"
        assert article.body == "Abstract A"
        assert article.attributes == {"category": "sports", "subcategory": "soccer"}

    def test_empty_stream(self):
        result = parse_mind_news([])
        assert result.articles == [] and result.errors == []

    def test_short_line_errors_and_parsing_continues(self):
        lines = ["N9\tcat\tsub", NEWS_LINE]
        result = parse_mind_news(lines)
        assert len(result.articles) == 1
        assert len(result.errors) == 1
        assert result.errors[0].line_no == 1

    def test_duplicate_id_is_record_error(self):
        result = parse_mind_news([NEWS_LINE, NEWS_LINE])
        assert len(result.articles) == 1
        assert "duplicate" in result.errors[0].message

    def test_totals_match_line_counts(self):
        lines = [NEWS_LINE, "bad", "N2\tc\ts\tT\tA\tu\t[]\t[]", "N2\tc\ts\tT\tA\tu\t[]\t[]"]
        result = parse_mind_news(lines)
        assert len(result.articles) + len(result.errors) == len(lines)


class TestMindBehaviors:
    def test_single_line(self):
        result = parse_mind_behaviors([BEHAVIOR_LINE])
        assert not result.errors
        (imp,) = result.impressions
        assert imp.user_id == "U1"
        assert imp.history == ["N10", "N11"]
        assert imp.candidates == [("N20", 1), ("N21", 0)]
        assert imp.timestamp > 0

    def test_empty_history(self):
        result = parse_mind_behaviors(["1\tU1\t11/11/2019 9:05:58 AM\t\tN20-1"])
        (imp,) = result.impressions
        assert imp.history == []

    def test_bad_candidate_suffix(self):
        result = parse_mind_behaviors(["1\tU1\t11/11/2019 9:05:58 AM\tN10\tN20-2"])
        assert not result.impressions
        assert "N20-2" in result.errors[0].message

    def test_history_order_preserved(self):
        result = parse_mind_behaviors(["1\tU1\t0\tN3 N1 N2\tN5-0 N4-1"])
        assert result.impressions[0].history == ["N3", "N1", "N2"]


class TestJsonl:
    def test_article_record(self):
        line = json.dumps({"kind": "article", "id": "a1", "title": "t", "body": "b",
                           "attributes": {"position": "engineer"}})
        result = parse_jsonl([line])
        (article,) = result.articles
        assert article.attributes["position"] == "engineer"

    def test_impression_record(self):
        line = json.dumps({"kind": "impression", "id": "i1", "user": "u1", "timestamp": 0,
                           "history": [], "candidates": [["a1", 1]]})
        result = parse_jsonl([line])
        (imp,) = result.impressions
        assert imp.candidates == [("a1", 1)]

    def test_unknown_kind_is_error(self):
        result = parse_jsonl([json.dumps({"kind": "x"})])
        assert not result.articles and not result.impressions
        assert "unknown kind" in result.errors[0].message

    def test_bad_label_is_error(self):
        line = json.dumps({"kind": "impression", "id": "i", "user": "u", "timestamp": 0,
                           "history": [], "candidates": [["a1", 2]]})
        result = parse_jsonl([line])
        assert result.errors

    def test_round_trip_is_normalizing(self):
        messy = [
            json.dumps({"title": "t", "id": "a1", "kind": "article", "body": "b",
                        "attributes": {"z": "1", "a": "2"}}),
            json.dumps({"kind": "impression", "user": "u", "id": "i1", "candidates": [["a1", 0]],
                        "history": ["a1"], "timestamp": 3}),
        ]
        once = parse_jsonl(messy)
        normalized = list(serialize_jsonl(once.articles, once.impressions))
        twice = parse_jsonl(normalized)
        assert list(serialize_jsonl(twice.articles, twice.impressions)) == normalized

    def test_summary_survives_round_trip(self):
        result = parse_jsonl([json.dumps({"kind": "article", "id": "a", "title": "t",
                                          "body": "b", "summary": "s"})])
        line = list(serialize_jsonl(result.articles, []))[0]
        assert parse_jsonl([line]).articles[0].summary == "s"


class TestCorpusUtilities:
    def test_build_corpus_rejects_duplicates(self):
        from conftest import make_article
        with pytest.raises(DataFormatError):
            build_corpus([make_article("a"), make_article("a")])

    def test_unresolved_ids(self):
        from conftest import make_article, make_impression
        corpus = build_corpus([make_article("a1")])
        imps = [make_impression("i", history=["a1", "ghost"], candidates=[("a1", 1), ("gone", 0)])]
        assert unresolved_ids(corpus, imps) == {"ghost", "gone"}

    def test_subsample_users_deterministic(self):
        from conftest import make_impression
        imps = [make_impression(f"i{k}", user=f"u{k % 7}") for k in range(30)]
        first = subsample_users(imps, 3, seed=4)
        second = subsample_users(imps, 3, seed=4)
        assert [i.impression_id for i in first] == [i.impression_id for i in second]
        assert len({i.user_id for i in first}) == 3

    def test_split_by_time_takes_latest(self):
        from conftest import make_impression
        imps = [make_impression(f"i{k}", timestamp=k) for k in range(20)]
        train, val = split_by_time(imps, 0.1)
        assert len(val) == 2
        assert {i.timestamp for i in val} == {18, 19}


class TestSynthetic:
    def test_same_seed_byte_identical(self):
        spec = SyntheticSpec(n_users=6, n_articles=30, n_impressions=40, seed=9)
        a = generate_synthetic(spec)
        b = generate_synthetic(SyntheticSpec(n_users=6, n_articles=30, n_impressions=40, seed=9))
        assert "\n".join(serialize_jsonl(a.articles, a.impressions)) == \
               "\n".join(serialize_jsonl(b.articles, b.impressions))

    def test_single_topic_shares_category(self):
        ds = generate_synthetic(SyntheticSpec(n_users=3, n_articles=10, n_impressions=5,
                                              topic_count=1, seed=2))
        assert {a.attributes["category"] for a in ds.articles} == {"topic0"}

    def test_all_ids_resolve(self):
        ds = generate_synthetic(SyntheticSpec(n_users=5, n_articles=25, n_impressions=30, seed=3))
        assert not unresolved_ids(ds.corpus, ds.impressions)

    def test_invalid_spec_rejected(self):
        with pytest.raises(DataFormatError):
            SyntheticSpec(n_users=0).validate()
        with pytest.raises(DataFormatError):
            SyntheticSpec(click_rule="nope").validate()

    @pytest.mark.parametrize("rule", ["planted-bilinear", "topic-affinity", "flow-mix"])
    def test_positive_rate_matches_planted_mean(self, rule):
        # Monte-Carlo oracle: labels are Bernoulli draws of the recorded
        # planted probabilities, so the empirical rate must sit within a few
        # standard errors of their mean.
        spec = SyntheticSpec(n_users=50, n_articles=200, n_impressions=500, seed=7,
                             click_rule=rule)
        ds = generate_synthetic(spec)
        labels = [y for imp in ds.impressions for _, y in imp.candidates]
        planted = [p for probs in ds.truth["candidate_probs"] for p in probs]
        assert len(labels) == len(planted)
        analytic_mean = sum(planted) / len(planted)
        empirical = sum(labels) / len(labels)
        assert abs(empirical - analytic_mean) < 0.05

    def test_flow_mix_probabilities_follow_rule(self):
        # Independent re-evaluation of the flow-mix logit from the truth dump.
        spec = SyntheticSpec(n_users=8, n_articles=40, n_impressions=30, seed=11,
                             click_rule="flow-mix")
        ds = generate_synthetic(spec)
        truth = ds.truth
        pars = truth["flow_mix_params"]
        topics = truth["article_topics"]
        engagement = truth["article_engagement"]
        art_index = {a.article_id: i for i, a in enumerate(ds.articles)}
        for imp, probs in zip(ds.impressions, truth["candidate_probs"]):
            user_k = int(imp.user_id[1:])
            fav = truth["position_topic"][truth["user_position"][user_k]]
            for (cand_id, _), recorded in zip(imp.candidates, probs):
                z = topics[art_index[cand_id]]
                same = [art_index[h] for h in imp.history if topics[art_index[h]] == z]
                logit = pars["bias"] + pars["beta_profile"] * (z == fav)
                if same:
                    mean_eng = sum(engagement[i] for i in same) / len(same)
                    logit += pars["beta_instant"] * (2.0 * mean_eng - 1.0)
                assert math.isclose(recorded, 1.0 / (1.0 + math.exp(-logit)), rel_tol=1e-12)
