import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from longtail_crs.metrics import (RankedList, bleu_n, coverage_at_k, distinct_n, evaluate, ild_at_k,
                                  lcs_length, mrr_at_k, ndcg_at_k, pwp, pwp_weight, recall_at_k,
                                  rouge_l, tail_recall_at_k)

import oracles
from gen import check_against_oracles, ranked, ranking_instance

WORDS = st.sampled_from("the a movie film good bad great i you like it".split())
SENT = st.lists(WORDS, min_size=1, max_size=12).map(" ".join)


def test_recall_example():
    lists = [RankedList("q", ["a", "b", "c"], {"a", "z"})]
    assert recall_at_k(lists, 1) == 0.5
    assert recall_at_k(lists, 3) == 0.5


def test_ndcg_and_mrr_example():
    lists = [RankedList("q", ["x", "a", "y"], {"a"})]
    assert ndcg_at_k(lists, 3) == pytest.approx(1 / math.log2(3))
    assert mrr_at_k(lists, 3) == 0.5
    assert mrr_at_k(lists, 1) == 0.0


def test_empty_relevant_queries_are_skipped():
    lists = [RankedList("q1", ["a"], {"a"}), RankedList("q2", ["b"], set())]
    assert recall_at_k(lists, 1) == 1.0
    rep = evaluate(lists, [1], catalog_size=2)
    assert rep.n_skipped == 1 and rep.n_queries == 2


def test_tail_recall_none_when_no_tail_queries():
    lists = [RankedList("q", ["a"], {"a"})]
    assert tail_recall_at_k(lists, 1, {"b"}) is None
    assert "n/a" in evaluate(lists, [1], 1, tail={"b"}).to_markdown()


def test_coverage_example():
    lists = [RankedList("q1", ["a", "b"], {"a"}), RankedList("q2", ["b", "c"], {"c"})]
    assert coverage_at_k(lists, 1, 10) == 0.2
    assert coverage_at_k(lists, 2, 10) == 0.3


def test_ild_of_identical_and_opposite_vectors():
    vec = {"a": np.array([1.0, 0]), "b": np.array([1.0, 0]), "c": np.array([-1.0, 0])}
    assert ild_at_k([RankedList("q", ["a", "b"], set())], 2, vec) == 0.0
    assert ild_at_k([RankedList("q", ["a", "c"], set())], 2, vec) == 1.0
    assert ild_at_k([RankedList("q", ["a"], set())], 2, vec) is None


def test_pwp_prefers_unpopular_hits():
    pop = {"h": 1000, "t": 1}
    assert pwp_weight(0) == 1.0
    hit_tail = pwp([RankedList("q", ["t", "h"], {"t"})], 2, pop)
    hit_head = pwp([RankedList("q", ["t", "h"], {"h"})], 2, pop)
    assert hit_tail > hit_head
    assert hit_tail + hit_head == pytest.approx(1.0)


def test_duplicate_ranking_rejected():
    with pytest.raises(ValueError):
        RankedList("q", ["a", "a"], {"a"})
    with pytest.raises(ValueError):
        recall_at_k([], 0)


@given(st.integers(0, 2**32 - 1))
def test_ranking_metrics_match_oracles(seed):
    check_against_oracles(ranking_instance(np.random.default_rng(seed)))


def test_evaluate_report_columns():
    inst = ranking_instance(np.random.default_rng(3))
    rep = evaluate(ranked(inst["lists"]), [1, 10], len(inst["items"]), inst["tail"], inst["pop"], inst["vectors"])
    assert list(rep.values)[:2] == ["Recall@1", "Recall@10"]
    assert "NDCG@1" not in rep.values and "PWP@10" in rep.values
    assert rep.to_json()["catalog_size"] == len(inst["items"])


def test_text_metric_examples():
    assert distinct_n("a b a b", 2) == pytest.approx(2 / 3)
    assert distinct_n("a b c", 1) == 1.0
    assert distinct_n("", 2) == 0.0
    assert bleu_n("the cat sat on the mat", "the cat sat on the mat", 2) == pytest.approx(1.0)
    assert rouge_l("the cat sat", "the cat sat") == pytest.approx(1.0)
    assert rouge_l("a b", "c d") == 0.0
    assert bleu_n("zzz", "the cat") == 0.0
    assert lcs_length("abcbdab", "bdcaba") == 4


@given(st.lists(SENT, min_size=1, max_size=4), st.integers(1, 3))
def test_distinct_matches_oracle(texts, n):
    assert distinct_n(texts, n) == pytest.approx(oracles.distinct(texts, n), abs=1e-12)


@given(st.lists(st.tuples(SENT, st.lists(SENT, min_size=1, max_size=3)), min_size=1, max_size=4),
       st.integers(1, 4))
def test_bleu_matches_oracle(pairs, n):
    got = bleu_n([h for h, _ in pairs], [r for _, r in pairs], n)
    assert got == pytest.approx(oracles.bleu(pairs, n), abs=1e-12)


@given(SENT, SENT)
def test_rouge_matches_oracle_and_is_bounded(h, r):
    got = rouge_l(h, r)
    assert got == pytest.approx(oracles.rouge_l(h, r), abs=1e-12)
    assert 0.0 <= got <= 1.0 + 1e-12


@given(SENT)
def test_identical_text_scores_one(s):
    assert rouge_l(s, s) == pytest.approx(1.0, abs=1e-12)
    assert bleu_n(s, s, 2) == pytest.approx(1.0, abs=1e-12)
