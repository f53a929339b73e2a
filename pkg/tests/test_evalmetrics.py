import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from hierlogic import evalmetrics as em
from hierlogic.errors import EmptyInput, IndexOutOfRange


def brute_rank(scores, true_index, known) -> float:
    """Sort every unfiltered candidate and average the positions of the tied block."""
    cands = [(float(scores[i]), i) for i in range(len(scores)) if i not in set(known) or i == true_index]
    cands.sort(key=lambda c: -c[0])
    target = float(scores[true_index])
    positions = [pos for pos, (s, _) in enumerate(cands, 1) if s == target]
    return (min(positions) + max(positions)) / 2.0


def test_rank_examples():
    assert em.filtered_rank([0.9, 0.5, 0.1], 0) == 1
    assert em.filtered_rank([0.9, 0.5, 0.1], 1, {0}) == 1
    assert em.filtered_rank([0.3] * 5, 2) == 3
    with pytest.raises(IndexOutOfRange):
        em.filtered_rank([0.1, 0.2], 2)
    with pytest.raises(IndexOutOfRange):
        em.filtered_rank([0.1, 0.2], 0, {5})


def test_metric_examples():
    assert em.mrr([1, 1]) == 1.0 and em.hits_at_k([1, 1], 10) == 1.0
    assert em.mrr([2]) == 0.5
    assert em.hits_at_k([11], 10) == 0.0
    assert em.accuracy([1, 0, 1], [1, 1, 1]) == pytest.approx(2 / 3)
    for fn in (em.mrr, lambda r: em.hits_at_k(r, 10)):
        with pytest.raises(EmptyInput):
            fn([])
    with pytest.raises(EmptyInput):
        em.accuracy([], [])


scores_st = st.lists(st.sampled_from([0.0, 0.25, 0.5, 0.731, 1.0]), min_size=1, max_size=30)


@settings(max_examples=200, deadline=None)
@given(scores_st, st.data())
def test_rank_matches_sorting_oracle(scores, data):
    n = len(scores)
    t = data.draw(st.integers(0, n - 1))
    known = data.draw(st.sets(st.integers(0, n - 1)))
    known.discard(t)
    r = em.filtered_rank(scores, t, known)
    assert r == brute_rank(scores, t, known)
    assert 1 <= r <= n - len(known)
    assert r <= em.filtered_rank(scores, t)


@settings(max_examples=100, deadline=None)
@given(st.lists(st.integers(1, 40), min_size=1, max_size=50))
def test_metric_ranges(ranks):
    assert 0 < em.mrr(ranks) <= 1
    hits = [em.hits_at_k(ranks, k) for k in range(1, 12)]
    assert all(0 <= h <= 1 for h in hits)
    assert all(a <= b for a, b in zip(hits, hits[1:]))


def test_rank_facts_both_sides():
    # three entities, one binary predicate 0 and one unary predicate 1
    table = np.array([[0.1, 0.9, 0.2], [0.5, 0.1, 0.8], [0.3, 0.3, 0.3]])

    def score(p, anchor, side):
        if side == "unary":
            return np.array([0.2, 0.9, 0.4])
        return table[anchor] if side == "object" else table[:, anchor]

    facts = [(0, 0, 1), (1, 0, 2), (2, 1, 2)]
    res = em.rank_facts(facts, score, facts, 3, unary=[1])
    assert res.tail.tolist() == [1.0, 1.0, 2.0]
    # (0,·,1): column 1 = [0.9, 0.1, 0.3], true subject 0 -> 1
    # (1,·,2): column 2 = [0.2, 0.8, 0.3], true subject 1 -> 1
    assert res.head.tolist() == [1.0, 1.0]
    m = res.metrics()
    assert m["ranked"] == 5 and m["mrr"] == pytest.approx((1 + 1 + 0.5 + 1 + 1) / 5)
    threaded = em.rank_facts(facts, score, facts, 3, unary=[1], workers=3)
    assert np.array_equal(threaded.ranks, res.ranks)


def test_report_round_trip():
    text = em.format_report({"mrr": 0.5, "hits@10": 1.0, "ranked": 4})
    assert em.parse_report(text) == {"mrr": "0.500000", "hits@10": "1.000000", "ranked": "4"}
