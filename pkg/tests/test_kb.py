import time

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from hierlogic import kb as kbm
from hierlogic.errors import (ArityMismatch, EmptyKB, IndexOutOfRange, InvalidSize, NoNegatives,
                              NotEnoughNegatives, UnknownEntity, UnknownPredicate)

from conftest import small_kbs


def _write(tmp_path, facts: str, meta: str):
    (tmp_path / "facts.tsv").write_text(facts, encoding="utf-8")
    (tmp_path / "meta.tsv").write_text(meta, encoding="utf-8")
    return tmp_path / "facts.tsv", tmp_path / "meta.tsv"


def test_load_binary_facts(tmp_path):
    kb = kbm.load_facts(*_write(tmp_path, "e0\tSucc\te1\ne1\tSucc\te2\n", "Succ\t2\n"))
    assert len(kb.entities) == 3
    assert len(kb.predicates) == 1
    assert len(kb) == 2


def test_unary_fact_on_diagonal(tmp_path):
    kb = kbm.load_facts(*_write(tmp_path, "e0\tEven\n", "Even\t1\n"))
    store = kbm.build_matrices(kb)
    assert store.dense(0)[0, 0] == 1
    assert store.dense(0).sum() == 1


def test_empty_facts_file(tmp_path):
    with pytest.raises(EmptyKB):
        kbm.load_facts(*_write(tmp_path, "", "Succ\t2\n"))


def test_load_errors_carry_line(tmp_path):
    with pytest.raises(ArityMismatch, match=r"facts.tsv:2"):
        kbm.load_facts(*_write(tmp_path, "a\tP\tb\na\tP\n", "P\t2\n"))
    with pytest.raises(UnknownPredicate, match=r"facts.tsv:1"):
        kbm.load_facts(*_write(tmp_path, "a\tQ\tb\n", "P\t2\n"))


def test_split_rejects_unknown_test_entity(tmp_path):
    (tmp_path / "meta.tsv").write_text("P\t2\n")
    (tmp_path / "train.tsv").write_text("a\tP\tb\n")
    (tmp_path / "test.tsv").write_text("a\tP\tz\n")
    with pytest.raises(UnknownEntity):
        kbm.load_split_dataset(tmp_path)


def test_split_round_trip(tmp_path):
    _, splits = kbm.gen_even_successor(12)
    kbm.write_split_dataset(tmp_path, splits)
    back = kbm.load_split_dataset(tmp_path)
    for name in ("train", "valid", "test"):
        assert back.kb(name).digest() == splits.kb(name).digest()


def test_toy3_matrix(toy3_store):
    succ = toy3_store.vocab.id("Succ")
    assert {tuple(x) for x in np.argwhere(toy3_store.dense(succ))} == {(0, 1), (1, 2)}
    even = toy3_store.vocab.id("Even")
    assert {tuple(x) for x in np.argwhere(toy3_store.dense(even))} == {(0, 0), (2, 2)}


def test_predicate_without_facts_gives_zero_matrix():
    ents = kbm.EntityTable(["a", "b"])
    preds = kbm.PredicateTable.from_pairs([("P", 2), ("Q", 2)])
    store = kbm.build_matrices(kbm.KnowledgeBase(ents, preds, [(0, 0, 1)]))
    assert store.nnz(1) == 0


def test_vocabulary_order(toy3_store):
    assert toy3_store.vocab.names == ("Even", "Succ", "Succ⁻¹", "Identity")
    assert np.array_equal(toy3_store.dense(3), np.eye(3))


def test_negative_sample_toy3(toy3):
    succ = toy3.predicates.id("Succ")
    q = kbm.sample_negative_queries(toy3, succ, 1, 0)
    assert len(q) == 1
    assert not toy3.contains(q.subject[0], succ, q.object[0])
    assert kbm.count_negatives(toy3, succ) == 7


def test_negative_sampling_edges(toy3):
    assert len(kbm.sample_negative_queries(toy3, "Succ", 0, 0)) == 0
    with pytest.raises(NotEnoughNegatives):
        kbm.sample_negative_queries(toy3, "Succ", 8, 0)
    full = kbm.KnowledgeBase(kbm.EntityTable(["a"]), kbm.PredicateTable.from_pairs([("P", 2)]),
                             [(0, 0, 0)])
    with pytest.raises(NoNegatives):
        kbm.sample_negative_queries(full, "P", 1, 0)


def test_es_small():
    full, _ = kbm.gen_even_successor(3)
    text = {full.fact_text(r) for r in full.facts}
    assert text == {"0\tZero", "0\tEven", "2\tEven", "0\tSucc\t1", "1\tSucc\t2"}


def test_es10_counts():
    full, splits = kbm.gen_even_successor(10)
    assert len(full) == 15
    assert len(full.entities) == 10 and len(full.predicates) == 3
    assert len(splits.test) == 1


def test_es1k_fast():
    t = time.perf_counter()
    full, _ = kbm.gen_even_successor(1000)
    # 1 Zero + 500 Even + 999 Succ
    assert len(full) == 1500
    assert time.perf_counter() - t < 1.0


def test_es_invalid_size():
    with pytest.raises(InvalidSize):
        kbm.gen_even_successor(1)


@given(st.integers(2, 1000))
def test_es_count_formula(n):
    full, _ = kbm.gen_even_successor(n)
    assert len(full) == kbm.es_fact_count(n) == 1 + (n + 1) // 2 + (n - 1)


def test_one_hot():
    assert kbm.one_hot(1, 3).tolist() == [0, 1, 0]
    assert kbm.one_hot(0, 1).tolist() == [1]
    with pytest.raises(IndexOutOfRange):
        kbm.one_hot(3, 3)


def test_composition_kb_shape():
    splits = kbm.gen_composition_kb(60, seed=1)
    names = splits.predicates.names
    assert names == ("R1", "R2", "R3", "R4")
    r3 = splits.predicates.id("R3")
    for part in (splits.valid, splits.test):
        assert np.all(part[:, 1] == r3)
    with pytest.raises(InvalidSize):
        kbm.gen_composition_kb(1)


def test_composition_planted():
    """Without noise every R3 fact is an R1-then-R2 path and vice versa."""
    splits = kbm.gen_composition_kb(40, noise=0.0, seed=3)
    full = splits.full_kb()
    store = kbm.build_matrices(full)
    m1, m2, m3 = (store.dense(store.vocab.id(p)) for p in ("R1", "R2", "R3"))
    assert np.array_equal((m1 @ m2 > 0).astype(float), m3)


@settings(max_examples=30, deadline=None)
@given(small_kbs())
def test_matrices_match_facts(kb):
    store = kbm.build_matrices(kb)
    total = 0
    for p in kb.predicates:
        m = store.dense(p.id)
        s, o = kb.facts_of(p.id)
        assert np.all(m[s, o] == 1)
        total += int(m.sum())
        if p.arity == 1:
            assert np.count_nonzero(m - np.diag(np.diag(m))) == 0
        else:
            inv = store.vocab.id(p.name + kbm.INVERSE_SUFFIX)
            assert np.array_equal(store.dense(inv), m.T)
    assert total == len(kb)
    assert set(np.unique(np.concatenate([store.dense(k).ravel() for k in range(store.K)]))) <= {0, 1}


@settings(max_examples=30, deadline=None)
@given(small_kbs(), st.integers(0, 1000))
def test_negatives_are_zero_entries(kb, seed):
    for p in kb.predicates:
        avail = kbm.count_negatives(kb, p.id)
        if avail == 0:
            continue
        q = kbm.sample_negative_queries(kb, p.id, avail, seed)
        pairs = set(zip(q.subject.tolist(), q.object.tolist()))
        assert len(pairs) == avail
        for s, o in pairs:
            assert not kb.contains(s, p.id, o)
            if p.arity == 1:
                assert s == o
