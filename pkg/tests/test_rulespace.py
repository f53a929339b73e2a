import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from hierlogic import diffmath as dm
from hierlogic import kb as kbm
from hierlogic import rulespace as rs
from hierlogic.errors import EmptyBatch, ShapeMismatch
from hierlogic.extractor import extract, grounding_oracle, parse_operator_form, encode

from conftest import random_kb, small_kbs

S1 = 1.0 / (1.0 + np.exp(-1.0))


def _ids(store, *names):
    return [store.vocab.id(n) for n in names]


def test_kappa_two_hops(toy3_store):
    succ, = _ids(toy3_store, "Succ")
    op = np.zeros((2, toy3_store.K))
    op[:, succ] = 1
    v = kbm.one_hot(0, 3)
    assert rs.kappa_apply(np.array([0.0, 1.0]), op, v, toy3_store).data.tolist() == [0, 0, 1]
    mixed = rs.kappa_apply(np.array([0.5, 0.5]), op, v, toy3_store).data
    assert np.allclose(mixed, [0, 0.5, 0.5])


def test_kappa_identity(toy3_store):
    ident, = _ids(toy3_store, "Identity")
    op = np.zeros((1, toy3_store.K))
    op[0, ident] = 1
    v = np.array([0.2, 0.0, 0.7])
    assert np.array_equal(rs.kappa_apply(np.array([1.0]), op, v, toy3_store).data, v)


def test_kappa_shape_errors(toy3_store):
    op = np.full((2, toy3_store.K), 1.0 / toy3_store.K)
    with pytest.raises(ShapeMismatch):
        rs.kappa_apply(np.array([1.0]), op, kbm.one_hot(0, 3), toy3_store)
    with pytest.raises(ShapeMismatch):
        rs.kappa_apply(np.array([0.5, 0.5]), op, np.ones(4), toy3_store)


def test_unary_statement_two_hops(toy3_store):
    even, succ = _ids(toy3_store, "Even", "Succ")
    cfg = rs.RuleSpaceConfig(K=toy3_store.K, T=2, L=0)
    b = rs.one_hot_bundle(cfg, [succ, succ], [0] * cfg.K, [1] * cfg.K, out=even)
    assert abs(float(rs.eval_statement(even, b, toy3_store, 0, 0).data) - S1) < 1e-12


def test_binary_statement_identity_paths(toy3_store):
    succ, ident = _ids(toy3_store, "Succ", "Identity")
    cfg = rs.RuleSpaceConfig(K=toy3_store.K, T=1, L=0)
    b = rs.one_hot_bundle(cfg, [ident], [0] * cfg.K, [0] * cfg.K, out=succ)
    assert abs(float(rs.eval_statement(succ, b, toy3_store, 0, 1).data) - S1) < 1e-12
    assert float(rs.eval_statement(succ, b, toy3_store, 0, 2).data) == 0.5


def test_empty_predicate_statement_is_half():
    ents = kbm.EntityTable(["a", "b", "c"])
    preds = kbm.PredicateTable.from_pairs([("P", 2), ("Q", 2)])
    store = kbm.build_matrices(kbm.KnowledgeBase(ents, preds, [(0, 0, 1)]))
    rng = np.random.default_rng(0)
    b = rs.random_bundle(rs.RuleSpaceConfig(K=store.K, T=2, L=0), rng)
    vals = rs.statement_values(b, store, [0, 1, 2], [1, 2, 0]).data
    assert np.all(vals[store.vocab.id("Q")] == 0.5)


def test_formula_arithmetic():
    cfg = rs.RuleSpaceConfig(K=2, T=1, L=2, C=1)
    stm = np.array([0.7, 0.6])
    both = rs.one_hot_bundle(cfg, [0], [0, 0], [0, 0], [[0]], [[1]])
    assert abs(float(rs.eval_formula_levels(both, stm)[1].data[0]) - 0.42) < 1e-12
    neg = rs.one_hot_bundle(cfg, [0], [0, 0], [0, 0], [[0]], [[3]])
    assert abs(float(rs.eval_formula_levels(neg, stm)[1].data[0]) - 0.28) < 1e-12


def test_l0_pool_is_statements(toy3_store):
    cfg = rs.RuleSpaceConfig(K=toy3_store.K, T=2, L=0)
    b = rs.random_bundle(cfg, np.random.default_rng(1))
    assert cfg.pool_size == cfg.K
    q = kbm.QueryBatch([0, 1], [1, 1], [1, 2], [1, 1])
    sb = rs.score_queries(b, toy3_store, q, keep_intermediates=True)
    assert len(sb.levels) == 1
    assert np.allclose(sb.scores.data, b.out @ sb.statements.data)


def test_output_one_hot_equals_statement(toy3_store):
    cfg = rs.RuleSpaceConfig(K=toy3_store.K, T=2, L=1)
    b = rs.random_bundle(cfg, np.random.default_rng(2))
    for k in range(cfg.K):
        b.out = np.eye(cfg.pool_size)[k]
        s = rs.score_queries(b, toy3_store, kbm.QueryBatch([0], [1], [2], [1])).scores.data[0]
        assert s == float(rs.eval_statement(k, b, toy3_store, 0, 2).data)


def test_uniform_output_averages(toy3_store):
    succ, ident = _ids(toy3_store, "Succ", "Identity")
    cfg = rs.RuleSpaceConfig(K=toy3_store.K, T=1, L=0)
    b = rs.one_hot_bundle(cfg, [ident], [0] * cfg.K, [0] * cfg.K)
    b.out = np.zeros(cfg.K)
    b.out[[succ, ident]] = 0.5
    s = rs.score_queries(b, toy3_store, kbm.QueryBatch([0], [1], [1], [1])).scores.data[0]
    # Succ(e0,e1) holds, Identity(e0,e1) does not
    assert abs(s - 0.5 * (S1 + 0.5)) < 1e-12


def test_even_rule_matches_oracle(toy3, toy3_store):
    rule = parse_operator_form("Even(X) ← Even(φ_Succ⁻¹(φ_Succ⁻¹(X)))", ["Even"])
    cfg = rs.RuleSpaceConfig(K=toy3_store.K, T=2, L=0)
    b = encode(rule, cfg, toy3_store.vocab)
    s = rs.score_queries(b, toy3_store, kbm.QueryBatch([2], [0], [2], [1])).scores.data[0]
    assert abs(s - S1) < 1e-6
    assert abs(s - grounding_oracle(rule, toy3, (2, 2))) < 1e-6


def test_harden():
    cfg = rs.RuleSpaceConfig(K=3, T=1, L=0)
    b = rs.AttentionBundle(np.array([[0.2, 0.5, 0.3]]), np.full((3, 1), 1.0), np.full((3, 1), 1.0),
                           [], [], np.array([0.5, 0.5, 0.0]))
    h = rs.harden(b)
    assert h.op.tolist() == [[0, 1, 0]]
    assert h.out.tolist() == [1, 0, 0]
    assert rs.harden(h).equals(h)
    h.validate(cfg)


def test_validate_rejects_bad_shapes():
    cfg = rs.RuleSpaceConfig(K=3, T=2, L=2, C=2)
    b = rs.random_bundle(cfg, np.random.default_rng(0))
    b.validate(cfg)
    b.op = b.op[:1]
    with pytest.raises(ShapeMismatch):
        b.validate(cfg)


def test_empty_batch(toy3_store):
    cfg = rs.RuleSpaceConfig(K=toy3_store.K, T=1, L=0)
    with pytest.raises(EmptyBatch):
        rs.score_queries(rs.random_bundle(cfg, np.random.default_rng(0)), toy3_store,
                         kbm.QueryBatch.empty())


def _queries(kb, rng, n=12):
    m = kb.num_entities
    preds = np.array([p.id for p in kb.predicates])
    p = rng.choice(preds, n)
    s = rng.integers(0, m, n)
    o = np.where([kb.predicates[int(x)].arity == 1 for x in p], s, rng.integers(0, m, n))
    return kbm.QueryBatch(s, p, o, np.zeros(n))


@settings(max_examples=40, deadline=None)
@given(small_kbs(), st.integers(1, 3), st.integers(0, 2), st.integers(1, 4), st.integers(0, 10_000))
def test_hard_scores_match_oracle(kb, T, L, C, seed):
    store = kbm.build_matrices(kb)
    cfg = rs.RuleSpaceConfig(K=store.K, T=T, L=L, C=C)
    rng = np.random.default_rng(seed)
    b = rs.harden(rs.random_bundle(cfg, rng))
    q = _queries(kb, rng)
    scores = rs.score_queries(b, store, q).scores.data
    for i in range(len(q)):
        rule = extract(b, cfg, store.vocab, int(q.predicate[i]))
        expect = grounding_oracle(rule, kb, (int(q.subject[i]), int(q.object[i])))
        assert abs(scores[i] - expect) < 1e-6


@settings(max_examples=25, deadline=None)
@given(small_kbs(), st.integers(0, 10_000))
def test_identity_paths_are_fact_lookup(kb, seed):
    store = kbm.build_matrices(kb)
    cfg = rs.RuleSpaceConfig(K=store.K, T=1, L=0)
    ident = store.identity_id
    n = store.n
    s, o = np.divmod(np.arange(n * n), n)
    for p in kb.predicates:
        if p.arity != 2:
            continue
        b = rs.one_hot_bundle(cfg, [ident], [0] * cfg.K, [0] * cfg.K, out=p.id)
        got = rs.score_queries(b, store, kbm.QueryBatch(s, np.full(n * n, p.id), o, 0 * s)).scores.data
        expect = np.array([S1 if kb.contains(a, p.id, c) else 0.5 for a, c in zip(s, o)])
        assert np.allclose(got, expect, atol=1e-12)


@settings(max_examples=30, deadline=None)
@given(small_kbs(), st.integers(1, 3), st.integers(0, 3), st.integers(1, 4), st.integers(0, 10_000))
def test_scores_in_unit_interval(kb, T, L, C, seed):
    store = kbm.build_matrices(kb)
    cfg = rs.RuleSpaceConfig(K=store.K, T=T, L=L, C=C)
    rng = np.random.default_rng(seed)
    b = rs.random_bundle(cfg, rng, concentration=0.3)
    sb = rs.score_queries(b, store, _queries(kb, rng), keep_intermediates=True)
    for arr in [sb.scores.data, sb.statements.data, *(lv.data for lv in sb.levels)]:
        assert np.all(arr >= 0) and np.all(arr <= 1)


@settings(max_examples=25, deadline=None)
@given(small_kbs(), st.integers(0, 10_000))
def test_scores_pointwise_in_batch(kb, seed):
    store = kbm.build_matrices(kb)
    cfg = rs.RuleSpaceConfig(K=store.K, T=2, L=2, C=2)
    rng = np.random.default_rng(seed)
    b = rs.random_bundle(cfg, rng)
    q = _queries(kb, rng)
    joint = rs.score_queries(b, store, q, mask=True).scores.data
    alone = [rs.score_queries(b, store, q.take([i]), mask=True).scores.data[0] for i in range(len(q))]
    assert np.allclose(joint, alone, rtol=0, atol=1e-12)


def test_attention_gradients_toy3(toy3_store):
    cfg = rs.RuleSpaceConfig(K=toy3_store.K, T=2, L=2, C=2)
    rng = np.random.default_rng(0)
    raw = rs.random_bundle(cfg, rng)
    with dm.precision(np.float64):
        tensors = {name: dm.parameter(arr, dtype=np.float64) for name, arr in raw.rows()}
        b = rs.AttentionBundle(tensors["op"], tensors["stmt_first"], tensors["stmt_second"],
                               [tensors["form_first.1"]], [tensors["form_second.1"]],
                               tensors["out"])
        n = toy3_store.n
        s, o = np.divmod(np.arange(n * n), n)
        q = kbm.QueryBatch(s, np.ones(n * n), o, 0 * s)
        err = dm.finite_diff_check(lambda: rs.score_queries(b, toy3_store, q).scores.mean(),
                                   list(tensors.values()))
    assert err < 1e-4


def test_masking_equals_removing_fact():
    kb = random_kb(7, 1, 2, 0.5, 3)
    store = kbm.build_matrices(kb)
    cfg = rs.RuleSpaceConfig(K=store.K, T=2, L=1, C=2)
    b = rs.random_bundle(cfg, np.random.default_rng(5))
    for s, p, o in kb.facts[:6].tolist():
        q = kbm.QueryBatch([s], [p], [o], [1])
        masked = rs.score_queries(b, store, q, mask=True).scores.data[0]
        bare = kbm.build_matrices(kb.without([(s, p, o)]))
        assert abs(masked - rs.score_queries(b, bare, q).scores.data[0]) < 1e-12


@pytest.mark.parametrize("seed", range(4))
def test_candidate_scores_match_batch(seed):
    kb = random_kb(9, 1, 2, 0.4, seed)
    store = kbm.build_matrices(kb)
    cfg = rs.RuleSpaceConfig(K=store.K, T=2, L=2, C=2)
    b = rs.random_bundle(cfg, np.random.default_rng(seed))
    n = store.n
    for p in kb.predicates:
        anchor = seed % n
        got_obj = rs.all_candidate_scores(b, store, p.id, anchor, "object")
        if p.arity == 1:
            q = kbm.QueryBatch(np.arange(n), np.full(n, p.id), np.arange(n), np.zeros(n))
            assert np.allclose(got_obj, rs.score_queries(b, store, q).scores.data, atol=1e-12)
            continue
        q = kbm.QueryBatch(np.full(n, anchor), np.full(n, p.id), np.arange(n), np.zeros(n))
        assert np.allclose(got_obj, rs.score_queries(b, store, q).scores.data, atol=1e-12)
        got_sub = rs.all_candidate_scores(b, store, p.id, anchor, "subject")
        q = kbm.QueryBatch(np.arange(n), np.full(n, p.id), np.full(n, anchor), np.zeros(n))
        assert np.allclose(got_sub, rs.score_queries(b, store, q).scores.data, atol=1e-12)
