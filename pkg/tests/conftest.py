import numpy as np
import pytest
from hypothesis import strategies as st

from hierlogic import kb as kbm


def random_kb(n: int, n_unary: int, n_binary: int, density: float, seed: int) -> kbm.KnowledgeBase:
    """Random KB with unary predicates U0.. and binary predicates B0.."""
    rng = np.random.default_rng(seed)
    entities = kbm.EntityTable(f"e{i}" for i in range(n))
    pairs = [(f"U{i}", 1) for i in range(n_unary)] + [(f"B{i}", 2) for i in range(n_binary)]
    preds = kbm.PredicateTable.from_pairs(pairs)
    facts = []
    for p in preds:
        if p.arity == 1:
            xs = np.flatnonzero(rng.random(n) < density)
            facts += [(x, p.id, x) for x in xs]
        else:
            s, o = np.nonzero(rng.random((n, n)) < density / 2)
            facts += list(zip(s, [p.id] * len(s), o))
    if not facts:
        facts = [(0, preds[pairs[-1][0]].id, 0 if pairs[-1][1] == 1 else min(1, n - 1))]
    return kbm.KnowledgeBase(entities, preds, np.array(facts, np.int64).reshape(-1, 3))


@st.composite
def small_kbs(draw, max_entities: int = 8):
    n = draw(st.integers(2, max_entities))
    return random_kb(n, draw(st.integers(0, 2)), draw(st.integers(1, 2)),
                     draw(st.floats(0.1, 0.6)), draw(st.integers(0, 2**31 - 1)))


@pytest.fixture
def toy3():
    return kbm.toy3()


@pytest.fixture
def toy3_store(toy3):
    return kbm.build_matrices(toy3)


@pytest.fixture(scope="session")
def es10():
    return kbm.gen_even_successor(10)


ACCEPTANCE: dict[str, str] = {}


@pytest.fixture
def verdict():
    """Record one PASS/FAIL line for an acceptance criterion, then assert it."""
    def record(label, ok: bool, detail: str, gating: bool = True) -> None:
        tag = "PASS" if ok else "FAIL"
        if not gating:
            tag = "INFO"
        line = f"[{tag}] criterion {label}: {detail}"
        ACCEPTANCE[str(label)] = line
        print(line)
        if gating:
            assert ok, line
    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE.values():
            terminalreporter.write_line(line)
