"""Knowledge bases: entity/predicate tables, fact storage, adjacency matrices,
the Even-and-Successor generator and query sampling.

Facts are kept as an ``(N, 3)`` integer array of ``(subject, predicate,
object)`` rows.  Unary facts store the entity in both the subject and the
object column, so every predicate is represented by a square ``|X| x |X|``
boolean matrix and unary predicates live on the diagonal.
"""
from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
import scipy.sparse as sp

from .errors import (
    ArityMismatch,
    EmptyKB,
    IndexOutOfRange,
    InvalidSize,
    IoFailure,
    NoNegatives,
    NotEnoughNegatives,
    UnknownEntity,
    UnknownPredicate,
)

INVERSE_SUFFIX = "⁻¹"
IDENTITY = "Identity"
RESERVED = (IDENTITY,)


# ---------------------------------------------------------------------------
# tables
# ---------------------------------------------------------------------------


class EntityTable:
    """Bijection between entity names and dense zero-based ids."""

    def __init__(self, names: Iterable[str]):
        self.names: tuple[str, ...] = tuple(names)
        self.index: dict[str, int] = {n: i for i, n in enumerate(self.names)}
        if len(self.index) != len(self.names):
            raise ValueError("duplicate entity names")

    def __len__(self) -> int:
        return len(self.names)

    def __contains__(self, name: str) -> bool:
        return name in self.index

    def id(self, name: str) -> int:
        try:
            return self.index[name]
        except KeyError:
            raise UnknownEntity(name) from None

    def __eq__(self, other) -> bool:
        return isinstance(other, EntityTable) and self.names == other.names

    def __hash__(self) -> int:
        return hash(self.names)


@dataclass(frozen=True)
class Predicate:
    name: str
    arity: int
    id: int
    is_inverse: bool = False
    is_identity: bool = False
    base: int | None = None  # id of the predicate an inverse was derived from


class PredicateTable:
    def __init__(self, entries: Sequence[Predicate]):
        self.entries: tuple[Predicate, ...] = tuple(entries)
        self._by_name = {p.name: p for p in self.entries}
        if len(self._by_name) != len(self.entries):
            raise ValueError("duplicate predicate names")
        for i, p in enumerate(self.entries):
            if p.id != i:
                raise ValueError("predicate ids must be dense and ordered")
            if p.arity not in (1, 2):
                raise ArityMismatch(f"{p.name}: arity must be 1 or 2, got {p.arity}")
            if p.is_identity and p.arity != 2:
                raise ArityMismatch("the identity predicate is binary")
        self.unary = frozenset(p.id for p in self.entries if p.arity == 1)
        self.binary = frozenset(p.id for p in self.entries if p.arity == 2)

    @classmethod
    def from_pairs(cls, pairs: Iterable[tuple[str, int]]) -> "PredicateTable":
        return cls([Predicate(n, int(a), i) for i, (n, a) in enumerate(pairs)])

    def __len__(self) -> int:
        return len(self.entries)

    def __iter__(self):
        return iter(self.entries)

    def __getitem__(self, key: int | str) -> Predicate:
        if isinstance(key, str):
            try:
                return self._by_name[key]
            except KeyError:
                raise UnknownPredicate(key) from None
        if not 0 <= key < len(self.entries):
            raise UnknownPredicate(key)
        return self.entries[key]

    def __contains__(self, name: str) -> bool:
        return name in self._by_name

    def id(self, name: str) -> int:
        return self[name].id

    @property
    def names(self) -> tuple[str, ...]:
        return tuple(p.name for p in self.entries)

    def __eq__(self, other) -> bool:
        return isinstance(other, PredicateTable) and self.entries == other.entries

    def __hash__(self) -> int:
        return hash(self.entries)


# ---------------------------------------------------------------------------
# knowledge base
# ---------------------------------------------------------------------------


def _frozen(a: np.ndarray) -> np.ndarray:
    a = np.ascontiguousarray(a)
    a.setflags(write=False)
    return a


def _dedupe(facts: np.ndarray) -> np.ndarray:
    """Drop duplicate rows, keeping first occurrences in their original order."""
    if len(facts) == 0:
        return facts.reshape(0, 3).astype(np.int64)
    _, first = np.unique(facts, axis=0, return_index=True)
    return facts[np.sort(first)]


class KnowledgeBase:
    """Immutable set of facts over fixed entity and predicate tables."""

    def __init__(self, entities: EntityTable, predicates: PredicateTable, facts):
        facts = np.asarray(facts, dtype=np.int64).reshape(-1, 3)
        facts = _dedupe(facts)
        n = len(entities)
        if len(facts):
            if facts[:, [0, 2]].min() < 0 or facts[:, [0, 2]].max() >= n:
                raise IndexOutOfRange("fact refers to an entity id outside the table")
            for pid in np.unique(facts[:, 1]):
                p = predicates[int(pid)]
                rows = facts[facts[:, 1] == pid]
                if p.arity == 1 and np.any(rows[:, 0] != rows[:, 2]):
                    raise ArityMismatch(f"unary predicate {p.name} stored off the diagonal")
        self.entities = entities
        self.predicates = predicates
        self.facts = _frozen(facts)

    def __len__(self) -> int:
        return len(self.facts)

    @property
    def num_entities(self) -> int:
        return len(self.entities)

    def facts_of(self, predicate: int | str) -> tuple[np.ndarray, np.ndarray]:
        pid = self.predicates[predicate].id
        rows = self.facts[self.facts[:, 1] == pid]
        return rows[:, 0], rows[:, 2]

    @cached_property
    def _fact_set(self) -> frozenset:
        return frozenset(map(tuple, self.facts.tolist()))

    def contains(self, subject: int, predicate: int, obj: int) -> bool:
        return (int(subject), int(predicate), int(obj)) in self._fact_set

    def with_facts(self, facts) -> "KnowledgeBase":
        return KnowledgeBase(self.entities, self.predicates, facts)

    def without(self, facts) -> "KnowledgeBase":
        drop = set(map(tuple, np.asarray(facts, dtype=np.int64).reshape(-1, 3).tolist()))
        keep = [row for row in self.facts.tolist() if tuple(row) not in drop]
        return self.with_facts(np.array(keep, dtype=np.int64).reshape(-1, 3))

    def digest(self) -> str:
        h = hashlib.sha256()
        h.update("\x1f".join(self.entities.names).encode())
        h.update(repr([(p.name, p.arity) for p in self.predicates]).encode())
        h.update(np.ascontiguousarray(np.unique(self.facts, axis=0)).tobytes())
        return h.hexdigest()[:16]

    def fact_text(self, row) -> str:
        s, p, o = (int(v) for v in row)
        pred = self.predicates[p]
        if pred.arity == 1:
            return f"{self.entities.names[s]}\t{pred.name}"
        return f"{self.entities.names[s]}\t{pred.name}\t{self.entities.names[o]}"

    def __repr__(self) -> str:
        return (f"KnowledgeBase({len(self.entities)} entities, "
                f"{len(self.predicates)} predicates, {len(self.facts)} facts)")


# ---------------------------------------------------------------------------
# file IO
# ---------------------------------------------------------------------------


def _read_lines(path) -> list[tuple[int, str]]:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise IoFailure(f"{path}: {exc}") from exc
    return [(i + 1, ln) for i, ln in enumerate(text.splitlines()) if ln.strip()]


def load_meta(meta_path) -> PredicateTable:
    pairs = []
    for lineno, line in _read_lines(meta_path):
        fields = line.rstrip("\n").split("\t")
        if len(fields) != 2:
            raise ArityMismatch(f"{meta_path}:{lineno}: expected 'name<TAB>arity'")
        name, arity = fields[0].strip(), fields[1].strip()
        if name in RESERVED or name.endswith(INVERSE_SUFFIX):
            raise ValueError(f"{meta_path}:{lineno}: predicate name {name!r} is reserved")
        try:
            pairs.append((name, int(arity)))
        except ValueError:
            raise ArityMismatch(f"{meta_path}:{lineno}: bad arity {arity!r}") from None
    return PredicateTable.from_pairs(pairs)


def _parse_facts(path, predicates: PredicateTable, names: dict[str, int] | None,
                 order: list[str]) -> list[tuple[int, int, int]]:
    """Parse a facts file.  ``names`` grows with unseen entities when
    ``order`` is writable; pass ``names=None`` to reject unknown entities."""
    rows = []
    grow = names is not None and order is not None
    for lineno, line in _read_lines(path):
        fields = [f.strip() for f in line.split("\t")]
        if len(fields) not in (2, 3):
            raise ArityMismatch(f"{path}:{lineno}: expected 2 or 3 tab-separated fields")
        pname = fields[1]
        if pname not in predicates:
            raise UnknownPredicate(f"{path}:{lineno}: undeclared predicate {pname!r}")
        pred = predicates[pname]
        if len(fields) != pred.arity + 1:
            raise ArityMismatch(
                f"{path}:{lineno}: {pname} has arity {pred.arity} but row has {len(fields)} fields")
        ents = [fields[0]] if pred.arity == 1 else [fields[0], fields[2]]
        ids = []
        for e in ents:
            if e not in names:
                if not grow:
                    raise UnknownEntity(f"{path}:{lineno}: entity {e!r} not in the training KB")
                names[e] = len(order)
                order.append(e)
            ids.append(names[e])
        s = ids[0]
        o = ids[0] if pred.arity == 1 else ids[1]
        rows.append((s, pred.id, o))
    return rows


def load_facts(facts_path, meta_path) -> KnowledgeBase:
    """Load a KB from a facts file and a predicate metadata file.

    Entity ids are assigned in order of first appearance; duplicate facts are
    dropped.
    """
    predicates = load_meta(meta_path)
    names: dict[str, int] = {}
    order: list[str] = []
    rows = _parse_facts(facts_path, predicates, names, order)
    if not rows:
        raise EmptyKB(f"{facts_path}: no facts")
    return KnowledgeBase(EntityTable(order), predicates, rows)


def write_facts(path, kb_or_rows, entities: EntityTable | None = None,
                predicates: PredicateTable | None = None) -> None:
    if isinstance(kb_or_rows, KnowledgeBase):
        entities, predicates, rows = kb_or_rows.entities, kb_or_rows.predicates, kb_or_rows.facts
    else:
        rows = kb_or_rows
    lines = []
    for s, p, o in np.asarray(rows).reshape(-1, 3).tolist():
        pred = predicates[p]
        if pred.arity == 1:
            lines.append(f"{entities.names[s]}\t{pred.name}")
        else:
            lines.append(f"{entities.names[s]}\t{pred.name}\t{entities.names[o]}")
    try:
        Path(path).write_text("\n".join(lines) + ("\n" if lines else ""), encoding="utf-8")
    except OSError as exc:
        raise IoFailure(f"{path}: {exc}") from exc


def write_meta(path, predicates: PredicateTable) -> None:
    text = "".join(f"{p.name}\t{p.arity}\n" for p in predicates)
    try:
        Path(path).write_text(text, encoding="utf-8")
    except OSError as exc:
        raise IoFailure(f"{path}: {exc}") from exc


@dataclass(frozen=True)
class SplitDataset:
    """Train/valid/test fact arrays over shared tables."""

    entities: EntityTable
    predicates: PredicateTable
    train: np.ndarray
    valid: np.ndarray = field(default_factory=lambda: np.zeros((0, 3), np.int64))
    test: np.ndarray = field(default_factory=lambda: np.zeros((0, 3), np.int64))

    def __post_init__(self):
        for name in ("train", "valid", "test"):
            arr = _dedupe(np.asarray(getattr(self, name), dtype=np.int64).reshape(-1, 3))
            object.__setattr__(self, name, _frozen(arr))
        sets = [set(map(tuple, getattr(self, n).tolist())) for n in ("train", "valid", "test")]
        if (sets[0] & sets[1]) or (sets[0] & sets[2]) or (sets[1] & sets[2]):
            raise ValueError("train/valid/test fact sets must be pairwise disjoint")

    def kb(self, split: str = "train") -> KnowledgeBase:
        return KnowledgeBase(self.entities, self.predicates, getattr(self, split))

    def all_facts(self) -> np.ndarray:
        return np.concatenate([self.train, self.valid, self.test])

    def full_kb(self) -> KnowledgeBase:
        return KnowledgeBase(self.entities, self.predicates, self.all_facts())


def load_split_dataset(directory) -> SplitDataset:
    """Load ``meta.tsv`` plus ``train.tsv`` / ``valid.tsv`` / ``test.tsv``.

    Entities are indexed from the training file; valid/test rows naming an
    entity absent from training are rejected.
    """
    d = Path(directory)
    predicates = load_meta(d / "meta.tsv")
    names: dict[str, int] = {}
    order: list[str] = []
    train = _parse_facts(d / "train.tsv", predicates, names, order)
    if not train:
        raise EmptyKB(f"{d / 'train.tsv'}: no facts")
    out = {}
    for split in ("valid", "test"):
        path = d / f"{split}.tsv"
        out[split] = _parse_facts(path, predicates, names, None) if path.exists() else []
    return SplitDataset(EntityTable(order), predicates, train,
                        np.array(out["valid"], np.int64).reshape(-1, 3),
                        np.array(out["test"], np.int64).reshape(-1, 3))


def write_split_dataset(directory, splits: SplitDataset) -> None:
    d = Path(directory)
    try:
        d.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise IoFailure(f"{d}: {exc}") from exc
    write_meta(d / "meta.tsv", splits.predicates)
    for split in ("train", "valid", "test"):
        write_facts(d / f"{split}.tsv", getattr(splits, split), splits.entities, splits.predicates)


def restrict_predicates(kb: KnowledgeBase, keep: Iterable[str]) -> KnowledgeBase:
    """Sub-KB whose predicate vocabulary is limited to ``keep`` (ids renumbered)."""
    keep = list(dict.fromkeys(keep))
    old = [kb.predicates[n] for n in keep]
    table = PredicateTable.from_pairs((p.name, p.arity) for p in old)
    remap = {p.id: i for i, p in enumerate(old)}
    rows = [(s, remap[p], o) for s, p, o in kb.facts.tolist() if p in remap]
    return KnowledgeBase(kb.entities, table, np.array(rows, np.int64).reshape(-1, 3))


# ---------------------------------------------------------------------------
# adjacency matrices
# ---------------------------------------------------------------------------


class AdjacencyStore:
    """Per-predicate sparse boolean matrices, ``M[i, j] = 1`` iff ``P(x_i, x_j)``.

    The vocabulary extends the KB's predicates with inverse companions of the
    binary predicates and an identity predicate (both optional).  Operators
    are applied through the transpose: ``M.T @ v`` marks the objects reachable
    from the entities marked in ``v``.
    """

    def __init__(self, kb: KnowledgeBase, vocab: PredicateTable,
                 coords: Sequence[tuple[np.ndarray, np.ndarray]]):
        self.kb = kb
        self.vocab = vocab
        self.n = kb.num_entities
        self.coords = tuple((_frozen(r), _frozen(c)) for r, c in coords)
        self._cache: dict = {}
        self.inverse_of = {p.base: p.id for p in vocab if p.is_inverse}
        self.identity_id = next((p.id for p in vocab if p.is_identity), None)

    @property
    def K(self) -> int:
        return len(self.vocab)

    def matrix(self, k: int, dtype=np.float64) -> sp.csr_matrix:
        key = ("m", k, np.dtype(dtype).str)
        if key not in self._cache:
            r, c = self.coords[k]
            m = sp.csr_matrix((np.ones(len(r), dtype=dtype), (r, c)), shape=(self.n, self.n))
            m.sort_indices()
            self._cache[key] = m
        return self._cache[key]

    def transposed(self, k: int, dtype=np.float64) -> sp.csr_matrix:
        """``M_k.T`` in CSR form, the operator applied to entity vectors."""
        key = ("t", k, np.dtype(dtype).str)
        if key not in self._cache:
            self._cache[key] = self.matrix(k, dtype).T.tocsr()
        return self._cache[key]

    def dense(self, k: int) -> np.ndarray:
        return self.matrix(k).toarray()

    def nnz(self, k: int) -> int:
        return len(self.coords[k][0])

    def membership(self, k: int, dtype=np.float64) -> np.ndarray:
        """``M_k 1``: row sums; for unary predicates the member indicator."""
        return np.asarray(self.matrix(k, dtype).sum(axis=1)).ravel().astype(dtype)

    def is_unary(self, k: int) -> bool:
        return k in self.vocab.unary

    def masked_edges(self, target: int, subject: int, obj: int) -> list[tuple[int, int, int]]:
        """Edges to drop when scoring the query fact ``target(subject, obj)``
        against this store, as ``(predicate, src, dst)`` triples in the
        transposed (operator) orientation."""
        out = [(target, subject, obj)]
        inv = self.inverse_of.get(target)
        if inv is not None:
            out.append((inv, obj, subject))
        return out


def build_matrices(kb: KnowledgeBase, add_inverses: bool = True,
                   add_identity: bool = True) -> AdjacencyStore:
    """One sparse matrix per predicate, plus optional inverse and identity operators."""
    entries = list(kb.predicates)
    coords = []
    for p in kb.predicates:
        s, o = kb.facts_of(p.id)
        order = np.lexsort((o, s))
        coords.append((s[order], o[order]))
    if add_inverses:
        for p in kb.predicates:
            if p.arity != 2:
                continue
            pid = len(entries)
            entries.append(Predicate(p.name + INVERSE_SUFFIX, 2, pid, is_inverse=True, base=p.id))
            r, c = coords[p.id]
            order = np.lexsort((r, c))
            coords.append((c[order], r[order]))
    if add_identity:
        entries.append(Predicate(IDENTITY, 2, len(entries), is_identity=True))
        idx = np.arange(kb.num_entities, dtype=np.int64)
        coords.append((idx, idx))
    return AdjacencyStore(kb, PredicateTable(entries), coords)


# ---------------------------------------------------------------------------
# queries
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class QueryBatch:
    """Rows of ``(subject, predicate, object, label)``."""

    subject: np.ndarray
    predicate: np.ndarray
    object: np.ndarray
    label: np.ndarray

    def __post_init__(self):
        for name in ("subject", "predicate", "object", "label"):
            object.__setattr__(self, name, _frozen(np.asarray(getattr(self, name), np.int64).ravel()))
        n = {len(self.subject), len(self.predicate), len(self.object), len(self.label)}
        if len(n) != 1:
            raise ValueError("query columns differ in length")

    def __len__(self) -> int:
        return len(self.subject)

    @classmethod
    def empty(cls) -> "QueryBatch":
        z = np.zeros(0, np.int64)
        return cls(z, z, z, z)

    @classmethod
    def from_facts(cls, facts, label: int = 1) -> "QueryBatch":
        f = np.asarray(facts, np.int64).reshape(-1, 3)
        return cls(f[:, 0], f[:, 1], f[:, 2], np.full(len(f), label))

    @classmethod
    def concat(cls, batches: Sequence["QueryBatch"]) -> "QueryBatch":
        if not batches:
            return cls.empty()
        return cls(*(np.concatenate([getattr(b, n) for b in batches])
                     for n in ("subject", "predicate", "object", "label")))

    def take(self, idx) -> "QueryBatch":
        return QueryBatch(self.subject[idx], self.predicate[idx], self.object[idx], self.label[idx])


def _positive_linear(kb: KnowledgeBase, target: int) -> tuple[np.ndarray, int, bool]:
    pred = kb.predicates[target]
    s, o = kb.facts_of(target)
    n = kb.num_entities
    if pred.arity == 1:
        return np.unique(s), n, True
    return np.unique(s * n + o), n * n, False


def count_negatives(kb: KnowledgeBase, target: int) -> int:
    pos, space, _ = _positive_linear(kb, target)
    return space - len(pos)


def sample_negative_queries(kb: KnowledgeBase, target: int | str, n: int,
                            seed: int | np.random.Generator) -> QueryBatch:
    """Sample ``n`` zero entries of the target matrix uniformly without replacement.

    For unary targets only the diagonal is eligible.
    """
    target = kb.predicates[target].id
    pos, space, unary = _positive_linear(kb, target)
    zeros = space - len(pos)
    if zeros == 0:
        raise NoNegatives(f"{kb.predicates[target].name}: target matrix is fully populated")
    if n > zeros:
        raise NotEnoughNegatives(f"requested {n} negatives, only {zeros} available")
    if n == 0:
        return QueryBatch.empty()
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    ranks = np.sort(rng.choice(zeros, size=n, replace=False))
    # map the r-th zero entry to its linear index by skipping positives
    gaps = pos - np.arange(len(pos))
    lin = ranks + np.searchsorted(gaps, ranks, side="right")
    lin = rng.permutation(lin)
    if unary:
        s = o = lin
    else:
        nent = kb.num_entities
        s, o = lin // nent, lin % nent
    return QueryBatch(s, np.full(n, target), o, np.zeros(n))


def one_hot(index: int, dim: int, dtype=np.float64) -> np.ndarray:
    if not 0 <= index < dim:
        raise IndexOutOfRange(f"id {index} outside [0, {dim})")
    v = np.zeros(dim, dtype=dtype)
    v[index] = 1.0
    return v


# ---------------------------------------------------------------------------
# Even-and-Successor benchmark
# ---------------------------------------------------------------------------


def es_fact_count(n: int) -> int:
    """Zero(0) + one Even fact per even integer + n-1 successor edges."""
    return 1 + (n + 1) // 2 + (n - 1)


def _spread(candidates: list[int], k: int) -> list[int]:
    """Pick ``k`` evenly spaced items of ``candidates``."""
    if k <= 0 or not candidates:
        return []
    m = len(candidates)
    if k >= m:
        return list(candidates)
    return [candidates[(i + 1) * m // (k + 1)] for i in range(k)]


def gen_even_successor(n: int, test_frac: float = 0.2,
                       valid_frac: float = 0.0) -> tuple[KnowledgeBase, SplitDataset]:
    """Integers ``0..n-1`` with ``Zero``, ``Even`` and ``Succ`` facts.

    A fraction of the ``Even`` facts is held out for test (and optionally
    validation).  Held-out integers are evenly spaced and never the smallest
    or largest even number, so every held-out ``Even(x)`` keeps both
    ``Even(x - 2)`` and ``Even(x + 2)`` in the training facts whenever the
    fractions leave room for it.
    """
    if n < 2:
        raise InvalidSize(f"n must be >= 2, got {n}")
    entities = EntityTable(str(i) for i in range(n))
    preds = PredicateTable.from_pairs([("Even", 1), ("Zero", 1), ("Succ", 2)])
    even, zero, succ = 0, 1, 2
    facts = [(i, succ, i + 1) for i in range(n - 1)]
    facts.append((0, zero, 0))
    evens = list(range(0, n, 2))
    facts.extend((e, even, e) for e in evens)
    full = KnowledgeBase(entities, preds, facts)

    n_test = int(round(test_frac * len(evens)))
    n_valid = int(round(valid_frac * len(evens)))
    interior = evens[1:-1]
    held = _spread(interior, n_test + n_valid)
    test_ids = set(held[::2][:n_test]) if n_valid else set(held[:n_test])
    valid_ids = set(held) - test_ids
    test = [(e, even, e) for e in evens if e in test_ids]
    valid = [(e, even, e) for e in evens if e in valid_ids]
    train = [f for f in facts if not (f[1] == even and (f[0] in test_ids or f[0] in valid_ids))]
    splits = SplitDataset(entities, preds,
                          np.array(train, np.int64),
                          np.array(valid, np.int64).reshape(-1, 3),
                          np.array(test, np.int64).reshape(-1, 3))
    return full, splits


def gen_composition_kb(n_entities: int = 500, noise: float = 0.05,
                       seed: int = 0, test_frac: float = 0.2,
                       valid_frac: float = 0.1) -> SplitDataset:
    """Synthetic KB with a planted compositional rule ``R3 = R1 ∘ R2``.

    ``R1``, ``R2`` and ``R4`` are independent random relations with
    ``n_entities`` distinct pairs each, so degrees vary and detours through
    inverse edges do not reproduce the composition.  ``R3`` holds every
    composed pair plus ``noise * |R3|`` random extra pairs.  Only ``R3``
    facts are split.
    """
    rng = np.random.default_rng(seed)
    n = n_entities
    if n < 2:
        raise InvalidSize(f"n_entities must be >= 2, got {n}")
    entities = EntityTable(f"e{i}" for i in range(n))
    preds = PredicateTable.from_pairs([("R1", 2), ("R2", 2), ("R3", 2), ("R4", 2)])

    def relation() -> list[tuple[int, int]]:
        flat = rng.choice(n * n, size=n, replace=False)
        return sorted(zip((flat // n).tolist(), (flat % n).tolist()))

    r1, r2, r4 = relation(), relation(), relation()
    succ: dict[int, list[int]] = {}
    for y, z in r2:
        succ.setdefault(y, []).append(z)
    comp = {(x, z) for x, y in r1 for z in succ.get(y, ())}
    n_noise = int(round(noise * len(comp)))
    noise_pairs = set()
    while len(noise_pairs) < n_noise:
        a, b = (int(v) for v in rng.integers(0, n, size=2))
        if (a, b) not in comp:
            noise_pairs.add((a, b))
    r3 = sorted(comp | noise_pairs)
    base = ([(s, 0, o) for s, o in r1] + [(s, 1, o) for s, o in r2]
            + [(s, 3, o) for s, o in r4])
    r3_facts = np.array([(s, 2, o) for s, o in r3], np.int64).reshape(-1, 3)
    perm = rng.permutation(len(r3_facts))
    n_test = int(round(test_frac * len(r3_facts)))
    n_valid = int(round(valid_frac * len(r3_facts)))
    test = r3_facts[perm[:n_test]]
    valid = r3_facts[perm[n_test:n_test + n_valid]]
    train = np.concatenate([np.array(base, np.int64), r3_facts[perm[n_test + n_valid:]]])
    return SplitDataset(entities, preds, train, valid, test)


def toy3() -> KnowledgeBase:
    """Three entities ``e0 → e1 → e2`` under ``Succ`` with ``Even`` on the ends."""
    entities = EntityTable(["e0", "e1", "e2"])
    preds = PredicateTable.from_pairs([("Even", 1), ("Succ", 2)])
    return KnowledgeBase(entities, preds, [(0, 1, 1), (1, 1, 2), (0, 0, 0), (2, 0, 2)])
