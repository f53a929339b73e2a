"""Hard rules: extraction from one-hot bundles, rendering, parsing and grounding.

Operator form prints each argument as a chain of operator calls::

    Even(X) ← Even(φ_Succ⁻¹(φ_Succ⁻¹(X)))

Variable form introduces a fresh body variable for every hop that moves to a
new entity, reading each chain left to right.  A hop through ``P`` from
``cur`` emits ``P(cur,Yi)``, a hop through ``P⁻¹`` emits ``P(Yi,cur)``, a
unary hop ``U`` filters in place and emits ``U(cur)``, and Identity hops emit
nothing.  The statement itself becomes one atom over the two chain ends,
which is where the two chains of a statement meet::

    Grand(X, X′) ← Parent(X,Y₁) ∧ Parent(Y₁,X′)

The second line comes from ``Parent(φ_Parent(X), X′)``.  When a body holds
more than one statement, each statement's atoms are grouped in braces.
Variable form drops information that does not change the value (Identity
hops, and for unary heads which of the two chains a filter on ``X`` belongs
to), so it parses back to :func:`canonicalize` of the rule.

A conjunction of a formula with itself is rendered once, as ``[f]²``.
"""
from __future__ import annotations

import itertools

import math
import re
from collections import defaultdict
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence, Union

import numpy as np

from .errors import EmptyBatch, KbTooLarge, NoRules, NotEncodable, NotHardened, RuleSyntaxError
from .kb import IDENTITY, INVERSE_SUFFIX, AdjacencyStore, KnowledgeBase, PredicateTable, QueryBatch
from .rulespace import AttentionBundle, RuleSpaceConfig, one_hot_bundle, score_queries

DEFAULT_THRESHOLD = 0.6
ORACLE_LIMIT = 200
PRIME = "′"
ARROW = "←"
SUBSCRIPTS = str.maketrans("0123456789", "₀₁₂₃₄₅₆₇₈₉")


# ---------------------------------------------------------------------------
# AST
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Hop:
    name: str
    unary: bool = False

    @property
    def moves(self) -> bool:
        return not self.unary and self.name != IDENTITY


@dataclass(frozen=True)
class OperatorPath:
    """Operator calls applied in order to ``source`` (``"X"``, ``"X'"`` or ``"root"``).

    A ``root`` path starts from the member set of the unary predicate ``root``.
    """

    source: str
    ops: tuple[Hop, ...]
    root: str | None = None

    def __post_init__(self):
        if self.source not in ("X", "X'", "root"):
            raise ValueError(f"bad path source {self.source!r}")
        if (self.source == "root") != (self.root is not None):
            raise ValueError("root paths need a root predicate and vice versa")
        if not self.ops and self.source != "root":
            raise ValueError("a path from a head variable has at least one hop")

    @property
    def length(self) -> int:
        return len(self.ops)


@dataclass(frozen=True)
class Statement:
    predicate: str
    arity: int
    first: OperatorPath | None
    second: OperatorPath

    def __post_init__(self):
        if self.arity not in (1, 2):
            raise ValueError("arity must be 1 or 2")
        if (self.arity == 1) != (self.first is None):
            raise ValueError("unary statements carry one path, binary ones two")


@dataclass(frozen=True)
class Leaf:
    statement: Statement


@dataclass(frozen=True)
class Not:
    child: "Formula"


@dataclass(frozen=True)
class And:
    left: "Formula"
    right: "Formula"


Formula = Union[Leaf, Not, And]


@dataclass(frozen=True)
class Rule:
    head: str
    head_arity: int
    body: Formula
    provenance: Mapping | None = field(default=None, compare=False, hash=False)

    def leaves(self) -> list[Statement]:
        return [lf.statement for lf in _leaves(self.body)]

    def depth(self) -> int:
        return _depth(self.body)


def _leaves(f: Formula) -> list[Leaf]:
    if isinstance(f, Leaf):
        return [f]
    if isinstance(f, Not):
        return _leaves(f.child)
    return _leaves(f.left) + _leaves(f.right)


def _depth(f: Formula) -> int:
    if isinstance(f, Leaf):
        return 1
    if isinstance(f, Not):
        return 1 + _depth(f.child)
    return 1 + max(_depth(f.left), _depth(f.right))


def _hop(name: str, vocab: PredicateTable) -> Hop:
    return Hop(name, vocab[name].arity == 1)


def path(source: str, ops: Sequence[str], vocab: PredicateTable, root: str | None = None) -> OperatorPath:
    """Convenience constructor resolving hop arities from ``vocab``."""
    return OperatorPath(source, tuple(_hop(o, vocab) for o in ops), root)


# ---------------------------------------------------------------------------
# extraction and encoding
# ---------------------------------------------------------------------------


def extract(bundle: AttentionBundle, config: RuleSpaceConfig, vocab: PredicateTable,
            head: int | str) -> Rule:
    """Read the explicit rule selected by a one-hot bundle."""
    bundle = bundle.numpy()
    if not bundle.is_hard():
        raise NotHardened("extract needs a one-hot bundle; call harden() first")
    bundle.validate(config)
    head_pred = vocab[head]
    unary_head = head_pred.arity == 1
    op_names = [vocab[int(i)].name for i in np.argmax(bundle.op, axis=1)]
    first_len = np.argmax(bundle.stmt_first, axis=1) + 1
    second_len = np.argmax(bundle.stmt_second, axis=1) + 1
    src_second = "X" if unary_head else "X'"

    def statement(k: int) -> Statement:
        p = vocab[k]
        second = path(src_second, op_names[:second_len[k]], vocab)
        first = None if p.arity == 1 else path("X", op_names[:first_len[k]], vocab)
        return Statement(p.name, p.arity, first, second)

    K, C = config.K, config.C

    def node(level: int, idx: int) -> Formula:
        if level == 0:
            return Leaf(statement(idx))
        a = int(np.argmax(bundle.form_first[level - 1][idx]))
        b = int(np.argmax(bundle.form_second[level - 1][idx]))
        return And(child(level - 1, a), child(level - 1, b))

    def child(level: int, idx: int) -> Formula:
        width = K if level == 0 else C
        return node(level, idx) if idx < width else Not(node(level, idx - width))

    o = int(np.argmax(bundle.out))
    body = node(0, o) if o < K else node((o - K) // C + 1, (o - K) % C)
    prov = {
        "op": tuple(int(i) for i in np.argmax(bundle.op, axis=1)),
        "stmt_first": tuple(int(i) for i in first_len - 1),
        "stmt_second": tuple(int(i) for i in second_len - 1),
        "form_first": tuple(tuple(int(i) for i in np.argmax(a, axis=1)) for a in bundle.form_first),
        "form_second": tuple(tuple(int(i) for i in np.argmax(a, axis=1)) for a in bundle.form_second),
        "out": o,
    }
    return Rule(head_pred.name, head_pred.arity, body, prov)


def _strip_not(f: Formula) -> tuple[Formula, bool]:
    if isinstance(f, Not):
        if isinstance(f.child, Not):
            raise NotEncodable("double negation has no slot in the rule space")
        return f.child, True
    return f, False


def _level(f: Formula) -> int:
    if isinstance(f, Leaf):
        return 0
    if isinstance(f, Not):
        raise NotEncodable("negation must sit directly under a conjunction")
    (a, _), (b, _) = _strip_not(f.left), _strip_not(f.right)
    la, lb = _level(a), _level(b)
    if la != lb:
        raise NotEncodable("both sides of a conjunction must come from the same level")
    return la + 1


def _realizations(p: OperatorPath, T: int, pad: bool):
    """Hop sequences of length <= ``T`` with the same value as ``p``.

    The literal sequence comes first; with ``pad`` the non-Identity hops are
    then spread over every longer or shorter Identity-padded layout.
    """
    seen = set()
    lit = tuple(h.name for h in p.ops)
    if 1 <= len(lit) <= T:
        seen.add(lit)
        yield lit
    if not pad:
        return
    core = [h.name for h in p.ops if h.name != IDENTITY]
    for length in range(max(len(core), 1), T + 1):
        for pos in itertools.combinations(range(length), len(core)):
            seq = [IDENTITY] * length
            for i, name in zip(pos, core):
                seq[i] = name
            seq = tuple(seq)
            if seq not in seen:
                seen.add(seq)
                yield seq


def _place_paths(paths: list[OperatorPath], T: int, pad: bool) -> tuple[list, list[int]]:
    """Shared hop sequence and per-path lengths realizing every path, by backtracking."""
    ops: list[str | None] = [None] * T
    lengths: list[int] = []

    def fits(seq) -> bool:
        return all(ops[t] is None or ops[t] == name for t, name in enumerate(seq))

    def solve(i: int) -> bool:
        if i == len(paths):
            return True
        for seq in _realizations(paths[i], T, pad):
            if not fits(seq):
                continue
            saved = list(ops)
            ops[:len(seq)] = seq
            lengths.append(len(seq))
            if solve(i + 1):
                return True
            lengths.pop()
            ops[:] = saved
        return False

    if not solve(0):
        for p in paths:
            if not any(True for _ in _realizations(p, T, pad)):
                raise NotEncodable(f"path of length {p.length} with T={T}")
        raise NotEncodable("argument paths do not share one operator sequence")
    return ops, lengths


def encode(rule: Rule, config: RuleSpaceConfig, vocab: PredicateTable,
           dtype=np.float64) -> AttentionBundle:
    """One-hot bundle whose hard score equals the rule's value.

    Raises :class:`NotEncodable` when the rule does not fit the rule space:
    its argument paths do not share one operator sequence, a predicate is
    used with two different paths, the formula tree is unbalanced, or a level
    needs more than ``C`` formulas.
    """
    if len(vocab) != config.K:
        raise NotEncodable(f"vocabulary of {len(vocab)} operators for K={config.K}")
    unary_head = rule.head_arity == 1
    first = [0] * config.K
    second = [0] * config.K
    seen: dict[int, Statement] = {}
    needs: list[tuple[OperatorPath, list, int]] = []

    def require(p: OperatorPath, source: str, into: list, k: int) -> None:
        if p.source == "root":
            raise NotEncodable("paths rooted at a unary member set are not encodable")
        if p.source != source and not unary_head:
            raise NotEncodable(f"path from {p.source} where {source} is required")
        for hop in p.ops:
            if hop.name not in vocab:
                raise NotEncodable(f"unknown operator {hop.name}")
        needs.append((p, into, k))

    for st in rule.leaves():
        if st.predicate not in vocab:
            raise NotEncodable(f"unknown predicate {st.predicate}")
        k = vocab.id(st.predicate)
        if k in seen:
            if seen[k] != st:
                raise NotEncodable(f"{st.predicate} used with two different argument paths")
            continue
        seen[k] = st
        require(st.second, "X'", second, k)
        if st.first is not None:
            require(st.first, "X", first, k)

    ops = _place_paths([p for p, _, _ in needs], config.T, IDENTITY in vocab)
    for (p, into, k), length in zip(needs, ops[1]):
        into[k] = length - 1
    filler = vocab.id(IDENTITY) if IDENTITY in vocab else 0
    op_idx = [filler if o is None else vocab.id(o) for o in ops[0]]

    slots: list[dict] = [dict() for _ in range(config.levels + 1)]
    fa = [[0] * config.C for _ in range(config.levels)]
    fb = [[0] * config.C for _ in range(config.levels)]

    def place(f: Formula) -> tuple[int, int]:
        lvl = _level(f)
        if isinstance(f, Leaf):
            return 0, vocab.id(f.statement.predicate)
        if lvl > config.levels:
            raise NotEncodable(f"formula needs level {lvl}, only {config.levels} available")
        if f in slots[lvl]:
            return lvl, slots[lvl][f]
        if len(slots[lvl]) >= config.C:
            raise NotEncodable(f"more than C={config.C} formulas at level {lvl}")
        idx = []
        width = config.K if lvl == 1 else config.C
        for side in (f.left, f.right):
            inner, neg = _strip_not(side)
            _, i = place(inner)
            idx.append(i + width if neg else i)
        c = len(slots[lvl])
        slots[lvl][f] = c
        fa[lvl - 1][c], fb[lvl - 1][c] = idx
        return lvl, c

    lvl, i = place(rule.body)
    out = i if lvl == 0 else config.K + (lvl - 1) * config.C + i
    return one_hot_bundle(config, op_idx, first, second, fa, fb, out, dtype=dtype)


# ---------------------------------------------------------------------------
# canonical form
# ---------------------------------------------------------------------------


def _merge_filters(ops) -> tuple:
    """Collapse each run of unary filters into its sorted distinct set.

    Filters are 0/1 diagonal matrices, so within a run they commute and
    repeating one changes nothing.
    """
    out, run = [], set()
    for h in ops:
        if h.unary:
            run.add(h)
            continue
        out += sorted(run, key=lambda x: x.name)
        run = set()
        out.append(h)
    out += sorted(run, key=lambda x: x.name)
    return tuple(out)


def _canon_path(p: OperatorPath) -> OperatorPath:
    ops = _merge_filters(h for h in p.ops if h.name != IDENTITY)
    if not ops and p.source != "root":
        ops = (Hop(IDENTITY),)
    return OperatorPath(p.source, ops, p.root)


def _canon_statement(st: Statement, unary_head: bool) -> Statement:
    second = _canon_path(st.second)
    if st.first is None:
        return Statement(st.predicate, 1, None, second)
    first = _canon_path(st.first)
    if unary_head and first.source != "root" and second.source != "root" \
            and not any(h.moves for h in first.ops):
        lead = 0
        while lead < len(second.ops) and second.ops[lead].unary:
            lead += 1
        if lead:
            moved = tuple(h for h in first.ops if h.name != IDENTITY) + second.ops[:lead]
            rest = second.ops[lead:] or (Hop(IDENTITY),)
            first = OperatorPath(first.source, _merge_filters(moved))
            second = OperatorPath(second.source, rest)
    return Statement(st.predicate, 2, first, second)


def canonicalize(rule: Rule) -> Rule:
    """Value-preserving normal form that variable-form rendering cannot distinguish from ``rule``."""
    unary_head = rule.head_arity == 1

    def walk(f: Formula) -> Formula:
        if isinstance(f, Leaf):
            return Leaf(_canon_statement(f.statement, unary_head))
        if isinstance(f, Not):
            return Not(walk(f.child))
        return And(walk(f.left), walk(f.right))

    return Rule(rule.head, rule.head_arity, walk(rule.body), rule.provenance)


# ---------------------------------------------------------------------------
# operator form
# ---------------------------------------------------------------------------


def _var(source: str, unary_head: bool) -> str:
    return "X" if source == "X" or unary_head else "X" + PRIME


def _render_path(p: OperatorPath, unary_head: bool) -> str:
    if p.source == "root":
        text = f"φ_{p.root}()"
    else:
        text = _var(p.source, unary_head)
        if p.ops == (Hop(IDENTITY),):
            return text
    for hop in p.ops:
        text = f"φ_{hop.name}({text})"
    return text


def _head_text(rule: Rule) -> str:
    args = "X" if rule.head_arity == 1 else "X, X" + PRIME
    return f"{rule.head}({args}) {ARROW} "


def _render_formula(f: Formula, leaf_text, top: bool = True) -> str:
    if isinstance(f, Leaf):
        return leaf_text(f.statement)
    if isinstance(f, Not):
        inner = _render_formula(f.child, leaf_text, top=False)
        return "¬" + (f"({inner})" if isinstance(f.child, And) and f.child.left != f.child.right else inner)
    if f.left == f.right:
        return "[" + _render_formula(f.left, leaf_text) + "]²"
    parts = []
    for side in (f.left, f.right):
        text = _render_formula(side, leaf_text, top=False)
        parts.append(f"({text})" if isinstance(side, And) and side.left != side.right else text)
    return " ∧ ".join(parts)


def render_operator_form(rule: Rule) -> str:
    unary_head = rule.head_arity == 1

    def leaf(st: Statement) -> str:
        args = [_render_path(st.second, unary_head)]
        if st.first is not None:
            args.insert(0, _render_path(st.first, unary_head))
        return f"{st.predicate}({', '.join(args)})"

    return _head_text(rule) + _render_formula(rule.body, leaf)


# ---------------------------------------------------------------------------
# variable form
# ---------------------------------------------------------------------------


def _path_atoms(p: OperatorPath, unary_head: bool, fresh) -> tuple[list[str], str]:
    atoms = []
    if p.source == "root":
        cur = fresh()
        atoms.append(f"{p.root}({cur})")
    else:
        cur = _var(p.source, unary_head)
    for hop in p.ops:
        if hop.name == IDENTITY:
            continue
        if hop.unary:
            atoms.append(f"{hop.name}({cur})")
            continue
        nxt = fresh()
        if hop.name.endswith(INVERSE_SUFFIX):
            atoms.append(f"{hop.name[:-len(INVERSE_SUFFIX)]}({nxt},{cur})")
        else:
            atoms.append(f"{hop.name}({cur},{nxt})")
        cur = nxt
    return atoms, cur


def _statement_atoms(st: Statement, unary_head: bool, fresh) -> list[str]:
    atoms: list[str] = []
    a_end = None
    if st.first is not None:
        part, a_end = _path_atoms(st.first, unary_head, fresh)
        atoms += part
    part, b_end = _path_atoms(st.second, unary_head, fresh)
    atoms += part
    if st.first is None:
        atoms.append(f"{st.predicate}({b_end})")
    elif st.predicate == IDENTITY:
        atoms.append(f"{a_end} = {b_end}")
    else:
        atoms.append(f"{st.predicate}({a_end},{b_end})")
    return atoms


def render_variable_form(rule: Rule) -> str:
    unary_head = rule.head_arity == 1
    counter = [0]

    def fresh() -> str:
        counter[0] += 1
        return "Y" + str(counter[0]).translate(SUBSCRIPTS)

    grouped = len(_leaves(rule.body)) > 1

    def leaf(st: Statement) -> str:
        atoms = _statement_atoms(st, unary_head, fresh)
        text = " ∧ ".join(atoms)
        return "{" + text + "}" if grouped else text

    def render(f: Formula, top: bool) -> str:
        if isinstance(f, Leaf):
            return leaf(f.statement)
        if isinstance(f, Not):
            if isinstance(f.child, Leaf):
                atoms = _statement_atoms(f.child.statement, unary_head, fresh)
                return "¬" + ("{" + " ∧ ".join(atoms) + "}" if grouped or len(atoms) > 1 else atoms[0])
            inner = render(f.child, False)
            return "¬" + (f"({inner})" if isinstance(f.child, And) and f.child.left != f.child.right else inner)
        if f.left == f.right:
            return "[" + render(f.left, False) + "]²"
        parts = []
        for side in (f.left, f.right):
            text = render(side, False)
            parts.append(f"({text})" if isinstance(side, And) and side.left != side.right else text)
        return " ∧ ".join(parts)

    return _head_text(rule) + render(rule.body, True)


# ---------------------------------------------------------------------------
# parsing
# ---------------------------------------------------------------------------

_TOKEN = re.compile(r"\s*(?:(←|<-)|(φ_)|([()\[\],{}¬∧=])|(²)|([^\s()\[\],{}¬∧=←²]+))")


def _tokenize(text: str) -> list[str]:
    pos, out = 0, []
    text = text.strip()
    while pos < len(text):
        m = _TOKEN.match(text, pos)
        if not m or m.end() == pos:
            raise RuleSyntaxError(f"unexpected character at {pos}: {text[pos:pos + 10]!r}")
        tok = next(g for g in m.groups() if g is not None)
        out.append("←" if tok == "<-" else tok)
        pos = m.end()
    return out


_PUNCT = frozenset(["(", ")", "[", "]", ",", "{", "}", "¬", "∧", "=", "←", "²", "φ_"])


class _Parser:
    def __init__(self, text: str):
        self.text = text
        self.toks = _tokenize(text)
        self.i = 0

    def peek(self) -> str | None:
        return self.toks[self.i] if self.i < len(self.toks) else None

    def take(self, expect: str | None = None) -> str:
        tok = self.peek()
        if tok is None or (expect is not None and tok != expect):
            raise RuleSyntaxError(f"expected {expect or 'a token'} at token {self.i} "
                                  f"in {self.text!r}, got {tok!r}")
        self.i += 1
        return tok

    def name(self) -> str:
        tok = self.take()
        if tok in _PUNCT:
            raise RuleSyntaxError(f"expected a name, got {tok!r} in {self.text!r}")
        return tok

    def done(self):
        if self.peek() is not None:
            raise RuleSyntaxError(f"trailing input {self.toks[self.i:]} in {self.text!r}")

    def head(self) -> tuple[str, int]:
        name = self.name()
        self.take("(")
        args = [self.name()]
        while self.peek() == ",":
            self.take(",")
            args.append(self.name())
        self.take(")")
        self.take("←")
        canon = [_norm_var(a) for a in args]
        if canon not in (["X"], ["X", "X'"]):
            raise RuleSyntaxError(f"head arguments must be X or X, X′; got {args}")
        return name, len(args)

    def formula(self, item) -> Formula:
        f = item()
        while self.peek() == "∧":
            self.take("∧")
            f = And(f, item())
        return f


def _norm_var(v: str) -> str:
    return "X'" if v in ("X'", "X" + PRIME) else v


def parse_operator_form(text: str, unary: Iterable[str] = ()) -> Rule:
    """Parse an operator-form rule.  ``unary`` names the unary predicates
    (needed to mark unary hops)."""
    unary = frozenset(unary)
    ps = _Parser(text)
    head, arity = ps.head()

    def chain() -> tuple[str, tuple[Hop, ...], str | None]:
        if ps.peek() == "φ_":
            ps.take("φ_")
            op = ps.name()
            ps.take("(")
            if ps.peek() == ")":
                ps.take(")")
                return "root", (), op
            source, ops, root = chain()
            ps.take(")")
            return source, ops + (Hop(op, op in unary),), root
        v = _norm_var(ps.name())
        if v not in ("X", "X'"):
            raise RuleSyntaxError(f"unknown variable {v!r} in {text!r}")
        if arity == 1 and v == "X'":
            raise RuleSyntaxError("X′ is not bound by a unary head")
        return v, (), None

    def term() -> OperatorPath:
        source, ops, root = chain()
        # a bare head variable is the single Identity hop
        return OperatorPath(source, ops or ((Hop(IDENTITY),) if root is None else ()), root)

    def item() -> Formula:
        tok = ps.peek()
        if tok == "¬":
            ps.take()
            return Not(item())
        if tok == "(":
            ps.take()
            f = ps.formula(item)
            ps.take(")")
            return f
        if tok == "[":
            ps.take()
            f = ps.formula(item)
            ps.take("]")
            ps.take("²")
            return And(f, f)
        pred = ps.name()
        ps.take("(")
        args = [term()]
        while ps.peek() == ",":
            ps.take(",")
            args.append(term())
        ps.take(")")
        if len(args) == 1:
            return Leaf(Statement(pred, 1, None, args[0]))
        if len(args) != 2:
            raise RuleSyntaxError(f"{pred} applied to {len(args)} arguments")
        return Leaf(Statement(pred, 2, args[0], args[1]))

    body = ps.formula(item)
    ps.done()
    rule = Rule(head, arity, body)
    for st in rule.leaves():
        for p in (st.first, st.second):
            if p is not None and arity == 1 and p.source == "X'":
                raise RuleSyntaxError("X′ used under a unary head")
    return rule


def _atoms_to_statement(atoms: list, arity: int, text: str) -> Statement:
    """Rebuild one statement from its variable-form atoms (see module docs)."""
    unary_head = arity == 1
    src_a, src_b = "X", ("X" if unary_head else "X'")
    heads = {"X", "X'"}
    last = atoms[-1]
    if last[0] == "=":
        pred, end = IDENTITY, last[1]
    else:
        pred, end = last[0], last[1]
    hops = atoms[:-1]
    seen = set(heads)
    pos = [0]

    def walk(source: str, end_var: str) -> OperatorPath:
        ops: list[Hop] = []
        root = None
        cur = source
        if pos[0] < len(hops):
            name, args = hops[pos[0]]
            if len(args) == 1 and args[0] not in seen:
                root, cur = name, args[0]
                seen.add(cur)
                pos[0] += 1
        while pos[0] < len(hops):
            name, args = hops[pos[0]]
            if name == "=":
                break
            if len(args) == 1 and args[0] == cur:
                ops.append(Hop(name, True))
            elif len(args) == 2 and cur != end_var and args[0] == cur and args[1] not in seen:
                ops.append(Hop(name))
                cur = args[1]
                seen.add(cur)
            elif len(args) == 2 and cur != end_var and args[1] == cur and args[0] not in seen:
                ops.append(Hop(name + INVERSE_SUFFIX))
                cur = args[0]
                seen.add(cur)
            else:
                break
            pos[0] += 1
        if cur != end_var:
            raise RuleSyntaxError(f"atoms do not chain to {end_var} in {text!r}")
        if root is not None:
            return OperatorPath("root", tuple(ops), root)
        return OperatorPath(source, tuple(ops) or (Hop(IDENTITY),))

    if len(end) == 1:
        second = walk(src_b, end[0])
        first = None
        st_arity = 1
    else:
        first = walk(src_a, end[0])
        second = walk(src_b, end[1])
        st_arity = 2
    if pos[0] != len(hops):
        raise RuleSyntaxError(f"unused atoms {hops[pos[0]:]} in {text!r}")
    return Statement(pred, st_arity, first, second)


def parse_variable_form(text: str) -> Rule:
    """Parse a variable-form rule; the result is in canonical form."""
    ps = _Parser(text)
    head, arity = ps.head()

    def atom():
        if ps.i + 1 < len(ps.toks) and ps.toks[ps.i + 1] == "=":
            a = _norm_var(ps.name())
            ps.take("=")
            return ("=", (a, _norm_var(ps.name())))
        pred = ps.name()
        ps.take("(")
        args = [_norm_var(ps.name())]
        while ps.peek() == ",":
            ps.take(",")
            args.append(_norm_var(ps.name()))
        ps.take(")")
        return (pred, tuple(args))

    def group() -> Formula:
        atoms = [atom()]
        while ps.peek() == "∧":
            ps.take("∧")
            atoms.append(atom())
        return Leaf(_atoms_to_statement(atoms, arity, text))

    def item() -> Formula:
        tok = ps.peek()
        if tok == "¬":
            ps.take()
            return Not(item())
        if tok == "{":
            ps.take()
            leaf = group()
            ps.take("}")
            return leaf
        if tok == "(":
            ps.take()
            f = ps.formula(item)
            ps.take(")")
            return f
        if tok == "[":
            ps.take()
            f = ps.formula(item)
            ps.take("]")
            ps.take("²")
            return And(f, f)
        return Leaf(_atoms_to_statement([atom()], arity, text))

    if "{" in ps.toks or "[" in ps.toks or "¬" in ps.toks:
        body = ps.formula(item)
    else:
        body = group()
    ps.done()
    return canonicalize(Rule(head, arity, body))


# ---------------------------------------------------------------------------
# nested-term form
# ---------------------------------------------------------------------------


def _sexpr_path(p: OperatorPath) -> str:
    src = f"(root {p.root})" if p.source == "root" else p.source
    hops = " ".join(f"({'unary' if h.unary else 'op'} {h.name})" for h in p.ops)
    return f"(path {src}{' ' + hops if hops else ''})"


def render_ast(rule: Rule) -> str:
    """Machine-readable nested parenthesized terms."""
    def f(node: Formula) -> str:
        if isinstance(node, Leaf):
            st = node.statement
            args = ([_sexpr_path(st.first)] if st.first is not None else []) + [_sexpr_path(st.second)]
            return f"(stmt {st.predicate} {' '.join(args)})"
        if isinstance(node, Not):
            return f"(not {f(node.child)})"
        return f"(and {f(node.left)} {f(node.right)})"

    return f"(rule {rule.head} {rule.head_arity} {f(rule.body)})"


def _sexpr_tokens(text: str) -> list:
    toks = re.findall(r"\(|\)|[^\s()]+", text)
    stack: list[list] = [[]]
    for t in toks:
        if t == "(":
            stack.append([])
        elif t == ")":
            if len(stack) == 1:
                raise RuleSyntaxError("unbalanced parentheses")
            done = stack.pop()
            stack[-1].append(done)
        else:
            stack[-1].append(t)
    if len(stack) != 1 or len(stack[0]) != 1:
        raise RuleSyntaxError("expected exactly one term")
    return stack[0][0]


def parse_ast(text: str) -> Rule:
    tree = _sexpr_tokens(text)

    def p(t) -> OperatorPath:
        if not (isinstance(t, list) and t and t[0] == "path"):
            raise RuleSyntaxError(f"bad path term {t}")
        src = t[1]
        hops = tuple(Hop(h[1], h[0] == "unary") for h in t[2:])
        if isinstance(src, list):
            return OperatorPath("root", hops, src[1])
        return OperatorPath(src, hops)

    def f(t) -> Formula:
        tag = t[0]
        if tag == "stmt":
            paths = [p(x) for x in t[2:]]
            if len(paths) == 1:
                return Leaf(Statement(t[1], 1, None, paths[0]))
            return Leaf(Statement(t[1], 2, paths[0], paths[1]))
        if tag == "not":
            return Not(f(t[1]))
        if tag == "and":
            return And(f(t[1]), f(t[2]))
        raise RuleSyntaxError(f"unknown tag {tag}")

    if tree[0] != "rule":
        raise RuleSyntaxError("expected (rule ...)")
    return Rule(tree[1], int(tree[2]), f(tree[3]))


def parse_rule(text: str, unary: Iterable[str] = ()) -> Rule:
    """Parse any of the three textual forms."""
    text = text.strip()
    if text.startswith("(rule"):
        return parse_ast(text)
    if re.search(r"Y[₀-₉]|\{", text) or ("φ_" not in text and "=" in text):
        return parse_variable_form(text)
    return parse_operator_form(text, unary)


# ---------------------------------------------------------------------------
# grounding oracle
# ---------------------------------------------------------------------------


def _sigmoid(x: float) -> float:
    if x >= 0:
        return 1.0 / (1.0 + math.exp(-x))
    e = math.exp(x)
    return e / (1.0 + e)


class GroundingOracle:
    """Exact rule values by walking the fact graph with python dictionaries.

    Path counts are accumulated hop by hop (``counts[y]`` is the number of
    distinct walks that end at ``y``); no matrices are involved.
    """

    def __init__(self, kb: KnowledgeBase, limit: int = ORACLE_LIMIT, temperature: float = 1.0):
        if kb.num_entities > limit:
            raise KbTooLarge(f"{kb.num_entities} entities exceeds the oracle limit {limit}")
        self.kb = kb
        self.temperature = temperature
        self.succ: dict[str, dict[int, list[int]]] = {}
        self.pred: dict[str, dict[int, list[int]]] = {}
        self.members: dict[str, set[int]] = {}
        self.pairs: dict[str, list[tuple[int, int]]] = {}
        for p in kb.predicates:
            s, o = kb.facts_of(p.id)
            if p.arity == 1:
                self.members[p.name] = set(int(x) for x in s)
                continue
            fw, bw = defaultdict(list), defaultdict(list)
            for a, b in zip(s.tolist(), o.tolist()):
                fw[a].append(b)
                bw[b].append(a)
            self.succ[p.name], self.pred[p.name] = fw, bw
            self.pairs[p.name] = list(zip(s.tolist(), o.tolist()))

    def _edges(self, name: str):
        if name.endswith(INVERSE_SUFFIX):
            base = name[:-len(INVERSE_SUFFIX)]
            if base in self.pred:
                return self.pred[base]
        if name in self.succ:
            return self.succ[name]
        raise NotEncodable(f"operator {name} is not a binary predicate of this KB")

    def walk(self, p: OperatorPath, x: int, x2: int) -> dict[int, float]:
        if p.source == "root":
            counts = {e: 1.0 for e in self.members[p.root]}
        else:
            counts = {x if p.source == "X" else x2: 1.0}
        for hop in p.ops:
            if hop.name == IDENTITY:
                continue
            if hop.name in self.members:
                keep = self.members[hop.name]
                counts = {e: c for e, c in counts.items() if e in keep}
                continue
            edges = self._edges(hop.name)
            nxt: dict[int, float] = defaultdict(float)
            for e, c in counts.items():
                for f in edges.get(e, ()):
                    nxt[f] += c
            counts = dict(nxt)
        return counts

    def count(self, st: Statement, x: int, x2: int) -> float:
        b = self.walk(st.second, x, x2)
        if st.first is None:
            return float(sum(c for e, c in b.items() if e in self.members[st.predicate]))
        a = self.walk(st.first, x, x2)
        if st.predicate == IDENTITY:
            return float(sum(c * b.get(e, 0.0) for e, c in a.items()))
        edges = self._edges(st.predicate)
        return float(sum(c * b.get(f, 0.0) for e, c in a.items() for f in edges.get(e, ())))

    def statement_value(self, st: Statement, x: int, x2: int) -> float:
        return _sigmoid(self.count(st, x, x2) / self.temperature)

    def formula_value(self, f: Formula, x: int, x2: int) -> float:
        if isinstance(f, Leaf):
            return self.statement_value(f.statement, x, x2)
        if isinstance(f, Not):
            return 1.0 - self.formula_value(f.child, x, x2)
        return self.formula_value(f.left, x, x2) * self.formula_value(f.right, x, x2)

    def score(self, rule: Rule, subject: int, obj: int | None = None) -> float:
        if obj is None or rule.head_arity == 1:
            obj = subject
        return self.formula_value(rule.body, subject, obj)


def grounding_oracle(rule: Rule, kb: KnowledgeBase, query, limit: int = ORACLE_LIMIT,
                     masked: bool = False, temperature: float = 1.0) -> float:
    """Value of ``rule`` on ``query = (subject, object)`` (object ignored for unary heads).

    ``masked=True`` scores the query fact as if it were absent from ``kb``.
    """
    s, o = query if isinstance(query, tuple) else (query, query)
    if rule.head_arity == 1:
        o = s
    if masked and rule.head in kb.predicates:
        hid = kb.predicates.id(rule.head)
        if kb.contains(s, hid, o):
            kb = kb.without(np.array([[s, hid, o]]))
    return GroundingOracle(kb, limit, temperature).score(rule, s, o)


# ---------------------------------------------------------------------------
# hard evaluation
# ---------------------------------------------------------------------------


@dataclass
class HardMetrics:
    accuracy: float
    n: int
    scores: np.ndarray
    predictions: np.ndarray
    labels: np.ndarray
    threshold: float

    def as_dict(self) -> dict:
        return {"accuracy": self.accuracy, "n": self.n, "threshold": self.threshold}


def hard_scores(rules: Mapping[str, Rule], kb: KnowledgeBase, queries: QueryBatch,
                config: RuleSpaceConfig | None = None, store: AdjacencyStore | None = None,
                mask: bool = False) -> np.ndarray:
    """Scores of hard rules on queries.

    Each query uses the rule for its predicate.  Rules that fit the rule space
    are scored with sparse matrices; the rest (or all, when no ``config`` is
    given) with the grounding oracle.
    """
    scores = np.zeros(len(queries))
    names = kb.predicates.names
    oracle = None
    for pid in np.unique(queries.predicate):
        name = names[int(pid)] if store is None else store.vocab[int(pid)].name
        if name not in rules:
            raise NoRules(f"no rule for predicate {name}")
        rule = rules[name]
        idx = np.flatnonzero(queries.predicate == pid)
        sub = queries.take(idx)
        bundle = None
        if config is not None and store is not None:
            try:
                bundle = encode(rule, config, store.vocab)
            except NotEncodable:
                bundle = None
        if bundle is not None:
            scores[idx] = score_queries(bundle, store, sub, mask=mask).scores.data
            continue
        for j, s, o in zip(idx, sub.subject.tolist(), sub.object.tolist()):
            if mask:
                scores[j] = grounding_oracle(rule, kb, (s, o), masked=True)
            else:
                oracle = oracle or GroundingOracle(kb)
                scores[j] = oracle.score(rule, s, o)
    return scores


def evaluate_hard(rules: Mapping[str, Rule] | Sequence[Rule], kb: KnowledgeBase, queries: QueryBatch,
                  threshold: float = DEFAULT_THRESHOLD, config: RuleSpaceConfig | None = None,
                  store: AdjacencyStore | None = None, mask: bool = False) -> HardMetrics:
    """Classification accuracy of hard rules: predict true when the score exceeds ``threshold``."""
    if not isinstance(rules, Mapping):
        rules = {r.head: r for r in rules}
    if not rules:
        raise NoRules("empty rule set")
    if not 0.0 < threshold < 1.0:
        raise ValueError("threshold must lie in (0, 1)")
    if len(queries) == 0:
        raise EmptyBatch("no queries to evaluate")
    scores = hard_scores(rules, kb, queries, config, store, mask)
    pred = (scores > threshold).astype(np.int64)
    labels = queries.label.astype(np.int64)
    return HardMetrics(float(np.mean(pred == labels)), len(queries), scores, pred, labels, threshold)
