"""Relaxed hierarchical rule space.

A rule for a target predicate is scored from a set of attention tensors:

* ``op``            ``T x K``  operator picked at each hop,
* ``stmt_first``    ``K x T``  path length for the first argument of each statement,
* ``stmt_second``   ``K x T``  path length for the second argument,
* ``form_first`` / ``form_second``  per combination level ``C x 2*prev``,
* ``out``           attention over the pooled formulas of every level.

Path features are propagated right to left as sparse matrix-vector products,
so no dense ``|X| x |X|`` operator product is ever formed.
"""
from __future__ import annotations

import hashlib
import json
from collections import defaultdict
from dataclasses import asdict, dataclass, field
from typing import Any, Sequence

import numpy as np

from . import diffmath as dm
from .diffmath import Tensor
from .errors import EmptyBatch, ShapeMismatch
from .kb import AdjacencyStore, QueryBatch


@dataclass(frozen=True)
class RuleSpaceConfig:
    K: int
    T: int = 2
    L: int = 1
    C: int = 2
    d: int = 32
    temperature: float = 1.0

    def __post_init__(self):
        if self.K < 1 or self.T < 1 or self.L < 0 or self.C < 1 or self.d < 1:
            raise ValueError(f"invalid rule space config {self}")
        if self.temperature <= 0:
            raise ValueError("temperature must be positive")

    @property
    def levels(self) -> int:
        """Number of combination levels that carry attentions (``L - 1``, at least 0)."""
        return max(self.L - 1, 0)

    def level_width(self, level: int) -> int:
        """Length of the negation-augmented input of combination level ``level`` (1-based)."""
        return 2 * (self.K if level == 1 else self.C)

    @property
    def pool_size(self) -> int:
        return self.K + self.C * self.levels

    def to_dict(self) -> dict:
        return asdict(self)

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()[:16]


def _data(x) -> np.ndarray:
    return x.data if isinstance(x, Tensor) else np.asarray(x)


@dataclass
class AttentionBundle:
    op: Any
    stmt_first: Any
    stmt_second: Any
    form_first: list = field(default_factory=list)
    form_second: list = field(default_factory=list)
    out: Any = None

    def rows(self):
        """Yield ``(name, array)`` for every attention tensor (2-D views)."""
        yield "op", _data(self.op)
        yield "stmt_first", _data(self.stmt_first)
        yield "stmt_second", _data(self.stmt_second)
        for i, (a, b) in enumerate(zip(self.form_first, self.form_second)):
            yield f"form_first.{i + 1}", _data(a)
            yield f"form_second.{i + 1}", _data(b)
        yield "out", _data(self.out).reshape(1, -1)

    def numpy(self) -> "AttentionBundle":
        return AttentionBundle(
            _data(self.op).copy(), _data(self.stmt_first).copy(), _data(self.stmt_second).copy(),
            [_data(a).copy() for a in self.form_first], [_data(b).copy() for b in self.form_second],
            _data(self.out).copy())

    def validate(self, config: RuleSpaceConfig, atol: float = 1e-6) -> None:
        K, T, C = config.K, config.T, config.C
        expect = {"op": (T, K), "stmt_first": (K, T), "stmt_second": (K, T),
                  "out": (1, config.pool_size)}
        for lvl in range(1, config.levels + 1):
            expect[f"form_first.{lvl}"] = (C, config.level_width(lvl))
            expect[f"form_second.{lvl}"] = (C, config.level_width(lvl))
        got = dict(self.rows())
        if set(got) != set(expect):
            raise ShapeMismatch(f"bundle has tensors {sorted(got)}, expected {sorted(expect)}")
        for name, arr in got.items():
            if arr.shape != expect[name]:
                raise ShapeMismatch(f"{name}: shape {arr.shape}, expected {expect[name]}")
            if np.any(arr < -atol) or np.any(np.abs(arr.sum(axis=-1) - 1.0) > atol):
                raise ShapeMismatch(f"{name}: rows are not probability vectors")

    def is_hard(self) -> bool:
        return all(np.all((arr == 0) | (arr == 1)) and np.all(arr.sum(axis=-1) == 1)
                   for _, arr in self.rows())

    def equals(self, other: "AttentionBundle") -> bool:
        """Bitwise equality of every attention tensor."""
        a, b = dict(self.rows()), dict(other.rows())
        return a.keys() == b.keys() and all(
            a[k].dtype == b[k].dtype and a[k].shape == b[k].shape and a[k].tobytes() == b[k].tobytes()
            for k in a)


def _one_hot_rows(arr: np.ndarray) -> np.ndarray:
    arr = np.asarray(arr)
    out = np.zeros_like(arr, dtype=np.float64)
    idx = np.argmax(arr, axis=-1)  # first maximum wins ties
    np.put_along_axis(out, np.expand_dims(idx, -1), 1.0, axis=-1)
    return out


def harden(bundle: AttentionBundle) -> AttentionBundle:
    """Replace every attention row by the one-hot vector of its argmax."""
    b = bundle.numpy()
    return AttentionBundle(
        _one_hot_rows(b.op), _one_hot_rows(b.stmt_first), _one_hot_rows(b.stmt_second),
        [_one_hot_rows(a) for a in b.form_first], [_one_hot_rows(a) for a in b.form_second],
        _one_hot_rows(b.out))


# ---------------------------------------------------------------------------
# evaluation
# ---------------------------------------------------------------------------


def _as_tensor(x, dtype) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype))


def _bundle_dtype(bundle: AttentionBundle):
    d = _data(bundle.op).dtype
    return d if d.kind == "f" else dm.default_dtype()


def propagate(op, V0, store: AdjacencyStore, exclude: dict | None = None) -> list[Tensor]:
    """Path feature matrices ``U_1 .. U_T`` for the entity columns of ``V0``.

    ``U_t = sum_k op[t, k] * M_k.T @ U_{t-1}`` with ``U_0 = V0``.
    """
    dtype = V0.dtype
    op = _as_tensor(op, dtype)
    T, K = op.shape
    if K != store.K:
        raise ShapeMismatch(f"operator attention over {K} operators, store has {store.K}")
    exclude = exclude or {}
    U, feats = V0, []
    track = op.requires_grad
    for t in range(T):
        if track:
            P = dm.stack([dm.spmv_const(store.matrix(k, dtype), U, True, exclude.get(k))
                          for k in range(K)], axis=0)
            U = dm.einsum("k,kxb->xb", op[t], P) if U.ndim == 2 else dm.einsum("k,kx->x", op[t], P)
        else:
            w = op.data[t]
            terms = [dm.spmv_const(store.matrix(k, dtype), U, True, exclude.get(k)) * float(w[k])
                     for k in np.flatnonzero(w)]
            acc = terms[0]
            for term in terms[1:]:
                acc = acc + term
            U = acc
        feats.append(U)
    return feats


def kappa_apply(s_path, op, v, store: AdjacencyStore) -> Tensor:
    """Soft path selection applied to an entity vector: ``sum_t s_path[t] * U_t``."""
    v = dm.as_tensor(v)
    if v.shape[0] != store.n:
        raise ShapeMismatch(f"vector of length {v.shape[0]} for {store.n} entities")
    s_path = _as_tensor(s_path, v.dtype)
    U = propagate(op, v, store)
    if s_path.shape[0] != len(U):
        raise ShapeMismatch("path attention length differs from the number of hops")
    return dm.einsum("t,tx->x", s_path, dm.stack(U, axis=0))


def _exclusions(store: AdjacencyStore, batch: QueryBatch, mask):
    """Per-operator entry exclusions for masked queries.

    Returns ``(prop, stmt)``: exclusions for the ``2B``-column propagation
    matrix (subjects then objects) and for the ``B``-column statement products.
    """
    B = len(batch)
    if mask is None or mask is False:
        return {}, {}
    if mask is True:
        mask = [store.kb.contains(s, p, o) for s, p, o in
                zip(batch.subject, batch.predicate, batch.object)]
    prop, stmt = defaultdict(lambda: ([], [], [])), defaultdict(lambda: ([], [], []))
    for c in np.flatnonzero(np.asarray(mask, bool)):
        s, p, o = int(batch.subject[c]), int(batch.predicate[c]), int(batch.object[c])
        for k, src, dst in store.masked_edges(p, s, o):
            for col in (c, B + c):
                prop[k][0].append(col)
                prop[k][1].append(src)
                prop[k][2].append(dst)
            stmt[k][0].append(c)
            stmt[k][1].append(src)
            stmt[k][2].append(dst)

    def pack(d):
        return {k: tuple(np.asarray(x, np.int64) for x in v) for k, v in d.items()}

    return pack(prop), pack(stmt)


def statement_values(bundle: AttentionBundle, store: AdjacencyStore, subject, obj,
                     mask=None, temperature: float = 1.0, batch: QueryBatch | None = None) -> Tensor:
    """``K x B`` matrix of relaxed statement values ``sigma(count / temperature)``.

    Binary statement ``k``: ``a_k^T M_k b_k`` where ``a_k`` (``b_k``) is the
    soft path from the subject (object).  Unary statement ``k``:
    ``(M_k 1)^T b_k``; the subject path is ignored.
    """
    subject = np.asarray(subject, np.int64).ravel()
    obj = np.asarray(obj, np.int64).ravel()
    B, n = len(subject), store.n
    if B == 0:
        raise EmptyBatch("no queries to score")
    dtype = _bundle_dtype(bundle)
    V0 = np.zeros((n, 2 * B), dtype=dtype)
    V0[subject, np.arange(B)] = 1.0
    V0[obj, B + np.arange(B)] = 1.0
    if batch is None:
        batch = QueryBatch(subject, np.zeros(B), obj, np.zeros(B))
    prop_ex, stmt_ex = _exclusions(store, batch, mask)
    U = dm.stack(propagate(bundle.op, Tensor(V0), store, prop_ex), axis=0)  # T x n x 2B
    first = _as_tensor(bundle.stmt_first, dtype)
    second = _as_tensor(bundle.stmt_second, dtype)
    if first.shape != (store.K, U.shape[0]) or second.shape != first.shape:
        raise ShapeMismatch("statement attentions must be K x T")
    A = dm.einsum("kt,txb->kxb", first, U[:, :, :B])
    Bm = dm.einsum("kt,txb->kxb", second, U[:, :, B:])
    ones = Tensor(np.ones((n, B), dtype=dtype))
    vals = []
    for k in range(store.K):
        left = ones if store.is_unary(k) else A[k]
        joined = dm.spmv_const(store.matrix(k, dtype), left, True, stmt_ex.get(k))
        vals.append((joined * Bm[k]).sum(axis=0))
    counts = dm.stack(vals, axis=0)
    return dm.sigmoid(counts * (1.0 / temperature) if temperature != 1.0 else counts)


def eval_statement(k: int, bundle: AttentionBundle, store: AdjacencyStore, subject: int,
                   obj: int, temperature: float = 1.0) -> Tensor:
    return statement_values(bundle, store, [subject], [obj], temperature=temperature)[k, 0]


def eval_formula_levels(bundle: AttentionBundle, statements) -> list[Tensor]:
    """Values of every formula level; level 0 is the statements themselves.

    Each further level negation-augments the previous one (``[f; 1 - f]``) and
    keeps ``C`` soft conjunctions ``(s^T aug) * (s'^T aug)``.
    """
    statements = dm.as_tensor(statements)
    squeeze = statements.ndim == 1
    f = statements.reshape(-1, 1) if squeeze else statements
    dtype = f.dtype
    levels = [f]
    for a, b in zip(bundle.form_first, bundle.form_second):
        a, b = _as_tensor(a, dtype), _as_tensor(b, dtype)
        aug = dm.concat([f, 1.0 - f], axis=0)
        if a.shape[1] != aug.shape[0] or b.shape != a.shape:
            raise ShapeMismatch(f"formula attention {a.shape} over {aug.shape[0]} inputs")
        f = dm.matmul(a, aug) * dm.matmul(b, aug)
        levels.append(f)
    if squeeze:
        levels = [lv.reshape(-1) for lv in levels]
    return levels


@dataclass
class ScoreBatch:
    scores: Tensor
    statements: Tensor | None = None
    levels: list | None = None

    def numpy(self) -> np.ndarray:
        return self.scores.data


def score_queries(bundle: AttentionBundle, store: AdjacencyStore, batch: QueryBatch,
                  mask=None, temperature: float = 1.0, keep_intermediates: bool = False) -> ScoreBatch:
    """Score each query as ``out^T [F_0; ...; F_{L-1}]``.

    ``mask=True`` scores each query fact that is present in ``store`` as if it
    were absent (its matrix entry, and that of the inverse operator, is
    dropped for that query only).  A boolean array selects queries explicitly.
    """
    if len(batch) == 0:
        raise EmptyBatch("no queries to score")
    stm = statement_values(bundle, store, batch.subject, batch.object, mask, temperature, batch)
    levels = eval_formula_levels(bundle, stm)
    pool = levels[0] if len(levels) == 1 else dm.concat(levels, axis=0)
    out = _as_tensor(bundle.out, pool.dtype)
    if out.shape[-1] != pool.shape[0]:
        raise ShapeMismatch(f"output attention over {out.shape[-1]} formulas, pool has {pool.shape[0]}")
    scores = dm.matmul(out.reshape(-1), pool)
    if keep_intermediates:
        return ScoreBatch(scores, stm, levels)
    return ScoreBatch(scores)


def _adjoint_paths(op: np.ndarray, weights: np.ndarray, W: np.ndarray,
                   store: AdjacencyStore) -> np.ndarray:
    """``Z[:, k] = sum_t weights[k, t] * (G_t ... G_1)^T W[:, k]`` by Horner's rule,
    where ``G_t = sum_j op[t, j] M_j^T`` is one soft hop."""
    T = op.shape[0]
    Z = W * weights[:, T - 1]
    for t in range(T - 1, -1, -1):
        Z = sum(float(op[t, j]) * (store.matrix(j, W.dtype) @ Z) for j in np.flatnonzero(op[t]))
        if t > 0:
            Z = Z + W * weights[:, t - 1]
    return Z


def _forward_paths(op: np.ndarray, weights: np.ndarray, v: np.ndarray,
                   store: AdjacencyStore) -> np.ndarray:
    """``n x K`` soft path vectors from entity vector ``v``, one column per statement."""
    feats = [f.data for f in propagate(op, Tensor(v), store)]
    return np.stack(feats, axis=1) @ weights.T


def all_candidate_scores(bundle: AttentionBundle, store: AdjacencyStore, target: int,
                         anchor: int, side: str = "object", temperature: float = 1.0) -> np.ndarray:
    """Scores of every entity filled into one side of ``target(anchor, ?)``
    (``side="object"``) or ``target(?, anchor)`` (``side="subject"``).
    Unary targets ignore ``anchor`` and score every entity.

    For binary targets every statement count is linear in the candidate's
    one-hot vector, so all candidates are scored with ``O(T K)`` sparse
    products through the transposed hops instead of ``n`` propagations.
    """
    n = store.n
    if store.is_unary(target):
        cand = np.arange(n)
        batch = QueryBatch(cand, np.full(n, target), cand, np.zeros(n))
        return score_queries(bundle, store, batch, temperature=temperature).scores.data.copy()
    if side not in ("object", "subject"):
        raise ValueError(f"side must be 'object' or 'subject', got {side!r}")
    b = bundle.numpy()
    dtype = b.op.dtype if b.op.dtype.kind == "f" else dm.default_dtype()
    op = b.op.astype(dtype)
    first, second = b.stmt_first.astype(dtype), b.stmt_second.astype(dtype)
    v = np.zeros(n, dtype=dtype)
    v[anchor] = 1.0
    ones = np.ones(n, dtype=dtype)
    K = store.K
    W = np.empty((n, K), dtype=dtype)
    const = np.zeros(K, dtype=dtype)
    unary = np.array([store.is_unary(k) for k in range(K)])
    if side == "object":
        A = _forward_paths(op, first, v, store)
        for k in range(K):
            M = store.matrix(k, dtype)
            W[:, k] = M.T @ (ones if unary[k] else A[:, k])
        counts = _adjoint_paths(op, second, W, store)
    else:
        Bv = _forward_paths(op, second, v, store)
        for k in range(K):
            M = store.matrix(k, dtype)
            if unary[k]:
                const[k] = (M.T @ ones) @ Bv[:, k]
                W[:, k] = 0.0
            else:
                W[:, k] = M @ Bv[:, k]
        counts = _adjoint_paths(op, first, W, store) + const
    stm = dm.sigmoid(Tensor(counts.T * (1.0 / temperature)))
    levels = eval_formula_levels(b, stm)
    pool = levels[0] if len(levels) == 1 else dm.concat(levels, axis=0)
    return (b.out.astype(dtype) @ pool.data).copy()


def one_hot_bundle(config: RuleSpaceConfig, op: Sequence[int], first: Sequence[int],
                   second: Sequence[int], form_first: Sequence[Sequence[int]] = (),
                   form_second: Sequence[Sequence[int]] = (), out: int = 0,
                   dtype=np.float64) -> AttentionBundle:
    """Build a hard bundle from argmax indices."""
    def rows(idx, width):
        m = np.zeros((len(idx), width), dtype=dtype)
        m[np.arange(len(idx)), list(idx)] = 1.0
        return m

    K, T = config.K, config.T
    fa = [rows(form_first[i], config.level_width(i + 1)) for i in range(config.levels)]
    fb = [rows(form_second[i], config.level_width(i + 1)) for i in range(config.levels)]
    o = np.zeros(config.pool_size, dtype=dtype)
    o[out] = 1.0
    return AttentionBundle(rows(op, K), rows(first, T), rows(second, T), fa, fb, o)


def random_bundle(config: RuleSpaceConfig, rng: np.random.Generator,
                  concentration: float = 1.0, dtype=np.float64) -> AttentionBundle:
    """Random row-stochastic bundle (Dirichlet rows)."""
    def rows(n, width):
        return rng.dirichlet(np.full(width, concentration), size=n).astype(dtype)

    K, T, C = config.K, config.T, config.C
    fa = [rows(C, config.level_width(i + 1)) for i in range(config.levels)]
    fb = [rows(C, config.level_width(i + 1)) for i in range(config.levels)]
    return AttentionBundle(rows(T, K), rows(K, T), rows(K, T), fa, fb,
                           rows(1, config.pool_size)[0])
