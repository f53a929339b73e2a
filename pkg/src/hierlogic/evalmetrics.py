"""Filtered ranking metrics and classification accuracy."""
from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Iterable, Mapping

import numpy as np

from .errors import EmptyInput, IndexOutOfRange

TIE_POLICY = "mean"


def filtered_rank(scores, true_index: int, known_true: Iterable[int] = ()) -> float:
    """Rank of ``scores[true_index]`` among candidates not in ``known_true``.

    Ties count half: ``rank = 1 + #greater + #tied / 2``, the mean of the
    optimistic and pessimistic ranks.  ``true_index`` itself is never filtered.
    """
    scores = np.asarray(scores, dtype=np.float64).ravel()
    n = len(scores)
    if not 0 <= true_index < n:
        raise IndexOutOfRange(f"true index {true_index} outside [0, {n})")
    keep = np.ones(n, dtype=bool)
    known = np.asarray(list(known_true), dtype=np.int64)
    if known.size:
        if known.min() < 0 or known.max() >= n:
            raise IndexOutOfRange("filtered index outside the candidate range")
        keep[known] = False
    keep[true_index] = False
    target = scores[true_index]
    others = scores[keep]
    greater = int(np.count_nonzero(others > target))
    tied = int(np.count_nonzero(others == target))
    return 1.0 + greater + tied / 2.0


def _ranks(ranks) -> np.ndarray:
    r = np.asarray(list(ranks) if not isinstance(ranks, np.ndarray) else ranks, dtype=np.float64)
    if r.size == 0:
        raise EmptyInput("no ranks")
    return r


def mrr(ranks) -> float:
    return float(np.mean(1.0 / _ranks(ranks)))


def hits_at_k(ranks, k: int = 10) -> float:
    return float(np.mean(_ranks(ranks) <= k))


def accuracy(predictions, labels) -> float:
    p, y = np.asarray(predictions).ravel(), np.asarray(labels).ravel()
    if p.size == 0:
        raise EmptyInput("no predictions")
    if p.shape != y.shape:
        raise EmptyInput("predictions and labels differ in length")
    return float(np.mean(p == y))


@dataclass
class RankingResult:
    """Filtered ranks of test facts; binary facts are ranked on both sides."""

    tail: np.ndarray
    head: np.ndarray = field(default_factory=lambda: np.zeros(0))
    candidates: int = 0

    @property
    def ranks(self) -> np.ndarray:
        return np.concatenate([self.tail, self.head])

    def metrics(self, prefix: str = "") -> dict:
        r = self.ranks
        return {f"{prefix}mrr": mrr(r), f"{prefix}hits@1": hits_at_k(r, 1),
                f"{prefix}hits@10": hits_at_k(r, 10), f"{prefix}ranked": int(r.size)}


ScoreFn = Callable[[int, int, str], np.ndarray]


def rank_facts(facts, score_fn: ScoreFn, known: Iterable, n_entities: int,
               unary: Iterable[int] = (), workers: int = 1) -> RankingResult:
    """Filtered ranks of ``facts`` (rows ``subject, predicate, object``).

    ``score_fn(predicate, anchor, side)`` returns the scores of all entities:
    ``side="object"`` fills ``predicate(anchor, ?)``, ``side="subject"`` fills
    ``predicate(?, anchor)``, and for unary predicates ``side="unary"``
    scores every entity.  ``known`` lists every true fact used for filtering.
    """
    facts = np.asarray(facts, dtype=np.int64).reshape(-1, 3)
    if len(facts) == 0:
        raise EmptyInput("no facts to rank")
    unary = set(int(u) for u in unary)
    by_tail, by_head, by_unary = {}, {}, {}
    for s, p, o in np.asarray(list(known), dtype=np.int64).reshape(-1, 3).tolist():
        if p in unary:
            by_unary.setdefault(p, []).append(s)
        else:
            by_tail.setdefault((p, s), []).append(o)
            by_head.setdefault((p, o), []).append(s)

    cache: dict = {}

    def scores(p: int, anchor: int, side: str) -> np.ndarray:
        key = (p, anchor, side)
        if key not in cache:
            cache[key] = np.asarray(score_fn(p, anchor, side), dtype=np.float64)
            if cache[key].shape != (n_entities,):
                raise IndexOutOfRange(f"score vector of shape {cache[key].shape}")
        return cache[key]

    def one(row):
        s, p, o = row
        if p in unary:
            return filtered_rank(scores(p, -1, "unary"), s, by_unary.get(p, ())), None
        t = filtered_rank(scores(p, s, "object"), o, by_tail.get((p, s), ()))
        h = filtered_rank(scores(p, o, "subject"), s, by_head.get((p, o), ()))
        return t, h

    rows = facts.tolist()
    if workers > 1:
        # warm shared unary vectors first so threads do not race on them
        for s, p, o in rows:
            if p in unary:
                scores(p, -1, "unary")
        with ThreadPoolExecutor(workers) as pool:
            out = list(pool.map(one, rows))
    else:
        out = [one(r) for r in rows]
    tail = np.array([t for t, _ in out])
    head = np.array([h for _, h in out if h is not None])
    return RankingResult(tail, head, n_entities)


def format_report(metrics: Mapping[str, object], title: str = "metrics") -> str:
    """Human-readable lines followed by a ``key=value`` block."""
    width = max((len(k) for k in metrics), default=0)
    lines = [f"# {title}"]
    for k, v in metrics.items():
        lines.append(f"{k:<{width}}  {_fmt(v)}")
    lines.append("[metrics]")
    lines += [f"{k}={_fmt(v)}" for k, v in metrics.items()]
    lines.append("[/metrics]")
    return "\n".join(lines) + "\n"


def _fmt(v) -> str:
    if isinstance(v, (float, np.floating)):
        return f"{float(v):.6f}"
    return str(v)


def parse_report(text: str) -> dict[str, str]:
    """Read back the ``key=value`` block of :func:`format_report`."""
    out, inside = {}, False
    for line in text.splitlines():
        if line.strip() == "[metrics]":
            inside = True
        elif line.strip() == "[/metrics]":
            inside = False
        elif inside and "=" in line:
            k, v = line.split("=", 1)
            out[k.strip()] = v.strip()
    return out
