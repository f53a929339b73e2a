"""Training loop: generate bundles per target, score sampled queries, update the generator."""
from __future__ import annotations

import hashlib
import json
import logging
import time
import zipfile
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from . import diffmath as dm
from .errors import (DigestMismatch, Divergence, EmptyBatch, IoFailure, NoTargets,
                     NonFiniteError, ShapeMismatch)
from .evalmetrics import RankingResult, rank_facts
from .extractor import Rule, canonicalize, encode, extract
from .kb import (IDENTITY, AdjacencyStore, Predicate, PredicateTable, QueryBatch, SplitDataset,
                 build_matrices, count_negatives, sample_negative_queries)
from .rulegen import ModelParams, generate
from .rulespace import (AttentionBundle, RuleSpaceConfig, all_candidate_scores, harden,
                        score_queries)

log = logging.getLogger(__name__)

CHECKPOINT_VERSION = 1
META_KEY = "__meta__"
SELECT_DECIMALS = 6


@dataclass
class TrainConfig:
    batch_size: int = 32
    negatives: int = 1
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    epochs: int = 300
    seed: int = 0
    patience: int = 20
    precision: str = "float32"
    eval_every: int = 1
    pool_warmup: int = 0
    restarts: int = 1

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.negatives < 0:
            raise ValueError("negatives must be >= 0")
        if not self.lr >= 0:
            raise ValueError("lr must be non-negative")
        if self.restarts < 1:
            raise ValueError("restarts must be >= 1")
        if self.pool_warmup < 0:
            raise ValueError("pool_warmup must be >= 0")
        if self.precision not in ("float32", "float64"):
            raise ValueError("precision is float32 or float64")

    @property
    def dtype(self):
        return np.dtype(self.precision)


RULE_KEYS = ("T", "L", "C", "d", "temperature")


def _coerce(value: str, kind):
    if kind is bool:
        return value.lower() in ("1", "true", "yes")
    return kind(value)


def read_config_file(path) -> dict[str, str]:
    """Flat ``key=value`` file; ``#`` starts a comment."""
    out = {}
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise IoFailure(f"{path}: {exc}") from exc
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"{path}:{lineno}: expected key=value")
        k, v = line.split("=", 1)
        out[k.strip()] = v.strip()
    return out


def configs_from_mapping(values: Mapping[str, object]) -> tuple[dict, TrainConfig]:
    """Split flat settings into rule-space keywords and a :class:`TrainConfig`."""
    rule_types = {"T": int, "L": int, "C": int, "d": int, "temperature": float}
    train_types = {f.name: f.type for f in fields(TrainConfig)}
    kinds = {"batch_size": int, "negatives": int, "lr": float, "beta1": float, "beta2": float,
             "eps": float, "epochs": int, "seed": int, "patience": int, "precision": str,
             "eval_every": int, "pool_warmup": int, "restarts": int}
    rule, train = {}, {}
    for k, v in values.items():
        if k in rule_types:
            rule[k] = rule_types[k](v) if not isinstance(v, str) else _coerce(v, rule_types[k])
        elif k in train_types:
            train[k] = kinds[k](v) if not isinstance(v, str) else _coerce(v, kinds[k])
        else:
            raise ValueError(f"unknown config key {k!r}")
    return rule, TrainConfig(**train)


def rule_config_for(store: AdjacencyStore, T: int = 2, L: int = 1, C: int = 2, d: int = 32,
                    temperature: float = 1.0) -> RuleSpaceConfig:
    return RuleSpaceConfig(K=store.K, T=T, L=L, C=C, d=d, temperature=temperature)


class Adam:
    def __init__(self, params: Sequence[dm.Tensor], lr: float = 1e-3, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        self.params = list(params)
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]
        self.t = 0

    def step(self, grads: Sequence[np.ndarray]) -> None:
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        for p, g, m, v in zip(self.params, grads, self.m, self.v):
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p.data -= (self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)).astype(p.data.dtype)


@dataclass
class EpochRecord:
    epoch: int
    loss: float
    seconds: float
    valid_mrr: float | None = None
    valid_hits10: float | None = None
    valid_mrr_hard: float | None = None
    valid_hits10_hard: float | None = None


@dataclass
class TrainReport:
    epochs: list[EpochRecord] = field(default_factory=list)
    best_epoch: int = -1
    stopped_early: bool = False
    seconds: float = 0.0
    restart: int = 0
    restart_objectives: list[float] = field(default_factory=list)
    restart_sizes: list[int] = field(default_factory=list)

    @property
    def losses(self) -> list[float]:
        return [e.loss for e in self.epochs]

    def as_dict(self) -> dict:
        return asdict(self)


@dataclass
class TrainResult:
    params: ModelParams
    report: TrainReport
    store: AdjacencyStore
    config: RuleSpaceConfig
    targets: tuple[int, ...]

    def bundles(self) -> dict[int, AttentionBundle]:
        return {t: generate(self.params, t).bundle.numpy() for t in self.targets}

    def rules(self) -> dict[str, Rule]:
        vocab = self.store.vocab
        return {vocab[t].name: extract(harden(b), self.config, vocab, t)
                for t, b in self.bundles().items()}


def _seeds(seed: int, n: int) -> list[np.random.SeedSequence]:
    return np.random.SeedSequence(seed).spawn(n)


def resolve_targets(store: AdjacencyStore, targets) -> tuple[int, ...]:
    if targets is None:
        ids = [p.id for p in store.kb.predicates]
    else:
        ids = [store.vocab.id(t) if isinstance(t, str) else int(t) for t in targets]
    ids = [i for i in dict.fromkeys(ids)]
    if not ids:
        raise NoTargets("no target predicates")
    return tuple(ids)


def target_loss(params: ModelParams, store: AdjacencyStore, target: int, batch: QueryBatch,
                pool_average: bool = False):
    """Mean cross-entropy of one target's batch; positives present in the store are masked.

    With ``pool_average`` every formula of the output pool is scored as if it
    were the sole output and the cross-entropies are averaged; the output
    attention then receives no gradient.
    """
    bundle = generate(params, target).bundle
    sb = score_queries(bundle, store, batch, mask=True,
                       temperature=params.config.temperature, keep_intermediates=pool_average)
    y = batch.label.astype(sb.scores.dtype)
    if not pool_average:
        return dm.cross_entropy(y, sb.scores), bundle
    pool = sb.levels[0] if len(sb.levels) == 1 else dm.concat(sb.levels, axis=0)
    return dm.cross_entropy(y, pool), bundle


def rule_size(rule: Rule) -> int:
    """Leaves plus non-Identity hops of the canonical form; smaller is simpler."""
    size = 0
    for st in canonicalize(rule).leaves():
        size += 1
        for p in (st.first, st.second):
            if p is not None:
                size += sum(1 for h in p.ops if h.name != IDENTITY)
    return size


def _extract_all(params: ModelParams, store: AdjacencyStore, config: RuleSpaceConfig,
                 targets: Sequence[int]) -> list[Rule]:
    return [extract(harden(generate(params, t).bundle.numpy()), config, store.vocab, t)
            for t in targets]


def hard_objective(params: ModelParams, store: AdjacencyStore, targets: Sequence[int],
                   queries: Mapping[int, QueryBatch]) -> float:
    """Cross-entropy of the argmax-extracted rules on fixed training queries.

    Target losses are weighted by their number of queries, as in training.
    """
    total, count = 0.0, 0
    for t in targets:
        batch = queries.get(t)
        if batch is None or len(batch) == 0:
            continue
        bundle = harden(generate(params, t).bundle.numpy())
        scores = score_queries(bundle, store, batch, mask=True,
                               temperature=params.config.temperature).scores
        total += float(dm.cross_entropy(batch.label.astype(np.float64), scores).data) * len(batch)
        count += len(batch)
    return total / max(count, 1)


def selection_queries(store: AdjacencyStore, targets: Sequence[int], negatives: int,
                      seed) -> dict[int, QueryBatch]:
    """All training positives of each target plus ``negatives`` sampled negatives per positive."""
    kb = store.kb
    rng = np.random.default_rng(seed)
    out = {}
    for t in targets:
        facts = kb.facts[kb.facts[:, 1] == t]
        if not len(facts):
            continue
        pos = QueryBatch.from_facts(facts, label=1)
        n_neg = min(max(negatives, 1) * len(pos), count_negatives(kb, t))
        out[t] = QueryBatch.concat([pos, sample_negative_queries(kb, t, n_neg, rng)])
    return out


def train(splits: SplitDataset, targets=None, rule: Mapping | RuleSpaceConfig | None = None,
          cfg: TrainConfig | None = None, store: AdjacencyStore | None = None,
          init: ModelParams | None = None) -> TrainResult:
    """Fit the generator on ``splits.train``.

    Each step draws ``batch_size`` positives and ``negatives * batch_size``
    negatives for every target and applies one optimizer update to the
    query-weighted mean cross-entropy.  An epoch covers the largest target's
    positives once; smaller targets cycle through theirs.

    For the first ``cfg.pool_warmup`` epochs the loss averages over every
    formula of the output pool (see :func:`target_loss`).  This keeps the
    output attention from locking onto an early weak formula before the
    shared operator attentions have found useful paths.

    With ``cfg.restarts > 1`` independent runs are trained and the one whose
    extracted hard rules fit the training queries best is kept.  Runs whose
    objectives agree to ``SELECT_DECIMALS`` places are ranked by total rule
    size (:func:`rule_size`), then by order.  ``init`` applies to the first
    run only.
    """
    cfg = cfg or TrainConfig()
    start = time.perf_counter()
    store = store or build_matrices(splits.kb("train"))
    if isinstance(rule, RuleSpaceConfig):
        config = rule
        if config.K != store.K:
            raise ShapeMismatch(f"rule config K={config.K}, vocabulary has {store.K}")
    else:
        config = rule_config_for(store, **dict(rule or {}))
    targets = resolve_targets(store, targets)
    if not any(len(store.kb.facts_of(t)[0]) for t in targets):
        raise NoTargets("no target has training facts")
    run_seeds = _seeds(cfg.seed, cfg.restarts + 1)
    queries = selection_queries(store, targets, cfg.negatives, run_seeds[-1]) if cfg.restarts > 1 else {}

    best = None
    objectives, sizes = [], []
    for r in range(cfg.restarts):
        params, report = _fit(splits, store, config, targets, cfg, run_seeds[r],
                              init if r == 0 else None)
        if cfg.restarts > 1:
            objective = hard_objective(params, store, targets, queries)
            size = sum(rule_size(rule) for rule in _extract_all(params, store, config, targets))
            key = (round(objective, SELECT_DECIMALS), size)
            objectives.append(objective)
            sizes.append(size)
            log.info("restart %d hard objective %.5f rule size %d", r, objective, size)
            if best is None or key < best[0]:
                best = (key, params, report, r)
        else:
            best = (None, params, report, r)
    _, params, report, r = best
    report.restart = r
    report.restart_objectives = objectives
    report.restart_sizes = sizes
    report.seconds = time.perf_counter() - start
    return TrainResult(params, report, store, config, targets)


def _fit(splits: SplitDataset, store: AdjacencyStore, config: RuleSpaceConfig,
         targets: Sequence[int], cfg: TrainConfig, seed: np.random.SeedSequence,
         init: ModelParams | None) -> tuple[ModelParams, TrainReport]:
    kb = store.kb
    init_seed, sample_seed = seed.spawn(2)
    rng = np.random.default_rng(sample_seed)
    with dm.precision(cfg.dtype):
        params = init.copy() if init is not None else ModelParams.init(
            config, seed=int(init_seed.generate_state(1)[0]), dtype=cfg.dtype,
            vocab_names=store.vocab.names)
    opt = Adam(params.parameters(), cfg.lr, cfg.beta1, cfg.beta2, cfg.eps)

    positives = {t: np.flatnonzero(kb.facts[:, 1] == t) for t in targets}
    zeros = {t: count_negatives(kb, t) for t in targets}
    active = [t for t in targets if len(positives[t])]
    steps = max(int(np.ceil(len(positives[t]) / cfg.batch_size)) for t in active)
    has_valid = len(splits.valid) > 0
    known = splits.all_facts()

    report = TrainReport()
    best, best_score, wait = params.copy(), -np.inf, 0
    for epoch in range(cfg.epochs):
        t0 = time.perf_counter()
        warm = epoch < cfg.pool_warmup
        order = {t: rng.permutation(positives[t]) for t in active}
        losses = []
        for step in range(steps):
            batches = []
            for t in active:
                own = int(np.ceil(len(order[t]) / cfg.batch_size))
                j = step % own
                idx = order[t][j * cfg.batch_size:(j + 1) * cfg.batch_size]
                pos = QueryBatch.from_facts(kb.facts[idx], label=1)
                n_neg = min(cfg.negatives * len(pos), zeros[t])
                neg = sample_negative_queries(kb, t, n_neg, rng)
                batches.append((t, QueryBatch.concat([pos, neg])))
            n_queries = sum(len(b) for _, b in batches)
            try:
                total = None
                for t, batch in batches:
                    loss, _ = target_loss(params, store, t, batch, pool_average=warm)
                    loss = loss * (len(batch) / n_queries)
                    total = loss if total is None else total + loss
            except NonFiniteError as exc:
                raise Divergence(f"epoch {epoch}: {exc}") from exc
            if not np.isfinite(total.data):
                raise Divergence(f"epoch {epoch}: non-finite loss")
            grads = dm.backward(total, params.parameters())
            opt.step(grads)
            losses.append(float(total.data))
        rec = EpochRecord(epoch, float(np.mean(losses)), time.perf_counter() - t0)
        # validation only counts once the output attention is live
        if has_valid and not warm and (epoch % cfg.eval_every == 0 or epoch == cfg.epochs - 1):
            soft = evaluate_soft(params, store, splits.valid, known, targets)
            hard = evaluate_hard_ranking(params, store, splits.valid, known, targets)
            rec.valid_mrr, rec.valid_hits10 = soft["mrr"], soft["hits@10"]
            rec.valid_mrr_hard, rec.valid_hits10_hard = hard["mrr"], hard["hits@10"]
            if rec.valid_mrr > best_score:
                best, best_score, wait, report.best_epoch = params.copy(), rec.valid_mrr, 0, epoch
            else:
                wait += 1
        report.epochs.append(rec)
        log.info("epoch %d loss %.5f valid_mrr %s", epoch, rec.loss, rec.valid_mrr)
        if has_valid and wait >= cfg.patience:
            report.stopped_early = True
            break
    if not has_valid or report.best_epoch < 0:
        best, report.best_epoch = params, len(report.epochs) - 1
    return best, report


def gradient_check(splits_or_kb=None, rule: Mapping | None = None, seed: int = 0,
                   targets=None, negatives: int = 1, eps: float = 1e-5,
                   max_coords: int | None = 4) -> float:
    """Max relative error of end-to-end loss gradients against central differences.

    Runs at 64-bit precision on the toy-3 KB unless another KB is given.  The
    loss covers every training fact of the targets plus sampled negatives, so
    the check runs through scoring and all three generator stages.
    """
    from .kb import KnowledgeBase, toy3
    kb = splits_or_kb if splits_or_kb is not None else toy3()
    if not isinstance(kb, KnowledgeBase):
        kb = kb.kb("train")
    store = build_matrices(kb)
    config = rule_config_for(store, **dict(rule or {"T": 2, "L": 1, "C": 2, "d": 8}))
    init_seed, sample_seed = np.random.SeedSequence(seed).spawn(2)
    rng = np.random.default_rng(sample_seed)
    batches = {}
    for t in resolve_targets(store, targets):
        facts = kb.facts[kb.facts[:, 1] == t]
        if not len(facts):
            continue
        pos = QueryBatch.from_facts(facts, label=1)
        n_neg = min(negatives * len(pos), count_negatives(kb, t))
        batches[t] = QueryBatch.concat([pos, sample_negative_queries(kb, t, n_neg, rng)])
    if not batches:
        raise NoTargets("no target has facts")
    with dm.precision(np.float64):
        params = ModelParams.init(config, seed=int(init_seed.generate_state(1)[0]),
                                  dtype=np.float64, vocab_names=store.vocab.names)

        def loss():
            total = None
            for t, batch in batches.items():
                value, _ = target_loss(params, store, t, batch)
                total = value if total is None else total + value
            return total

        return dm.finite_diff_check(loss, params.parameters(), eps=eps,
                                    max_coords=max_coords, seed=seed)


# ---------------------------------------------------------------------------
# evaluation with learned bundles
# ---------------------------------------------------------------------------


def _bundle_score_fn(bundles: Mapping[int, AttentionBundle], store: AdjacencyStore,
                     temperature: float):
    def score(p: int, anchor: int, side: str) -> np.ndarray:
        return all_candidate_scores(bundles[p], store, p, max(anchor, 0),
                                    "object" if side == "unary" else side, temperature)
    return score


def _rank(bundles, store, facts, known, temperature, workers) -> RankingResult:
    return rank_facts(facts, _bundle_score_fn(bundles, store, temperature), known,
                      store.n, store.kb.predicates.unary, workers)


def _eval_facts(facts, targets) -> np.ndarray:
    facts = np.asarray(facts, np.int64).reshape(-1, 3)
    if len(facts) == 0:
        raise EmptyBatch("no queries to evaluate")
    keep = np.isin(facts[:, 1], list(targets))
    if not keep.any():
        raise EmptyBatch("no query uses a target predicate")
    return facts[keep]


def evaluate_soft(params: ModelParams, store: AdjacencyStore, facts, known=None,
                  targets=None, workers: int = 1) -> dict:
    """Filtered MRR / Hits@k of the soft bundles on ``facts``."""
    targets = resolve_targets(store, targets)
    facts = _eval_facts(facts, targets)
    bundles = {t: generate(params, t).bundle.numpy() for t in np.unique(facts[:, 1]).tolist()}
    known = facts if known is None else known
    return _rank(bundles, store, facts, known, params.config.temperature, workers).metrics()


def evaluate_hard_ranking(params: ModelParams, store: AdjacencyStore, facts, known=None,
                          targets=None, workers: int = 1) -> dict:
    """Filtered MRR / Hits@k of the hardened (argmax) bundles on ``facts``."""
    targets = resolve_targets(store, targets)
    facts = _eval_facts(facts, targets)
    bundles = {t: harden(generate(params, t).bundle) for t in np.unique(facts[:, 1]).tolist()}
    known = facts if known is None else known
    return _rank(bundles, store, facts, known, params.config.temperature, workers).metrics()


def evaluate_rules_ranking(rules: Mapping[str, Rule], config: RuleSpaceConfig,
                           store: AdjacencyStore, facts, known=None, workers: int = 1) -> dict:
    """Filtered MRR / Hits@k of explicit rules re-encoded as one-hot bundles."""
    vocab = store.vocab
    bundles = {vocab.id(name): encode(r, config, vocab) for name, r in rules.items()}
    facts = _eval_facts(facts, bundles)
    known = facts if known is None else known
    return _rank(bundles, store, facts, known, config.temperature, workers).metrics()


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------


def _vocab_rows(vocab: PredicateTable) -> list:
    return [[p.name, p.arity, p.is_inverse, p.is_identity, p.base] for p in vocab]


def vocab_from_rows(rows) -> PredicateTable:
    return PredicateTable([Predicate(n, int(a), i, bool(inv), bool(ident), base)
                           for i, (n, a, inv, ident, base) in enumerate(rows)])


def config_digest(config: RuleSpaceConfig, vocab_names: Sequence[str] = ()) -> str:
    blob = json.dumps({"rule": config.to_dict(), "vocab": list(vocab_names)}, sort_keys=True)
    return hashlib.sha256(blob.encode("utf-8")).hexdigest()


def _write_npz(path, arrays: Mapping[str, np.ndarray]) -> None:
    # np.savez stamps entries with the wall clock; a fixed date keeps files byte-identical
    with zipfile.ZipFile(path, "w", zipfile.ZIP_STORED, allowZip64=True) as zf:
        for name in sorted(arrays):
            info = zipfile.ZipInfo(name + ".npy", date_time=(1980, 1, 1, 0, 0, 0))
            with zf.open(info, "w", force_zip64=True) as fh:
                np.lib.format.write_array(fh, np.asarray(arrays[name]), allow_pickle=False)


def checkpoint_save(params: ModelParams, path, vocab: PredicateTable | None = None,
                    targets: Sequence[int] = (), extra: Mapping | None = None) -> None:
    meta = {
        "version": CHECKPOINT_VERSION,
        "rule": params.config.to_dict(),
        "digest": config_digest(params.config, params.vocab_names),
        "vocab_names": list(params.vocab_names),
        "vocab": _vocab_rows(vocab) if vocab is not None else None,
        "targets": [int(t) for t in targets],
        "shapes": {k: list(v.shape) for k, v in params.tensors.items()},
        "extra": dict(extra or {}),
    }
    arrays = params.arrays()
    arrays[META_KEY] = np.frombuffer(json.dumps(meta, sort_keys=True).encode("utf-8"), np.uint8)
    try:
        _write_npz(path, arrays)
    except OSError as exc:
        raise IoFailure(f"{path}: {exc}") from exc


def checkpoint_load(path, config: RuleSpaceConfig | None = None) -> tuple[ModelParams, dict]:
    """Load parameters; when ``config`` is given its digest must match the file's."""
    try:
        with np.load(path, allow_pickle=False) as z:
            meta = json.loads(bytes(z[META_KEY]).decode("utf-8"))
            arrays = {k: z[k].copy() for k in z.files if k != META_KEY}
    except (OSError, KeyError, ValueError) as exc:
        raise IoFailure(f"{path}: cannot read checkpoint ({exc})") from exc
    if meta.get("version") != CHECKPOINT_VERSION:
        raise IoFailure(f"{path}: unsupported checkpoint version {meta.get('version')}")
    stored = RuleSpaceConfig(**meta["rule"])
    names = tuple(meta["vocab_names"])
    if config_digest(stored, names) != meta["digest"]:
        raise DigestMismatch(f"{path}: stored digest does not match its own config")
    if config is not None and config_digest(config, names) != meta["digest"]:
        raise DigestMismatch(f"{path}: checkpoint was written for {stored}, not {config}")
    order = list(meta["shapes"])
    params = ModelParams.from_arrays(stored, {k: arrays[k] for k in order}, names)
    return params, meta
