"""Command-line entry point: generate, train, extract, evaluate, check gradients.

Every command that writes files also writes a ``manifest.json`` describing the
run.  Exit codes: 0 success, 1 a check failed, 2 bad usage, 3 a library error,
4 an input/output failure.
"""
from __future__ import annotations

import argparse
import datetime as _dt
import json
import logging
import os
import sys
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import __version__
from . import extractor as ex
from . import kb as kbm
from . import trainer as tr
from .errors import FlagConflict, HierLogicError, IoFailure, NotEncodable
from .evalmetrics import format_report
from .rulespace import RuleSpaceConfig, harden
from .rulegen import generate

CONFIG_ENV = "HIERLOGIC_CONFIG"
GRAD_TOLERANCE = 1e-4
EXIT_OK, EXIT_CHECK, EXIT_USAGE, EXIT_ERROR, EXIT_IO = 0, 1, 2, 3, 4

log = logging.getLogger("hierlogic")


@dataclass
class RunManifest:
    command: list[str]
    seed: int
    config: dict = field(default_factory=dict)
    kb_digests: dict = field(default_factory=dict)
    artifacts: list[str] = field(default_factory=list)
    started: str = ""
    finished: str = ""
    version: str = __version__

    def write(self, path) -> None:
        self.finished = _now()
        try:
            Path(path).write_text(json.dumps(asdict(self), indent=2, ensure_ascii=False) + "\n",
                                  encoding="utf-8")
        except OSError as exc:
            raise IoFailure(f"{path}: {exc}") from exc


def _now() -> str:
    return _dt.datetime.now(_dt.timezone.utc).isoformat(timespec="seconds")


def _manifest(args, seed: int, **kw) -> RunManifest:
    return RunManifest(command=list(args.argv), seed=seed, started=args.started, **kw)


def _split_digests(splits: kbm.SplitDataset) -> dict:
    return {name: splits.kb(name).digest() for name in ("train", "valid", "test")}


def _mkdir(path) -> Path:
    p = Path(path)
    try:
        p.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise IoFailure(f"{p}: {exc}") from exc
    return p


def _write_text(path, text: str) -> None:
    try:
        Path(path).write_text(text, encoding="utf-8")
    except OSError as exc:
        raise IoFailure(f"{path}: {exc}") from exc


# ---------------------------------------------------------------------------
# configuration
# ---------------------------------------------------------------------------


def resolve_settings(config_path: str | None, overrides: Sequence[str] = (),
                     **flags) -> dict:
    """Config file (or ``$HIERLOGIC_CONFIG``) values, then ``--set`` pairs, then explicit flags."""
    path = config_path or os.environ.get(CONFIG_ENV)
    values: dict = dict(tr.read_config_file(path)) if path else {}
    for item in overrides:
        if "=" not in item:
            raise FlagConflict(f"--set expects key=value, got {item!r}")
        k, v = item.split("=", 1)
        values[k.strip()] = v.strip()
    for k, v in flags.items():
        if v is not None:
            values[k] = v
    tr.configs_from_mapping(values)  # validate early
    return values


def _seed(args, settings: dict | None = None) -> int:
    if args.seed is not None:
        return args.seed
    if settings and "seed" in settings:
        return int(settings["seed"])
    return 0


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def cmd_gen_es(args) -> int:
    full, splits = kbm.gen_even_successor(args.n, args.holdout_frac, args.valid_frac)
    out = _mkdir(args.out)
    kbm.write_split_dataset(out, splits)
    kbm.write_facts(out / "facts.tsv", full)
    print(f"wrote {len(full)} facts over {args.n} integers to {out} "
          f"(train {len(splits.train)}, valid {len(splits.valid)}, test {len(splits.test)})")
    _manifest(args, _seed(args), config={"n": args.n, "holdout_frac": args.holdout_frac,
                                         "valid_frac": args.valid_frac},
              kb_digests={"full": full.digest(), **_split_digests(splits)},
              artifacts=[str(out / f) for f in ("meta.tsv", "train.tsv", "valid.tsv",
                                                "test.tsv", "facts.tsv")]
              ).write(out / "manifest.json")
    return EXIT_OK


def cmd_gen_comp(args) -> int:
    seed = _seed(args)
    splits = kbm.gen_composition_kb(args.n, args.noise, seed=seed)
    out = _mkdir(args.out)
    kbm.write_split_dataset(out, splits)
    print(f"wrote {len(splits.all_facts())} facts over {args.n} entities to {out} "
          f"(train {len(splits.train)}, valid {len(splits.valid)}, test {len(splits.test)})")
    _manifest(args, seed, config={"n": args.n, "noise": args.noise},
              kb_digests=_split_digests(splits),
              artifacts=[str(out / f) for f in ("meta.tsv", "train.tsv", "valid.tsv", "test.tsv")]
              ).write(out / "manifest.json")
    return EXIT_OK


def cmd_train(args) -> int:
    settings = resolve_settings(args.config, args.set, epochs=args.epochs, lr=args.lr,
                                batch_size=args.batch_size, restarts=args.restarts)
    seed = _seed(args, settings)
    settings["seed"] = seed
    rule, cfg = tr.configs_from_mapping(settings)
    splits = kbm.load_split_dataset(args.kb)
    targets = args.targets.split(",") if args.targets else None
    result = tr.train(splits, targets, rule, cfg)
    out = _mkdir(args.out)
    ckpt = out / "checkpoint.npz"
    tr.checkpoint_save(result.params, ckpt, result.store.vocab, result.targets,
                       extra={"kb": str(Path(args.kb).resolve())})
    report = result.report.as_dict()
    _write_text(out / "report.json", json.dumps(report, indent=2) + "\n")
    lines = [ex.render_operator_form(r) for r in result.rules().values()]
    _write_text(out / "rules.txt", "\n".join(lines) + "\n")
    for line in lines:
        print(line)
    last = result.report.epochs[-1]
    print(f"trained {len(result.report.epochs)} epochs in {result.report.seconds:.1f}s, "
          f"final loss {last.loss:.5f}, kept restart {result.report.restart}")
    _manifest(args, seed, config={**asdict(cfg), **result.config.to_dict()},
              kb_digests=_split_digests(splits),
              artifacts=[str(ckpt), str(out / "report.json"), str(out / "rules.txt")]
              ).write(out / "manifest.json")
    return EXIT_OK


def _checkpoint_rules(path) -> tuple[dict[str, ex.Rule], RuleSpaceConfig, dict]:
    params, meta = tr.checkpoint_load(path)
    if not meta.get("vocab"):
        raise IoFailure(f"{path}: checkpoint has no vocabulary")
    vocab = tr.vocab_from_rows(meta["vocab"])
    rules = {}
    for t in meta["targets"]:
        bundle = harden(generate(params, t).bundle.numpy())
        rules[vocab[t].name] = ex.extract(bundle, params.config, vocab, t)
    return rules, params.config, meta


def _render(rule: ex.Rule, args) -> str:
    if args.ast:
        return ex.render_ast(rule)
    if args.variable_form:
        return ex.render_variable_form(rule)
    return ex.render_operator_form(rule)


def cmd_extract(args) -> int:
    if args.ast and args.variable_form:
        raise FlagConflict("--ast and --variable-form are exclusive")
    rules, config, meta = _checkpoint_rules(args.checkpoint)
    text = "".join(_render(r, args) + "\n" for r in rules.values())
    sys.stdout.write(text)
    if args.out:
        _write_text(args.out, text)
        _manifest(args, _seed(args), config=config.to_dict(),
                  artifacts=[str(args.out)]).write(f"{args.out}.manifest.json")
    return EXIT_OK


def read_rules(path, predicates: kbm.PredicateTable) -> dict[str, ex.Rule]:
    """One rule per line in any textual form; ``#`` lines are skipped."""
    unary = [p.name for p in predicates if p.arity == 1]
    try:
        lines = Path(path).read_text(encoding="utf-8").splitlines()
    except OSError as exc:
        raise IoFailure(f"{path}: {exc}") from exc
    rules = {}
    for lineno, line in enumerate(lines, 1):
        if not line.strip() or line.lstrip().startswith("#"):
            continue
        try:
            rule = ex.parse_rule(line, unary)
        except HierLogicError as exc:
            raise type(exc)(f"{path}:{lineno}: {exc}") from exc
        rules[rule.head] = rule
    return rules


def fitting_config(rules: dict[str, ex.Rule], vocab: kbm.PredicateTable,
                   max_T: int = 4, max_L: int = 3, max_C: int = 8) -> RuleSpaceConfig | None:
    """Smallest rule space (by T, then L, then C) that encodes every rule, if any."""
    for T in range(1, max_T + 1):
        for L in range(0, max_L + 1):
            for C in range(1, max_C + 1):
                config = RuleSpaceConfig(K=len(vocab), T=T, L=L, C=C)
                try:
                    for r in rules.values():
                        ex.encode(r, config, vocab)
                except NotEncodable:
                    continue
                return config
    return None


def classification_queries(splits: kbm.SplitDataset, split: str, predicates: Sequence[int],
                           seed: int) -> kbm.QueryBatch:
    """Split facts as positives plus negatives never true in any split.

    Unary predicates take every other entity as a negative; binary predicates
    take one random object corruption per positive.
    """
    facts = getattr(splits, split)
    known = splits.full_kb()
    rng = np.random.default_rng(seed)
    n = len(splits.entities)
    parts = []
    for p in predicates:
        rows = facts[facts[:, 1] == p]
        if not len(rows):
            continue
        parts.append(kbm.QueryBatch.from_facts(rows, label=1))
        if splits.predicates[p].arity == 1:
            neg = [e for e in range(n) if not known.contains(e, p, e)]
            parts.append(kbm.QueryBatch(neg, [p] * len(neg), neg, [0] * len(neg)))
        else:
            subj, obj = [], []
            for s, _, _ in rows.tolist():
                free = [o for o in range(n) if not known.contains(s, p, o)]
                if free:
                    subj.append(s)
                    obj.append(int(rng.choice(free)))
            parts.append(kbm.QueryBatch(subj, [p] * len(subj), obj, [0] * len(subj)))
    if not parts:
        raise HierLogicError(f"split {split!r} has no facts for the evaluated predicates")
    return kbm.QueryBatch.concat(parts)


def cmd_eval(args) -> int:
    if bool(args.checkpoint) == bool(args.rules):
        raise FlagConflict("give exactly one of --checkpoint and --rules")
    seed = _seed(args)
    splits = kbm.load_split_dataset(args.kb)
    train_kb = splits.kb("train")
    store = kbm.build_matrices(train_kb)
    params = None
    if args.checkpoint:
        rules, config, _ = _checkpoint_rules(args.checkpoint)
        params, _ = tr.checkpoint_load(args.checkpoint)
        if config.K != store.K:
            raise FlagConflict(f"checkpoint vocabulary size {config.K} does not match the KB ({store.K})")
    else:
        rules = read_rules(args.rules, splits.predicates)
        config = fitting_config(rules, store.vocab)
    pids = [splits.predicates.id(name) for name in rules]
    queries = classification_queries(splits, args.split, pids, seed)
    hard = ex.evaluate_hard(rules, train_kb, queries, config=config, store=store)
    metrics = {"accuracy": hard.accuracy, "queries": hard.n}
    facts = getattr(splits, args.split)
    binary = facts[np.isin(facts[:, 1], [p for p in pids if splits.predicates[p].arity == 2])]
    if len(binary) and config is not None:
        rank = tr.evaluate_rules_ranking(rules, config, store, binary, splits.all_facts(),
                                         workers=args.workers)
        metrics.update({f"hard_{k}": v for k, v in rank.items()})
    if params is not None and len(binary):
        soft = tr.evaluate_soft(params, store, binary, splits.all_facts(), pids,
                                workers=args.workers)
        metrics.update({f"soft_{k}": v for k, v in soft.items()})
    text = format_report(metrics, title=f"{args.split} split")
    sys.stdout.write(text)
    if args.out:
        _write_text(args.out, text)
        _manifest(args, seed, config=config.to_dict() if config else {},
                  kb_digests=_split_digests(splits), artifacts=[str(args.out)]
                  ).write(f"{args.out}.manifest.json")
    return EXIT_OK


def cmd_check_grad(args) -> int:
    settings = resolve_settings(args.config, args.set)
    rule, _ = tr.configs_from_mapping(settings)
    rule = {"T": 2, "L": 1, "C": 2, "d": 8, **rule}
    seed = _seed(args, settings)
    err = tr.gradient_check(rule=rule, seed=seed, max_coords=args.max_coords)
    ok = err < GRAD_TOLERANCE
    print(f"max relative error {err:.3e} ({'PASS' if ok else 'FAIL'}, tolerance {GRAD_TOLERANCE:g})")
    return EXIT_OK if ok else EXIT_CHECK


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="hierlogic", description=__doc__.splitlines()[0])
    ap.add_argument("--version", action="version", version=f"hierlogic {__version__}")
    ap.add_argument("--seed", type=int, default=None,
                    help="root seed for all randomness (default: config value or 0)")
    ap.add_argument("--workers", type=int, default=os.cpu_count() or 1,
                    help="evaluation worker threads; 1 forces deterministic order")
    ap.add_argument("--log-level", default="WARNING")
    sub = ap.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-es", help="write an Even/Successor KB")
    g.add_argument("--n", type=int, required=True)
    g.add_argument("--out", required=True)
    g.add_argument("--holdout-frac", type=float, default=0.2)
    g.add_argument("--valid-frac", type=float, default=0.0)
    g.set_defaults(func=cmd_gen_es)

    c = sub.add_parser("gen-comp", help="write a KB with a planted composition R3 = R1 then R2")
    c.add_argument("--n", type=int, default=500)
    c.add_argument("--noise", type=float, default=0.05)
    c.add_argument("--out", required=True)
    c.set_defaults(func=cmd_gen_comp)

    t = sub.add_parser("train", help="learn rules for target predicates")
    t.add_argument("--kb", required=True, help="directory with meta.tsv and split files")
    t.add_argument("--targets", help="comma-separated predicates (default: all)")
    t.add_argument("--config", help=f"key=value file (default: ${CONFIG_ENV})")
    t.add_argument("--out", required=True, help="run directory for checkpoint, report and rules")
    t.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                   help="override one config value; repeatable")
    t.add_argument("--epochs", type=int, help="override epochs")
    t.add_argument("--lr", type=float, help="override the Adam learning rate")
    t.add_argument("--batch-size", type=int, help="override positives per target per step")
    t.add_argument("--restarts", type=int, help="independent runs; the best hard objective is kept")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("extract", help="print the hard rules of a checkpoint")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--out", help="also write the rules to this file")
    e.add_argument("--variable-form", action="store_true",
                   help="print Horn clauses with existential variables")
    e.add_argument("--ast", action="store_true", help="print S-expressions")
    e.set_defaults(func=cmd_extract)

    v = sub.add_parser("eval", help="score rules or a checkpoint on a split")
    v.add_argument("--checkpoint", help="evaluate the rules and soft scores of a checkpoint")
    v.add_argument("--rules", help="evaluate rules from a text file, one per line")
    v.add_argument("--kb", required=True, help="directory with meta.tsv and split files")
    v.add_argument("--split", default="test", choices=("train", "valid", "test"))
    v.add_argument("--out", help="also write the report to this file")
    v.set_defaults(func=cmd_eval)

    k = sub.add_parser("check-grad", help="compare backprop with central differences on toy-3")
    k.add_argument("--config", help=f"key=value file (default: ${CONFIG_ENV})")
    k.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                   help="override one config value; repeatable")
    k.add_argument("--max-coords", type=int, default=4,
                   help="probed entries per parameter tensor (0 for all)")
    k.set_defaults(func=cmd_check_grad)
    return ap


def main(argv: Sequence[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    args = parser.parse_args(argv)
    args.argv = ["hierlogic", *argv]
    args.started = _now()
    if getattr(args, "max_coords", None) == 0:
        args.max_coords = None
    logging.basicConfig(level=args.log_level.upper(), format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except FlagConflict as exc:
        print(f"hierlogic: flag conflict: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (IoFailure, OSError) as exc:
        print(f"hierlogic: io error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (HierLogicError, ValueError) as exc:
        print(f"hierlogic: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
