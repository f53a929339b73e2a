"""Learn Even and Zero on the even/successor KB and print the extracted rules.

    python demos/even_successor.py --n 50
"""
import argparse
import time

import numpy as np

from hierlogic import extractor as ex
from hierlogic import kb as kbm
from hierlogic import trainer as tr
from hierlogic.cli import classification_queries


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--n", type=int, default=50)
    ap.add_argument("--restarts", type=int, default=8)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()

    full, splits = kbm.gen_even_successor(args.n)
    print(f"{len(full)} facts, {len(splits.train)} for training, {len(splits.test)} held out")
    cfg = tr.TrainConfig(lr=1e-3, batch_size=512, epochs=150, pool_warmup=100,
                         restarts=args.restarts, seed=args.seed)
    t0 = time.perf_counter()
    res = tr.train(splits, ["Even", "Zero"], {"T": 2, "L": 1, "C": 2, "d": 32}, cfg)
    print(f"trained in {time.perf_counter() - t0:.0f}s, kept restart {res.report.restart}")

    rules = res.rules()
    for rule in rules.values():
        print(" ", ex.render_operator_form(rule))
        print("   ", ex.render_variable_form(rule))

    even = splits.predicates.id("Even")
    held = classification_queries(splits, "test", [even], seed=0)
    m = ex.evaluate_hard(rules, splits.kb("train"), held, config=res.config, store=res.store)
    print(f"held-out Even accuracy {m.accuracy:.3f} on {m.n} queries")
    np.set_printoptions(precision=2, suppress=True)
    print("operator attention for Even:")
    print(res.bundles()[even].op)


if __name__ == "__main__":
    main()
