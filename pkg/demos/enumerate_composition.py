"""Score every hard rule for R3 in the T=2, L=1 space of the composition KB.

Prints the best distinct rules by hard objective, the cross-entropy used to
select restarts.  Takes well under a minute.

    python demos/enumerate_composition.py --top 10
"""
import argparse
import itertools

import numpy as np

from hierlogic import diffmath as dm
from hierlogic import extractor as ex
from hierlogic import kb as kbm
from hierlogic import rulespace as rs
from hierlogic import trainer as tr


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--n", type=int, default=500)
    ap.add_argument("--top", type=int, default=10)
    args = ap.parse_args()

    splits = kbm.gen_composition_kb(args.n)
    store = kbm.build_matrices(splits.kb("train"))
    config = rs.RuleSpaceConfig(K=store.K, T=2, L=1)
    r3 = store.vocab.id("R3")
    batch = tr.selection_queries(store, [r3], 1, np.random.SeedSequence(0))[r3]
    y = batch.label.astype(np.float64)
    K, T = config.K, config.T

    best = {}
    for ops in itertools.product(range(K), repeat=T):
        for a, b, k in itertools.product(range(T), range(T), range(K)):
            bundle = rs.one_hot_bundle(config, ops, [a] * K, [b] * K, out=k)
            scores = rs.score_queries(bundle, store, batch, mask=True).scores
            obj = float(dm.cross_entropy(y, scores).data)
            text = ex.render_operator_form(ex.canonicalize(ex.extract(bundle, config, store.vocab, r3)))
            best[text] = min(obj, best.get(text, np.inf))
    print(f"{K ** T * T * T * K} bundles, {len(best)} distinct rules")
    for text, obj in sorted(best.items(), key=lambda kv: kv[1])[: args.top]:
        print(f"  {obj:.4f}  {text}")


if __name__ == "__main__":
    main()
