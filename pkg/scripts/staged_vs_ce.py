"""Test GLEU of the CE -> BoN -> Traverse-Ref schedule against CE alone at equal step budget."""
import argparse
import time

import numpy as np

from seqnat.core import make_rng
from seqnat.model import ModelParams
from seqnat.pipeline import TaskSpec, evaluate, generate_corpus, parse_strategy, train


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    ap.add_argument("--strategy", default="ce,bon:2,rl:traverse_ref")
    ap.add_argument("--steps", type=int, nargs="+", default=[3000, 300, 100])
    ap.add_argument("--batch", type=int, nargs="+", default=[32, 32, 16])
    ap.add_argument("--lr", type=float, nargs="+", default=[5e-3, 1e-3, 1e-3])
    ap.add_argument("--threads", type=int, default=1)
    args = ap.parse_args()

    staged = parse_strategy(args.strategy, args.steps, args.batch, args.lr)
    control = parse_strategy("ce", staged.total_steps, args.batch[0], args.lr[0])
    print("seed,ce_gleu,staged_gleu,gain,seconds")
    gains = []
    for seed in args.seeds:
        t0 = time.perf_counter()
        corpus = generate_corpus(TaskSpec("synonym", v_src=10, v_tgt=20, n_pairs=10_000, seed=seed))
        scores = []
        for sched in (control, staged):
            params = ModelParams.init(10, 20, 32, 64, 8, make_rng(seed, 99))
            params, _ = train(corpus, params, sched, seed=seed, threads=args.threads)
            scores.append(evaluate(params, corpus.test, ["gleu"])["gleu"])
        gains.append(scores[1] - scores[0])
        print(f"{seed},{scores[0]:.4f},{scores[1]:.4f},{gains[-1]:+.4f},{time.perf_counter() - t0:.1f}")
    print(f"mean gain {np.mean(gains):+.4f}")


if __name__ == "__main__":
    main()
