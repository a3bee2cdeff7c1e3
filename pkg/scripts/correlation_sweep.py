"""Pearson correlation of -CE/T and -BoN-L1 with GLEU as CE training progresses."""
import argparse

from seqnat.core import make_rng
from seqnat.model import ModelParams
from seqnat.pipeline import TaskSpec, correlate_losses, generate_corpus, parse_strategy, train


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--checkpoints", type=int, nargs="+", default=[50, 100, 200, 400, 800, 1600])
    ap.add_argument("--ngram", type=int, default=2)
    ap.add_argument("--n", type=int, default=500)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()

    corpus = generate_corpus(TaskSpec("synonym", v_src=10, v_tgt=20, n_pairs=10_000, seed=args.seed))
    params = ModelParams.init(10, 20, 32, 64, 8, make_rng(args.seed, 99))
    print("ce_steps,pearson_ce,pearson_bon")
    # one CE stage per interval; the lr schedule restarts each interval, so this is a sweep, not a single run
    done = 0
    for target in args.checkpoints:
        params, _ = train(corpus, params, parse_strategy("ce", target - done, 32, 5e-3), seed=args.seed + target)
        done = target
        out = correlate_losses(params, corpus.valid[:args.n], args.ngram)
        print(f"{target},{out['pearson_ce']:.4f},{out['pearson_bon']:.4f}")


if __name__ == "__main__":
    main()
